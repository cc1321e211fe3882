"""Model checkpoints as Named Tensor Archives with a descriptive metadata block."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from ..collab import DynamicDiffuser
from ..exceptions import ArgumentError
from ..unimodal import EpsModel, ModelConfig
from .ntar import read_archive, write_archive


def _config_meta(c: ModelConfig) -> dict:
    return {
        "resolution": str(c.resolution),
        "base_channels": str(c.base_channels),
        "channel_mult": ",".join(map(str, c.channel_mult)),
        "token_dim": str(c.token_dim),
        "attn_dim": str(c.attn_dim),
    }


def _config_from_meta(meta: dict) -> ModelConfig:
    return ModelConfig(
        resolution=int(meta["resolution"]),
        base_channels=int(meta["base_channels"]),
        channel_mult=tuple(int(v) for v in meta["channel_mult"].split(",")),
        token_dim=int(meta["token_dim"]),
        attn_dim=int(meta["attn_dim"]),
    )


def save_model(model, path, config_hash: str, T: int, extra: dict | None = None) -> Path:
    """Write an :class:`EpsModel` or :class:`DynamicDiffuser` checkpoint."""
    kind = "eps_model" if isinstance(model, EpsModel) else "dynamic_diffuser"
    tensors = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}
    meta = {
        "kind": kind,
        "modality": model.modality,
        "T": str(T),
        "config_hash": config_hash,
        **_config_meta(model.config),
        **getattr(model, "metadata", {}),
        **(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_archive(path, tensors, meta)
    return path


def load_model(path):
    tensors, meta = read_archive(path)
    cfg = _config_from_meta(meta)
    if meta.get("kind") == "eps_model":
        model = EpsModel(meta["modality"], cfg)
    elif meta.get("kind") == "dynamic_diffuser":
        model = DynamicDiffuser(meta["modality"], cfg)
    else:
        raise ArgumentError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in tensors.items()})
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    if isinstance(model, EpsModel):
        model.metadata.update({k: meta[k] for k in ("steps", "dataset_hash") if k in meta})
    return model, meta
