"""Condition encoders and uni-modal conditional noise predictors."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import nnkit
from .diffcore import RngStream, Schedule, loss_dm, make_linear_schedule
from .exceptions import ArgumentError, DivergenceError, UsageError
from .toyface import NUM_CLASSES, ToyFaceDataset

log = logging.getLogger(__name__)

MODALITIES = ("mask", "attribute")
TOKEN_DIM = 32
MASK_GRID = 8


@dataclass
class ConditionEmbedding:
    """Token matrix ``[N, L, d]`` tagged with the modality that produced it."""

    tokens: torch.Tensor
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ArgumentError(f"unknown modality {self.modality!r}")
        if self.tokens.dim() == 2:
            self.tokens = self.tokens.unsqueeze(0)
        if self.tokens.dim() != 3 or self.tokens.shape[1] < 1:
            raise ArgumentError("tokens must have shape [N, L, d] with L >= 1")

    def __len__(self):
        return self.tokens.shape[0]

    def select(self, index) -> "ConditionEmbedding":
        return ConditionEmbedding(self.tokens[index], self.modality)

    def repeat(self, n: int) -> "ConditionEmbedding":
        return ConditionEmbedding(self.tokens.expand(n, -1, -1), self.modality)

    def detach(self) -> "ConditionEmbedding":
        return ConditionEmbedding(self.tokens.detach(), self.modality)


def downsample_mask(masks: np.ndarray, grid: int = MASK_GRID) -> np.ndarray:
    """Majority class per block (ties go to the lowest class id); ``[N, H, W] -> [N, g, g]``."""
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = masks[None]
    n, h, w = masks.shape
    if h % grid or w % grid:
        raise ArgumentError(f"mask size {h}x{w} is not divisible by {grid}")
    if masks.size and (masks.min() < 0 or masks.max() >= NUM_CLASSES):
        raise ArgumentError(f"mask contains class ids outside 0..{NUM_CLASSES - 1}")
    bh, bw = h // grid, w // grid
    blocks = masks.reshape(n, grid, bh, grid, bw).transpose(0, 1, 3, 2, 4).reshape(n, grid, grid, bh * bw)
    counts = (blocks[..., None] == np.arange(NUM_CLASSES)).sum(-2)
    return counts.argmax(-1).astype(np.uint8)


def mask_one_hot(masks: np.ndarray, grid: int = MASK_GRID) -> torch.Tensor:
    """Row-major one-hot tokens ``[N, grid*grid, K]`` of the downsampled masks."""
    small = downsample_mask(masks, grid)
    eye = np.eye(NUM_CLASSES, dtype=np.float32)
    return torch.from_numpy(eye[small.reshape(small.shape[0], -1)])


class MaskEncoder(nn.Module):
    modality = "mask"

    def __init__(self, dim: int = TOKEN_DIM, grid: int = MASK_GRID):
        super().__init__()
        self.grid = grid
        self.proj = nn.Linear(NUM_CLASSES, dim, bias=False)
        self.pos = nn.Parameter(nnkit.sinusoidal_grid(grid, dim, nnkit.GRID_POS_BASE))

    def embed_one_hot(self, one_hot: torch.Tensor) -> torch.Tensor:
        return self.proj(one_hot) + self.pos

    def forward(self, masks) -> ConditionEmbedding:
        one_hot = mask_one_hot(masks, self.grid).to(self.pos.dtype)
        return ConditionEmbedding(self.embed_one_hot(one_hot), "mask")


class AttributeEncoder(nn.Module):
    """One token per attribute: ``a_i * w_i + b_i``."""

    modality = "attribute"

    def __init__(self, dim: int = TOKEN_DIM, n_attributes: int = 2):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_attributes, dim))
        self.bias = nn.Parameter(torch.randn(n_attributes, dim) * 0.5)

    def embed_values(self, values: torch.Tensor) -> torch.Tensor:
        return values[..., None] * self.weight + self.bias

    def forward(self, attributes) -> ConditionEmbedding:
        a = torch.as_tensor(np.asarray(attributes, dtype=np.float32)).to(self.weight.dtype)
        if a.dim() == 1:
            a = a[None]
        if not torch.isfinite(a).all():
            raise ArgumentError("attributes must be finite")
        return ConditionEmbedding(self.embed_values(a.clamp(0.0, 1.0)), "attribute")


def ctx_grid_for(modality: str) -> int | None:
    """Token-grid size for modalities whose tokens are spatially laid out."""
    return MASK_GRID if modality == "mask" else None


def make_encoder(modality: str, dim: int = TOKEN_DIM) -> nn.Module:
    if modality == "mask":
        return MaskEncoder(dim)
    if modality == "attribute":
        return AttributeEncoder(dim)
    raise ArgumentError(f"unknown modality {modality!r}")


def encode_mask(encoder: MaskEncoder, masks) -> ConditionEmbedding:
    return encoder(masks)


def encode_attributes(encoder: AttributeEncoder, attributes) -> ConditionEmbedding:
    return encoder(attributes)


@dataclass
class ModelConfig:
    resolution: int = 32
    base_channels: int = 32
    channel_mult: tuple = (1, 2, 2)
    token_dim: int = TOKEN_DIM
    attn_dim: int = 32


class EpsModel(nn.Module):
    """Condition encoder plus UNet noise predictor for one modality."""

    def __init__(self, modality: str, config: ModelConfig | None = None, out_channels: int = 3):
        super().__init__()
        if modality not in MODALITIES:
            raise ArgumentError(f"unknown modality {modality!r}")
        self._modality = modality
        self.config = config or ModelConfig()
        c = self.config
        self.encoder = make_encoder(modality, c.token_dim)
        self.unet = nnkit.UNet(3, out_channels, c.base_channels, c.channel_mult, c.token_dim,
                               c.resolution, attn_dim=c.attn_dim, ctx_grid=ctx_grid_for(modality))
        self.metadata: dict[str, str] = {}

    @property
    def modality(self) -> str:
        return self._modality

    def encode(self, condition) -> ConditionEmbedding:
        return self.encoder(condition)

    def forward(self, xt: torch.Tensor, t, tokens: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if tokens.shape[0] == 1 and xt.shape[0] > 1:
            tokens = tokens.expand(xt.shape[0], -1, -1)
        return self.unet(xt, t, tokens)


def predict_eps(m: EpsModel, xt: torch.Tensor, t, c: ConditionEmbedding) -> torch.Tensor:
    if c.modality != m.modality:
        raise UsageError(f"{m.modality} model cannot consume a {c.modality} embedding")
    return m(xt, t, c.tokens)


def conditions_for(dataset: ToyFaceDataset, modality: str):
    return dataset.masks if modality == "mask" else dataset.attributes


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """``[N, H, W, 3]`` images in [0, 1] -> ``[N, 3, H, W]`` in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2)
    return (x * 2 - 1).contiguous()


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`images_to_tensor`, clamped to [0, 1]."""
    return ((x.detach().clamp(-1, 1) + 1) / 2).permute(0, 2, 3, 1).contiguous().numpy()


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 16
    lr: float = 1e-4
    log_every: int = 100


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)


def dataset_hash(dataset: ToyFaceDataset) -> str:
    h = hashlib.sha256()
    for arr in (dataset.images, dataset.masks, dataset.attributes, dataset.split):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def _condition_inputs(model: EpsModel, cond):
    """Precompute encoder inputs so each step only runs the learned projection."""
    if model.modality == "mask":
        return mask_one_hot(cond, model.encoder.grid)
    return torch.as_tensor(np.asarray(cond, dtype=np.float32)).clamp(0, 1)


def _embed(model: EpsModel, inputs: torch.Tensor) -> torch.Tensor:
    if model.modality == "mask":
        return model.encoder.embed_one_hot(inputs)
    return model.encoder.embed_values(inputs)


def train_unimodal(modality: str, dataset: ToyFaceDataset, model_config: ModelConfig,
                   train_config: TrainConfig, rng: RngStream, schedule: Schedule | None = None,
                   model: EpsModel | None = None) -> tuple[EpsModel, TrainResult]:
    """Fit ``eps_theta(x_t, t, tau(c))`` on the training split with the epsilon-matching loss."""
    schedule = schedule or make_linear_schedule()
    train = dataset.subset("train") if (dataset.split == 1).any() else dataset
    if model is None:
        model = nnkit.seeded_init(lambda: EpsModel(modality, model_config), rng.spawn(0).seed_int())
    x_all = images_to_tensor(train.images)
    c_all = _condition_inputs(model, conditions_for(train, modality))
    opt = nnkit.Adam(model.named_parameters(), lr=train_config.lr)
    draws = rng.spawn(1)
    result = TrainResult()
    model.train()
    for step in range(train_config.steps):
        idx = draws.integers(0, len(x_all), train_config.batch_size)
        t = draws.integers(1, schedule.T + 1, train_config.batch_size)
        x0 = x_all[idx]
        eps = draws.normal(tuple(x0.shape))
        loss = loss_dm(model, x0, _embed(model, c_all[idx]), t, eps, schedule)
        if not torch.isfinite(loss):
            raise DivergenceError(f"{modality} training loss became {loss.item()} at step {step}")
        opt.zero_grad()
        nnkit.backward(loss, model.parameters())
        opt.step()
        result.losses.append(loss.item())
        if train_config.log_every and step % train_config.log_every == 0:
            log.info("%s step %d loss %.4f", modality, step, loss.item())
    model.eval()
    model.metadata.update({
        "modality": modality,
        "steps": str(train_config.steps),
        "dataset_hash": dataset_hash(dataset),
        "resolution": str(model_config.resolution),
        "T": str(schedule.T),
    })
    return model, result


@torch.no_grad()
def validation_loss(model_fn, x0: torch.Tensor, cond_tokens: torch.Tensor, schedule: Schedule,
                    rng: RngStream, repeats: int = 4) -> float:
    """Mean epsilon loss over fixed (t, eps) draws; ``model_fn(xt, t, tokens)``."""
    total = 0.0
    for _ in range(repeats):
        t = rng.integers(1, schedule.T + 1, len(x0))
        eps = rng.normal(tuple(x0.shape))
        total += loss_dm(model_fn, x0, cond_tokens, t, eps, schedule).item()
    return total / repeats


def model_config_dict(c: ModelConfig) -> dict:
    d = asdict(c)
    d["channel_mult"] = list(d["channel_mult"])
    return d
