"""Input checks shared by the estimator wrappers and the CLI."""
from __future__ import annotations

import numbers

import numpy as np

from .diffcore import RngStream
from .exceptions import ArgumentError
from .toyface import NUM_CLASSES, RESOLUTIONS


def check_images(X, resolution: int | None = None) -> np.ndarray:
    """Return ``X`` as float32 ``[N, H, W, 3]`` in [0, 1]; a single image gains a batch axis."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3 or X.shape[1] != X.shape[2]:
        raise ArgumentError(f"expected square [N, H, W, 3] images, got shape {X.shape}")
    if X.shape[1] not in RESOLUTIONS:
        raise ArgumentError(f"image size {X.shape[1]} not in {RESOLUTIONS}")
    if resolution is not None and X.shape[1] != resolution:
        raise ArgumentError(f"expected {resolution}x{resolution} images, got {X.shape[1]}")
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise ArgumentError("images must be finite and lie in [0, 1]")
    return X


def check_masks(masks, resolution: int | None = None) -> np.ndarray:
    m = np.asarray(masks)
    if m.ndim == 2:
        m = m[None]
    if m.ndim != 3 or m.shape[1] != m.shape[2]:
        raise ArgumentError(f"expected [N, H, W] class maps, got shape {m.shape}")
    if resolution is not None and m.shape[1] != resolution:
        raise ArgumentError(f"expected {resolution}x{resolution} masks, got {m.shape[1]}")
    if not np.issubdtype(m.dtype, np.integer):
        if not np.all(np.isfinite(m)) or np.any(m != np.round(m)):
            raise ArgumentError("mask entries must be integer class ids")
    if m.min() < 0 or m.max() >= NUM_CLASSES:
        raise ArgumentError(f"class ids must lie in [0, {NUM_CLASSES})")
    return m.astype(np.uint8)


def check_attributes(attributes) -> np.ndarray:
    a = np.asarray(attributes, dtype=np.float32)
    if a.ndim == 1:
        a = a[None]
    if a.ndim != 2 or a.shape[1] != 2:
        raise ArgumentError(f"expected [N, 2] (age, beard) attributes, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ArgumentError("attributes must be finite")
    return np.clip(a, 0.0, 1.0)


def check_condition(modality: str, value, resolution: int | None = None) -> np.ndarray:
    if modality == "mask":
        return check_masks(value, resolution)
    if modality == "attribute":
        return check_attributes(value)
    raise ArgumentError(f"unknown modality {modality!r}")


def check_consistent_length(*arrays) -> int:
    lengths = {len(a) for a in arrays}
    if len(lengths) != 1:
        raise ArgumentError(f"inconsistent numbers of samples: {sorted(lengths)}")
    return lengths.pop()


def check_random_state(random_state) -> RngStream:
    """``None`` -> seed 0, an int -> a fresh stream, an :class:`RngStream` passes through."""
    if random_state is None:
        return RngStream(0)
    if isinstance(random_state, RngStream):
        return random_state
    if isinstance(random_state, numbers.Integral) and not isinstance(random_state, bool) and random_state >= 0:
        return RngStream(int(random_state))
    raise ArgumentError(f"random_state must be None, a non-negative int or an RngStream, got {random_state!r}")
