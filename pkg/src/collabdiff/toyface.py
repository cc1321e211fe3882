"""Procedural "toy faces" with exact segmentation and attribute ground truth.

Every scene renders to an ``H x W x 3`` image in ``[0, 1]`` plus a class map. The
two attributes are painted into the skin class only, in fixed channels, so they
can be read back exactly:

* age darkens nothing but raises the blue channel of the forehead band in
  horizontal stripes (full strength on even rows, half on odd rows);
* beard lowers the green channel of the chin region in a stipple checkerboard
  (full strength on even cells, half on odd cells).

Texture noise lives in the red channel, so it never disturbs either reading.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .diffcore import RngStream
from .exceptions import ArgumentError

CLASS_NAMES = ("background", "skin", "hair", "eye_l", "eye_r", "brow", "nose", "mouth")
BACKGROUND, SKIN, HAIR, EYE_L, EYE_R, BROW, NOSE, MOUTH = range(8)
NUM_CLASSES = len(CLASS_NAMES)

PROTOTYPES = np.array(
    [
        [0.00, 0.00, 0.00],
        [0.95, 0.75, 0.45],
        [0.40, 0.20, 0.05],
        [0.10, 0.35, 0.95],
        [0.05, 0.90, 0.65],
        [0.45, 0.05, 0.60],
        [0.95, 1.00, 0.05],
        [0.85, 0.05, 0.10],
    ],
    dtype=np.float32,
)
TEXTURE_AMPLITUDE = 0.06
AGE_STRENGTH = 0.20
BEARD_STRENGTH = 0.30
RESOLUTIONS = (16, 32)

# minimum region sizes a scene must have for the attribute encodings to be readable
MIN_FOREHEAD_ROWS = 2
MIN_CHIN_PIXELS = 4


@dataclass(frozen=True)
class ToyFaceScene:
    """Scene geometry in unit canvas coordinates (x right, y down) plus attributes."""

    resolution: int
    cx: float
    cy: float
    ax: float
    ay: float
    fringe: float      # hairline as a fraction of face height from the top
    hair_len: float    # side hair bottom as a fraction of face height
    eye_dx: float
    eye_y: float
    eye_rx: float
    eye_ry: float
    brow_gap: float
    nose_y: float
    nose_r: float
    mouth_y: float
    mouth_w: float
    mouth_curve: float
    age: float
    beard: float
    texture_seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyFaceScene":
        return cls(**{f.name: d[f.name] for f in fields(cls)})

    @property
    def attributes(self) -> np.ndarray:
        return np.array([self.age, self.beard], dtype=np.float32)


@dataclass(frozen=True)
class AttributeCondition:
    age: float
    beard: float

    def __post_init__(self):
        for name in ("age", "beard"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ArgumentError(f"{name} must be finite")
            object.__setattr__(self, name, float(np.clip(v, 0.0, 1.0)))

    def as_array(self) -> np.ndarray:
        return np.array([self.age, self.beard], dtype=np.float32)


@dataclass
class ExtractedAttributes:
    """Attribute readout; ``None`` marks an unmeasurable attribute."""

    age: float | None
    beard: float | None

    @property
    def measurable(self) -> bool:
        return self.age is not None and self.beard is not None


def _grid(resolution: int):
    c = (np.arange(resolution) + 0.5) / resolution
    return np.meshgrid(c, c, indexing="xy")  # xs, ys; row index is y


def _draw_scene(rng: RngStream, resolution: int) -> ToyFaceScene:
    u = rng.uniform
    ay = u(0.30, 0.37)
    cy = u(0.55, 0.98 - ay)
    ax = u(0.26, 0.35)
    cx = u(0.05 + 1.2 * ax, 0.95 - 1.2 * ax)
    return ToyFaceScene(
        resolution=resolution,
        cx=cx, cy=cy, ax=ax, ay=ay,
        fringe=u(0.02, 0.14),
        hair_len=u(0.25, 1.0),
        eye_dx=u(0.35, 0.50) * ax,
        eye_y=u(0.42, 0.48),
        eye_rx=u(0.045, 0.075),
        eye_ry=u(0.035, 0.055),
        brow_gap=u(0.01, 0.03),
        nose_y=u(0.58, 0.64),
        nose_r=u(0.025, 0.045),
        mouth_y=u(0.74, 0.78),
        mouth_w=u(0.30, 0.50) * ax,
        mouth_curve=u(-0.04, 0.04),
        age=u(0.0, 1.0),
        beard=u(0.0, 1.0),
        texture_seed=int(rng.integers(0, 2**31 - 1)),
    )


def scene_violations(scene: ToyFaceScene) -> list[str]:
    """Geometric invariant checks; an empty list means the scene is valid."""
    out = []
    s = scene
    if not (0 <= s.age <= 1 and 0 <= s.beard <= 1):
        out.append("attributes outside [0, 1]")
    if s.cx - 1.2 * s.ax < 0 or s.cx + 1.2 * s.ax > 1:
        out.append("face/hair exceeds canvas horizontally")
    if s.cy - 1.15 * s.ay + 0.03 < 0 or s.cy + s.ay > 1:
        out.append("face/hair exceeds canvas vertically")
    if 2 * s.eye_dx <= 2 * s.eye_rx:
        out.append("eyes overlap")
    if s.mouth_y * 2 * s.ay <= s.nose_y * 2 * s.ay + 1.4 * s.nose_r:
        out.append("mouth not below nose")
    mask = render_mask(scene)
    classes = set(np.unique(mask).tolist())
    for c in (SKIN, HAIR, EYE_L, EYE_R, BROW, NOSE, MOUTH):
        if c not in classes:
            out.append(f"class {CLASS_NAMES[c]} missing")
    eyes_l, eyes_r = np.argwhere(mask == EYE_L), np.argwhere(mask == EYE_R)
    if len(eyes_l) and len(eyes_r):
        if eyes_l[:, 1].max() + 1 >= eyes_r[:, 1].min():
            out.append("eyes not disjoint")
    fore = forehead_region(mask)
    if len(np.unique(np.nonzero(fore)[0])) < MIN_FOREHEAD_ROWS:
        out.append("forehead band too small")
    if chin_region(mask).sum() < MIN_CHIN_PIXELS:
        out.append("chin region too small")
    return out


def sample_scene(rng: RngStream, resolution: int = 32, max_tries: int = 1000) -> ToyFaceScene:
    """Draw a valid scene; invalid draws are rejected and redrawn from the same stream."""
    if resolution not in RESOLUTIONS:
        raise ArgumentError(f"resolution must be one of {RESOLUTIONS}")
    for _ in range(max_tries):
        scene = _draw_scene(rng, resolution)
        if not scene_violations(scene):
            return scene
    raise RuntimeError("could not draw a valid scene")  # pragma: no cover


def render_mask(scene: ToyFaceScene) -> np.ndarray:
    s = scene
    r = s.resolution
    xs, ys = _grid(r)
    top = s.cy - s.ay
    height = 2 * s.ay
    mask = np.zeros((r, r), dtype=np.uint8)

    face = ((xs - s.cx) / s.ax) ** 2 + ((ys - s.cy) / s.ay) ** 2 <= 1
    skin = face & (ys >= top + s.fringe * height)
    outer = ((xs - s.cx) / (1.2 * s.ax)) ** 2 + ((ys - s.cy + 0.03) / (1.15 * s.ay)) ** 2 <= 1
    hair = outer & (ys < top + s.hair_len * height) & ~skin
    mask[hair] = HAIR
    mask[skin] = SKIN

    eye_y = top + s.eye_y * height
    for cls, ex in ((EYE_L, s.cx - s.eye_dx), (EYE_R, s.cx + s.eye_dx)):
        eye = ((xs - ex) / s.eye_rx) ** 2 + ((ys - eye_y) / s.eye_ry) ** 2 <= 1
        eye[int(eye_y * r), int(ex * r)] = True
        brow_row = max(0, np.nonzero(eye.any(axis=1))[0].min() - 1 - int(s.brow_gap * r))
        mask[brow_row, np.abs(xs[0] - ex) <= 1.2 * s.eye_rx] = BROW
        mask[eye] = cls

    ny = top + s.nose_y * height
    nose = ((xs - s.cx) / s.nose_r) ** 2 + ((ys - ny) / (1.4 * s.nose_r)) ** 2 <= 1
    nose[int(ny * r), int(s.cx * r)] = True
    mask[nose] = NOSE

    my = top + s.mouth_y * height
    rel = (xs - s.cx) / s.mouth_w
    mouth = (np.abs(rel) <= 1) & (np.abs(ys - (my + s.mouth_curve * rel**2)) <= 0.55 / r)
    mouth[int(my * r), int(s.cx * r)] = True
    mask[mouth] = MOUTH
    return mask


def forehead_region(mask: np.ndarray) -> np.ndarray:
    """Skin pixels above the topmost brow/eye row."""
    rows = np.nonzero(np.isin(mask, (BROW, EYE_L, EYE_R)).any(axis=1))[0]
    region = np.zeros(mask.shape, dtype=bool)
    if rows.size == 0:
        return region
    region[: rows.min()] = mask[: rows.min()] == SKIN
    return region


def chin_region(mask: np.ndarray) -> np.ndarray:
    """Skin pixels below the bottommost mouth row."""
    rows = np.nonzero((mask == MOUTH).any(axis=1))[0]
    region = np.zeros(mask.shape, dtype=bool)
    if rows.size == 0:
        return region
    region[rows.max() + 1:] = mask[rows.max() + 1:] == SKIN
    return region


def _stripe_weights(shape) -> np.ndarray:
    rows = np.arange(shape[0])[:, None]
    return np.where(rows % 2 == 0, 1.0, 0.5) * np.ones(shape)


def _stipple_weights(shape) -> np.ndarray:
    i, j = np.indices(shape)
    return np.where((i + j) % 2 == 0, 1.0, 0.5)


def render(scene: ToyFaceScene) -> tuple[np.ndarray, np.ndarray]:
    """Render ``(image [H, W, 3] float32 in [0, 1], mask [H, W] uint8)``."""
    mask = render_mask(scene)
    img = PROTOTYPES[mask].astype(np.float64)
    fore = forehead_region(mask)
    chin = chin_region(mask)
    img[..., 2] += np.where(fore, AGE_STRENGTH * scene.age * _stripe_weights(mask.shape), 0.0)
    img[..., 1] -= np.where(chin, BEARD_STRENGTH * scene.beard * _stipple_weights(mask.shape), 0.0)
    tex = np.random.default_rng(scene.texture_seed).uniform(-TEXTURE_AMPLITUDE, TEXTURE_AMPLITUDE, mask.shape)
    img[..., 0] += tex
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def parse_mask(image: np.ndarray) -> np.ndarray:
    """Nearest-prototype class per pixel; accepts ``[H, W, 3]`` or ``[N, H, W, 3]``."""
    img = np.asarray(image, dtype=np.float32)
    if img.shape[-1] != 3:
        raise ArgumentError("image must have a trailing RGB axis")
    d = ((img[..., None, :] - PROTOTYPES) ** 2).sum(-1)
    return d.argmin(-1).astype(np.uint8)


def extract_attributes(image: np.ndarray, mask: np.ndarray | None = None) -> ExtractedAttributes:
    """Read age and beard back out of an image.

    ``mask`` defaults to ``parse_mask(image)``. Values are clamped to [0, 1];
    regions too small to measure yield ``None``.
    """
    img = np.nan_to_num(np.asarray(image, dtype=np.float64), nan=0.0)
    if mask is None:
        mask = parse_mask(img)
    fore = forehead_region(mask)
    chin = chin_region(mask)

    age = None
    if len(np.unique(np.nonzero(fore)[0])) >= MIN_FOREHEAD_ROWS:
        w = _stripe_weights(mask.shape)[fore]
        age = float(np.clip((img[..., 2][fore] - PROTOTYPES[SKIN, 2]).sum() / (AGE_STRENGTH * w.sum()), 0, 1))
    beard = None
    if chin.sum() >= MIN_CHIN_PIXELS:
        w = _stipple_weights(mask.shape)[chin]
        beard = float(np.clip((PROTOTYPES[SKIN, 1] - img[..., 1][chin]).sum() / (BEARD_STRENGTH * w.sum()), 0, 1))
    return ExtractedAttributes(age, beard)


def _dominant_share(region: np.ndarray) -> float:
    """Fraction of a class's pixels in its largest 8-connected component."""
    labels, n = ndimage.label(region, structure=np.ones((3, 3)))
    if n == 0:
        return 0.0
    return float(np.bincount(labels.ravel())[1:].max() / region.sum())


def is_valid_layout(mask: np.ndarray) -> bool:
    """Whether a (parsed) class map looks like a face.

    Skin and every facial feature must be present and mostly one blob, the eyes
    roughly level and left of right, and eyes, nose and mouth ordered top to bottom.
    """
    mask = np.asarray(mask)
    present = {c: np.argwhere(mask == c) for c in (SKIN, EYE_L, EYE_R, NOSE, MOUTH)}
    if any(len(v) == 0 for v in present.values()):
        return False
    if len(present[SKIN]) < mask.size // 10:
        return False
    for c in present:
        if _dominant_share(mask == c) < 0.8:
            return False
    el, er = present[EYE_L].mean(0), present[EYE_R].mean(0)
    nose, mouth = present[NOSE].mean(0), present[MOUTH].mean(0)
    eye_row = (el[0] + er[0]) / 2
    level = abs(el[0] - er[0]) <= mask.shape[0] / 8
    return bool(level and el[1] < er[1] and eye_row < nose[0] < mouth[0])


# dataset -------------------------------------------------------------------

@dataclass
class ToyFaceDataset:
    images: np.ndarray      # [n, H, W, 3] float32
    masks: np.ndarray       # [n, H, W] uint8
    attributes: np.ndarray  # [n, 2] float32
    split: np.ndarray       # [n] uint8, 0 = train, 1 = val
    seed: int = 0

    def __len__(self):
        return len(self.images)

    @property
    def resolution(self) -> int:
        return self.images.shape[1]

    def subset(self, which: str) -> "ToyFaceDataset":
        flag = {"train": 0, "val": 1}[which]
        keep = self.split == flag
        return ToyFaceDataset(self.images[keep], self.masks[keep], self.attributes[keep], self.split[keep], self.seed)

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {"images": self.images, "masks": self.masks, "attributes": self.attributes, "split": self.split}


def generate_dataset(n: int, resolution: int, rng: RngStream) -> ToyFaceDataset:
    if n < 1:
        raise ArgumentError("n must be >= 1")
    images = np.empty((n, resolution, resolution, 3), dtype=np.float32)
    masks = np.empty((n, resolution, resolution), dtype=np.uint8)
    attrs = np.empty((n, 2), dtype=np.float32)
    for i in range(n):
        scene = sample_scene(rng.spawn(i), resolution)
        images[i], masks[i] = render(scene)
        attrs[i] = scene.attributes
    split = np.zeros(n, dtype=np.uint8)
    split[int(round(0.9 * n)):] = 1
    return ToyFaceDataset(images, masks, attrs, split, seed=rng.seed)


def build_dataset(n: int, resolution: int, rng: RngStream, out_path) -> Path:
    """Generate ``n`` scenes and write them as a Named Tensor Archive."""
    from .evalcli.ntar import write_archive

    ds = generate_dataset(n, resolution, rng)
    meta = {"kind": "toyface-dataset", "n": str(n), "resolution": str(resolution), "seed": str(rng.seed)}
    out_path = Path(out_path)
    write_archive(out_path, ds.to_tensors(), meta)
    return out_path


def load_dataset(path) -> ToyFaceDataset:
    from .evalcli.ntar import read_archive

    tensors, meta = read_archive(path)
    return ToyFaceDataset(tensors["images"], tensors["masks"], tensors["attributes"], tensors["split"],
                          seed=int(meta.get("seed", 0)))
