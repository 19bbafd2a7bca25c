"""Image/trimap I/O, preprocessing, paired augmentation and dataset splits.

Images are float32 arrays ``[channels, height, width]`` with values in [0, 1].
Trimaps are uint8 arrays ``[height, width]`` over {0 background, 1 blade, 2 veins}.
On disk both are 8-bit PNGs; trimaps store the raw label values.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

NUM_CLASSES = 3
TRIMAP_COLORS = np.array([[0, 0, 0], [0, 200, 0], [220, 0, 0]], dtype=np.uint8)

DEFAULT_SIGMOID_GAIN = 10.0
DEFAULT_SIGMOID_CUTOFF = 0.5
DEFAULT_MAX_ROTATION_DEG = 30.0
DEFAULT_ZOOM_RANGE = (0.8, 1.2)


class ImageFormatError(ValueError):
    pass


class TrimapError(ValueError):
    pass


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PNG I/O


def _open_png(path) -> PILImage.Image:
    try:
        img = PILImage.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError, zlib.error) as exc:
        raise ImageFormatError(f"{path}: not a readable PNG ({exc})") from None
    if img.format != "PNG":
        raise ImageFormatError(f"{path}: expected PNG, found {img.format}")
    return img


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG as ``[c, h, w]`` floats in [0, 1]."""
    img = _open_png(path)
    if img.mode not in ("L", "RGB"):
        raise ImageFormatError(f"{path}: unsupported PNG mode {img.mode!r}; need 8-bit grayscale or RGB")
    arr = np.asarray(img, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr.astype(np.float32) / np.float32(255.0)


def to_bytes(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ImageFormatError(f"image must be [1|3, h, w], got shape {img.shape}")
    return np.clip(np.rint(img.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    b = to_bytes(img)
    pil = PILImage.fromarray(b[0], mode="L") if b.shape[0] == 1 else PILImage.fromarray(b.transpose(1, 2, 0), mode="RGB")
    pil.save(path, format="PNG")


def validate_trimap(mask: np.ndarray, source: str = "trimap") -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise TrimapError(f"{source}: trimap must be 2-D, got shape {mask.shape}")
    bad = (mask < 0) | (mask >= NUM_CLASSES)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise TrimapError(f"{source}: invalid label value {int(mask[r, c])} at row {r}, column {c}")
    return mask.astype(np.uint8)


def load_trimap(path) -> np.ndarray:
    img = _open_png(path)
    if img.mode != "L":
        raise ImageFormatError(f"{path}: trimap must be an 8-bit single-channel PNG, got mode {img.mode!r}")
    return validate_trimap(np.asarray(img, dtype=np.uint8), str(path))


def save_trimap(mask: np.ndarray, path) -> None:
    mask = validate_trimap(mask)
    PILImage.fromarray(mask, mode="L").save(path, format="PNG")


def colorize(mask: np.ndarray) -> np.ndarray:
    """Human-viewable RGB bytes ``[h, w, 3]``: background black, blade green, veins red."""
    return TRIMAP_COLORS[validate_trimap(mask)]


def save_colorized(mask: np.ndarray, path) -> None:
    PILImage.fromarray(colorize(mask), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# resizing and contrast


def _check_target(out_h: int, out_w: int) -> None:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres (corner-aligned = false), clamped at the borders
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _check_target(out_h, out_w)
    img = np.asarray(img, dtype=np.float32)
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    x = img.astype(np.float64)
    top = x[:, y0][:, :, x0] * (1 - fx) + x[:, y0][:, :, x1] * fx
    bot = x[:, y1][:, :, x0] * (1 - fx) + x[:, y1][:, :, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _nearest_axis(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64), n_in - 1)


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _check_target(out_h, out_w)
    mask = np.asarray(mask)
    h, w = mask.shape
    return mask[_nearest_axis(h, out_h)][:, _nearest_axis(w, out_w)].copy()


def sigmoid_correction(img: np.ndarray, gain: float = DEFAULT_SIGMOID_GAIN,
                       cutoff: float = DEFAULT_SIGMOID_CUTOFF) -> np.ndarray:
    """Contrast stretch ``1 / (1 + exp(gain * (cutoff - x)))`` applied per value."""
    if not gain > 0:
        raise ValueError(f"sigmoid gain must be positive, got {gain}")
    if not 0.0 <= cutoff <= 1.0:
        raise ValueError(f"sigmoid cutoff must lie in [0, 1], got {cutoff}")
    x = np.asarray(img, dtype=np.float64)
    return (1.0 / (1.0 + np.exp(gain * (cutoff - x)))).astype(np.float32)


def to_channels(img: np.ndarray, channels: int) -> np.ndarray:
    if img.shape[0] == channels:
        return img
    if img.shape[0] == 1 and channels == 3:
        return np.repeat(img, 3, axis=0)
    raise ImageFormatError(f"cannot convert a {img.shape[0]}-channel image to {channels} channels")


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    max_rotation_deg: float = DEFAULT_MAX_ROTATION_DEG
    zoom_range: tuple = DEFAULT_ZOOM_RANGE

    def __post_init__(self):
        if not 0 <= self.max_rotation_deg <= 180:
            raise ValueError(f"max_rotation_deg must be in [0, 180], got {self.max_rotation_deg}")
        lo, hi = self.zoom_range
        if not 0 < lo <= hi:
            raise ValueError(f"zoom_range must satisfy 0 < low <= high, got {self.zoom_range}")

    def sample(self, rng: np.random.Generator) -> tuple[float, float]:
        angle = rng.uniform(-self.max_rotation_deg, self.max_rotation_deg)
        zoom = rng.uniform(*self.zoom_range)
        return float(angle), float(zoom)


def _source_coords(h: int, w: int, angle_deg: float, zoom: float):
    # inverse map: output pixel -> source position. Positive angles rotate the
    # picture counter-clockwise as displayed (rows grow downwards).
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    sx = (c * xx - s * yy) / zoom + cx
    sy = (s * xx + c * yy) / zoom + cy
    return sy, sx


def warp_image(img: np.ndarray, angle_deg: float, zoom: float) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    _, h, w = img.shape
    sy, sx = _source_coords(h, w, angle_deg, zoom)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    src = img.astype(np.float64)
    out = np.zeros(img.shape, dtype=np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yi, xi = y0 + dy, x0 + dx
            ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            vals = src[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)] * ok
            out += vals * (wy * wx)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def warp_mask(mask: np.ndarray, angle_deg: float, zoom: float) -> np.ndarray:
    mask = np.asarray(mask)
    h, w = mask.shape
    sy, sx = _source_coords(h, w, angle_deg, zoom)
    yi = np.floor(sy + 0.5).astype(np.int64)
    xi = np.floor(sx + 0.5).astype(np.int64)
    ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    out = mask[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return np.where(ok, out, 0).astype(mask.dtype)


def augment(img: np.ndarray, mask: np.ndarray, seed, params: AugmentParams = AugmentParams()):
    """Random rotation about the centre plus zoom, shared by image and trimap.

    Uncovered pixels are filled with 0 (black / background).
    Returns ``(image, mask, (angle_deg, zoom))``.
    """
    angle, zoom = params.sample(np.random.default_rng(seed))
    return warp_image(img, angle, zoom), warp_mask(mask, angle, zoom), (angle, zoom)


# ---------------------------------------------------------------------------
# datasets


class Sample(NamedTuple):
    name: str
    image: np.ndarray
    mask: Optional[np.ndarray]
    source: str


def dataset_names(root) -> list[str]:
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise DatasetError(f"{root}: missing images/ directory")
    return sorted(p.stem for p in img_dir.glob("*.png"))


def load_dataset(root, require_trimaps: bool = True) -> list[Sample]:
    """Load ``images/<name>.png`` with ``trimaps/<name>.png``, ordered by name."""
    root = Path(root)
    names = dataset_names(root)
    if not names:
        raise DatasetError(f"{root}: no PNG images under images/")
    tri_dir = root / "trimaps"
    has_trimaps = tri_dir.is_dir()
    if require_trimaps and not has_trimaps:
        raise DatasetError(f"{root}: missing trimaps/ directory")
    if has_trimaps:
        tri_names = sorted(p.stem for p in tri_dir.glob("*.png"))
        if tri_names != names:
            only_img = sorted(set(names) - set(tri_names))
            only_tri = sorted(set(tri_names) - set(names))
            if require_trimaps or only_tri:
                raise DatasetError(
                    f"{root}: image/trimap names differ (images only: {only_img}, trimaps only: {only_tri})"
                )
            has_trimaps = False
    samples = []
    for name in names:
        img = load_image(root / "images" / f"{name}.png")
        mask = load_trimap(tri_dir / f"{name}.png") if has_trimaps else None
        if mask is not None and mask.shape != img.shape[1:]:
            raise DatasetError(f"{name}: image {img.shape[1:]} and trimap {mask.shape} sizes differ")
        samples.append(Sample(name, img, mask, name))
    return samples


def write_dataset(root, samples: Sequence[Sample]) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "trimaps").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image(s.image, root / "images" / f"{s.name}.png")
        if s.mask is not None:
            save_trimap(s.mask, root / "trimaps" / f"{s.name}.png")


@dataclass(frozen=True)
class SplitSpec:
    train: int
    valid: int
    test: int
    seed: int = 0

    def __post_init__(self):
        if min(self.train, self.valid, self.test) < 0:
            raise ValueError("split counts must be non-negative")


def split(sources: Sequence[str], spec: SplitSpec) -> tuple[list[str], list[str], list[str]]:
    """Partition source ids into train/valid/test by a seeded permutation.

    Membership depends only on the sorted set of ids and the split counts. Surplus
    sources are left unused.
    """
    ids = sorted(set(sources))
    if len(ids) != len(sources):
        raise DatasetError("source ids must be unique")
    need = spec.train + spec.valid + spec.test
    if need > len(ids):
        raise DatasetError(f"split {spec.train}/{spec.valid}/{spec.test} needs {need} sources, have {len(ids)}")
    order = np.random.default_rng(spec.seed).permutation(len(ids))
    picked = [ids[i] for i in order]
    a, b = spec.train, spec.train + spec.valid
    return picked[:a], picked[a:b], picked[b:need]


def augment_samples(samples: Sequence[Sample], copies: int, seed: int,
                    params: AugmentParams = AugmentParams()) -> list[Sample]:
    """Originals followed by ``copies`` augmented derivatives of each, tagged with their source."""
    out = list(samples)
    for idx, s in enumerate(samples):
        for k in range(copies):
            sub = np.random.SeedSequence([seed, idx, k])
            if s.mask is None:
                angle, zoom = params.sample(np.random.default_rng(sub))
                img, mask = warp_image(s.image, angle, zoom), None
            else:
                img, mask, _ = augment(s.image, s.mask, sub, params)
            out.append(Sample(f"{s.name}_aug{k}", img, mask, s.source))
    return out
