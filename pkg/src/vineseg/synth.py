"""Parametric synthetic leaves: an elliptic blade with a midrib and lateral veins.

The trimap is rasterised first (veins over blade over background) and the
image is painted from it, so the ground truth is exact by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Sample, write_dataset

BLADE_FRACTION = (0.2, 0.7)
VEIN_FRACTION = (0.005, 0.05)

# colour palettes; the low-contrast vein sits close to the blade colour
BACKGROUND_RGB = (0.86, 0.86, 0.84)
BLADE_RGB = (0.30, 0.52, 0.24)
HIGH_VEIN_RGB = (0.78, 0.84, 0.48)
LOW_VEIN_OFFSET = (0.05, 0.05, 0.03)
DEFAULT_NOISE = 0.03


class InfeasibleGeometry(ValueError):
    pass


@dataclass
class LeafParams:
    center: tuple  # (row, col) in pixels
    semi_axes: tuple  # (major, minor) in pixels
    rotation: float  # radians, major axis angle from the column axis
    veins: list = field(default_factory=list)  # polylines of (row, col) points
    vein_width: float = 1.5
    background_rgb: tuple = BACKGROUND_RGB
    blade_rgb: tuple = BLADE_RGB
    vein_rgb: tuple = HIGH_VEIN_RGB
    noise_sigma: float = DEFAULT_NOISE
    seed: int = 0

    def inside(self, rows, cols) -> np.ndarray:
        """Whether points lie in the closed blade ellipse."""
        u, v = self._local(np.asarray(rows, dtype=np.float64), np.asarray(cols, dtype=np.float64))
        a, b = self.semi_axes
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0

    def _local(self, rows, cols):
        dy, dx = rows - self.center[0], cols - self.center[1]
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return c * dx + s * dy, -s * dx + c * dy

    def to_image(self, u: float, v: float) -> tuple[float, float]:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.center[0] + s * u + c * v, self.center[1] + c * u - s * v


def _segment_distance(rows, cols, p, q) -> np.ndarray:
    py, px = p
    qy, qx = q
    dy, dx = qy - py, qx - px
    L2 = dy * dy + dx * dx
    if L2 == 0:
        return np.hypot(rows - py, cols - px)
    t = np.clip(((rows - py) * dy + (cols - px) * dx) / L2, 0.0, 1.0)
    return np.hypot(rows - (py + t * dy), cols - (px + t * dx))


def rasterize(params: LeafParams, h: int, w: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    blade = params.inside(rows, cols)
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[blade] = 1
    half = params.vein_width / 2.0
    vein = np.zeros((h, w), dtype=bool)
    for line in params.veins:
        for p, q in zip(line[:-1], line[1:]):
            vein |= _segment_distance(rows, cols, p, q) <= half
    mask[vein & blade] = 2
    return mask


def check_geometry(params: LeafParams, mask: np.ndarray) -> None:
    for line in params.veins:
        pts = np.asarray(line, dtype=np.float64)
        if not params.inside(pts[:, 0], pts[:, 1]).all():
            raise InfeasibleGeometry("vein polyline leaves the blade ellipse")
    n = mask.size
    blade = np.count_nonzero(mask == 1) / n
    vein = np.count_nonzero(mask == 2) / n
    if not BLADE_FRACTION[0] <= blade <= BLADE_FRACTION[1]:
        raise InfeasibleGeometry(f"blade fraction {blade:.3f} outside {BLADE_FRACTION}")
    if not VEIN_FRACTION[0] <= vein <= VEIN_FRACTION[1]:
        raise InfeasibleGeometry(f"vein fraction {vein:.4f} outside {VEIN_FRACTION}")


def generate(params: LeafParams, h: int, w: int):
    """Render ``(image [3, h, w], trimap [h, w])`` for one leaf."""
    if h < 8 or w < 8:
        raise InfeasibleGeometry(f"{h}x{w} is too small to draw a leaf")
    mask = rasterize(params, h, w)
    check_geometry(params, mask)
    palette = np.array([params.background_rgb, params.blade_rgb, params.vein_rgb], dtype=np.float64)
    img = palette[mask].transpose(2, 0, 1)
    if params.noise_sigma > 0:
        rng = np.random.default_rng(params.seed)
        img = img + rng.normal(0.0, params.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def _jitter(rng, rgb, amount):
    return tuple(float(np.clip(c + rng.uniform(-amount, amount), 0.0, 1.0)) for c in rgb)


def sample_leaf_params(rng: np.random.Generator, h: int, w: int, contrast: str = "high",
                       noise_sigma: float = DEFAULT_NOISE, seed: int = 0) -> LeafParams:
    if contrast not in ("high", "low", "none"):
        raise ValueError(f"contrast must be 'high', 'low' or 'none', got {contrast!r}")
    m = min(h, w)
    center = (h / 2 + rng.uniform(-0.04, 0.04) * h, w / 2 + rng.uniform(-0.04, 0.04) * w)
    a = rng.uniform(0.38, 0.46) * m
    b = a * rng.uniform(0.62, 0.85)
    rotation = rng.uniform(0.0, math.pi)
    width = max(1.0, 1.2 * m / 64)
    p = LeafParams(center, (a, b), rotation, vein_width=width, seed=seed, noise_sigma=noise_sigma)

    tip = 0.88 * a
    p.veins.append([p.to_image(-tip, 0.0), p.to_image(tip, 0.0)])
    n_lateral = int(rng.integers(2, 4))
    for k in range(n_lateral):
        u0 = -0.5 * a + (k + rng.uniform(0.2, 0.8)) * (1.1 * a / n_lateral)
        for side in (-1.0, 1.0):
            ang = rng.uniform(math.radians(35), math.radians(55))
            du, dv = math.cos(ang), side * math.sin(ang)
            # distance to the ellipse boundary along (du, dv) from (u0, 0)
            A = (du / a) ** 2 + (dv / b) ** 2
            B = 2 * u0 * du / a ** 2
            Cc = (u0 / a) ** 2 - 1
            reach = (-B + math.sqrt(B * B - 4 * A * Cc)) / (2 * A)
            length = reach * rng.uniform(0.5, 0.75)
            p.veins.append([p.to_image(u0, 0.0), p.to_image(u0 + length * du, length * dv)])

    p.background_rgb = _jitter(rng, BACKGROUND_RGB, 0.04)
    p.blade_rgb = _jitter(rng, BLADE_RGB, 0.04)
    if contrast == "high":
        p.vein_rgb = _jitter(rng, HIGH_VEIN_RGB, 0.04)
    elif contrast == "low":
        p.vein_rgb = tuple(float(np.clip(c + d, 0, 1)) for c, d in zip(p.blade_rgb, LOW_VEIN_OFFSET))
    else:
        p.vein_rgb = p.blade_rgb
    return p


def random_leaf(rng: np.random.Generator, h: int, w: int, contrast: str = "high",
                noise_sigma: float = DEFAULT_NOISE, seed: int = 0, max_tries: int = 50):
    """Sample parameters until the geometry is feasible; returns ``(params, image, mask)``."""
    last = None
    for _ in range(max_tries):
        params = sample_leaf_params(rng, h, w, contrast, noise_sigma, seed)
        try:
            img, mask = generate(params, h, w)
        except InfeasibleGeometry as exc:
            last = exc
            continue
        return params, img, mask
    raise InfeasibleGeometry(f"no feasible leaf at {h}x{w} after {max_tries} tries: {last}")


def generate_samples(n: int, h: int, w: int, contrast: str = "high", seed: int = 0,
                     noise_sigma: float = DEFAULT_NOISE) -> list[Sample]:
    if n < 1:
        raise ValueError("need at least one sample")
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        pair_seed = int(rng.integers(0, 2 ** 31 - 1))
        _, img, mask = random_leaf(rng, h, w, contrast, noise_sigma, pair_seed)
        name = f"leaf_{i:04d}"
        out.append(Sample(name, img, mask, name))
    return out


def generate_dataset(out_dir, n: int, h: int, w: int, contrast: str = "high", seed: int = 0,
                     noise_sigma: float = DEFAULT_NOISE) -> Path:
    """Write ``n`` leaves as ``images/leaf_XXXX.png`` + ``trimaps/leaf_XXXX.png``."""
    out_dir = Path(out_dir)
    samples = generate_samples(n, h, w, contrast, seed, noise_sigma)
    try:
        write_dataset(out_dir, samples)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out_dir}: {exc}") from exc
    return out_dir
