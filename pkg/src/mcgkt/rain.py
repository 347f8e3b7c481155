"""Synthetic rain (rainy = clamp(clean + rain, 0, 1)), PNG pair I/O and patch sampling.

Images are ``[3, H, W]`` float32 arrays in ``[0, 1]``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataIOError

MODES = ("regular", "irregular")
N_DIRECTIONS = 5


@dataclass
class ImagePair:
    clean: np.ndarray
    rainy: np.ndarray
    rain: Optional[np.ndarray] = None   # None for pairs read from disk
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.clean.shape


@dataclass(frozen=True)
class RainConfig:
    """Streak statistics. Lengths and widths are in pixels, angles in degrees from vertical."""

    density: float = 8000.0                  # streaks per megapixel
    streak_count: Optional[int] = None        # overrides density when set
    angle_range: tuple = (-30.0, 30.0)
    length_range: tuple = (8.0, 20.0)
    width_range: tuple = (1.0, 2.0)
    intensity_range: tuple = (0.35, 0.85)
    blur: float = 0.6                         # Gaussian sigma, 0 disables
    mode: str = "regular"
    seed: int = 0

    def __post_init__(self):
        def rng_ok(name, lo_bound, hi_bound, lo_open=False):
            lo, hi = getattr(self, name)
            bad = lo > hi or lo < lo_bound or hi > hi_bound or (lo_open and lo <= lo_bound)
            if bad:
                raise ConfigError(f"{name}={getattr(self, name)!r} outside bounds [{lo_bound}, {hi_bound}]")

        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.density <= 1e6:
            raise ConfigError(f"density must be in [0, 1e6], got {self.density}")
        if self.streak_count is not None and self.streak_count < 0:
            raise ConfigError("streak_count must be >= 0")
        rng_ok("angle_range", -90.0, 90.0)
        rng_ok("length_range", 1.0, 1e4)
        rng_ok("width_range", 0.0, 100.0, lo_open=True)
        rng_ok("intensity_range", 0.0, 1.0, lo_open=True)
        if not 0 <= self.blur <= 20:
            raise ConfigError(f"blur must be in [0, 20], got {self.blur}")

    def directions(self) -> np.ndarray:
        return np.linspace(self.angle_range[0], self.angle_range[1], N_DIRECTIONS)

    def to_dict(self) -> dict:
        return asdict(self)


def _segment_coverage(shape, p0, p1, width):
    """Anti-aliased coverage of a thick segment, cropped to its bounding box."""
    h, w = shape
    pad = width / 2 + 1
    x0 = max(int(math.floor(min(p0[0], p1[0]) - pad)), 0)
    x1 = min(int(math.ceil(max(p0[0], p1[0]) + pad)) + 1, w)
    y0 = max(int(math.floor(min(p0[1], p1[1]) - pad)), 0)
    y1 = min(int(math.ceil(max(p0[1], p1[1]) + pad)) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return None
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    px, py = xs + 0.5, ys + 0.5
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    seg2 = dx * dx + dy * dy
    t = np.clip(((px - p0[0]) * dx + (py - p0[1]) * dy) / seg2, 0, 1) if seg2 > 0 else 0.0
    dist = np.hypot(px - (p0[0] + t * dx), py - (p0[1] + t * dy))
    cov = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)
    return (slice(y0, y1), slice(x0, x1)), cov


def render_rain(h: int, w: int, config: RainConfig) -> tuple:
    """Rain layer ``[1, H, W]`` and the list of per-streak angles used."""
    rng = np.random.default_rng(config.seed)
    if config.streak_count is not None:
        count = config.streak_count
    else:
        count = int(rng.poisson(config.density * h * w / 1e6))
    layer = np.zeros((h, w), dtype=np.float64)
    if config.mode == "regular":
        shared = float(config.directions()[rng.integers(N_DIRECTIONS)])
    angles = []
    for _ in range(count):
        angle = shared if config.mode == "regular" else float(rng.uniform(*config.angle_range))
        length = rng.uniform(*config.length_range)
        width = rng.uniform(*config.width_range)
        inten = rng.uniform(*config.intensity_range)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        theta = math.radians(angle)
        ux, uy = math.sin(theta), math.cos(theta)
        if config.mode == "regular":
            pieces = [(-0.5, 0.5)]
        else:
            # broken streak: a few dashes with random gaps
            cuts = np.sort(rng.uniform(-0.5, 0.5, size=2 * int(rng.integers(1, 4))))
            pieces = list(zip(cuts[0::2], cuts[1::2]))
        for a, b in pieces:
            p0 = (cx + a * length * ux, cy + a * length * uy)
            p1 = (cx + b * length * ux, cy + b * length * uy)
            hit = _segment_coverage((h, w), p0, p1, width)
            if hit is not None:
                win, cov = hit
                np.maximum(layer[win], inten * cov, out=layer[win])
        angles.append(angle)
    if config.blur > 0 and count:
        layer = gaussian_filter(layer, config.blur, mode="constant", truncate=4.0)
    return layer[None].astype(np.float32), angles


def synthesize_rain(clean: np.ndarray, config: RainConfig) -> ImagePair:
    """Render a rain layer and composite it additively onto ``clean``."""
    clean = np.asarray(clean, dtype=np.float32)
    if clean.ndim != 3 or clean.shape[0] != 3:
        raise ConfigError(f"clean image must be [3,H,W], got {clean.shape}")
    _, h, w = clean.shape
    if h < 16 or w < 16:
        raise ConfigError(f"clean image must be at least 16x16, got {h}x{w}")
    if clean.min() < 0 or clean.max() > 1:
        raise ConfigError("clean image values must lie in [0, 1]")
    rain, angles = render_rain(h, w, config)
    rainy = np.clip(clean + rain, 0.0, 1.0)
    return ImagePair(clean=clean, rainy=rainy, rain=rain,
                     meta={"angles": angles, "mode": config.mode, "seed": config.seed})


def synthetic_scene(h: int, w: int, seed: int = 0) -> np.ndarray:
    """A smooth procedural clean image: colour gradient, blobs and mild texture."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ys, xs = ys / max(h - 1, 1), xs / max(w - 1, 1)
    c0, c1 = rng.uniform(0.1, 0.6, 3), rng.uniform(0.1, 0.6, 3)
    direction = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(direction) * xs + np.sin(direction) * ys
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.08, 0.35, 2)
        mask = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1
        if rng.random() < 0.5:
            mask = (np.abs(ys - cy) <= ry) & (np.abs(xs - cx) <= rx)
        img[:, mask] = rng.uniform(0.05, 0.75, 3)[:, None]
    fy, fx = rng.uniform(2, 8, 2)
    img += 0.05 * np.sin(2 * np.pi * (fy * ys + fx * xs) + rng.uniform(0, 2 * np.pi))
    img = gaussian_filter(img, sigma=(0, 0.7, 0.7))
    return np.clip(img, 0, 1).astype(np.float32)


# ---------------------------------------------------------------- PNG I/O

def load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise DataIOError(f"cannot read image {path}: {exc}") from None
    return arr.transpose(2, 0, 1) / np.float32(255.0)


def save_image(image, path) -> Path:
    """Write a ``[3,H,W]`` array in [0,1] as 8-bit RGB PNG (round(clamp(x)*255))."""
    arr = np.asarray(getattr(image, "data", image))
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataIOError(f"save_image expects [3,H,W], got {arr.shape} for {path}")
    q = np.round(np.clip(arr, 0, 1) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    path = Path(path)
    try:
        Image.fromarray(q).save(path, format="PNG")
    except OSError as exc:
        raise DataIOError(f"cannot write image {path}: {exc}") from None
    return path


def load_pair(rainy_path, clean_path) -> ImagePair:
    rainy, clean = load_image(rainy_path), load_image(clean_path)
    if rainy.shape != clean.shape:
        raise DataIOError(
            f"size mismatch: {rainy_path} is {rainy.shape[2]}x{rainy.shape[1]}, "
            f"{clean_path} is {clean.shape[2]}x{clean.shape[1]}")
    return ImagePair(clean=clean, rainy=rainy, meta={"rainy_path": str(rainy_path),
                                                     "clean_path": str(clean_path)})


def pair_stems(root) -> tuple:
    """Matched stems (sorted) and the unmatched ones from ``root/rainy`` vs ``root/clean``."""
    root = Path(root)
    rainy_dir, clean_dir = root / "rainy", root / "clean"
    for d in (rainy_dir, clean_dir):
        if not d.is_dir():
            raise DataIOError(f"missing dataset directory {d}")
    rainy = {p.stem for p in rainy_dir.glob("*.png")}
    clean = {p.stem for p in clean_dir.glob("*.png")}
    return sorted(rainy & clean), sorted(rainy ^ clean)


def load_dataset(root) -> list:
    """``[(stem, ImagePair), ...]`` from ``root/rainy/*.png`` and ``root/clean/*.png``."""
    root = Path(root)
    stems, unmatched = pair_stems(root)
    if unmatched:
        raise DataIOError(f"unpaired images under {root}: {', '.join(unmatched[:10])}")
    return [(s, load_pair(root / "rainy" / f"{s}.png", root / "clean" / f"{s}.png")) for s in stems]


def write_dataset(root, named_pairs) -> list:
    root = Path(root)
    (root / "rainy").mkdir(parents=True, exist_ok=True)
    (root / "clean").mkdir(parents=True, exist_ok=True)
    written = []
    for stem, pair in named_pairs:
        written.append(save_image(pair.rainy, root / "rainy" / f"{stem}.png"))
        written.append(save_image(pair.clean, root / "clean" / f"{stem}.png"))
    return written


def make_synthetic_dataset(count: int, size: int, rain: RainConfig, seed: int = 0, prefix: str = "img") -> list:
    """``count`` procedural scenes with rain; scene and rain seeds derive from ``seed``."""
    out = []
    for i in range(count):
        scene_seed, rain_seed = np.random.SeedSequence([seed, i]).generate_state(2)
        clean = synthetic_scene(size, size, seed=int(scene_seed))
        cfg = RainConfig(**{**rain.to_dict(), "seed": int(rain_seed)})
        out.append((f"{prefix}{i:04d}", synthesize_rain(clean, cfg)))
    return out


# ---------------------------------------------------------------- patches

def _check_patch(pair: ImagePair, patch: int):
    _, h, w = pair.clean.shape
    if patch <= 0 or patch % 8:
        raise ConfigError(f"patch size must be a positive multiple of 8, got {patch}")
    if patch > min(h, w):
        raise ConfigError(f"patch size {patch} exceeds image size {h}x{w}")


def crop_pair(pair: ImagePair, patch: int, rng: np.random.Generator) -> tuple:
    _check_patch(pair, patch)
    _, h, w = pair.clean.shape
    y = int(rng.integers(0, h - patch + 1))
    x = int(rng.integers(0, w - patch + 1))
    win = (slice(None), slice(y, y + patch), slice(x, x + patch))
    return pair.rainy[win], pair.clean[win], (y, x)


def sample_patches(pair: ImagePair, patch: int, count: int, seed: int = 0, with_offsets: bool = False) -> list:
    """Aligned random crops; identical offsets for rainy and clean."""
    _check_patch(pair, patch)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        r, c, off = crop_pair(pair, patch, rng)
        out.append((r, c, off) if with_offsets else (r, c))
    return out
