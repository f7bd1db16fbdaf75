"""Composite degradation synthesis.

Implements the unified imaging model (darken -> rain/snow streaks -> haze)
and paired-dataset generation over the 11 composite degradation categories.
All pixel math is plain numpy on HxWx3 float arrays in [0, 1].
"""
from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

__all__ = [
    "CATEGORIES",
    "StreakParams",
    "DegradationSpec",
    "estimate_illumination",
    "apply_low_light",
    "apply_rain",
    "apply_snow",
    "apply_haze",
    "generate_streaks",
    "compose",
    "sample_spec",
    "default_depth",
    "synthesize_dataset",
]

# The 11 degraded categories; "clear" is the paired ground truth, never emitted
# as a degraded class.
CATEGORIES = (
    "low",
    "haze",
    "rain",
    "snow",
    "low+haze",
    "low+rain",
    "low+snow",
    "haze+rain",
    "haze+snow",
    "low+haze+rain",
    "low+haze+snow",
)

GAMMA_RANGE = (2.0, 3.0)
NOISE_VAR_RANGE = (0.03, 0.08)
BETA_RANGE = (1.0, 2.0)
AIRLIGHT_RANGE = (0.6, 0.9)
SNOW_BRIGHTNESS = 0.85  # constant chromatic aberration map
ILLUMINATION_FLOOR = 0.05


@dataclass
class StreakParams:
    density: float = 0.08
    angle_deg: float = 90.0
    length: int = 9
    scale: float = 0.8


@dataclass
class DegradationSpec:
    low: bool = False
    haze: bool = False
    rain: bool = False
    snow: bool = False
    gamma: float = 2.5
    noise_var: float = 0.05
    beta: float = 1.5
    airlight: float = 0.75
    streak: StreakParams = field(default_factory=StreakParams)
    seed: int = 0

    def __post_init__(self):
        if self.rain and self.snow:
            raise ValueError("rain and snow never co-occur in one spec")
        if not GAMMA_RANGE[0] <= self.gamma <= GAMMA_RANGE[1] and self.low:
            raise ValueError(f"gamma outside {GAMMA_RANGE}: {self.gamma}")
        if not NOISE_VAR_RANGE[0] <= self.noise_var <= NOISE_VAR_RANGE[1] and self.low:
            raise ValueError(f"noise_var outside {NOISE_VAR_RANGE}: {self.noise_var}")
        if self.haze:
            if not BETA_RANGE[0] <= self.beta <= BETA_RANGE[1]:
                raise ValueError(f"beta outside {BETA_RANGE}: {self.beta}")
            if not AIRLIGHT_RANGE[0] <= self.airlight <= AIRLIGHT_RANGE[1]:
                raise ValueError(f"airlight outside {AIRLIGHT_RANGE}: {self.airlight}")

    @property
    def category(self) -> str:
        parts = [n for n, on in (("low", self.low), ("haze", self.haze),
                                 ("rain", self.rain), ("snow", self.snow)) if on]
        return "+".join(parts) if parts else "clear"


def category_flags(category: str) -> dict[str, bool]:
    parts = set(category.split("+")) if category != "clear" else set()
    unknown = parts - {"low", "haze", "rain", "snow"}
    if unknown:
        raise ValueError(f"unknown degradation factors: {sorted(unknown)}")
    return {k: k in parts for k in ("low", "haze", "rain", "snow")}


def _validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {img.shape}")
    return img


def _gaussian_blur(channel: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect boundary."""
    radius = max(1, int(round(3 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(channel, ((radius, radius), (0, 0)), mode="reflect")
    out = np.zeros_like(channel)
    for i, kv in enumerate(kernel):
        out += kv * padded[i:i + channel.shape[0], :]
    padded = np.pad(out, ((0, 0), (radius, radius)), mode="reflect")
    out2 = np.zeros_like(channel)
    for i, kv in enumerate(kernel):
        out2 += kv * padded[:, i:i + channel.shape[1]]
    return out2


def estimate_illumination(img: np.ndarray, sigma: float = 3.0,
                          floor: float = ILLUMINATION_FLOOR) -> np.ndarray:
    """Per-pixel max channel, Gaussian-smoothed, floored away from zero."""
    img = _validate_image(img)
    lum = img.max(axis=2)
    lum = _gaussian_blur(lum, sigma)
    return np.maximum(lum, floor)


def apply_low_light(img: np.ndarray, illumination: np.ndarray, gamma: float,
                    noise_var: float, seed: int) -> np.ndarray:
    """Darken via the illumination exponent, then add Gaussian read noise."""
    img = _validate_image(img)
    if gamma < 1.0:
        raise ValueError("gamma must be >= 1")
    if np.any(illumination <= 0):
        raise ValueError("illumination map must be strictly positive")
    out = img * (illumination ** (gamma - 1.0))[..., None]
    if noise_var > 0:
        rng = np.random.default_rng(seed)
        out = out + rng.normal(0.0, np.sqrt(noise_var), size=img.shape)
    return np.clip(out, 0.0, 1.0)


def apply_rain(img: np.ndarray, streaks: "StreakLayer") -> np.ndarray:
    img = _validate_image(img)
    if streaks.kind != "rain":
        raise ValueError("streak layer is not rain")
    return np.clip(img + streaks.mask[..., None], 0.0, 1.0)


def apply_snow(img: np.ndarray, streaks: "StreakLayer") -> np.ndarray:
    img = _validate_image(img)
    if streaks.kind != "snow":
        raise ValueError("streak layer is not snow")
    if streaks.aberration is None:
        raise ValueError("snow layer requires an aberration map")
    s = streaks.mask[..., None]
    m = streaks.aberration[..., None]
    return np.clip(img * (1.0 - s) + m * s, 0.0, 1.0)


def apply_haze(img: np.ndarray, depth: np.ndarray, beta: float,
               airlight: float) -> np.ndarray:
    """Atmospheric scattering: blend toward the airlight by e^(-beta*d)."""
    img = _validate_image(img)
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if not 0.0 <= airlight <= 1.0:
        raise ValueError("airlight must lie in [0, 1]")
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth < 0) or not np.all(np.isfinite(depth)):
        raise ValueError("depth must be non-negative and finite")
    dmax = depth.max()
    dn = depth / dmax if dmax > 0 else depth
    t = np.exp(-beta * dn)[..., None]
    return np.clip(img * t + airlight * (1.0 - t), 0.0, 1.0)


@dataclass
class StreakLayer:
    kind: str                      # "rain" | "snow"
    mask: np.ndarray               # HxW in [0, 1]
    aberration: np.ndarray | None  # HxW in [0, 1], snow only


def _motion_kernel(length: int, angle_deg: float) -> np.ndarray:
    """A normalized line kernel for directional blur."""
    length = max(1, int(length))
    size = length if length % 2 == 1 else length + 1
    k = np.zeros((size, size))
    c = size // 2
    theta = np.deg2rad(angle_deg)
    for i in np.linspace(-(length - 1) / 2, (length - 1) / 2, 4 * length):
        r = int(round(c - i * np.sin(theta)))
        col = int(round(c + i * np.cos(theta)))
        if 0 <= r < size and 0 <= col < size:
            k[r, col] = 1.0
    return k / k.sum()


def _convolve_same(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(img, ((ph, ph), (pw, pw)))
    out = np.zeros_like(img)
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j] != 0.0:
                out += kernel[i, j] * padded[i:i + img.shape[0], j:j + img.shape[1]]
    return out


def generate_streaks(kind: str, params: StreakParams, h: int, w: int,
                     seed: int) -> StreakLayer:
    """Procedural rain (motion-blurred thresholded noise) or snow (soft discs)."""
    rng = np.random.default_rng(seed)
    if kind == "rain":
        if params.density <= 0:
            return StreakLayer("rain", np.zeros((h, w)), None)
        noise = rng.random((h, w))
        # each seed smears into a streak ~length px long, so scale the seed
        # probability to keep `density` ~ final coverage fraction
        seeds = (noise < params.density / max(params.length, 1)).astype(np.float64)
        kernel = _motion_kernel(params.length, params.angle_deg)
        streaks = _convolve_same(seeds, kernel) * params.length
        mask = np.clip(streaks * params.scale, 0.0, 1.0)
        return StreakLayer("rain", mask, None)
    if kind == "snow":
        mask = np.zeros((h, w))
        if params.density <= 0:
            return StreakLayer("snow", mask, np.full((h, w), SNOW_BRIGHTNESS))
        # Poisson-scattered soft discs, radius 1-4 px, opacity 0.4-1.0
        count = rng.poisson(params.density * h * w / 12.0)
        ys = np.arange(h)[:, None]
        xs = np.arange(w)[None, :]
        for _ in range(count):
            cy = rng.uniform(0, h)
            cx = rng.uniform(0, w)
            radius = rng.uniform(1.0, 4.0)
            opacity = rng.uniform(0.4, 1.0)
            r2 = (ys - cy) ** 2 + (xs - cx) ** 2
            disc = opacity * np.exp(-r2 / (2.0 * (radius / 2.0) ** 2))
            np.maximum(mask, disc, out=mask)
        mask = np.clip(mask, 0.0, 1.0)
        return StreakLayer("snow", mask, np.full((h, w), SNOW_BRIGHTNESS))
    raise ValueError(f"unknown streak kind: {kind}")


def default_depth(h: int, w: int) -> np.ndarray:
    """Vertical ramp prior: top of frame far (1), bottom near (0)."""
    return np.repeat(np.linspace(1.0, 0.0, h)[:, None], w, axis=1)


def sample_spec(category: str, rng: np.random.Generator,
                seed: int) -> DegradationSpec:
    """Draw physical parameters for one category from the documented ranges."""
    flags = category_flags(category)
    kind = "rain" if flags["rain"] else ("snow" if flags["snow"] else "rain")
    if flags["rain"]:
        streak = StreakParams(density=rng.uniform(0.02, 0.06),
                              angle_deg=rng.uniform(70.0, 110.0),
                              length=int(rng.integers(7, 14)),
                              scale=rng.uniform(0.5, 0.9))
    else:
        streak = StreakParams(density=rng.uniform(0.05, 0.15),
                              angle_deg=90.0, length=0,
                              scale=1.0)
    return DegradationSpec(
        low=flags["low"], haze=flags["haze"], rain=flags["rain"],
        snow=flags["snow"],
        gamma=float(rng.uniform(*GAMMA_RANGE)),
        noise_var=float(rng.uniform(*NOISE_VAR_RANGE)),
        beta=float(rng.uniform(*BETA_RANGE)),
        airlight=float(rng.uniform(*AIRLIGHT_RANGE)),
        streak=streak,
        seed=seed,
    )


def compose(img: np.ndarray, spec: DegradationSpec,
            depth: np.ndarray | None = None) -> tuple[np.ndarray, dict]:
    """Apply the flagged stages in darken -> streak -> haze order."""
    img = _validate_image(img)
    out = img
    manifest: dict = {}
    if spec.low:
        illumination = estimate_illumination(img)
        out = apply_low_light(out, illumination, spec.gamma, spec.noise_var,
                              spec.seed)
        manifest["gamma"] = spec.gamma
        manifest["noise_var"] = spec.noise_var
    if spec.rain or spec.snow:
        kind = "rain" if spec.rain else "snow"
        layer = generate_streaks(kind, spec.streak, img.shape[0], img.shape[1],
                                 spec.seed + 1)
        out = apply_rain(out, layer) if spec.rain else apply_snow(out, layer)
        manifest["streak_params"] = asdict(spec.streak)
        manifest["streak_kind"] = kind
    if spec.haze:
        if depth is None:
            depth = default_depth(img.shape[0], img.shape[1])
        out = apply_haze(out, depth, spec.beta, spec.airlight)
        manifest["beta"] = spec.beta
        manifest["airlight"] = spec.airlight
    return out, manifest


def _item_seed(root_seed: int, image_idx: int, cat_idx: int, variant: int) -> int:
    ss = np.random.SeedSequence([root_seed, image_idx, cat_idx, variant])
    return int(ss.generate_state(1)[0])


def synthesize_dataset(clear_dir, out_dir, categories=CATEGORIES,
                       per_image_count: int = 1, seed: int = 0,
                       resolution: int | None = 256,
                       depth_dir=None, threads: int | None = None) -> list[dict]:
    """Write paired degraded/clear PNGs plus a JSON-lines manifest.

    Layout: out_dir/<category>/<stem>.png and out_dir/clear/<stem>.png.
    Each work item owns an RNG stream keyed by (seed, image, category,
    variant), so serial and threaded runs produce identical files.
    """
    from .image_io import read_image, write_image

    clear_dir = Path(clear_dir)
    out_dir = Path(out_dir)
    for cat in categories:
        if cat == "clear":
            raise ValueError('"clear" is the ground-truth pairing, not a category')
        category_flags(cat)
    files = sorted(p for p in clear_dir.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise FileNotFoundError(f"no input images found in {clear_dir}")

    (out_dir / "clear").mkdir(parents=True, exist_ok=True)
    for cat in categories:
        (out_dir / cat).mkdir(parents=True, exist_ok=True)

    images: list[tuple[int, Path, np.ndarray]] = []
    for idx, path in enumerate(files):
        try:
            img = read_image(path)
        except Exception as exc:  # unreadable input: record and skip
            warnings.warn(f"skipping unreadable input {path}: {exc}")
            continue
        if resolution is not None and img.shape[:2] != (resolution, resolution):
            from .image_io import resize_image
            img = resize_image(img, resolution, resolution)
        images.append((idx, path, img))
    if not images:
        raise FileNotFoundError(f"no decodable images in {clear_dir}")

    depths: dict[int, np.ndarray] = {}
    if depth_dir is not None:
        depth_dir = Path(depth_dir)
        for idx, path, img in images:
            cand = depth_dir / path.name
            if cand.exists():
                d = read_image(cand).mean(axis=2)
                if d.shape != img.shape[:2]:
                    from .image_io import resize_image
                    d = resize_image(d[..., None].repeat(3, axis=2),
                                     img.shape[0], img.shape[1]).mean(axis=2)
                depths[idx] = d

    work = []
    clear_records = []
    for idx, path, img in images:
        clear_path = out_dir / "clear" / f"{path.stem}.png"
        write_image(clear_path, img)
        clear_records.append({
            "clear_path": str(clear_path),
            "degraded_path": str(clear_path),
            "category": "clear",
            "gamma": None, "noise_var": None, "beta": None, "A": None,
            "streak_params": None, "seed": None,
        })
        for cat_idx, cat in enumerate(categories):
            for variant in range(per_image_count):
                work.append((idx, path, img, cat_idx, cat, variant, clear_path))

    def run_item(item):
        idx, path, img, cat_idx, cat, variant, clear_path = item
        item_seed = _item_seed(seed, idx, cat_idx, variant)
        rng = np.random.default_rng(item_seed)
        spec = sample_spec(cat, rng, item_seed)
        degraded, manifest = compose(img, spec, depths.get(idx))
        stem = path.stem if per_image_count == 1 else f"{path.stem}_v{variant}"
        degraded_path = out_dir / cat / f"{stem}.png"
        write_image(degraded_path, degraded)
        record = {
            "clear_path": str(clear_path),
            "degraded_path": str(degraded_path),
            "category": cat,
            "gamma": spec.gamma if spec.low else None,
            "noise_var": spec.noise_var if spec.low else None,
            "beta": spec.beta if spec.haze else None,
            "A": spec.airlight if spec.haze else None,
            "streak_params": asdict(spec.streak) if (spec.rain or spec.snow) else None,
            "seed": item_seed,
        }
        return record

    if threads is None:
        threads = int(os.environ.get("ONERESTORE_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run_item, work))
    else:
        records = [run_item(item) for item in work]
    records = clear_records + records

    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    return records
