"""Restorer training, inference, and evaluation.

Training follows the two-stage recipe: the scene embedders are trained
first (descriptor.train_embedders); here the restorer trains against frozen
text embeddings looked up by each sample's ground-truth scene label. The
inference path accepts either a manual text label or the visual classifier's
prediction to pick the conditioning descriptor.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .degrade import CATEGORIES
from .descriptor import (EmbedderConfig, EmbedderPair, LABELS, SceneVocabulary,
                         classify_scene, normalize_label)
from .image_io import read_image, to_chw, to_hwc, write_image
from .losses import FeatureExtractor, LossWeights, total_loss
from .network import NetConfig, RestoreNet
from .optim import Adam
from .serialize import load_checkpoint, save_checkpoint
from .tensor import DimensionError, Tensor, no_grad

__all__ = [
    "RestorerTrainConfig",
    "SamplePack",
    "psnr",
    "ssim",
    "load_training_pairs",
    "train_restorer",
    "save_restorer",
    "load_restorer",
    "restore_image",
    "restore_file",
    "evaluate_dataset",
]

PSNR_CAP = 99.0


# ---------------------------------------------------------------------------
# metrics (plain numpy; these never need gradients)

def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 99."""
    if reference.shape != test.shape:
        raise DimensionError("psnr operands must share a shape")
    mse = float(np.mean((reference.astype(np.float64)
                         - test.astype(np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _luma(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        return (0.299 * img[..., 0] + 0.587 * img[..., 1]
                + 0.114 * img[..., 2])
    return img


def _gauss1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    xs = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (xs / sigma) ** 2)
    return g / g.sum()


def _filter2(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' gaussian filtering of a 2-d array."""
    tmp = np.apply_along_axis(lambda row: np.convolve(row, g, "valid"), 1, img)
    return np.apply_along_axis(lambda col: np.convolve(col, g, "valid"), 0, tmp)


def ssim(reference: np.ndarray, test: np.ndarray, window: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale structural similarity on the luma channel."""
    if reference.shape != test.shape:
        raise DimensionError("ssim operands must share a shape")
    a = _luma(reference.astype(np.float64))
    b = _luma(test.astype(np.float64))
    if min(a.shape) < window:
        raise DimensionError(f"image smaller than the {window}px ssim window")
    c1, c2 = k1 * k1, k2 * k2
    g = _gauss1d(window, sigma)
    mu_a, mu_b = _filter2(a, g), _filter2(b, g)
    var_a = _filter2(a * a, g) - mu_a ** 2
    var_b = _filter2(b * b, g) - mu_b ** 2
    cov = _filter2(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# training data assembly

@dataclass
class SamplePack:
    """One training unit: a degraded patch, its clear target, and the sibling
    degraded renditions of the same scene that serve as extra negatives."""
    clear_path: str
    degraded_path: str
    category: str
    other_paths: tuple


@dataclass
class RestorerTrainConfig:
    epochs: int = 120
    lr: float = 2e-4
    lr_decay_factor: float = 0.5
    lr_decay_interval: int = 20
    batch_size: int = 4
    patch_size: int = 256
    patch_stride: int = 200
    seed: int = 0
    max_steps: int | None = None
    checkpoint_interval: int = 0      # steps; 0 disables periodic saves
    cache_fixed_taps: bool = True
    augment_rotations: bool = True
    log_interval: int = 1

    @staticmethod
    def desk() -> "RestorerTrainConfig":
        return RestorerTrainConfig(patch_size=64, patch_stride=64)


def _read_manifest(manifest_path) -> list[dict]:
    rows = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def load_training_pairs(manifest_path) -> list[SamplePack]:
    """Group manifest rows by clear image; each degraded rendition packs the
    other renditions of the same scene as its contrastive negatives."""
    rows = [r for r in _read_manifest(manifest_path)
            if r["category"] != "clear"]
    by_clear: dict[str, dict[str, str]] = {}
    for row in rows:
        by_clear.setdefault(row["clear_path"], {})[row["category"]] = \
            row["degraded_path"]
    packs = []
    for clear_path, cats in sorted(by_clear.items()):
        for category in CATEGORIES:
            if category not in cats:
                continue
            others = tuple(cats[c] for c in CATEGORIES
                           if c != category and c in cats)
            packs.append(SamplePack(clear_path, cats[category], category,
                                    others))
    if not packs:
        raise ValueError(f"{manifest_path}: no degraded/clear pairs found")
    return packs


def _patch_grid(h: int, w: int, size: int, stride: int) -> list[tuple]:
    """Top-left corners covering the image, last row/col aligned to the edge."""
    if h < size or w < size:
        raise DimensionError(f"image {h}x{w} smaller than patch size {size}")
    ys = list(range(0, h - size + 1, stride))
    xs = list(range(0, w - size + 1, stride))
    if ys[-1] != h - size:
        ys.append(h - size)
    if xs[-1] != w - size:
        xs.append(w - size)
    return [(y, x) for y in ys for x in xs]


def _crop_rot(chw: np.ndarray, y: int, x: int, size: int, rot: int) -> np.ndarray:
    patch = chw[:, y:y + size, x:x + size]
    if rot:
        patch = np.rot90(patch, k=rot, axes=(1, 2)).copy()
    return patch


class _ImageStore:
    """Caches decoded CHW float arrays by path."""

    def __init__(self):
        self._data: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        if path not in self._data:
            self._data[path] = to_chw(read_image(path)).astype(np.float32)
        return self._data[path]


# ---------------------------------------------------------------------------
# restorer training

def _label_indices() -> dict[str, int]:
    return {label: i for i, label in enumerate(LABELS)}


def _fixed_taps(extractor: FeatureExtractor, images: np.ndarray,
                cache: dict | None, keys: list) -> list:
    """Extractor taps for a batch of fixed images, memoized per key."""
    if cache is None:
        with no_grad():
            return [t.detach() for t in extractor(Tensor(images))]
    missing = [i for i, key in enumerate(keys) if key not in cache]
    if missing:
        with no_grad():
            taps = extractor(Tensor(images[missing]))
        for j, i in enumerate(missing):
            cache[keys[i]] = [t.data[j] for t in taps]
    per_tap = []
    for k in range(3):
        per_tap.append(Tensor(np.stack([cache[key][k] for key in keys])))
    return per_tap


def train_restorer(manifest_path, vocab: SceneVocabulary,
                   net_config: NetConfig | None = None,
                   train_config: RestorerTrainConfig | None = None,
                   loss_weights: LossWeights | None = None,
                   net: RestoreNet | None = None,
                   log_path=None, checkpoint_path=None,
                   extractor: FeatureExtractor | None = None):
    """Train the restorer on synthesized pairs with frozen text descriptors.

    Returns (net, log). The descriptor for each sample is the refined text
    embedding of its ground-truth scene label; the embedders do not update.
    """
    net_config = net_config or NetConfig()
    cfg = train_config or RestorerTrainConfig()
    weights = loss_weights or LossWeights()
    extractor = extractor or FeatureExtractor()
    if net is None:
        net = RestoreNet(net_config, seed=cfg.seed)
    net.train()
    if vocab.refined is None:
        raise ValueError("vocabulary has no refined text embeddings; "
                         "train or load the embedders first")

    packs = load_training_pairs(manifest_path)
    n_others = len(packs[0].other_paths)
    for pack in packs:
        if len(pack.other_paths) != n_others:
            raise ValueError("inconsistent negative counts across scenes; "
                             "synthesize every category for every image")
    weights.num_other_negatives = n_others
    weights.input_neg_weight = 1.0 / (n_others + 1)
    weights.other_neg_weight = 1.0 / (n_others + 1)

    store = _ImageStore()
    label_to_idx = _label_indices()
    refined = vocab.refined.astype(np.float32)

    # enumerate (pack, patch corner) units once; rotation varies per epoch
    units = []
    for pi, pack in enumerate(packs):
        img = store.get(pack.clear_path)
        for y, x in _patch_grid(img.shape[1], img.shape[2],
                                cfg.patch_size, cfg.patch_stride):
            units.append((pi, y, x))

    opt = Adam(net.named_parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    tap_cache: dict | None = {} if cfg.cache_fixed_taps else None
    log: list[dict] = []
    log_fh = open(log_path, "w") if log_path else None
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * (cfg.lr_decay_factor
                           ** (epoch // cfg.lr_decay_interval))
        order = rng.permutation(len(units))
        if cfg.augment_rotations:
            rots = rng.integers(0, 4, size=len(units))
        else:
            rots = np.zeros(len(units), dtype=np.int64)
        for start in range(0, len(order), cfg.batch_size):
            chosen = order[start:start + cfg.batch_size]
            clear_b, deg_b, desc_b, other_b = [], [], [], [[] for _ in range(n_others)]
            neg_keys, pos_keys, other_keys = [], [], [[] for _ in range(n_others)]
            for u in chosen:
                pi, y, x = units[u]
                rot = int(rots[u])
                pack = packs[pi]
                clear_b.append(_crop_rot(store.get(pack.clear_path), y, x,
                                         cfg.patch_size, rot))
                deg_b.append(_crop_rot(store.get(pack.degraded_path), y, x,
                                       cfg.patch_size, rot))
                desc_b.append(refined[label_to_idx[pack.category]])
                pos_keys.append((pack.clear_path, y, x, rot))
                neg_keys.append((pack.degraded_path, y, x, rot))
                for oi, opath in enumerate(pack.other_paths):
                    other_b[oi].append(_crop_rot(store.get(opath), y, x,
                                                 cfg.patch_size, rot))
                    other_keys[oi].append((opath, y, x, rot))
            clear_t = Tensor(np.stack(clear_b))
            deg_t = Tensor(np.stack(deg_b))
            desc_t = Tensor(np.stack(desc_b))
            others_np = [np.stack(b) for b in other_b]

            pos_taps = _fixed_taps(extractor, clear_t.data, tap_cache, pos_keys)
            neg_taps = _fixed_taps(extractor, deg_t.data, tap_cache, neg_keys)
            other_taps = [_fixed_taps(extractor, arr, tap_cache, keys)
                          for arr, keys in zip(others_np, other_keys)]

            out = net(deg_t, desc_t)
            loss, breakdown = total_loss(
                clear_t, out, deg_t, [Tensor(a) for a in others_np],
                extractor, weights,
                cached_taps=(pos_taps, neg_taps, other_taps))
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if step % cfg.log_interval == 0:
                entry = {"epoch": epoch, "step": step, "lr": opt.lr,
                         "time": time.time(), **breakdown}
                log.append(entry)
                if log_fh:
                    log_fh.write(json.dumps(entry) + "\n")
                    log_fh.flush()
            if checkpoint_path and cfg.checkpoint_interval \
                    and step % cfg.checkpoint_interval == 0:
                save_restorer(checkpoint_path, net, net_config, opt=opt,
                              step=step, rng=rng)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        if done:
            break
    if log_fh:
        log_fh.close()
    if checkpoint_path:
        save_restorer(checkpoint_path, net, net_config, opt=opt, step=step,
                      rng=rng)
    return net, log


# ---------------------------------------------------------------------------
# checkpoints

def save_restorer(path, net: RestoreNet, net_config: NetConfig,
                  opt: Adam | None = None, step: int = 0,
                  rng: np.random.Generator | None = None) -> None:
    arrays = net.state_arrays()
    if opt is not None:
        arrays.update(opt.state_arrays())
    meta = {
        "kind": "restorer",
        "labels": list(LABELS),
        "config": asdict(net_config),
        "step": step,
    }
    if rng is not None:
        meta["rng_state"] = rng.bit_generator.state
    save_checkpoint(path, arrays, meta)


def load_restorer(path) -> tuple[RestoreNet, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "restorer":
        raise ValueError(f"{path}: not a restorer checkpoint")
    cfg_dict = dict(meta["config"])
    cfg_dict["widths"] = tuple(cfg_dict["widths"])
    config = NetConfig(**cfg_dict)
    net = RestoreNet(config, seed=0)
    model_arrays = {k: v for k, v in arrays.items()
                    if not k.startswith("adam.")}
    net.load_state_arrays(model_arrays)
    meta["optimizer_arrays"] = {k: v for k, v in arrays.items()
                                if k.startswith("adam.")}
    return net, meta


def save_embedders(path, pair: EmbedderPair, vocab: SceneVocabulary,
                   opt: Adam | None = None) -> None:
    arrays = pair.state_arrays()
    arrays["vocab.raw"] = vocab.raw
    arrays["vocab.refined"] = vocab.refined
    arrays["vocab.base_vectors"] = vocab.base_vectors
    if opt is not None:
        arrays.update(opt.state_arrays())
    meta = {"kind": "embedder", "labels": list(LABELS),
            "config": asdict(pair.config)}
    save_checkpoint(path, arrays, meta)


def load_embedders(path) -> tuple[EmbedderPair, SceneVocabulary, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "embedder":
        raise ValueError(f"{path}: not an embedder checkpoint")
    cfg_dict = dict(meta["config"])
    cfg_dict["backbone_widths"] = tuple(cfg_dict["backbone_widths"])
    config = EmbedderConfig(**cfg_dict)
    pair = EmbedderPair(config, np.random.default_rng(0))
    vocab = SceneVocabulary(base_vectors=arrays.pop("vocab.base_vectors"),
                            raw=arrays.pop("vocab.raw"),
                            refined=arrays.pop("vocab.refined"))
    pair.load_state_arrays({k: v for k, v in arrays.items()
                            if not k.startswith("adam.")})
    return pair, vocab, meta


# ---------------------------------------------------------------------------
# inference

def _descriptor_for(label: str, vocab: SceneVocabulary) -> np.ndarray:
    idx = {lab: i for i, lab in enumerate(vocab.labels)}[label]
    return vocab.refined[idx].astype(np.float32)


def restore_image(image_hwc: np.ndarray, net: RestoreNet,
                  descriptor: np.ndarray) -> np.ndarray:
    """Run the restorer on one HxWx3 image; pads reflectively so the spatial
    dims divide by 8, then crops back and clips to [0, 1]."""
    chw = to_chw(image_hwc)[None].astype(np.float32)
    h, w = chw.shape[-2:]
    pad_h = (-h) % 8
    pad_w = (-w) % 8
    net.eval()
    with no_grad():
        x = Tensor(chw)
        if pad_h or pad_w:
            x = ops.pad_reflect(x, pad_h, pad_w)
        out = net(x, Tensor(descriptor[None].astype(np.float32)))
    out_np = out.data[0, :, :h, :w]
    return np.clip(to_hwc(out_np), 0.0, 1.0)


def restore_file(in_path, out_path, net: RestoreNet, vocab: SceneVocabulary,
                 text: str | None = None,
                 pair: EmbedderPair | None = None) -> dict:
    """Restore one image file. Manual mode takes a scene label via `text`;
    automatic mode classifies the image with the visual embedder."""
    img = read_image(in_path)
    if text is not None:
        label = normalize_label(text)
    else:
        if pair is None:
            raise ValueError("automatic mode needs the embedder checkpoint; "
                             "pass a label via text= for manual mode")
        label, _ = classify_scene(img, pair, vocab)
    restored = restore_image(img, net, _descriptor_for(label, vocab))
    if out_path is not None:
        write_image(out_path, restored)
    return {"input": str(in_path), "output": str(out_path), "label": label}


# ---------------------------------------------------------------------------
# evaluation

def evaluate_dataset(manifest_path, net: RestoreNet, vocab: SceneVocabulary,
                     text_mode: bool = True,
                     pair: EmbedderPair | None = None,
                     out_json=None, out_csv=None) -> dict:
    """Per-category and overall PSNR/SSIM of degraded and restored images."""
    rows = [r for r in _read_manifest(manifest_path)
            if r["category"] != "clear"]
    if not rows:
        raise ValueError(f"{manifest_path}: no degraded rows to evaluate")
    per_cat: dict[str, list] = {}
    for row in rows:
        clear = read_image(row["clear_path"])
        degraded = read_image(row["degraded_path"])
        if text_mode:
            label = row["category"]
        else:
            if pair is None:
                raise ValueError("automatic evaluation needs the embedders")
            label, _ = classify_scene(degraded, pair, vocab)
        restored = restore_image(degraded, net, _descriptor_for(label, vocab))
        per_cat.setdefault(row["category"], []).append({
            "degraded_psnr": psnr(clear, degraded),
            "degraded_ssim": ssim(clear, degraded),
            "restored_psnr": psnr(clear, restored),
            "restored_ssim": ssim(clear, restored),
        })
    metrics = ("degraded_psnr", "degraded_ssim", "restored_psnr",
               "restored_ssim")
    report: dict = {"categories": {}, "overall": {}, "count": len(rows)}
    all_vals = {m: [] for m in metrics}
    for cat in CATEGORIES:
        if cat not in per_cat:
            continue
        entry = {}
        for m in metrics:
            vals = [e[m] for e in per_cat[cat]]
            entry[m] = float(np.mean(vals))
            all_vals[m].extend(vals)
        entry["count"] = len(per_cat[cat])
        report["categories"][cat] = entry
    for m in metrics:
        report["overall"][m] = float(np.mean(all_vals[m]))
    if out_json:
        Path(out_json).write_text(json.dumps(report, indent=2) + "\n")
    if out_csv:
        lines = ["category," + ",".join(metrics) + ",count"]
        for cat, entry in report["categories"].items():
            lines.append(cat + "," + ",".join(f"{entry[m]:.4f}"
                                              for m in metrics)
                         + f",{entry['count']}")
        lines.append("overall," + ",".join(f"{report['overall'][m]:.4f}"
                                           for m in metrics)
                     + f",{report['count']}")
        Path(out_csv).write_text("\n".join(lines) + "\n")
    return report
