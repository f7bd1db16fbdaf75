"""Training objective: smooth-L1 + MS-SSIM complement + a contrastive
restoration term that pushes the restored image toward the clear target and
away from all 11 degraded renditions in frozen-feature space."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import DimensionError, Tensor, as_tensor, default_dtype, no_grad

__all__ = [
    "LossWeights",
    "FeatureExtractor",
    "smooth_l1",
    "ms_ssim",
    "contrastive_restoration_loss",
    "total_loss",
]

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
DENOM_FLOOR = 1e-7


@dataclass
class LossWeights:
    alpha1: float = 1.0    # smooth-L1 weight
    alpha2: float = 0.4    # (1 - MS-SSIM) weight
    alpha3: float = 0.05   # contrastive term weight
    layer_weights: tuple = (1 / 3, 1 / 3, 1 / 3)   # per feature tap
    input_neg_weight: float = 1 / 11
    other_neg_weight: float = 1 / 11
    num_other_negatives: int = 10


def smooth_l1(pred: Tensor, target: Tensor, delta: float = 1.0) -> Tensor:
    """Mean Huber-style penalty: quadratic inside |d| < delta, linear outside."""
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError("smooth_l1 operands must share a shape")
    d = pred - target
    ad = d.abs()
    quad = (0.5 / delta) * d * d
    lin = ad - 0.5 * delta
    mask = (ad.data < delta).astype(pred.dtype)
    return (quad * Tensor(mask) + lin * Tensor(1.0 - mask)).mean()


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    xs = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (xs / sigma) ** 2)
    k = np.outer(g, g)
    return (k / k.sum()).astype(default_dtype())


def _window_filter(x: Tensor, window: np.ndarray) -> Tensor:
    """Depthwise 'valid' filtering of NCHW with one shared window."""
    c = x.shape[1]
    w = Tensor(np.broadcast_to(window, (c, 1, *window.shape)).copy())
    return ops.conv2d(x, w, stride=1, pad=0, groups=c)


def _ssim_terms(a: Tensor, b: Tensor, window: np.ndarray,
                k1: float = 0.01, k2: float = 0.03):
    """Mean luminance and contrast-structure terms over valid windows."""
    c1 = k1 * k1
    c2 = k2 * k2
    mu_a = _window_filter(a, window)
    mu_b = _window_filter(b, window)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = _window_filter(a * a, window) - mu_aa
    var_b = _window_filter(b * b, window) - mu_bb
    cov = _window_filter(a * b, window) - mu_ab
    lum = (2.0 * mu_ab + c1) / (mu_aa + mu_bb + c1)
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    return lum.mean(), cs.mean()


def ms_ssim(pred: Tensor, target: Tensor, scales: int = 5,
            window_size: int = 11, sigma: float = 1.5) -> Tensor:
    """Multi-scale structural similarity in [0, 1]ish (1 at equality).

    Falls back to fewer scales (with a warning) when the image is too small;
    scale weights are renormalized to keep the exponents summing to 1.
    """
    import warnings

    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError("ms_ssim operands must share a shape")
    h, w = pred.shape[-2], pred.shape[-1]
    usable = scales
    while usable > 1 and min(h, w) < 2 ** (usable - 1) * window_size:
        usable -= 1
    if usable < scales:
        warnings.warn(
            f"image too small for {scales}-scale MS-SSIM; using {usable} scales")
    weights = np.array(MS_SSIM_WEIGHTS[:usable])
    weights = weights / weights.sum()
    window = _gaussian_window(window_size, sigma)

    a, b = pred, target
    result = None
    for level in range(usable):
        lum, cs = _ssim_terms(a, b, window)
        if level < usable - 1:
            term = cs.relu() ** float(weights[level])
            a = ops.avgpool2x2(a)
            b = ops.avgpool2x2(b)
        else:
            term = (lum * cs).relu() ** float(weights[level])
        result = term if result is None else result * term
    return result


@dataclass
class FeatureExtractorConfig:
    widths: tuple = (16, 16, 32, 32, 64, 64)
    stride_layers: tuple = (2, 4)   # 0-based indices of stride-2 layers
    taps: tuple = (1, 3, 5)         # 0-based indices of tap layers
    seed: int = 1234


class FeatureExtractor:
    """Frozen seeded-random conv stack exposing three feature taps.

    A recognized perceptual-distance proxy; weights never join any optimizer.
    A pretrained weight file (checkpoint format, keys conv0..conv5) may be
    dropped in via `load`.
    """

    def __init__(self, config: FeatureExtractorConfig | None = None):
        self.config = config or FeatureExtractorConfig()
        rng = np.random.default_rng(self.config.seed)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        in_ch = 3
        for width in self.config.widths:
            std = np.sqrt(2.0 / (in_ch * 9))
            w = rng.normal(0.0, std, size=(width, in_ch, 3, 3))
            self.weights.append(Tensor(w))
            self.biases.append(Tensor(np.zeros(width)))
            in_ch = width

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = Tensor(arrays[f"conv{i}.weight"])
            self.biases[i] = Tensor(arrays[f"conv{i}.bias"])

    def __call__(self, images: Tensor) -> list[Tensor]:
        """images: (N, 3, H, W) -> list of 3 tap tensors (shallow to deep)."""
        x = as_tensor(images)
        taps = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            stride = 2 if i in self.config.stride_layers else 1
            x = ops.conv2d(x, w, b, stride=stride, pad=1).relu()
            if i in self.config.taps:
                taps.append(x)
        return taps


def _mean_l1(a: Tensor, b: Tensor) -> Tensor:
    return (a - b).abs().mean()


def contrastive_restoration_loss(anchor: Tensor, positive: Tensor,
                                 input_negative: Tensor,
                                 other_negatives: list,
                                 extractor: FeatureExtractor,
                                 weights: LossWeights | None = None,
                                 cached_taps: tuple | None = None) -> Tensor:
    """Per-tap ratio of anchor->positive distance over the weighted sum of
    anchor->negative distances (denominator floored).

    `cached_taps`, when given, is (pos_taps, neg_taps, other_taps) of
    already-extracted features for everything except the anchor; the fixed
    images never need regradients so their taps can be computed once.
    """
    weights = weights or LossWeights()
    if len(other_negatives) != weights.num_other_negatives:
        raise ValueError(
            f"expected {weights.num_other_negatives} other negatives, "
            f"got {len(other_negatives)}")
    anchor_taps = extractor(anchor)
    if cached_taps is not None:
        pos_taps, neg_taps, other_taps = cached_taps
    else:
        with no_grad():
            pos_taps = [t.detach() for t in extractor(positive)]
            neg_taps = [t.detach() for t in extractor(input_negative)]
            other_taps = [[t.detach() for t in extractor(o)]
                          for o in other_negatives]
    total = None
    for k, xi_k in enumerate(weights.layer_weights):
        num = _mean_l1(pos_taps[k], anchor_taps[k])
        den = weights.input_neg_weight * _mean_l1(anchor_taps[k], neg_taps[k])
        for o_taps in other_taps:
            den = den + weights.other_neg_weight * _mean_l1(o_taps[k],
                                                            anchor_taps[k])
        # floor prevents blow-up when the anchor coincides with a negative
        den_f = den + Tensor(np.maximum(DENOM_FLOOR - den.data, 0.0))
        term = xi_k * (num / den_f)
        total = term if total is None else total + term
    return total


def total_loss(positive: Tensor, anchor: Tensor, input_negative: Tensor,
               other_negatives: list, extractor: FeatureExtractor,
               weights: LossWeights | None = None,
               cached_taps: tuple | None = None) -> tuple[Tensor, dict]:
    """Weighted sum of the three terms plus a per-term breakdown for logging."""
    weights = weights or LossWeights()
    l1_term = smooth_l1(anchor, positive)
    ms_term = 1.0 - ms_ssim(anchor, positive)
    c_term = contrastive_restoration_loss(anchor, positive, input_negative,
                                          other_negatives, extractor, weights,
                                          cached_taps=cached_taps)
    loss = (weights.alpha1 * l1_term + weights.alpha2 * ms_term
            + weights.alpha3 * c_term)
    breakdown = {
        "smooth_l1": float(l1_term.data),
        "ms_ssim_complement": float(ms_term.data),
        "contrastive": float(c_term.data),
        "total": float(loss.data),
    }
    return loss, breakdown
