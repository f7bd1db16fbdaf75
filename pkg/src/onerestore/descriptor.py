"""Scene descriptor subsystem.

Twelve labeled text embeddings (clear, 4 single factors, 7 composites) share
a 324-d space with visual embeddings produced by a small CNN. A cosine
similarity + softmax head scores an image against the vocabulary; both
embedders train jointly with cross-entropy.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .modules import BatchNorm2d, Conv2d, Linear, Module, Parameter
from .optim import Adam
from .tensor import Tensor, no_grad

__all__ = [
    "BASE_WORDS",
    "LABELS",
    "SceneVocabulary",
    "TextEmbedder",
    "VisualEmbedder",
    "EmbedderConfig",
    "load_word_vectors",
    "fallback_word_vector",
    "build_raw_vectors",
    "build_text_embeddings",
    "similarity_scores",
    "cross_entropy_on_scores",
    "train_embedders",
    "classify_scene",
    "normalize_label",
]

BASE_WORDS = ("clear", "low", "haze", "rain", "snow")

# Frozen label order; ties in classification break toward earlier labels.
LABELS = (
    "clear", "low", "haze", "rain", "snow",
    "low+haze", "low+rain", "low+snow",
    "haze+rain", "haze+snow",
    "low+haze+rain", "low+haze+snow",
)

WORD_DIM = 300
EMBED_DIM = 324

_FACTOR_ORDER = ("low", "haze", "rain", "snow")


def normalize_label(text: str) -> str:
    """Canonicalize a '+'-joined scene text to one of the 12 labels."""
    parts = [p.strip() for p in text.lower().split("+") if p.strip()]
    if parts == ["clear"]:
        return "clear"
    unknown = set(parts) - set(_FACTOR_ORDER)
    if unknown or not parts:
        raise ValueError(
            f"unknown scene text {text!r}; valid labels: {', '.join(LABELS)}")
    ordered = [f for f in _FACTOR_ORDER if f in parts]
    label = "+".join(ordered)
    if label not in LABELS:
        raise ValueError(
            f"scene text {text!r} is not a supported combination; "
            f"valid labels: {', '.join(LABELS)}")
    return label


def fallback_word_vector(word: str) -> np.ndarray:
    """Deterministic unit-norm pseudo-random 300-d vector from the word."""
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    vec = np.random.default_rng(seed).normal(size=WORD_DIM)
    return vec / np.linalg.norm(vec)


def load_word_vectors(path, words=BASE_WORDS) -> dict[str, np.ndarray]:
    """Parse `word <300 floats>` rows (GloVe text format)."""
    wanted = set(words)
    found: dict[str, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split(" ")
            if parts[0] in wanted:
                vec = np.array(parts[1:], dtype=np.float64)
                if vec.shape != (WORD_DIM,):
                    raise ValueError(
                        f"word vector for {parts[0]!r} has length {len(vec)}")
                found[parts[0]] = vec
            if len(found) == len(wanted):
                break
    missing = wanted - set(found)
    if missing:
        raise KeyError(f"word vectors missing for: {sorted(missing)}")
    return found


def build_raw_vectors(base_vectors: dict[str, np.ndarray]) -> np.ndarray:
    """12x300 raw vectors; composites are element-wise means of constituents."""
    rows = []
    for label in LABELS:
        parts = [label] if label == "clear" else label.split("+")
        rows.append(np.mean([base_vectors[p] for p in parts], axis=0))
    return np.stack(rows)


@dataclass
class SceneVocabulary:
    base_words: tuple = BASE_WORDS
    labels: tuple = LABELS
    base_vectors: np.ndarray | None = None   # 5 x 300
    raw: np.ndarray | None = None            # 12 x 300
    refined: np.ndarray | None = None        # 12 x 324 (text-MLP output)


class TextEmbedder(Module):
    """Single linear + ReLU refinement of the raw 300-d vectors to 324-d."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.mlp = Linear(WORD_DIM, EMBED_DIM, rng)

    def forward(self, raw: Tensor) -> Tensor:
        return self.mlp(raw).relu()


@dataclass
class EmbedderConfig:
    backbone_widths: tuple = (16, 32, 64, 128)
    head_channels: int = 1024
    input_size: int = 224
    dropout: float = 0.35
    temperature_init: float = 10.0

    @staticmethod
    def desk() -> "EmbedderConfig":
        # lighter dropout: the desk model is far smaller, and 0.35 starves it
        return EmbedderConfig(backbone_widths=(16, 32, 64, 128),
                              head_channels=256, input_size=96, dropout=0.1)


class VisualEmbedder(Module):
    """Stride-2 conv backbone + 1x1 conv/BN/ReLU/dropout/GAP/linear head."""

    def __init__(self, config: EmbedderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        in_ch = 3
        self.convs: list[Conv2d] = []
        for i, width in enumerate(config.backbone_widths):
            conv = Conv2d(in_ch, width, 3, rng, stride=2, pad=1, std=0.05)
            setattr(self, f"conv{i + 1}", conv)
            self.convs.append(conv)
            in_ch = width
        self.head_conv = Conv2d(in_ch, config.head_channels, 1, rng, std=0.05)
        self.head_bn = BatchNorm2d(config.head_channels)
        self.head_linear = Linear(config.head_channels, EMBED_DIM, rng, std=0.05)
        self._dropout_rng = np.random.default_rng(0)

    def seed_dropout(self, seed: int) -> None:
        self._dropout_rng = np.random.default_rng(seed)

    def forward(self, images: Tensor) -> Tensor:
        """images: (N, 3, H, W) -> embeddings (N, 324)."""
        x = images
        if x.shape[-2:] != (self.config.input_size, self.config.input_size):
            x = ops.bilinear_resize(x, self.config.input_size,
                                    self.config.input_size)
        for conv in self.convs:
            x = conv(x).relu()
        x = self.head_bn(self.head_conv(x)).relu()
        x = ops.dropout(x, self.config.dropout, self._dropout_rng, self.training)
        x = ops.global_avg_pool(x)
        return self.head_linear(x)


class EmbedderPair(Module):
    """Text + visual embedder plus the learnable softmax temperature."""

    def __init__(self, config: EmbedderConfig, rng: np.random.Generator):
        super().__init__()
        self.text = TextEmbedder(rng)
        self.visual = VisualEmbedder(config, rng)
        self.temperature = Parameter(np.array([config.temperature_init]))
        self.config = config


def build_text_embeddings(embedder: TextEmbedder,
                          word_vector_path=None) -> SceneVocabulary:
    """Refine the 12 raw vectors through the shared MLP (inference path)."""
    base = _base_vectors(word_vector_path)
    raw = build_raw_vectors(base)
    with no_grad():
        refined = embedder(Tensor(raw)).data.copy()
    return SceneVocabulary(base_vectors=np.stack([base[w] for w in BASE_WORDS]),
                           raw=raw, refined=refined)


def _base_vectors(word_vector_path) -> dict[str, np.ndarray]:
    if word_vector_path is not None:
        return load_word_vectors(word_vector_path)
    return {w: fallback_word_vector(w) for w in BASE_WORDS}


def similarity_scores(visual: Tensor, text_embeddings: Tensor,
                      temperature) -> Tensor:
    """Temperature-scaled cosine similarities -> softmax over the 12 labels.

    visual: (N, 324); text_embeddings: (12, 324). Returns (N, 12).
    """
    vn = (visual * visual).sum(axis=1, keepdims=True).sqrt()
    tn = (text_embeddings * text_embeddings).sum(axis=1, keepdims=True).sqrt()
    if np.any(vn.data <= 0) or np.any(tn.data <= 0):
        raise ValueError("zero-norm embedding in cosine similarity")
    sims = visual.matmul(text_embeddings.transpose(1, 0)) / (
        vn * tn.transpose(1, 0))
    if not isinstance(temperature, Tensor):
        temperature = Tensor(np.array([float(temperature)]))
    return ops.softmax(sims * temperature, axis=1)


def cross_entropy_on_scores(scores: Tensor, label_indices: np.ndarray) -> Tensor:
    """-mean log score of the true label (scores already softmax-normalized)."""
    n = scores.shape[0]
    picked = scores[np.arange(n), label_indices]
    return -(picked.log().mean())


@dataclass
class TrainLogEntry:
    epoch: int
    step: int
    lr: float
    loss: float
    accuracy: float | None = None


def _load_manifest(manifest_path) -> list[dict]:
    rows = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def _load_labeled_images(rows, labels=LABELS) -> tuple[np.ndarray, np.ndarray]:
    from .image_io import read_image, to_chw

    index = {label: i for i, label in enumerate(labels)}
    images, targets = [], []
    for row in rows:
        label = row["category"]
        if label not in index:
            raise ValueError(f"label {label!r} is not one of the 12 scene labels")
        images.append(to_chw(read_image(row["degraded_path"])))
        targets.append(index[label])
    return np.stack(images), np.array(targets, dtype=np.int64)


def train_embedders(manifest_path, config: EmbedderConfig | None = None, *,
                    epochs: int = 200, lr: float = 1e-4,
                    lr_decay_factor: float = 0.5, lr_decay_interval: int = 50,
                    batch_size: int = 256, seed: int = 0,
                    word_vector_path=None,
                    eval_manifest_path=None) -> tuple[EmbedderPair, SceneVocabulary, list[dict]]:
    """Joint cosine cross-entropy training of text and visual embedders."""
    config = config or EmbedderConfig()
    rng = np.random.default_rng(seed)
    pair = EmbedderPair(config, rng)
    pair.visual.seed_dropout(seed + 1)

    base = _base_vectors(word_vector_path)
    raw = Tensor(build_raw_vectors(base))
    rows = _load_manifest(manifest_path)
    images, targets = _load_labeled_images(rows)

    eval_images = eval_targets = None
    if eval_manifest_path is not None:
        eval_images, eval_targets = _load_labeled_images(
            _load_manifest(eval_manifest_path))

    opt = Adam(pair.named_parameters(), lr=lr)
    log: list[dict] = []
    order_rng = np.random.default_rng(seed + 2)
    n = images.shape[0]
    step = 0
    for epoch in range(epochs):
        opt.lr = lr * (lr_decay_factor ** (epoch // lr_decay_interval))
        order = order_rng.permutation(n)
        correct = 0
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            xb = Tensor(images[batch])
            yb = targets[batch]
            refined = pair.text(raw)
            visual = pair.visual(xb)
            scores = similarity_scores(visual, refined, pair.temperature)
            loss = cross_entropy_on_scores(scores, yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            correct += int((scores.data.argmax(axis=1) == yb).sum())
            log.append({"epoch": epoch, "step": step, "lr": opt.lr,
                        "loss": float(loss.data), "time": time.time()})
        log[-1]["train_accuracy"] = correct / n
        if eval_images is not None:
            log[-1]["eval_accuracy"] = _accuracy(pair, raw, eval_images,
                                                 eval_targets)
    vocab = build_text_embeddings(pair.text, word_vector_path)
    return pair, vocab, log


def _accuracy(pair: EmbedderPair, raw: Tensor, images: np.ndarray,
              targets: np.ndarray, batch_size: int = 64) -> float:
    was_training = pair.training
    pair.eval()
    correct = 0
    with no_grad():
        refined = pair.text(raw)
        for start in range(0, images.shape[0], batch_size):
            xb = Tensor(images[start:start + batch_size])
            scores = similarity_scores(pair.visual(xb), refined,
                                       pair.temperature)
            correct += int((scores.data.argmax(axis=1)
                            == targets[start:start + batch_size]).sum())
    pair.train(was_training)
    return correct / images.shape[0]


def classify_scene(image: np.ndarray, pair: EmbedderPair,
                   vocab: SceneVocabulary) -> tuple[str, np.ndarray]:
    """Argmax scene label plus all 12 probabilities for an HxWx3 image."""
    from .image_io import to_chw

    was_training = pair.training
    pair.eval()
    with no_grad():
        visual = pair.visual(Tensor(to_chw(image)[None]))
        scores = similarity_scores(visual, Tensor(vocab.refined),
                                   pair.temperature)
    pair.train(was_training)
    probs = scores.data[0]
    return vocab.labels[int(probs.argmax())], probs
