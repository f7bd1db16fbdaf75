import numpy as np
import pytest

from onerestore import descriptor
from onerestore.tensor import Tensor, precision

from test_tensor import fd_check


def test_twelve_labels_frozen_order():
    assert descriptor.LABELS == (
        "clear", "low", "haze", "rain", "snow", "low+haze", "low+rain",
        "low+snow", "haze+rain", "haze+snow", "low+haze+rain",
        "low+haze+snow")


@pytest.mark.parametrize("text,expect", [
    ("clear", "clear"),
    ("LOW", "low"),
    ("haze+low", "low+haze"),
    ("rain + haze", "haze+rain"),
    ("snow+haze+low", "low+haze+snow"),
])
def test_normalize_label_canonicalizes(text, expect):
    assert descriptor.normalize_label(text) == expect


def test_normalize_label_rejects_unknown():
    with pytest.raises(ValueError) as err:
        descriptor.normalize_label("fog")
    assert "clear" in str(err.value)   # message lists the valid labels


def test_composite_vectors_are_means():
    base = {w: np.random.default_rng(i).normal(size=300)
            for i, w in enumerate(descriptor.BASE_WORDS)}
    raw = descriptor.build_raw_vectors(base)
    assert raw.shape == (12, 300)
    idx = descriptor.LABELS.index("low+haze")
    np.testing.assert_allclose(raw[idx], (base["low"] + base["haze"]) / 2,
                               rtol=1e-12)
    idx3 = descriptor.LABELS.index("low+haze+rain")
    np.testing.assert_allclose(
        raw[idx3], (base["low"] + base["haze"] + base["rain"]) / 3,
        rtol=1e-12)


def test_fallback_word_vectors_are_unit_norm_and_stable():
    a = descriptor.fallback_word_vector("haze")
    b = descriptor.fallback_word_vector("haze")
    np.testing.assert_array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1.0) < 1e-9
    assert a.shape == (300,)
    c = descriptor.fallback_word_vector("rain")
    assert not np.array_equal(a, c)


def test_load_word_vectors_parses_text(tmp_path):
    path = tmp_path / "vecs.txt"
    rows = []
    for word in descriptor.BASE_WORDS:
        vals = np.random.default_rng(len(word)).normal(size=300)
        rows.append(word + " " + " ".join(f"{v:.6f}" for v in vals))
    path.write_text("\n".join(rows))
    vecs = descriptor.load_word_vectors(path)
    assert set(vecs) == set(descriptor.BASE_WORDS)
    assert all(v.shape == (300,) for v in vecs.values())


def test_similarity_scores_oracle():
    with precision(np.float64):
        rng = np.random.default_rng(0)
        visual = rng.normal(size=(3, 324))
        text = rng.normal(size=(12, 324))
        temp = Tensor(np.array([10.0]))
        scores = descriptor.similarity_scores(Tensor(visual), Tensor(text),
                                              temp).data
        vn = visual / np.linalg.norm(visual, axis=1, keepdims=True)
        tn = text / np.linalg.norm(text, axis=1, keepdims=True)
        logits = 10.0 * vn @ tn.T
        want = np.exp(logits - logits.max(axis=1, keepdims=True))
        want = want / want.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(scores, want, atol=1e-9)


def test_similarity_rejects_zero_norm():
    visual = Tensor(np.zeros((1, 324)))
    text = Tensor(np.random.default_rng(1).normal(size=(12, 324)))
    with pytest.raises(ValueError):
        descriptor.similarity_scores(visual, text, Tensor(np.array([10.0])))


def test_cross_entropy_oracle():
    with precision(np.float64):
        scores = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]])
        labels = np.array([0, 1])
        got = descriptor.cross_entropy_on_scores(Tensor(scores), labels)
        want = -(np.log(0.7) + np.log(0.8)) / 2
        assert abs(float(got.data) - want) < 1e-9


def test_cosine_cross_entropy_gradient():
    with precision(np.float64):
        rng = np.random.default_rng(3)
        visual = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
        text = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        temp = Tensor(np.array([5.0]), requires_grad=True)
        labels = np.array([1, 3])

        def loss():
            scores = descriptor.similarity_scores(visual, text, temp)
            return descriptor.cross_entropy_on_scores(scores, labels)

        fd_check(loss, [visual, text, temp])


def test_text_embedder_output_shape():
    emb = descriptor.TextEmbedder(np.random.default_rng(0))
    out = emb(Tensor(np.random.default_rng(1).normal(size=(12, 300))))
    assert out.shape == (12, 324)
    assert (out.data >= 0).all()   # ReLU output


def test_visual_embedder_resizes_and_embeds():
    cfg = descriptor.EmbedderConfig.desk()
    emb = descriptor.VisualEmbedder(cfg, np.random.default_rng(0))
    emb.eval()
    out = emb(Tensor(np.random.default_rng(1).random((2, 3, 50, 70))))
    assert out.shape == (2, 324)


def test_classify_scene_returns_valid_label():
    cfg = descriptor.EmbedderConfig.desk()
    pair = descriptor.EmbedderPair(cfg, np.random.default_rng(0))
    vocab = descriptor.SceneVocabulary(
        base_vectors=np.random.default_rng(1).normal(size=(5, 300)),
        raw=np.random.default_rng(2).normal(size=(12, 300)),
        refined=np.random.default_rng(3).normal(size=(12, 324)))
    img = np.random.default_rng(4).random((48, 48, 3))
    label, probs = descriptor.classify_scene(img, pair, vocab)
    assert label in descriptor.LABELS
    assert probs.shape == (12,)
    assert abs(probs.sum() - 1.0) < 1e-4
