import numpy as np
import pytest

from onerestore import losses
from onerestore.tensor import DimensionError, Tensor, precision

from test_tensor import fd_check


def test_smooth_l1_oracle():
    with precision(np.float64):
        x = Tensor(np.array([0.3, -2.0, 0.0]))
        y = Tensor(np.zeros(3))
        got = float(losses.smooth_l1(x, y).data)
        want = (0.5 * 0.3 ** 2 + (2.0 - 0.5) + 0.0) / 3
        assert abs(got - want) < 1e-12


def test_smooth_l1_shape_mismatch():
    with pytest.raises(DimensionError):
        losses.smooth_l1(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_smooth_l1_gradient_crosses_delta():
    with precision(np.float64):
        x = Tensor(np.array([0.3, -2.0, 0.9]), requires_grad=True)
        y = Tensor(np.zeros(3))
        fd_check(lambda: losses.smooth_l1(x, y), [x])


def test_ms_ssim_equals_one_at_identity():
    with precision(np.float64):
        a = Tensor(np.random.default_rng(0).random((1, 3, 96, 96)))
        assert float(losses.ms_ssim(a, a).data) == pytest.approx(1.0,
                                                                 abs=1e-9)


def test_ms_ssim_frozen_oracle():
    # independently evaluated once at 64-bit and pinned
    with precision(np.float64):
        rng = np.random.default_rng(2024)
        a = np.clip(rng.normal(0.5, 0.2, (1, 3, 96, 96)), 0, 1)
        b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
        got = float(losses.ms_ssim(Tensor(a), Tensor(b)).data)
        assert got == pytest.approx(0.9725841199192883, abs=1e-9)


def test_ms_ssim_decreases_with_noise():
    with precision(np.float64):
        rng = np.random.default_rng(1)
        a = np.clip(rng.normal(0.5, 0.2, (1, 3, 96, 96)), 0, 1)
        prev = 1.0
        for sigma in (0.02, 0.08, 0.2):
            b = np.clip(a + rng.normal(0, sigma, a.shape), 0, 1)
            val = float(losses.ms_ssim(Tensor(a), Tensor(b)).data)
            assert val < prev
            prev = val


def test_ms_ssim_small_image_warns_and_reduces_scales():
    a = Tensor(np.random.default_rng(2).random((1, 1, 64, 64)))
    with pytest.warns(UserWarning, match="3 scales"):
        val = losses.ms_ssim(a, a)
    assert float(val.data) == pytest.approx(1.0, abs=1e-6)


def test_ms_ssim_gradient():
    with precision(np.float64):
        rng = np.random.default_rng(3)
        a = Tensor(np.clip(rng.normal(0.5, 0.2, (1, 1, 24, 24)), 0.05, 0.95),
                   requires_grad=True)
        b = Tensor(np.clip(a.data + rng.normal(0, 0.05, a.shape), 0.05, 0.95))
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fd_check(lambda: losses.ms_ssim(a, b, scales=2), [a], tol=1e-4)


def test_extractor_is_deterministic_and_frozen():
    ext_a = losses.FeatureExtractor()
    ext_b = losses.FeatureExtractor()
    x = Tensor(np.random.default_rng(4).random((1, 3, 32, 32)))
    taps_a = ext_a(x)
    taps_b = ext_b(x)
    assert len(taps_a) == 3
    for ta, tb in zip(taps_a, taps_b):
        np.testing.assert_array_equal(ta.data, tb.data)


def test_extractor_tap_shapes_shrink():
    ext = losses.FeatureExtractor()
    taps = ext(Tensor(np.random.default_rng(5).random((2, 3, 64, 64))))
    shapes = [t.shape for t in taps]
    assert shapes[0][2] > shapes[1][2] > shapes[2][2]


def make_pack(seed, shape=(1, 3, 32, 32)):
    rng = np.random.default_rng(seed)
    pos = Tensor(rng.random(shape))
    neg = Tensor(np.clip(pos.data + rng.normal(0, 0.2, shape), 0, 1))
    others = [Tensor(np.clip(pos.data + rng.normal(0, 0.2, shape), 0, 1))
              for _ in range(10)]
    return pos, neg, others


def test_contrastive_zero_at_positive():
    ext = losses.FeatureExtractor()
    pos, neg, others = make_pack(6)
    val = losses.contrastive_restoration_loss(pos, pos, neg, others, ext)
    assert float(val.data) == pytest.approx(0.0, abs=1e-9)


def test_contrastive_monotone_along_interpolation():
    ext = losses.FeatureExtractor()
    with precision(np.float64):
        for seed in range(10):
            pos, neg, others = make_pack(100 + seed)
            prev = None
            for t in np.linspace(0.0, 1.0, 5):
                anchor = Tensor((1 - t) * neg.data + t * pos.data)
                val = float(losses.contrastive_restoration_loss(
                    anchor, pos, neg, others, ext).data)
                if prev is not None:
                    assert val <= prev + 1e-6
                prev = val


def test_contrastive_requires_ten_negatives():
    ext = losses.FeatureExtractor()
    pos, neg, others = make_pack(7)
    with pytest.raises(ValueError):
        losses.contrastive_restoration_loss(pos, pos, neg, others[:4], ext)


def test_contrastive_gradient():
    with precision(np.float64):
        ext = losses.FeatureExtractor()
        pos, neg, others = make_pack(8, shape=(1, 3, 16, 16))
        anchor = Tensor(np.random.default_rng(9).random((1, 3, 16, 16)),
                        requires_grad=True)

        def loss():
            return losses.contrastive_restoration_loss(anchor, pos, neg,
                                                       others, ext)

        loss_val = loss()
        loss_val.backward()
        g = anchor.grad.copy()
        eps = 1e-5
        rng = np.random.default_rng(10)
        for _ in range(6):
            idx = tuple(rng.integers(0, s) for s in anchor.shape)
            orig = anchor.data[idx]
            anchor.data[idx] = orig + eps
            lp = float(loss().data)
            anchor.data[idx] = orig - eps
            lm = float(loss().data)
            anchor.data[idx] = orig
            num = (lp - lm) / (2 * eps)
            assert abs(num - g[idx]) <= 1e-5 * max(1.0, abs(num))


def test_cached_taps_match_direct_evaluation():
    from onerestore.tensor import no_grad

    ext = losses.FeatureExtractor()
    pos, neg, others = make_pack(11, shape=(2, 3, 16, 16))
    anchor = Tensor(np.random.default_rng(12).random((2, 3, 16, 16)))
    with no_grad():
        cached = ([t.detach() for t in ext(pos)],
                  [t.detach() for t in ext(neg)],
                  [[t.detach() for t in ext(o)] for o in others])
    direct = losses.contrastive_restoration_loss(anchor, pos, neg, others,
                                                 ext)
    via_cache = losses.contrastive_restoration_loss(
        anchor, pos, neg, others, ext, cached_taps=cached)
    assert float(direct.data) == pytest.approx(float(via_cache.data),
                                               abs=1e-7)


def test_total_loss_breakdown_consistent():
    import warnings

    ext = losses.FeatureExtractor()
    pos, neg, others = make_pack(13)
    anchor = Tensor(np.random.default_rng(14).random((1, 3, 32, 32)))
    w = losses.LossWeights()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        loss, brk = losses.total_loss(pos, anchor, neg, others, ext, w)
    want = (w.alpha1 * brk["smooth_l1"]
            + w.alpha2 * brk["ms_ssim_complement"]
            + w.alpha3 * brk["contrastive"])
    assert brk["total"] == pytest.approx(want, rel=1e-5)
    assert float(loss.data) == pytest.approx(brk["total"], rel=1e-6)
