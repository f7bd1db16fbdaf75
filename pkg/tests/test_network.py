import numpy as np
import pytest

from onerestore import ops
from onerestore.network import (ChannelSelfAttention, DescriptorCrossAttention,
                                GatedFeedForward, NetConfig, RestoreNet, Sdtb,
                                SdtbConfig)
from onerestore.tensor import DimensionError, Tensor, precision

from test_tensor import fd_check

TOY = SdtbConfig(channels=4, heads=2, query_tokens=4, ffn_expansion=2.0)


def toy_inputs(seed=0, n=1, c=4, h=4, w=4):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(n, c, h, w)) * 0.5, requires_grad=True)
    d = Tensor(rng.normal(size=(n, 324)) * 0.5, requires_grad=True)
    return x, d


def test_sdtb_config_validation():
    with pytest.raises(ValueError):
        SdtbConfig(channels=5, heads=2, query_tokens=4)   # 5 % 2 != 0
    with pytest.raises(ValueError):
        SdtbConfig(channels=4, heads=2, query_tokens=5)   # not a square


def test_sdca_preserves_shape():
    sdca = DescriptorCrossAttention(TOY, np.random.default_rng(0))
    x, d = toy_inputs()
    out = sdca(x, d)
    assert out.shape == x.shape


def test_sdca_matches_direct_attention_evaluation():
    """Independent numpy evaluation of softmax(Q_t K^T / lambda) V using the
    module's own weights, with naive convolutions."""
    with precision(np.float64):
        sdca = DescriptorCrossAttention(TOY, np.random.default_rng(1))
        x, d = toy_inputs(seed=2)
        got = sdca(x, d).data

        def np_conv1x1(arr, w, b):
            out = np.einsum("nchw,oc->nohw", arr, w[:, :, 0, 0])
            return out + b[None, :, None, None]

        def np_depthwise3(arr, w, b):
            n, c, h, wid = arr.shape
            pad = np.pad(arr, ((0, 0), (0, 0), (1, 1), (1, 1)))
            out = np.zeros_like(arr)
            for i in range(3):
                for j in range(3):
                    out += (w[:, 0, i, j][None, :, None, None]
                            * pad[:, :, i:i + h, j:j + wid])
            return out + b[None, :, None, None]

        p = {name: t.data for name, t in sdca.named_parameters()}
        n, c, h, w = x.shape
        heads = TOY.heads
        ch = c // heads
        grid = int(np.sqrt(TOY.query_tokens))

        xn = sdca.norm(x).data
        v = np_depthwise3(np_conv1x1(xn, p["v_point.weight"],
                                     p["v_point.bias"]),
                          p["v_depth.weight"], p["v_depth.bias"])
        import onerestore.ops as O
        from onerestore.tensor import Tensor as T, no_grad
        with no_grad():
            xk = O.bilinear_resize(T(xn), grid, grid).data
        k = np_depthwise3(np_conv1x1(xk, p["k_point.weight"],
                                     p["k_point.bias"]),
                          p["k_depth.weight"], p["k_depth.bias"])
        q_vec = d.data @ p["q_linear.weight"].T + p["q_linear.bias"]

        # Q_t repeats the per-head query across the token axis, so every row
        # of Q_t K^T equals q.(sum_t K); the softmax-ed attention over key
        # channels then mixes the V channel rows.
        ref = np.zeros_like(v)
        temps = np.asarray(p["temperature"]).reshape(-1)
        for ni in range(n):
            for hd in range(heads):
                sl = slice(hd * ch, (hd + 1) * ch)
                q_head = q_vec[ni, sl]
                k_rows = k[ni, sl].reshape(ch, -1)
                logits = np.outer(q_head, k_rows.sum(axis=1)) / temps[hd]
                e = np.exp(logits - logits.max(axis=-1, keepdims=True))
                attn = e / e.sum(axis=-1, keepdims=True)
                v_rows = v[ni, sl].reshape(ch, -1)
                ref[ni, sl] = (attn @ v_rows).reshape(ch, h, w)
        want = x.data + np_conv1x1(ref, p["out_proj.weight"],
                                   p["out_proj.bias"])
        np.testing.assert_allclose(got, want, atol=1e-6)


def test_sa_preserves_shape_and_rows_normalized():
    sa = ChannelSelfAttention(TOY, np.random.default_rng(2))
    x, _ = toy_inputs(seed=3)
    assert sa(x).shape == x.shape
    attn = sa.attention_weights(x)
    np.testing.assert_allclose(attn.sum(axis=-1),
                               np.ones(attn.shape[:-1]), atol=1e-5)


def test_ffn_gating_changes_output():
    ffn = GatedFeedForward(TOY, np.random.default_rng(4))
    x, _ = toy_inputs(seed=5)
    out = ffn(x)
    assert out.shape == x.shape
    # residual branch is live (small but nonzero at init)
    assert np.abs(out.data - x.data).max() > 0


def test_sdtb_gradients():
    with precision(np.float64):
        block = Sdtb(TOY, np.random.default_rng(6))
        x, d = toy_inputs(seed=7, h=4, w=4)
        params = [t for _, t in block.named_parameters()]
        w = Tensor(np.random.default_rng(8).normal(size=x.shape))
        fd_check(lambda: (block(x, d) * w).sum(), [x, d], tol=1e-4)


def test_restorenet_identity_at_init():
    net = RestoreNet(NetConfig.desk(), seed=0)
    net.eval()
    rng = np.random.default_rng(9)
    x = Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))
    d = Tensor(rng.normal(size=(1, 324)).astype(np.float32))
    out = net(x, d)
    np.testing.assert_array_equal(out.data, x.data)


def test_restorenet_rejects_bad_dims():
    net = RestoreNet(NetConfig.desk(), seed=0)
    x = Tensor(np.random.default_rng(0).random((1, 3, 20, 16)))
    d = Tensor(np.zeros((1, 324)))
    with pytest.raises(DimensionError):
        net(x, d)


def test_restorenet_handles_rectangles():
    net = RestoreNet(NetConfig.desk(), seed=0)
    x = Tensor(np.random.default_rng(1).random((1, 3, 32, 48)))
    d = Tensor(np.zeros((1, 324)))
    assert net(x, d).shape == (1, 3, 32, 48)


def test_paper_config_parameter_count_in_band():
    net = RestoreNet(NetConfig(), seed=0)
    count = net.num_parameters()
    assert 5_980_000 * 0.8 <= count <= 5_980_000 * 1.2, count


def test_parameter_breakdown_sums_to_total():
    net = RestoreNet(NetConfig.desk(), seed=0)
    breakdown = net.parameter_breakdown()
    assert sum(breakdown.values()) == net.num_parameters()
