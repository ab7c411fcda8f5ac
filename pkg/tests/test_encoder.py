import numpy as np
import pytest

from melfm import encoder as enc
from melfm import tensor as tt
from melfm.tensor import Tensor


def small_cfg(kind, **over):
    defaults = dict(kind=kind, d_model=32, layers=2, heads=4, ffn_mult=2, conv_kernel=5, input_dim=12)
    defaults.update(over)
    return enc.EncoderConfig(**defaults)


@pytest.mark.parametrize("kind", ["bert", "conformer"])
def test_shape_contract(kind):
    cfg = small_cfg(kind)
    weights = enc.init_weights(cfg, seed=0)
    states = enc.encode(cfg, weights, np.random.default_rng(1).normal(size=(10, 12)))
    assert len(states) == 3
    for s in states.states:
        assert s.shape == (10, 32)


@pytest.mark.parametrize("kind", ["bert", "conformer"])
def test_encode_deterministic(kind):
    cfg = small_cfg(kind)
    w1 = enc.init_weights(cfg, seed=3)
    w2 = enc.init_weights(cfg, seed=3)
    for name in w1:
        assert np.array_equal(w1[name].data, w2[name].data)
    x = np.random.default_rng(2).normal(size=(7, 12))
    a = enc.encode(cfg, w1, x).last.data
    b = enc.encode(cfg, w2, x).last.data
    assert np.array_equal(a, b)


def test_single_head_attention_hand_case():
    # hand oracle: out = softmax(q k^T / sqrt(d)) v with hand-set projections
    cfg = enc.EncoderConfig(kind="bert", d_model=2, layers=1, heads=1, input_dim=2)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 2))
    wq = np.array([[1.0, 0.5], [-0.5, 1.0]])
    wk = np.array([[0.8, -0.2], [0.1, 1.2]])
    wv = np.array([[1.0, 0.0], [0.0, -1.0]])
    weights = {
        "a.wq.w": Tensor(wq),
        "a.wq.b": Tensor(np.zeros(2)),
        "a.wk.w": Tensor(wk),
        "a.wv.w": Tensor(wv),
        "a.wv.b": Tensor(np.zeros(2)),
        "a.wo.w": Tensor(np.eye(2)),
        "a.wo.b": Tensor(np.zeros(2)),
    }
    out = enc._attention(cfg, weights, "a", Tensor(x), None, None).data

    q, k, v = x @ wq, x @ wk, x @ wv
    scores = q @ k.T / np.sqrt(2.0)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out, probs @ v, rtol=1e-12)


def test_parameter_count_matches_hand_formula():
    # hand count for the desk default, independent of config_parameter_count
    d, mult, layers, heads, kernel, in_d = 128, 4, 4, 4, 31, 128
    dm = d * mult
    attn = 2 * d + 4 * d * d + 3 * d
    ffn = 2 * d + 2 * d * dm + dm + d

    bert_cfg = enc.EncoderConfig(kind="bert", d_model=d, layers=layers, heads=heads, ffn_mult=mult, input_dim=in_d)
    bert_total = in_d * d + d + layers * (attn + ffn + d) + 2 * d
    bw = enc.init_weights(bert_cfg, seed=0)
    assert enc.parameter_count(bw) == bert_total
    assert enc.config_parameter_count(bert_cfg) == bert_total

    conf_cfg = enc.EncoderConfig(
        kind="conformer", d_model=d, layers=layers, heads=heads, ffn_mult=mult, conv_kernel=kernel, input_dim=in_d
    )
    rel = (2 * conf_cfg.max_frames - 1) * heads
    conv = 2 * d + 2 * d * d + 2 * d + d * kernel + d + d * d + d
    conf_total = in_d * d + d + layers * (2 * ffn + attn + rel + conv + 2 * d + d)
    cw = enc.init_weights(conf_cfg, seed=0)
    assert enc.parameter_count(cw) == conf_total
    assert enc.config_parameter_count(conf_cfg) == conf_total


def test_paper_scale_config_counted_not_allocated():
    big = enc.EncoderConfig(
        kind="conformer", d_model=1024, layers=24, heads=16, ffn_mult=4,
        conv_kernel=31, token_rate=25, max_input_seconds=30, input_dim=128,
    )
    count = enc.config_parameter_count(big)
    assert 2.5e8 < count < 7e8  # lands in the hundreds of millions


@pytest.mark.parametrize("kind", ["bert", "conformer"])
def test_sequence_length_equivariance(kind):
    cfg = small_cfg(kind)
    weights = enc.init_weights(cfg, seed=7, dtype=np.float64)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(11, 12))
    plain = enc.encode(cfg, weights, x).last.data

    padded = np.concatenate([x, rng.normal(size=(5, 12))])  # junk pad content
    mask = np.concatenate([np.ones(11, bool), np.zeros(5, bool)])
    masked = enc.encode(cfg, weights, padded, pad_mask=mask).last.data
    np.testing.assert_allclose(masked[:11], plain, atol=1e-5)
    np.testing.assert_allclose(masked[11:], 0.0)


@pytest.mark.parametrize("kind", ["bert", "conformer"])
def test_gradient_reaches_every_parameter(kind):
    cfg = small_cfg(kind)
    weights = enc.init_weights(cfg, seed=9, dtype=np.float64)
    x = np.random.default_rng(10).normal(size=(9, 12))
    states = enc.encode(cfg, weights, x)
    loss = tt.mean(tt.mul(states.last, states.last))
    loss.backward()
    dead = [n for n, t in weights.items() if t.grad is None or not np.any(t.grad != 0.0)]
    assert dead == []


def test_conformer_conv_module_wiring():
    # kernel-1 module with identity-scaled pointwise weights reduces to a
    # near-identity map: value path scaled by eps, gate driven to 1, swish
    # linearized by the small scale, then rescaled back by 2/eps
    d = 6
    eps = 1e-6
    pw1 = np.zeros((d, 2 * d))
    pw1[:, :d] = np.eye(d) * eps
    weights = {
        "c.pw1.w": Tensor(pw1),
        "c.pw1.b": Tensor(np.concatenate([np.zeros(d), np.full(d, 20.0)])),
        "c.dw.w": Tensor(np.ones((d, 1))),
        "c.dw.b": Tensor(np.zeros(d)),
        "c.pw2.w": Tensor(np.eye(d) * (2.0 / eps)),
        "c.pw2.b": Tensor(np.zeros(d)),
    }
    x = np.random.default_rng(11).normal(size=(10, d))
    out = enc.conv_module(weights, "c", Tensor(x)).data
    np.testing.assert_allclose(out, x, atol=1e-5)


def test_rejects_bad_inputs():
    cfg = small_cfg("conformer", token_rate=25, max_input_seconds=5)
    weights = enc.init_weights(cfg, seed=0)
    with pytest.raises(ValueError, match="exceeds"):
        enc.encode(cfg, weights, np.zeros((126, 12)))
    with pytest.raises(ValueError, match="input_dim"):
        enc.encode(cfg, weights, np.zeros((10, 13)))
    with pytest.raises(ValueError):
        enc.EncoderConfig(kind="bert", d_model=30, heads=4)
    with pytest.raises(ValueError):
        enc.EncoderConfig(kind="conformer", conv_kernel=4)


@pytest.mark.parametrize("kind", ["bert", "conformer"])
def test_batched_encode_matches_single(kind):
    cfg = small_cfg(kind)
    weights = enc.init_weights(cfg, seed=13, dtype=np.float64)
    rng = np.random.default_rng(14)
    batch = rng.normal(size=(3, 8, 12))
    batched = enc.encode(cfg, weights, batch).last.data
    for i in range(3):
        single = enc.encode(cfg, weights, batch[i]).last.data
        np.testing.assert_allclose(batched[i], single, atol=1e-10)
