import numpy as np
import pytest

from femix import nn
from femix.block import (
    BETA_SHIFT,
    BLOCK_PRIORS,
    BlockConfig,
    FemBlockParams,
    ablation,
    block_backward,
    block_forward,
    init_params,
    load_params,
    param_budget_check,
    save_params,
)
from femix.priors import rope

# d >= 32 keeps the conditioner's hidden width above one channel, where its
# layer norm would otherwise be identically zero
WIDE = dict(D=16, d=64, r=1, H=2)


def loss_and_grads(x, params, cfg, up):
    y, cache = block_forward(x, params, cfg)
    dx, grads = block_backward(up, cache, params, cfg)
    return float((y * up).sum()), dx, grads


def test_beta_init_is_shifted_softplus():
    p = init_params(BlockConfig(D=8, d=8, r=2), seed=0)
    np.testing.assert_allclose(p.beta_max(), np.log1p(np.exp(BETA_SHIFT)), atol=1e-6)
    assert abs(p.beta_max()[0] - 1.95) < 0.01


def test_init_is_seed_reproducible():
    cfg = BlockConfig(D=8, d=8, r=2)
    a, b = init_params(cfg, 3).as_dict(), init_params(cfg, 3).as_dict()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    assert not np.array_equal(init_params(cfg, 4).W_V, a["W_V"])


@pytest.mark.parametrize("D,d,r,count,ok", [(48, 24, 4, 9216, True), (48, 32, 2, 9216, True), (48, 48, 1, 11520, False), (64, 32, 4, 16384, True)])
def test_param_budget(D, d, r, count, ok):
    assert param_budget_check(D, d, r) == (count, ok)


def test_linear_count_matches_budget():
    p = init_params(BlockConfig(D=64, d=32, r=4), seed=0)
    assert p.linear_param_count() == 4 * 64 * 64


def test_config_validation_and_labels():
    with pytest.raises(ValueError):
        BlockConfig(D=8, d=6, r=2, H=4)
    with pytest.raises(ValueError):
        BlockConfig(D=8, d=8, r=1, prior="ssm")
    cfg = BlockConfig(D=8, d=8, r=2)
    assert cfg.label() == "FEM-SM(+C,+L,+T,+G)"
    assert ablation(cfg, conv=False, gate=False, prior="decay").label() == "FEM-LRNN(-C,+L,+T,-G)"


def test_all_off_equals_softmax_attention():
    cfg = BlockConfig(D=12, d=8, r=2, H=2, conv=False, lse=False, temp=False, gate=False)
    p = init_params(cfg, seed=1)
    p.W_prior *= 20  # sharpen the attention pattern
    x = np.random.default_rng(2).normal(size=(7, 12))
    y, _ = block_forward(x, p, cfg)

    xh = x / np.sqrt((x**2).mean(axis=1, keepdims=True) + nn.RMS_EPS)
    v = xh @ p.W_V
    qk = xh @ p.W_prior
    out = np.zeros((7, 8))
    for h in range(2):
        q = rope(qk[:, h * 4 : (h + 1) * 4])
        k = rope(qk[:, 8 + h * 4 : 8 + (h + 1) * 4])
        s = q @ k.T / 2.0
        s[np.triu_indices(7, 1)] = -np.inf
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        out[:, h * 4 : (h + 1) * 4] = a @ v[:, h * 4 : (h + 1) * 4]
    np.testing.assert_allclose(y, x + out @ p.W_O, atol=1e-13)


def test_zero_input_is_deterministic():
    cfg = BlockConfig(**WIDE)
    p = init_params(cfg, seed=5)
    y1, _ = block_forward(np.zeros((4, 16)), p, cfg)
    y2, _ = block_forward(np.zeros((4, 16)), p, cfg)
    assert np.all(np.isfinite(y1))
    np.testing.assert_array_equal(y1, y2)


def test_multi_head_partition():
    cfg = BlockConfig(D=12, d=8, r=2, H=2, conv=False)
    p = init_params(cfg, seed=6)
    x = np.random.default_rng(7).normal(size=(5, 12))
    _, cache = block_forward(x, p, cfg)
    assert cache.readout.o.shape == (2, 5, 4)
    assert cache.prior["w"].shape == (2, 5, 5)
    # each head mixes only its own value channels
    cfg1 = ablation(cfg, lse=False)
    _, c1 = block_forward(x, p, cfg1)
    np.testing.assert_allclose(c1.readout.o[0], c1.prior["w"][0] @ c1.v_mod[:, :4] * c1.g_eff[:, :4], atol=1e-14)


@pytest.mark.parametrize("prior", BLOCK_PRIORS)
def test_backward_matches_finite_differences(prior):
    cfg = BlockConfig(**WIDE, prior=prior)
    rng = np.random.default_rng(8)
    p = init_params(cfg, seed=9)
    for name, a in p.as_dict().items():  # move off the zero-init point so every path is live
        a += rng.normal(0, 0.3, a.shape)
    x = rng.normal(size=(5, 16))
    up = rng.normal(size=(5, 16))
    _, dx, grads = loss_and_grads(x, p, cfg, up)
    h = 1e-5

    def probe(get, set_, analytic, n=4):
        flat = analytic.reshape(-1)
        for j in rng.choice(flat.size, size=min(n, flat.size), replace=False):
            base = get().reshape(-1)[j]
            vals = []
            for s in (h, -h):
                arr = get().copy()
                arr.reshape(-1)[j] = base + s
                vals.append(set_(arr))
            num = (vals[0] - vals[1]) / (2 * h)
            assert abs(num - flat[j]) <= 1e-5 * max(1.0, abs(num)), (j, num, flat[j])

    probe(lambda: x, lambda a: float((block_forward(a, p, cfg)[0] * up).sum()), dx)
    for name, g in grads.items():
        def set_(a, name=name):
            q = p.copy()
            setattr(q, name, a)
            return float((block_forward(x, q, cfg)[0] * up).sum())

        probe(lambda name=name: getattr(p, name), set_, g)


def test_gradient_flow_and_dead_temperature():
    cfg = BlockConfig(**WIDE)
    rng = np.random.default_rng(10)
    p = init_params(cfg, seed=11)
    for k in ("M_p", "M_v", "M_g", "M_l"):
        getattr(p, k)[:] = rng.normal(0, 0.1, getattr(p, k).shape)
    x = rng.normal(size=(6, 16))
    up = rng.normal(size=(6, 16))
    _, _, grads = loss_and_grads(x, p, cfg, up)
    for name, g in grads.items():
        if name == "b_decay":  # only the decay-gated priors read it
            continue
        assert np.any(g != 0), name
    _, _, grads = loss_and_grads(x, p, ablation(cfg, lse=False), up)
    assert np.all(grads["beta_raw"] == 0)
    assert np.all(grads["W_lam"] == 0)


def test_frozen_gates_get_no_gradient():
    cfg = BlockConfig(D=12, d=8, r=2, conv=False)
    p = init_params(cfg, seed=12)
    x = np.random.default_rng(13).normal(size=(4, 12))
    y, cache = block_forward(x, p, cfg, frozen={"lam": 0.0, "g": 1.0})
    y0, _ = block_forward(x, p, ablation(cfg, lse=False, gate=False))
    np.testing.assert_allclose(y, y0, atol=1e-14)
    _, grads = block_backward(np.ones_like(y), cache, p, cfg)
    assert np.all(grads["W_lam"] == 0) and np.all(grads["W_g"] == 0)


def test_checkpoint_roundtrip(tmp_path):
    cfg = BlockConfig(**WIDE, prior="gla")
    p = init_params(cfg, seed=14)
    path = tmp_path / "block.ck"
    save_params(path, p, cfg)
    q, cfg2 = load_params(path)
    assert cfg2 == cfg
    for k, v in p.as_dict().items():
        np.testing.assert_array_equal(getattr(q, k), v)
    bad = tmp_path / "bad.ck"
    bad.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(ValueError):
        load_params(bad)


def test_width_mismatch_rejected():
    cfg = BlockConfig(D=8, d=8, r=2)
    with pytest.raises(ValueError):
        block_forward(np.zeros((3, 9)), init_params(cfg, 0), cfg)
