import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from koap.numerics import (ConfigError, MlpSpec, NumericalError, ParamBuilder, ParamVector, Segment,
                           SeqEncoderSpec, WindowError, checkpoint_files, fit, grad, grad_check, init_mlp,
                           init_optimizer, init_seq, load_checkpoint, mlp_forward, opt_step, save_checkpoint,
                           seq_forward, value_and_grad)


def affine(W, b):
    B = ParamBuilder()
    B.add("l.W0", W)
    B.add("l.b0", b)
    return MlpSpec((np.shape(W)[1], np.shape(W)[0])), B.build()


def test_param_vector_layout_must_cover():
    with pytest.raises(ConfigError):
        ParamVector(np.zeros(5), {"a": Segment(0, (2,)), "b": Segment(3, (2,))})
    with pytest.raises(ConfigError):
        ParamVector(np.zeros(5), {"a": Segment(0, (2,))})


def test_param_vector_set_and_mask():
    b = ParamBuilder()
    b.add("enc.W", np.ones((2, 2)))
    b.add("dec.W", np.zeros(3))
    p = b.build()
    q = p.set("dec.W", [1, 2, 3])
    assert p.segment_array("dec.W").tolist() == [0, 0, 0]
    assert q.segment_array("dec.W").tolist() == [1, 2, 3]
    assert p.mask(["enc"]).tolist() == [True] * 4 + [False] * 3
    with pytest.raises(ConfigError):
        b.add("enc.W", np.zeros(1))


def test_mlp_identity_layer():
    spec, p = affine(np.eye(2), np.zeros(2))
    assert mlp_forward(spec, p, [1.0, 2.0], "l").tolist() == [1.0, 2.0]


def test_mlp_hand_multiply():
    spec, p = affine([[2, 0], [0, 3]], [1, -1])
    assert mlp_forward(spec, p, [1.0, 1.0], "l").tolist() == [3.0, 2.0]


def test_mlp_wrong_width():
    spec, p = affine(np.eye(2), np.zeros(2))
    with pytest.raises(ConfigError):
        mlp_forward(spec, p, [1.0, 2.0, 3.0], "l")


def test_mlp_spec_validation():
    with pytest.raises(ConfigError):
        MlpSpec((3,))
    with pytest.raises(ConfigError):
        MlpSpec((3, 0, 2))
    with pytest.raises(ConfigError):
        MlpSpec((3, 4, 2), "sigmoid")


def test_init_glorot_bounds():
    b = ParamBuilder()
    init_mlp(b, "m", MlpSpec((3, 5, 2)), np.random.default_rng(0))
    p = b.build()
    lim = np.sqrt(6 / 8)
    assert np.abs(p.segment_array("m.W0")).max() <= lim
    assert p.segment_array("m.W0").shape == (5, 3)
    assert not p.segment_array("m.b0").any()


def _seq(cell="gru", d=2, h=4, o=3, seed=0):
    spec = SeqEncoderSpec(d, h, o, cell)
    b = ParamBuilder()
    init_seq(b, "f", spec, np.random.default_rng(seed))
    return spec, b.build()


@pytest.mark.parametrize("L", [2, 3, 15])
@pytest.mark.parametrize("cell", ["gru", "lstm"])
def test_seq_output_length(L, cell):
    spec, p = _seq(cell)
    out = seq_forward(spec, p, np.random.default_rng(1).normal(size=(L, 2)), "f")
    assert out.shape == (L - 1, 3)


def test_seq_too_short():
    spec, p = _seq()
    with pytest.raises(WindowError):
        seq_forward(spec, p, np.zeros((1, 2)), "f")


@pytest.mark.parametrize("cell", ["gru", "lstm"])
def test_seq_zero_params_constant(cell):
    spec, p = _seq(cell)
    p = p.with_values(torch.zeros(len(p), dtype=torch.float64))
    out = seq_forward(spec, p, np.random.default_rng(2).normal(size=(5, 2)), "f")
    assert torch.equal(out, torch.zeros_like(out))


def test_seq_gru_matches_hand_unroll():
    spec, p = _seq("gru", d=1, h=2, o=1, seed=3)
    states = np.array([[0.3], [-0.1], [0.5]])
    Wi, Wh, bi = (p.segment_array(n) for n in ("f.Wi", "f.Wh", "f.bi"))
    sig = lambda x: 1 / (1 + np.exp(-x))
    h = np.zeros(2)
    outs = []
    for i in range(2):
        x = np.concatenate([states[i], states[i + 1]])
        gi, gh = Wi @ x + bi, Wh @ h
        r = sig(gi[:2] + gh[:2])
        z = sig(gi[2:4] + gh[2:4])
        n = np.tanh(gi[4:] + r * gh[4:])
        h = (1 - z) * n + z * h
        outs.append(p.segment_array("f.Wo") @ h + p.segment_array("f.bo"))
    np.testing.assert_allclose(seq_forward(spec, p, states, "f").numpy(), np.array(outs), atol=1e-12)


def test_seq_batched_matches_single():
    spec, p = _seq()
    x = np.random.default_rng(4).normal(size=(3, 6, 2))
    batched = seq_forward(spec, p, x, "f")
    for i in range(3):
        assert torch.allclose(batched[i], seq_forward(spec, p, x[i], "f"), atol=1e-12)


def test_forward_is_pure():
    spec, p = _seq()
    x = np.random.default_rng(5).normal(size=(7, 2))
    assert torch.equal(seq_forward(spec, p, x, "f"), seq_forward(spec, p, x, "f"))


def test_grad_quadratic():
    p = ParamBuilder()
    p.add("x", [1.0, -2.0])
    g = grad(lambda q: (q["x"] ** 2).sum(), p.build())
    assert g.tolist() == [2.0, -4.0]


def test_grad_constant_is_zero():
    b = ParamBuilder()
    b.add("x", [1.0, 2.0])
    p = b.build()
    assert grad(lambda q: torch.tensor(3.0, dtype=torch.float64), p).tolist() == [0.0, 0.0]
    assert grad_check(lambda q: torch.tensor(3.0, dtype=torch.float64), p) == 0.0


def test_grad_check_quadratic():
    b = ParamBuilder()
    b.add("x", np.random.default_rng(0).normal(size=6))
    assert grad_check(lambda q: (q["x"] ** 2).sum() + q["x"].sum(), b.build(), 1e-5) <= 1e-6


def test_grad_check_detects_wrong_gradient():
    b = ParamBuilder()
    b.add("x", [0.7])

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            return g * 0.0

    assert grad_check(lambda q: Wrong.apply(q["x"]).sum(), b.build()) > 0.5


def test_grad_reports_offending_segment():
    b = ParamBuilder()
    b.add("good", [1.0])
    b.add("bad", [np.nan])
    with pytest.raises(NumericalError, match="bad"):
        value_and_grad(lambda q: q.values.sum(), b.build())


def test_grad_check_rejects_bad_eps():
    b = ParamBuilder()
    b.add("x", [1.0])
    with pytest.raises(ConfigError):
        grad_check(lambda q: q["x"].sum(), b.build(), 0.0)


def _vec(values):
    b = ParamBuilder()
    b.add("p", values)
    return b.build()


def test_opt_zero_grad_no_decay_fixed_point():
    p = _vec([1.0, -3.0])
    st0 = init_optimizer(p, weight_decay=0.0)
    st1, q = opt_step(st0, p, torch.zeros(2, dtype=torch.float64))
    assert torch.equal(q.values, p.values)
    assert st1.step == 1


def test_opt_descends_on_bowl():
    p = _vec([1.0])
    st0 = init_optimizer(p, lr=1e-3, weight_decay=0.0)
    _, q = opt_step(st0, p, grad(lambda v: (v["p"] ** 2).sum(), p))
    assert abs(float(q.values[0])) < 1.0


def test_opt_decoupled_weight_decay():
    p = _vec([2.0, -4.0])
    st0 = init_optimizer(p, lr=0.1, weight_decay=0.5)
    _, q = opt_step(st0, p, torch.zeros(2, dtype=torch.float64))
    np.testing.assert_allclose(q.numpy(), p.numpy() * (1 - 0.1 * 0.5), rtol=0, atol=1e-15)


def test_opt_mask_freezes_entries():
    p = _vec([1.0, 1.0])
    st0 = init_optimizer(p)
    st1, q = opt_step(st0, p, torch.ones(2, dtype=torch.float64), mask=torch.tensor([True, False]))
    assert float(q.values[1]) == 1.0 and float(q.values[0]) < 1.0
    assert float(st1.m[1]) == 0.0


def test_opt_rejects_nonfinite_and_mismatch():
    p = _vec([1.0])
    st0 = init_optimizer(p)
    with pytest.raises(NumericalError):
        opt_step(st0, p, torch.tensor([np.inf], dtype=torch.float64))
    with pytest.raises(ConfigError):
        opt_step(st0, p, torch.zeros(2, dtype=torch.float64))


def test_fit_reduces_loss_and_keeps_length():
    target = torch.tensor([0.5, -1.5], dtype=torch.float64)
    p0 = _vec([0.0, 0.0])
    res = fit(lambda p, b: ((p["p"] - target) ** 2).sum(), p0, lambda rng: None, np.random.default_rng(0),
              epochs=5, steps_per_epoch=200, lr=0.05, weight_decay=0.0)
    assert len(res.params) == len(p0)
    assert res.epoch_losses[-1] < 1e-3 < res.epoch_losses[0]


def test_fit_reports_divergence():
    p0 = _vec([1.0])
    with pytest.raises(NumericalError, match="epoch 0 step 0"):
        fit(lambda p, b: p["p"].sum() * torch.tensor(np.inf, dtype=torch.float64), p0, lambda rng: None,
            np.random.default_rng(0), epochs=1, steps_per_epoch=1)


def test_checkpoint_roundtrip_with_dotted_name(tmp_path):
    _, p = _seq()
    save_checkpoint(tmp_path / "koap_l0.02_s1", p, {"cfg": {"m": np.int64(8)}})
    q, h = load_checkpoint(tmp_path / "koap_l0.02_s1")
    assert torch.equal(p.values, q.values) and q.layout == p.layout
    assert h == {"cfg": {"m": 8}}
    assert checkpoint_files(tmp_path / "a.b.json") == (tmp_path / "a.b.bin", tmp_path / "a.b.json")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_checkpoint_truncated(tmp_path):
    _, p = _seq()
    save_checkpoint(tmp_path / "c", p, {})
    data = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "c.bin").write_bytes(data[:-8])
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "c")


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 9), st.integers(1, 3))
def test_seq_length_property(L, d):
    spec = SeqEncoderSpec(d, 3, 2)
    b = ParamBuilder()
    init_seq(b, "f", spec, np.random.default_rng(L))
    out = seq_forward(spec, b.build(), np.ones((L, d)), "f")
    assert out.shape == (L - 1, 2)
