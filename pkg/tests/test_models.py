import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from congrad.models import Model, ModelConfig, MODES, ShapeError, perplexity
from helpers import Ev, finite_diff, rel_err, make_batch


def small_cfg(mode="agnostic"):
    return ModelConfig(input_dim=6, output_dim=4, hidden=(7, 5), mode=mode,
                       user_dim=3, cond_hidden=4)


def test_zero_params_give_zero_logits():
    m = Model(small_cfg())
    m.theta = np.zeros_like(m.theta)
    logits = m.forward(np.ones(6))
    assert np.array_equal(logits, np.zeros(4))


def test_uniform_logits_loss_is_log_c():
    m = Model(ModelConfig(input_dim=5, output_dim=10, hidden=(8,)))
    m.theta = np.zeros_like(m.theta)
    batch = make_batch(np.random.default_rng(0), 12, 5, 10, [None])
    assert m.loss(batch) == pytest.approx(math.log(10), abs=1e-12)
    assert m.loss(batch) == pytest.approx(2.302585, abs=1e-6)


def test_tiny_network_matches_hand_oracle():
    # 2-2-2 net checked against explicit scalar arithmetic.
    m = Model(ModelConfig(input_dim=2, output_dim=2, hidden=(2,)), seed=0)
    m.randomize(np.random.default_rng(0), scale=0.7)
    x = np.array([1.0, 0.0])
    W0, b0 = m.param("W0"), m.param("b0")
    W1, b1 = m.param("W1"), m.param("b1")
    hidden = [max(W0[i, 0] * x[0] + W0[i, 1] * x[1] + b0[i], 0.0) for i in range(2)]
    expect = [W1[i, 0] * hidden[0] + W1[i, 1] * hidden[1] + b1[i] for i in range(2)]
    assert np.allclose(m.forward(x), expect, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("mode", ["encoder", "decoder", "adapter"])
def test_zeroed_residual_output_matches_agnostic_bitwise(mode):
    rng = np.random.default_rng(3)
    cond = Model(small_cfg(mode), seed=1)
    cond.randomize(rng, scale=0.6)
    for u in ("a", "b"):
        cond.embedding(u)[:] = rng.normal(size=3)
    n_blocks = len(cond.cfg.hidden) if mode == "adapter" else 1
    for j in range(n_blocks):
        cond.param(f"cW2_{j}")[:] = 0.0
        cond.param(f"cb2_{j}")[:] = 0.0
    plain = Model(small_cfg("agnostic"), seed=1)
    for name in plain.param_names():
        plain.param(name)[:] = cond.param(name)
    x = rng.normal(size=6)
    assert np.array_equal(cond.forward(x, "a"), plain.forward(x))
    assert np.array_equal(cond.forward(x, "b"), plain.forward(x))


def test_new_user_embedding_is_zero_and_created_once():
    m = Model(small_cfg("encoder"))
    m.ensure_user("u1", step=5)
    assert np.array_equal(m.embedding("u1"), np.zeros(3))
    m.embedding("u1")[:] = 1.0
    m.ensure_user("u1", step=9)
    assert np.array_equal(m.embedding("u1"), np.ones(3))
    assert m.user_created["u1"] == 5


def test_forward_shape_errors():
    m = Model(small_cfg("encoder"))
    with pytest.raises(ShapeError):
        m.forward(np.ones(5), "u")
    with pytest.raises(ShapeError):
        m.forward(np.ones(6))  # encoder mode needs a user id


def test_label_out_of_range_rejected():
    m = Model(small_cfg())
    with pytest.raises(ValueError, match="label"):
        m.loss([Ev(x=np.zeros(6), y=4)])
    with pytest.raises(ValueError, match="non-empty"):
        m.loss([])


@pytest.mark.parametrize("mode", MODES)
def test_gradients_match_finite_differences(mode):
    rng = np.random.default_rng(11)
    cfg = ModelConfig(input_dim=9, output_dim=5, hidden=(12, 8), mode=mode,
                      user_dim=3, cond_hidden=4)
    m = Model(cfg, seed=2)
    batch = make_batch(rng, 5, 9, 5, ["u0", "u1", "u2"])
    m.loss(batch)  # creates the embeddings before randomizing
    m.randomize(rng, scale=0.5)

    loss, gflat = m.loss_and_grad_flat(batch)
    theta0 = m.snapshot()

    def f(theta):
        m.theta = theta
        return m.loss(batch)

    informative = np.flatnonzero(np.abs(gflat) >= 1e-3)
    assert len(informative) >= 100
    coords = rng.choice(informative, size=100, replace=False)
    fd = finite_diff(f, theta0, coords)
    m.theta = theta0
    worst = max(rel_err(gflat[i], fd[i]) for i in coords)
    assert worst <= 1e-5


def test_duplicated_batch_same_loss_and_grad():
    rng = np.random.default_rng(4)
    m = Model(small_cfg("adapter"), seed=7)
    batch = make_batch(rng, 6, 6, 4, ["a", "b"])
    m.loss(batch)
    m.randomize(rng, scale=0.4)
    l1, g1 = m.loss_and_grad_flat(batch)
    l2, g2 = m.loss_and_grad_flat(batch + batch)
    assert l1 == pytest.approx(l2, abs=1e-14)
    assert np.allclose(g1, g2, rtol=1e-10, atol=1e-13)


def test_loss_and_grad_reports_only_touched_users():
    rng = np.random.default_rng(5)
    m = Model(small_cfg("decoder"), seed=7)
    m.ensure_user("idle")
    batch = make_batch(rng, 4, 6, 4, ["a", "b"])
    m.loss(batch)
    m.randomize(rng, scale=0.4)
    _, _, gusers = m.loss_and_grad(batch)
    assert set(gusers) == {"a", "b"}


@given(st.permutations(list(range(8))))
@settings(max_examples=25, deadline=None)
def test_loss_permutation_invariant(perm):
    rng = np.random.default_rng(9)
    m = Model(small_cfg(), seed=3)
    batch = make_batch(rng, 8, 6, 4, [None])
    base = m.loss(batch)
    assert m.loss([batch[i] for i in perm]) == pytest.approx(base, abs=1e-12)


def test_flatten_round_trip_is_identity():
    m = Model(small_cfg("adapter"), seed=6)
    m.embedding("x")
    snap = m.snapshot()
    m.randomize(np.random.default_rng(0))
    m.restore(snap)
    assert np.array_equal(m.theta, snap)
    # named views address the same storage the flat vector does
    m.param("W0")[0, 0] = 123.0
    assert 123.0 in m.theta


def test_perplexity_values():
    assert perplexity(0.0) == 1.0
    assert perplexity(math.log(10)) == pytest.approx(10.0, rel=1e-12)


def test_perplexity_of_unigram_baseline_equals_exp_entropy():
    # Scoring a sample with its own empirical unigram frequencies yields a
    # mean NLL equal to the empirical entropy, hence perplexity exp(H).
    rng = np.random.default_rng(42)
    tokens = rng.choice(6, size=10_000, p=[0.4, 0.25, 0.15, 0.1, 0.06, 0.04])
    counts = np.bincount(tokens, minlength=6)
    freqs = counts / counts.sum()
    mean_nll = float(np.mean([-math.log(freqs[t]) for t in tokens]))
    entropy = -sum(p * math.log(p) for p in freqs if p > 0)
    assert perplexity(mean_nll) == pytest.approx(math.exp(entropy), rel=1e-9)
