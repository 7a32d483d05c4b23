import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from certdistill import metrics
from certdistill.cd import (CDConfig, SourceStats, cd_adapt, cd_loss, cd_loss_grad, compute_source_stats,
                            compute_tau, stats_from_logits)
from certdistill.errors import InputError, ParameterError
from certdistill.nn import Network, softmax_temp

from conftest import identity_net

G_S, G_T1, G_T2 = [8.0, 7.29], [0.9199, 0.00019], [6.1, 6.5]
EXAMPLE_STATS = SourceStats(h0=0.914, kappa=10.823)
EXAMPLE_CONFIG = CDConfig(t_min=1.2, t_max=4.0, h_max=1.0)


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def tau_oracle(z, h0, kappa, t_min, t_max, h_max):
    """Scalar re-derivation of the tau recipe for one logit vector."""
    m = max(z)
    ex = [math.exp(v - m) for v in z]
    p = [e / sum(ex) for e in ex]
    h = -sum(q * math.log2(q) for q in p if q > 0)
    e = _sig(h - h0)
    t = t_min + (e / h_max) * (t_max - t_min)
    norm = math.sqrt(sum(v * v for v in z))
    return (1.0 + 0.4 * (1.5 - 1.5 * _sig(norm / kappa))) * t


# -- source statistics ----------------------------------------------------

def test_source_stats_single_sample():
    s = compute_source_stats(identity_net(2), np.array([G_S]))
    assert s.h0 == pytest.approx(0.914, abs=1e-3)
    assert s.kappa == pytest.approx(10.823, abs=1e-3)


def test_source_stats_limits_and_median():
    assert stats_from_logits([[500.0, 0.0], [0.0, 400.0]]).h0 == pytest.approx(0.0, abs=1e-12)
    assert stats_from_logits([[3.0, 0.0], [0.0, 5.0]]).kappa == 4.0
    with pytest.raises(InputError):
        compute_source_stats(identity_net(2), np.zeros((0, 2)))


# -- tau ------------------------------------------------------------------

def test_tau_example_ordering_and_values():
    tau = compute_tau(np.array([G_S, G_T1, G_T2]), EXAMPLE_STATS, EXAMPLE_CONFIG).tau
    assert tau[0] < tau[2] < tau[1]
    for z, got, approx in zip((G_S, G_T1, G_T2), tau, (3.020, 3.300, 3.123)):
        assert got == pytest.approx(tau_oracle(z, 0.914, 10.823, 1.2, 4.0, 1.0), abs=1e-12)
        assert got == pytest.approx(approx, abs=1e-3)


def test_tau_large_norm_limit_and_bad_kappa():
    cfg = CDConfig(t_min=2.0, t_max=2.0)
    tau = compute_tau(np.array([[1e6, 0.0, 0.0]]), SourceStats(0.5, 1.0), cfg).tau
    assert tau[0] == pytest.approx(2.0, rel=1e-9)
    with pytest.raises(ParameterError):
        compute_tau(np.array([G_S]), SourceStats(0.5, 0.0), cfg)


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 3.0), st.floats(0.0, 4.0))
def test_tau_bounds(seed, t_min, extra):
    rng = np.random.default_rng(seed)
    cfg = CDConfig(t_min=t_min, t_max=t_min + extra)
    z = rng.normal(0, rng.uniform(0.1, 20), size=(30, int(rng.integers(2, 12))))
    stats = SourceStats(float(rng.uniform(0, 3)), float(rng.uniform(0.1, 30)))
    tau = compute_tau(z, stats, cfg).tau
    assert np.all(tau >= cfg.t_min)
    assert np.all(tau < 1.6 * cfg.t_max)


@given(st.floats(0.5, 30.0))
def test_tau_monotone_in_entropy_at_fixed_norm(r):
    # z = r (cos a, sin a): the norm is r for every a; entropy grows as a -> pi/4
    a = np.linspace(0.0, math.pi / 4, 40)
    z = r * np.stack([np.cos(a), np.sin(a)], axis=1)
    h = metrics.entropy_bits(softmax_temp(z, 1.0))
    assert np.all(np.diff(h) >= -1e-12)
    tau = compute_tau(z, SourceStats(0.7, 5.0), CDConfig()).tau
    assert np.all(np.diff(tau) >= -1e-12)


@given(st.integers(0, 2**31 - 1))
def test_tau_monotone_in_norm_at_fixed_entropy(seed):
    # adding c to every logit leaves the softmax unchanged but moves the norm
    rng = np.random.default_rng(seed)
    z0 = rng.normal(0, 3, size=5)
    z = np.stack([z0 - z0.mean() + c for c in np.linspace(0, 20, 30)])
    norms = metrics.logit_norm(z)
    assert np.all(np.diff(norms) > 0)
    tau = compute_tau(z, SourceStats(1.0, 6.0), CDConfig()).tau
    assert np.all(np.diff(tau) <= 1e-12)


# -- loss -----------------------------------------------------------------

def test_cd_loss_values():
    half = np.array([[0.5, 0.5]])
    assert cd_loss(half, half, 1.0) == pytest.approx(math.log(2))
    s, t = np.array([[0.7, 0.2, 0.1]]), np.array([[0.5, 0.3, 0.2]])
    for kind in ("per_class_bce", "soft_cross_entropy"):
        assert cd_loss(s, t, 2.0, kind) == pytest.approx(4 * cd_loss(s, t, 1.0, kind))
    with pytest.raises(InputError):
        cd_loss(np.array([[1.2, -0.2]]), half, 1.0)


@pytest.mark.parametrize("kind", ["per_class_bce", "soft_cross_entropy"])
def test_cd_loss_gradient_vanishes_at_teacher(kind):
    p = softmax_temp(np.random.default_rng(0).normal(size=(4, 5)), 1.0)
    np.testing.assert_allclose(cd_loss_grad(p, p, 2.5, kind), 0.0, atol=1e-15)


@pytest.mark.parametrize("kind", ["per_class_bce", "soft_cross_entropy"])
def test_cd_loss_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, 4))
    t = softmax_temp(rng.normal(size=(3, 4)), 2.0)
    g = cd_loss_grad(softmax_temp(z, 1.0), t, 1.7, kind)
    h = 1e-6
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        num = (cd_loss(softmax_temp(zp, 1.0), t, 1.7, kind) - cd_loss(softmax_temp(zm, 1.0), t, 1.7, kind)) / (2 * h)
        assert g[idx] == pytest.approx(num, rel=1e-6, abs=1e-10)


# -- adaptation -----------------------------------------------------------

def _shifted_problem(seed=0):
    rng = np.random.default_rng(seed)
    net = Network.build(4, [6], 2, seed=seed)
    source = rng.normal(size=(200, 4))
    stats = compute_source_stats(net, source)
    target = rng.normal(size=(120, 4)) * 1.5 + 0.7
    return net, stats, target


def test_cd_full_freeze_is_temperature_scaling_only():
    net, stats, x = _shifted_problem()
    student = net.copy()
    before = student.checksum()
    res = cd_adapt(net, student, x, stats, CDConfig(beta=1.0, lr=0.5))
    assert res.student.checksum() == before
    assert res.student.inference_temperature == res.log[-1].t_avg > 1.0


def test_cd_zero_lr_matches_scaled_copy():
    net, stats, x = _shifted_problem()
    res = cd_adapt(net, net.copy(), x, stats, CDConfig(lr=0.0))
    assert res.student.checksum() == net.checksum()
    np.testing.assert_array_equal(res.student.predict_proba(x), softmax_temp(net.forward(x), res.log[-1].t_avg))


def test_cd_raises_entropy_and_keeps_teacher():
    net, stats, x = _shifted_problem()
    teacher_sum = net.checksum()
    before = float(np.mean(metrics.entropy_bits(net.predict_proba(x))))
    res = cd_adapt(net, net.copy(), x, stats, CDConfig(lr=0.01))
    after = float(np.mean(metrics.entropy_bits(res.student.predict_proba(x))))
    assert np.mean([b.t_avg for b in res.log]) > 1.0
    assert after > before
    assert net.checksum() == teacher_sum
    assert net.bn_mode == "running_stats"


def test_cd_deterministic_and_batch_log():
    net, stats, x = _shifted_problem()
    a = cd_adapt(net, net.copy(), x, stats, CDConfig(lr=0.01, batch_size=50))
    b = cd_adapt(net, net.copy(), x, stats, CDConfig(lr=0.01, batch_size=50))
    assert a.student.checksum() == b.student.checksum()
    assert [e.batch for e in a.log] == [0, 1, 2]
    assert a.log_csv() == b.log_csv()
    assert a.log_csv().splitlines()[0] == "batch,t_avg,loss,entropy_before,entropy_after"


def test_cd_variants_run_and_leave_teacher():
    net, stats, x = _shifted_problem()
    teacher_sum = net.checksum()
    for cfg in (CDConfig(loss="soft_cross_entropy"), CDConfig(epochs=3, refresh_teacher=True, beta=0.3),
                CDConfig(bn_mode="batch_stats")):
        res = cd_adapt(net, net.copy(), x, stats, cfg)
        assert np.all(np.isfinite(res.student.predict_proba(x)))
        assert net.checksum() == teacher_sum


def test_cd_input_errors():
    net, stats, x = _shifted_problem()
    with pytest.raises(InputError):
        cd_adapt(net, net.copy(), np.zeros((0, 4)), stats)
    with pytest.raises(ParameterError):
        cd_adapt(net, net.copy(), x, SourceStats(0.5, 0.0))
    with pytest.raises(ParameterError):
        CDConfig(t_min=3.0, t_max=2.0)
    with pytest.raises(ParameterError):
        CDConfig(loss="kl")
