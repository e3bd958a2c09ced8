"""Ensemble statistics: limsup estimate, max-of-normals calibration,
quadratic diagnostic, Gronwall certificate, kernel decade stability."""

import math

import numpy as np
import pytest

from oulab import extremes as ext
from oulab import model as mdl
from oulab import simulate as sim


def _scalar_model(noise=math.sqrt(2.0)):
    return mdl.build_stationary_model(
        mdl.SdeSystem(np.array([[1.0]]), np.array([[noise]])))


@pytest.fixture(scope="module")
def scalar_model():
    return _scalar_model()


@pytest.fixture(scope="module")
def scalar_paths(scalar_model):
    # shared stationary-start ensemble; projection tracking on so the
    # same paths feed the projection statistic tests
    grid = sim.TimeGrid.spanning(1e4, scalar_model.default_step())
    return sim.run_ensemble(
        lambda r: sim.simulate_linear(scalar_model, grid, "stationary", r,
                                      track_projection=True),
        16, 777)


@pytest.fixture(scope="module")
def tanh_model():
    drift = mdl.DriftSpec(kind="tanh_bounded", scale=1.0)
    return mdl.build_stationary_model(
        mdl.SdeSystem(np.array([[1.0]]), np.array([[math.sqrt(2.0)]]),
                      drift=drift))


@pytest.fixture(scope="module")
def tanh_paths(tanh_model):
    grid = sim.TimeGrid.spanning(1e4, tanh_model.default_step())
    return sim.run_ensemble(
        lambda r: sim.simulate_perturbed(tanh_model, grid, [0.0], r),
        8, 901)


@pytest.fixture(scope="module")
def control_paths(tanh_model):
    # large start amplifies the transient the certificate must cover,
    # which is what makes a weakened envelope falsifiable
    grid = sim.TimeGrid.spanning(1e3, tanh_model.default_step())
    return sim.run_ensemble(
        lambda r: sim.simulate_perturbed(tanh_model, grid, [18.0], r),
        4, 20260815)


@pytest.fixture(scope="module")
def kernel_paths():
    grid = sim.TimeGrid.spanning(1e4, 0.25)
    spec = sim.KernelSpec(lam=1.0)
    return [sim.simulate_kernel(spec, grid, sim.RngStream(313, i))
            for i in range(8)]


# ---------------------------------------------------------------- limsup

def test_limsup_zero_noise_exact():
    # no noise: the running max freezes at |x0| so the tail statistic is
    # |x0| / sqrt(log t) at the first checkpoint of the window, exactly
    m = _scalar_model(noise=0.0)
    grid = sim.TimeGrid.spanning(1e4, m.default_step())
    p = sim.simulate_linear(m, grid, [1.0], sim.RngStream(5, 0))
    tm = grid.times
    expected = 1.0 / math.sqrt(math.log(tm[tm >= tm[-1] / 100.0][0]))
    rep = ext.estimate_limsup([p, p])
    assert np.isclose(rep.c_hat, expected, rtol=1e-12)
    assert np.all(p.max_x == 1.0)


def test_limsup_report_fields(scalar_paths):
    rep = ext.estimate_limsup(scalar_paths, c_pred=math.sqrt(2.0),
                              config={"name": "scalar"})
    assert rep.n_paths == 16
    assert rep.t_max == scalar_paths[0].grid.t_max
    assert rep.rel_err == abs(rep.c_hat - rep.c_pred) / rep.c_pred
    assert rep.q10 <= rep.c_hat <= rep.q90
    assert rep.per_path.shape == (16,)
    assert np.isclose(rep.mean, np.mean(rep.per_path), rtol=1e-15)
    d = rep.to_dict()
    assert d["config"] == {"name": "scalar"}
    assert set(d) >= {"c_hat", "c_pred", "rel_err", "per_path", "n_paths",
                      "t_max", "window_decades", "mean", "q10", "q90"}


def test_limsup_without_prediction(scalar_paths):
    rep = ext.estimate_limsup(scalar_paths)
    assert rep.c_pred is None and rep.rel_err is None
    assert "config" not in rep.to_dict()


def test_limsup_scalar_band(scalar_paths):
    # T = 1e4 runs high relative to sqrt(2); the estimate converges from
    # above on the 1/sqrt(log t) scale
    rep = ext.estimate_limsup(scalar_paths, c_pred=math.sqrt(2.0))
    assert 0.6 * math.sqrt(2.0) < rep.c_hat < 1.5 * math.sqrt(2.0)


def test_limsup_permutation_invariant(scalar_paths):
    a = ext.estimate_limsup(scalar_paths)
    b = ext.estimate_limsup(list(reversed(scalar_paths)))
    assert a.c_hat == b.c_hat and a.mean == b.mean
    assert a.q10 == b.q10 and a.q90 == b.q90
    assert np.array_equal(a.per_path, b.per_path[::-1])


def test_limsup_scale_equivariance(scalar_model, scalar_paths):
    # tripling D triples Sigma^(1/2), c_pred, and every path statistic
    # under matched seeds
    m3 = _scalar_model(noise=3.0 * math.sqrt(2.0))
    grid = sim.TimeGrid.spanning(1e4, m3.default_step())
    paths3 = sim.run_ensemble(
        lambda r: sim.simulate_linear(m3, grid, "stationary", r,
                                      track_projection=True),
        16, 777)
    a = ext.estimate_limsup(scalar_paths, c_pred=scalar_model.c_pred)
    b = ext.estimate_limsup(paths3, c_pred=m3.c_pred)
    assert np.isclose(m3.c_pred, 3.0 * scalar_model.c_pred, rtol=1e-12)
    assert np.allclose(b.per_path, 3.0 * a.per_path, rtol=1e-12)
    assert np.isclose(b.c_hat, 3.0 * a.c_hat, rtol=1e-12)
    assert np.isclose(b.rel_err, a.rel_err, rtol=1e-9)


def test_limsup_rejects_mismatched_grids(scalar_model, scalar_paths):
    other = sim.TimeGrid.spanning(2e4, scalar_model.default_step())
    p = sim.simulate_linear(scalar_model, other, "stationary",
                            sim.RngStream(1, 0))
    with pytest.raises(ValueError, match="mismatched grids"):
        ext.estimate_limsup([scalar_paths[0], p])


def test_limsup_rejects_window_wider_than_span(scalar_paths):
    with pytest.raises(ValueError, match="decade tail window"):
        ext.estimate_limsup(scalar_paths, window_decades=9.0)


def test_limsup_rejects_empty():
    with pytest.raises(ValueError, match="at least one path"):
        ext.estimate_limsup([])


# ---------------------------------------------------------------- gumbel

def test_gumbel_mean_band():
    g = ext.gumbel_check(10_000, 16, sim.RngStream(424, 0))
    assert g["n"] == 10_000 and g["reps"] == 16
    assert 0.87 <= g["mean_ratio"] <= 1.00
    assert g["ratios"].shape == (16,)
    assert g["std_ratio"] > 0.0


def test_gumbel_deterministic():
    a = ext.gumbel_check(2000, 4, sim.RngStream(99, 1))
    b = ext.gumbel_check(2000, 4, sim.RngStream(99, 1))
    assert np.array_equal(a["ratios"], b["ratios"])


def test_gumbel_monotone_within_mc_error():
    # the mean creeps toward 1 so slowly that point estimates may wobble;
    # the meaningful ordering is monotone within 2 standard errors
    means, ses = [], []
    for i, n in enumerate((1000, 10_000)):
        g = ext.gumbel_check(n, 16, sim.RngStream(20260815, i))
        means.append(g["mean_ratio"])
        ses.append(g["std_ratio"] / math.sqrt(g["reps"]))
    assert means[1] >= means[0] - 2.0 * math.hypot(*ses)


def test_gumbel_validation():
    with pytest.raises(ValueError, match="at least 1000"):
        ext.gumbel_check(999, 4, sim.RngStream(1, 0))
    with pytest.raises(ValueError, match="reps"):
        ext.gumbel_check(2000, 0, sim.RngStream(1, 0))


# ------------------------------------------------------------- quadratic

def test_quadratic_scalar_series_exact(scalar_model, scalar_paths):
    # Sigma = 1 so the pointwise series is x^2 / (2 log t) verbatim
    q = ext.quadratic_diagnostic(scalar_paths, scalar_model)
    t = scalar_paths[0].grid.times
    for i in (0, 7):
        v = 0.5 * scalar_paths[i].states[:, 0] ** 2 / np.log(t)
        assert np.allclose(q["series"][i], v, rtol=1e-12)


def test_quadratic_ties_to_limsup(scalar_model, scalar_paths):
    # running-max form: per-path tail is (per-path c)^2 / (2 lambda_1);
    # with an odd path count the medians pick the same path
    odd = scalar_paths[:15]
    q = ext.quadratic_diagnostic(odd, scalar_model)
    rep = ext.estimate_limsup(odd)
    assert np.allclose(q["per_path_tail"],
                       rep.per_path ** 2 / (2.0 * scalar_model.lambda1),
                       rtol=1e-12)
    assert np.isclose(q["median_tail"], rep.c_hat ** 2 / 2.0, rtol=1e-12)


def test_quadratic_scalar_band(scalar_model, scalar_paths):
    # finite-horizon overshoot puts the median above the limiting value 1
    q = ext.quadratic_diagnostic(scalar_paths, scalar_model)
    assert 0.9 < q["median_tail"] < 1.7


def test_quadratic_basis_change():
    # the diagnostic is a scalar invariant of the system, so conjugating
    # (A, D) by a rotation moves the median only by sampling noise
    A = np.diag([1.0, 2.0])
    th = 0.7
    Q = np.array([[math.cos(th), -math.sin(th)],
                  [math.sin(th), math.cos(th)]])
    m1 = mdl.build_stationary_model(mdl.SdeSystem(A, np.eye(2)))
    m2 = mdl.build_stationary_model(mdl.SdeSystem(Q @ A @ Q.T, Q))
    g1 = sim.TimeGrid.spanning(1e4, m1.default_step())
    g2 = sim.TimeGrid.spanning(1e4, m2.default_step())
    p1 = sim.run_ensemble(
        lambda r: sim.simulate_linear(m1, g1, "stationary", r), 25, 555)
    p2 = sim.run_ensemble(
        lambda r: sim.simulate_linear(m2, g2, "stationary", r), 25, 555)
    q1 = ext.quadratic_diagnostic(p1, m1)
    q2 = ext.quadratic_diagnostic(p2, m2)
    assert abs(q1["median_tail"] - q2["median_tail"]) <= 0.2 * q1["median_tail"]


def test_quadratic_rejects_singular_sigma():
    m = _scalar_model(noise=0.0)
    grid = sim.TimeGrid.spanning(1e4, m.default_step())
    p = sim.simulate_linear(m, grid, [1.0], sim.RngStream(5, 0))
    with pytest.raises(ValueError, match="degenerate"):
        ext.quadratic_diagnostic([p], m)


def test_quadratic_rejects_dimension_mismatch(scalar_paths):
    m2 = mdl.build_stationary_model(mdl.SdeSystem(np.eye(2), np.eye(2)))
    with pytest.raises(ValueError, match="dimension"):
        ext.quadratic_diagnostic(scalar_paths, m2)


# -------------------------------------------------------------- gronwall

def test_gronwall_trivial_linear_is_tight(scalar_model):
    # zero start, zero drift bound: f(t) is the noise max itself and
    # beta = 1, so the slack vanishes identically
    grid = sim.TimeGrid.spanning(1e3, scalar_model.default_step())
    p = sim.simulate_linear(scalar_model, grid, [0.0], sim.RngStream(3, 0))
    cert = ext.gronwall_check(p, scalar_model, C=0.0, eps=0.0)
    assert cert.passed
    assert cert.min_slack == 0.0
    assert np.all(cert.slack == 0.0)
    assert cert.beta == 1.0


def test_gronwall_passes_on_perturbed_ensemble(tanh_model, tanh_paths):
    C = tanh_model.system.drift.scale  # |tanh| <= 1 in one dimension
    for p in tanh_paths:
        cert = ext.gronwall_check(p, tanh_model, C=C, eps=0.0)
        assert cert.passed, cert.min_slack
        assert cert.min_slack > 0.0
        assert cert.K == tanh_model.K and cert.lam0 == tanh_model.lam0


def test_gronwall_halved_K_fails_large_start(tanh_model, control_paths):
    # the negative control: a transient from |x0| = 18 is not covered by
    # half the true envelope constant, so every control path must fail
    for p in control_paths:
        good = ext.gronwall_check(p, tanh_model, C=1.0, eps=0.0)
        bad = ext.gronwall_check(p, tanh_model, C=1.0, eps=0.0,
                                 K=0.5 * tanh_model.K)
        assert good.passed
        assert not bad.passed
        assert bad.min_slack < 0.0


def test_gronwall_certificate_fields(tanh_model, tanh_paths):
    eps = 0.05
    cert = ext.gronwall_check(tanh_paths[0], tanh_model, C=1.0, eps=eps,
                              K=2.0, lam0=0.5)
    assert cert.K == 2.0 and cert.lam0 == 0.5
    assert cert.eps0 == 2.0 * eps
    assert np.isclose(cert.beta, 0.5 / (0.5 - 0.1), rtol=1e-15)
    assert cert.t.shape == cert.slack.shape
    d = cert.to_dict()
    assert set(d) == {"K", "lam0", "C", "eps", "eps0", "beta",
                      "min_slack", "passed"}


def test_gronwall_validation(scalar_model, tanh_paths):
    p = tanh_paths[0]
    m = scalar_model
    with pytest.raises(ValueError, match="nonnegative"):
        ext.gronwall_check(p, m, C=-1.0, eps=0.0)
    with pytest.raises(ValueError, match="nonnegative"):
        ext.gronwall_check(p, m, C=0.0, eps=-0.1)
    with pytest.raises(ValueError, match="eps0"):
        ext.gronwall_check(p, m, C=0.0, eps=m.lam0 / m.K)


# ------------------------------------------------------- kernel decades

def test_kernel_boundedness_passes(kernel_paths):
    chk = ext.kernel_boundedness_check(kernel_paths)
    assert chk["passed"]
    assert chk["pass_fraction"] == 1.0
    assert chk["per_path_pass"].shape == (8,)
    assert np.all(chk["per_path_late_over_early"] > 0.0)


def test_kernel_boundedness_negative_control(kernel_paths):
    # squeezing the allowance below the observed late/early margins must
    # flip the verdict, otherwise the check could never fail
    chk = ext.kernel_boundedness_check(kernel_paths, factor=0.7)
    assert not chk["passed"]
    assert chk["pass_fraction"] < 0.95


def test_kernel_boundedness_needs_four_decades():
    grid = sim.TimeGrid.spanning(500.0, 0.25)
    spec = sim.KernelSpec(lam=1.0)
    p = sim.simulate_kernel(spec, grid, sim.RngStream(313, 0))
    with pytest.raises(ValueError, match="decades"):
        ext.kernel_boundedness_check([p])


# ------------------------------------------------------------ projection

def test_projection_tail_stat(scalar_paths):
    out = ext.projection_tail_stat(scalar_paths)
    assert out["per_path"].shape == (16,)
    # the statistic estimates the max-of-normals ratio, which sits near
    # (slightly above) its limiting value 1 at these horizons
    assert 0.8 <= out["median"] <= 1.3
    assert np.median(out["per_path"]) == out["median"]


def test_projection_requires_tracking(scalar_model):
    grid = sim.TimeGrid.spanning(1e4, scalar_model.default_step())
    p = sim.simulate_linear(scalar_model, grid, "stationary",
                            sim.RngStream(8, 0))
    with pytest.raises(ValueError, match="projection tracking"):
        ext.projection_tail_stat([p])
