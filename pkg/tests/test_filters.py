import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusepos import filters as F
from fusepos.tensor import RngStream


def kf_oracle(x, P, l, phi, Z, Q, R):
    """Textbook linear Kalman step on the error-state model, written out longhand."""
    c, s = math.cos(phi), math.sin(phi)
    A = np.eye(4)
    A[0, 2], A[0, 3], A[1, 2], A[1, 3] = c, -l * s, s, l * c
    x = A @ x
    P = A @ P @ A.T + Q
    if Z is None:
        return x, P
    Hm = np.zeros((2, 4))
    Hm[0, 0] = Hm[1, 1] = 1.0
    K = P @ Hm.T @ np.linalg.inv(Hm @ P @ Hm.T + R)
    x = x + K @ (Z - Hm @ x)
    P = (np.eye(4) - K @ Hm) @ P
    return x, P


def _ltv_sequence(seed, n=500):
    g = np.random.default_rng(seed)
    ls = g.uniform(0.3, 0.9, n)
    phis = g.uniform(-np.pi, np.pi, n)
    zs = g.normal(0, 0.5, (n, 2))
    has = g.random(n) < 0.7
    return ls, phis, zs, has


@pytest.mark.parametrize("method", ["ekf", "ukf"])
def test_matches_linear_kalman_filter(method):
    noise = F.NoiseParams(q_x=0.01, q_y=0.02, q_l=1e-3, q_phi=2e-3, r_x=0.3, r_y=0.2)
    Q, R = noise.Q, noise.R
    ls, phis, zs, has = _ltv_sequence(7)
    x_o = x_m = np.array([0.1, -0.1, 0.02, 0.01])
    P_o = P_m = np.diag([0.05, 0.05, 1e-3, 1e-2])
    worst = 0.0
    for l, phi, z, h in zip(ls, phis, zs, has):
        Z = z if h else None
        x_o, P_o = kf_oracle(x_o, P_o, l, phi, Z, Q, R)
        if method == "ekf":
            x_m, P_m = F.ekf_predict(x_m, P_m, l, phi, Q)
            if Z is not None:
                x_m, P_m = F.ekf_update(x_m, P_m, Z, R)
        else:
            x_m, P_m = F.ukf_error_step(x_m, P_m, l, phi, Z, Q, R)
        worst = max(worst, np.max(np.abs(x_m - x_o)), np.max(np.abs(P_m - P_o)))
    assert worst < 1e-8


def test_error_state_injection_matches_full_state_kf():
    # with known heading the nominal + injected error equals a linear KF on (x, y)
    g = np.random.default_rng(3)
    noise = F.NoiseParams(q_x=0.02, q_y=0.02, q_l=0.0, q_phi=0.0, r_x=0.25, r_y=0.25)
    P0 = np.diag([0.04, 0.04, 0.0, 0.0])
    nominal = np.array([1.0, 2.0, 0.3, 0.0])
    err = np.zeros(4)
    P = P0.copy()
    m, C = nominal[:2].copy(), P0[:2, :2].copy()
    for _ in range(100):
        l, dphi = g.uniform(0.4, 0.8), g.normal(0, 0.2)
        phi = float(F.wrap_angle(nominal[2] + dphi))
        nominal = np.array([nominal[0] + l * math.cos(phi), nominal[1] + l * math.sin(phi), phi, 0.0])
        err, P = F.ekf_predict(err, P, l, phi, noise.Q)
        z = g.normal(nominal[:2], 0.5)
        err, P = F.ekf_update(err, P, z - nominal[:2], noise.R)
        nominal, err = F.ekf_inject(nominal, err)
        # oracle
        m = m + l * np.array([math.cos(phi), math.sin(phi)])
        C = C + 0.02 * np.eye(2)
        K = C @ np.linalg.inv(C + 0.25 * np.eye(2))
        m = m + K @ (z - m)
        C = (np.eye(2) - K) @ C
        assert nominal[:2] == pytest.approx(m, abs=1e-9)
        assert np.all(err == 0)


def test_pf_matches_kalman_mean_in_linear_gaussian_case():
    cfg = F.PFConfig(n=50_000, sigma_l=0.0, sigma_phi=0.0, sigma_pos=0.2, sigma_like=0.4, init_spread=0.0)
    rng = RngStream(5)
    g = np.random.default_rng(11)
    ps = F.ParticleSet.around(0.0, 0.0, 0.0, cfg.n, 0.0, rng)
    m, C = np.zeros(2), np.zeros((2, 2))
    truth = np.zeros(2)
    worst = 0.0
    for _ in range(40):
        l, dphi = 0.6, g.normal(0, 0.3)
        phi = float(ps.phi[0]) + dphi
        # fixes drawn from the same model the filters assume
        truth = truth + l * np.array([math.cos(phi), math.sin(phi)]) + g.normal(0, 0.2, 2)
        z = truth + g.normal(0, 0.4, 2)
        ps = F.pf_step(ps, l, dphi, z, cfg, rng)
        m = m + l * np.array([math.cos(phi), math.sin(phi)])
        C = C + 0.04 * np.eye(2)
        K = C @ np.linalg.inv(C + 0.16 * np.eye(2))
        m = m + K @ (z - m)
        C = (np.eye(2) - K) @ C
        px, py, _ = ps.mean()
        worst = max(worst, math.hypot(px - m[0], py - m[1]))
    assert worst < 0.05


def test_pf_error_shrinks_with_particles():
    g = np.random.default_rng(2)
    steps = [(0.6, 0.0)] * 30
    zs = [np.array([0.6 * k, 0.0]) + g.normal(0, 0.4, 2) for k in range(1, 31)]

    def run(n, seed):
        cfg = F.PFConfig(n=n, sigma_l=0.0, sigma_phi=0.0, sigma_pos=0.2, sigma_like=0.4, init_spread=0.0)
        rng = RngStream(seed)
        ps = F.ParticleSet.around(0.0, 0.0, 0.0, n, 0.0, rng)
        for (l, d), z in zip(steps, zs):
            ps = F.pf_step(ps, l, d, z, cfg, rng)
        return np.array(ps.mean()[:2])

    ref = run(100_000, 99)
    spread = [np.mean([np.linalg.norm(run(n, s) - ref) for s in range(6)]) for n in (200, 2000, 8000)]
    assert spread[0] > spread[1] > spread[2]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_covariance_stays_symmetric_psd(seed):
    g = np.random.default_rng(seed)
    noise = F.NoiseParams(*g.uniform(1e-6, 0.1, 4), *g.uniform(1e-3, 1.0, 2))
    err, P = np.zeros(4), np.diag(g.uniform(1e-6, 1.0, 4))
    for _ in range(60):
        err, P = F.ekf_predict(err, P, g.uniform(0, 1.5), g.uniform(-np.pi, np.pi), noise.Q)
        if g.random() < 0.6:
            err, P = F.ekf_update(err, P, g.normal(0, 1, 2), noise.R)
        assert np.array_equal(P, P.T)
        assert np.min(np.linalg.eigvalsh(P)) >= -1e-12


@settings(max_examples=60, deadline=None)
@given(
    st.floats(1e-4, 10.0), st.floats(1e-4, 10.0), st.floats(1e-4, 10.0), st.floats(1e-4, 10.0),
    st.floats(1.01, 10.0),
)
def test_gain_monotone_for_uncorrelated_covariance(px, py, rx, ry, factor):
    # for a diagonal P the gain of each observed axis is P/(P+R): up in P, down in R
    def gain(P, R):
        # response of the observed error components to unit innovations
        cols = [F.ekf_update(np.zeros(4), P, e, R)[0][:2] for e in np.eye(2)]
        return np.stack(cols, axis=1)

    P = np.diag([px, py, 0.1, 0.1])
    R = np.diag([rx, ry])
    K = gain(P, R)
    K_bigP = gain(np.diag([px * factor, py * factor, 0.1, 0.1]), R)
    K_bigR = gain(P, R * factor)
    assert np.all(np.diag(K_bigP) >= np.diag(K) - 1e-12)
    assert np.all(np.diag(K_bigR) <= np.diag(K) + 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1.01, 10.0))
def test_update_shrinks_variance_more_with_larger_prior(seed, factor):
    # posterior x-variance reduction P - P+ grows with P for any positive R
    g = np.random.default_rng(seed)
    A = g.normal(size=(4, 4))
    P = A @ A.T + 0.1 * np.eye(4)
    R = np.diag(g.uniform(0.01, 2.0, 2))
    _, P1 = F.ekf_update(np.zeros(4), P, np.zeros(2), R)
    _, P2 = F.ekf_update(np.zeros(4), P * factor, np.zeros(2), R)
    assert (P * factor)[0, 0] - P2[0, 0] >= P[0, 0] - P1[0, 0] - 1e-12


def test_update_edge_cases():
    P = np.diag([1.0, 1.0, 0.1, 0.1])
    err = np.array([0.1, 0.2, 0.0, 0.0])
    e2, P2 = F.ekf_update(err, P, np.array([5.0, 5.0]), np.array([np.inf, np.inf]))
    assert np.array_equal(e2, err) and np.array_equal(P2, P)
    e3, P3 = F.ekf_update(err, P, np.array([1.1, 5.0]), np.array([1.0, np.inf]))
    assert e3[0] == pytest.approx(0.1 + 0.5 * 1.0) and e3[1] == pytest.approx(0.2)
    assert P3[0, 0] == pytest.approx(0.5) and P3[1, 1] == pytest.approx(1.0)
    with pytest.raises(F.FilterError):
        F.ekf_update(err, np.zeros((4, 4)), np.zeros(2), np.zeros((2, 2)))


def test_scalar_update_example():
    # P_xx = 1, R = 1: gain 1/2, posterior variance 1/2
    e, P = F.ekf_update(np.zeros(4), np.eye(4), np.array([2.0, 0.0]), np.eye(2))
    assert e[0] == pytest.approx(1.0) and P[0, 0] == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_sigma_points_reproduce_moments(seed):
    g = np.random.default_rng(seed)
    A = g.normal(size=(4, 4))
    P = A @ A.T + 0.01 * np.eye(4)
    mean = g.normal(size=4)
    X, wm, wc = F.sigma_points(mean, P, F.UTParams())
    m, C = F._ut_moments(X, wm, wc)
    assert m == pytest.approx(mean, abs=1e-9)
    assert np.max(np.abs(C - P)) < 1e-7 * max(1.0, np.max(np.abs(P)))


def test_sigma_points_reject_indefinite():
    with pytest.raises(F.FilterError):
        F.sigma_points(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]), F.UTParams())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 60))
def test_systematic_resample_counts(seed, n):
    g = np.random.default_rng(seed)
    w = g.random(n) + 1e-3
    w /= w.sum()
    idx = F.systematic_resample(w, RngStream(seed))
    counts = np.bincount(idx, minlength=n)
    assert len(idx) == n
    assert np.all(counts >= np.floor(n * w) - 1e-9) and np.all(counts <= np.ceil(n * w) + 1e-9)


def test_pf_reinitialises_when_all_weights_vanish():
    cfg = F.PFConfig(n=100, sigma_like=0.01)
    ps = F.ParticleSet.around(0.0, 0.0, 0.0, 100, 0.01, RngStream(0))
    out = F.pf_step(ps, 0.5, 0.0, np.array([500.0, 500.0]), cfg, RngStream(1))
    assert out.flags == ["reinitialised"]
    assert np.all(np.isfinite(out.w)) and out.w.sum() == pytest.approx(1.0)
    assert math.hypot(out.mean()[0] - 500.0, out.mean()[1] - 500.0) < 0.1


def test_pf_without_fix_keeps_weights():
    cfg = F.PFConfig(n=50)
    ps = F.ParticleSet.around(0.0, 0.0, 0.0, 50, 0.1, RngStream(0))
    out = F.pf_step(ps, 0.5, 0.0, None, cfg, RngStream(1))
    assert np.allclose(out.w, 1 / 50)


@pytest.mark.parametrize("kind", ["ekf", "ukf", "pf"])
def test_perfect_steps_reproduce_track(small_ds, kind):
    ds = small_ds
    fixes = np.full((len(ds), 2), np.nan)
    pf = F.PFConfig(n=200, sigma_l=0.0, sigma_phi=0.0, sigma_pos=0.0, init_spread=0.0)
    noise = F.NoiseParams(0.0, 0.0, 0.0, 0.0, 1.0, 1.0)
    res = F.run_filter(ds, ds.step_raw, fixes, kind, noise, P0=np.eye(4) * 1e-14, pf=pf)
    assert np.max(res.errors) < 1e-7


def test_perfect_fixes_pull_filters_to_truth(small_ds):
    ds = small_ds
    bad_steps = ds.step_raw * np.array([1.3, 1.0]) + np.array([0.0, 0.05])
    noisy = F.run_filter(ds, bad_steps, np.full((len(ds), 2), np.nan), "ekf", F.NoiseParams())
    fused = F.run_filter(ds, bad_steps, ds.pose[:, :2], "ekf", F.NoiseParams(r_x=1e-4, r_y=1e-4))
    assert fused.mean_error < 0.05 < noisy.mean_error


def test_run_filter_validation(small_ds):
    ds = small_ds
    with pytest.raises(ValueError):
        F.run_filter(ds, ds.step_raw, ds.pose[:, :2], "kalman", F.NoiseParams())
    with pytest.raises(ValueError):
        F.run_filter(ds, ds.step_raw[:-1], ds.pose[:, :2], "ekf", F.NoiseParams())


def test_segment_start_inverts_labels(small_ds):
    ds = small_ds
    for run in ds.trajectories():
        x, y, phi = F.segment_start(ds, run[0])
        l, d = ds.step_raw[run[0]]
        h = phi + d
        assert (x + l * math.cos(h), y + l * math.sin(h)) == pytest.approx(tuple(ds.pose[run[0], :2]), abs=1e-12)


def test_residual_variance():
    with pytest.raises(ValueError):
        F.residual_variance(np.zeros((29, 2)))
    r = np.tile([[1.0, 2.0], [-1.0, -2.0]], (20, 1))
    assert F.residual_variance(r) == pytest.approx([1.0, 4.0])


def test_propagate_step_noise_examples():
    assert F.propagate_step_noise([1.0], [0.0], 0.04, 0.01) == pytest.approx((0.04, 0.01))
    assert F.propagate_step_noise([2.0], [np.pi / 2], 0.04, 0.01) == pytest.approx((0.04, 0.04))


def test_noise_params_reject_negative():
    with pytest.raises(ValueError):
        F.NoiseParams(q_x=-1.0)


def test_grid_search_picks_minimum(small_ds, tmp_path):
    ds = small_ds
    g = np.random.default_rng(0)
    fixes = ds.pose[:, :2] + g.normal(0, 1.0, (len(ds), 2))
    steps = ds.step_raw + g.normal(0, [0.05, 0.05], (len(ds), 2))
    grid = F.GridSpec(q_pos=[1e-3, 1e-1], q_l=[1e-3], q_phi=[1e-3], r=[1e-3, 1.0])
    res = F.grid_search_noise("ekf", ds, steps, fixes, grid)
    errs = [row["mean_error"] for row in res.surface]
    assert len(errs) == len(grid) == 4
    assert res.best_error == min(errs)
    assert res.best.r_x == 1.0  # trusting 1 m noisy fixes is worse than trusting the steps
    res.write_csv(tmp_path / "grid.csv")
    assert len((tmp_path / "grid.csv").read_text().splitlines()) == 5


def test_grid_search_with_perturbation_is_deterministic(small_ds):
    ds = small_ds
    fixes = ds.pose[:, :2] + 0.3
    grid = F.GridSpec(q_pos=[1e-2], q_l=[1e-3], q_phi=[1e-3], r=[0.1, 0.5], perturb=0.2)
    a = F.grid_search_noise("ekf", ds, ds.step_raw, fixes, grid, RngStream(4))
    b = F.grid_search_noise("ekf", ds, ds.step_raw, fixes, grid, RngStream(4))
    assert a.surface == b.surface
