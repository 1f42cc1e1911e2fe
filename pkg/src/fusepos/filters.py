"""Filter baselines fusing step estimates with wireless position fixes.

All three filters consume the same inputs per window ``k``: a step length
``l_k`` [m], a heading change ``dphi_k`` [rad] and an optional wireless fix
``(x, y)`` [m] (NaN when absent).

The EKF is an error-state filter.  The nominal state ``(x, y, phi, b_l)``
is dead-reckoned; the error state ``(dx, dy, dl, dphi)`` evolves linearly::

    dx_k   = dx_{k-1} + cos(phi) dl - l sin(phi) dphi
    dy_k   = dy_{k-1} + sin(phi) dl + l cos(phi) dphi
    dl, dphi persistent

and a fix observes ``Z = fix - (x, y)_nominal = (dx, dy) + noise``.  After
each update the posterior error is folded into the nominal state and reset.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .simulator import Dataset, wrap_angle
from .tensor.rng import RngStream

H = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])


class FilterError(RuntimeError):
    pass


@dataclass
class NoiseParams:
    """Diagonal process noise (variances of dx, dy, dl, dphi) and observation noise (R_x, R_y)."""

    q_x: float = 0.01
    q_y: float = 0.01
    q_l: float = 1e-3
    q_phi: float = 1e-3
    r_x: float = 0.25
    r_y: float = 0.25

    def __post_init__(self):
        if min(self.q_x, self.q_y, self.q_l, self.q_phi, self.r_x, self.r_y) < 0:
            raise ValueError("noise variances must be non-negative")

    @property
    def Q(self) -> np.ndarray:
        return np.diag([self.q_x, self.q_y, self.q_l, self.q_phi])

    @property
    def R(self) -> np.ndarray:
        return np.diag([self.r_x, self.r_y])


# ------------------------------------------------------------------------ EKF
def process_matrix(l: float, phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[1.0, 0.0, c, -l * s], [0.0, 1.0, s, l * c], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def ekf_predict(err: np.ndarray, P: np.ndarray, l: float, phi: float, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    F = process_matrix(l, phi)
    return F @ err, _sym(F @ P @ F.T + Q)


def _as_R(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.diag(R) if R.ndim == 1 else R


def ekf_update(err: np.ndarray, P: np.ndarray, Z, R) -> tuple[np.ndarray, np.ndarray]:
    """Kalman update with Joseph-form covariance.  Infinite R entries mean no information."""
    R = _as_R(R)
    if np.all(np.isinf(np.diag(R))):
        return err.copy(), P.copy()
    Z = np.asarray(Z, dtype=np.float64)
    if np.any(np.isinf(np.diag(R))):
        keep = ~np.isinf(np.diag(R))
        Hs, Rs, Zs = H[keep], R[np.ix_(keep, keep)], Z[keep]
    else:
        Hs, Rs, Zs = H, R, Z
    S = Hs @ P @ Hs.T + Rs
    try:
        cond = np.linalg.cond(S)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e14:
        raise FilterError("innovation covariance is singular")
    K = np.linalg.solve(S, Hs @ P).T
    new = err + K @ (Zs - Hs @ err)
    A = np.eye(4) - K @ Hs
    P_new = _sym(A @ P @ A.T + K @ Rs @ K.T)
    return new, P_new


def ekf_inject(nominal: np.ndarray, err: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fold the error state into the nominal (x, y, phi, b_l) and reset it."""
    x, y, phi, bl = nominal
    return np.array([x + err[0], y + err[1], float(wrap_angle(phi + err[3])), bl + err[2]]), np.zeros(4)


# ------------------------------------------------------------------------ UKF
@dataclass
class UTParams:
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0

    def weights(self, n: int) -> tuple[np.ndarray, np.ndarray, float]:
        lam = self.alpha**2 * (n + self.kappa) - n
        wm = np.full(2 * n + 1, 1.0 / (2 * (n + lam)))
        wc = wm.copy()
        wm[0] = lam / (n + lam)
        wc[0] = wm[0] + (1 - self.alpha**2 + self.beta)
        return wm, wc, n + lam


def sigma_points(mean: np.ndarray, P: np.ndarray, params: UTParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symmetric sigma set (2n+1, n) and its mean/covariance weights."""
    n = len(mean)
    wm, wc, scale = params.weights(n)
    A = None
    for jitter in (0.0, 1e-9):
        try:
            A = np.linalg.cholesky(scale * (P + jitter * np.eye(n)))
            break
        except np.linalg.LinAlgError:
            continue
    if A is None:
        raise FilterError("covariance not positive definite after jitter")
    pts = np.vstack([mean, mean + A.T, mean - A.T])
    return pts, wm, wc


def _ut_moments(Y: np.ndarray, wm: np.ndarray, wc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # mean relative to the central point keeps the large negative w0 from cancelling catastrophically
    D = Y - Y[0]
    mean = Y[0] + wm @ D
    Dm = Y - mean
    return mean, (wc[:, None] * Dm).T @ Dm


def ukf_step(mean, P, f, h, Z, Q, R, params: UTParams | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One predict + update of the unscented filter for process ``f`` and observation ``h``.

    ``f`` and ``h`` map an (m, n) array of states row-wise.  ``Z=None`` or an
    all-infinite ``R`` skips the update.
    """
    params = params or UTParams()
    X, wm, wc = sigma_points(np.asarray(mean, dtype=np.float64), P, params)
    Xp = f(X)
    m_pred, P_pred = _ut_moments(Xp, wm, wc)
    P_pred = _sym(P_pred + Q)
    R = _as_R(R)
    if Z is None or np.all(np.isinf(np.diag(R))):
        return m_pred, P_pred
    X2, wm, wc = sigma_points(m_pred, P_pred, params)
    Yz = h(X2)
    z_pred, S = _ut_moments(Yz, wm, wc)
    S = S + R
    dX = X2 - m_pred
    dZ = Yz - z_pred
    C = (wc[:, None] * dX).T @ dZ
    K = np.linalg.solve(S.T, C.T).T
    m_new = m_pred + K @ (np.asarray(Z, dtype=np.float64) - z_pred)
    P_new = _sym(P_pred - K @ S @ K.T)
    return m_new, P_new


def ukf_error_step(err, P, l: float, phi: float, Z, Q, R, params: UTParams | None = None):
    """Unscented step on the linear error-state model (matches the EKF exactly up to rounding)."""
    F = process_matrix(l, phi)
    return ukf_step(err, P, lambda X: X @ F.T, lambda X: X @ H.T, Z, Q, R, params)


# ------------------------------------------------------------------------- PF
@dataclass
class PFConfig:
    n: int = 700
    sigma_l: float = 0.05  # m
    sigma_phi: float = 0.1  # rad
    sigma_pos: float = 0.15  # m, isotropic jitter
    sigma_like: float = 0.3  # m
    resample_threshold: float = 0.5  # fraction of N
    init_spread: float = 0.1  # m / rad around the known start


@dataclass
class ParticleSet:
    x: np.ndarray
    y: np.ndarray
    phi: np.ndarray
    w: np.ndarray
    flags: list[str] = field(default_factory=list)

    @classmethod
    def around(cls, x, y, phi, n: int, spread: float, rng: RngStream) -> ParticleSet:
        e = rng.normal(0.0, spread, size=(3, n)) if spread > 0 else np.zeros((3, n))
        return cls(x + e[0], y + e[1], wrap_angle(phi + e[2]), np.full(n, 1.0 / n))

    def __len__(self) -> int:
        return len(self.w)

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.w**2))

    def mean(self) -> tuple[float, float, float]:
        return (
            float(self.w @ self.x),
            float(self.w @ self.y),
            float(math.atan2(self.w @ np.sin(self.phi), self.w @ np.cos(self.phi))),
        )


def systematic_resample(w: np.ndarray, rng: RngStream) -> np.ndarray:
    n = len(w)
    positions = (rng.random() + np.arange(n)) / n
    c = np.cumsum(w)
    c[-1] = 1.0
    return np.searchsorted(c, positions, side="right")


def pf_step(ps: ParticleSet, l: float, dphi: float, Z, config: PFConfig, rng: RngStream) -> ParticleSet:
    n = len(ps)
    phi = ps.phi + dphi
    if config.sigma_phi > 0:
        phi = phi + rng.normal(0.0, config.sigma_phi, size=n)
    phi = wrap_angle(phi)
    step = l + (rng.normal(0.0, config.sigma_l, size=n) if config.sigma_l > 0 else 0.0)
    x = ps.x + step * np.cos(phi)
    y = ps.y + step * np.sin(phi)
    if config.sigma_pos > 0:
        x = x + rng.normal(0.0, config.sigma_pos, size=n)
        y = y + rng.normal(0.0, config.sigma_pos, size=n)
    w = ps.w.copy()
    flags: list[str] = []
    if Z is not None and np.all(np.isfinite(Z)):
        d2 = (x - Z[0]) ** 2 + (y - Z[1]) ** 2
        w = w * np.exp(-d2 / (2 * config.sigma_like**2))
        total = w.sum()
        if not total > 0 or not np.isfinite(total):
            fresh = ParticleSet.around(Z[0], Z[1], 0.0, n, config.sigma_like, rng)
            fresh.phi = phi  # keep heading hypotheses
            fresh.flags = ["reinitialised"]
            return fresh
        w = w / total
    out = ParticleSet(x, y, phi, w, flags)
    if out.ess < config.resample_threshold * n:
        idx = systematic_resample(w, rng)
        out = ParticleSet(x[idx], y[idx], phi[idx], np.full(n, 1.0 / n), flags)
    return out


# -------------------------------------------------------------------- harness
@dataclass
class FilterResult:
    positions: np.ndarray  # (N, 2)
    headings: np.ndarray  # (N,)
    errors: np.ndarray  # (N,) Euclidean error against the pose labels
    flags: list[tuple[int, str]] = field(default_factory=list)

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors)) if len(self.errors) else float("nan")


def segment_start(ds: Dataset, first: int) -> tuple[float, float, float]:
    """Pose one stride before record ``first``, recovered exactly from its labels."""
    x, y, rx, ry = ds.pose[first]
    l, dphi = ds.step_raw[first]
    phi = math.atan2(ry, rx)
    return x - l * math.cos(phi), y - l * math.sin(phi), float(wrap_angle(phi - dphi))


def _run_ekf(start, steps, fixes, noise: NoiseParams, P0: np.ndarray):
    n = len(steps)
    nominal = np.array([start[0], start[1], start[2], 0.0])
    err = np.zeros(4)
    P = P0.copy()
    out = np.zeros((n, 3))
    Q, R = noise.Q, noise.R
    for k in range(n):
        l, dphi = steps[k]
        phi = float(wrap_angle(nominal[2] + dphi))
        step = l + nominal[3]
        nominal = np.array([nominal[0] + step * math.cos(phi), nominal[1] + step * math.sin(phi), phi, nominal[3]])
        err, P = ekf_predict(err, P, step, phi, Q)
        if np.all(np.isfinite(fixes[k])):
            err, P = ekf_update(err, P, fixes[k] - nominal[:2], R)
        nominal, err = ekf_inject(nominal, err)
        out[k] = nominal[:3]
    return out


def _run_ukf(start, steps, fixes, noise: NoiseParams, P0: np.ndarray):
    """Full-state unscented filter on (x, y, b_l, phi); the kinematics enter nonlinearly."""
    m = np.array([start[0], start[1], 0.0, start[2]])
    P = P0.copy()
    out = np.zeros((len(steps), 3))
    Q, R = noise.Q, noise.R
    params = UTParams()
    h = lambda X: X[:, :2]  # noqa: E731
    for k in range(len(steps)):
        l, dphi = steps[k]

        def f(X, l=l, dphi=dphi):
            phi = X[:, 3] + dphi
            return np.stack([X[:, 0] + (l + X[:, 2]) * np.cos(phi), X[:, 1] + (l + X[:, 2]) * np.sin(phi), X[:, 2], phi], axis=1)

        fix = fixes[k]
        m, P = ukf_step(m, P, f, h, fix if np.all(np.isfinite(fix)) else None, Q, R, params)
        m[3] = float(wrap_angle(m[3]))
        out[k] = (m[0], m[1], m[3])
    return out


def _run_pf(start, steps, fixes, config: PFConfig, rng: RngStream):
    ps = ParticleSet.around(start[0], start[1], start[2], config.n, config.init_spread, rng)
    out = np.zeros((len(steps), 3))
    flags = []
    for k in range(len(steps)):
        fix = fixes[k]
        ps = pf_step(ps, steps[k][0], steps[k][1], fix if np.all(np.isfinite(fix)) else None, config, rng)
        flags.extend((k, f) for f in ps.flags)
        out[k] = ps.mean()
    return out, flags


def pf_config_from_noise(noise: NoiseParams, n: int = 700) -> PFConfig:
    return PFConfig(
        n=n,
        sigma_l=math.sqrt(noise.q_l),
        sigma_phi=math.sqrt(noise.q_phi),
        sigma_pos=math.sqrt(0.5 * (noise.q_x + noise.q_y)),
        sigma_like=math.sqrt(noise.r_x),
    )


def run_filter(
    ds: Dataset,
    steps: np.ndarray,
    fixes: np.ndarray,
    kind: str,
    noise: NoiseParams,
    rng: RngStream | None = None,
    P0: np.ndarray | None = None,
    pf: PFConfig | None = None,
) -> FilterResult:
    """Filter every contiguous run of ``ds`` from its known start pose.

    ``steps``: (N, 2) step length [m] and heading change [rad];
    ``fixes``: (N, 2) wireless positions [m], NaN rows for no fix.
    """
    if kind not in ("ekf", "ukf", "pf"):
        raise ValueError(f"unknown filter kind {kind!r}")
    steps = np.asarray(steps, dtype=np.float64)
    fixes = np.asarray(fixes, dtype=np.float64)
    if steps.shape != (len(ds), 2) or fixes.shape != (len(ds), 2):
        raise ValueError("steps and fixes must be (N, 2) aligned with the dataset")
    P0 = np.diag([0.01, 0.01, 1e-4, 1e-3]) if P0 is None else P0
    rng = rng or RngStream(0)
    out = np.zeros((len(ds), 3))
    flags: list[tuple[int, str]] = []
    for r, run in enumerate(ds.trajectories()):
        start = segment_start(ds, run[0])
        if kind == "pf":
            cfg = pf or pf_config_from_noise(noise)
            res, fl = _run_pf(start, steps[run], fixes[run], cfg, rng.child(f"run{r}"))
            flags.extend((int(run[k]), f) for k, f in fl)
        else:
            runner = _run_ekf if kind == "ekf" else _run_ukf
            res = runner(start, steps[run], fixes[run], noise, P0)
        out[run] = res
    errors = np.hypot(out[:, 0] - ds.pose[:, 0], out[:, 1] - ds.pose[:, 1])
    return FilterResult(out[:, :2], out[:, 2], errors, flags)


# ------------------------------------------------------------ noise estimation
MIN_SAMPLES = 30


def residual_variance(residuals) -> np.ndarray:
    """Per-axis variance of (N, k) residuals; refuses fewer than 30 samples."""
    r = np.asarray(residuals, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    if len(r) < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples to estimate noise, got {len(r)}")
    return r.var(axis=0)


def propagate_step_noise(l, phi, var_l: float, var_phi: float) -> tuple[float, float]:
    """First-order position variance of one step: mean over samples of J diag(var_l, var_phi) J^T."""
    l = np.asarray(l, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    vx = np.cos(phi) ** 2 * var_l + (l * np.sin(phi)) ** 2 * var_phi
    vy = np.sin(phi) ** 2 * var_l + (l * np.cos(phi)) ** 2 * var_phi
    return float(np.mean(vx)), float(np.mean(vy))


@dataclass
class PerturbConfig:
    repeats: int = 8
    acc_sigma: float = 0.15
    gyro_sigma: float = 0.02
    max_windows: int = 200


def estimate_noise(inertial, wireless, ds: Dataset, perturb: PerturbConfig, rng: RngStream) -> NoiseParams:
    """Q from inertial-output spread under input perturbation, R from wireless training residuals."""
    from .encoders import predict_inertial, predict_wireless

    train = ds.by_split("train") if np.any(ds.split == "train") else ds
    if len(train) < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} training windows, got {len(train)}")
    _, fix = predict_wireless(wireless, train.rss, train.mask)
    r = residual_variance(fix - train.rss_label)
    sub = train.subset(np.arange(min(len(train), perturb.max_windows)))
    sig = np.array([perturb.acc_sigma] * 3 + [perturb.gyro_sigma] * 3)
    outs = []
    for i in range(perturb.repeats):
        noisy = sub.imu + rng.child(f"perturb{i}").normal(size=sub.imu.shape) * sig
        outs.append(predict_inertial(inertial, noisy)[1])
    spread = np.stack(outs).var(axis=0).mean(axis=0)  # per output, averaged over windows
    var_l = float(spread[0]) * ds.length_scale**2
    var_phi = float(spread[1]) * np.pi**2
    phi = np.arctan2(sub.pose[:, 3], sub.pose[:, 2])
    qx, qy = propagate_step_noise(sub.step_raw[:, 0], phi, var_l, var_phi)
    return NoiseParams(q_x=qx, q_y=qy, q_l=var_l, q_phi=var_phi, r_x=float(r[0]), r_y=float(r[1]))


# ---------------------------------------------------------------- grid search
@dataclass
class GridSpec:
    q_pos: list[float] = field(default_factory=lambda: [1e-3, 1e-2, 1e-1])
    q_l: list[float] = field(default_factory=lambda: [1e-4, 1e-3, 1e-2])
    q_phi: list[float] = field(default_factory=lambda: [1e-4, 1e-3, 1e-2])
    r: list[float] = field(default_factory=lambda: [0.05, 0.2, 0.8])
    perturb: float = 0.0  # replay each point with up to +/- this fraction of random change

    def points(self):
        for qp, ql, qf, r in itertools.product(self.q_pos, self.q_l, self.q_phi, self.r):
            yield NoiseParams(q_x=qp, q_y=qp, q_l=ql, q_phi=qf, r_x=r, r_y=r)

    def __len__(self) -> int:
        return len(self.q_pos) * len(self.q_l) * len(self.q_phi) * len(self.r)


@dataclass
class GridResult:
    best: NoiseParams
    best_error: float
    surface: list[dict]

    def write_csv(self, path) -> None:
        keys = ["q_x", "q_y", "q_l", "q_phi", "r_x", "r_y", "mean_error"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for row in self.surface:
                w.writerow([repr(float(row[k])) for k in keys])


def grid_search_noise(kind: str, ds: Dataset, steps, fixes, grid: GridSpec, rng: RngStream | None = None) -> GridResult:
    """Exhaustive search of the mean positioning error over ``grid``."""
    rng = rng or RngStream(0)
    surface = []
    best, best_err = None, math.inf
    for i, point in enumerate(grid.points()):
        if grid.perturb > 0:
            factors = 1.0 + rng.child(f"jitter{i}").uniform(-grid.perturb, grid.perturb, size=6)
            vals = np.array([point.q_x, point.q_y, point.q_l, point.q_phi, point.r_x, point.r_y]) * factors
            point = NoiseParams(*vals.tolist())
        try:
            err = run_filter(ds, steps, fixes, kind, point, rng=rng.child(f"point{i}")).mean_error
        except FilterError:
            err = math.inf
        surface.append({**asdict(point), "mean_error": err})
        if err < best_err:
            best, best_err = point, err
    if best is None:
        raise FilterError("no grid point produced a finite error")
    return GridResult(best, best_err, surface)
