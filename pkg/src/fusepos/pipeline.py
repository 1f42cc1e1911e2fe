"""Simulate, train, filter and score: the workflows behind the command line and the benchmarks."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics as Mx
from . import simulator as S
from .config import RunConfig, SimulatorConfig, derive_seed
from .encoders import build_encoder, predict_inertial, predict_wireless, train_encoder
from .filters import NoiseParams, estimate_noise, grid_search_noise, pf_config_from_noise, run_filter
from .fusion import FusionNetwork, infer_dataset, train_fusion
from .tensor import RngStream

ARENAS = {"paper-sim": (20.0, 20.0), "testbed": (30.0, 10.0)}
TRAJECTORY_GAP = 10.0  # s between consecutive trajectories on the shared clock

# the six interference settings of the noise benchmark
NOISE_SETTINGS = (("invariant", 1.0), ("time", 1.0), ("time", 2.0), ("time", 4.0), ("space", 1.0), ("space", 2.0))


def beacon_map(preset: str) -> S.BeaconMap:
    arena = ARENAS[preset]
    return S.paper_sim_beacons(arena) if preset == "paper-sim" else S.testbed_beacons(arena)


def _window(cfg: SimulatorConfig) -> S.WindowConfig:
    return S.WindowConfig(imu_window=cfg.window, rss_window=cfg.window, stride=cfg.stride)


def empty_dataset(cfg: SimulatorConfig) -> S.Dataset:
    w = _window(cfg)
    beacons = beacon_map(cfg.preset)
    ti, tr, m = int(round(cfg.window * cfg.imu_rate)), int(round(cfg.window * cfg.rss_rate)), len(beacons)
    meta = {"window": {**asdict(w), "length_scale": w.length_scale}, "beacon_ids": beacons.ids, "simulator": asdict(cfg)}
    z2 = np.zeros((0, 2))
    return S.Dataset(
        np.zeros((0, ti, 6)), np.zeros((0, tr, m)), np.zeros((0, tr, m)), z2, z2.copy(), np.zeros((0, 4)),
        np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0, dtype="<U5"), meta,
    )


def simulate(cfg: SimulatorConfig, seed: int) -> S.Dataset:
    """Windowed, split dataset of ``cfg.trajectories`` random walks on one clock.

    Trajectory shapes and IMU draws depend only on the seed, so datasets that
    differ only in RSS interference share their inertial data.
    """
    if cfg.duration == 0:
        warnings.warn("simulator.duration is 0: writing an empty dataset", stacklevel=2)
        return empty_dataset(cfg)
    rng = RngStream(seed).child("simulate")
    beacons = beacon_map(cfg.preset)
    noise = S.NoiseSpec(cfg.noise, cfg.sigma)
    imu_model = S.ImuModel(acc_noise=cfg.acc_noise, gyro_noise=cfg.gyro_noise)
    streams = S.StreamConfig(
        imu_rate=cfg.imu_rate, rss_rate=cfg.rss_rate, dropout=cfg.dropout,
        device_gain=cfg.device_gain, device_offset=cfg.device_offset,
    )
    tcfg = S.TrajectoryConfig(duration=cfg.duration, arena=ARENAS[cfg.preset])
    parts, clock = [], 0.0
    for i in range(cfg.trajectories):
        traj = S.gen_trajectory(tcfg, rng.child(f"trajectory{i}"))
        part = S.make_dataset(traj, beacons, noise, _window(cfg), rng.child(f"streams{i}"), imu_model, streams)
        part.t = part.t + clock
        clock += float(traj.t[-1]) + TRAJECTORY_GAP
        parts.append(part)
    ds = S.Dataset.concat(parts)
    ds = S.split(ds, cfg.split, by=cfg.split_by)
    ds.meta["simulator"] = asdict(cfg)
    ds.meta["seed"] = seed
    return ds


# ------------------------------------------------------------------ training
def train_inertial(ds: S.Dataset, cfg: RunConfig, log=None):
    seed = derive_seed(cfg.seed, "inertial")
    model = build_encoder("inertial", ds, RngStream(seed).child("init"), inertial=cfg.encoders.inertial)
    return train_encoder(ds, "inertial", replace(cfg.encoders.inertial_train, seed=seed), model=model, log=log)


def train_wireless(ds: S.Dataset, cfg: RunConfig, log=None):
    seed = derive_seed(cfg.seed, "wireless")
    model = build_encoder("wireless", ds, RngStream(seed).child("init"), wireless=cfg.encoders.wireless)
    return train_encoder(ds, "wireless", replace(cfg.encoders.wireless_train, seed=seed), model=model, log=log)


def fusion_train_config(cfg: RunConfig, multitask: bool = False):
    tc = replace(cfg.fusion.train, seed=derive_seed(cfg.seed, "fusion"))
    if multitask:
        tc = replace(tc, lam1=cfg.fusion.multitask.lam1, lam2=cfg.fusion.multitask.lam2)
    return tc


def train_fusion_stage(ds: S.Dataset, inertial, wireless, cfg: RunConfig, multitask: bool = False, log=None):
    return train_fusion(ds, inertial, wireless, fusion_train_config(cfg, multitask), cfg.fusion.net, log=log)


# ------------------------------------------------------------------- methods
@dataclass
class MethodResult:
    t: np.ndarray
    positions: np.ndarray
    headings: np.ndarray  # (N, 2) unit vectors
    errors: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def summary(self) -> Mx.ErrorSummary:
        return Mx.summarize(self.errors)


def filter_inputs(inertial, wireless, ds: S.Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Steps (l [m], dphi [rad]) and wireless fixes [m] for every record."""
    _, step = predict_inertial(inertial, ds.imu)
    _, fix = predict_wireless(wireless, ds.rss, ds.mask)
    return step * np.array([ds.length_scale, np.pi]), fix


def tune_noise(kind: str, ds: S.Dataset, inertial, wireless, cfg: RunConfig) -> tuple[NoiseParams, dict]:
    """Filter noise from a grid search on the validation split or from encoder residuals."""
    seed = derive_seed(cfg.seed, f"noise-{kind}")
    if cfg.filters.noise == "estimate":
        return estimate_noise(inertial, wireless, ds, cfg.filters.perturb, RngStream(seed)), {"source": "estimate"}
    val = ds.by_split("val") if np.any(ds.split == "val") else ds
    steps, fixes = filter_inputs(inertial, wireless, val)
    res = grid_search_noise(kind, val, steps, fixes, cfg.filters.grid, RngStream(seed))
    return res.best, {"source": "grid", "val_error": res.best_error, "surface": res.surface}


def _headings_from_track(xy: np.ndarray) -> np.ndarray:
    d = np.diff(xy, axis=0)
    d = np.concatenate([d[:1], d]) if len(d) else np.zeros((len(xy), 2))
    n = np.hypot(d[:, 0], d[:, 1])
    h = np.where(n[:, None] > 1e-12, d / np.maximum(n, 1e-12)[:, None], [1.0, 0.0])
    return h


def _scored(ds: S.Dataset, xy, heading, info=None) -> MethodResult:
    errors = np.hypot(*(np.asarray(xy) - ds.pose[:, :2]).T) if len(ds) else np.zeros(0)
    return MethodResult(ds.t.copy(), np.asarray(xy), np.asarray(heading), errors, info or {})


def run_method(method: str, ds: S.Dataset, train_ds: S.Dataset, cfg: RunConfig, inertial=None, wireless=None,
               fusion: FusionNetwork | None = None, noise: dict | None = None) -> MethodResult:
    """Predict every record of ``ds`` with one method; filter noise is tuned on ``train_ds``.

    ``noise`` caches tuned filter noise by kind across calls.
    """
    if method == "fusion":
        if fusion is None:
            raise ValueError("the fusion method needs a fusion checkpoint")
        p = infer_dataset(fusion, ds)
        return _scored(ds, p.positions, p.headings, {"flags": len(p.flags)})
    if inertial is None or wireless is None:
        raise ValueError(f"method {method!r} needs inertial and wireless encoders")
    steps, fixes = filter_inputs(inertial, wireless, ds)
    if method == "wireless-only":
        return _scored(ds, fixes, _headings_from_track(fixes))
    noise = {} if noise is None else noise
    rng = RngStream(derive_seed(cfg.seed, f"run-{method}"))
    if method == "inertial-only":
        # dead reckoning: the error-state filter with no fixes only integrates the steps
        r = run_filter(ds, steps, np.full_like(fixes, np.nan), "ekf", NoiseParams(), rng=rng)
        return _scored(ds, r.positions, np.column_stack([np.cos(r.headings), np.sin(r.headings)]))
    if method not in noise:
        noise[method] = tune_noise(method, train_ds, inertial, wireless, cfg)
    params, info = noise[method]
    pf = pf_config_from_noise(params, cfg.filters.particles) if method == "pf" else None
    r = run_filter(ds, steps, fixes, method, params, rng=rng, pf=pf)
    extra = {"noise": asdict(params), "noise_source": info["source"], "flags": len(r.flags)}
    return _scored(ds, r.positions, np.column_stack([np.cos(r.headings), np.sin(r.headings)]), extra)


def select_split(ds: S.Dataset, split: str) -> S.Dataset:
    return ds if split == "all" else ds.by_split(split)


def evaluate(ds: S.Dataset, cfg: RunConfig, methods, inertial=None, wireless=None, fusion=None, log=None) -> dict[str, MethodResult]:
    if inertial is None and fusion is not None:
        inertial = fusion.inertial
    if wireless is None and fusion is not None:
        wireless = fusion.wireless
    part = select_split(ds, cfg.eval.split)
    noise: dict = {}
    out = {}
    for m in methods:
        out[m] = run_method(m, part, ds, cfg, inertial, wireless, fusion, noise)
        if log and len(out[m].errors):
            log(f"{m}: mean error {out[m].summary.mean:.4f} m over {len(out[m].errors)} records")
    return out


def write_method(directory, res: MethodResult) -> Mx.ErrorSummary | None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    Mx.write_pred(d / "pred.csv", res.t, res.positions, res.headings)
    return Mx.export_errors(d, res.errors)


# ------------------------------------------------------------- noise matrix
@dataclass
class MatrixRow:
    setting: str
    method: str
    summary: Mx.ErrorSummary


def noise_matrix(cfg: RunConfig, methods=("ekf", "pf", "fusion"), settings=NOISE_SETTINGS, log=None) -> list[MatrixRow]:
    """Train and score every method under each interference setting on fresh simulated data.

    The inertial encoder is trained once: IMU data does not depend on the RSS
    interference, so every setting sees the same windows.
    """
    rows = []
    inertial = None
    for kind, sigma in settings:
        sim = replace(cfg.simulator, noise=kind, sigma=sigma)
        ds = simulate(sim, cfg.seed)
        if inertial is None:
            inertial, _ = train_inertial(ds, cfg)
        wireless, _ = train_wireless(ds, cfg)
        fusion = None
        if "fusion" in methods:
            fusion, _ = train_fusion_stage(ds, inertial, wireless, cfg)
        label = S.NoiseSpec(kind, sigma).label
        res = evaluate(ds, cfg, methods, inertial, wireless, fusion)
        for m in methods:
            rows.append(MatrixRow(label, m, res[m].summary))
            if log:
                log(f"{label} {m}: mean {res[m].summary.mean:.4f} m")
    return rows


def matrix_csv(rows: list[MatrixRow]) -> str:
    lines = ["setting,method,mean,p80,p95,count"]
    for r in rows:
        s = r.summary
        lines.append(f"{r.setting},{r.method},{s.mean:.4f},{s.p80:.4f},{s.p95:.4f},{s.count}")
    return "\n".join(lines) + "\n"


def improvement(before: float, after: float) -> float:
    """Percent reduction from ``before`` to ``after``."""
    return 100.0 * (before - after) / before if before > 0 else math.nan

