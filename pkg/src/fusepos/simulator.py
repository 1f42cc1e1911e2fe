"""Synthetic pedestrian trajectories, IMU and BLE RSS streams, and windowed datasets.

Conventions
-----------
A :class:`Trajectory` row ``k`` holds the pose reached by step ``k``; the
step that produced it has length ``l_k`` and heading ``phi_k``::

    phi_k = wrap(phi_{k-1} + dphi_k)
    x_k   = x_{k-1} + l_k cos(phi_k)
    y_k   = y_{k-1} + l_k sin(phi_k)

Row 0 is the initial pose (``l_0 = dphi_0 = 0``).  Angles live in
``(-pi, pi]`` radians internally and are written to disk in degrees.

Windowed records are stamped at the midpoint of their RSS window.  The IMU
window of a record ends at that stamp, so its step label is exactly the
displacement between consecutive record stamps.  Synthetic IMU streams carry
a stationary pre-roll so the first record has a full IMU window.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .tensor.rng import RngStream

GRAVITY = 9.80665
MISSING_DBM = -100.0


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2 * np.pi)


# --------------------------------------------------------------------- beacons
@dataclass(frozen=True)
class Beacon:
    id: str
    x: float
    y: float
    tx_power: float = -59.0  # RSS at 1 m, dBm
    path_loss_exponent: float = 2.0
    range: float = 22.0


@dataclass
class BeaconMap:
    beacons: list[Beacon]

    def __post_init__(self):
        ids = [b.id for b in self.beacons]
        if len(set(ids)) != len(ids):
            raise ValueError("beacon ids must be unique")
        for b in self.beacons:
            if not b.range > 0:
                raise ValueError(f"beacon {b.id}: range must be positive")
            if not 1.5 <= b.path_loss_exponent <= 4.0:
                raise ValueError(f"beacon {b.id}: path-loss exponent {b.path_loss_exponent} outside [1.5, 4]")

    def __len__(self) -> int:
        return len(self.beacons)

    @property
    def ids(self) -> list[str]:
        return [b.id for b in self.beacons]

    @property
    def positions(self) -> np.ndarray:
        return np.array([[b.x, b.y] for b in self.beacons], dtype=np.float64)


def paper_sim_beacons(arena=(20.0, 20.0), tx_power=-59.0, n=2.0, rng_=22.0) -> BeaconMap:
    """Five beacons spread evenly: four at the quarter points plus the centre."""
    w, h = arena
    pts = [(0.2 * w, 0.2 * h), (0.8 * w, 0.2 * h), (0.2 * w, 0.8 * h), (0.8 * w, 0.8 * h), (0.5 * w, 0.5 * h)]
    return BeaconMap([Beacon(f"b{i:02d}", x, y, tx_power, n, rng_) for i, (x, y) in enumerate(pts)])


def testbed_beacons(arena=(30.0, 10.0), tx_power=-59.0, n=2.0, rng_=22.0) -> BeaconMap:
    """Twenty beacons in a staggered double row; neighbours sit 6-7 m apart."""
    w, h = arena
    xs = np.linspace(0.05 * w, 0.95 * w, 20)
    ys = [0.2 * h if i % 2 == 0 else 0.8 * h for i in range(20)]
    return BeaconMap([Beacon(f"b{i:02d}", float(x), float(y), tx_power, n, rng_) for i, (x, y) in enumerate(zip(xs, ys))])


# ------------------------------------------------------------------ trajectory
@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    step_length: np.ndarray
    deflection: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))

    def __len__(self) -> int:
        return len(self.t)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0]) if len(self) else 0.0

    @property
    def positions(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=1)

    def position_at(self, times) -> np.ndarray:
        """Piecewise-linear position; held constant outside the recorded span."""
        times = np.asarray(times, dtype=np.float64)
        return np.stack([np.interp(times, self.t, self.x), np.interp(times, self.t, self.y)], axis=-1)

    def replay(self) -> Trajectory:
        """Re-integrate this trajectory's own step labels from its first pose."""
        return integrate_steps(self.x[0], self.y[0], self.heading[0], self.step_length[1:], self.deflection[1:], t=self.t)


def integrate_steps(x0: float, y0: float, heading0: float, step_length, deflection, t=None) -> Trajectory:
    """Forward kinematics of a step sequence (row 0 is the start pose)."""
    step_length = np.asarray(step_length, dtype=np.float64)
    deflection = np.asarray(deflection, dtype=np.float64)
    n = len(step_length)
    xs = np.empty(n + 1)
    ys = np.empty(n + 1)
    hs = np.empty(n + 1)
    xs[0], ys[0], hs[0] = x0, y0, heading0
    for k in range(n):
        hs[k + 1] = wrap_angle(hs[k] + deflection[k])
        xs[k + 1] = xs[k] + step_length[k] * math.cos(hs[k + 1])
        ys[k + 1] = ys[k] + step_length[k] * math.sin(hs[k + 1])
    if t is None:
        t = np.arange(n + 1, dtype=np.float64)
    return Trajectory(t, xs, ys, hs, np.concatenate([[0.0], step_length]), np.concatenate([[0.0], deflection]))


@dataclass
class TrajectoryConfig:
    duration: float = 120.0
    step_rate: float = 2.0
    arena: tuple[float, float] = (30.0, 10.0)
    step_length_mean: float = 0.65
    step_length_std: float = 0.1
    step_length_min: float = 0.3
    step_length_max: float = 0.9
    step_length_ar: float = 0.9
    turn_std: float = 0.12
    turn_ar: float = 0.7
    max_turn: float = 0.6
    wall_margin: float = 1.5
    lookahead: float = 2.5
    pause_prob: float = 0.01
    pause_steps: tuple[int, int] = (2, 8)


def gen_trajectory(config: TrajectoryConfig, rng: RngStream) -> Trajectory:
    """Random walk with smooth turns, speed variation, pauses and wall avoidance."""
    cfg = config
    if not cfg.duration > 0:
        raise ValueError("duration must be positive")
    w, h = cfg.arena
    need = 2 * (cfg.wall_margin + cfg.step_length_max)
    if min(w, h) < need:
        raise ValueError(f"arena {w}x{h} m too small for margin {cfg.wall_margin} m and steps up to {cfg.step_length_max} m")
    n = int(math.floor(cfg.duration * cfg.step_rate + 1e-9))
    dt = 1.0 / cfg.step_rate
    m = cfg.wall_margin
    x = float(rng.uniform(m + 1.0, w - m - 1.0))
    y = float(rng.uniform(m + 1.0, h - m - 1.0))
    phi = float(wrap_angle(rng.uniform(-np.pi, np.pi)))
    xs, ys, hs, ls, ds = [x], [y], [phi], [0.0], [0.0]
    turn = 0.0
    l_prev = cfg.step_length_mean
    pause_left = 0
    cx, cy = 0.5 * w, 0.5 * h
    innov = cfg.step_length_std * math.sqrt(1 - cfg.step_length_ar**2)
    for _ in range(n):
        if pause_left > 0:
            pause_left -= 1
            step = 0.0
        elif rng.random() < cfg.pause_prob:
            pause_left = int(rng.integers(cfg.pause_steps[0], cfg.pause_steps[1] + 1)) - 1
            step = 0.0
        else:
            step = cfg.step_length_mean + cfg.step_length_ar * (l_prev - cfg.step_length_mean) + innov * rng.normal()
            step = float(np.clip(step, cfg.step_length_min, cfg.step_length_max))
            l_prev = step
        turn = cfg.turn_ar * turn + cfg.turn_std * rng.normal()
        dphi = float(np.clip(turn, -cfg.max_turn, cfg.max_turn))
        cand = phi + dphi
        ax, ay = x + cfg.lookahead * math.cos(cand), y + cfg.lookahead * math.sin(cand)
        desired = math.atan2(cy - y, cx - x)
        if not (m <= ax <= w - m and m <= ay <= h - m):
            err = float(wrap_angle(desired - phi))
            dphi = float(np.clip(err, -cfg.max_turn, cfg.max_turn))
            turn = 0.0
        new_phi = float(wrap_angle(phi + dphi))
        nx, ny = x + step * math.cos(new_phi), y + step * math.sin(new_phi)
        if not (0.0 < nx < w and 0.0 < ny < h):
            dphi = float(wrap_angle(desired - phi))
            new_phi = float(wrap_angle(phi + dphi))
            nx, ny = x + step * math.cos(new_phi), y + step * math.sin(new_phi)
            turn = 0.0
        phi, x, y = new_phi, nx, ny
        xs.append(x)
        ys.append(y)
        hs.append(phi)
        ls.append(step)
        ds.append(dphi)
    t = np.arange(n + 1, dtype=np.float64) * dt
    return Trajectory(t, np.array(xs), np.array(ys), np.array(hs), np.array(ls), np.array(ds))


# ------------------------------------------------------------------------ IMU
@dataclass
class ImuModel:
    gait_amplitude: float = 2.0  # m/s^2 per metre of step length
    acc_noise: float = 0.15  # m/s^2, white, per sample
    gyro_noise: float = 0.02  # rad/s, white, per sample
    acc_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gyro_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gyro_bias_std: float = 0.0  # per-stream random gyro bias, rad/s
    gravity: float = GRAVITY


@dataclass
class ImuStream:
    t: np.ndarray
    samples: np.ndarray  # (N, 6): ax, ay, az [m/s^2], gx, gy, gz [rad/s]
    rate: float

    def __len__(self) -> int:
        return len(self.t)


def _step_index(traj: Trajectory, times: np.ndarray) -> np.ndarray:
    """Index k of the step in progress at each time: t in (t_{k-1}, t_k].  0 when stationary."""
    k = np.searchsorted(traj.t, times, side="left")
    k[(times <= traj.t[0]) | (times > traj.t[-1])] = 0
    return k


def synth_imu(trajectory: Trajectory, model: ImuModel, rng: RngStream, rate: float = 200.0, preroll: float = 0.0) -> ImuStream:
    """Body-frame IMU for a walker following ``trajectory``.

    Vertical and fore-aft accelerations carry a once-per-step sinusoid whose
    amplitude scales with step length; lateral acceleration is the centripetal
    term; yaw rate spreads each step's heading change over the step.
    """
    traj = trajectory
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    i0 = -int(round(preroll * rate))
    i1 = int(math.ceil((traj.t[-1] - traj.t[0]) * rate - 1e-9))
    times = traj.t[0] + np.arange(i0, i1, dtype=np.float64) / rate
    k = _step_index(traj, times)
    moving = k > 0
    km = np.where(moving, k, 1)
    t_prev = traj.t[km - 1]
    step_dt = traj.t[km] - t_prev
    step_dt = np.where(step_dt > 0, step_dt, 1.0)
    l = np.where(moving, traj.step_length[km], 0.0)
    dphi = np.where(moving, traj.deflection[km], 0.0)
    phase = np.where(moving, (times - t_prev) / step_dt, 0.0)
    v = l / step_dt
    omega = dphi / step_dt
    amp = model.gait_amplitude * l
    acc = np.stack(
        [
            0.5 * amp * np.cos(2 * np.pi * phase) * moving,
            v * omega,
            model.gravity + amp * np.sin(2 * np.pi * phase),
        ],
        axis=1,
    )
    gyro = np.stack([np.zeros_like(times), np.zeros_like(times), omega], axis=1)
    n = len(times)
    gyro_bias = np.asarray(model.gyro_bias, dtype=np.float64)
    if model.gyro_bias_std > 0:
        gyro_bias = gyro_bias + rng.normal(0.0, model.gyro_bias_std, size=3)
    acc = acc + np.asarray(model.acc_bias) + (rng.normal(0.0, model.acc_noise, size=(n, 3)) if model.acc_noise > 0 else 0.0)
    gyro = gyro + gyro_bias + (rng.normal(0.0, model.gyro_noise, size=(n, 3)) if model.gyro_noise > 0 else 0.0)
    return ImuStream(times, np.concatenate([acc, gyro], axis=1), rate)


# ------------------------------------------------------------------------ RSS
def rss_clean(pos, beacon: Beacon):
    """Log-distance path loss ``A - 10 n log10(d)``, NaN beyond the beacon's range.

    Distances below 0.1 m are clamped to 0.1 m.
    """
    pos = np.asarray(pos, dtype=np.float64)
    d = np.hypot(pos[..., 0] - beacon.x, pos[..., 1] - beacon.y)
    rss = beacon.tx_power - 10.0 * beacon.path_loss_exponent * np.log10(np.maximum(d, 0.1))
    out = np.where(d > beacon.range, np.nan, rss)
    return float(out) if out.ndim == 0 else out


NOISE_KINDS = ("none", "invariant", "time", "space")


@dataclass
class NoiseSpec:
    """RSS interference: ``invariant`` adds w, ``time`` adds sin(t) w, ``space`` adds sqrt(d) w; w ~ N(0, sigma^2) dBm."""

    kind: str = "none"
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if not self.sigma >= 0:
            raise ValueError("noise sigma must be non-negative")

    def variance(self, t, d):
        t = np.asarray(t, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        s2 = self.sigma**2
        if self.kind == "invariant":
            return s2 * np.ones(np.broadcast(t, d).shape)
        if self.kind == "time":
            return s2 * np.sin(t) ** 2 * np.ones_like(d)
        if self.kind == "space":
            return s2 * d * np.ones_like(t)
        return np.zeros(np.broadcast(t, d).shape)

    @property
    def label(self) -> str:
        return "none" if self.kind == "none" else f"{self.kind}-{self.sigma:g}"


def inject_noise(rss, t, d, spec: NoiseSpec, rng: RngStream):
    """Add one draw of the interference model to ``rss``.  ``t`` is the sample index (radians in sin)."""
    rss = np.asarray(rss, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    if spec.kind == "none" or spec.sigma == 0:
        return rss.copy() if rss.ndim else float(rss)
    shape = np.broadcast(rss, np.asarray(t), d).shape
    w = rng.normal(0.0, spec.sigma, size=shape)
    if spec.kind == "invariant":
        scale = 1.0
    elif spec.kind == "time":
        scale = np.sin(np.asarray(t, dtype=np.float64))
    else:
        scale = np.sqrt(d)
    out = rss + scale * w
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class RssStream:
    t: np.ndarray
    rss: np.ndarray  # (N, M) dBm, NaN where no reading
    beacon_ids: list[str]
    sample_index: np.ndarray | None = None

    def __post_init__(self):
        if self.sample_index is None:
            self.sample_index = np.arange(len(self.t), dtype=np.float64)

    def __len__(self) -> int:
        return len(self.t)

    def shifted(self, gain: float = 1.0, offset: float = 0.0) -> RssStream:
        """Device response change: every reading becomes ``gain * rss + offset``."""
        return RssStream(self.t.copy(), gain * self.rss + offset, list(self.beacon_ids), self.sample_index.copy())


def synth_rss(
    trajectory: Trajectory,
    beacons: BeaconMap,
    noise: NoiseSpec,
    rng: RngStream,
    rate: float = 10.0,
    dropout: float = 0.0,
    gain: float = 1.0,
    offset: float = 0.0,
) -> RssStream:
    n = int(math.ceil((trajectory.t[-1] - trajectory.t[0]) * rate - 1e-9))
    idx = np.arange(n, dtype=np.float64)
    times = trajectory.t[0] + idx / rate
    pos = trajectory.position_at(times)
    d = np.hypot(pos[:, None, 0] - beacons.positions[None, :, 0], pos[:, None, 1] - beacons.positions[None, :, 1])
    clean = np.stack([rss_clean(pos, b) if n else np.zeros(0) for b in beacons.beacons], axis=1) if n else np.zeros((0, len(beacons)))
    noisy = inject_noise(np.nan_to_num(clean, nan=0.0), idx[:, None], d, noise, rng) if n else clean
    noisy = np.where(np.isnan(clean), np.nan, noisy)
    if dropout > 0 and n:
        noisy = np.where(rng.random(noisy.shape) < dropout, np.nan, noisy)
    noisy = gain * noisy + offset
    return RssStream(times, noisy, beacons.ids, idx)


# ----------------------------------------------------------------- recordings
@dataclass
class Recording:
    imu: ImuStream
    rss: RssStream
    gt: Trajectory
    beacons: BeaconMap
    meta: dict = field(default_factory=dict)


@dataclass
class StreamConfig:
    imu_rate: float = 50.0
    rss_rate: float = 10.0
    preroll: float = 1.0
    dropout: float = 0.0
    device_gain: float = 1.0
    device_offset: float = 0.0


def simulate_recording(
    trajectory: Trajectory,
    beacons: BeaconMap,
    noise: NoiseSpec,
    rng: RngStream,
    imu_model: ImuModel | None = None,
    streams: StreamConfig | None = None,
) -> Recording:
    imu_model = imu_model or ImuModel()
    streams = streams or StreamConfig()
    imu = synth_imu(trajectory, imu_model, rng.child("imu"), rate=streams.imu_rate, preroll=streams.preroll)
    rss = synth_rss(
        trajectory, beacons, noise, rng.child("rss"), rate=streams.rss_rate, dropout=streams.dropout,
        gain=streams.device_gain, offset=streams.device_offset,
    )
    meta = {"noise": asdict(noise), "imu_model": asdict(imu_model), "streams": asdict(streams)}
    return Recording(imu, rss, trajectory, beacons, meta)


# -------------------------------------------------------------------- windows
@dataclass
class WindowConfig:
    imu_window: float = 1.0  # s
    rss_window: float = 1.0  # s
    stride: float = 1.0  # s
    max_step_length: float = 0.9  # m, used to normalise window displacement
    step_rate: float = 2.0  # Hz, ditto
    fill_dbm: float = MISSING_DBM

    @property
    def length_scale(self) -> float:
        """Largest displacement a window can hold; step labels are divided by it."""
        return self.max_step_length * self.step_rate * self.stride


@dataclass
class Dataset:
    imu: np.ndarray  # (N, Ti, 6)
    rss: np.ndarray  # (N, Tr, M) dBm, fill value where masked
    mask: np.ndarray  # (N, Tr, M) 1 = valid reading
    step: np.ndarray  # (N, 2) normalised (l / length_scale, dphi / pi)
    step_raw: np.ndarray  # (N, 2) (l [m], dphi [rad])
    pose: np.ndarray  # (N, 4) x, y, rx, ry at the record stamp
    t: np.ndarray  # (N,) record stamps
    traj: np.ndarray  # (N,) trajectory id
    initial: np.ndarray  # (n_traj, 3) start pose x, y, heading per trajectory id
    split: np.ndarray  # (N,) '', 'train', 'val' or 'test'
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def rss_label(self) -> np.ndarray:
        return self.pose[:, :2]

    @property
    def length_scale(self) -> float:
        return float(self.meta["window"]["length_scale"])

    @property
    def num_beacons(self) -> int:
        return self.rss.shape[2]

    def subset(self, index) -> Dataset:
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return Dataset(
            self.imu[index], self.rss[index], self.mask[index], self.step[index], self.step_raw[index],
            self.pose[index], self.t[index], self.traj[index], self.initial, self.split[index], dict(self.meta),
        )

    def by_split(self, tag: str) -> Dataset:
        return self.subset(self.split == tag)

    def trajectories(self) -> list[np.ndarray]:
        """Record indices of each contiguous run (same trajectory, consecutive stamps)."""
        if len(self) == 0:
            return []
        stride = float(self.meta.get("window", {}).get("stride", 1.0))
        brk = (np.diff(self.traj) != 0) | (np.abs(np.diff(self.t) - stride) > 1e-6 * max(stride, 1.0))
        starts = np.concatenate([[0], np.flatnonzero(brk) + 1, [len(self)]])
        return [np.arange(a, b) for a, b in zip(starts[:-1], starts[1:])]

    def save(self, directory) -> None:
        """Write raw .npy arrays plus meta.json (byte-reproducible)."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("imu", "rss", "mask", "step", "step_raw", "pose", "t", "traj", "initial"):
            np.save(d / f"{name}.npy", np.ascontiguousarray(getattr(self, name)))
        np.save(d / "split.npy", self.split.astype("<U5"))
        (d / "meta.json").write_text(json.dumps(self.meta, sort_keys=True, indent=1))

    @classmethod
    def load(cls, directory) -> Dataset:
        d = Path(directory)
        arrs = {n: np.load(d / f"{n}.npy") for n in ("imu", "rss", "mask", "step", "step_raw", "pose", "t", "traj", "initial", "split")}
        return cls(**arrs, meta=json.loads((d / "meta.json").read_text()))

    @staticmethod
    def concat(parts: list[Dataset]) -> Dataset:
        parts = [p for p in parts]
        if not parts:
            raise ValueError("nothing to concatenate")
        offset = 0
        trajs, inits = [], []
        for p in parts:
            trajs.append(p.traj + offset)
            inits.append(p.initial)
            offset += len(p.initial)
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts], axis=0)  # noqa: E731
        return Dataset(
            cat("imu"), cat("rss"), cat("mask"), cat("step"), cat("step_raw"), cat("pose"), cat("t"),
            np.concatenate(trajs), np.concatenate(inits, axis=0), cat("split"), dict(parts[0].meta),
        )


def _window_start(times: np.ndarray, start: float, count: int, rate: float) -> int | None:
    i = int(np.searchsorted(times, start - 0.25 / rate))
    if i + count > len(times) or i < 0:
        return None
    if abs(times[i] - start) > 0.5 / rate:
        return None
    return i


def window_recording(rec: Recording, window: WindowConfig | None = None, traj_id: int = 0) -> Dataset:
    """Cut a recording into aligned (IMU window, RSS window, labels) records."""
    w = window or WindowConfig()
    gt = rec.gt
    n_imu = int(round(w.imu_window * rec.imu.rate))
    rss_rate = 1.0 / np.median(np.diff(rec.rss.t)) if len(rec.rss) > 1 else 1.0
    n_rss = int(round(w.rss_window * rss_rate))
    t0, t1 = float(gt.t[0]), float(gt.t[-1])
    stamps = []
    tau = t0 + 0.5 * w.rss_window
    while tau + 0.5 * w.rss_window <= t1 + 1e-9:
        stamps.append(tau)
        tau = t0 + 0.5 * w.rss_window + len(stamps) * w.stride
    imu_rows, rss_rows, keep = [], [], []
    for k, tau in enumerate(stamps):
        i = _window_start(rec.imu.t, tau - w.imu_window, n_imu, rec.imu.rate)
        j = _window_start(rec.rss.t, tau - 0.5 * w.rss_window, n_rss, rss_rate)
        if i is None or j is None:
            continue
        imu_rows.append(i)
        rss_rows.append(j)
        keep.append(k)
    if stamps and not keep:
        raise ValueError("IMU and RSS streams share no complete window")
    stamps_arr = np.asarray(stamps, dtype=np.float64)
    n = len(stamps_arr)
    # labels are defined over all stamps so step chains stay unbroken
    pos = gt.position_at(stamps_arr) if n else np.zeros((0, 2))
    prev_t = np.maximum(stamps_arr - w.stride, t0)
    prev = gt.position_at(prev_t) if n else np.zeros((0, 2))
    delta = pos - prev
    length = np.hypot(delta[:, 0], delta[:, 1]) if n else np.zeros(0)
    heading = np.empty(n)
    last = float(gt.heading[0])
    for k in range(n):
        if length[k] > 1e-9:
            last = math.atan2(delta[k, 1], delta[k, 0])
        heading[k] = last
    prev_heading = np.concatenate([[float(gt.heading[0])], heading[:-1]]) if n else np.zeros(0)
    dphi = wrap_angle(heading - prev_heading)

    keep_a = np.asarray(keep, dtype=int)
    M = rec.rss.rss.shape[1]
    imu = np.stack([rec.imu.samples[i : i + n_imu] for i in imu_rows]) if keep else np.zeros((0, n_imu, 6))
    raw = np.stack([rec.rss.rss[j : j + n_rss] for j in rss_rows]) if keep else np.zeros((0, n_rss, M))
    mask = (~np.isnan(raw)).astype(np.float64)
    rss = np.where(mask > 0, raw, w.fill_dbm)
    step_raw = np.stack([length, dphi], axis=1)[keep_a] if n else np.zeros((0, 2))
    step = step_raw / np.array([w.length_scale, np.pi])
    pose = np.concatenate([pos, np.cos(heading)[:, None], np.sin(heading)[:, None]], axis=1)[keep_a] if n else np.zeros((0, 4))
    meta = dict(rec.meta)
    meta["window"] = {**asdict(w), "length_scale": w.length_scale}
    meta["beacon_ids"] = list(rec.rss.beacon_ids)
    meta = json.loads(json.dumps(meta))
    return Dataset(
        imu=imu,
        rss=rss,
        mask=mask,
        step=step,
        step_raw=step_raw,
        pose=pose,
        t=stamps_arr[keep_a] if n else np.zeros(0),
        traj=np.full(len(keep_a), traj_id, dtype=np.int64),
        initial=np.array([[gt.x[0], gt.y[0], gt.heading[0]]], dtype=np.float64),
        split=np.full(len(keep_a), "", dtype="<U5"),
        meta=meta,
    )


def make_dataset(
    trajectory: Trajectory,
    beacons: BeaconMap,
    noise: NoiseSpec,
    window: WindowConfig,
    rng: RngStream,
    imu_model: ImuModel | None = None,
    streams: StreamConfig | None = None,
    traj_id: int = 0,
) -> Dataset:
    rec = simulate_recording(trajectory, beacons, noise, rng, imu_model, streams)
    return window_recording(rec, window, traj_id=traj_id)


def windowed_trajectory(ds: Dataset, traj_id: int) -> Trajectory:
    """Record-rate ground truth of one trajectory, starting from its initial pose."""
    idx = np.flatnonzero(ds.traj == traj_id)
    x0, y0, h0 = ds.initial[traj_id]
    t0 = ds.t[idx[0]] - float(ds.meta["window"]["stride"]) if len(idx) else 0.0
    t = np.concatenate([[t0], ds.t[idx]])
    heading = np.arctan2(ds.pose[idx, 3], ds.pose[idx, 2])
    return Trajectory(
        t,
        np.concatenate([[x0], ds.pose[idx, 0]]),
        np.concatenate([[y0], ds.pose[idx, 1]]),
        np.concatenate([[h0], heading]),
        np.concatenate([[0.0], ds.step_raw[idx, 0]]),
        np.concatenate([[0.0], ds.step_raw[idx, 1]]),
    )


# ---------------------------------------------------------------------- split
def _largest_remainder(n: int, ratios) -> list[int]:
    raw = np.asarray(ratios, dtype=np.float64) * n
    base = np.floor(raw + 1e-9).astype(int)
    rem = n - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    for i in order[:rem]:
        base[i] += 1
    return base.tolist()


SPLITS = ("train", "val", "test")


def split(dataset: Dataset, ratios=(0.8, 0.1, 0.1), rng: RngStream | None = None, by: str = "record") -> Dataset:
    """Tag records train/val/test in contiguous blocks.

    ``by="record"`` cuts the (trajectory-ordered) record sequence into three
    blocks; ``by="trajectory"`` assigns whole trajectories.  ``rng`` shuffles
    trajectory order.  When windows overlap (stride < window) records that
    would share samples across a block boundary are left untagged.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = np.unique(dataset.traj)
    if rng is not None:
        ids = ids[rng.permutation(len(ids))]
    tags = np.full(len(dataset), "", dtype="<U5")
    if by == "trajectory":
        counts = _largest_remainder(len(ids), ratios)
        for r, c in zip(ratios, counts):
            if r > 0 and c == 0:
                raise ValueError("a split with positive ratio would receive no trajectory")
        pos = 0
        for tag, c in zip(SPLITS, counts):
            for tid in ids[pos : pos + c]:
                tags[dataset.traj == tid] = tag
            pos += c
        out = dataset.subset(np.arange(len(dataset)))
        out.split = tags
        return out
    if by != "record":
        raise ValueError(f"unknown split mode {by!r}")
    order = np.concatenate([np.flatnonzero(dataset.traj == tid) for tid in ids]) if len(ids) else np.zeros(0, int)
    counts = _largest_remainder(len(order), ratios)
    for r, c in zip(ratios, counts):
        if r > 0 and c == 0:
            raise ValueError("a split with positive ratio would be empty")
    w = dataset.meta.get("window", {})
    span = max(float(w.get("imu_window", 1.0)), float(w.get("rss_window", 1.0)))
    guard = max(int(math.ceil(span / float(w.get("stride", span)) - 1e-9)) - 1, 0)
    pos = 0
    for tag, c in zip(SPLITS, counts):
        block = order[pos : pos + c]
        if pos > 0 and guard:
            block = block[guard:]
        tags[block] = tag
        pos += c
    out = dataset.subset(order)
    out.split = tags[order]
    return out


# ----------------------------------------------------------------------- I/O
def _fmt(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else _fmt(v) for v in row) + "\n")


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",") if lines else []
    return header, [ln.split(",") for ln in lines[1:] if ln]


def save_recording(directory, rec: Recording) -> None:
    """Write imu.csv, rss.csv, gt.csv, beacons.csv and meta.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_csv(d / "imu.csv", ["t", "ax", "ay", "az", "gx", "gy", "gz"], (np.concatenate([[t], s]) for t, s in zip(rec.imu.t, rec.imu.samples)))
    rows = []
    for i, t in enumerate(rec.rss.t):
        for j, bid in enumerate(rec.rss.beacon_ids):
            v = rec.rss.rss[i, j]
            if not np.isnan(v):
                rows.append((_fmt(t), bid, _fmt(v)))
    _write_csv(d / "rss.csv", ["t", "beacon_id", "rssi"], rows)
    _write_csv(d / "gt.csv", ["t", "x", "y", "heading_deg"], zip(rec.gt.t, rec.gt.x, rec.gt.y, np.degrees(rec.gt.heading)))
    _write_csv(
        d / "beacons.csv",
        ["id", "x", "y", "A", "n", "range"],
        ((b.id, _fmt(b.x), _fmt(b.y), _fmt(b.tx_power), _fmt(b.path_loss_exponent), _fmt(b.range)) for b in rec.beacons.beacons),
    )
    meta = {"units": {"t": "s", "acc": "m/s^2", "gyro": "rad/s", "rssi": "dBm", "x": "m", "heading": "deg"}, **rec.meta}
    meta["imu_rate"] = rec.imu.rate
    if len(rec.rss):
        meta["rss_grid"] = {"t0": float(rec.rss.t[0]), "rows": len(rec.rss), "index0": float(rec.rss.sample_index[0])}
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def load_recording(directory) -> Recording:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
    _, brows = _read_csv(d / "beacons.csv")
    beacons = BeaconMap([Beacon(r[0], float(r[1]), float(r[2]), float(r[3]), float(r[4]), float(r[5])) for r in brows])
    _, irows = _read_csv(d / "imu.csv")
    imu_arr = np.array([[float(v) for v in r] for r in irows]).reshape(-1, 7)
    rate = float(meta.get("imu_rate") or (1.0 / np.median(np.diff(imu_arr[:, 0]))))
    imu = ImuStream(imu_arr[:, 0], imu_arr[:, 1:], rate)
    _, rrows = _read_csv(d / "rss.csv")
    col = {bid: j for j, bid in enumerate(beacons.ids)}
    times = sorted({float(r[0]) for r in rrows})
    if "rss_grid" in meta and "streams" in meta:
        # synthetic streams are regular; rebuild the full grid so empty rows survive
        g = meta["rss_grid"]
        times = list(g["t0"] + np.arange(g["rows"]) / float(meta["streams"]["rss_rate"]))
    tindex = {t: i for i, t in enumerate(times)}
    mat = np.full((len(times), len(beacons)), np.nan)
    for r in rrows:
        t = float(r[0])
        i = tindex.get(t)
        if i is None:
            i = int(np.argmin(np.abs(np.asarray(times) - t)))
        mat[i, col[r[1]]] = float(r[2])
    rss = RssStream(np.asarray(times, dtype=np.float64), mat, beacons.ids)
    if "rss_grid" in meta:
        rss.sample_index = rss.sample_index + float(meta["rss_grid"]["index0"])
    _, grows = _read_csv(d / "gt.csv")
    g = np.array([[float(v) for v in r] for r in grows]).reshape(-1, 4)
    heading = wrap_angle(np.radians(g[:, 3]))
    dx, dy = np.diff(g[:, 1]), np.diff(g[:, 2])
    gt = Trajectory(
        g[:, 0], g[:, 1], g[:, 2], heading,
        np.concatenate([[0.0], np.hypot(dx, dy)]),
        np.concatenate([[0.0], wrap_angle(np.diff(heading))]),
    )
    return Recording(imu, rss, gt, beacons, meta)
