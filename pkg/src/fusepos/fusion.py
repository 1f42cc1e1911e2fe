"""Asymmetric attention, the recurrent fusion decoder, and fusion training/inference.

Only the wireless branch passes through attention: its per-beacon features
``h_i`` are scored by ``u_i = tanh(W h_i + b)`` (a scalar per beacon),
weighted by ``softmax_i(u)`` and summed into a context ``s``.  The inertial
latent goes straight to the decoder, which sees ``[latent; s]`` once per
window and carries its LSTM state from window to window.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoders import (
    History,
    InertialConfig,
    InertialEncoder,
    TrainingDiverged,
    WirelessConfig,
    WirelessEncoder,
    inertial_loss,
    train_val,
    wireless_loss,
)
from .simulator import Dataset
from .tensor import Dense, LSTMCell, Module, Optimizer, RngStream, Tensor, parameter
from .tensor.nn import uniform_init


# ------------------------------------------------------------------ attention
class Attention(Module):
    def __init__(self, d: int, rng: RngStream):
        self.W = parameter(uniform_init(rng, (d, 1), d))
        self.b = parameter(uniform_init(rng, (1,), d))

    def forward(self, h) -> tuple[Tensor, Tensor]:
        """``h``: (B, M, d) features.  Returns context (B, d) and weights (B, M)."""
        h = h if isinstance(h, Tensor) else Tensor(h)
        if h.ndim != 3 or h.shape[1] == 0:
            raise ValueError(f"attention needs (B, M>=1, d) features, got {h.shape}")
        B, M, d = h.shape
        u = T.tanh(T.matmul(h, self.W) + self.b).reshape(B, M)
        alpha = T.softmax(u, axis=1)
        s = T.sum(h * alpha.reshape(B, M, 1), axis=1)
        return s, alpha


def attention(features, W, b) -> tuple[np.ndarray, np.ndarray]:
    """Functional form on one window: ``features`` (M, d), ``W`` (d,), ``b`` scalar."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) == 0:
        raise ValueError("attention needs at least one feature vector")
    att = Attention.__new__(Attention)
    att.W = Tensor(np.asarray(W, dtype=np.float64).reshape(-1, 1))
    att.b = Tensor(np.asarray(b, dtype=np.float64).reshape(1))
    s, alpha = att(features[None])
    return s.data[0], alpha.data[0]


# -------------------------------------------------------------------- decoder
@dataclass
class FusionConfig:
    hidden: int = 128
    head_hidden: int = 32
    literal_state_init: bool = False  # seed each cell state with the previous hidden state
    feedback: bool = True  # carry the previous pose estimate and predict a displacement from it
    guided: bool = True  # dead-reckon from the encoders' step and correct towards their fix


class State(NamedTuple):
    layer1: tuple[Tensor, Tensor]
    layer2: tuple[Tensor, Tensor]
    pose: Tensor  # (B, 4) previous x, y, rx, ry


class FusionDecoder(Module):
    """Two single-step LSTM layers and a two-layer head emitting (x, y, rx, ry).

    With ``feedback`` the previous pose estimate (seeded with the known start
    pose) is appended to the decoder input and the position head predicts a
    displacement from it; otherwise positions are regressed directly.
    """

    def __init__(self, latent_dim: int, feature_dim: int, config: FusionConfig, rng: RngStream):
        self.config = config
        self.latent_dim = latent_dim
        self.feature_dim = feature_dim
        if config.guided and not config.feedback:
            raise ValueError("the guided decoder needs feedback")
        n_in = latent_dim + feature_dim + (4 if config.feedback else 0) + (4 if config.guided else 0)
        self.attention = Attention(feature_dim, rng.child("attention"))
        self.cell1 = LSTMCell(n_in, config.hidden, rng.child("cell1"))
        self.cell2 = LSTMCell(config.hidden, config.hidden, rng.child("cell2"))
        self.fc = Dense(config.hidden, config.head_hidden, rng.child("fc"), activation="selu")
        self.out = Dense(config.head_hidden, 4, rng.child("out"))
        self.out_offset = np.zeros(4)
        self.out_scale = np.ones(4)
        self.in_offset = np.zeros(4)  # normalises the fed-back pose
        self.in_scale = np.ones(4)
        self.step_scale = np.array([1.0, math.pi])  # normalised step -> (metres, radians)

    def initial_state(self, batch: int, pose=None) -> State:
        z = lambda: Tensor(np.zeros((batch, self.config.hidden)))  # noqa: E731
        p = np.zeros((batch, 4)) if pose is None else np.broadcast_to(np.asarray(pose, dtype=np.float64), (batch, 4)).copy()
        return State((z(), z()), (z(), z()), Tensor(p))

    def fit_normaliser(self, pose: np.ndarray, step_length: np.ndarray | None = None, length_scale: float = 1.0) -> None:
        centre = np.array([pose[:, 0].mean(), pose[:, 1].mean(), 0.0, 0.0])
        s = max(float(pose[:, :2].std(axis=0).mean()), 1e-3)
        self.in_offset, self.in_scale = centre, np.array([s, s, 1.0, 1.0])
        if self.config.feedback:
            d = 1.0 if step_length is None or not len(step_length) else max(float(np.mean(step_length)), 1e-3)
            self.out_offset, self.out_scale = np.zeros(4), np.array([d, d, 1.0, 1.0])
        else:
            self.out_offset, self.out_scale = centre, self.in_scale.copy()
        self.step_scale = np.array([length_scale, math.pi])

    def dead_reckon(self, prev: Tensor, step) -> tuple[Tensor, Tensor]:
        """Advance ``prev`` (B, 4) by a normalised (length, turn) step: rotate the heading, then walk along it."""
        length = step[:, 0:1] * self.step_scale[0]
        turn = step[:, 1:2] * self.step_scale[1]
        rx, ry = prev[:, 2:3], prev[:, 3:4]
        scale = T.norm(prev[:, 2:], axis=1).reshape(-1, 1) + 1e-9
        c, s = T.cos(turn), T.sin(turn)
        heading = T.concat([rx * c - ry * s, rx * s + ry * c], axis=1) / scale
        return prev[:, :2] + heading * length, heading

    def step(self, latent, features, state: State, aid=None):
        """One window.  Returns (pose (B, 2), heading (B, 2), new state, attention weights).

        ``aid`` is the encoders' own (normalised step, position fix) pair, used by the guided decoder.
        """
        latent = latent if isinstance(latent, Tensor) else Tensor(latent)
        s, alpha = self.attention(features)
        (h1, c1), (h2, c2), prev = state
        if h1.shape[-1] != self.config.hidden or h2.shape[-1] != self.config.hidden:
            raise ValueError("decoder state dimension mismatch")
        parts = [latent, s]
        if self.config.feedback:
            parts.append((prev - self.in_offset) / self.in_scale)
        if self.config.guided:
            if aid is None:
                raise ValueError("the guided decoder needs the encoder outputs")
            ins, fix = (a if isinstance(a, Tensor) else Tensor(a) for a in aid)
            base, base_heading = self.dead_reckon(prev, ins)
            parts += [ins, (fix - base) / self.out_scale[:2]]
        x = T.concat(parts, axis=1)
        if self.config.literal_state_init:
            c1, c2 = h1, h2
        h1, c1 = self.cell1(x, h1, c1)
        h2, c2 = self.cell2(h1, h2, c2)
        out = self.out(self.fc(h2)) * self.out_scale + self.out_offset
        if self.config.guided:
            pose, heading = out[:, :2] + base, out[:, 2:] + base_heading
        else:
            pose = out[:, :2] + prev[:, :2] if self.config.feedback else out[:, :2]
            heading = out[:, 2:]
        return pose, heading, State((h1, c1), (h2, c2), T.concat([pose, heading], axis=1)), alpha


class FusionNetwork(Module):
    """Both encoders plus the decoder; one checkpointable unit."""

    def __init__(self, inertial: InertialEncoder, wireless: WirelessEncoder, decoder: FusionDecoder):
        if decoder.latent_dim != inertial.latent_dim or decoder.feature_dim != wireless.feature_dim:
            raise ValueError(
                f"incompatible latent dims: decoder expects ({decoder.latent_dim}, {decoder.feature_dim}), "
                f"encoders give ({inertial.latent_dim}, {wireless.feature_dim})"
            )
        self.inertial = inertial
        self.wireless = wireless
        self.decoder = decoder

    @classmethod
    def build(cls, inertial: InertialEncoder, wireless: WirelessEncoder, config: FusionConfig, rng: RngStream) -> FusionNetwork:
        return cls(inertial, wireless, FusionDecoder(inertial.latent_dim, wireless.feature_dim, config, rng))

    def encode(self, imu, rss, mask):
        latent, ins = self.inertial(imu)
        feats, pos = self.wireless(rss, mask)
        return latent, feats, ins, pos

    def fuse_step(self, latent, features, state: State, aid=None):
        return self.decoder.step(latent, features, state, aid)


def fuse_step(model: FusionNetwork, latent, features, state: State, aid=None):
    return model.fuse_step(latent, features, state, aid)


# --------------------------------------------------------------------- losses
def fusion_loss(pose, heading, label, kappa: float = 1.0, reduction: str = "sum") -> Tensor:
    """Sum (or mean) over windows of |d_hat - d|^2 + kappa |r_hat - r|^2."""
    label = label.data if isinstance(label, Tensor) else np.asarray(label, dtype=np.float64)
    d = T.sum(T.square(pose - Tensor(label[..., :2])), axis=-1)
    r = T.sum(T.square(heading - Tensor(label[..., 2:])), axis=-1)
    per = d + r * kappa
    if reduction == "sum":
        return T.sum(per)
    if reduction == "mean":
        return T.mean(per)
    raise ValueError(f"unknown reduction {reduction!r}")


def multitask_loss(l_fusion, l_inertial, l_wireless, lam1: float, lam2: float):
    if lam1 < 0 or lam2 < 0:
        raise ValueError("multitask weights must be non-negative")
    return l_fusion + l_inertial * lam1 + l_wireless * lam2


# ------------------------------------------------------------------- training
@dataclass
class FusionTrainConfig:
    epochs: int = 60
    batch_size: int = 16
    chunk: int = 20  # windows per training sequence (zero initial state)
    lr: float = 2e-3
    cosine_decay: bool = True  # anneal the learning rate to zero over the run
    kappa: float = 1.0
    lam1: float = 0.0  # inertial sub-task weight
    lam2: float = 0.0  # wireless sub-task weight
    lam: float = 1.0  # deflection weight inside the inertial sub-task
    freeze_encoders: bool = True
    start_noise: float = 0.1  # m, jitter on the fed-back start pose of each training chunk
    seed: int = 0
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("lam1 and lam2 must be non-negative")
        if self.chunk < 1 or self.batch_size < 1:
            raise ValueError("chunk and batch_size must be >= 1")


def _chunks(runs: list[np.ndarray], length: int, offset: int) -> list[np.ndarray]:
    out = []
    for run in runs:
        if len(run) < length:
            if len(run):
                out.append(run)
            continue
        off = offset % length
        if len(run) - off < length:
            off = 0
        out.extend(run[s : s + length] for s in range(off, len(run) - length + 1, length))
    return out


@dataclass
class _Cache:
    latent: np.ndarray
    features: np.ndarray
    ins: np.ndarray
    pos: np.ndarray


def _encode_cached(model: FusionNetwork, ds: Dataset, batch: int = 256) -> _Cache:
    parts = []
    with T.no_grad():
        for i in range(0, len(ds), batch):
            sl = slice(i, i + batch)
            a, b, c, d = model.encode(ds.imu[sl], ds.rss[sl], ds.mask[sl])
            parts.append((a.data, b.data, c.data, d.data))
    if not parts:
        return _Cache(np.zeros((0, model.inertial.latent_dim)), np.zeros((0, 0, model.wireless.feature_dim)), np.zeros((0, 2)), np.zeros((0, 2)))
    return _Cache(*(np.concatenate([p[k] for p in parts]) for k in range(4)))


def previous_poses(ds: Dataset) -> np.ndarray:
    """(N, 4) pose one stride before each record, recovered exactly from its labels."""
    x, y, rx, ry = ds.pose.T
    l, dphi = ds.step_raw.T
    phi = np.arctan2(ry, rx)
    prev = phi - dphi
    return np.stack([x - l * np.cos(phi), y - l * np.sin(phi), np.cos(prev), np.sin(prev)], axis=1)


def _sequence_loss(model: FusionNetwork, ds: Dataset, chunks: list[np.ndarray], cfg: FusionTrainConfig, cache: _Cache | None, start: np.ndarray):
    """Mean-reduced multitask loss over a batch of equal-length chunks starting from poses ``start``."""
    idx = np.stack(chunks)  # (B, L)
    B, L = idx.shape
    flat = idx.reshape(-1)
    if cache is not None:
        latent = Tensor(cache.latent[flat].reshape(B, L, -1))
        feats = Tensor(cache.features[flat].reshape(B, L, *cache.features.shape[1:]))
        ins = Tensor(cache.ins[flat])
        pos = Tensor(cache.pos[flat])
    else:
        lat, fe, ins, pos = model.encode(ds.imu[flat], ds.rss[flat], ds.mask[flat])
        latent = lat.reshape(B, L, -1)
        feats = fe.reshape(B, L, *fe.shape[1:])
    ins_seq, pos_seq = ins.reshape(B, L, 2), pos.reshape(B, L, 2)
    state = model.decoder.initial_state(B, start)
    poses, heads = [], []
    for t in range(L):
        p, h, state, _ = model.fuse_step(latent[:, t], feats[:, t], state, (ins_seq[:, t], pos_seq[:, t]))
        poses.append(p)
        heads.append(h)
    pose = T.stack(poses, axis=1)
    head = T.stack(heads, axis=1)
    loss = fusion_loss(pose, head, ds.pose[idx], cfg.kappa, reduction="mean")
    if cfg.lam1 > 0 or cfg.lam2 > 0:
        l_ins = inertial_loss(ins, ds.step[flat], cfg.lam)
        l_wl = wireless_loss(pos, ds.rss_label[flat])
        loss = multitask_loss(loss, l_ins, l_wl, cfg.lam1, cfg.lam2)
    return loss


def _same_length_batches(chunks: list[np.ndarray], size: int, rng: RngStream):
    by_len: dict[int, list[np.ndarray]] = {}
    for c in chunks:
        by_len.setdefault(len(c), []).append(c)
    batches = []
    for length in sorted(by_len):
        group = by_len[length]
        order = rng.child(f"len{length}").permutation(len(group))
        for i in range(0, len(group), size):
            batches.append([group[j] for j in order[i : i + size]])
    perm = rng.child("batches").permutation(len(batches))
    return [batches[i] for i in perm]


def train_fusion(
    dataset: Dataset,
    inertial: InertialEncoder,
    wireless: WirelessEncoder,
    config: FusionTrainConfig,
    net_config: FusionConfig | None = None,
    model: FusionNetwork | None = None,
    log=None,
) -> tuple[FusionNetwork, History]:
    """Train attention + decoder (and optionally the encoders) on ``dataset``'s train split."""
    rng = RngStream(config.seed).child("train-fusion")
    if model is None:
        model = FusionNetwork.build(copy.deepcopy(inertial), copy.deepcopy(wireless), net_config or FusionConfig(), rng.child("init"))
    if dataset.rss.shape[2] != model.wireless.config.num_beacons:
        raise ValueError("dataset beacon count does not match the wireless encoder")
    train, val = train_val(dataset)
    model.decoder.fit_normaliser(train.pose, train.step_raw[:, 0], train.length_scale)
    starts = previous_poses(train)
    if config.freeze_encoders:
        model.inertial.freeze()
        model.wireless.freeze()
    else:
        model.inertial.unfreeze()
        model.wireless.unfreeze()
    cache = _encode_cached(model, train) if config.freeze_encoders else None
    opt = Optimizer(model.named_parameters(), lr=config.lr, clip_norm=config.clip_norm)
    history = History()
    best = (math.inf, model.state_dict())
    runs = train.trajectories()
    for epoch in range(1, config.epochs + 1):
        erng = rng.child(f"epoch{epoch}")
        if config.cosine_decay:
            opt.state.lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / config.epochs))
        chunks = _chunks(runs, config.chunk, int(erng.integers(0, config.chunk)))
        total = count = 0.0
        for b, batch in enumerate(_same_length_batches(chunks, config.batch_size, erng)):
            start = starts[[c[0] for c in batch]].copy()
            if config.start_noise > 0:
                start[:, :2] += erng.child(f"start{b}").normal(0.0, config.start_noise, size=(len(batch), 2))
            opt.zero_grad()
            loss = _sequence_loss(model, train, batch, config, cache, start)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"fusion: non-finite loss in epoch {epoch}")
            T.backward(loss)
            try:
                opt.step()
            except T.NonFiniteGradient as exc:
                raise TrainingDiverged(f"fusion: epoch {epoch}: {exc}") from exc
            total += value * len(batch)
            count += len(batch)
        val_err = infer_dataset(model, val).mean_error
        if not math.isfinite(val_err):
            raise TrainingDiverged(f"fusion: non-finite validation error in epoch {epoch}")
        history.append(epoch=epoch, train_loss=total / max(count, 1), val_loss=val_err, val_metric=val_err)
        if log:
            log(f"fusion epoch {epoch}: train {total / max(count, 1):.5f} val error {val_err:.4f} m")
        if val_err < best[0]:
            best = (val_err, model.state_dict())
    model.load_state_dict(best[1])
    model.inertial.unfreeze()
    model.wireless.unfreeze()
    return model, history


# ------------------------------------------------------------------ inference
@dataclass
class FusionPrediction:
    t: np.ndarray
    positions: np.ndarray  # (N, 2)
    headings: np.ndarray  # (N, 2) unit vectors
    attention: np.ndarray  # (N, M)
    errors: np.ndarray | None = None
    flags: list[tuple[int, str]] = field(default_factory=list)

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors)) if self.errors is not None and len(self.errors) else float("nan")


def _rigid_align(pos: np.ndarray, head: np.ndarray, target) -> tuple[np.ndarray, np.ndarray]:
    """Rotate/translate so the first predicted pose lands on ``target`` (x, y, phi)."""
    phi0 = math.atan2(head[0, 1], head[0, 0])
    rot = target[2] - phi0
    c, s = math.cos(rot), math.sin(rot)
    Rm = np.array([[c, -s], [s, c]])
    return (pos - pos[0]) @ Rm.T + np.asarray(target[:2]), head @ Rm.T


def infer_trajectory(
    model: FusionNetwork,
    imu: np.ndarray,
    rss: np.ndarray,
    mask: np.ndarray,
    t: np.ndarray,
    stride: float = 1.0,
    initial_pose=None,
    align: bool = False,
    cache: _Cache | None = None,
) -> FusionPrediction:
    """Run the decoder over consecutive windows with carried state.

    ``initial_pose`` (x, y, phi) is the pose one stride before the first
    window; the feedback decoder starts from it.  A gap of more than 1.5
    strides between window stamps resets the recurrent state (the pose
    estimate is kept) and is reported in ``flags``.  With ``align`` the
    output is rigidly moved so its first pose/heading equals ``initial_pose``.
    """
    n = len(t)
    feedback = model.decoder.config.feedback
    if (feedback or align) and initial_pose is None:
        raise ValueError("an initial pose (x, y, phi) is required")
    seed = None if initial_pose is None else (initial_pose[0], initial_pose[1], math.cos(initial_pose[2]), math.sin(initial_pose[2]))
    M = model.wireless.config.num_beacons
    if n == 0:
        return FusionPrediction(np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, M)))
    if cache is None:
        fake = Dataset(imu, rss, mask, np.zeros((n, 2)), np.zeros((n, 2)), np.zeros((n, 4)), t, np.zeros(n, int), np.zeros((1, 3)), np.full(n, "", "<U5"))
        cache = _encode_cached(model, fake)
    pos = np.zeros((n, 2))
    head = np.zeros((n, 2))
    att = np.zeros((n, M))
    flags = []
    with T.no_grad():
        state = model.decoder.initial_state(1, seed if feedback else None)
        for k in range(n):
            if k > 0 and t[k] - t[k - 1] > 1.5 * stride:
                state = model.decoder.initial_state(1, state.pose.data)
                flags.append((k, "discontinuity"))
            aid = (cache.ins[k : k + 1], cache.pos[k : k + 1])
            p, h, state, a = model.fuse_step(cache.latent[k : k + 1], cache.features[k : k + 1], state, aid)
            pos[k] = p.data[0]
            head[k] = h.data[0]
            att[k] = a.data[0]
    nrm = np.hypot(head[:, 0], head[:, 1])
    head = head / np.where(nrm > 0, nrm, 1.0)[:, None]
    if align:
        pos, head = _rigid_align(pos, head, initial_pose)
    return FusionPrediction(np.asarray(t, dtype=np.float64), pos, head, att, flags=flags)


def infer_dataset(model: FusionNetwork, ds: Dataset, align: bool = False) -> FusionPrediction:
    """Infer every contiguous run of ``ds`` and score against its pose labels."""
    M = model.wireless.config.num_beacons
    n = len(ds)
    out = FusionPrediction(ds.t.copy(), np.zeros((n, 2)), np.zeros((n, 2)), np.zeros((n, M)))
    if n == 0:
        out.errors = np.zeros(0)
        return out
    cache = _encode_cached(model, ds)
    stride = float(ds.meta.get("window", {}).get("stride", 1.0))
    starts = previous_poses(ds)
    for run in ds.trajectories():
        sub = _Cache(cache.latent[run], cache.features[run], cache.ins[run], cache.pos[run])
        x, y, rx, ry = starts[run[0]]
        pred = infer_trajectory(model, None, None, None, ds.t[run], stride, (x, y, math.atan2(ry, rx)), align, cache=sub)
        out.positions[run] = pred.positions
        out.headings[run] = pred.headings
        out.attention[run] = pred.attention
        out.flags.extend((int(run[k]), f) for k, f in pred.flags)
    out.errors = np.hypot(*(out.positions - ds.pose[:, :2]).T)
    return out


# ------------------------------------------------------------------- transfer
def transfer_into_fusion(model: FusionNetwork, encoder_state: dict[str, np.ndarray], kind: str = "wireless") -> FusionNetwork:
    """Copy of ``model`` with the named encoder parameters replaced; everything else untouched."""
    out = copy.deepcopy(model)
    target = out.wireless if kind == "wireless" else out.inertial
    own = dict(target.named_parameters())
    for name, value in encoder_state.items():
        if name not in own:
            raise ValueError(f"unknown {kind} encoder parameter {name!r}")
        if np.shape(value) != own[name].shape:
            raise ValueError(f"shape mismatch for {name}: {np.shape(value)} vs {own[name].shape}")
    target.load_state_dict(encoder_state, strict=False)
    return out


# ---------------------------------------------------------------- checkpoints
def save_fusion(path, model: FusionNetwork, extra: dict | None = None) -> str:
    meta = {
        "kind": "fusion",
        "inertial": asdict(model.inertial.config),
        "wireless": asdict(model.wireless.config),
        "decoder": asdict(model.decoder.config),
        **(extra or {}),
    }
    return T.save_checkpoint(Path(path), model.state_dict(), meta)


def load_fusion(path) -> tuple[FusionNetwork, dict]:
    params, meta = T.load_checkpoint(path)
    if meta.get("kind") != "fusion":
        raise ValueError(f"{path}: not a fusion checkpoint")
    w = meta["wireless"]
    w = {**w, "channels": tuple(w["channels"]), "kernels": tuple(w["kernels"])}
    rng = RngStream(0)
    model = FusionNetwork.build(
        InertialEncoder(InertialConfig(**meta["inertial"]), rng), WirelessEncoder(WirelessConfig(**w), rng), FusionConfig(**meta["decoder"]), rng
    )
    model.load_state_dict(params)
    return model, meta
