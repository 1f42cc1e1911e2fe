"""Inertial and wireless encoder networks, their losses, and standalone training."""
from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .simulator import MISSING_DBM, Dataset
from .tensor import Dense, LSTM, Module, Optimizer, RngStream, Tensor, parameter
from .tensor.nn import Conv2d, uniform_init


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------- losses
def inertial_loss(pred: Tensor, label, lam: float = 1.0) -> Tensor:
    """Mean over the batch of (l error)^2 + lam * (dphi error)^2."""
    label = label if isinstance(label, Tensor) else Tensor(np.asarray(label, dtype=np.float64))
    sq = T.square(pred - label)
    return T.mean(sq[:, 0] + sq[:, 1] * lam)


def wireless_loss(pred: Tensor, label) -> Tensor:
    """Mean Euclidean distance (not squared)."""
    label = label if isinstance(label, Tensor) else Tensor(np.asarray(label, dtype=np.float64))
    return T.mean(T.norm(pred - label, axis=1))


# ------------------------------------------------------------------ inertial
@dataclass
class InertialConfig:
    window: int = 50  # samples per window
    hidden: int = 96  # per direction
    num_layers: int = 2


class InertialEncoder(Module):
    """Stacked bidirectional LSTM over an IMU window; latent = final states of the top layer."""

    def __init__(self, config: InertialConfig, rng: RngStream):
        self.config = config
        self.lstm = LSTM(6, config.hidden, rng.child("lstm"), num_layers=config.num_layers, bidirectional=True)
        self.head = Dense(2 * config.hidden, 2, rng.child("head"))
        self.in_mean = np.zeros(6)
        self.in_std = np.ones(6)

    @property
    def latent_dim(self) -> int:
        return 2 * self.config.hidden

    def fit_normaliser(self, imu: np.ndarray) -> None:
        flat = imu.reshape(-1, 6)
        self.in_mean = flat.mean(axis=0)
        self.in_std = np.maximum(flat.std(axis=0), 1e-3)

    def prepare(self, imu) -> Tensor:
        imu = imu.data if isinstance(imu, Tensor) else np.asarray(imu, dtype=np.float64)
        if imu.ndim != 3 or imu.shape[1:] != (self.config.window, 6):
            raise ValueError(f"expected IMU windows of shape (B, {self.config.window}, 6), got {imu.shape}")
        return Tensor((imu - self.in_mean) / self.in_std)

    def forward(self, imu) -> tuple[Tensor, Tensor]:
        """Returns (latent (B, 2H), normalised (l, dphi) prediction (B, 2))."""
        _, latent = self.lstm(self.prepare(imu))
        return latent, self.head(latent)


# ------------------------------------------------------------------ wireless
@dataclass
class WirelessConfig:
    num_beacons: int = 20
    window: int = 10  # RSS samples per window
    channels: tuple[int, int, int] = (32, 32, 16)
    kernels: tuple[int, int, int] = (5, 3, 3)  # along time, non-increasing
    feature_dim: int = 16  # d, per-beacon feature size
    hidden: int = 32
    rss_scale: float = 40.0

    def __post_init__(self):
        if list(self.kernels) != sorted(self.kernels, reverse=True):
            raise ValueError("conv kernel sizes must be non-increasing")
        if self.window < 2:
            raise ValueError("RSS window needs at least 2 samples")


class WirelessEncoder(Module):
    """Per-beacon temporal convolutions, beacon-specific projection, pooled position head.

    The RSS window is laid out as an image of height = beacons and width =
    time with two channels: the normalised reading (zero where missing) and
    the validity mask.  Conv kernels are 1 x k so every beacon row is
    processed by the same filters; a beacon-specific affine map then turns
    each row into a d-vector ``h_i``.  These per-beacon features are what the
    attention layer selects from.  Their mean feeds the position head.
    """

    def __init__(self, config: WirelessConfig, rng: RngStream):
        self.config = config
        c_in = 2
        self.convs = []
        for i, (c, k) in enumerate(zip(config.channels, config.kernels)):
            self.convs.append(Conv2d(c_in, c, (1, k), rng.child(f"conv{i}"), padding=(0, k // 2), activation="selu"))
            c_in = c
        self.pooled_len = config.window // 2
        n_flat = config.channels[-1] * self.pooled_len
        brng = rng.child("beacon")
        self.beacon_W = parameter(uniform_init(brng, (config.num_beacons, n_flat, config.feature_dim), n_flat))
        self.beacon_b = parameter(uniform_init(brng, (config.num_beacons, 1, config.feature_dim), n_flat))
        self.fc = Dense(config.feature_dim, config.hidden, rng.child("fc"), activation="selu")
        self.out = Dense(config.hidden, 2, rng.child("out"))
        self.out_offset = np.zeros(2)
        self.out_scale = np.ones(2)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def fit_normaliser(self, positions: np.ndarray) -> None:
        self.out_offset = positions.mean(axis=0)
        self.out_scale = np.full(2, max(float(positions.std(axis=0).mean()), 1e-3))

    def prepare(self, rss, mask) -> np.ndarray:
        rss = np.asarray(rss, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        B = rss.shape[0]
        if rss.ndim != 3 or rss.shape[1:] != (self.config.window, self.config.num_beacons) or mask.shape != rss.shape:
            raise ValueError(
                f"expected RSS windows of shape (B, {self.config.window}, {self.config.num_beacons}) with matching mask, "
                f"got {rss.shape} / {mask.shape}"
            )
        value = np.where(mask > 0, (rss - MISSING_DBM) / self.config.rss_scale, 0.0)
        x = np.stack([value, mask], axis=1)  # (B, 2, T, M)
        return np.ascontiguousarray(np.swapaxes(x, 2, 3)).reshape(B, 2, self.config.num_beacons, self.config.window)

    def conv_stack(self, x) -> Tensor:
        """(B, 2, M, T) input image to (B, C, M, T) conv features."""
        z = x if isinstance(x, Tensor) else Tensor(x)
        for conv in self.convs:
            z = conv(z)
        return z

    def beacon_stage(self, z: Tensor) -> Tensor:
        """Conv features to per-beacon features h (B, M, d)."""
        p = T.maxpool2d(z, (1, 2))
        B, C, M, L = p.shape
        flat = T.transpose(p, (2, 0, 1, 3)).reshape(M, B, C * L)
        h = T.selu(T.matmul(flat, self.beacon_W) + self.beacon_b)  # (M, B, d)
        return T.transpose(h, (1, 0, 2))

    def head(self, h: Tensor) -> Tensor:
        pooled = T.mean(h, axis=1)
        return self.out(self.fc(pooled)) * self.out_scale + self.out_offset

    def forward(self, rss, mask) -> tuple[Tensor, Tensor]:
        """Returns (per-beacon features (B, M, d), position (B, 2) in metres)."""
        h = self.beacon_stage(self.conv_stack(self.prepare(rss, mask)))
        return h, self.head(h)


# ------------------------------------------------------------------ training
@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    lam: float = 1.0  # deflection weight in the inertial loss
    seed: int = 0
    clip_norm: float | None = 5.0
    optimizer: str = "adam"

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def column(self, key: str) -> list[float]:
        return [r[key] for r in self.rows]

    def write_csv(self, path) -> None:
        keys = ["epoch", "train_loss", "val_loss", "val_metric"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[k])) for k in keys[1:]])


def train_val(dataset: Dataset) -> tuple[Dataset, Dataset]:
    """Training and validation views; untagged datasets train and validate on everything."""
    if np.any(dataset.split == "train"):
        tr = dataset.by_split("train")
        va = dataset.by_split("val") if np.any(dataset.split == "val") else tr
        return tr, va
    return dataset, dataset


def _batches(n: int, size: int, rng: RngStream):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i : i + size]


def _inertial_batch(model, ds: Dataset, idx, cfg: TrainConfig):
    _, out = model(ds.imu[idx])
    return inertial_loss(out, ds.step[idx], cfg.lam)


def _wireless_batch(model, ds: Dataset, idx, cfg: TrainConfig):
    _, out = model(ds.rss[idx], ds.mask[idx])
    return wireless_loss(out, ds.rss_label[idx])


def predict_inertial(model: InertialEncoder, imu: np.ndarray, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    lat, out = [], []
    with T.no_grad():
        for i in range(0, len(imu), batch):
            a, b = model(imu[i : i + batch])
            lat.append(a.data)
            out.append(b.data)
    if not lat:
        return np.zeros((0, model.latent_dim)), np.zeros((0, 2))
    return np.concatenate(lat), np.concatenate(out)


def predict_wireless(model: WirelessEncoder, rss: np.ndarray, mask: np.ndarray, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    feats, out = [], []
    with T.no_grad():
        for i in range(0, len(rss), batch):
            a, b = model(rss[i : i + batch], mask[i : i + batch])
            feats.append(a.data)
            out.append(b.data)
    if not feats:
        return np.zeros((0, model.config.num_beacons, model.feature_dim)), np.zeros((0, 2))
    return np.concatenate(feats), np.concatenate(out)


def evaluate_encoder(model, ds: Dataset, which: str, lam: float = 1.0) -> tuple[float, float]:
    """(loss, metric).  Metric: step-length RMSE in metres (inertial) or mean error in metres (wireless)."""
    if which == "inertial":
        _, out = predict_inertial(model, ds.imu)
        err = out - ds.step
        loss = float(np.mean(err[:, 0] ** 2 + lam * err[:, 1] ** 2))
        return loss, float(np.sqrt(np.mean(err[:, 0] ** 2)) * ds.length_scale)
    _, out = predict_wireless(model, ds.rss, ds.mask)
    e = float(np.mean(np.hypot(*(out - ds.rss_label).T)))
    return e, e


def build_encoder(which: str, dataset: Dataset, rng: RngStream, inertial: InertialConfig | None = None, wireless: WirelessConfig | None = None):
    if which == "inertial":
        cfg = copy.copy(inertial) if inertial else InertialConfig()
        cfg.window = dataset.imu.shape[1]
        return InertialEncoder(cfg, rng)
    if which == "wireless":
        cfg = copy.copy(wireless) if wireless else WirelessConfig()
        cfg.window = dataset.rss.shape[1]
        cfg.num_beacons = dataset.rss.shape[2]
        return WirelessEncoder(cfg, rng)
    raise ValueError(f"unknown encoder {which!r}")


def train_encoder(dataset: Dataset, which: str, config: TrainConfig, model=None, fit_normaliser: bool = True, log=None):
    """Train one encoder standalone.  Returns (model at best validation loss, history)."""
    rng = RngStream(config.seed).child(f"train-{which}")
    if model is None:
        model = build_encoder(which, dataset, rng.child("init"))
    train, val = train_val(dataset)
    if len(train) == 0:
        raise ValueError("no training records")
    if fit_normaliser:
        if which == "inertial":
            model.fit_normaliser(train.imu)
        else:
            model.fit_normaliser(train.rss_label)
    batch_loss = _inertial_batch if which == "inertial" else _wireless_batch
    opt = Optimizer(model.named_parameters(), kind=config.optimizer, lr=config.lr, clip_norm=config.clip_norm)
    history = History()
    best = (math.inf, model.state_dict())
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(len(train), config.batch_size, rng.child(f"epoch{epoch}")):
            opt.zero_grad()
            loss = batch_loss(model, train, idx, config)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"{which} encoder: non-finite loss in epoch {epoch}")
            T.backward(loss)
            try:
                opt.step()
            except T.NonFiniteGradient as exc:
                raise TrainingDiverged(f"{which} encoder: epoch {epoch}: {exc}") from exc
            total += value * len(idx)
            count += len(idx)
        val_loss, metric = evaluate_encoder(model, val, which, config.lam)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"{which} encoder: non-finite validation loss in epoch {epoch}")
        history.append(epoch=epoch, train_loss=total / count, val_loss=val_loss, val_metric=metric)
        if log:
            log(f"{which} epoch {epoch}: train {total / count:.5f} val {val_loss:.5f} metric {metric:.4f}")
        if val_loss < best[0]:
            best = (val_loss, model.state_dict())
    model.load_state_dict(best[1])
    return model, history


def save_encoder(path, model, extra: dict | None = None) -> str:
    kind = "inertial" if isinstance(model, InertialEncoder) else "wireless"
    meta = {"kind": kind, "config": asdict(model.config), **(extra or {})}
    return T.save_checkpoint(Path(path), model.state_dict(), meta)


def load_encoder(path):
    params, meta = T.load_checkpoint(path)
    if meta.get("kind") == "inertial":
        model = InertialEncoder(InertialConfig(**meta["config"]), RngStream(0))
    elif meta.get("kind") == "wireless":
        cfg = meta["config"]
        cfg = {**cfg, "channels": tuple(cfg["channels"]), "kernels": tuple(cfg["kernels"])}
        model = WirelessEncoder(WirelessConfig(**cfg), RngStream(0))
    else:
        raise ValueError(f"{path}: not an encoder checkpoint")
    model.load_state_dict(params)
    return model, meta
