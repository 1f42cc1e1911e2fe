"""Unsupervised domain adaptation of a pretrained encoder.

The encoder is split into a shared feature extractor F (the conv stack of
the wireless encoder, or the LSTM stack of the inertial encoder) and a
regression head R (everything after F), which stays frozen.  Two generators
map features back to signal windows in source (G_S) or target (G_T) style,
two discriminators judge real against generated windows, and a single
reconstruction network C maps features back to the input window of either
domain.  Each iteration runs four blocks in order:

1. source-side combined loss, updating F, G_S, G_T and C
2. source discriminator
3. target-side combined loss
4. target discriminator

Only the source domain carries labels.
"""
from __future__ import annotations

import copy
import csv
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .encoders import InertialEncoder, WirelessEncoder, inertial_loss, wireless_loss
from .simulator import Dataset
from .tensor import LSTM, Conv2d, Dense, Module, Optimizer, RngStream, Tensor

TERMS = ("gan", "cycle", "identity", "pred", "recon")


@dataclass
class AdaptConfig:
    encoder: str = "wireless"  # which encoder of a fusion checkpoint the command line adapts
    lam_cycle: float = 1.0
    lam_identity: float = 20.0
    lam_pred: float = 1.0
    lam_recon: float = 0.0
    iterations: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    disc_lr: float = 1e-3
    gan: str = "lsgan"  # or "bce"
    y_real: float = 1.0
    y_fake: float = 0.0
    cycle_distance: str = "mae"
    recon_distance: str = "mse"
    gen_channels: int = 16
    gen_layers: int = 1
    gen_kernel: int = 3
    disc_channels: tuple[int, int, int] = (16, 16, 16)
    seq_hidden: int = 32  # inertial generator / discriminator LSTM width
    seed: int = 0
    collapse_tol: float = 1e-4
    collapse_patience: int = 100
    average_last: float = 0.5  # the adapted encoder is F averaged over this final fraction of iterations (0: last iterate)

    def __post_init__(self):
        if min(self.lam_cycle, self.lam_identity, self.lam_pred, self.lam_recon) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.encoder not in ("wireless", "inertial"):
            raise ValueError(f"unknown encoder kind {self.encoder!r}")
        if self.gan not in ("lsgan", "bce"):
            raise ValueError(f"unknown GAN loss {self.gan!r}")
        if not 0.0 <= self.average_last <= 1.0:
            raise ValueError("average_last must lie in [0, 1]")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")


# ------------------------------------------------------------------ networks
class ConvGenerator(Module):
    """Conv features (B, C, M, T) to a value window (B, 1, M, T); missing cells stay zero.

    ``layers=1`` is a single linear 1 x k convolution.
    """

    def __init__(self, c_in: int, width: int, rng: RngStream, layers: int = 2, kernel: int = 3):
        self.layers = []
        for i in range(layers):
            last = i == layers - 1
            self.layers.append(
                Conv2d(c_in, 1 if last else width, (1, kernel), rng.child(f"c{i}"), padding=(0, kernel // 2), activation=None if last else "selu")
            )
            c_in = width

    def forward(self, feats: Tensor, mask: np.ndarray) -> Tensor:
        z = feats
        for layer in self.layers:
            z = layer(z)
        return z * mask


class ConvDiscriminator(Module):
    """Three conv layers over (value, mask), global average pool, linear score."""

    def __init__(self, channels, rng: RngStream):
        c_in = 2
        self.convs = []
        for i, c in enumerate(channels):
            self.convs.append(Conv2d(c_in, c, (1, 3), rng.child(f"c{i}"), padding=(0, 1), activation="selu"))
            c_in = c
        self.out = Dense(c_in, 1, rng.child("out"))

    def forward(self, value: Tensor, mask: np.ndarray) -> Tensor:
        z = T.concat([value, Tensor(mask)], axis=1)
        for conv in self.convs:
            z = conv(z)
        return self.out(T.global_avg_pool(z)).reshape(-1)


class SeqGenerator(Module):
    """Latent (B, D) to an IMU window (B, T, 6) with a two-layer LSTM."""

    def __init__(self, d: int, hidden: int, steps: int, rng: RngStream):
        self.steps = steps
        self.lstm = LSTM(d, hidden, rng.child("lstm"), num_layers=2, bidirectional=False)
        self.out = Dense(hidden, 6, rng.child("out"))

    def forward(self, latent: Tensor, mask=None) -> Tensor:
        B, d = latent.shape
        x = T.stack([latent] * self.steps, axis=1)
        seq, _ = self.lstm(x)
        return self.out(seq)


class SeqDiscriminator(Module):
    def __init__(self, hidden: int, rng: RngStream):
        self.lstm = LSTM(6, hidden, rng.child("lstm"), num_layers=2, bidirectional=False)
        self.out = Dense(hidden, 1, rng.child("out"))

    def forward(self, window: Tensor, mask=None) -> Tensor:
        _, last = self.lstm(window)
        return self.out(last).reshape(-1)


class AdaptNets(Module):
    """The seven adaptation networks around a copy of a pretrained encoder."""

    def __init__(self, encoder, config: AdaptConfig, rng: RngStream):
        self.encoder = copy.deepcopy(encoder)
        self.config = config
        if isinstance(self.encoder, WirelessEncoder):
            self.kind = "wireless"
            c = self.encoder.config.channels[-1]
            gen = lambda name: ConvGenerator(c, config.gen_channels, rng.child(name), config.gen_layers, config.gen_kernel)  # noqa: E731
            self.G_S = gen("G_S")
            self.G_T = gen("G_T")
            self.D_S = ConvDiscriminator(config.disc_channels, rng.child("D_S"))
            self.D_T = ConvDiscriminator(config.disc_channels, rng.child("D_T"))
            self.C = gen("C")
        elif isinstance(self.encoder, InertialEncoder):
            self.kind = "inertial"
            d, w = self.encoder.latent_dim, self.encoder.config.window
            self.G_S = SeqGenerator(d, config.seq_hidden, w, rng.child("G_S"))
            self.G_T = SeqGenerator(d, config.seq_hidden, w, rng.child("G_T"))
            self.D_S = SeqDiscriminator(config.seq_hidden, rng.child("D_S"))
            self.D_T = SeqDiscriminator(config.seq_hidden, rng.child("D_T"))
            self.C = SeqGenerator(d, config.seq_hidden, w, rng.child("C"))
        else:
            raise TypeError(f"cannot adapt {type(encoder).__name__}")

    # parameter groups ------------------------------------------------------
    def f_params(self) -> list[tuple[str, Tensor]]:
        """F's parameters, named as in the encoder."""
        key = "convs" if self.kind == "wireless" else "lstm"
        return [(n, p) for n, p in self.encoder.named_parameters() if n.startswith(key + ".")]

    def r_params(self) -> list[tuple[str, Tensor]]:
        f = {n for n, _ in self.f_params()}
        return [(n, p) for n, p in self.encoder.named_parameters() if n not in f]

    def groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        sub = lambda name: [(f"{name}.{n}", p) for n, p in getattr(self, name).named_parameters()]  # noqa: E731
        return {
            "F": [(f"F.{n}", p) for n, p in self.f_params()],
            "R": [(f"R.{n}", p) for n, p in self.r_params()],
            "G_S": sub("G_S"),
            "G_T": sub("G_T"),
            "D_S": sub("D_S"),
            "D_T": sub("D_T"),
            "C": sub("C"),
        }

    def set_trainable(self, names) -> None:
        for g, params in self.groups().items():
            for _, p in params:
                p.requires_grad = g in names

    # signal plumbing -------------------------------------------------------
    def signal(self, ds: Dataset, idx) -> tuple[Tensor, np.ndarray | None]:
        """Domain signal windows for records ``idx``: (signal, aux mask or None)."""
        if self.kind == "wireless":
            x = self.encoder.prepare(ds.rss[idx], ds.mask[idx])
            return Tensor(x[:, :1]), x[:, 1:]
        return self.encoder.prepare(ds.imu[idx]), None

    def F(self, sig: Tensor, aux) -> Tensor:
        if self.kind == "wireless":
            return self.encoder.conv_stack(T.concat([sig, Tensor(aux)], axis=1))
        _, latent = self.encoder.lstm(sig)
        return latent

    def R(self, feats: Tensor) -> Tensor:
        if self.kind == "wireless":
            return self.encoder.head(self.encoder.beacon_stage(feats))
        return self.encoder.head(feats)

    def pred_loss(self, out: Tensor, label) -> Tensor:
        return wireless_loss(out, label) if self.kind == "wireless" else inertial_loss(out, label)

    def adapted_encoder(self):
        return copy.deepcopy(self.encoder)

    def encoder_state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.f_params()}


# -------------------------------------------------------------------- losses
def _distance(a: Tensor, b, kind: str) -> Tensor:
    d = a - b
    return T.mean(T.absolute(d)) if kind == "mae" else T.mean(T.square(d))


def gan_loss(score: Tensor, target: float, kind: str = "lsgan") -> Tensor:
    if kind == "lsgan":
        return T.mean(T.square(score - target))
    # binary cross-entropy on logits, written stably
    p = T.sigmoid(score)
    eps = 1e-12
    return -T.mean(T.log(p + eps) * target + T.log(1.0 - p + eps) * (1.0 - target))


@dataclass
class DomainBatch:
    x_s: Tensor
    aux_s: np.ndarray | None
    y_s: np.ndarray
    x_t: Tensor
    aux_t: np.ndarray | None

    def __post_init__(self):
        if self.x_s.shape[0] != self.x_t.shape[0]:
            raise ValueError("source and target batches must have the same size")


@dataclass
class LossTerms:
    total: Tensor
    terms: dict[str, float]


def _swap(batch: DomainBatch) -> DomainBatch:
    return DomainBatch(batch.x_t, batch.aux_t, batch.y_s, batch.x_s, batch.aux_s)


def combined_loss(nets: AdaptNets, batch: DomainBatch, config: AdaptConfig, side: str = "source") -> LossTerms:
    """Generator-side objective for one domain; ``side`` picks which discriminator is fooled."""
    if side not in ("source", "target"):
        raise ValueError(f"unknown side {side!r}")
    b = batch
    f_s = nets.F(b.x_s, b.aux_s)
    f_t = nets.F(b.x_t, b.aux_t)
    fake_s = nets.G_S(f_t, b.aux_t)  # target windows rendered in source style
    fake_t = nets.G_T(f_s, b.aux_s)
    if side == "source":
        gan = gan_loss(nets.D_S(fake_s, b.aux_t), config.y_real, config.gan)
        identity = _distance(nets.G_S(f_s, b.aux_s), b.x_s, config.cycle_distance)
    else:
        gan = gan_loss(nets.D_T(fake_t, b.aux_s), config.y_real, config.gan)
        identity = _distance(nets.G_T(f_t, b.aux_t), b.x_t, config.cycle_distance)
    terms = {"gan": gan}
    if config.lam_cycle > 0:
        back_t = nets.G_T(nets.F(fake_s, b.aux_t), b.aux_t)
        back_s = nets.G_S(nets.F(fake_t, b.aux_s), b.aux_s)
        terms["cycle"] = _distance(back_t, b.x_t, config.cycle_distance) + _distance(back_s, b.x_s, config.cycle_distance)
    if config.lam_identity > 0:
        terms["identity"] = identity
    if config.lam_pred > 0:
        terms["pred"] = nets.pred_loss(nets.R(f_s), b.y_s)
    if config.lam_recon > 0:
        terms["recon"] = _distance(nets.C(f_s, b.aux_s), b.x_s, config.recon_distance) + _distance(
            nets.C(f_t, b.aux_t), b.x_t, config.recon_distance
        )
    weights = {"gan": 1.0, "cycle": config.lam_cycle, "identity": config.lam_identity, "pred": config.lam_pred, "recon": config.lam_recon}
    total = terms["gan"]
    for k in TERMS[1:]:
        if k in terms:
            total = total + terms[k] * weights[k]
    return LossTerms(total, {k: (terms[k].item() if k in terms else 0.0) for k in TERMS})


def combined_loss_source(nets, batch, config) -> LossTerms:
    return combined_loss(nets, batch, config, "source")


def combined_loss_target(nets, batch, config) -> LossTerms:
    return combined_loss(nets, batch, config, "target")


def discriminator_loss(nets: AdaptNets, batch: DomainBatch, config: AdaptConfig, side: str = "source") -> Tensor:
    b = batch
    with T.no_grad():
        if side == "source":
            fake = nets.G_S(nets.F(b.x_t, b.aux_t), b.aux_t).data
        else:
            fake = nets.G_T(nets.F(b.x_s, b.aux_s), b.aux_s).data
    if side == "source":
        real_score = nets.D_S(b.x_s, b.aux_s)
        fake_score = nets.D_S(Tensor(fake), b.aux_t)
    else:
        real_score = nets.D_T(b.x_t, b.aux_t)
        fake_score = nets.D_T(Tensor(fake), b.aux_s)
    return gan_loss(real_score, config.y_real, config.gan) + gan_loss(fake_score, config.y_fake, config.gan)


def discriminator_loss_source(nets, batch, config) -> Tensor:
    return discriminator_loss(nets, batch, config, "source")


def discriminator_loss_target(nets, batch, config) -> Tensor:
    return discriminator_loss(nets, batch, config, "target")


# ---------------------------------------------------------------------- loop
@dataclass
class AdaptHistory:
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        keys = ["iteration"] + [f"{side}_{t}" for side in ("source", "target") for t in TERMS] + ["disc_source", "disc_target"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for r in self.rows:
                w.writerow([r["iteration"]] + [repr(float(r[k])) for k in keys[1:]])


GEN_GROUPS = ("F", "G_S", "G_T", "C")


def make_batch(nets: AdaptNets, source: Dataset, target: Dataset, n: int, rng: RngStream) -> DomainBatch:
    i_s = np.sort(rng.child("source").integers(0, len(source), size=n))
    i_t = np.sort(rng.child("target").integers(0, len(target), size=n))
    x_s, aux_s = nets.signal(source, i_s)
    x_t, aux_t = nets.signal(target, i_t)
    y = source.rss_label[i_s] if nets.kind == "wireless" else source.step[i_s]
    return DomainBatch(x_s, aux_s, y, x_t, aux_t)


def adapt(source: Dataset, target: Dataset, encoder, config: AdaptConfig, log=None, callback=None) -> tuple[AdaptNets, AdaptHistory]:
    """Run the four-block adaptation loop; the adapted encoder is ``nets.adapted_encoder()``.

    ``callback(iteration, nets)`` runs after every iteration (monitoring only).
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("source and target datasets must be non-empty")
    rng = RngStream(config.seed).child("adapt")
    nets = AdaptNets(encoder, config, rng.child("init"))
    groups = nets.groups()
    gen_opt = Optimizer([p for g in GEN_GROUPS for p in groups[g]], lr=config.lr, betas=(0.5, 0.999))
    ds_opt = Optimizer(groups["D_S"], lr=config.disc_lr, betas=(0.5, 0.999))
    dt_opt = Optimizer(groups["D_T"], lr=config.disc_lr, betas=(0.5, 0.999))
    history = AdaptHistory()
    low = {"source": 0, "target": 0}
    f_params = [p for _, p in nets.f_params()]
    n_avg = int(round(config.average_last * config.iterations))
    f_mean = [np.zeros_like(p.data) for p in f_params]
    for it in range(1, config.iterations + 1):
        batch = make_batch(nets, source, target, config.batch_size, rng.child(f"it{it}"))
        row: dict = {"iteration": it}
        for side, d_opt in (("source", ds_opt), ("target", dt_opt)):
            nets.set_trainable(GEN_GROUPS)
            gen_opt.zero_grad()
            lt = combined_loss(nets, batch, config, side)
            T.backward(lt.total)
            gen_opt.step()
            row.update({f"{side}_{k}": v for k, v in lt.terms.items()})
            nets.set_trainable(("D_S",) if side == "source" else ("D_T",))
            d_opt.zero_grad()
            dl = discriminator_loss(nets, batch, config, side)
            T.backward(dl)
            d_opt.step()
            row[f"disc_{side}"] = dl.item()
            low[side] = low[side] + 1 if dl.item() < config.collapse_tol else 0
            if low[side] == config.collapse_patience:
                warnings.warn(f"{side} discriminator loss below {config.collapse_tol} for {config.collapse_patience} iterations", RuntimeWarning)
            if not all(math.isfinite(v) for v in lt.terms.values()) or not math.isfinite(dl.item()):
                raise FloatingPointError(f"adaptation diverged at iteration {it}")
        history.rows.append(row)
        k = it - (config.iterations - n_avg)
        if k > 0:
            for m, p in zip(f_mean, f_params):
                m += (p.data - m) / k
        if callback is not None:
            callback(it, nets)
        if log and (it % 50 == 0 or it == config.iterations):
            log(f"adapt {it}: " + " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "iteration"))
    if n_avg > 0:
        for m, p in zip(f_mean, f_params):
            p.data[...] = m
    nets.set_trainable(())
    return nets, history


def config_dict(config: AdaptConfig) -> dict:
    return asdict(config)
