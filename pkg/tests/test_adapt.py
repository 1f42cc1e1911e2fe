import copy
import csv
import math

import numpy as np
import pytest

from fusepos import adapt as A
from fusepos import tensor as T
from fusepos.encoders import InertialConfig, WirelessConfig, build_encoder
from fusepos.tensor import RngStream, Tensor

TINY = dict(gen_channels=4, disc_channels=(3, 3, 3), batch_size=4, seq_hidden=4)


@pytest.fixture(scope="module")
def encoder(small_ds):
    wl = build_encoder(
        "wireless", small_ds, RngStream(1), wireless=WirelessConfig(channels=(4, 4, 2), kernels=(3, 3, 3), feature_dim=3, hidden=4)
    )
    wl.fit_normaliser(small_ds.rss_label)
    return wl


def _nets(encoder, **kw):
    cfg = A.AdaptConfig(**{**TINY, **kw})
    return A.AdaptNets(encoder, cfg, RngStream(5)), cfg


def _batch(nets, small_ds, seed=0):
    return A.make_batch(nets, small_ds.by_split("train"), small_ds.by_split("val"), 4, RngStream(seed))


def _np(t):
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def test_zero_weights_reduce_to_adversarial_term(encoder, small_ds):
    nets, cfg = _nets(encoder, lam_cycle=0, lam_identity=0, lam_pred=0, lam_recon=0)
    b = _batch(nets, small_ds)
    lt = A.combined_loss_source(nets, b, cfg)
    with T.no_grad():
        score = _np(nets.D_S(nets.G_S(nets.F(b.x_t, b.aux_t), b.aux_t), b.aux_t))
    assert lt.total.item() == pytest.approx(np.mean((score - 1.0) ** 2), rel=1e-12)
    assert {k: v for k, v in lt.terms.items() if k != "gan"} == {"cycle": 0.0, "identity": 0.0, "pred": 0.0, "recon": 0.0}


def test_loss_decomposition(encoder, small_ds):
    nets, cfg = _nets(encoder, lam_cycle=10, lam_identity=5, lam_pred=1, lam_recon=1)
    b = _batch(nets, small_ds)
    for side in ("source", "target"):
        lt = A.combined_loss(nets, b, cfg, side)
        with T.no_grad():
            fs, ft = nets.F(b.x_s, b.aux_s), nets.F(b.x_t, b.aux_t)
            xs, xt = _np(b.x_s), _np(b.x_t)
            fake_s, fake_t = nets.G_S(ft, b.aux_t), nets.G_T(fs, b.aux_s)
            if side == "source":
                gan = np.mean((_np(nets.D_S(fake_s, b.aux_t)) - 1) ** 2)
                ident = np.mean(np.abs(_np(nets.G_S(fs, b.aux_s)) - xs))
            else:
                gan = np.mean((_np(nets.D_T(fake_t, b.aux_s)) - 1) ** 2)
                ident = np.mean(np.abs(_np(nets.G_T(ft, b.aux_t)) - xt))
            cyc = np.mean(np.abs(_np(nets.G_T(nets.F(fake_s, b.aux_t), b.aux_t)) - xt)) + np.mean(
                np.abs(_np(nets.G_S(nets.F(fake_t, b.aux_s), b.aux_s)) - xs)
            )
            pred = np.mean(np.hypot(*(_np(nets.R(fs)) - b.y_s).T))
            rec = np.mean((_np(nets.C(fs, b.aux_s)) - xs) ** 2) + np.mean((_np(nets.C(ft, b.aux_t)) - xt) ** 2)
        expect = gan + 10 * cyc + 5 * ident + pred + rec
        assert abs(lt.total.item() - expect) < 1e-12 * max(1.0, abs(expect))
        assert lt.terms["cycle"] == pytest.approx(cyc, rel=1e-12)
        assert lt.terms["identity"] == pytest.approx(ident, rel=1e-12)


def test_identity_networks_zero_reconstruction_terms(encoder, small_ds):
    nets, cfg = _nets(encoder, lam_pred=0)
    b = _batch(nets, small_ds)
    same = lambda x, aux=None: x  # noqa: E731
    nets.F = same
    nets.G_S = nets.G_T = nets.C = same
    nets.D_S = nets.D_T = lambda x, aux=None: T.mean(x, axis=(1, 2, 3))  # noqa: E731
    lt = A.combined_loss_source(nets, b, cfg)
    assert lt.terms["cycle"] == 0.0 and lt.terms["identity"] == 0.0 and lt.terms["recon"] == 0.0


def test_discriminator_constant_half(encoder, small_ds):
    nets, cfg = _nets(encoder)
    for d in (nets.D_S, nets.D_T):
        d.out.W.data[:] = 0.0
        d.out.b.data[:] = 0.5
    b = _batch(nets, small_ds)
    assert A.discriminator_loss_source(nets, b, cfg).item() == pytest.approx(0.5, abs=1e-15)
    assert A.discriminator_loss_target(nets, b, cfg).item() == pytest.approx(0.5, abs=1e-15)


def test_bce_flag():
    s = Tensor(np.zeros(3))
    assert A.gan_loss(s, 1.0, "bce").item() == pytest.approx(math.log(2), rel=1e-9)
    assert A.gan_loss(s, 1.0, "lsgan").item() == 1.0


def _nonzero_groups(nets):
    out = set()
    for g, params in nets.groups().items():
        if any(p.grad is not None and np.any(p.grad != 0) for _, p in params):
            out.add(g)
    return out


def test_freeze_audit(encoder, small_ds):
    nets, cfg = _nets(encoder, lam_cycle=10, lam_identity=5, lam_pred=1, lam_recon=1)
    b = _batch(nets, small_ds)
    for side, disc in (("source", "D_S"), ("target", "D_T")):
        nets.set_trainable(A.GEN_GROUPS)
        for _, p in [q for g in nets.groups().values() for q in g]:
            p.grad = None
        T.backward(A.combined_loss(nets, b, cfg, side).total)
        assert _nonzero_groups(nets) == {"F", "G_S", "G_T", "C"}
        nets.set_trainable((disc,))
        for _, p in [q for g in nets.groups().values() for q in g]:
            p.grad = None
        T.backward(A.discriminator_loss(nets, b, cfg, side))
        assert _nonzero_groups(nets) == {disc}


def test_discriminator_step_leaves_generators_bit_identical(encoder, small_ds):
    nets, cfg = _nets(encoder)
    b = _batch(nets, small_ds)
    before = {g: [p.data.copy() for _, p in ps] for g, ps in nets.groups().items() if g != "D_S"}
    nets.set_trainable(("D_S",))
    opt = T.Optimizer(nets.groups()["D_S"], lr=1e-2)
    T.backward(A.discriminator_loss_source(nets, b, cfg))
    opt.step()
    for g, vals in before.items():
        for v, (_, p) in zip(vals, nets.groups()[g]):
            assert np.array_equal(v, p.data)


def test_symmetry_under_domain_swap(encoder, small_ds):
    nets, cfg = _nets(encoder, lam_pred=0)
    nets.G_T.load_state_dict(nets.G_S.state_dict())
    nets.D_T.load_state_dict(nets.D_S.state_dict())
    b = _batch(nets, small_ds)
    src = A.combined_loss_source(nets, b, cfg).terms
    tgt = A.combined_loss_target(nets, A._swap(b), cfg).terms
    for k in ("gan", "cycle", "identity", "recon"):
        assert src[k] == pytest.approx(tgt[k], rel=1e-12)


def test_prediction_term_shared_between_sides(encoder, small_ds):
    nets, cfg = _nets(encoder)
    b = _batch(nets, small_ds)
    assert A.combined_loss_source(nets, b, cfg).terms["pred"] == A.combined_loss_target(nets, b, cfg).terms["pred"]


def test_zero_iterations_keep_encoder(encoder, small_ds):
    nets, hist = A.adapt(small_ds.by_split("train"), small_ds.by_split("val"), encoder, A.AdaptConfig(iterations=0, **TINY))
    assert hist.rows == []
    assert all(np.array_equal(v, dict(encoder.named_parameters())[n].data) for n, v in nets.encoder_state().items())
    assert nets.adapted_encoder().state_dict().keys() == encoder.state_dict().keys()


def test_adaptation_is_deterministic_and_moves_only_features(encoder, small_ds, tmp_path):
    cfg = A.AdaptConfig(iterations=3, **TINY)
    a, ha = A.adapt(small_ds.by_split("train"), small_ds.by_split("val"), encoder, cfg)
    b, hb = A.adapt(small_ds.by_split("train"), small_ds.by_split("val"), encoder, cfg)
    assert ha.rows == hb.rows
    orig = dict(encoder.named_parameters())
    moved = {n for n, p in a.adapted_encoder().named_parameters() if not np.array_equal(p.data, orig[n].data)}
    assert moved and all(n.startswith("convs.") for n in moved)
    ha.write_csv(tmp_path / "adapt_history.csv")
    with open(tmp_path / "adapt_history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["iteration", "source_gan", "source_cycle"] and rows[0][-2:] == ["disc_source", "disc_target"]
    assert len(rows) == 4 and len(rows[0]) == 13


def test_collapse_warning(encoder, small_ds):
    cfg = A.AdaptConfig(iterations=2, collapse_tol=1e9, collapse_patience=2, **TINY)
    with pytest.warns(RuntimeWarning, match="discriminator loss below"):
        A.adapt(small_ds.by_split("train"), small_ds.by_split("val"), encoder, cfg)


def test_inertial_variant(small_ds):
    ins = build_encoder("inertial", small_ds, RngStream(2), inertial=InertialConfig(hidden=3, num_layers=1))
    ins.fit_normaliser(small_ds.imu)
    nets, hist = A.adapt(small_ds.by_split("train"), small_ds.by_split("val"), ins, A.AdaptConfig(iterations=1, **TINY))
    assert nets.kind == "inertial" and len(hist.rows) == 1
    assert all(n.startswith("lstm.") for n, _ in nets.f_params())
    assert all(n.startswith("head.") for n, _ in nets.r_params())


def test_config_validation():
    with pytest.raises(ValueError):
        A.AdaptConfig(lam_cycle=-1)
    with pytest.raises(ValueError):
        A.AdaptConfig(gan="wgan")
    with pytest.raises(ValueError):
        A.AdaptConfig(encoder="camera")


def test_unequal_batches_rejected(encoder, small_ds):
    nets, _ = _nets(encoder)
    b = _batch(nets, small_ds)
    with pytest.raises(ValueError):
        A.DomainBatch(b.x_s, b.aux_s, b.y_s, Tensor(b.x_t.data[:2]), b.aux_t[:2])


def test_adapt_does_not_touch_the_input_encoder(encoder, small_ds):
    snap = copy.deepcopy(encoder.state_dict())
    A.adapt(small_ds.by_split("train"), small_ds.by_split("val"), encoder, A.AdaptConfig(iterations=1, **TINY))
    assert all(np.array_equal(snap[k], v) for k, v in encoder.state_dict().items())


def test_encoder_is_average_of_late_iterates(encoder, small_ds):
    seen = []
    cb = lambda it, nets: seen.append({n: p.data.copy() for n, p in nets.f_params()})  # noqa: E731
    cfg = A.AdaptConfig(iterations=4, average_last=0.5, **TINY)
    nets, _ = A.adapt(small_ds.by_split("train"), small_ds.by_split("val"), encoder, cfg, callback=cb)
    for n, p in nets.f_params():
        assert np.allclose(p.data, (seen[2][n] + seen[3][n]) / 2, rtol=0, atol=1e-15)
    last, _ = A.adapt(small_ds.by_split("train"), small_ds.by_split("val"), encoder, A.AdaptConfig(iterations=4, average_last=0.0, **TINY))
    assert all(np.array_equal(p.data, seen[3][n]) for n, p in last.f_params())
    with pytest.raises(ValueError):
        A.AdaptConfig(average_last=1.5)
