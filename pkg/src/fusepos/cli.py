"""``fusepos`` command line: simulate, train, eval, adapt and allan subcommands.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics as Mx
from . import pipeline as P
from .adapt import adapt
from .config import STAGES, ConfigError, RunConfig, derive_seed, dump_config, load_config
from .encoders import evaluate_encoder, load_encoder, save_encoder
from .fusion import infer_dataset, load_fusion, save_fusion, transfer_into_fusion
from .simulator import Dataset

log = logging.getLogger("fusepos")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class InputError(RuntimeError):
    """A required input file or checkpoint is missing or unreadable."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _need(path: str | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"inputs.{what} is required for this command")
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _dataset(path: str | None, what: str = "dataset") -> Dataset:
    p = _need(path, what)
    if not (p / "meta.json").exists():
        raise InputError(f"{p} is not a dataset directory")
    return Dataset.load(p)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# ------------------------------------------------------------------- commands
def cmd_simulate(cfg: RunConfig, out: Path) -> None:
    ds = P.simulate(cfg.simulator, cfg.seed)
    ds.save(out / "dataset")
    log.info("wrote %d records to %s", len(ds), out / "dataset")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    stage = cfg.train.stage
    ds = _dataset(cfg.inputs.dataset)
    if len(ds) == 0:
        raise InputError("the dataset is empty")
    if stage == "inertial":
        model, hist = P.train_inertial(ds, cfg, log=log.info)
        digest = save_encoder(out / "inertial.ckpt", model, {"stage": stage})
    elif stage == "wireless":
        model, hist = P.train_wireless(ds, cfg, log=log.info)
        digest = save_encoder(out / "wireless.ckpt", model, {"stage": stage})
    else:
        inertial, _ = load_encoder(_need(cfg.inputs.inertial, "inertial"))
        wireless, _ = load_encoder(_need(cfg.inputs.wireless, "wireless"))
        model, hist = P.train_fusion_stage(ds, inertial, wireless, cfg, multitask=stage == "multitask", log=log.info)
        digest = save_fusion(out / f"{stage}.ckpt", model, {"stage": stage})
    hist.write_csv(out / "history.csv")
    log.info("%s checkpoint %s", stage, digest)


def _score_file(name: str, path: str, part: Dataset, cfg: RunConfig) -> P.MethodResult:
    p = _need(path, f"eval.predictions.{name}")
    t, xy, heading = Mx.read_pred(p)
    errors = Mx.error_series(t, xy, part.t, part.pose[:, :2], cfg.metrics.tolerance)
    return P.MethodResult(t, xy, heading, errors)


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    if cfg.eval.matrix:
        rows = P.noise_matrix(cfg, log=log.info)
        (out / "matrix.csv").write_text(P.matrix_csv(rows))
        return
    ds = _dataset(cfg.inputs.dataset)
    fusion = load_fusion(_need(cfg.inputs.fusion, "fusion"))[0] if cfg.inputs.fusion else None
    inertial = load_encoder(_need(cfg.inputs.inertial, "inertial"))[0] if cfg.inputs.inertial else None
    wireless = load_encoder(_need(cfg.inputs.wireless, "wireless"))[0] if cfg.inputs.wireless else None
    if "fusion" in cfg.eval.methods and fusion is None:
        raise ConfigError("the fusion method needs inputs.fusion")
    if any(m != "fusion" for m in cfg.eval.methods) and fusion is None and (inertial is None or wireless is None):
        raise ConfigError("filter and single-sensor methods need inputs.inertial and inputs.wireless (or inputs.fusion)")
    results = P.evaluate(ds, cfg, cfg.eval.methods, inertial, wireless, fusion, log=log.info)
    part = P.select_split(ds, cfg.eval.split)
    for name, path in cfg.eval.predictions.items():
        results[name] = _score_file(name, path, part, cfg)
    table = {}
    for name, res in results.items():
        s = P.write_method(out / name, res)
        if s is not None:
            table[name] = s
        if res.info:
            _write_json(out / name / "info.json", {k: v for k, v in res.info.items() if k != "surface"})
    (out / "comparison.csv").write_text(Mx.comparison_table(table))


def cmd_adapt(cfg: RunConfig, out: Path) -> None:
    source = _dataset(cfg.inputs.dataset)
    target = _dataset(cfg.inputs.target, "target")
    fusion, meta = load_fusion(_need(cfg.inputs.fusion, "fusion"))
    kind = cfg.adapt.encoder
    acfg = replace(cfg.adapt, seed=derive_seed(cfg.seed, "adapt"))
    encoder = fusion.wireless if kind == "wireless" else fusion.inertial
    src_train = source.by_split("train") if np.any(source.split == "train") else source
    tgt_train = target.by_split("train") if np.any(target.split == "train") else target
    tgt_test = target.by_split("test") if np.any(target.split == "test") else target
    nets, history = adapt(src_train, tgt_train, encoder, acfg, log=log.info)
    adapted = nets.adapted_encoder()
    spliced = transfer_into_fusion(fusion, nets.encoder_state(), kind)
    history.write_csv(out / "adapt_history.csv")
    save_encoder(out / f"{kind}_adapted.ckpt", adapted, {"stage": "adapt"})
    save_fusion(out / "fusion_adapted.ckpt", spliced, {"stage": "adapt", "source_stage": meta.get("stage")})
    before_enc = evaluate_encoder(encoder, tgt_test, kind)[1]
    after_enc = evaluate_encoder(adapted, tgt_test, kind)[1]
    before_fused = infer_dataset(fusion, tgt_test).mean_error
    after_fused = infer_dataset(spliced, tgt_test).mean_error
    report = {
        "encoder": kind,
        "records": len(tgt_test),
        "before": {"encoder_error": before_enc, "fused_error": before_fused},
        "after": {"encoder_error": after_enc, "fused_error": after_fused},
        "improvement_pct": {
            "encoder": P.improvement(before_enc, after_enc),
            "fused": P.improvement(before_fused, after_fused),
        },
    }
    _write_json(out / "report.json", report)
    log.info("target %s error %.4f -> %.4f, fused %.4f -> %.4f", kind, before_enc, after_enc, before_fused, after_fused)


def read_series(path: Path, column: int) -> np.ndarray:
    """One numeric column of a CSV or whitespace-separated file; non-numeric rows (headers) are skipped."""
    text = path.read_text()
    delim = "," if "," in text else None
    rows = []
    for line in text.splitlines():
        parts = [p for p in (line.split(delim) if delim else line.split())]
        try:
            rows.append(float(parts[column]))
        except (ValueError, IndexError):
            continue
    return np.asarray(rows, dtype=np.float64)


def cmd_allan(cfg: RunConfig, out: Path) -> None:
    series = read_series(_need(cfg.inputs.series, "series"), cfg.metrics.allan.column)
    if len(series) < 2:
        raise InputError("the series needs at least two samples")
    curve = Mx.allan_variance(series, cfg.metrics.allan.dt)
    Mx.write_allan(out / "allan.csv", curve)
    log.info("allan: %d samples, %d averaging times", len(series), len(curve.taus))


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval, "adapt": cmd_adapt, "allan": cmd_allan}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusepos", description="Wireless-inertial fusion positioning toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration (defaults when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="global seed, overrides the config")
        if name == "train":
            p.add_argument("--stage", choices=STAGES, help="training stage, overrides train.stage")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if getattr(args, "stage", None):
            cfg = replace(cfg, train=replace(cfg.train, stage=args.stage))
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.yaml").write_text(dump_config(cfg))
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # every other failure is a runtime failure with a stable exit code
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
