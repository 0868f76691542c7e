"""Command-line interface: ``anchorret <command> [flags]``.

Layout under the output root (``--out``, ``$ANCHORRET_OUTPUT`` or the
config's ``output_dir``)::

    data/manifest.jsonl, data/images/...
    run/config.json, run/stage1.ckpt, run/stage2.ckpt, run/history.log
    reports/<command>.json (+ .csv, .meta.json)
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from . import pipeline as pl
from .config import ConfigError, RunConfig, defaults_json, load_config
from .evalmetrics import write_text_atomic
from .model import load_checkpoint, save_checkpoint
from .quantsim import save_quantized
from .synthgen import manifest_hash, read_dataset
from .training import StageConfig, train_stage

log = logging.getLogger("anchorret")


class CliError(RuntimeError):
    pass


# -- helpers


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        # dataset seed for gen, model and sampler seeds for training
        if args.command == "train":
            cfg.model.init_seed = cfg.sampler.seed = args.seed
        else:
            cfg.data.seed = args.seed
    return cfg


def _root(args, cfg: RunConfig) -> Path:
    return Path(args.out) if args.out else cfg.output_root()


def _manifest(args, cfg) -> Path:
    p = Path(args.data) if args.data else _root(args, cfg) / "data"
    if p.is_dir():
        p = p / "manifest.jsonl"
    if not p.exists():
        raise CliError(f"no dataset at {p}; run `gen` first")
    return p


def _run_dir(args, cfg) -> Path:
    return Path(args.run) if args.run else _root(args, cfg) / "run"


def _checkpoint(args, cfg) -> Path:
    if args.ckpt:
        p = Path(args.ckpt)
    else:
        run = _run_dir(args, cfg)
        p = next((run / n for n in ("stage2.ckpt", "stage1.ckpt") if (run / n).exists()), run / "stage2.ckpt")
    if not p.exists():
        raise CliError(f"no checkpoint at {p}; run `train` first")
    return p


def _report_path(args, cfg, name: str) -> Path:
    p = Path(args.report) if args.report else _root(args, cfg) / "reports" / f"{name}.json"
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_json(), sort_keys=True).encode()).hexdigest()


def _write_sidecar(report: Path, command: str, started: float) -> None:
    # wall-clock data lives here so the report itself stays byte-stable
    meta = {"command": command, "version": __version__, "started": started,
            "finished": time.time(), "seconds": round(time.time() - started, 3)}
    write_text_atomic(report.with_suffix(".meta.json"), json.dumps(meta, sort_keys=True, indent=2) + "\n")


def _write_json(path: Path, obj) -> None:
    write_text_atomic(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _load(args, cfg):
    manifest = _manifest(args, cfg)
    ckpt = _checkpoint(args, cfg)
    dataset = read_dataset(manifest)
    params = load_checkpoint(ckpt)
    meta = {"manifest_sha256": manifest_hash(manifest), "checkpoint_sha256": pl.file_digest(ckpt),
            "config_sha256": _config_digest(cfg)}
    return dataset, params, meta


# -- commands


def cmd_config(args) -> int:
    if args.defaults:
        sys.stdout.write(defaults_json())
        return 0
    cfg = _config(args)
    sys.stdout.write(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = Path(args.data) if args.data else _root(args, cfg) / "data"
    manifest = pl.generate(cfg, out)
    print(f"{manifest}\t{manifest_hash(manifest)}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = _manifest(args, cfg)
    run = _run_dir(args, cfg)
    if run.exists() and any(run.iterdir()):
        raise CliError(f"run directory {run} is not empty; choose another --run")
    dataset = read_dataset(manifest)
    run.mkdir(parents=True, exist_ok=True)
    _write_json(run / "config.json", cfg.to_json())
    if args.stage == "both":
        _, history, ckpts = pl.train(cfg, dataset, run)
    else:
        params = load_checkpoint(args.init) if args.init else pl.fresh_params(cfg)
        stage = cfg.stage_config(args.stage)
        stage = StageConfig(**{**{f.name: getattr(stage, f.name) for f in dataclasses.fields(stage)},
                               "loss": cfg.ablation_flags().loss_config(cfg.loss.lam, cfg.loss.eps)})
        params, history = train_stage(params, dataset, stage, cfg.sampler_config())
        tag = "stage1" if args.stage == "pretrain" else "stage2"
        save_checkpoint(params, run / f"{tag}.ckpt", extra={"stage": args.stage})
        history.write(run / "history.log")
        ckpts = [run / f"{tag}.ckpt"]
    last = history.steps[-1] if history.steps else {}
    print(f"trained {len(history.steps)} steps, final loss {last.get('loss', float('nan')):.4f}; "
          f"checkpoints: {', '.join(str(c) for c in ckpts)}")
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    cfg = _config(args)
    dataset, params, meta = _load(args, cfg)
    split = args.split or cfg.eval.split
    protocols = args.protocol or pl.within_protocols(dataset) + ["mixed"]
    report = pl.metrics_report(params, dataset, split, protocols, cfg.eval.k, meta)
    path = _report_path(args, cfg, "eval")
    report.write(path)
    _write_sidecar(path, "eval", started)
    for name, m in report.protocols.items():
        print(f"{name:<12} acc@1={m['acc@1']:.4f} mrr={m['mrr']:.4f} nes={m['nes']:.4f}")
    return 0


def cmd_cross_eval(args) -> int:
    started = time.time()
    cfg = _config(args)
    dataset, params, meta = _load(args, cfg)
    report = pl.cross_report(params, dataset, args.split or cfg.eval.split, cfg.eval.k, meta)
    path = _report_path(args, cfg, "cross_eval")
    report.write(path)
    _write_sidecar(path, "cross-eval", started)
    for name, m in report.protocols.items():
        if not name.startswith("random/"):
            print(f"{name:<16} acc@1={m['acc@1']:.4f} mrr={m['mrr']:.4f}")
    return 0


def cmd_characterize(args) -> int:
    started = time.time()
    cfg = _config(args)
    dataset, params, meta = _load(args, cfg)
    split = args.split or cfg.eval.split
    geo = pl.split_geometry(params, dataset.split(split))
    path = _report_path(args, cfg, "characterize")
    _write_json(path, {"geometry": geo, "meta": {**meta, "split": split}})
    _write_sidecar(path, "characterize", started)
    print(" ".join(f"{k}={v:.4f}" for k, v in sorted(geo.items())))
    return 0


def cmd_quantize(args) -> int:
    started = time.time()
    cfg = _config(args)
    dataset, params, meta = _load(args, cfg)
    split = args.split or cfg.eval.split
    out = pl.quantize_and_compare(params, dataset, split, cfg.eval.calibration_size, cfg.eval.k)
    path = _report_path(args, cfg, "quantize")
    qpath = path.with_suffix(".qmodel")
    if not qpath.exists():
        save_quantized(out.qmodel, qpath)
    drop = pl.mean_metric(out.float_metrics) - pl.mean_metric(out.quant_metrics)
    _write_json(path, {"float": out.float_metrics, "int8": out.quant_metrics,
                       "mean_cosine": out.mean_cosine, "acc@1_drop": drop, "cost": out.cost,
                       "meta": {**meta, "split": split, "calibration_size": cfg.eval.calibration_size}})
    _write_sidecar(path, "quantize", started)
    wb = out.cost["weight_bytes"]
    print(f"mean cosine {out.mean_cosine:.4f}, acc@1 drop {drop:+.4f}, "
          f"weights {wb['float32']} -> {wb['int8']} bytes")
    return 0


def cmd_ablate(args) -> int:
    started = time.time()
    cfg = _config(args)
    manifest = _manifest(args, cfg)
    dataset = read_dataset(manifest)
    seeds = cfg.eval.ablation_seeds
    rows = pl.run_ablation(cfg, dataset, seeds, args.split or cfg.eval.split, cfg.eval.k)
    path = _report_path(args, cfg, "ablate")
    _write_json(path, {"rows": rows, "meta": {"manifest_sha256": manifest_hash(manifest),
                                              "config_sha256": _config_digest(cfg), "seeds": seeds}})
    lines = ["objectives,ft,acc@1,mrr,nes"]
    for r in rows:
        objs = "+".join(n for n in ("v2t", "t2v", "inv") if r[n])
        lines.append(f"{objs},{int(r['ft'])},{r['acc@1']:.6f},{r['mrr']:.6f},{r['nes']:.6f}")
    write_text_atomic(path.with_suffix(".csv"), "\n".join(lines) + "\n")
    _write_sidecar(path, "ablate", started)
    print("\n".join(lines))
    return 0


# -- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults when omitted)")
    common.add_argument("--out", help="output root; overrides $ANCHORRET_OUTPUT and output_dir")
    common.add_argument("--seed", type=int, help="seed override (dataset for gen, init/sampler for train)")
    common.add_argument("--data", help="dataset directory or manifest path")
    common.add_argument("--run", help="run directory")
    common.add_argument("--ckpt", help="checkpoint file (default: latest in the run directory)")
    common.add_argument("--split", help="evaluation split")
    common.add_argument("--report", help="report path (.json)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="anchorret", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("config", parents=[common], help="print the resolved or default config")
    c.add_argument("--defaults", action="store_true")
    c.set_defaults(func=cmd_config)

    sub.add_parser("gen", parents=[common], help="generate the synthetic dataset").set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="two-stage (or single-stage) training")
    t.add_argument("--stage", choices=("both", "pretrain", "finetune"), default="both")
    t.add_argument("--init", help="checkpoint to start a single stage from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="within-language and mixed retrieval")
    e.add_argument("--protocol", action="append", help="within:L, mixed or cross:A->B (repeatable)")
    e.set_defaults(func=cmd_eval)

    sub.add_parser("cross-eval", parents=[common], help="all ordered language pairs").set_defaults(func=cmd_cross_eval)
    sub.add_parser("characterize", parents=[common], help="embedding geometry").set_defaults(func=cmd_characterize)
    sub.add_parser("quantize", parents=[common], help="int8 evaluation and cost model").set_defaults(func=cmd_quantize)
    sub.add_parser("ablate", parents=[common], help="objective x fine-tuning grid").set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, OSError, ValueError, RuntimeError, KeyError, ArithmeticError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"anchorret {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
