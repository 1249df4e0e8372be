"""Command-line front end: ``flare <command> [options]``.

Training options resolve as command-line flags > ``--config`` JSON file >
built-in defaults. ``FLARE_LOG`` (DEBUG, INFO, WARNING, ...) sets verbosity.
Exit status is 0 on success, 1 when a run fails (including a failed gradient
check) and 2 for bad input such as missing or malformed files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import gradsuite
from .datamodel import (ParseError, SynthSpec, ViewManifest, build_task, load_csv, save_csv,
                        subsample_regime, synth_generate)
from .evaluation import BenchSpec, MetricsReport
from .model import ModelParams, classify, extract, predict_labels, translate
from .trainer import TrainConfig, fit, fit_multi, predict_proba

log = logging.getLogger("flare")

TRAIN_FLAGS = {  # flag dest -> TrainConfig field
    "seed": "seed", "epochs": "epochs", "batch": "batch", "lr": "lr", "lambda2": "lambda2",
    "lambda3": "lambda3", "alpha": "alpha", "tau": "tau", "kernel": "kernel",
    "steps_rule": "steps_rule",
}


class UsageError(Exception):
    """Bad command-line input; reported with exit status 2."""


# ---------------------------------------------------------------------------
# Option plumbing
# ---------------------------------------------------------------------------

def _resolve_config(args, base: TrainConfig = TrainConfig()) -> TrainConfig:
    values = base.to_dict()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        known = {f.name for f in fields(TrainConfig)}
        unknown = sorted(set(loaded) - known)
        if unknown:
            raise UsageError(f"{path}: unknown config keys {unknown}")
        values.update(loaded)
    for dest, key in TRAIN_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[key] = v
    if getattr(args, "no_scbs", False):
        values["use_scbs"] = False
    if getattr(args, "no_translator", False):
        values["use_translator"] = False
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None


def _add_train_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("training")
    g.add_argument("--config", help="JSON file of training options")
    g.add_argument("--seed", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--lambda2", type=float)
    g.add_argument("--lambda3", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--tau", type=float)
    g.add_argument("--kernel", choices=["rbf", "linear"])
    g.add_argument("--steps-rule", dest="steps_rule", choices=["target", "max"])
    g.add_argument("--no-scbs", action="store_true", help="natural class sampling")
    g.add_argument("--no-translator", action="store_true", help="identity translator")


def _add_data_flags(p: argparse.ArgumentParser, multi: bool = False, required: bool = True):
    g = p.add_argument_group("data")
    g.add_argument("--manifest", required=required, help="view manifest JSON")
    if multi:
        g.add_argument("--source", nargs="+", required=required, help="source site CSVs")
    else:
        g.add_argument("--source", required=required, help="source site CSV")
    g.add_argument("--target", required=required, help="target site CSV")
    g.add_argument("--setting", choices=["balanced", "imbalanced"], default=None if not required else "imbalanced")
    g.add_argument("--labeled-ratio", type=float, default=None, help="keep this share of D_t per class")
    g.add_argument("--unlabeled-ratio", type=float, default=None, help="keep this share of D_u")


def _read(path: str, manifest: ViewManifest):
    if not Path(path).is_file():
        raise UsageError(f"dataset not found: {path}")
    return load_csv(path, manifest, require_labels=True)


def _manifest(path: str) -> ViewManifest:
    if not Path(path).is_file():
        raise UsageError(f"manifest not found: {path}")
    try:
        return ViewManifest.load(path)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: malformed manifest ({exc})") from None


def _task_meta(args, sources: list[str], seed: int) -> dict:
    return {"manifest": str(args.manifest), "sources": [str(s) for s in sources],
            "target": str(args.target), "setting": args.setting or "imbalanced", "seed": seed,
            "labeled_ratio": args.labeled_ratio or 1.0, "unlabeled_ratio": args.unlabeled_ratio or 1.0}


def _tasks_from_meta(meta: dict):
    manifest = _manifest(meta["manifest"])
    sources = [_read(s, manifest) for s in meta["sources"]]
    target = _read(meta["target"], manifest)
    tasks = build_task(sources, target, manifest, meta["setting"], meta["seed"])
    lr, ur = meta.get("labeled_ratio", 1.0), meta.get("unlabeled_ratio", 1.0)
    if lr != 1.0 or ur != 1.0:
        tasks = [subsample_regime(t, lr, ur, meta["seed"]) for t in tasks]
    return tasks


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory not writable: {out}")
    return out


def _parse_counts(text: str) -> tuple[int, ...]:
    try:
        counts = tuple(int(c) for c in text.split(","))
    except ValueError:
        raise UsageError(f"counts must be comma-separated integers, got {text!r}") from None
    if any(c < 1 for c in counts):
        raise UsageError(f"counts must be >= 1, got {text!r}")
    return counts


def _float_list(text: str | None):
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    manifest = _manifest(args.manifest) if args.manifest else ViewManifest.default()
    site_counts = None
    if args.site_counts:
        site_counts = tuple(_parse_counts(c) for c in args.site_counts.split(";"))
        if len(site_counts) != args.sites:
            raise UsageError(f"--site-counts lists {len(site_counts)} sites, --sites is {args.sites}")
    if args.sites < 1:
        raise UsageError("--sites must be >= 1")
    counts = _parse_counts(args.counts)
    for c in (site_counts or (counts,)):
        if len(c) != manifest.classes:
            raise UsageError(f"need {manifest.classes} class counts, got {c}")
    spec = SynthSpec(args.sites, counts, manifest, args.separation, args.shift, args.noise, site_counts)
    try:
        sites = synth_generate(spec, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args)
    manifest.save(out / "manifest.json")
    for i, s in enumerate(sites, start=1):
        save_csv(out / f"site{i}.csv", s)
    print(f"wrote manifest.json and {len(sites)} site files to {out}")
    return 0


def _train(args, multi: bool) -> int:
    cfg = _resolve_config(args)
    sources = args.source if multi else [args.source]
    meta = _task_meta(args, sources, cfg.seed)
    tasks = _tasks_from_meta(meta)
    out = _out_dir(args)
    params, report = fit_multi(tasks, cfg) if multi else fit(tasks[0], cfg)
    meta.update({"method": "M-FLARE" if multi else "FLARE", "config": cfg.to_dict(),
                 "source_weights": report.final_source_weights})
    params.save(out / "checkpoint.npz", meta)
    report.save(out / "report.json")
    print(f"wrote {out / 'checkpoint.npz'} and {out / 'report.json'}")
    return 0


def cmd_train(args) -> int:
    return _train(args, multi=False)


def cmd_train_multi(args) -> int:
    return _train(args, multi=True)


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    params, meta = ModelParams.load(path)
    for key in ("manifest", "target", "setting", "labeled_ratio", "unlabeled_ratio"):
        v = getattr(args, key, None)
        if v is not None:
            meta[key] = v
    if args.source is not None:
        meta["sources"] = list(args.source)
    if args.seed is not None:
        meta["seed"] = args.seed
    missing = [k for k in ("manifest", "sources", "target", "setting", "seed") if k not in meta]
    if missing:
        raise UsageError(f"checkpoint lacks task metadata {missing}; pass them as flags")
    tasks = _tasks_from_meta(meta)
    task = tasks[0]
    weights = meta.get("source_weights") or None
    Xu, yu = task.target_unlabeled.X, task.target_unlabeled.y
    report = ev.evaluate(predict_proba(params, Xu, weights), yu)
    out = _out_dir(args)
    name = meta.get("method", "FLARE")
    ev.write_results(out / "results.csv", out / "results.json", {name: report}, meta["setting"])
    if args.dump_latent:
        _dump_latent(out / "latent.csv", params, tasks, weights)
    print(f"{name}: SEN {report.sen:.4f} SPE {report.spe:.4f} F1 {report.f1:.4f} G-mean {report.gmean:.4f}")
    return 0


def _dump_latent(path: Path, params: ModelParams, tasks, weights) -> None:
    """Latent rows of D_u and of every source, for external plotting."""
    k = params.shape.latent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"z{i}" for i in range(k)] + ["domain", "label", "predicted"])
        tu = tasks[0].target_unlabeled
        Z = extract(params, tu.X).value
        pred = predict_labels(predict_proba(params, tu.X, weights))
        for z, y, yhat in zip(Z, tu.y, pred):
            w.writerow([repr(float(v)) for v in z] + ["target", int(y), int(yhat)])
        for e, t in enumerate(tasks):
            src = t.source
            Zs = extract(params, translate(params, src.X, e))
            pred = predict_labels(classify(params, Zs, e))
            for z, y, yhat in zip(Zs.value, src.y, pred):
                w.writerow([repr(float(v)) for v in z] + [f"source{e}", int(y), int(yhat)])


def cmd_gridsearch(args) -> int:
    cfg = _resolve_config(args)
    meta = _task_meta(args, [args.source], cfg.seed)
    task = _tasks_from_meta(meta)[0]
    out = _out_dir(args)
    result = ev.grid_search(task, cfg, _float_list(args.grid_lambda2), _float_list(args.grid_lambda3),
                            _float_list(args.grid_alpha), folds=args.folds, criterion=args.criterion,
                            jobs=args.jobs)
    (out / "best_config.json").write_text(json.dumps(result.best.to_dict(), sort_keys=True, indent=1) + "\n",
                                          encoding="utf-8")
    (out / "cv_table.json").write_text(json.dumps(result.table, sort_keys=True, indent=1) + "\n",
                                       encoding="utf-8")
    b = result.best
    print(f"best lambda2={b.lambda2} lambda3={b.lambda3} alpha={b.alpha}")
    return 0


def cmd_gradcheck(args) -> int:
    cases = args.loss or list(gradsuite.CASES)
    if args.inject_fault:
        with gradsuite.faulty_adjoint(args.inject_fault):
            results = gradsuite.run(args.seed, cases, args.tolerance, kernel=args.kernel)
    else:
        results = gradsuite.run(args.seed, cases, args.tolerance, kernel=args.kernel)
    for r in results:
        print(r.line())
    if args.out:
        out = _out_dir(args)
        payload = [{"loss": r.name, "passed": r.passed, "max_rel_err": r.report.max_rel_err,
                    "worst_param": r.report.worst_param,
                    "worst_index": list(r.report.worst_index or ()),
                    "analytic": r.report.analytic, "numeric": r.report.numeric,
                    "entries": r.report.checked} for r in results]
        (out / "gradcheck.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n",
                                            encoding="utf-8")
    ok = all(r.passed for r in results)
    print("gradient check " + ("passed" if ok else "FAILED"))
    return 0 if ok else 1


def cmd_bench(args) -> int:
    cfg = _resolve_config(args, ev.BENCH_CONFIG)
    synth = replace(ev.BENCH_SYNTH, separation=args.separation, shift=args.shift)
    spec = BenchSpec(synth, args.setting, args.labeled_ratio, 1.0, args.mflare_sources)
    out = _out_dir(args)
    agg, detail = ev.run_bench(spec, cfg, args.repetitions, args.seed if args.seed is not None else 0,
                               args.jobs)
    ev.write_results(out / "results.csv", out / "results.json", agg, spec.setting, detail)
    for name, r in agg.items():
        print(_row(name, r))
    return 0


def _row(name: str, r: MetricsReport) -> str:
    cells = " ".join(f"{m.upper() if m != 'gmean' else 'G'} {getattr(r, m):.4f}±{r.stderr.get(m, 0.0):.4f}"
                     for m in ev.METRICS)
    return f"{name:12s} {cells}"


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flare", description="Semi-supervised cross-site domain adaptation.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic multi-site CSVs and a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--manifest", help="view manifest JSON (default: 7 views, 237 features)")
    p.add_argument("--sites", type=int, default=2)
    p.add_argument("--counts", default="900,90", help="per-class counts, e.g. 900,90")
    p.add_argument("--site-counts", help="per-site counts, e.g. '900,90;1000,100'")
    p.add_argument("--separation", type=float, default=ev.BENCH_SYNTH.separation)
    p.add_argument("--shift", type=float, default=ev.BENCH_SYNTH.shift)
    p.add_argument("--noise", type=float, default=1.0)
    p.set_defaults(func=cmd_generate)

    for name, func, multi in (("train", cmd_train, False), ("train-multi", cmd_train_multi, True)):
        p = sub.add_parser(name, help=("M-FLARE over several sources" if multi
                                       else "single-source FLARE") + "; writes checkpoint and report")
        _add_data_flags(p, multi=multi)
        _add_train_flags(p)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score a checkpoint on D_u; optional latent dump")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p, multi=True, required=False)
    p.add_argument("--seed", type=int)
    p.add_argument("--dump-latent", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gridsearch", help="k-fold CV over (lambda2, lambda3, alpha) on D_t")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--criterion", choices=["gmean", "f1"], default="gmean")
    p.add_argument("--grid-lambda2", help="comma-separated values")
    p.add_argument("--grid-lambda3")
    p.add_argument("--grid-alpha")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--kernel", choices=["rbf", "linear"], default="rbf")
    p.add_argument("--loss", action="append", choices=list(gradsuite.CASES))
    p.add_argument("--out")
    p.add_argument("--inject-fault", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="FLARE, M-FLARE and baselines over repeated synthetic partitions")
    _add_train_flags(p)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--setting", choices=["balanced", "imbalanced"], default="imbalanced")
    p.add_argument("--labeled-ratio", type=float, default=0.1)
    p.add_argument("--separation", type=float, default=ev.BENCH_SYNTH.separation)
    p.add_argument("--shift", type=float, default=ev.BENCH_SYNTH.shift)
    p.add_argument("--mflare-sources", type=int, default=2)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return ap


def _setup_logging():
    level = os.environ.get("FLARE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ParseError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"flare {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and fail the command
        log.debug("failure", exc_info=True)
        print(f"flare {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
