"""Command-line driver: ``fedleak <verb> [options]``.

Verbs: synth, train-private, shadow, attack, sweep-dropout, report. Every
verb takes the same spec options (a JSON config file plus flag overrides)
and writes under ``--out``. Outputs are deterministic; wall-clock timings go
to ``timing.log`` only.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import shutil
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import pipeline as pl
from .attack import fusion_weights
from .data import save_corpus
from .errors import ConfigError, NumericError, ShapeError
from .fl import TrainedRun
from .io import dump_json, load_log, save_run
from .rng import resolve_seed

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


# -- spec assembly ----------------------------------------------------------


def _csv_list(text: str, conv=str) -> list:
    try:
        return [conv(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse list {text!r}: {exc}") from exc


def build_spec(args) -> pl.ExperimentSpec:
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    for name in ("private", "shadow", "fl", "attack"):
        raw[name] = dict(raw.get(name) or {})
    if args.paper_scale:
        raw["paper_scale"] = True

    def both(key, value):
        raw["private"][key] = value
        raw["shadow"][key] = value

    if args.feature_dim is not None:
        both("feature_dim", args.feature_dim)
    if args.delta is not None:
        both("attribute_separation", args.delta)
    if args.profile is not None:
        both("profile", args.profile)
    if args.algorithm:
        raw["algorithms"] = _csv_list(args.algorithm)
    if args.folds:
        n = int(raw.get("num_folds", 5))
        raw["folds"] = list(range(n)) if args.folds == "all" else _csv_list(args.folds, int)
    if args.rounds is not None:
        raw["fl"]["global_rounds"] = args.rounds
    if args.attack_epochs is not None:
        raw["attack"]["epochs"] = args.attack_epochs
    if args.layers:
        raw["layer_conditions"] = [_csv_list(c, int) for c in args.layers]
    if args.private_corpus:
        raw["private_path"] = args.private_corpus
    if args.shadow_corpus:
        raw["shadow_path"] = args.shadow_corpus
    raw["seed"] = resolve_seed(args.seed if args.seed is not None else raw.get("seed"))
    try:
        return pl.ExperimentSpec.from_dict(raw).resolved()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad spec: {exc}") from exc


def _run_key(spec: pl.ExperimentSpec) -> dict:
    """The spec fields that FL runs depend on; stored with each run and checked on reuse."""
    d = spec.to_dict()
    at = d["attack"]
    return {
        "private": d["private"], "shadow": d["shadow"], "fl": d["fl"], "seed": d["seed"],
        "num_folds": d["num_folds"], "shards_per_speaker": d["shards_per_speaker"], "znorm": d["znorm"],
        "private_path": d["private_path"], "shadow_path": d["shadow_path"],
        "shadow_runs": {k: at[k] for k in ("num_shadow", "shadow_subsample", "shadow_init", "seed")},
    }


def _load_checked(path: Path, spec: pl.ExperimentSpec, what: str):
    log, meta = load_log(path)
    if meta.get("run_key") != json.loads(json.dumps(_run_key(spec))):
        raise ConfigError(f"{what} artifacts in {path} were produced by a different spec; rerun with --force")
    return log, meta


def _spec_digest(spec: pl.ExperimentSpec) -> str:
    return hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# -- output helpers ---------------------------------------------------------


def _claim(target: Path, force: bool):
    """Refuse to overwrite a non-empty output unless forced."""
    if target.is_dir() and any(target.iterdir()) or target.is_file():
        if not force:
            raise ConfigError(f"{target} exists; pass --force to overwrite")
        if target.is_dir():
            shutil.rmtree(target)
        else:
            target.unlink()


def _write_csv(path: Path, rows: list[dict], columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in columns})
    path.write_text(buf.getvalue(), encoding="utf-8")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def _log_time(out: Path, verb: str, seconds: float):
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    with open(out / "timing.log", "a", encoding="utf-8") as fh:
        fh.write(f"{stamp}\t{verb}\t{seconds:.1f}s\n")


def _say(msg: str):
    print(msg, flush=True)


def _private_dir(out: Path, algorithm: str, fold: int) -> Path:
    return out / "private" / algorithm / f"fold{fold}"


def _shadow_dir(out: Path, algorithm: str, m: int) -> Path:
    return out / "shadow" / algorithm / f"shadow{m}"


# -- verbs ------------------------------------------------------------------


def cmd_synth(spec: pl.ExperimentSpec, out: Path, args) -> int:
    target = out / "corpora"
    _claim(target, args.force)
    record = {"spec": spec.to_dict()}
    for name, speakers in (("private", pl.private_speakers(spec)), ("shadow", pl.shadow_speakers(spec))):
        acc = pl.probe(speakers, spec)
        save_corpus(speakers, target / name, metadata={"spec_digest": _spec_digest(spec), "role": name})
        n_m = sum(s.gender == "M" for s in speakers)
        record[name] = {"num_speakers": len(speakers), "num_male": n_m, "probe_accuracy": acc}
        _say(f"{name}: {len(speakers)} speakers ({n_m} M, {len(speakers) - n_m} F), "
             f"gender probe accuracy {acc:.4f}")
    dump_json(record, target / "synth.json")
    return EXIT_OK


def cmd_train_private(spec: pl.ExperimentSpec, out: Path, args) -> int:
    target = out / "private"
    _claim(target, args.force)
    speakers = pl.private_speakers(spec)
    plans = pl.fold_plans(spec, speakers)
    rows = []
    _say(f"{'algorithm':<8} {'fold':>4} {'acc':>8} {'uar':>8}")
    for algo in spec.algorithms:
        cfg = pl.fl_config(spec, algo)
        for f in spec.folds:
            run = pl.train_private(spec, speakers, plans[f], cfg, args.threads)
            plan = plans[f]
            save_run(run, _private_dir(out, algo, f), extra={
                "spec": spec.to_dict(),
                "run_key": _run_key(spec),
                "fold_plan": {"fold_index": plan.fold_index, "test_speaker_ids": plan.test_speaker_ids,
                              "train_speaker_ids": plan.train_speaker_ids},
            })
            m = run.test_metrics
            rows.append({"algorithm": algo, "fold": f, "ser_accuracy": m.accuracy, "ser_uar": m.uar,
                         "n_updates": len(run.log)})
            _say(f"{algo:<8} {f:>4} {m.accuracy:>8.4f} {m.uar:>8.4f}")
    dump_json({"spec": spec.to_dict(), "rows": rows}, target / "ser_results.json")
    _write_csv(target / "ser_results.csv", [dict(r, spec_digest=_spec_digest(spec)) for r in rows],
               ("algorithm", "fold", "ser_accuracy", "ser_uar", "n_updates", "spec_digest"))
    return EXIT_OK


def _shadow_logs(spec: pl.ExperimentSpec, out: Path, algo: str, threads: int, write: bool):
    """Load this algorithm's shadow logs, or train (and optionally save) them."""
    dirs = [_shadow_dir(out, algo, m) for m in range(spec.attack.num_shadow)]
    if all((d / "run.json").is_file() for d in dirs):
        return [_load_checked(d, spec, "shadow")[0] for d in dirs]
    priv = pl.private_speakers(spec)
    shadow = pl.shadow_speakers(spec)
    cfg = pl.fl_config(spec, algo)
    init = pl.initial_model(spec, priv[0].features.shape[1], cfg)
    logs = pl.train_shadows(spec, shadow, cfg, init, [s.speaker_id for s in priv], threads)
    if write:
        for d, log in zip(dirs, logs):
            final = log.snapshots[max(log.snapshots)]
            save_run(TrainedRun(final, cfg, log, []), d, extra={"spec": spec.to_dict(), "run_key": _run_key(spec)})
    return logs


def cmd_shadow(spec: pl.ExperimentSpec, out: Path, args) -> int:
    _claim(out / "shadow", args.force)
    for algo in spec.algorithms:
        logs = _shadow_logs(spec, out, algo, args.threads, write=True)
        _say(f"{algo}: {len(logs)} shadow runs, {sum(len(x) for x in logs)} updates")
    return EXIT_OK


def cmd_attack(spec: pl.ExperimentSpec, out: Path, args) -> int:
    report_path, csv_path = out / "attack_report.json", out / "attack_results.csv"
    for p in (report_path, csv_path):
        _claim(p, args.force)
    private = {}
    for algo in spec.algorithms:
        for f in spec.folds:
            d = _private_dir(out, algo, f)
            if not (d / "run.json").is_file():
                raise ConfigError(f"missing private run artifacts for {algo} fold {f} in {d}; "
                                  f"run 'fedleak train-private' first")
            try:
                log, meta = _load_checked(d, spec, "private")
            except ConfigError as exc:
                raise ConfigError(f"unusable private run for {algo} fold {f}: {exc}") from exc
            private[(algo, f)] = (log, meta)
    cells = []
    ser_dims = None
    for algo in spec.algorithms:
        shadow_logs = _shadow_logs(spec, out, algo, args.threads, write=not (out / "shadow" / algo).exists())
        logs = [private[(algo, f)][0] for f in spec.folds]
        ser_dims = tuple(private[(algo, spec.folds[0])][1]["ser_dims"])
        for layers in spec.layer_conditions:
            _, evals = pl.attack_cell(spec, shadow_logs, logs, layers, algo,
                                      progress=lambda e, loss: _say(f"  epoch {e} loss {loss:.4f}"))
            for f, ev in zip(spec.folds, evals):
                tm = private[(algo, f)][1]["test_metrics"]
                cell = pl.cell_record(algo, layers, f, ev, tm["uar"] if tm else None, ser_dims)
                cells.append(cell)
                _say(f"{algo:<8} layers={cell['layers']:<6} fold={f} attack UAR {cell['attack_uar']:.4f} "
                     f"(per-client {cell['client_majority_uar']:.4f}, n={cell['n_updates']})")
    report = {
        "spec": spec.to_dict(),
        "ser_dims": list(ser_dims),
        "fusion_weights": fusion_weights(ser_dims).tolist(),
        "cells": cells,
    }
    if args.sweep_dropout:
        rates = _csv_list(args.sweep_dropout, float)
        report["dropout_sweep"] = _sweep(spec, rates, out, args)
    dump_json(report, report_path)
    _write_csv(csv_path, [dict(c, spec_digest=_spec_digest(spec)) for c in cells],
               pl.CSV_COLUMNS + ("spec_digest",))
    return EXIT_OK


def _sweep(spec, rates, out: Path, args) -> list[dict]:
    rows = []
    for algo in spec.algorithms:
        for row in pl.run_dropout_sweep(spec, rates, algo, args.threads):
            rows.append(row)
            _say(f"{algo:<8} dropout={row['dropout_first']:.2f} SER UAR {row['ser_uar']:.4f} "
                 f"attack UAR {row['attack_uar']:.4f}")
    dump_json({"spec": spec.to_dict(), "rows": rows}, out / "dropout_sweep.json")
    _write_csv(out / "dropout_sweep.csv", [dict(r, spec_digest=_spec_digest(spec)) for r in rows],
               ("algorithm", "dropout_first", "ser_uar", "attack_uar", "client_majority_uar", "spec_digest"))
    return rows


def cmd_sweep_dropout(spec: pl.ExperimentSpec, out: Path, args) -> int:
    for p in (out / "dropout_sweep.json", out / "dropout_sweep.csv"):
        _claim(p, args.force)
    _sweep(spec, _csv_list(args.sweep_dropout or "0.2,0.4,0.6", float), out, args)
    return EXIT_OK


def cmd_report(spec: pl.ExperimentSpec, out: Path, args) -> int:
    """Summarise whatever results exist under ``--out`` as plain-text tables."""
    lines = []
    ser = out / "private" / "ser_results.json"
    if ser.is_file():
        lines += ["SER (held-out speakers)", f"{'algorithm':<8} {'fold':>4} {'acc':>8} {'uar':>8}"]
        for r in json.loads(ser.read_text(encoding="utf-8"))["rows"]:
            lines.append(f"{r['algorithm']:<8} {r['fold']:>4} {r['ser_accuracy']:>8.4f} {r['ser_uar']:>8.4f}")
        lines.append("")
    rep = out / "attack_report.json"
    if rep.is_file():
        data = json.loads(rep.read_text(encoding="utf-8"))
        lines += ["Gender attack UAR by layer condition",
                  f"{'algorithm':<8} {'layers':<6} {'fold':>4} {'uar':>8} {'client':>8} {'n':>6}"]
        for c in data["cells"]:
            lines.append(f"{c['algorithm']:<8} {c['layers']:<6} {c['fold']:>4} {c['attack_uar']:>8.4f} "
                         f"{c['client_majority_uar']:>8.4f} {c['n_updates']:>6}")
        lines.append("fusion weights: " + ", ".join(f"{w:.4f}" for w in data["fusion_weights"]))
        lines.append("")
    sweep = out / "dropout_sweep.json"
    if sweep.is_file():
        lines += ["Dropout sweep (first hidden layer)",
                  f"{'algorithm':<8} {'rate':>5} {'ser_uar':>8} {'attack':>8}"]
        for r in json.loads(sweep.read_text(encoding="utf-8"))["rows"]:
            lines.append(f"{r['algorithm']:<8} {r['dropout_first']:>5.2f} {r['ser_uar']:>8.4f} "
                         f"{r['attack_uar']:>8.4f}")
        lines.append("")
    if not lines:
        raise ConfigError(f"no results under {out}")
    text = "\n".join(lines)
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    _say(text)
    return EXIT_OK


VERBS = {
    "synth": cmd_synth,
    "train-private": cmd_train_private,
    "shadow": cmd_shadow,
    "attack": cmd_attack,
    "sweep-dropout": cmd_sweep_dropout,
    "report": cmd_report,
}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment spec; flags below override it")
    common.add_argument("--out", default="fedleak-out", help="output directory (default: %(default)s)")
    common.add_argument("--seed", type=int, help="root seed (fallback: $FEDLEAK_SEED, then 0)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for client-local training")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--paper-scale", action="store_true",
                        help="200 global rounds, feature_dim 988 unless set, full attack epoch budget")
    common.add_argument("--feature-dim", type=int)
    common.add_argument("--delta", type=float, help="attribute separation of both synthetic corpora")
    common.add_argument("--profile", choices=["custom", "IEMOCAP-like", "CREMAD-like", "MSPIMPROV-like"])
    common.add_argument("--algorithm", help="comma list of fedsgd,fedavg")
    common.add_argument("--folds", help="comma list of fold indices, or 'all'")
    common.add_argument("--rounds", type=int, help="global FL rounds")
    common.add_argument("--attack-epochs", type=int)
    common.add_argument("--layers", nargs="+", metavar="L[,L...]",
                        help="layer conditions, e.g. '--layers 1 2 3 1,2,3'")
    common.add_argument("--sweep-dropout", metavar="R[,R...]", help="first-layer dropout rates, e.g. 0.2,0.4,0.6")
    common.add_argument("--private-corpus", help="precomputed private corpus directory")
    common.add_argument("--shadow-corpus", help="precomputed shadow corpus directory")
    parser = argparse.ArgumentParser(prog="fedleak", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, fn in VERBS.items():
        sub.add_parser(verb, parents=[common], help=(fn.__doc__ or verb).split("\n")[0])
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        spec = build_spec(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        code = VERBS[args.verb](spec, out, args)
        _log_time(out, args.verb, time.perf_counter() - t0)
        return code
    except (ConfigError, ShapeError) as exc:
        print(f"fedleak: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"fedleak: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
