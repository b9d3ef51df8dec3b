"""Command-line entry point: ``sdat-lab <command> ...``.

Commands: gen-data, train, hessian, sweep, theory-check, report. Every
command writes a manifest (tool version, seed, arguments or config) next to
its outputs. Exit status is 0 on success, 1 when theory-check finds a
violation, 2 on bad input or a failed run.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__, jsonio
from .config import DEFAULTS, ConfigError, TrainConfig, parse_config_text
from .data import (
    DomainPair,
    blobs_pair,
    inject_label_noise,
    load_pair,
    save_pair,
    toy_pair,
)
from .hessian import HessianOracle, spectrum_report
from .rng import child_rng, child_seed
from .theory import check_lemma1, check_sam_ascent, fuzz_theorem2
from .trainer import FINAL_FIELDS, TrainingError, load_checkpoint, summarize, train


class CLIError(Exception):
    pass


def _write_manifest(path: Path, seed, **extra) -> None:
    doc = {"tool": "sdat_lab", "version": __version__, "seed": seed, **extra}
    jsonio.write_durable(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


def resolve_key(name: str) -> str:
    """Full config key for ``name``; a unique trailing component also works (``rho_task``)."""
    if name in DEFAULTS:
        return name
    hits = [k for k in DEFAULTS if k.rsplit(".", 1)[-1] == name]
    if len(hits) != 1:
        raise CLIError(f"unknown or ambiguous config key {name!r}")
    return hits[0]


def _parse_assign(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise CLIError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return resolve_key(k.strip()), v.strip()


def load_config(path, overrides=()) -> TrainConfig:
    values = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        values = parse_config_text(path.read_text())
        base = path.resolve().parent
    # data paths in a config file are relative to that file
    for key in ("data.src", "data.tgt"):
        if values.get(key, "").strip() and not Path(values[key]).is_absolute():
            values[key] = str((base / values[key]).resolve())
    for item in overrides:
        k, v = _parse_assign(item)
        values[k] = v
    return TrainConfig(values)


# gen-data -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.kind == "two-moons":
        pair = toy_pair(n=args.n, noise_std=args.noise, angle=args.angle, seed=args.seed)
    else:
        pair = blobs_pair(args.n, args.k, args.d, args.shift, seed=args.seed, std=args.noise)
    if args.label_noise > 0:
        src = inject_label_noise(pair.source, args.label_noise, child_seed(args.seed, 2))
        pair = DomainPair(src, pair.target, pair.shift)
    save_pair(pair, out)
    _write_manifest(out / "manifest.json", args.seed, command="gen-data", args=_args_dict(args))
    return 0


# train ----------------------------------------------------------------------


def cmd_train(args) -> int:
    config = load_config(args.config, args.set)
    history, _ = train(config, args.out, resume=args.resume, stop_after=args.stop_after)
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: src_acc {last.src_acc:.4f} tgt_acc {last.tgt_acc:.4f}")
    return 0


# hessian --------------------------------------------------------------------


def _spectrum(checkpoint, data_dir, fraction, probes, m, seed):
    config, params, _ = load_checkpoint(checkpoint)
    if data_dir is not None:
        d = Path(data_dir)
        pair = load_pair(d / "source.csv", d / "target.csv")
    elif config["data.src"].strip():
        pair = load_pair(config["data.src"], config["data.tgt"])
    else:
        pair = toy_pair(seed=config.get_int("data.seed"))
    oracle = HessianOracle(params, pair.source.X, pair.source.y, fraction=fraction, seed=seed)
    return spectrum_report(oracle, n_probes=probes, lanczos_m=m, seed=seed)


def cmd_hessian(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rep = _spectrum(args.checkpoint, args.data, args.fraction, args.probes, args.lanczos_m, args.seed)
    jsonio.write_durable(out, rep.to_json())
    _write_manifest(_sidecar(out, ".manifest.json"), args.seed, command="hessian", args=_args_dict(args))
    print(f"lambda_max {rep.lambda_max:.6g}  trace {rep.trace_estimate:.6g} +- {rep.trace_stderr:.2g}")
    return 0


# sweep ----------------------------------------------------------------------


def _cell_name(assign: dict) -> str:
    return "__".join(f"{k}={v}" for k, v in assign.items()) or "base"


def _run_cell(job) -> dict:
    """One (cell, seed) run in its own directory; top-level so workers can pickle it."""
    values, run_dir, hess = job
    config = TrainConfig(values)
    history, trainer = train(config, run_dir)
    final = {f: getattr(history[-1], f) for f in FINAL_FIELDS}
    if hess is not None:
        ck = Path(run_dir) / "checkpoint.json"
        rep = _spectrum(ck, None, hess["fraction"], hess["probes"], hess["lanczos_m"], 0)
        jsonio.write_durable(Path(run_dir) / "spectrum.json", rep.to_json())
        final["lambda_max"] = rep.lambda_max
    return final


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise CLIError(f"bad seed list {text!r}") from exc
    if not seeds or len(set(seeds)) != len(seeds):
        raise CLIError("seeds must be a non-empty list of distinct integers")
    return seeds


def cmd_sweep(args) -> int:
    base = load_config(args.config, args.set)
    grid = []
    for item in args.vary or []:
        k, vals = _parse_assign(item)
        grid.append((k, [v.strip() for v in vals.split(",")]))
    keys = [k for k, _ in grid]
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*[v for _, v in grid])]
    seeds = parse_seeds(args.seeds)
    hess = None
    if args.hessian:
        hess = {"fraction": args.fraction, "probes": args.probes, "lanczos_m": args.lanczos_m}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs, where = [], []
    for ci, cell in enumerate(cells):
        cfg = base.with_values(cell)
        for s in seeds:
            run_dir = out / _cell_name(cell) / f"seed_{s}"
            jobs.append((cfg.updated(train__seed=s).values, str(run_dir), hess))
            where.append((ci, s))
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            finals = list(pool.map(_run_cell, jobs))
    else:
        finals = [_run_cell(j) for j in jobs]

    by_cell: dict[int, dict[int, dict]] = {}
    for (ci, s), f in zip(where, finals):
        by_cell.setdefault(ci, {})[s] = f
    fields = list(FINAL_FIELDS) + (["lambda_max"] if hess else [])
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys + ["n_seeds"] + [f"{f}_{s}" for f in fields for s in ("mean", "std")])
        for ci, cell in enumerate(cells):
            runs = by_cell[ci]
            row = [cell[k] for k in keys] + [len(runs)]
            for f in fields:
                st = summarize([runs[s][f] for s in sorted(runs)])
                row += [format(st["mean"], ".17g"), format(st["std"], ".17g")]
            w.writerow(row)
    _write_manifest(
        out / "manifest.json",
        seeds,
        command="sweep",
        config=base.values,
        vary={k: v for k, v in grid},
        args=_args_dict(args),
    )
    return 0


# theory-check -----------------------------------------------------------------


def cmd_theory_check(args) -> int:
    lemma = check_lemma1(args.instances, seed=args.seed)
    thm = fuzz_theorem2(args.instances, eta=args.eta, seed=args.seed)
    n_grads = max(1, min(args.instances, 50))
    asc = [
        check_sam_ascent(child_rng(args.seed, 10_000 + i).standard_normal(6), 0.05, seed=i)["passed"]
        for i in range(n_grads)
    ]
    result = {
        "lemma1": {**lemma, "passed": lemma["n_pass"] + lemma["n_skipped"] == lemma["n_instances"]},
        "theorem2": {**thm, "passed": thm["n_pass"] + thm["n_skipped"] == thm["n_instances"]},
        "sam_ascent": {"n_gradients": n_grads, "n_pass": int(sum(asc)), "passed": all(asc)},
    }
    result["all_passed"] = all(v["passed"] for v in result.values())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    jsonio.write_durable(out, jsonio.dumps(result) + "\n")
    _write_manifest(_sidecar(out, ".manifest.json"), args.seed, command="theory-check", args=_args_dict(args))
    for name in ("lemma1", "theorem2", "sam_ascent"):
        print(f"{name}: {'pass' if result[name]['passed'] else 'FAIL'}")
    return 0 if result["all_passed"] else 1


# report -----------------------------------------------------------------------


def _find_runs(dirs) -> list[Path]:
    found = set()
    for d in dirs:
        d = Path(d)
        if not d.is_dir():
            raise CLIError(f"{d} is not a directory")
        found.update(p.parent for p in d.rglob("metrics.jsonl"))
    if not found:
        raise CLIError("no runs (metrics.jsonl) found")
    return sorted(found)


def _load_run(path: Path) -> dict:
    values = parse_config_text((path / "config.txt").read_text())
    config = TrainConfig(values)
    rows = [json.loads(l) for l in (path / "metrics.jsonl").read_text().splitlines() if l.strip()]
    spec = path / "spectrum.json"
    lam = json.loads(spec.read_text())["lambda_max"] if spec.exists() else None
    return {"path": path, "config": config.values, "metrics": rows, "lambda_max": lam}


def _fmt(st: dict) -> str:
    return f"{st['mean']:.4f} ± {st['std']:.4f}"


def build_report(run_dirs) -> tuple[str, dict[str, list[list]]]:
    """Markdown summary plus named CSV tables (header row first)."""
    runs = [_load_run(p) for p in _find_runs(run_dirs)]
    sig = lambda r: tuple(sorted((k, v) for k, v in r["config"].items() if k != "train.seed"))
    groups: dict[tuple, list[dict]] = {}
    for r in runs:
        groups.setdefault(sig(r), []).append(r)
    varied = sorted(
        k for k in DEFAULTS if k != "train.seed" and len({dict(g)[k] for g in groups}) > 1
    )
    label = lambda g: ", ".join(f"{k}={dict(g)[k]}" for k in varied) or "all runs"

    metrics = ["tgt_acc", "src_acc", "domain_acc", "task_loss"]
    has_lam = any(r["lambda_max"] is not None for r in runs)
    head = ["group", "mode", "n"] + metrics + (["lambda_max"] if has_lam else [])
    lines = ["# Run summary", "", "Final-epoch mean ± sample std over seeds.", ""]
    lines += ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    tables: dict[str, list[list]] = {
        "finals": [["group", "seed"] + varied + list(FINAL_FIELDS) + ["lambda_max"]],
        "curves": [["group", "seed", "epoch", "src_acc", "tgt_acc", "domain_acc", "task_loss"]],
        "lambda_by_mode": [["group", "mode", "lambda_max_mean", "lambda_max_std", "n"]],
    }
    series = {k: [[k, "tgt_acc_mean", "tgt_acc_std", "n"]] for k in varied}
    for g in sorted(groups, key=label):
        rs = sorted(groups[g], key=lambda r: int(r["config"]["train.seed"]))
        name = label(g)
        cfg = dict(g)
        finals = [r["metrics"][-1] for r in rs]
        row = [name, cfg["sam.mode"], str(len(rs))]
        row += [_fmt(summarize([f[m] for f in finals])) for m in metrics]
        lams = [r["lambda_max"] for r in rs if r["lambda_max"] is not None]
        if has_lam:
            row.append(_fmt(summarize(lams)) if lams else "n/a")
            if lams:
                st = summarize(lams)
                tables["lambda_by_mode"].append([name, cfg["sam.mode"], st["mean"], st["std"], st["n"]])
        lines.append("| " + " | ".join(row) + " |")
        for r, f in zip(rs, finals):
            seed = r["config"]["train.seed"]
            tables["finals"].append(
                [name, seed] + [cfg[k] for k in varied] + [f[m] for m in FINAL_FIELDS] + [r["lambda_max"]]
            )
            for m in r["metrics"]:
                tables["curves"].append(
                    [name, seed, m["epoch"], m["src_acc"], m["tgt_acc"], m["domain_acc"], m["task_loss"]]
                )
        st = summarize([f["tgt_acc"] for f in finals])
        for k in varied:
            series[k].append([cfg[k], st["mean"], st["std"], st["n"]])
    for k, rows in series.items():
        tables[f"tgt_acc_vs_{k}"] = rows
    if not has_lam:
        del tables["lambda_by_mode"]
    lines += ["", f"{len(runs)} runs in {len(groups)} groups."]
    return "\n".join(lines) + "\n", tables


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def cmd_report(args) -> int:
    text, tables = build_report(args.runs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    for name, rows in tables.items():
        with open(_sidecar(out, f".{name}.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in rows:
                w.writerow([_csv_cell(v) for v in row])
    _write_manifest(_sidecar(out, ".manifest.json"), None, command="report", args=_args_dict(args))
    return 0


# parser -----------------------------------------------------------------------


def _args_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdat-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"sdat-lab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic source/target pair as CSV")
    g.add_argument("--kind", choices=["two-moons", "blobs"], default="two-moons")
    g.add_argument("--n", type=int, default=600, help="samples per domain")
    g.add_argument("--noise", type=float, default=0.1, help="Gaussian noise std")
    g.add_argument("--angle", type=float, default=45.0, help="target rotation in degrees (two-moons)")
    g.add_argument("--shift", type=float, default=2.0, help="target center shift (blobs)")
    g.add_argument("--k", type=int, default=3, help="classes (blobs)")
    g.add_argument("--d", type=int, default=2, help="input dimension (blobs)")
    g.add_argument("--label-noise", type=float, default=0.0, help="fraction of source labels flipped")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", help="key = value file; defaults apply to missing keys")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", metavar="CHECKPOINT")
    t.add_argument("--stop-after", type=int, metavar="EPOCHS", help="halt early, keeping the full schedule")
    t.set_defaults(func=cmd_train)

    h = sub.add_parser("hessian", help="curvature report for a checkpoint")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--data", help="directory with source.csv/target.csv (default: the run's data)")
    h.add_argument("--fraction", type=float, default=0.5)
    h.add_argument("--probes", type=int, default=64)
    h.add_argument("--lanczos-m", type=int, default=40)
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_hessian)

    s = sub.add_parser("sweep", help="grid of runs over config values and seeds")
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--vary", action="append", metavar="KEY=V1,V2,...")
    s.add_argument("--seeds", default="0")
    s.add_argument("--out", required=True)
    s.add_argument("--parallel", type=int, default=1)
    s.add_argument("--hessian", action="store_true", help="also write spectrum.json per run")
    s.add_argument("--fraction", type=float, default=0.5)
    s.add_argument("--probes", type=int, default=16)
    s.add_argument("--lanczos-m", type=int, default=20)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("theory-check", help="fuzz the quadratic-game results")
    c.add_argument("--instances", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--eta", type=float, default=1e-3)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_theory_check)

    r = sub.add_parser("report", help="markdown tables and CSV series from run directories")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, ConfigError, TrainingError, OSError, ValueError, KeyError) as exc:
        print(f"sdat-lab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
