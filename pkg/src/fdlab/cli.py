"""Command-line entry point: ``fdlab {train,eval,verify,grid}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as cfgmod
from .config import ConfigError, DataConfig, ExperimentConfig
from .data import CorpusError, evaluate, load_corpus, mc_eval
from .masks import BitBudgetError, MAX_ENUM_BITS, make_rng
from .model import CheckpointError, load_checkpoint
from .trainer import TrainingDiverged, train

GRID_STREAM = 0x6121D

log = logging.getLogger("fdlab")


class CliError(Exception):
    pass


def _load_data(data: DataConfig, override: str | None = None):
    path = Path(override) if override else data.resolve()
    return load_corpus(path, data.mode)


def run_experiment(exp: ExperimentConfig, out: Path, data_override: str | None = None) -> float:
    corpus = _load_data(exp.data, data_override)
    exp = cfgmod.with_vocab(exp, corpus.vocab_size)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfgmod.dumps(exp), encoding="utf-8")
    result = train(exp.run, corpus, out)
    return result.best_val_ppl


def cmd_train(args) -> int:
    exp = cfgmod.load(args.config)
    if args.seed is not None:
        exp.run.seed = args.seed
    out = Path(args.out)
    best = run_experiment(exp, out, args.data)
    print(f"wrote {out / 'metrics.csv'}")
    print(f"best_val_ppl={best!r}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    mode = args.mode or meta.get("corpus_mode", "word")
    data = args.data or DataConfig().resolve()
    corpus = load_corpus(data, mode)
    if corpus.vocab_size != model.config.vocab_size:
        raise CliError(f"checkpoint vocabulary ({model.config.vocab_size}) does not match corpus "
                       f"({corpus.vocab_size}) at {data}")
    ids = corpus.split(args.split)
    if args.mc is None:
        ppl = evaluate(model, ids, args.batch_size, args.bptt).ppl
        print(f"split={args.split} mode=mask-free")
    else:
        if args.mc < 1:
            raise CliError("--mc K needs K >= 1")
        ppl = mc_eval(model, ids, args.mc, args.seed, args.batch_size, args.bptt)
        print(f"split={args.split} mode=mc K={args.mc} seed={args.seed}")
    print(f"ppl={ppl!r}")
    return 0


def cmd_verify(args) -> int:
    from .oracle import verify

    if args.bits > MAX_ENUM_BITS:
        raise CliError(f"--bits {args.bits} exceeds the exhaustive-enumeration budget of {MAX_ENUM_BITS} bits")
    report = verify(bits=args.bits, trials=args.trials, seed=args.seed, mc_samples=args.mc_samples)
    json.dump(report, sys.stdout, indent=2, default=float)
    print()
    return 0 if report["passed"] else 1


def summarize(values: list[float], baseline: float | None) -> dict:
    """Best, top-5 mean, top-10 mean and count of runs beating ``baseline``."""
    ok = sorted(v for v in values if math.isfinite(v))
    top = lambda k: sum(ok[:k]) / len(ok[:k]) if ok else math.nan  # noqa: E731
    return {
        "runs": len(values),
        "finished": len(ok),
        "best": ok[0] if ok else math.nan,
        "top5_mean": top(5),
        "top10_mean": top(10),
        "beating_baseline": sum(v < baseline for v in ok) if baseline is not None else None,
        "baseline": baseline,
    }


def _grid_worker(job: tuple) -> tuple[int, float, str]:
    index, raw, out, data_override = job
    exp = cfgmod.from_dict(raw)
    try:
        return index, run_experiment(exp, Path(out), data_override), ""
    except TrainingDiverged as exc:
        return index, math.inf, str(exc)


def cmd_grid(args) -> int:
    exp = cfgmod.load(args.config)
    grid = exp.grid or cfgmod.GridSpec()
    if args.runs is not None:
        grid.runs = args.runs
    baseline = args.baseline if args.baseline is not None else grid.baseline
    rng = make_rng((GRID_STREAM, grid.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs, draws = [], []
    for i in range(grid.runs):
        assignment = cfgmod.draw(grid, rng)
        run_exp = cfgmod.apply_draw(exp, assignment, exp.run.seed + i)
        raw = cfgmod.to_dict(run_exp)
        if run_exp.vocab_from_corpus:
            raw["model"].pop("vocab_size")
        draws.append(assignment)
        jobs.append((i, raw, str(out / f"run_{i:03d}"), args.data))
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_grid_worker, jobs))
    else:
        results = [_grid_worker(j) for j in jobs]
    results.sort()
    keys = sorted({k for d in draws for k in d})
    with open(out / "grid.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "seed", "best_val_ppl", *keys, "error"])
        for (i, ppl, err), d in zip(results, draws):
            w.writerow([i, exp.run.seed + i, repr(ppl), *[d.get(k, "") for k in keys], err])
    summary = summarize([ppl for _, ppl, _ in results], baseline)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{'best':>10} {'top5_mean':>10} {'top10_mean':>10} {'beating':>8}")
    beat = "-" if summary["beating_baseline"] is None else f"{summary['beating_baseline']}({summary['finished']})"
    print(f"{summary['best']:10.3f} {summary['top5_mean']:10.3f} {summary['top10_mean']:10.3f} {beat:>8}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fdlab", description="Fraternal dropout desk lab.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run from a TOML config")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help=f"data directory (overrides [data] path and ${cfgmod.DATA_ENV})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("data", nargs="?", help=f"data directory (default ${cfgmod.DATA_ENV})")
    p.add_argument("--mc", type=int, metavar="K", help="Monte-Carlo evaluation with K mask samples")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--mode", choices=("word", "char"), help="corpus mode (default: from checkpoint)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--bptt", type=int, default=35)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="enumeration checks of the variance identities")
    p.add_argument("--bits", type=int, default=12)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mc-samples", type=int, default=100_000)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("grid", help="random search over a TOML config with a [grid] section")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--runs", type=int)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--baseline", type=float, help="validation perplexity counted as 'beating'")
    p.add_argument("--data")
    p.set_defaults(func=cmd_grid)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, CorpusError, CheckpointError, BitBudgetError, CliError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
