"""Desk-scale ablation: baseline dropout versus FD and its relatives.

Each variant trains the same ~0.47M-parameter character model on the
bundled corpus for a short schedule, per seed.  Ablation variants share one
batch size; ``FD-half`` is the headline setting, where FD runs at half the
baseline batch.  The summaries feed :func:`directional_checks` and the
MC-evaluation ordering in :func:`mc_ordering`.
"""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Corpus, mc_eval
from .model import LmConfig, LmModel
from .regularizers import RegularizerSpec
from .trainer import RunConfig, train

DESK_VARIANTS: dict[str, RegularizerSpec] = {
    "none": RegularizerSpec(),
    "FD": RegularizerSpec(("FD",), kappa=0.1),
    "PI": RegularizerSpec(("PI",), kappa=0.1),
    "ELD": RegularizerSpec(("ELD",), kappa=0.1),
    "AR": RegularizerSpec(("AR",), alpha=2.0),
    "TAR": RegularizerSpec(("TAR",), beta=1.0),
    "PR": RegularizerSpec(("PR",), gamma=0.1),
    "FD-half": RegularizerSpec(("FD",), kappa=0.1),
}
HALVED = frozenset({"FD-half"})


@dataclass
class DeskProtocol:
    embed_dim: int = 240
    batch_size: int = 32
    epochs: int = 6
    epoch_fraction: float = 1 / 24
    valid_tokens: int = 8000
    eval_batch_size: int = 40
    mc_tokens: int = 2000
    mc_ks: tuple[int, ...] = (1, 10, 50)

    def run_config(self, corpus: Corpus, spec: RegularizerSpec, seed: int, halve: bool = False) -> RunConfig:
        lm = LmConfig(vocab_size=corpus.vocab_size, embed_dim=self.embed_dim, hidden_dim=self.embed_dim)
        return RunConfig(lm=lm, reg=spec, batch_size=self.batch_size, epochs=self.epochs, seed=seed,
                         epoch_fraction=self.epoch_fraction, valid_tokens=self.valid_tokens,
                         eval_batch_size=self.eval_batch_size, halve_batch=halve)


@dataclass
class RunSummary:
    variant: str
    seed: int
    best_val_ppl: float
    valid_ppl: list[float]
    train_act_norm: list[float]
    wall_s: float
    best_arrays: dict[str, np.ndarray] | None = field(default=None, repr=False)

    @property
    def mean_act_norm(self) -> float:
        return float(np.mean(self.train_act_norm))

    def as_dict(self) -> dict:
        return {"variant": self.variant, "seed": self.seed, "best_val_ppl": self.best_val_ppl,
                "valid_ppl": self.valid_ppl, "train_act_norm": self.train_act_norm, "wall_s": self.wall_s}


def run_ablation(corpus: Corpus, seeds, variants=tuple(DESK_VARIANTS), protocol: DeskProtocol | None = None,
                 out_dir: str | Path | None = None, keep: tuple[str, ...] = ("FD-half",),
                 progress: Callable[[str], None] | None = None) -> dict[str, dict[int, RunSummary]]:
    """Train every variant for every seed; ``keep`` variants retain best weights."""
    protocol = protocol or DeskProtocol()
    results: dict[str, dict[int, RunSummary]] = {v: {} for v in variants}
    out = Path(out_dir) if out_dir is not None else None
    for seed in seeds:
        for v in variants:
            cfg = protocol.run_config(corpus, DESK_VARIANTS[v], seed, halve=v in HALVED)
            t0 = time.perf_counter()
            run_out = out / f"{v}_seed{seed}" if out is not None else None
            r = train(cfg, corpus, run_out)
            s = RunSummary(v, seed, r.best_val_ppl, r.valid_ppl(), r.train_act_norm(), time.perf_counter() - t0,
                           r.best_arrays if v in keep else None)
            results[v][seed] = s
            if progress is not None:
                progress(f"{v:7s} seed {seed}: best {s.best_val_ppl:.4f} act {s.mean_act_norm:.5f} "
                         f"({s.wall_s:.0f}s)")
    if out is not None:
        rows = [s.as_dict() for per in results.values() for s in per.values()]
        (out / "ablation.json").write_text(json.dumps(rows, indent=1))
    return results


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def directional_checks(results: dict[str, dict[int, RunSummary]]) -> list[Check]:
    """(a) FD median best ppl <= baseline's (``FD-half`` when present);
    (b) FD <= PI at the midpoint epoch in >= 3/5 seeds; (c) mean masked
    activation norm of each regularized variant below the baseline's."""
    checks = []
    base, fd, pi = results["none"], results["FD"], results["PI"]
    head = "FD-half" if results.get("FD-half") else "FD"
    med_fd = statistics.median(s.best_val_ppl for s in results[head].values())
    med_base = statistics.median(s.best_val_ppl for s in base.values())
    checks.append(Check("a_fd_median_best_vs_baseline", med_fd <= med_base,
                        f"{head} median {med_fd:.4f} vs baseline {med_base:.4f}"))
    seeds = sorted(set(fd) & set(pi))
    wins = 0
    for seed in seeds:
        mid = len(fd[seed].valid_ppl) // 2 - 1
        wins += fd[seed].valid_ppl[mid] <= pi[seed].valid_ppl[mid]
    need = math.ceil(0.6 * len(seeds))
    checks.append(Check("b_fd_vs_pi_midpoint", wins >= need, f"FD <= PI at midpoint in {wins}/{len(seeds)} seeds"))
    base_act = float(np.mean([s.mean_act_norm for s in base.values()]))
    for v in ("FD", "AR", "TAR", "PR", "ELD"):
        if v not in results:
            continue
        act = float(np.mean([s.mean_act_norm for s in results[v].values()]))
        checks.append(Check(f"c_act_norm_{v}", act < base_act, f"{v} {act:.5f} vs baseline {base_act:.5f}"))
    return checks


def mc_ordering(corpus: Corpus, summaries: dict[int, RunSummary], protocol: DeskProtocol | None = None,
                split: str = "valid") -> tuple[Check, dict[int, list[float]]]:
    """MC-K perplexity for each K on each seed's model; medians must not increase with K."""
    protocol = protocol or DeskProtocol()
    ids = corpus.split(split)[: protocol.mc_tokens]
    table: dict[int, list[float]] = {k: [] for k in protocol.mc_ks}
    for seed, s in sorted(summaries.items()):
        if s.best_arrays is None:
            raise ValueError(f"run {s.variant}/{seed} did not keep its weights")
        model = LmModel(protocol.run_config(corpus, RegularizerSpec(), seed).lm, init=False)
        model.load_arrays(s.best_arrays)
        for k in protocol.mc_ks:
            table[k].append(mc_eval(model, ids, k, seed=seed, batch_size=10))
    medians = [statistics.median(table[k]) for k in protocol.mc_ks]
    ok = all(a >= b for a, b in zip(medians, medians[1:]))
    detail = " >= ".join(f"MC{k} {m:.4f}" for k, m in zip(protocol.mc_ks, medians))
    return Check("mc_ordering", ok, detail), table
