"""Siamese training loop with clipped SGD and NT-ASGD averaging."""

from __future__ import annotations

import contextlib
import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .data import Corpus, batchify, evaluate
from .masks import MaskSet
from .model import Carry, LmConfig, LmModel, forward, save_checkpoint
from .regularizers import RegularizerSpec, SiameseOutputs, objective
from .tensor import NonFiniteError

log = logging.getLogger(__name__)

MASK_STREAM = 0x5EED
LABEL_STREAM = 0x1AB
METRIC_COLUMNS = ("epoch", "split", "loss", "ppl", "act_norm", "lr", "averaging", "wall_s")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    lm: LmConfig = field(default_factory=LmConfig)
    reg: RegularizerSpec = field(default_factory=RegularizerSpec)
    batch_size: int = 32  # baseline batch; siamese runs halve it when halve_batch is set
    bptt: int = 35
    epochs: int = 6
    seed: int = 0
    lr: float = 30.0
    lr_decay: float = 0.1
    lr_patience: int = 20
    weight_decay: float = 1.2e-6
    clip: float = 0.25
    nonmono: int = 5
    halve_batch: bool = True
    shared_masks: bool = False  # both copies reuse copy i's masks
    shared_carry: bool = False  # both copies start from copy i's carried state
    epoch_fraction: float = 1.0  # share of one pass over train that makes up an "epoch"
    eval_batch_size: int = 10
    valid_tokens: int | None = None  # evaluate on a prefix of the valid split
    loss_reduction: str = "mean"
    label_fraction: float = 1.0  # share of batch columns whose targets count
    record_wall_time: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.bptt < 1 or self.epochs < 0:
            raise ValueError("batch_size, bptt must be positive and epochs non-negative")
        if self.nonmono < 1:
            raise ValueError("nonmono must be >= 1")
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ValueError("label_fraction must lie in [0, 1]")
        if not 0.0 < self.epoch_fraction <= 1.0:
            raise ValueError("epoch_fraction must lie in (0, 1]")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError("loss_reduction must be 'sum' or 'mean'")

    @property
    def effective_batch_size(self) -> int:
        if self.halve_batch and self.reg.siamese is not None:
            return max(1, self.batch_size // 2)
        return self.batch_size


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    clip: float | None = None
    nonmono: int = 5
    averaging: bool = False
    shadow: dict[str, np.ndarray] | None = None
    avg_count: int = 0
    val_history: list[float] = field(default_factory=list)
    trigger_epoch: int | None = None
    epoch: int = 0
    best_val: float = math.inf
    stall: int = 0
    decays: int = 0


def clip_and_update(model: LmModel, opt: OptimizerState) -> float:
    """Coupled weight decay, global-norm clipping, SGD step, shadow update.

    Returns the pre-clip gradient norm.
    """
    grads = {}
    for name, p in model.params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if opt.weight_decay:
            g = g + opt.weight_decay * p.data
        grads[name] = g
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    scale = 1.0
    if opt.clip is not None and norm > opt.clip:
        scale = opt.clip / norm
    for name, p in model.params.items():
        g = grads[name] if scale == 1.0 else grads[name] * scale
        p.data = p.data - opt.lr * g
        p.grad = None
    if opt.averaging:
        opt.avg_count += 1
        if opt.shadow is None:
            opt.shadow = model.state_arrays()
        else:
            k = opt.avg_count
            for name, p in model.params.items():
                opt.shadow[name] += (p.data - opt.shadow[name]) / k
    return norm


def ntasgd_maybe_trigger(opt: OptimizerState, val_metric: float) -> OptimizerState:
    """Switch on averaging once validation stops improving.

    Fires when at least ``nonmono`` earlier checks exist and the current
    metric is no better than the best of the last ``nonmono`` of them.
    """
    hist = opt.val_history
    if not opt.averaging and len(hist) >= opt.nonmono and val_metric >= min(hist[-opt.nonmono:]):
        opt.averaging = True
        opt.trigger_epoch = len(hist) + 1
        opt.shadow = None
        opt.avg_count = 0
        log.info("NT-ASGD triggered at check %d", opt.trigger_epoch)
    hist.append(val_metric)
    return opt


def maybe_decay_lr(opt: OptimizerState, val_metric: float, patience: int, factor: float) -> bool:
    if val_metric < opt.best_val:
        opt.best_val = val_metric
        opt.stall = 0
        return False
    opt.stall += 1
    if opt.stall >= patience:
        opt.lr *= factor
        opt.stall = 0
        opt.decays += 1
        return True
    return False


@contextlib.contextmanager
def averaged_params(model: LmModel, opt: OptimizerState) -> Iterator[None]:
    """Temporarily load the averaged shadow (if any) into the model."""
    if not (opt.averaging and opt.shadow is not None):
        yield
        return
    saved = {k: p.data for k, p in model.params.items()}
    for k, p in model.params.items():
        p.data = opt.shadow[k]
    try:
        yield
    finally:
        for k, p in model.params.items():
            p.data = saved[k]


@dataclass
class StepMetrics:
    loss: float
    ce: float  # mean token cross-entropy of copy i
    act_norm: float  # mean (1/d)||m h||^2 of copy i's final layer
    grad_norm: float
    tape_floats: int
    values: dict[str, float]


class Trainer:
    """Holds the model, optimizer and per-copy carried state of one run."""

    def __init__(self, model: LmModel, config: RunConfig):
        self.model = model
        self.config = config
        self.opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay, clip=config.clip,
                                  nonmono=config.nonmono)
        self.step_index = 0
        self.carries: dict[str, Carry | None] = {"i": None, "j": None, "free": None}

    def reset_state(self) -> None:
        self.carries = {"i": None, "j": None, "free": None}

    def _masks(self, steps: int, batch: int, copy: int) -> MaskSet:
        plan = self.model.config.mask_plan(batch)
        if self.config.shared_masks:
            copy = 0
        return MaskSet.sample(plan, steps, (MASK_STREAM, self.config.seed, self.step_index, copy))

    def _labels(self, batch: int) -> np.ndarray | None:
        frac = self.config.label_fraction
        if frac >= 1.0:
            return None
        return (np.arange(batch) < round(frac * batch)).astype(np.float64)

    def siamese_step(self, inputs: np.ndarray, targets: np.ndarray) -> StepMetrics:
        cfg, model, spec = self.config, self.model, self.config.reg
        steps, batch = inputs.shape
        kind = spec.siamese
        carry_i = self.carries["i"]
        try:
            with T.Tape(rng_seed=cfg.seed) as tape:
                with tape.segment(0):
                    outs_i, new_i = forward(model, inputs, self._masks(steps, batch, 0), carry_i)
                outs_j = outs_f = None
                new_j = new_f = None
                if kind in ("FD", "PI"):
                    carry_j = carry_i if cfg.shared_carry else self.carries["j"]
                    with tape.segment(1):
                        outs_j, new_j = forward(model, inputs, self._masks(steps, batch, 1), carry_j)
                elif kind in ("ELD", "ELDM"):
                    carry_f = carry_i if cfg.shared_carry else self.carries["free"]
                    if kind == "ELD":
                        with T.no_grad():
                            outs_f, new_f = forward(model, inputs, None, carry_f)
                    else:
                        with tape.segment(1):
                            outs_f, new_f = forward(model, inputs, None, carry_f)
                h_prev = carry_i[-1][0] if carry_i is not None else None
                parts = objective(spec, SiameseOutputs(outs_i, outs_j, outs_f), targets,
                                  weights=self._labels(batch), h_prev=h_prev, reduction=cfg.loss_reduction)
                tape.backward(parts.loss)
            tape_floats = tape.saved_floats()
            grad_norm = clip_and_update(model, self.opt)
        except NonFiniteError as exc:
            raise TrainingDiverged(
                f"non-finite value at step {self.step_index} (lr={self.opt.lr}, seed={cfg.seed}): {exc}"
            ) from exc
        self.carries["i"] = new_i
        self.carries["j"] = new_j
        self.carries["free"] = new_f
        self.step_index += 1
        n_tok = steps * batch
        act = 0.0
        for o in outs_i:
            d = o.dropped.data
            act += float((d * d).sum()) / d.shape[1]
        return StepMetrics(
            loss=parts.values["loss"],
            ce=parts.values["ce_i"] / n_tok,
            act_norm=act / n_tok,
            grad_norm=grad_norm,
            tape_floats=tape_floats,
            values=parts.values,
        )


@dataclass
class RunResult:
    rows: list[dict]
    best_val_ppl: float
    best_epoch: int
    model: LmModel
    opt: OptimizerState
    best_arrays: dict[str, np.ndarray] | None
    wall: list[float]
    steps: int = 0

    def valid_ppl(self) -> list[float]:
        return [r["ppl"] for r in self.rows if r["split"] == "valid"]

    def train_act_norm(self) -> list[float]:
        return [r["act_norm"] for r in self.rows if r["split"] == "train"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) if r[c] is not None else "" for c in METRIC_COLUMNS])
    return buf.getvalue()


def train(config: RunConfig, corpus: Corpus, out_dir: str | Path | None = None,
          on_epoch: Callable[[int, list[dict]], None] | None = None,
          model: LmModel | None = None) -> RunResult:
    """Train one run; deterministic given ``config.seed``.

    Writes ``metrics.csv``, ``timing.csv`` and ``best.ckpt`` into
    ``out_dir`` when given.  The wall-time column of ``metrics.csv`` stays
    empty unless ``record_wall_time`` is set, keeping the file
    byte-reproducible.
    """
    if config.lm.vocab_size != corpus.vocab_size:
        raise ValueError(f"model vocab {config.lm.vocab_size} != corpus vocab {corpus.vocab_size}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model = model if model is not None else LmModel(config.lm, seed=config.seed)
    trainer = Trainer(model, config)
    batch = config.effective_batch_size
    train_batched = batchify(corpus.split("train"), batch)
    n_windows = max(1, math.ceil((len(train_batched) - 1) / config.bptt))
    # a fixed share of the token stream, so halved-batch runs take twice the steps
    per_epoch = max(1, round(config.epoch_fraction * n_windows))
    valid = corpus.splits.get("valid")
    if valid is None or len(valid) < 2 * config.eval_batch_size:
        valid = corpus.split("train")
    if config.valid_tokens:
        valid = valid[: config.valid_tokens]

    rows: list[dict] = []
    wall: list[float] = []
    best = (math.inf, 0, None)
    cursor = 0
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        ce_sum = act_sum = 0.0
        for _ in range(per_epoch):
            if cursor >= n_windows:
                cursor = 0
                trainer.reset_state()
            start = cursor * config.bptt
            n = min(config.bptt, len(train_batched) - 1 - start)
            inputs = train_batched[start:start + n]
            targets = train_batched[start + 1:start + 1 + n]
            m = trainer.siamese_step(inputs, targets)
            ce_sum += m.ce
            act_sum += m.act_norm
            cursor += 1
        elapsed = time.perf_counter() - t0
        wall.append(elapsed)
        wall_col = elapsed if config.record_wall_time else None
        opt = trainer.opt
        train_loss = ce_sum / per_epoch
        rows.append(dict(epoch=epoch, split="train", loss=train_loss, ppl=math.exp(train_loss),
                         act_norm=act_sum / per_epoch, lr=opt.lr, averaging=int(opt.averaging), wall_s=wall_col))
        with averaged_params(model, opt):
            ev = evaluate(model, valid, config.eval_batch_size, config.bptt)
            if ev.ppl < best[0]:
                best = (ev.ppl, epoch, model.state_arrays())
                if out is not None:
                    save_checkpoint(out / "best.ckpt", model, meta={"corpus_mode": corpus.mode, "epoch": epoch,
                                                                    "averaged": bool(opt.averaging)})
        rows.append(dict(epoch=epoch, split="valid", loss=ev.loss, ppl=ev.ppl, act_norm=ev.act_norm,
                         lr=opt.lr, averaging=int(opt.averaging), wall_s=wall_col))
        ntasgd_maybe_trigger(opt, ev.loss)
        maybe_decay_lr(opt, ev.loss, config.lr_patience, config.lr_decay)
        opt.epoch = epoch
        log.info("epoch %d train ppl %.3f valid ppl %.3f lr %g avg %s", epoch, math.exp(train_loss),
                 ev.ppl, opt.lr, opt.averaging)
        if out is not None:
            (out / "metrics.csv").write_text(metrics_csv(rows))
            (out / "timing.csv").write_text("epoch,wall_s\n" + "".join(f"{i + 1},{w:.3f}\n" for i, w in enumerate(wall)))
        if on_epoch is not None:
            on_epoch(epoch, rows)
    return RunResult(rows=rows, best_val_ppl=best[0], best_epoch=best[1], model=model, opt=trainer.opt,
                     best_arrays=best[2], wall=wall, steps=trainer.step_index)


def run_config_dict(config: RunConfig) -> dict:
    d = asdict(config)
    d["reg"]["kinds"] = list(config.reg.kinds)
    return d
