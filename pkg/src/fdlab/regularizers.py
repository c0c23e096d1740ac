"""Penalties (FD, ELD, ELDM, Pi-model, AR, TAR, PR) and objective wiring.

Objectives are per-sequence sums over time (``reduction="sum"``), averaged
over the batch.  ``reduction="mean"`` additionally averages the target loss
and the AR/TAR/PR terms over time steps, which is how the training presets
are scaled; the siamese penalty keeps its ``kappa / (m T)`` weight either way.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import StepOutput
from .tensor import ShapeError, Tensor

KINDS = ("none", "FD", "ELD", "ELDM", "PI", "AR", "TAR", "PR")
SIAMESE_KINDS = ("FD", "ELD", "ELDM", "PI")


@dataclass(frozen=True)
class RegularizerSpec:
    kinds: tuple[str, ...] = ()
    kappa: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        kinds = tuple(k for k in self.kinds if k != "none")
        object.__setattr__(self, "kinds", kinds)
        for k in kinds:
            if k not in KINDS:
                raise ValueError(f"unknown regularizer {k!r}; expected one of {KINDS}")
        if len(set(kinds)) != len(kinds):
            raise ValueError("duplicate regularizer kinds")
        if sum(k in SIAMESE_KINDS for k in kinds) > 1:
            raise ValueError("at most one of FD/ELD/ELDM/PI may be active")
        for name in ("kappa", "alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def siamese(self) -> str | None:
        for k in self.kinds:
            if k in SIAMESE_KINDS:
                return k
        return None

    @property
    def copies(self) -> int:
        """Number of dropout passes that need gradients."""
        return 2 if self.siamese in ("FD", "PI") else 1

    @property
    def needs_mask_free(self) -> bool:
        return self.siamese in ("ELD", "ELDM")

    def has(self, kind: str) -> bool:
        return kind in self.kinds


@dataclass
class SiameseOutputs:
    outputs_i: list[StepOutput]
    outputs_j: list[StepOutput] | None = None
    outputs_free: list[StepOutput] | None = None

    def __post_init__(self):
        for other in (self.outputs_j, self.outputs_free):
            if other is None:
                continue
            if len(other) != len(self.outputs_i):
                raise ShapeError("siamese passes have different lengths")
            if other and other[0].logits.shape != self.outputs_i[0].logits.shape:
                raise ShapeError("siamese passes have different logit shapes")


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def r_fd(p_i: Tensor, p_j: Tensor) -> Tensor:
    """Squared distance between two predictions; gradient flows into both."""
    _same_shape(p_i, p_j)
    return T.sum_squares(T.sub(p_i, p_j))


def r_eld(p_dropout: Tensor, p_meanmask: Tensor) -> Tensor:
    """Like :func:`r_fd` but the expected-mask prediction is a constant."""
    _same_shape(p_dropout, p_meanmask)
    return T.sum_squares(T.sub(p_dropout, T.detach(p_meanmask)))


def r_ar(h: Tensor, mask: Tensor | None, alpha: float) -> Tensor:
    if mask is not None:
        _same_shape(h, mask)
        h = T.mul(mask, h)
    d = h.shape[-1]
    return T.mul(alpha / d, T.sum_squares(h))


def r_tar(h_t: Tensor, h_prev: Tensor, beta: float) -> Tensor:
    _same_shape(h_t, h_prev)
    d = h_t.shape[-1]
    return T.mul(beta / d, T.sum_squares(T.sub(h_t, h_prev)))


def r_pr(p: Tensor, gamma: float) -> Tensor:
    m = p.shape[-1]
    return T.mul(gamma / m, T.sum_squares(p))


def _targets(targets, steps: int) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64)
    if t.ndim == 1:
        t = t[:, None]
    if t.shape[0] != steps:
        raise ShapeError(f"expected {steps} target rows, got {t.shape[0]}")
    return t


def _chain_add(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return total


def cross_entropy_sum(outputs: Sequence[StepOutput], targets, weights: np.ndarray | None = None) -> Tensor:
    """Sum over steps and batch rows of token cross-entropy, optionally row-weighted."""
    tgt = _targets(targets, len(outputs))
    terms = []
    for t, out in enumerate(outputs):
        logits = out.logits if out.logits.data.ndim == 2 else None
        if logits is None:
            ce = T.softmax_cross_entropy(out.logits, int(tgt[t, 0]))
        else:
            ce = T.softmax_cross_entropy(logits, tgt[t])
            if weights is not None:
                ce = T.mul(ce, T.constant(weights))
            ce = T.sum(ce)
        terms.append(ce)
    return _chain_add(terms)


@dataclass
class ObjectiveParts:
    loss: Tensor
    values: dict[str, float] = field(default_factory=dict)


def objective(spec: RegularizerSpec, siamese: SiameseOutputs, targets, *,
              weights: np.ndarray | None = None, h_prev: Tensor | None = None,
              reduction: str = "sum") -> ObjectiveParts:
    """Assemble the training loss for ``spec`` from the recorded passes.

    ``weights`` marks labeled rows (target loss only); penalties cover every
    row.  ``h_prev`` is the final-layer state preceding the window, used by
    TAR at the first step.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    outs_i = siamese.outputs_i
    steps = len(outs_i)
    if steps == 0:
        raise ShapeError("empty window")
    tgt = _targets(targets, steps)
    logits0 = outs_i[0].logits
    batch = logits0.shape[0] if logits0.data.ndim == 2 else 1
    m = logits0.shape[-1]
    row_norm = 1.0 / batch
    loss_norm = row_norm / steps if reduction == "mean" else row_norm
    kind = spec.siamese
    values: dict[str, float] = {}
    terms: list[Tensor] = []

    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (batch,):
            raise ShapeError(f"expected {batch} label weights, got {weights.shape}")

    def need(outs, name):
        if outs is None:
            raise ValueError(f"{kind} objective needs the {name} pass")
        return outs

    ce_i = cross_entropy_sum(outs_i, tgt, weights)
    values["ce_i"] = ce_i.item()
    if kind in ("FD", "ELDM"):
        other = need(siamese.outputs_j, "second dropout") if kind == "FD" else need(siamese.outputs_free, "mask-free")
        ce_o = cross_entropy_sum(other, tgt, weights)
        values["ce_j"] = ce_o.item()
        terms.append(T.mul(0.5, T.mul(loss_norm, ce_i)))
        terms.append(T.mul(0.5, T.mul(loss_norm, ce_o)))
    else:
        terms.append(T.mul(loss_norm, ce_i))

    if kind is not None:
        if kind in ("FD", "PI"):
            outs_j = need(siamese.outputs_j, "second dropout")
            pens = [r_fd(a.logits, b.logits) for a, b in zip(outs_i, outs_j)]
        else:
            outs_f = need(siamese.outputs_free, "mask-free")
            pens = [r_eld(a.logits, b.logits) for a, b in zip(outs_i, outs_f)]
        pen = _chain_add(pens)
        values["penalty"] = pen.item() * row_norm / steps
        terms.append(T.mul(spec.kappa / (m * steps), T.mul(row_norm, pen)))

    if spec.has("AR") or spec.has("TAR"):
        if outs_i[0].hidden[-1].data.ndim != 2:
            raise ShapeError("AR/TAR expect batched hidden states")
    if spec.has("AR"):
        ar = _chain_add([r_ar(o.dropped, None, spec.alpha) for o in outs_i])
        values["ar"] = ar.item() * loss_norm
        terms.append(T.mul(loss_norm, ar))
    if spec.has("TAR"):
        prev = h_prev if h_prev is not None else T.constant(np.zeros(outs_i[0].hidden[-1].shape))
        tars = []
        for o in outs_i:
            h = o.hidden[-1]
            tars.append(r_tar(h, prev, spec.beta))
            prev = h
        tar = _chain_add(tars)
        values["tar"] = tar.item() * loss_norm
        terms.append(T.mul(loss_norm, tar))
    if spec.has("PR"):
        pr = _chain_add([r_pr(o.logits, spec.gamma) for o in outs_i])
        values["pr"] = pr.item() * loss_norm
        terms.append(T.mul(loss_norm, pr))

    loss = _chain_add(terms)
    values["loss"] = loss.item()
    return ObjectiveParts(loss, values)


def fd_objective(siamese: SiameseOutputs, targets, kappa: float, **kw) -> Tensor:
    return objective(RegularizerSpec(("FD",), kappa=kappa), siamese, targets, **kw).loss


def eld_objective(siamese: SiameseOutputs, targets, kappa: float, **kw) -> Tensor:
    return objective(RegularizerSpec(("ELD",), kappa=kappa), siamese, targets, **kw).loss


def eldm_objective(siamese: SiameseOutputs, targets, kappa: float, **kw) -> Tensor:
    return objective(RegularizerSpec(("ELDM",), kappa=kappa), siamese, targets, **kw).loss


def pi_objective(siamese: SiameseOutputs, targets, kappa: float, **kw) -> Tensor:
    return objective(RegularizerSpec(("PI",), kappa=kappa), siamese, targets, **kw).loss


def semi_supervised_objective(spec: RegularizerSpec, siamese: SiameseOutputs, targets,
                              labeled, **kw) -> ObjectiveParts:
    """Target loss over labeled rows only; penalties over every row."""
    labeled = np.asarray(labeled, dtype=bool)
    if not labeled.any() and spec.siamese is None:
        warnings.warn("batch has no labeled rows and no consistency penalty; no gradient signal",
                      RuntimeWarning, stacklevel=2)
    return objective(spec, siamese, targets, weights=labeled.astype(np.float64), **kw)
