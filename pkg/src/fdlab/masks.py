"""Dropout masks: sampling, expectation, exhaustive enumeration.

All masks use inverted scaling, so kept entries equal ``1 / (1 - rate)``
and the expected mask is all-ones.  A mask-free forward pass therefore *is*
the expected-mask forward pass.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .tensor import Tensor, constant

GRANULARITIES = ("per_step", "per_sequence", "embedding_row", "weight_matrix")
MAX_ENUM_BITS = 20


class MaskError(ValueError):
    pass


class BitBudgetError(MaskError):
    pass


@dataclass(frozen=True)
class DropScheme:
    rate: float
    granularity: str = "per_sequence"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise MaskError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.granularity not in GRANULARITIES:
            raise MaskError(f"unknown granularity {self.granularity!r}")

    @property
    def keep_value(self) -> float:
        return 1.0 / (1.0 - self.rate)


def _check_rate(rate: float) -> None:
    if rate >= 1.0:
        raise MaskError(f"dropout rate must be < 1, got {rate}")
    if rate < 0.0:
        raise MaskError(f"dropout rate must be >= 0, got {rate}")


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def sample_array(rate: float, shape, rng: np.random.Generator) -> np.ndarray:
    _check_rate(rate)
    shape = tuple(shape)
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) < (1.0 - rate)
    return keep * (1.0 / (1.0 - rate))


def sample(scheme: DropScheme, shape, rng: np.random.Generator) -> Tensor:
    """Draw i.i.d. Bernoulli(1 - rate) keep decisions, inverted-scaled."""
    return constant(sample_array(scheme.rate, shape, rng))


def expected_mask(scheme: DropScheme, shape) -> Tensor:
    _check_rate(scheme.rate)
    return constant(np.ones(tuple(shape)))


def enumerate_bits(rates: Iterable[float]) -> tuple[np.ndarray, np.ndarray]:
    """Every joint assignment of independent mask bits.

    Returns ``(values, probs)`` with ``values`` of shape ``(2**k, k)``.  Row
    order follows ``itertools.product`` with *keep* before *drop*.
    """
    rates = [float(r) for r in rates]
    for r in rates:
        _check_rate(r)
    k = len(rates)
    if k > MAX_ENUM_BITS:
        raise BitBudgetError(f"{k} mask bits exceeds the enumeration budget of {MAX_ENUM_BITS}")
    n = 1 << k
    # bit b of the row index (most significant first) set => dropped
    idx = np.arange(n, dtype=np.int64)
    shifts = np.arange(k - 1, -1, -1, dtype=np.int64)
    dropped = ((idx[:, None] >> shifts[None, :]) & 1).astype(bool)
    r = np.asarray(rates)
    keep_val = 1.0 / (1.0 - r)
    values = np.where(dropped, 0.0, keep_val[None, :])
    probs = np.ones(n)
    for b in range(k):
        probs *= np.where(dropped[:, b], r[b], 1.0 - r[b])
    return values, probs


def enumerate_all(scheme: DropScheme, shape) -> list[tuple[Tensor, float]]:
    """All ``2**k`` masks of ``shape`` with their exact probabilities."""
    shape = tuple(shape)
    k = int(np.prod(shape)) if shape else 1
    if k > MAX_ENUM_BITS:
        raise BitBudgetError(f"{k} mask bits exceeds the enumeration budget of {MAX_ENUM_BITS}")
    values, probs = enumerate_bits([scheme.rate] * k)
    return [(constant(v.reshape(shape)), float(p)) for v, p in zip(values, probs)]


def enumerate_all_naive(rate: float, k: int) -> list[tuple[tuple[float, ...], float]]:
    """Reference enumeration with plain Python loops."""
    keep = 1.0 / (1.0 - rate)
    out = []
    for bits in itertools.product((True, False), repeat=k):
        p = 1.0
        for kept in bits:
            p *= (1.0 - rate) if kept else rate
        out.append((tuple(keep if kept else 0.0 for kept in bits), p))
    return out


SiteKey = tuple[str, int]


@dataclass(frozen=True)
class SitePlan:
    """Where a mask goes and what shape one sample has (excluding time)."""

    scheme: DropScheme
    shape: tuple[int, ...]


@dataclass
class MaskSet:
    """Concrete masks for one forward window, keyed by ``(site, layer)``.

    ``per_step`` entries hold one tensor per time step; every other
    granularity holds a single tensor reused at each step.
    """

    masks: dict[SiteKey, list[Tensor]] = field(default_factory=dict)
    schemes: dict[SiteKey, DropScheme] = field(default_factory=dict)
    seed: object = None
    steps: int = 0

    @classmethod
    def sample(cls, plan: Mapping[SiteKey, SitePlan], steps: int, seed) -> "MaskSet":
        rng = make_rng(seed)
        out = cls(seed=seed, steps=steps)
        for key in sorted(plan):
            site = plan[key]
            out.schemes[key] = site.scheme
            if site.scheme.granularity == "per_step":
                arr = sample_array(site.scheme.rate, (steps,) + site.shape, rng)
                out.masks[key] = [constant(a) for a in arr]
            else:
                out.masks[key] = [constant(sample_array(site.scheme.rate, site.shape, rng))]
        return out

    @classmethod
    def ones(cls, plan: Mapping[SiteKey, SitePlan], steps: int) -> "MaskSet":
        out = cls(seed=None, steps=steps)
        for key in sorted(plan):
            site = plan[key]
            out.schemes[key] = site.scheme
            out.masks[key] = [expected_mask(site.scheme, site.shape)]
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[SiteKey, np.ndarray], schemes: Mapping[SiteKey, DropScheme], steps: int) -> "MaskSet":
        out = cls(seed=None, steps=steps)
        for key, arr in arrays.items():
            scheme = schemes[key]
            out.schemes[key] = scheme
            if scheme.granularity == "per_step":
                out.masks[key] = [constant(a) for a in arr]
            else:
                out.masks[key] = [constant(arr)]
        return out

    def __contains__(self, key: SiteKey) -> bool:
        return key in self.masks

    def at(self, site: str, layer: int, t: int) -> Tensor:
        key = (site, layer)
        try:
            seq = self.masks[key]
        except KeyError:
            raise MaskError(f"mask set has no entry for site {site!r} layer {layer}") from None
        if len(seq) == 1:
            return seq[0]
        return seq[t]

    def equals(self, other: "MaskSet") -> bool:
        if self.masks.keys() != other.masks.keys():
            return False
        for key, seq in self.masks.items():
            oth = other.masks[key]
            if len(seq) != len(oth):
                return False
            if not all(np.array_equal(a.data, b.data) for a, b in zip(seq, oth)):
                return False
        return True
