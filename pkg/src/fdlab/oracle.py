"""Exhaustive-enumeration checks of the dropout-variance identities.

On tiny networks every joint dropout mask can be listed with its exact
probability, which turns the expectations over ``(s_i, s_j)`` into finite
sums.  Two enumerators are provided: a vectorized one that runs all masks
through :func:`fdlab.model.forward` as a single batch, and a scalar one
(plain Python floats, its own LSTM arithmetic) used to cross-check it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .masks import MAX_ENUM_BITS, BitBudgetError, DropScheme, MaskSet, enumerate_all_naive, enumerate_bits, make_rng
from .model import LmConfig, LmModel, forward

ROW_SITES = ("input", "hidden", "output")
DIRECT_PAIR_LIMIT = 1 << 13
ORACLE_STREAM = 0x0AC1E


class OracleViolation(AssertionError):
    pass


@dataclass
class Expectations:
    e_pair_sq_dist: float  # E_{s_i,s_j} ||p(s_i) - p(s_j)||^2 over ordered i.i.d. pairs
    per_unit_var: np.ndarray  # Var_s p_q(s) per output unit
    e_prediction: np.ndarray
    r_eld_tilde: float  # E_s ||p(s) - p(expected mask)||^2
    bits: int
    prob_total: float
    pair_method: str


def _row_plan(model: LmModel):
    plan = model.config.mask_plan(1)
    return {k: v for k, v in plan.items() if k[0] in ROW_SITES}


def _bit_layout(model: LmModel, steps: int):
    """Per-site slices into the flat bit vector plus the per-bit rates."""
    layout, rates = [], []
    offset = 0
    for key, site in sorted(_row_plan(model).items()):
        width = site.shape[1]
        reps = steps if site.scheme.granularity == "per_step" else 1
        n = reps * width
        layout.append((key, site.scheme, offset, reps, width))
        rates.extend([site.scheme.rate] * n)
        offset += n
    return layout, rates


def count_bits(model: LmModel, steps: int) -> int:
    return len(_bit_layout(model, steps)[1])


def _check_supported(model: LmModel) -> None:
    cfg = model.config
    if cfg.dropout_weight > 0 or cfg.dropout_embedding > 0:
        raise ValueError("enumeration supports per-row activation sites only (no weight/embedding dropout)")


def predictions_for_masks(model: LmModel, ids, values: np.ndarray) -> np.ndarray:
    """Final-step logits for each row of flat mask bits ``values``."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    steps = len(ids)
    layout, _ = _bit_layout(model, steps)
    n = len(values)
    arrays, schemes = {}, {}
    for key, scheme, off, reps, width in layout:
        block = values[:, off:off + reps * width]
        if scheme.granularity == "per_step":
            arrays[key] = block.reshape(n, reps, width).transpose(1, 0, 2)
        else:
            arrays[key] = block
        schemes[key] = scheme
    masks = MaskSet.from_arrays(arrays, schemes, steps)
    with T.no_grad():
        outs, _ = forward(model, np.repeat(ids[:, None], n, axis=1), masks)
    return outs[-1].logits.data


def mask_free_prediction(model: LmModel, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1, 1)
    with T.no_grad():
        outs, _ = forward(model, ids, None)
    return outs[-1].logits.data[0]


def _pair_sum_direct(P: np.ndarray, w: np.ndarray) -> float:
    total = 0.0
    chunk = max(1, (1 << 22) // max(1, len(P) * P.shape[1]))
    for s in range(0, len(P), chunk):
        d = ((P[s:s + chunk, None, :] - P[None, :, :]) ** 2).sum(axis=2)
        total += float(w[s:s + chunk] @ (d @ w))
    return total


def exact_expectations(model: LmModel, ids) -> Expectations:
    """Exact mask expectations of the final-step prediction.

    Pairs are summed literally (every ordered pair, product probabilities)
    up to ``DIRECT_PAIR_LIMIT`` masks; beyond that the pair sum is expanded
    into first and second moments.
    """
    _check_supported(model)
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    _, rates = _bit_layout(model, len(ids))
    if len(rates) > MAX_ENUM_BITS:
        raise BitBudgetError(f"{len(rates)} mask bits exceeds the enumeration budget of {MAX_ENUM_BITS}")
    values, w = enumerate_bits(rates)
    P = predictions_for_masks(model, ids, values)
    return expectations_from_table(P, w, mask_free_prediction(model, ids))


def expectations_from_table(P: np.ndarray, w: np.ndarray, free: np.ndarray) -> Expectations:
    """Expectations from per-mask predictions ``P`` (rows) with probabilities ``w``."""
    P = np.asarray(P, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    # shift by one row so a mask-independent output gives exactly zero variance
    mean = P[0] + w @ (P - P[0])
    var = w @ (P - mean) ** 2
    if len(P) <= DIRECT_PAIR_LIMIT:
        pair = _pair_sum_direct(P, w)
        method = "direct"
    else:
        sq = (P * P).sum(axis=1)
        pair = 2.0 * float(w @ sq) - 2.0 * float(mean @ mean)
        method = "moments"
    eld = float(w @ ((P - free) ** 2).sum(axis=1))
    bits = int(round(np.log2(len(P)))) if len(P) else 0
    return Expectations(pair, var, mean, eld, bits, float(w.sum()), method)


# --- scalar reference enumerator -------------------------------------------


def _sig(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def scalar_logits(params: dict[str, list], cfg: LmConfig, ids: list[int], bits: tuple[float, ...] = (),
                  layout=()) -> list[list[float]]:
    """Per-step logits computed with plain Python arithmetic."""
    masks = {}
    for key, scheme, off, reps, width in layout:
        masks[key] = [list(bits[off + r * width: off + (r + 1) * width]) for r in range(reps)]

    def mask_at(key, t):
        seq = masks.get(key)
        if seq is None:
            return None
        return seq[t] if len(seq) > 1 else seq[0]

    emb = params["embedding"]
    sizes = cfg.layer_sizes()
    state = [([0.0] * h, [0.0] * h) for _, h in sizes]
    history = []
    for t, tok in enumerate(ids):
        x = list(emb[tok])
        m = mask_at(("input", 0), t)
        if m is not None:
            x = [a * b for a, b in zip(x, m)]
        for layer, (d_in, h) in enumerate(sizes):
            w_ih, w_hh, bias = params[f"lstm{layer}.w_ih"], params[f"lstm{layer}.w_hh"], params[f"lstm{layer}.bias"]
            hp, cp = state[layer]
            gates = []
            for col in range(4 * h):
                acc = bias[col]
                for r in range(d_in):
                    acc += x[r] * w_ih[r][col]
                for r in range(h):
                    acc += hp[r] * w_hh[r][col]
                gates.append(acc)
            hn, cn = [], []
            for u in range(h):
                i, f = _sig(gates[u]), _sig(gates[h + u])
                g, o = math.tanh(gates[2 * h + u]), _sig(gates[3 * h + u])
                c = f * cp[u] + i * g
                cn.append(c)
                hn.append(o * math.tanh(c))
            state[layer] = (hn, cn)
            last = layer == len(sizes) - 1
            m = mask_at(("output" if last else "hidden", layer), t)
            x = [a * b for a, b in zip(hn, m)] if m is not None else list(hn)
        if cfg.tie_embeddings:
            dec = [[emb[v][r] for v in range(cfg.vocab_size)] for r in range(len(x))]
        else:
            dec = params["decoder.weight"]
        history.append([params["decoder.bias"][v] + sum(x[r] * dec[r][v] for r in range(len(x)))
                        for v in range(cfg.vocab_size)])
    return history


def naive_expectations(model: LmModel, ids) -> Expectations:
    """Independent scalar enumeration; practical up to roughly 10 bits."""
    _check_supported(model)
    ids = [int(i) for i in np.asarray(ids).reshape(-1)]
    layout, rates = _bit_layout(model, len(ids))
    if len(set(rates)) > 1:
        raise ValueError("scalar enumerator assumes one shared rate")
    rate = rates[0] if rates else 0.0
    params = {k: v.data.tolist() for k, v in model.params.items()}
    table = enumerate_all_naive(rate, len(rates))
    preds = [(scalar_logits(params, model.config, ids, bits, layout)[-1], p) for bits, p in table]
    m = model.config.vocab_size
    mean = [sum(p * pr[q] for pr, p in preds) for q in range(m)]
    var = [sum(p * (pr[q] - mean[q]) ** 2 for pr, p in preds) for q in range(m)]
    pair = 0.0
    for (a, pa), (b, pb) in itertools.product(preds, repeat=2):
        pair += pa * pb * sum((x - y) ** 2 for x, y in zip(a, b))
    free = scalar_logits(params, model.config, ids, tuple([1.0] * len(rates)), layout)[-1]
    eld = sum(p * sum((x - y) ** 2 for x, y in zip(a, free)) for a, p in preds)
    return Expectations(pair, np.array(var), np.array(mean), eld, len(rates),
                        sum(p for _, p in preds), "scalar")


# --- random tiny networks and checks ----------------------------------------


@dataclass
class TinyNet:
    model: LmModel
    ids: np.ndarray
    seed: int
    rate: float
    granularity: str

    def describe(self) -> dict:
        c = self.model.config
        return dict(seed=self.seed, rate=self.rate, granularity=self.granularity, vocab=c.vocab_size,
                    hidden=c.embed_dim, layers=c.num_layers, steps=len(self.ids))


def random_tiny_net(seed: int, rate: float, granularity: str = "per_step", max_bits: int = 12,
                    weight_scale: float = 1.5) -> TinyNet:
    """A random tied 1-layer LSTM LM (vocab <= 3, <= 4 units) within the bit budget."""
    rng = make_rng((ORACLE_STREAM, seed))
    for _ in range(100):
        vocab = int(rng.integers(2, 4))
        d = int(rng.integers(1, 5))
        steps = int(rng.integers(1, 4))
        reps = steps if granularity == "per_step" else 1
        if 2 * d * reps <= max_bits:
            break
    else:  # pragma: no cover - the loop always finds d=1 eventually
        raise RuntimeError("could not fit a tiny net in the bit budget")
    cfg = LmConfig(vocab_size=vocab, embed_dim=d, hidden_dim=d, num_layers=1, tie_embeddings=True,
                   dropout_embedding=0.0, dropout_input=rate, dropout_hidden=0.0, dropout_output=rate,
                   dropout_weight=0.0, granularity=granularity)
    model = LmModel(cfg, init=False)
    for p in model.params.values():
        p.data = rng.normal(0.0, weight_scale, p.shape)
    ids = rng.integers(0, vocab, steps)
    return TinyNet(model, ids, seed, rate, granularity)


@dataclass
class Report:
    claim: str
    checks: int = 0
    violations: list[dict] = field(default_factory=list)
    worst_deviation: float = 0.0
    worst_config: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.violations

    def as_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d

    def raise_if_failed(self) -> None:
        if self.violations:
            v = self.violations[0]
            raise OracleViolation(f"{self.claim}: {len(self.violations)} violation(s); first: {v}")


def check_remark1(nets: list[TinyNet], rtol: float = 1e-9) -> Report:
    """Pair expectation equals twice the summed per-unit variance."""
    rep = Report("variance_identity")
    for net in nets:
        ex = exact_expectations(net.model, net.ids)
        rhs = 2.0 * float(ex.per_unit_var.sum())
        dev = abs(ex.e_pair_sq_dist - rhs) / max(1.0, abs(ex.e_pair_sq_dist))
        rep.checks += 1
        if dev >= rep.worst_deviation:
            rep.worst_deviation, rep.worst_config = dev, net.describe()
        if dev > rtol:
            rep.violations.append({**net.describe(), "lhs": ex.e_pair_sq_dist, "rhs": rhs, "deviation": dev})
    return rep


def check_prop1(nets: list[TinyNet], slack: float = 1e-12) -> Report:
    """Pair expectation is at most four times the ELD expectation."""
    rep = Report("eld_upper_bound")
    max_ratio = 0.0
    for net in nets:
        ex = exact_expectations(net.model, net.ids)
        lhs, rhs = ex.e_pair_sq_dist, 4.0 * ex.r_eld_tilde
        rep.checks += 1
        if rhs > 0:
            ratio = lhs / ex.r_eld_tilde
            if ratio >= max_ratio:
                max_ratio = ratio
                rep.worst_config = net.describe()
        excess = lhs - rhs
        rep.worst_deviation = max(rep.worst_deviation, excess)
        if excess > slack:
            rep.violations.append({**net.describe(), "lhs": lhs, "rhs": rhs})
    rep.extra["max_ratio"] = max_ratio
    return rep


def mc_estimator_consistency(net: TinyNet, n_samples: int = 100_000, seed: int = 0,
                             n_stderr: float = 5.0, chunk: int = 20_000) -> Report:
    """Mean of single-pair squared distances versus the exact expectation."""
    model, ids = net.model, np.asarray(net.ids).reshape(-1)
    _check_supported(model)
    ex = exact_expectations(model, ids)
    rep = Report("mc_estimator_consistency")
    rng_seed = (ORACLE_STREAM, net.seed, seed)
    plan_all = model.config.mask_plan(1)
    total = total_sq = 0.0
    done = 0
    part = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        plan = {k: v for k, v in model.config.mask_plan(n).items() if k in plan_all and k[0] in ROW_SITES}
        P = []
        for copy in (0, 1):
            masks = MaskSet.sample(plan, len(ids), (*rng_seed, part, copy))
            with T.no_grad():
                outs, _ = forward(model, np.repeat(ids[:, None], n, axis=1), masks)
            P.append(outs[-1].logits.data)
        r = ((P[0] - P[1]) ** 2).sum(axis=1)
        total += float(r.sum())
        total_sq += float((r * r).sum())
        done += n
        part += 1
    mean = total / done
    var = max(0.0, total_sq / done - mean * mean)
    stderr = math.sqrt(var / done)
    dev = abs(mean - ex.e_pair_sq_dist)
    rep.checks = 1
    rep.worst_deviation = dev
    rep.worst_config = net.describe()
    rep.extra.update(samples=done, mean=mean, exact=ex.e_pair_sq_dist, stderr=stderr,
                     z=dev / stderr if stderr > 0 else 0.0)
    ok = dev <= n_stderr * stderr if stderr > 0 else dev <= 1e-12 * max(1.0, abs(ex.e_pair_sq_dist))
    if not ok:
        rep.violations.append({**net.describe(), "mean": mean, "exact": ex.e_pair_sq_dist, "stderr": stderr,
                               "hint": "statistical check; rerun with another seed to rule out a 5-sigma fluke"})
    return rep


def population(count: int, rates=(0.1, 0.5), granularities=("per_step", "per_sequence"),
               seed: int = 0, max_bits: int = 12) -> list[TinyNet]:
    nets = []
    combos = list(itertools.product(rates, granularities))
    for i in range(count):
        rate, gran = combos[i % len(combos)]
        nets.append(random_tiny_net(seed * 1_000_003 + i, rate, gran, max_bits))
    return nets


def verify(bits: int = 12, trials: int = 100, seed: int = 0, mc_samples: int = 100_000) -> dict:
    """Run every oracle check and return a JSON-serializable report."""
    if bits > MAX_ENUM_BITS:
        raise BitBudgetError(f"--bits {bits} exceeds the enumeration budget of {MAX_ENUM_BITS}")
    if bits < 2:
        raise ValueError("need at least 2 mask bits")
    nets = population(trials, seed=seed, max_bits=bits)
    r1 = check_remark1(nets)
    p1 = check_prop1(nets)
    mc_net = max(nets[: min(len(nets), 10)], key=lambda n: exact_expectations(n.model, n.ids).e_pair_sq_dist)
    mc = mc_estimator_consistency(mc_net, mc_samples, seed)
    reports = [r1, p1, mc]
    return {"passed": all(r.passed for r in reports), "bits": bits, "trials": trials, "seed": seed,
            "claims": {r.claim: r.as_dict() for r in reports}}


def scheme_for(rate: float, granularity: str = "per_step") -> DropScheme:
    return DropScheme(rate, granularity)
