import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fdlab import tensor as T
from fdlab.masks import MaskSet
from fdlab.model import LmConfig, LmModel, StepOutput, forward
from fdlab.regularizers import (
    RegularizerSpec,
    SiameseOutputs,
    cross_entropy_sum,
    eld_objective,
    eldm_objective,
    fd_objective,
    objective,
    pi_objective,
    r_ar,
    r_eld,
    r_fd,
    r_pr,
    r_tar,
    semi_supervised_objective,
)
from fdlab.tensor import ShapeError, Tensor

vec = arrays(np.float64, 4, elements=st.floats(-10, 10, allow_nan=False))


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def c(a):
    return T.constant(np.array(a, dtype=np.float64))


def outs(*logit_rows):
    return [StepOutput(logits=leaf(r), hidden=[leaf(np.zeros(2))], dropped=leaf(np.zeros(2))) for r in logit_rows]


# --- penalties ---------------------------------------------------------------


def test_r_fd_examples():
    assert r_fd(c([1, 2]), c([1, 2])).item() == 0.0
    assert r_fd(c([1, 0]), c([0, 1])).item() == 2.0
    assert r_fd(c([3, 4]), c([0, 0])).item() == 25.0
    with pytest.raises(ShapeError):
        r_fd(c([1, 2]), c([1, 2, 3]))


def test_r_fd_gradient_flows_into_both():
    a, b = leaf([1.0, 0.0]), leaf([0.0, 1.0])
    with T.Tape():
        T.backward(r_fd(a, b))
    np.testing.assert_array_equal(a.grad, [2.0, -2.0])
    np.testing.assert_array_equal(b.grad, [-2.0, 2.0])


def test_r_eld_examples_and_stop_gradient():
    assert r_eld(c([1, 1]), c([0, 0])).item() == 2.0
    a, b = leaf([1.0, 1.0]), leaf([0.0, 0.0])
    with T.Tape():
        T.backward(r_eld(a, b))
    np.testing.assert_array_equal(a.grad, [2.0, 2.0])
    assert b.grad is None


def test_r_ar_examples():
    assert r_ar(c([0, 0]), c([1, 1]), 2.0).item() == 0.0
    assert r_ar(c([1, 2]), c([1, 1]), 2.0).item() == 5.0
    assert r_ar(c([5, -7]), c([0, 0]), 3.0).item() == 0.0


def test_r_tar_examples():
    assert r_tar(c([1, 2]), c([1, 2]), 1.0).item() == 0.0
    assert r_tar(c([3]), c([1]), 1.0).item() == 4.0
    assert r_tar(c([3]), c([1]), 0.0).item() == 0.0


def test_r_pr_examples():
    assert r_pr(c([0, 0]), 1.0).item() == 0.0
    assert r_pr(c([1, 1]), 2.0).item() == 2.0


@settings(max_examples=200)
@given(vec, vec)
def test_fd_decomposition(p, q):
    lhs = r_fd(c(p), c(q)).item()
    rhs = float(p @ p + q @ q - 2 * p @ q)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


@given(vec, st.floats(0, 5))
def test_pr_is_self_term_of_decomposition(p, gamma):
    m = len(p)
    assert math.isclose(r_pr(c(p), gamma).item(), gamma / m * float(p @ p), rel_tol=1e-12, abs_tol=1e-300)


# --- spec validation ---------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ValueError):
        RegularizerSpec(("FD", "ELD"))
    with pytest.raises(ValueError):
        RegularizerSpec(("XX",))
    with pytest.raises(ValueError):
        RegularizerSpec(("FD",), kappa=-1)
    assert RegularizerSpec(("none",)).kinds == ()
    assert RegularizerSpec(("FD", "AR")).siamese == "FD"


# --- objectives --------------------------------------------------------------


def test_fd_objective_hand_example():
    sia = SiameseOutputs(outs([0.0, 0.0]), outs([1.0, 0.0]))
    val = fd_objective(sia, [0], kappa=0.2).item()
    expected = 0.5 * (math.log(2) + math.log(1 + math.exp(-1))) + 0.1
    assert abs(val - expected) < 1e-12
    assert abs(val - 0.60320) < 1e-5


def test_fd_kappa_zero_is_mean_of_losses():
    a, b = outs([0.3, -1.0], [2.0, 0.1]), outs([1.0, 0.5], [-0.2, 0.0])
    val = fd_objective(SiameseOutputs(a, b), [0, 1], kappa=0.0).item()
    ce = lambda o: cross_entropy_sum(o, [0, 1]).item()  # noqa: E731
    assert val == pytest.approx(0.5 * (ce(a) + ce(b)), rel=1e-15)


def test_identical_passes_reduce_to_single_copy():
    a = outs([0.3, -1.0], [2.0, 0.1])
    base = cross_entropy_sum(a, [0, 1]).item()
    assert fd_objective(SiameseOutputs(a, a), [0, 1], kappa=0.7).item() == pytest.approx(base, rel=1e-15)
    assert pi_objective(SiameseOutputs(a, a), [0, 1], kappa=0.7).item() == pytest.approx(base, rel=1e-15)


def test_pi_kappa_zero_single_copy_and_wiring():
    a, b = outs([0.3, -1.0]), outs([1.0, 0.5])
    assert pi_objective(SiameseOutputs(a, b), [0], kappa=0.0).item() == cross_entropy_sum(a, [0]).item()
    with T.Tape():
        T.backward(pi_objective(SiameseOutputs(a, b), [0], kappa=0.4))
    # copy j only sees the penalty: d/dp_j (k/m)||p_i - p_j||^2
    expected = -(0.4 / 2) * 2 * (a[0].logits.data - b[0].logits.data)
    np.testing.assert_allclose(b[0].logits.grad, expected, rtol=1e-15)


def test_eld_and_eldm_wiring():
    drop, free = outs([0.3, -1.0], [0.0, 2.0]), outs([1.0, 0.5], [0.4, 0.4])
    sia = SiameseOutputs(drop, outputs_free=free)
    tgt = [1, 0]
    eld = eld_objective(sia, tgt, kappa=0.3).item()
    eldm = eldm_objective(sia, tgt, kappa=0.3).item()
    ce_d, ce_f = cross_entropy_sum(drop, tgt).item(), cross_entropy_sum(free, tgt).item()
    # same penalty, different target-loss wiring: ELD = ce_d + P, ELDM = (ce_d + ce_f)/2 + P
    assert eldm - eld == pytest.approx(0.5 * (ce_f - ce_d), rel=1e-12)
    pen = objective(RegularizerSpec(("ELD",), kappa=0.3), sia, tgt).values["penalty"]
    pen_m = objective(RegularizerSpec(("ELDM",), kappa=0.3), sia, tgt).values["penalty"]
    assert pen == pen_m
    with T.Tape():
        T.backward(eld_objective(sia, tgt, kappa=0.3))
    assert all(o.logits.grad is None for o in free)


def test_eldm_gradient_in_free_pass_is_target_only():
    drop, free = outs([0.3, -1.0]), outs([1.0, 0.5])
    with T.Tape():
        T.backward(eldm_objective(SiameseOutputs(drop, outputs_free=free), [1], kappa=5.0))
    p = T.softmax_np(free[0].logits.data)
    np.testing.assert_allclose(free[0].logits.grad, 0.5 * (p - [0, 1]), rtol=1e-14)


def test_length_mismatch():
    with pytest.raises(ShapeError):
        SiameseOutputs(outs([0, 0]), outs([0, 0], [1, 1]))
    with pytest.raises(ShapeError):
        fd_objective(SiameseOutputs(outs([0, 0]), outs([0, 0])), [0, 1], kappa=1.0)


def test_fd_symmetry_and_kappa_scaling():
    a, b = outs([0.3, -1.0], [2.0, 0.1]), outs([1.0, 0.5], [-0.2, 0.0])
    tgt = [1, 0]
    ab = fd_objective(SiameseOutputs(a, b), tgt, kappa=0.25).item()
    ba = fd_objective(SiameseOutputs(b, a), tgt, kappa=0.25).item()
    assert ab == ba
    base = fd_objective(SiameseOutputs(a, b), tgt, kappa=0.0).item()
    double = fd_objective(SiameseOutputs(a, b), tgt, kappa=0.5).item()
    assert double - base == pytest.approx(2 * (ab - base), rel=1e-13)


def test_gradient_sharing_is_sum_of_copies():
    cfg = LmConfig(vocab_size=5, embed_dim=3, hidden_dim=3)
    model = LmModel(cfg, seed=4)
    ids, tgt = np.array([[0, 1], [2, 3]]), np.array([[1, 2], [3, 4]])
    mi, mj = MaskSet.sample(cfg.mask_plan(2), 2, 1), MaskSet.sample(cfg.mask_plan(2), 2, 2)
    spec = RegularizerSpec(("FD",), kappa=0.0)

    with T.Tape():
        oi, _ = forward(model, ids, mi)
        oj, _ = forward(model, ids, mj)
        T.backward(objective(spec, SiameseOutputs(oi, oj), tgt).loss)
    joint = {k: p.grad.copy() for k, p in model.params.items()}
    model.zero_grad()
    for masks in (mi, mj):
        with T.Tape():
            o, _ = forward(model, ids, masks)
            T.backward(T.mul(0.5 * 0.5, cross_entropy_sum(o, tgt)))
    for k, p in model.params.items():
        np.testing.assert_allclose(joint[k], p.grad, rtol=1e-12, atol=1e-15)


def test_ar_tar_pr_in_objective():
    h1, h2 = leaf([[1.0, 2.0]]), leaf([[3.0, 2.0]])
    steps = [StepOutput(leaf([[0.0, 1.0]]), [h1], h1), StepOutput(leaf([[1.0, 1.0]]), [h2], h2)]
    tgt = [[0], [1]]
    spec = RegularizerSpec(("AR", "TAR", "PR"), alpha=2.0, beta=1.0, gamma=2.0)
    vals = objective(spec, SiameseOutputs(steps), tgt).values
    assert vals["ar"] == pytest.approx((5 + 13) * 2 / 2)
    # first step compares with the zero state
    assert vals["tar"] == pytest.approx((1 + 4) / 2 + 4 / 2)
    assert vals["pr"] == pytest.approx(2 / 2 * (1 + 2))
    assert vals["loss"] == pytest.approx(vals["ce_i"] + vals["ar"] + vals["tar"] + vals["pr"])


def test_none_spec_has_no_penalty():
    a = outs([0.3, -1.0])
    parts = objective(RegularizerSpec(), SiameseOutputs(a), [0])
    assert parts.values["loss"] == parts.values["ce_i"]
    assert "penalty" not in parts.values


def test_mean_reduction_divides_target_loss_by_steps():
    a = outs([0.3, -1.0], [2.0, 0.1], [1.0, 1.0])
    s = objective(RegularizerSpec(), SiameseOutputs(a), [0, 1, 0], reduction="sum").values["loss"]
    m = objective(RegularizerSpec(), SiameseOutputs(a), [0, 1, 0], reduction="mean").values["loss"]
    assert m == pytest.approx(s / 3, rel=1e-15)


# --- semi-supervised ---------------------------------------------------------


def batched(seed):
    rng = np.random.default_rng(seed)
    return [StepOutput(leaf(rng.normal(size=(4, 3))), [leaf(np.zeros((4, 2)))], leaf(np.zeros((4, 2))))
            for _ in range(2)]


def test_semi_supervised_all_labeled_equals_standard():
    a, b = batched(0), batched(1)
    tgt = np.array([[0, 1, 2, 0], [1, 1, 0, 2]])
    spec = RegularizerSpec(("FD",), kappa=0.3)
    full = objective(spec, SiameseOutputs(a, b), tgt).values["loss"]
    semi = semi_supervised_objective(spec, SiameseOutputs(a, b), tgt, np.ones(4, bool)).values["loss"]
    assert semi == pytest.approx(full, rel=1e-15)


def test_semi_supervised_unlabeled_is_penalty_only():
    a, b = batched(0), batched(1)
    tgt = np.zeros((2, 4), dtype=int)
    spec = RegularizerSpec(("FD",), kappa=0.3)
    parts = semi_supervised_objective(spec, SiameseOutputs(a, b), tgt, np.zeros(4, bool))
    pen = sum(r_fd(x.logits, y.logits).item() for x, y in zip(a, b))
    assert parts.values["loss"] == pytest.approx(0.3 / (3 * 2) * pen / 4, rel=1e-13)


def test_semi_supervised_half_labeled():
    a, b = batched(2), batched(3)
    tgt = np.array([[0, 1, 2, 0], [1, 1, 0, 2]])
    lab = np.array([True, False, True, False])
    spec = RegularizerSpec(("FD",), kappa=0.3)
    got = semi_supervised_objective(spec, SiameseOutputs(a, b), tgt, lab).values["loss"]
    ce = 0.0
    for x, y in ((a, b), (b, a)):
        for o, t in zip(x, tgt):
            ce += 0.5 * T.softmax_cross_entropy(o.logits, t).data[lab].sum()
    pen = sum(r_fd(x.logits, y.logits).item() for x, y in zip(a, b))
    assert got == pytest.approx(ce / 4 + 0.3 / (3 * 2) * pen / 4, rel=1e-13)


def test_semi_supervised_warns_without_signal():
    a = batched(0)
    with pytest.warns(RuntimeWarning):
        semi_supervised_objective(RegularizerSpec(), SiameseOutputs(a), np.zeros((2, 4), int), np.zeros(4, bool))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        semi_supervised_objective(RegularizerSpec(("PI",), kappa=1.0), SiameseOutputs(a, batched(1)),
                                  np.zeros((2, 4), int), np.zeros(4, bool))
