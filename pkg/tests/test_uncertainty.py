import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distill_uq.uncertainty import (LN2, ExitPredictions, WeightKind, argmax, disagreement, dump_prediction_json,
                                    entropy, jsd, kl_divergence, load_prediction_json, quantify, report,
                                    report_csv, report_header, uc, uc_max, uc_norm, weight, weight_linear,
                                    weight_nonlinear, weighted_disagreement_kl)

DATA = Path(__file__).parent / "data"


def _kl_loop(p, q):
    """Textbook double-check with an explicit loop."""
    return sum(pi * math.log(pi / max(qi, 1e-12)) for pi, qi in zip(p, q) if pi > 0)


def test_kl_examples():
    assert kl_divergence([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert kl_divergence([0.3, 0.4, 0.3], [0.2, 0.5, 0.3]) == pytest.approx(0.0324, abs=5e-5)
    assert kl_divergence([0.301, 0.414, 0.286], [0.3, 0.32, 0.38]) == pytest.approx(0.0263, abs=5e-5)
    p, q = [0.1, 0.6, 0.3], [0.5, 0.25, 0.25]
    assert kl_divergence(p, q) == pytest.approx(_kl_loop(p, q), abs=1e-15)


def test_kl_zero_and_length_mismatch():
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(LN2, abs=1e-15)
    assert np.isfinite(kl_divergence([0.5, 0.5], [1.0, 0.0]))
    with pytest.raises(ValueError):
        kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])


def test_jsd_examples():
    assert jsd([0.4, 0.6], [0.4, 0.6]) == 0.0
    assert jsd([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.log(2), abs=1e-15)
    assert jsd([0.6816, 0.3184], [0.4754, 0.5246]) == pytest.approx(0.0220, abs=5e-4)


def test_entropy_examples():
    assert entropy([1.0, 0.0]) == 0.0
    assert entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-15)


def test_argmax_ties_go_to_lowest_index():
    assert argmax([0.5, 0.5]) == 0
    assert argmax([0.2, 0.4, 0.4]) == 1


def test_weight_examples():
    assert weight_linear(1, 3, False) == 1.0
    assert weight_nonlinear(2, 3, False) == 1.0
    assert weight_linear(1, 3, True) == pytest.approx(4 / 3, abs=1e-15)
    assert weight_linear(2, 3, True) == pytest.approx(5 / 3, abs=1e-15)
    assert weight_nonlinear(1, 3, True) == pytest.approx(2 - math.exp(-1), abs=1e-15)
    assert weight_nonlinear(1, 3, True) == pytest.approx(1.6321, abs=5e-5)
    assert weight_nonlinear(2, 3, True) == pytest.approx(1.8647, abs=5e-5)
    assert weight("linear", 1, 3, True) == weight_linear(1, 3, True)


@pytest.mark.parametrize("l,m", [(0, 3), (3, 3), (1, 1)])
def test_weight_out_of_range(l, m):
    with pytest.raises(ValueError):
        weight_linear(l, m, True)
    with pytest.raises(ValueError):
        weight_nonlinear(l, m, True)


def test_uc_max_examples():
    assert uc_max(3, WeightKind.LINEAR) == pytest.approx(3 * math.log(2), abs=1e-12)
    assert uc_max(3, WeightKind.LINEAR) == pytest.approx(2.0794, abs=5e-5)
    assert uc_max(3, WeightKind.NONLINEAR) == pytest.approx(2.4238, abs=5e-5)
    assert uc_max(2, WeightKind.LINEAR) == pytest.approx(1.5 * math.log(2), abs=1e-15)
    with pytest.raises(ValueError):
        uc_max(1, WeightKind.LINEAR)


def _table3():
    return load_prediction_json(DATA / "table3.json")[1]


def test_table1_disagreement():
    doc = json.loads((DATA / "table1.json").read_text())
    for patient in doc["patients"]:
        *models, ref = patient["models"]
        value = disagreement(models + [ref], ref)
        assert abs(value - patient["disagreement"]) <= 1e-3


def test_table3_to_table4():
    p1, p2 = _table3()
    assert disagreement(p1.student_probs, p1.teacher_probs) == pytest.approx(0.1082, abs=5e-4)
    assert disagreement(p2.student_probs, p2.teacher_probs) == pytest.approx(0.1082, abs=5e-4)
    for kind in WeightKind:
        assert uc(p1, kind) == pytest.approx(0.0207, abs=5e-4)
    assert uc(p2, "linear") == pytest.approx(0.0438, abs=5e-4)
    assert uc(p2, "nonlinear") == pytest.approx(0.0498, abs=5e-4)
    assert uc_norm(p1, "linear") == pytest.approx(0.0099, abs=5e-4)
    assert uc_norm(p1, "nonlinear") == pytest.approx(0.0085, abs=5e-4)
    assert uc_norm(p2, "linear") == pytest.approx(0.0211, abs=5e-4)
    assert uc_norm(p2, "nonlinear") == pytest.approx(0.0205, abs=5e-4)


def test_weighted_kl_composition():
    _, p2 = _table3()
    c1, c2 = p2.student_probs
    expected = 4 / 3 * kl_divergence(c1, p2.teacher_probs) + 5 / 3 * kl_divergence(c2, p2.teacher_probs)
    assert weighted_disagreement_kl(p2, "linear") == pytest.approx(expected, abs=1e-15)
    p1, _ = _table3()
    assert weighted_disagreement_kl(p1, "nonlinear") == pytest.approx(
        disagreement(p1.student_probs, p1.teacher_probs), abs=1e-15)


def test_identical_exits_give_zero_uncertainty():
    p = [0.2, 0.5, 0.3]
    row = report([ExitPredictions([p, p], p)])[0]
    assert row.disagreement == row.uc_lin == row.uc_nonlin == row.ucnorm_lin == row.ucnorm_nonlin == 0.0
    assert row.entropy == pytest.approx(entropy(p))
    assert row.predicted == [1, 1, 1]


def test_uc_norm_reaches_one_at_maximal_disagreement():
    preds = ExitPredictions([[1.0, 0.0], [1.0, 0.0]], [0.0, 1.0])
    for kind in WeightKind:
        assert uc_norm(preds, kind) == pytest.approx(1.0, abs=1e-12)


def test_exit_predictions_validation():
    with pytest.raises(ValueError):
        ExitPredictions([], [0.5, 0.5])
    with pytest.raises(ValueError):
        ExitPredictions([[0.5, 0.6]], [0.5, 0.5])
    with pytest.raises(ValueError):
        ExitPredictions([[0.5, 0.5]], [0.2, 0.3, 0.5])
    assert ExitPredictions.from_exits([[0.5, 0.5], [0.1, 0.9], [0.3, 0.7]]).m == 3


def _dist(k):
    return st.lists(st.floats(1e-6, 1.0), min_size=k, max_size=k).map(lambda v: np.array(v) / np.sum(v))


@st.composite
def exit_predictions(draw):
    k = draw(st.integers(2, 5))
    m = draw(st.integers(2, 6))
    return ExitPredictions([draw(_dist(k)) for _ in range(m - 1)], draw(_dist(k)))


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6).flatmap(lambda k: st.tuples(_dist(k), _dist(k))))
def test_divergence_properties(pq):
    p, q = pq
    assert kl_divergence(p, q) >= -1e-15
    assert abs(jsd(p, q) - jsd(q, p)) < 1e-15
    assert -1e-15 <= jsd(p, q) <= LN2 + 1e-12


@settings(max_examples=200, deadline=None)
@given(exit_predictions())
def test_quantify_matches_composition(preds):
    t = argmax(preds.teacher_probs)
    for kind in WeightKind:
        composed = sum(weight(kind, l, preds.m, argmax(p) != t) * jsd(p, preds.teacher_probs)
                       for l, p in enumerate(preds.student_probs, start=1))
        assert abs(quantify(preds, kind) - composed) < 1e-12
        assert quantify(preds, kind) == uc(preds, kind)
        assert 0.0 <= uc_norm(preds, kind) <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12))
def test_weights_increase_with_depth(m):
    for fn in (weight_linear, weight_nonlinear):
        w = [fn(l, m, True) for l in range(1, m)]
        assert all(a < b for a, b in zip(w, w[1:]))
        assert all(1.0 <= x <= 2.0 for x in w)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.floats(0.1, 10))
def test_argmax_invariant_to_temperature(logits, temperature):
    z = np.array(logits)
    p = np.exp(z - z.max())
    q = np.exp(z / temperature - (z / temperature).max())
    assert argmax(p / p.sum()) == argmax(q / q.sum())


def test_report_csv_columns_and_json_round_trip(tmp_path):
    samples = _table3()
    rows = report(samples)
    text = report_csv(rows, 3)
    lines = text.splitlines()
    assert lines[0].split(",") == report_header(3)
    assert lines[1].split(",")[:4] == ["0", "0", "0", "0"]
    assert lines[2].split(",")[:4] == ["1", "0", "0", "1"]
    lin = report_csv(rows, 3, "linear").splitlines()[0].split(",")
    assert "uc_nonlin" not in lin and "ucnorm_lin" in lin
    assert report_csv([], 3) == ",".join(report_header(3)) + "\n"
    with pytest.raises(ValueError):
        report_csv(rows, 3, "quadratic")
    path = dump_prediction_json(samples, tmp_path / "p.json")
    m, back = load_prediction_json(path)
    assert m == 3 and report_csv(report(back), 3) == text
