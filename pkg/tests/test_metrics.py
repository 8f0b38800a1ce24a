import json
import math
import random

import numpy as np
import pytest

from vergepipe.metrics import (
    ConfusionMatrix,
    confusion,
    export_report,
    macro_average,
    pr_points,
    read_predictions,
    report,
    report_from_dict,
    report_to_dict,
    weighted_average,
    weighted_kappa,
)


def cm_from(rows) -> ConfusionMatrix:
    return ConfusionMatrix(np.array(rows, dtype=np.int64))


# ---------------------------------------------------------------------------
# Confusion matrix
# ---------------------------------------------------------------------------


def test_confusion_perfect_predictions_diagonal():
    y = [1, 2, 3, 4, 1, 2]
    cm = confusion(y, y, k=4)
    assert np.array_equal(cm.counts, np.diag([2, 2, 1, 1]))


def test_confusion_all_predicted_first_class():
    y_true = [1, 2, 3, 4, 4]
    cm = confusion(y_true, [1] * 5, k=4)
    assert cm.counts[:, 0].tolist() == [1, 1, 1, 2]
    assert cm.counts[:, 1:].sum() == 0


def test_confusion_against_pair_counting_oracle():
    rng = random.Random(0)
    y_true = [rng.randint(1, 4) for _ in range(200)]
    y_pred = [rng.randint(1, 4) for _ in range(200)]
    cm = confusion(y_true, y_pred, k=4)
    for i in range(1, 5):
        for j in range(1, 5):
            expected = sum(1 for t, p in zip(y_true, y_pred) if t == i and p == j)
            assert cm.counts[i - 1, j - 1] == expected
    assert cm.total == 200


def test_confusion_validation():
    with pytest.raises(ValueError):
        confusion([1, 2], [1], k=4)
    with pytest.raises(ValueError):
        confusion([], [], k=4)
    with pytest.raises(ValueError):
        confusion([1, 5], [1, 1], k=4)
    with pytest.raises(ValueError):
        confusion([1, 0], [1, 1], k=4)


# ---------------------------------------------------------------------------
# Report metrics
# ---------------------------------------------------------------------------


def test_macro_f1_table_anchor():
    macro = macro_average([0.93, 0.87, 0.78, 0.79])
    assert macro == pytest.approx(0.8425, abs=1e-9)
    assert f"{macro:.2f}" == "0.84"


def test_weighted_f1_table_anchor():
    weighted = weighted_average([0.93, 0.87, 0.78, 0.79], [690, 326, 109, 64])
    assert weighted == pytest.approx(0.892, abs=0.005)
    assert f"{weighted:.2f}" == "0.89"


def test_identity_matrix_all_ones():
    rep = report(cm_from([[1, 0], [0, 1]]))
    for m in rep.per_class:
        assert m.precision == 1.0 and m.recall == 1.0 and m.f1 == 1.0
        assert m.accuracy_pct == 100.0
    assert rep.overall_accuracy_pct == 100.0
    assert rep.kappa_quadratic == 1.0


def test_uniform_matrix_chance_agreement():
    rep = report(cm_from([[1, 1], [1, 1]]))
    assert rep.overall_accuracy_pct == pytest.approx(50.0)
    assert rep.kappa_quadratic == pytest.approx(0.0, abs=1e-12)


def test_report_on_perfect_labels_property():
    rng = random.Random(3)
    y = [rng.randint(1, 5) for _ in range(100)]
    rep = report(confusion(y, y, k=5))
    assert all(m.precision == 1.0 and m.recall == 1.0 and m.f1 == 1.0 for m in rep.per_class)


def test_trace_identity_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        counts = rng.integers(0, 50, size=(k, k))
        if counts.sum() == 0:
            counts[0, 0] = 1
        cm = ConfusionMatrix(counts)
        rep = report(cm)
        # trace/total equals the support-weighted mean recall exactly
        recalls = [m.recall for m in rep.per_class]
        supports = [m.support for m in rep.per_class]
        lhs = np.trace(cm.counts) / cm.total
        rhs = sum(r * s for r, s in zip(recalls, supports)) / sum(supports)
        assert lhs == pytest.approx(rhs, abs=1e-12)
        assert rep.weighted_recall == pytest.approx(lhs, abs=1e-12)


def test_permutation_leaves_accuracy_and_kappa_unchanged():
    rng = np.random.default_rng(5)
    counts = rng.integers(0, 30, size=(4, 4))
    counts[0, 0] += 1
    cm = ConfusionMatrix(counts)
    rep = report(cm)
    # reversing class order permutes rows/columns consistently
    flipped = ConfusionMatrix(counts[::-1, ::-1].copy())
    rep2 = report(flipped)
    assert rep2.overall_accuracy_pct == pytest.approx(rep.overall_accuracy_pct)
    assert rep2.kappa_quadratic == pytest.approx(rep.kappa_quadratic, abs=1e-12)
    assert [m.f1 for m in rep2.per_class] == pytest.approx(
        [m.f1 for m in rep.per_class][::-1]
    )


def test_kappa_marginal_product_is_zero():
    rng = np.random.default_rng(9)
    for _ in range(20):
        rows = rng.integers(1, 9, size=4)
        cols = rng.integers(1, 9, size=4)
        counts = np.outer(rows, cols)
        assert weighted_kappa(ConfusionMatrix(counts)) == pytest.approx(0.0, abs=1e-12)


def test_kappa_perfect_diagonal_is_one():
    assert weighted_kappa(cm_from([[5, 0, 0], [0, 2, 0], [0, 0, 9]])) == 1.0


def test_kappa_linear_variant():
    counts = cm_from([[8, 2, 0], [1, 7, 2], [0, 3, 7]])
    quad = weighted_kappa(counts, "quadratic")
    lin = weighted_kappa(counts, "linear")
    assert quad != lin
    with pytest.raises(ValueError):
        weighted_kappa(counts, "cubic")


def test_macro_equals_weighted_when_supports_equal():
    counts = cm_from([[8, 1, 1], [2, 7, 1], [1, 2, 7]])
    rep = report(counts)
    assert rep.macro_f1 == pytest.approx(rep.weighted_f1, abs=1e-12)
    assert rep.macro_precision == pytest.approx(rep.weighted_precision, abs=1e-12)


def test_per_class_accuracy_is_recall_pct():
    counts = cm_from([[94, 6], [10, 90]])
    rep = report(counts)
    assert rep.per_class[0].accuracy_pct == pytest.approx(94.0)
    assert rep.per_class[0].recall == pytest.approx(0.94)


def test_zero_support_class_flagged():
    rep = report(cm_from([[3, 0], [0, 0]]))
    empty = rep.per_class[1]
    assert empty.support == 0
    assert empty.recall == 0.0
    assert "recall" in empty.undefined


def test_empty_matrix_rejected():
    with pytest.raises(ValueError):
        report(cm_from([[0, 0], [0, 0]]))


# ---------------------------------------------------------------------------
# PR points
# ---------------------------------------------------------------------------


def brute_force_pr(y_true, scores, c):
    """Enumerate all thresholds for one class."""
    class_scores = [row[c - 1] for row in scores]
    positives = sum(1 for t in y_true if t == c)
    points = []
    for threshold in sorted(set(class_scores), reverse=True):
        tp = fp = 0
        for s, t in zip(class_scores, y_true):
            if s >= threshold:
                if t == c:
                    tp += 1
                else:
                    fp += 1
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / positives if positives else 0.0
        points.append((recall, precision))
    return points


def test_pr_perfectly_separable():
    y = [1, 1, 2, 2]
    scores = [[0.9, 0.1], [0.8, 0.2], [0.1, 0.9], [0.2, 0.8]]
    curves = pr_points(y, scores)
    for c in (1, 2):
        assert all(p.interpolated_precision == 1.0 for p in curves[c])


def test_pr_single_sample():
    curves = pr_points([1], [[0.7, 0.3]])
    assert len(curves[1]) == 1
    assert curves[1][0].recall == 1.0
    assert curves[2][0].recall == 0.0


def test_pr_against_brute_force():
    rng = random.Random(17)
    y = [rng.randint(1, 3) for _ in range(50)]
    scores = [[rng.random() for _ in range(3)] for _ in range(50)]
    curves = pr_points(y, scores)
    for c in (1, 2, 3):
        expected = brute_force_pr(y, scores, c)
        got = [(p.recall, p.precision) for p in curves[c]]
        assert got == pytest.approx(expected)
        # interpolated precision at r is the best precision at any recall >= r
        interp = [p.interpolated_precision for p in curves[c]]
        for p in curves[c]:
            assert p.interpolated_precision == pytest.approx(
                max(q.precision for q in curves[c] if q.recall >= p.recall)
            )
        assert interp == sorted(interp, reverse=True)


def test_pr_rejects_nan():
    with pytest.raises(ValueError):
        pr_points([1, 2], [[0.5, 0.5], [math.nan, 0.5]])


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------


def table_shaped_report():
    # per-class rows shaped like a four-class held-out evaluation
    counts = np.array(
        [
            [651, 30, 6, 3],
            [33, 283, 8, 2],
            [16, 9, 82, 2],
            [8, 4, 6, 46],
        ]
    )
    return report(ConfusionMatrix(counts))


def test_text_export_footer_rows():
    rep = table_shaped_report()
    text = export_report(rep, "text", class_names=["0 - 3", "4 - 7", "8 - 11", "12+"]).decode()
    assert "Accuracy" in text
    assert "Macro Avg." in text
    assert "Weighted Avg." in text
    assert "0 - 3" in text
    # percent formatting uses two decimals
    assert f"{rep.overall_accuracy_pct:.2f}" in text


def test_text_export_zero_support_footnote():
    rep = report(cm_from([[3, 0], [0, 0]]))
    text = export_report(rep, "text").decode()
    assert "*" in text
    assert "denominator is zero" in text


def test_json_round_trip():
    rep = table_shaped_report()
    data = json.loads(export_report(rep, "json").decode())
    again = report_from_dict(data)
    assert again == rep
    assert report_to_dict(again) == report_to_dict(rep)


def test_csv_export_has_rows():
    rep = table_shaped_report()
    lines = export_report(rep, "csv").decode().strip().splitlines()
    assert lines[0].startswith("class,")
    assert len(lines) == 1 + 4 + 4  # header, classes, footer rows
    with pytest.raises(ValueError):
        export_report(rep, "xml")


# ---------------------------------------------------------------------------
# Prediction CSV input
# ---------------------------------------------------------------------------


def test_read_predictions(tmp_path):
    path = tmp_path / "preds.csv"
    path.write_text(
        "sample_id,true_class,pred_class,score_1,score_2\n"
        "a,1,1,0.9,0.1\n"
        "b,2,1,0.6,0.4\n"
    )
    preds = read_predictions(path)
    assert preds.sample_ids == ["a", "b"]
    assert preds.y_true == [1, 2]
    assert preds.y_pred == [1, 1]
    assert preds.scores == [[0.9, 0.1], [0.6, 0.4]]


def test_read_predictions_without_scores(tmp_path):
    path = tmp_path / "preds.csv"
    path.write_text("sample_id,true_class,pred_class\na,1,1\n")
    preds = read_predictions(path)
    assert preds.scores is None


def test_read_predictions_rejects_bad_header(tmp_path):
    path = tmp_path / "preds.csv"
    path.write_text("id,actual,predicted\na,1,1\n")
    with pytest.raises(ValueError):
        read_predictions(path)
