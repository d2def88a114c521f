import itertools

import numpy as np
import pandas as pd
import pytest
from scipy.stats import pearsonr

from utils.errors import ContractError, ParameterError
from utils.evalkit import (
    EventList,
    binarize_and_extract,
    corpus_event_f1,
    detection_metrics,
    event_f1_intersection,
    export_timeline,
    frame_macro_f1,
    load_timeline,
    median_filter,
    point_biserial_matrix,
    postprocess,
    prototypes_above,
    reorder_prototypes,
    save_correlation_matrix,
    write_metrics_report,
)


def test_median_filter_examples():
    x = np.random.default_rng(0).random(9)
    np.testing.assert_array_equal(median_filter(x, 1), x)
    np.testing.assert_array_equal(median_filter([0.0, 1.0, 0.0], 3), [0.0, 0.0, 0.0])
    np.testing.assert_array_equal(median_filter(np.full(6, 0.3), 5), np.full(6, 0.3))


def test_median_filter_is_per_category():
    probs = np.zeros((7, 2))
    probs[3, 0] = 1.0
    probs[2:5, 1] = 1.0
    out = median_filter(probs, 3)
    assert not out[:, 0].any()
    np.testing.assert_array_equal(out[:, 1], probs[:, 1])


@pytest.mark.parametrize("window", [0, 2, 4])
def test_median_filter_rejects_even_window(window):
    with pytest.raises(ParameterError):
        median_filter(np.zeros(5), window)


def test_binarize_and_extract_examples():
    assert binarize_and_extract(np.full((12, 2), 0.1), 0.5).n_events == 0
    run = np.zeros(12)
    run[5:9] = 0.8
    assert binarize_and_extract(run, 0.5).events == {0: [(5, 9)]}
    alternating = np.tile([0.9, 0.1], 4)
    assert binarize_and_extract(alternating, 0.5).for_category(0) == [(0, 1), (2, 3), (4, 5), (6, 7)]
    with pytest.raises(ParameterError):
        binarize_and_extract(run, 1.0)


def test_frame_macro_f1_examples():
    truth = np.zeros((6, 2), dtype=int)
    truth[1:3, 0] = truth[4, 1] = 1
    assert frame_macro_f1(truth, truth) == 1.0
    assert frame_macro_f1(1 - truth, truth) == 0.0

    truth = np.array([[1], [1], [0], [0]])
    pred = np.array([[1], [0], [1], [0]])
    assert frame_macro_f1(pred, truth) == pytest.approx(0.5)
    with pytest.raises(ContractError):
        frame_macro_f1(pred, truth[:3])


def test_frame_macro_f1_empty_category_scores_one():
    truth = np.zeros((5, 2), dtype=int)
    truth[:2, 0] = 1
    assert frame_macro_f1(truth, truth) == 1.0


def _events(category_events, n_frames=40):
    return EventList(n_frames, {c: list(v) for c, v in category_events.items()})


def test_event_f1_examples():
    events = _events({0: [(2, 8), (20, 30)], 1: [(5, 9)]})
    for rho in (0.1, 0.5, 1.0):
        assert event_f1_intersection(events, events, rho) == 1.0
    assert event_f1_intersection(_events({0: [(0, 5)]}), _events({0: [(10, 15)]})) == 0.0
    assert event_f1_intersection(_events({0: [(0, 10)]}), _events({0: [(0, 5)]}), 0.5) == 1.0
    assert event_f1_intersection(_events({0: [(0, 10)]}), _events({0: [(0, 4)]}), 0.5) == 0.0
    assert event_f1_intersection(_events({}), _events({})) == 1.0
    with pytest.raises(ParameterError):
        event_f1_intersection(events, events, 0.0)


def test_event_f1_matching_is_one_to_one_and_per_category():
    truth = _events({0: [(0, 10)]})
    doubled = _events({0: [(0, 10), (0, 10)]})
    assert event_f1_intersection(doubled, truth) == pytest.approx(2 / 3)
    assert event_f1_intersection(_events({1: [(0, 10)]}), truth) == 0.0


def test_corpus_event_f1_pools_counts():
    preds = [_events({0: [(0, 10)]}), _events({0: [(0, 5)]})]
    truths = [_events({0: [(0, 10)]}), _events({})]
    assert corpus_event_f1(preds, truths) == pytest.approx(2 * 1 / 3)
    with pytest.raises(ContractError):
        corpus_event_f1(preds, truths[:1])


def test_point_biserial_examples():
    matrix = point_biserial_matrix(np.array([[2.0], [1.0], [0.0]]), np.array([[1], [0], [0]]), include_none=False)
    assert matrix.values[0, 0] == pytest.approx(0.8660254, abs=1e-6)

    truth = np.array([[1], [0], [1], [0], [0]])
    pseudo = np.column_stack([truth[:, 0].astype(float), np.full(5, 0.4)])
    matrix = point_biserial_matrix(pseudo, truth)
    assert matrix.values[0, 0] == pytest.approx(1.0)
    assert matrix.values[1, 0] == pytest.approx(-1.0)  # none row
    assert matrix.values[0, 1] == 0.0 and matrix.zero_variance[0, 1]
    assert matrix.row_labels == ["category_0", "none"]


def test_point_biserial_matches_pearson():
    rng = np.random.default_rng(0)
    truth = (rng.random((200, 3)) < 0.3).astype(int)
    pseudo = rng.dirichlet(np.ones(4), size=200)
    matrix = point_biserial_matrix(pseudo, truth)
    for c in range(3):
        for k in range(4):
            assert matrix.values[c, k] == pytest.approx(pearsonr(truth[:, c], pseudo[:, k])[0], abs=1e-10)
    none = (truth.sum(axis=1) == 0).astype(int)
    assert matrix.values[3, 2] == pytest.approx(pearsonr(none, pseudo[:, 2])[0], abs=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_reorder_recovers_planted_permutation(seed):
    rng = np.random.default_rng(seed)
    k = 5
    planted = rng.permutation(k)
    values = rng.uniform(-0.1, 0.1, size=(k + 1, k))
    values[np.arange(k), planted] = 0.9
    matrix = point_biserial_matrix(np.zeros((2, k)), np.zeros((2, k)))
    matrix.values = values
    _, permutation = reorder_prototypes(matrix)
    best = max(itertools.permutations(range(k)), key=lambda p: sum(values[c, p[c]] for c in range(k)))
    assert permutation.tolist() == list(best) == planted.tolist()


def test_reorder_identity_and_leftovers():
    values = np.array([[0.9, 0.1, 0.0, 0.2], [0.1, 0.8, 0.0, 0.1], [0.0, 0.0, 0.0, 0.0]])
    matrix = point_biserial_matrix(np.zeros((2, 4)), np.zeros((2, 2)))
    matrix.values = values
    reordered, permutation = reorder_prototypes(matrix)
    assert permutation.tolist() == [0, 1, 2, 3]
    np.testing.assert_array_equal(reordered.values, values)
    assert prototypes_above(matrix, 0.5) == {"category_0": [0], "category_1": [1], "none": []}


def test_correlation_and_timeline_files(tmp_path):
    rng = np.random.default_rng(1)
    pseudo = rng.dirichlet(np.ones(3), size=10)
    truth = (rng.random((10, 2)) < 0.5).astype(int)
    matrix = point_biserial_matrix(pseudo, truth)
    save_correlation_matrix(str(tmp_path / "corr.csv"), matrix)
    frame = pd.read_csv(tmp_path / "corr.csv", index_col=0, float_precision="round_trip")
    np.testing.assert_array_equal(frame.to_numpy(), matrix.values)

    export_timeline(str(tmp_path / "t.csv"), pseudo, truth)
    back_pseudo, back_truth = load_timeline(str(tmp_path / "t.csv"))
    np.testing.assert_array_equal(back_pseudo, pseudo)
    np.testing.assert_array_equal(back_truth, truth)
    with pytest.raises(ContractError):
        export_timeline(str(tmp_path / "bad.csv"), pseudo, truth[:4])


def test_postprocess_and_detection_metrics():
    truth = np.zeros((2, 12, 2), dtype=int)
    truth[0, 2:8, 0] = 1
    truth[1, 5:10, 1] = 1
    probs = truth * 0.9 + 0.05
    probs[0, 10, 1] = 0.95  # isolated spike, removed by the median filter
    filtered = detection_metrics(probs, truth, median=True, window=3)
    assert filtered["frame_macro_f1"] == 1.0
    assert filtered["event_f1"] == 1.0
    raw = detection_metrics(probs, truth, median=False, window=3)
    assert raw["frame_macro_f1"] < 1.0
    assert postprocess(probs, 0.5, False, 3).dtype == np.uint8
    with pytest.raises(ContractError):
        detection_metrics(probs, truth[:1])


def test_write_metrics_report(tmp_path):
    text, table = write_metrics_report(str(tmp_path), {"frame_macro_f1": 0.5, "per_category_f1": [0.25, 0.75]})
    assert open(text, encoding="utf-8").read().splitlines() == [
        "frame_macro_f1: 0.5",
        "per_category_f1_0: 0.25",
        "per_category_f1_1: 0.75",
    ]
    assert list(pd.read_csv(table).columns) == ["frame_macro_f1", "per_category_f1_0", "per_category_f1_1"]
