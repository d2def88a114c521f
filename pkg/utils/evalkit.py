"""
Post-processing, detection metrics and pseudo-label analysis.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import median_filter as _scipy_median
from sklearn.metrics import f1_score

from utils.errors import ContractError, LoadError, ParameterError, PersistenceError

logger = logging.getLogger(__name__)


@dataclass
class EventList:
    """Per-category sorted, non-overlapping (onset, offset) frame intervals."""

    n_frames: int
    events: Dict[int, List[Tuple[int, int]]] = field(default_factory=dict)

    def for_category(self, category: int) -> List[Tuple[int, int]]:
        return self.events.get(category, [])

    @property
    def n_events(self) -> int:
        return sum(len(v) for v in self.events.values())

    @classmethod
    def from_label_matrix(cls, labels: np.ndarray) -> "EventList":
        """Events of a binary T x C matrix (maximal runs)."""
        return binarize_and_extract(np.asarray(labels, dtype=float), 0.5)


@dataclass
class CorrelationMatrix:
    values: np.ndarray  # (C + 1) x K, last row is "None" when include_none
    zero_variance: np.ndarray  # same shape, True where r was undefined
    column_order: np.ndarray  # prototype index per column
    include_none: bool = True

    @property
    def row_labels(self) -> List[str]:
        n_rows = self.values.shape[0]
        labels = [f"category_{c}" for c in range(n_rows - 1 if self.include_none else n_rows)]
        return labels + (["none"] if self.include_none else [])


def median_filter(probs: np.ndarray, window: int) -> np.ndarray:
    """
    Sliding median along time with edge replication.

    Args:
        probs (np.ndarray): [T] or [T, C] probabilities
        window (int): Odd window length

    Returns:
        np.ndarray: Filtered array of the same shape
    """
    if window < 1 or window % 2 == 0:
        raise ParameterError(f"median window must be an odd integer >= 1, got {window}")
    probs = np.asarray(probs, dtype=float)
    if window == 1:
        return probs.copy()
    size = (window,) + (1,) * (probs.ndim - 1)
    return _scipy_median(probs, size=size, mode="nearest")


def _runs(active: np.ndarray) -> List[Tuple[int, int]]:
    padded = np.concatenate([[0], active.astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(padded))
    return [(int(on), int(off)) for on, off in zip(edges[::2], edges[1::2])]


def binarize_and_extract(probs: np.ndarray, threshold: float) -> EventList:
    """Frames >= threshold become active; maximal active runs become events."""
    if not 0 < threshold < 1:
        raise ParameterError(f"threshold must be in (0, 1), got {threshold}")
    probs = np.asarray(probs, dtype=float)
    if probs.ndim == 1:
        probs = probs[:, None]
    active = probs >= threshold
    events = {c: _runs(active[:, c]) for c in range(probs.shape[1])}
    return EventList(n_frames=probs.shape[0], events={c: v for c, v in events.items() if v})


def per_category_f1(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Frame F1 per category over [..., C] binary arrays (frames pooled)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ContractError(f"Prediction shape {pred.shape} does not match truth {truth.shape}")
    n_classes = pred.shape[-1]
    y_true = truth.reshape(-1, n_classes).astype(int)
    y_pred = pred.reshape(-1, n_classes).astype(int)
    if n_classes == 1:
        # a single column is read as a binary target, not a multilabel one
        return np.array([f1_score(y_true[:, 0], y_pred[:, 0], average="binary", zero_division=1.0)])
    return f1_score(y_true, y_pred, average=None, zero_division=1.0)


def frame_macro_f1(pred: np.ndarray, truth: np.ndarray) -> float:
    """
    Macro F1 over categories with frames pooled across clips.

    A category with no positives in either pred or truth scores 1.

    Args:
        pred (np.ndarray): Binary [T, C] (or [B, T, C]) decisions
        truth (np.ndarray): Binary labels of the same shape

    Returns:
        float: Mean per-category F1
    """
    return float(np.mean(per_category_f1(pred, truth)))


def _intersection(a: Tuple[int, int], b: Tuple[int, int]) -> int:
    return max(0, min(a[1], b[1]) - max(a[0], b[0]))


def _match_counts(pred: EventList, truth: EventList, rho: float) -> Tuple[int, int, int]:
    """(matches, predicted events, true events) under greedy one-to-one matching."""
    if not 0 < rho <= 1:
        raise ParameterError(f"rho must be in (0, 1], got {rho}")
    matches = 0
    for category in set(pred.events) | set(truth.events):
        free = list(truth.for_category(category))
        for p_event in sorted(pred.for_category(category)):
            for i, t_event in enumerate(free):
                overlap = _intersection(p_event, t_event)
                if overlap >= rho * (t_event[1] - t_event[0]) and overlap >= rho * (p_event[1] - p_event[0]) and overlap > 0:
                    matches += 1
                    del free[i]
                    break
    return matches, pred.n_events, truth.n_events


def _f1_from_counts(matches: int, n_pred: int, n_truth: int) -> float:
    if n_pred == 0 and n_truth == 0:
        return 1.0
    return 2.0 * matches / (n_pred + n_truth)


def event_f1_intersection(pred: EventList, truth: EventList, rho: float = 0.5) -> float:
    """
    Event F1 under the two-sided intersection criterion.

    A predicted event matches a true event of the same category when their
    overlap covers at least ``rho`` of each; matching is greedy one-to-one in
    onset order.
    """
    return _f1_from_counts(*_match_counts(pred, truth, rho))


def corpus_event_f1(preds: Sequence[EventList], truths: Sequence[EventList], rho: float = 0.5) -> float:
    """Event F1 with match counts pooled over clips."""
    if len(preds) != len(truths):
        raise ContractError(f"{len(preds)} predicted clips vs {len(truths)} reference clips")
    totals = np.zeros(3, dtype=int)
    for pred, truth in zip(preds, truths):
        totals += np.array(_match_counts(pred, truth, rho))
    return _f1_from_counts(*(int(v) for v in totals))


def point_biserial_matrix(pseudo: np.ndarray, truth: np.ndarray, include_none: bool = True) -> CorrelationMatrix:
    """
    Pearson correlation between binary category indicators and pseudo labels.

    Args:
        pseudo (np.ndarray): [N, K] pseudo labels over the corpus frames
        truth (np.ndarray): [N, C] binary frame labels
        include_none (bool): Append the "no event active" indicator row

    Returns:
        CorrelationMatrix: (C [+1]) x K coefficients, undefined entries 0 and flagged
    """
    pseudo = np.asarray(pseudo, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pseudo.shape[0] != truth.shape[0]:
        raise ContractError(f"{pseudo.shape[0]} pseudo-label frames vs {truth.shape[0]} labeled frames")
    if include_none:
        truth = np.concatenate([truth, (truth.sum(axis=1) == 0).astype(float)[:, None]], axis=1)
    x = truth - truth.mean(axis=0)
    y = pseudo - pseudo.mean(axis=0)
    x_norm = np.sqrt((x ** 2).sum(axis=0))
    y_norm = np.sqrt((y ** 2).sum(axis=0))
    denom = np.outer(x_norm, y_norm)
    undefined = denom == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(undefined, 0.0, (x.T @ y) / np.where(undefined, 1.0, denom))
    return CorrelationMatrix(
        values=np.clip(r, -1.0, 1.0),
        zero_variance=undefined,
        column_order=np.arange(pseudo.shape[1]),
        include_none=include_none,
    )


def reorder_prototypes(matrix: CorrelationMatrix) -> Tuple[CorrelationMatrix, np.ndarray]:
    """
    Greedy column reordering so prototypes line up with categories.

    Each category row in turn takes the unassigned prototype with the highest
    correlation (lowest index on ties); leftover prototypes follow in index
    order. The "None" row does not claim a prototype.
    """
    n_rows, n_protos = matrix.values.shape
    n_categories = n_rows - 1 if matrix.include_none else n_rows
    remaining = list(range(n_protos))
    order = []
    for row in range(n_categories):
        if not remaining:
            break
        best = max(remaining, key=lambda k: (matrix.values[row, k], -k))
        order.append(best)
        remaining.remove(best)
    permutation = np.array(order + remaining, dtype=int)
    reordered = CorrelationMatrix(
        values=matrix.values[:, permutation],
        zero_variance=matrix.zero_variance[:, permutation],
        column_order=matrix.column_order[permutation],
        include_none=matrix.include_none,
    )
    return reordered, permutation


def prototypes_above(matrix: CorrelationMatrix, threshold: float) -> Dict[str, List[int]]:
    """Prototype indices per row whose correlation reaches ``threshold``."""
    return {
        label: [int(matrix.column_order[k]) for k in np.flatnonzero(matrix.values[row] >= threshold)]
        for row, label in enumerate(matrix.row_labels)
    }


def save_correlation_matrix(path: str, matrix: CorrelationMatrix) -> None:
    frame = pd.DataFrame(
        matrix.values,
        index=matrix.row_labels,
        columns=[f"proto_{int(k)}" for k in matrix.column_order],
    )
    try:
        frame.to_csv(path, float_format="%.17g")
    except OSError as e:
        raise PersistenceError(f"Cannot write {path}: {e}") from e


def export_timeline(path: str, pseudo: np.ndarray, truth: np.ndarray) -> None:
    """
    Plot-ready per-frame CSV: frame, gamma_0..gamma_{K-1}, truth_0..truth_{C-1}.

    Args:
        path (str): Destination file
        pseudo (np.ndarray): [T, K] pseudo labels of one clip
        truth (np.ndarray): [T, C] binary labels of the same clip
    """
    pseudo = np.asarray(pseudo, dtype=float)
    truth = np.asarray(truth)
    if pseudo.shape[0] != truth.shape[0]:
        raise ContractError(f"Timeline inputs disagree: {pseudo.shape[0]} vs {truth.shape[0]} frames")
    frame = pd.DataFrame({"frame": np.arange(pseudo.shape[0])})
    for k in range(pseudo.shape[1]):
        frame[f"gamma_{k}"] = pseudo[:, k]
    for c in range(truth.shape[1]):
        frame[f"truth_{c}"] = truth[:, c].astype(int)
    try:
        frame.to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        raise PersistenceError(f"Cannot write timeline {path}: {e}") from e


def load_timeline(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of export_timeline: (pseudo [T, K], truth [T, C])."""
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as e:
        raise LoadError(f"Cannot read timeline {path}: {e}") from e
    gamma = [c for c in frame.columns if c.startswith("gamma_")]
    truth = [c for c in frame.columns if c.startswith("truth_")]
    return frame[gamma].to_numpy(dtype=float), frame[truth].to_numpy(dtype=int)


def postprocess(probs: np.ndarray, threshold: float, median: bool, window: int) -> np.ndarray:
    """Optional median filter then threshold; [..., T, C] probabilities -> binary."""
    probs = np.asarray(probs, dtype=float)
    if median and window > 1:
        probs = np.stack([median_filter(p, window) for p in probs.reshape(-1, *probs.shape[-2:])]).reshape(probs.shape)
    return (probs >= threshold).astype(np.uint8)


def detection_metrics(
    probs: np.ndarray,
    truth: np.ndarray,
    threshold: float = 0.5,
    median: bool = True,
    window: int = 7,
    rho: float = 0.5,
) -> Dict[str, object]:
    """
    Frame and event scores of a batch of clips.

    Args:
        probs (np.ndarray): [B, T, C] frame probabilities
        truth (np.ndarray): [B, T, C] binary frame labels

    Returns:
        dict: frame_macro_f1, event_f1 and per-category frame F1
    """
    probs = np.asarray(probs, dtype=float)
    truth = np.asarray(truth)
    if probs.shape != truth.shape:
        raise ContractError(f"Probabilities {probs.shape} do not match labels {truth.shape}")
    decisions = postprocess(probs, threshold, median, window)
    preds = [EventList.from_label_matrix(d) for d in decisions]
    truths = [EventList.from_label_matrix(t) for t in truth]
    return {
        "frame_macro_f1": frame_macro_f1(decisions, truth),
        "event_f1": corpus_event_f1(preds, truths, rho),
        "per_category_f1": per_category_f1(decisions, truth).tolist(),
    }


def write_metrics_report(out_dir: str, metrics: Dict[str, object], prefix: str = "metrics") -> Tuple[str, str]:
    """
    Write ``<prefix>.txt`` (key: value per line) and ``<prefix>.csv``.

    Returns:
        (str, str): Paths of the text and CSV reports
    """
    os.makedirs(out_dir, exist_ok=True)
    flat: Dict[str, object] = {}
    for key, value in metrics.items():
        if isinstance(value, (list, tuple, np.ndarray)):
            for i, v in enumerate(value):
                flat[f"{key}_{i}"] = float(v)
        else:
            flat[key] = value
    text_path = os.path.join(out_dir, f"{prefix}.txt")
    csv_path = os.path.join(out_dir, f"{prefix}.csv")
    try:
        with open(text_path, "w", encoding="utf-8") as f:
            for key, value in flat.items():
                f.write(f"{key}: {value}\n")
        pd.DataFrame([flat]).to_csv(csv_path, index=False)
    except OSError as e:
        raise PersistenceError(f"Cannot write metrics report in {out_dir}: {e}") from e
    return text_path, csv_path
