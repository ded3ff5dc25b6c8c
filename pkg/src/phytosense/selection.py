"""Mutual-information ranking and sequential backward selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ingest import group_kfold

# train_fn(X_train, y_train) -> predict(X) -> labels
TrainFn = Callable[[np.ndarray, np.ndarray], Callable[[np.ndarray], np.ndarray]]


class SelectionError(RuntimeError):
    pass


def equal_frequency_bins(x, n_bins: int = 10) -> np.ndarray:
    """Rank-based equal-frequency bin index in ``[0, n_bins)``.

    Tied values share the bin of their lowest rank, so the binning (and hence
    the MI) is unchanged by any strictly increasing transform of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    ranks = np.searchsorted(np.sort(x), x, side="left")
    return ranks * n_bins // x.size


def mutual_information(x, labels, n_bins: int = 10) -> float:
    """Binned MI between a feature column and class labels, in nats."""
    x = np.asarray(x)
    labels = np.asarray(labels)
    if x.shape[0] != labels.shape[0]:
        raise ValueError("feature and labels differ in length")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    classes, y = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        return 0.0
    bx = equal_frequency_bins(x, n_bins)
    k = classes.size
    joint = np.bincount(bx * k + y, minlength=n_bins * k).reshape(n_bins, k) / x.shape[0]
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / (px @ py)[nz])))
    return max(mi, 0.0)


def mi_scores(values: np.ndarray, labels, n_bins: int = 10) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return np.array([mutual_information(values[:, j], labels, n_bins) for j in range(values.shape[1])])


def rank_by_mi(values: np.ndarray, labels, feature_names: Sequence[str], top_k: int) -> list[str]:
    """Feature names by descending MI (ties: earlier column first), truncated to ``top_k``."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    scores = mi_scores(values, labels)
    order = sorted(range(len(feature_names)), key=lambda j: (-scores[j], j))
    return [feature_names[j] for j in order[:top_k]]


@dataclass
class SelectionStep:
    size: int
    features: list[str]
    cv_accuracy: float
    removed: str | None = None


@dataclass
class SelectionTrajectory:
    steps: list[SelectionStep]
    removal_evaluations: int = 0
    fits: int = 0
    folds: list[list[str]] = field(default_factory=list)

    @property
    def best(self) -> SelectionStep:
        # highest accuracy; ties go to the smaller subset
        return max(self.steps, key=lambda s: (s.cv_accuracy, -s.size))

    @property
    def best_subset(self) -> list[str]:
        return list(self.best.features)

    @property
    def removal_order(self) -> list[str]:
        return [s.removed for s in self.steps if s.removed is not None]

    def to_csv(self, path, meta: dict | None = None) -> None:
        import json

        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if meta is not None:
                fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
            fh.write("size,accuracy,removed_feature\n")
            for s in self.steps:
                fh.write(f"{s.size},{s.cv_accuracy!r},{s.removed or ''}\n")


def fold_masks(plants: Sequence[str], folds: Sequence[Sequence[str]]) -> list[np.ndarray]:
    plants = np.asarray(plants, dtype=object)
    return [np.isin(plants, list(f)) for f in folds]


def group_cv_accuracy(values: np.ndarray, labels, masks: Sequence[np.ndarray], train_fn: TrainFn,
                      context: str = "") -> float:
    """Unweighted mean accuracy over held-out-plant folds."""
    y = np.asarray(labels)
    accs = []
    for i, val in enumerate(masks):
        try:
            predict = train_fn(values[~val], y[~val])
            pred = np.asarray(predict(values[val]))
        except Exception as exc:
            raise SelectionError(f"train_fn failed on fold {i}{context}: {exc}") from exc
        accs.append(float(np.mean(pred == y[val])))
    return float(np.mean(accs))


def sbs(
    values: np.ndarray,
    labels,
    plants: Sequence[str],
    train_fn: TrainFn,
    k_folds: int = 5,
    feature_names: Sequence[str] | None = None,
    seed: int = 0,
    max_candidates: int = 200,
) -> SelectionTrajectory:
    """Sequential backward selection under group k-fold CV.

    Columns must be ordered by descending MI: when several removals reach the
    same accuracy, the one furthest right (lowest MI) is removed.  Every
    subset size from the full candidate set down to 1 is recorded.
    ``removal_evaluations`` counts the candidate-removal subsets scored,
    ``d + (d-1) + ... + 2``; the initial full-set score is not a removal and
    is excluded from that count (``fits`` counts every ``train_fn`` call).
    """
    values = np.asarray(values, dtype=np.float64)
    d = values.shape[1]
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(d)]
    if len(names) != d:
        raise ValueError("feature_names length does not match the matrix")
    if d > max_candidates:
        raise ValueError(f"{d} candidates exceed the SBS cap of {max_candidates}; rank by MI first")
    folds = group_kfold(plants, k_folds, seed)
    masks = fold_masks(plants, folds)

    fits = 0

    def score(cols: list[int]) -> float:
        nonlocal fits
        fits += len(masks)
        ctx = f" (subset: {', '.join(names[c] for c in cols)})"
        return group_cv_accuracy(values[:, cols], labels, masks, train_fn, ctx)

    current = list(range(d))
    steps = [SelectionStep(d, names[:], score(current))]
    evaluations = 0
    while len(current) > 1:
        best_acc, best_pos = -1.0, -1
        for pos in range(len(current)):
            acc = score(current[:pos] + current[pos + 1:])
            evaluations += 1
            if acc >= best_acc:
                best_acc, best_pos = acc, pos
        removed = current.pop(best_pos)
        steps.append(SelectionStep(len(current), [names[c] for c in current], best_acc, names[removed]))
    return SelectionTrajectory(steps, evaluations, fits, folds)


def sbs_fit_count(d: int) -> int:
    """Candidate-removal subsets SBS scores for ``d`` starting features."""
    return d * (d + 1) // 2 - 1
