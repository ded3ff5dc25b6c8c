"""Histogram gradient boosting for binary classification (logistic loss).

Trees are grown depth-wise on binned features.  Each node's gradient and
hessian histograms are accumulated with ``np.bincount``; the larger child's
histogram is the parent's minus the smaller child's.  Training rows are put
into a canonical order (lexicographic on bins, then label) before boosting,
so every float reduction and therefore the fitted model is independent of
the order in which rows were supplied.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .binning import MISSING_BIN, BinMap, fit_bins

N_SLOTS = MISSING_BIN + 1
MIN_HESSIAN = 1e-3
MIN_GAIN = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainParams:
    n_trees: int = 200
    learning_rate: float = 0.1
    max_depth: int = 6
    min_samples_leaf: int = 20
    l2_lambda: float = 1.0
    max_bins: int = 255
    early_stopping_patience: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_trees", "learning_rate", "max_depth", "min_samples_leaf", "l2_lambda",
                     "max_bins", "early_stopping_patience"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_bins > 255:
            raise ValueError("max_bins must be <= 255")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Tree:
    feature: np.ndarray     # -1 marks a leaf
    threshold: np.ndarray   # bin index; bin <= threshold goes left
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray       # leaf value in logit units (before learning rate)

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def apply_binned(self, xb: np.ndarray) -> np.ndarray:
        """Leaf value reached by each binned row."""
        node = np.zeros(xb.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = xb[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] >= 0
        return self.value[node]

    def to_dict(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(),
                "value": [float(v) for v in self.value]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Tree":
        return cls(np.asarray(d["feature"], dtype=np.int64), np.asarray(d["threshold"], dtype=np.int64),
                   np.asarray(d["left"], dtype=np.int64), np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["value"], dtype=np.float64))


@dataclass
class BoostedModel:
    trees: list[Tree]
    base_score: float
    learning_rate: float
    bin_map: BinMap
    feature_manifest: list[str]
    temperature: float = 1.0
    classes: tuple[str, str] = ("healthy", "stressed")
    params: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.bin_map.n_features != len(self.feature_manifest):
            raise ValueError("bin map and feature manifest disagree on feature count")
        for t in self.trees:
            if t.feature.size and t.feature.max() >= len(self.feature_manifest):
                raise ValueError("tree references a feature outside the manifest")
            if not np.all(np.isfinite(t.value)):
                raise ValueError("non-finite leaf value")

    @property
    def positive_class(self) -> str:
        return self.classes[1]

    def _matrix(self, X) -> np.ndarray:
        if isinstance(X, Mapping):
            missing = [n for n in self.feature_manifest if n not in X]
            if missing:
                raise KeyError(f"feature vector lacks manifest feature(s): {', '.join(missing)}")
            return np.array([[float(X[n]) for n in self.feature_manifest]])
        x = np.asarray(X, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != len(self.feature_manifest):
            raise ValueError(
                f"expected {len(self.feature_manifest)} features "
                f"({', '.join(self.feature_manifest[:5])}{', ...' if len(self.feature_manifest) > 5 else ''}), "
                f"got {x.shape[1]}")
        return x

    def raw_sum(self, X) -> np.ndarray:
        xb = self.bin_map.transform(self._matrix(X))
        total = np.zeros(xb.shape[0])
        for tree in self.trees:
            total += tree.apply_binned(xb)
        return total

    def predict_logit(self, X) -> np.ndarray:
        return self.base_score + self.learning_rate * self.raw_sum(X)

    def predict_proba(self, X, temperature: float | None = None) -> np.ndarray:
        t = self.temperature if temperature is None else temperature
        if not t > 0:
            raise ValueError("temperature must be positive")
        return expit(self.predict_logit(X) / t)

    def predict(self, X) -> np.ndarray:
        pos = self.predict_logit(X) >= 0.0
        return np.where(pos, self.classes[1], self.classes[0])


def predict_logit(model: BoostedModel, X) -> np.ndarray:
    return model.predict_logit(X)


def predict_proba(model: BoostedModel, X, temperature: float | None = None) -> np.ndarray:
    return model.predict_proba(X, temperature)


# --------------------------------------------------------------------------- training


def log_loss_from_logits(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


def node_histograms(xb: np.ndarray, g: np.ndarray, h: np.ndarray) -> np.ndarray:
    """``(3, n_features, 256)`` gradient, hessian and count histograms."""
    m, f = xb.shape
    flat = (xb.astype(np.intp) + np.arange(f, dtype=np.intp) * N_SLOTS).ravel()
    size = f * N_SLOTS
    out = np.empty((3, f, N_SLOTS))
    out[0] = np.bincount(flat, weights=np.repeat(g, f), minlength=size).reshape(f, N_SLOTS)
    out[1] = np.bincount(flat, weights=np.repeat(h, f), minlength=size).reshape(f, N_SLOTS)
    out[2] = np.bincount(flat, minlength=size).reshape(f, N_SLOTS)
    return out


def split_gains(hist: np.ndarray, g_total: float, h_total: float, l2: float,
                min_samples_leaf: int) -> np.ndarray:
    """Gain of every (feature, threshold-bin) split; invalid splits are -inf."""
    cum = np.cumsum(hist, axis=2)
    gl, hl, cl = cum[0], cum[1], cum[2]
    gr, hr = g_total - gl, h_total - hl
    cr = cl[:, -1:] - cl
    gain = 0.5 * (gl**2 / (hl + l2) + gr**2 / (hr + l2) - g_total**2 / (h_total + l2))
    valid = (cl >= min_samples_leaf) & (cr >= min_samples_leaf) & (hl >= MIN_HESSIAN) & (hr >= MIN_HESSIAN)
    valid[:, -1] = False
    return np.where(valid, gain, -np.inf)


def grow_tree(xb: np.ndarray, g: np.ndarray, h: np.ndarray, params: TrainParams) -> tuple[Tree, np.ndarray]:
    """Fit one depth-wise tree; returns the tree and each row's leaf value."""
    l2, msl = params.l2_lambda, params.min_samples_leaf
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node() -> int:
        for lst, v in ((feature, -1), (threshold, 0), (left, -1), (right, -1), (value, 0.0)):
            lst.append(v)
        return len(feature) - 1

    row_values = np.zeros(xb.shape[0])
    root = new_node()
    level = [(root, np.arange(xb.shape[0]), None)]
    for depth in range(params.max_depth + 1):
        next_level = []
        for node, idx, hist in level:
            g_tot, h_tot = float(np.sum(g[idx])), float(np.sum(h[idx]))
            best = None
            if depth < params.max_depth and idx.size >= 2 * msl:
                if hist is None:
                    hist = node_histograms(xb[idx], g[idx], h[idx])
                gains = split_gains(hist, g_tot, h_tot, l2, msl)
                flat = int(np.argmax(gains))
                j, b = divmod(flat, N_SLOTS)
                if gains[j, b] > MIN_GAIN:
                    best = (j, b)
            if best is None:
                v = -g_tot / (h_tot + l2)
                value[node] = v
                row_values[idx] = v
                continue
            j, b = best
            go_left = xb[idx, j] <= b
            li, ri = idx[go_left], idx[~go_left]
            feature[node], threshold[node] = j, b
            ln, rn = new_node(), new_node()
            left[node], right[node] = ln, rn
            # histogram of the smaller child directly, the sibling by subtraction
            if li.size <= ri.size:
                lh = node_histograms(xb[li], g[li], h[li])
                rh = hist - lh
            else:
                rh = node_histograms(xb[ri], g[ri], h[ri])
                lh = hist - rh
            next_level.append((ln, li, lh))
            next_level.append((rn, ri, rh))
        level = next_level
        if not level:
            break
    tree = Tree(np.asarray(feature, dtype=np.int64), np.asarray(threshold, dtype=np.int64),
                np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                np.asarray(value, dtype=np.float64))
    return tree, row_values


def _binary_targets(labels, classes: Sequence[str] | None) -> tuple[np.ndarray, tuple[str, str]]:
    labels = np.asarray(labels)
    if labels.dtype.kind in "biuf" and (classes is None or tuple(classes) == ("0", "1")):
        y = labels.astype(np.float64)
        if not np.all((y == 0) | (y == 1)):
            raise TrainingError("numeric labels must be 0/1")
        return y, ("0", "1")
    if classes is None:
        found = sorted(set(labels.tolist()))
        if len(found) != 2:
            raise TrainingError(f"binary training needs exactly 2 classes, found {found}")
        classes = ("healthy", "stressed") if set(found) == {"healthy", "stressed"} else tuple(found)
    neg, pos = classes
    unknown = set(labels.tolist()) - {neg, pos}
    if unknown:
        raise TrainingError(f"labels outside {classes}: {sorted(unknown)}")
    return (labels == pos).astype(np.float64), (str(neg), str(pos))


def train_hgb(
    X_train: np.ndarray,
    y_train,
    X_val: np.ndarray | None = None,
    y_val=None,
    params: TrainParams | None = None,
    feature_names: Sequence[str] | None = None,
    classes: Sequence[str] | None = None,
) -> BoostedModel:
    """Fit a binary HGB model; early-stops on validation log-loss when given.

    With a validation set the ensemble is truncated to the round with the
    best validation loss.
    """
    params = params or TrainParams()
    X = np.asarray(X_train, dtype=np.float64)
    y, classes = _binary_targets(y_train, classes)
    if y.min() == y.max():
        raise TrainingError("training labels contain a single class")
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ValueError("feature_names length does not match X")

    bin_map = fit_bins(X, params.max_bins)
    xb = bin_map.transform(X)
    keys = [y] + [xb[:, j] for j in range(xb.shape[1] - 1, -1, -1)]
    order = np.lexsort(keys)
    xb, y = xb[order], y[order]

    p0 = float(np.mean(y))
    base = float(np.log(p0 / (1.0 - p0)))
    raw = np.full(y.size, base)

    has_val = X_val is not None
    if has_val:
        yv, _ = _binary_targets(y_val, classes if classes != ("0", "1") else None)
        xbv = bin_map.transform(np.asarray(X_val, dtype=np.float64))
        raw_v = np.full(yv.size, base)

    trees: list[Tree] = []
    train_loss = [log_loss_from_logits(raw, y)]
    val_loss = [log_loss_from_logits(raw_v, yv)] if has_val else []
    best_loss, best_round = (val_loss[0], 0) if has_val else (np.inf, 0)
    for r in range(params.n_trees):
        p = expit(raw)
        g, h = p - y, p * (1.0 - p)
        tree, leaf_vals = grow_tree(xb, g, h, params)
        trees.append(tree)
        raw = raw + params.learning_rate * leaf_vals
        loss = log_loss_from_logits(raw, y)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite training loss at round {r + 1}")
        train_loss.append(loss)
        if has_val:
            raw_v = raw_v + params.learning_rate * tree.apply_binned(xbv)
            vl = log_loss_from_logits(raw_v, yv)
            if not np.isfinite(vl):
                raise TrainingError(f"non-finite validation loss at round {r + 1}")
            val_loss.append(vl)
            if vl < best_loss:
                best_loss, best_round = vl, r + 1
            elif r + 1 - best_round >= params.early_stopping_patience:
                break
    if has_val:
        trees = trees[:best_round]
    history = {"train_loss": train_loss, "val_loss": val_loss,
               "best_round": best_round if has_val else len(trees)}
    return BoostedModel(trees, base, params.learning_rate, bin_map, names, 1.0, classes,
                        params.to_dict(), history)


# --------------------------------------------------------------------------- one-vs-rest


@dataclass
class OneVsRestModel:
    """Multiclass wrapper: one binary HGB per class, softmax over class logits."""

    classes: list[str]
    models: list[BoostedModel]
    temperature: float = 1.0

    def logits(self, X) -> np.ndarray:
        return np.column_stack([m.predict_logit(X) for m in self.models])

    def predict_proba(self, X, temperature: float | None = None) -> np.ndarray:
        z = self.logits(X) / (self.temperature if temperature is None else temperature)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return np.asarray(self.classes, dtype=object)[np.argmax(self.logits(X), axis=1)]


def train_ovr(X_train, y_train, X_val=None, y_val=None, params: TrainParams | None = None,
              feature_names: Sequence[str] | None = None) -> OneVsRestModel:
    y_train = np.asarray(y_train)
    classes = sorted(set(y_train.tolist()))
    if len(classes) < 2:
        raise TrainingError("need at least 2 classes")
    models = []
    for c in classes:
        yv = None if y_val is None else (np.asarray(y_val) == c).astype(float)
        models.append(train_hgb(X_train, (y_train == c).astype(float), X_val, yv, params, feature_names,
                                classes=None))
        models[-1].classes = (f"not_{c}", str(c))
    return OneVsRestModel([str(c) for c in classes], models)
