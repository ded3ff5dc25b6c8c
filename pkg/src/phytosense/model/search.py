"""Fixed-candidate pipeline search: defaults first, then seeded random draws."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..rng import substream
from .hgb import TrainParams, _binary_targets, train_hgb
from .logistic import LogisticParams, train_logistic

CANDIDATES = ("logistic", "hgb")   # simplicity rank: logistic first

# Documented random-search ranges.
HGB_RANGES = {
    "n_trees": (20, 300),               # integer, uniform
    "learning_rate": (0.01, 0.3),       # log-uniform
    "max_depth": (2, 8),                # integer, uniform
    "min_samples_leaf": (5, 50),        # integer, uniform
    "l2_lambda": (1e-3, 10.0),          # log-uniform
}
LOGISTIC_RANGES = {
    "learning_rate": (0.01, 1.0),       # log-uniform
    "l2": (1e-6, 1e-1),                 # log-uniform
}


def _loguniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def draw_params(candidate: str, rng: np.random.Generator, seed: int = 0):
    if candidate == "hgb":
        r = HGB_RANGES
        return TrainParams(
            n_trees=int(rng.integers(r["n_trees"][0], r["n_trees"][1] + 1)),
            learning_rate=_loguniform(rng, *r["learning_rate"]),
            max_depth=int(rng.integers(r["max_depth"][0], r["max_depth"][1] + 1)),
            min_samples_leaf=int(rng.integers(r["min_samples_leaf"][0], r["min_samples_leaf"][1] + 1)),
            l2_lambda=_loguniform(rng, *r["l2_lambda"]),
            seed=seed,
        )
    if candidate == "logistic":
        r = LOGISTIC_RANGES
        return LogisticParams(learning_rate=_loguniform(rng, *r["learning_rate"]),
                              l2=_loguniform(rng, *r["l2"]))
    raise ValueError(f"unknown candidate {candidate!r}")


@dataclass
class Evaluation:
    candidate: str
    params: dict
    val_accuracy: float
    train_accuracy: float

    @property
    def sort_key(self) -> tuple:
        n_trees = self.params.get("n_trees", 0)
        return (-self.val_accuracy, CANDIDATES.index(self.candidate), n_trees, self.params["learning_rate"])


@dataclass
class SearchResult:
    best: Evaluation
    evaluations: list[Evaluation] = field(default_factory=list)

    def to_dict(self) -> dict:
        def ev(e: Evaluation) -> dict:
            return {"candidate": e.candidate, "params": e.params, "val_accuracy": e.val_accuracy,
                    "train_accuracy": e.train_accuracy}
        return {"best": ev(self.best), "evaluations": [ev(e) for e in self.evaluations]}


def _fit_eval(candidate, params, Xtr, ytr, Xv, yv) -> Evaluation:
    if candidate == "hgb":
        model = train_hgb(Xtr, ytr, Xv, yv, params, classes=("0", "1"))
        ptr = model.predict_logit(Xtr) >= 0
        pv = model.predict_logit(Xv) >= 0
    else:
        model = train_logistic(Xtr, ytr, params)
        ptr = model.predict_logit(Xtr) >= 0
        pv = model.predict_logit(Xv) >= 0
    return Evaluation(candidate, params.to_dict(), float(np.mean(pv == (yv == 1))),
                      float(np.mean(ptr == (ytr == 1))))


def pipeline_search(train: tuple, val: tuple, candidates: Sequence[str] = CANDIDATES,
                    budget: int = 1, seed: int = 0) -> SearchResult:
    """Evaluate ``budget`` configurations per candidate (the first is the defaults).

    The winner has the highest validation accuracy; ties prefer the logistic
    baseline, then fewer trees, then a lower learning rate.  Each candidate
    draws from its own seeded stream, so the configurations tried with budget
    ``b`` are a prefix of those tried with ``b + 1``.
    """
    if not candidates:
        raise ValueError("candidate set is empty")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    Xtr, ytr = np.asarray(train[0], dtype=np.float64), train[1]
    Xv, yv = np.asarray(val[0], dtype=np.float64), val[1]
    ytr, classes = _binary_targets(ytr, None)
    yv, _ = _binary_targets(yv, None if classes == ("0", "1") else classes)
    evaluations = []
    for cand in candidates:
        if cand not in CANDIDATES:
            raise ValueError(f"unknown candidate {cand!r}; choose from {CANDIDATES}")
        rng = substream(seed, "search", CANDIDATES.index(cand))
        configs = [TrainParams(seed=seed) if cand == "hgb" else LogisticParams()]
        configs += [draw_params(cand, rng, seed) for _ in range(budget - 1)]
        evaluations.extend(_fit_eval(cand, p, Xtr, ytr, Xv, yv) for p in configs)
    best = min(evaluations, key=lambda e: e.sort_key)
    return SearchResult(best, evaluations)
