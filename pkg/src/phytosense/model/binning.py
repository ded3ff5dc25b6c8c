"""Quantile binning of continuous features into at most 255 bins."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MISSING_BIN = 255


@dataclass
class BinMap:
    """Per-feature ascending interior edges.

    A value maps to the number of edges strictly below it, so ``x <= edge``
    falls in the lower bin and anything beyond the last edge lands in the
    last bin.  NaN maps to ``MISSING_BIN``, which is above every split
    threshold and therefore always follows the right branch.
    """

    edges: list[np.ndarray]

    def __post_init__(self) -> None:
        self.edges = [np.asarray(e, dtype=np.float64) for e in self.edges]
        for j, e in enumerate(self.edges):
            if e.size > MISSING_BIN - 1:
                raise ValueError(f"feature {j}: {e.size} edges exceed the 254-edge limit")
            if e.size > 1 and not np.all(np.diff(e) > 0):
                raise ValueError(f"feature {j}: bin edges must be strictly increasing")

    @property
    def n_features(self) -> int:
        return len(self.edges)

    def n_bins(self, j: int) -> int:
        return int(self.edges[j].size) + 1

    def transform(self, values: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if x.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[1]}")
        out = np.empty(x.shape, dtype=np.uint8)
        for j, e in enumerate(self.edges):
            col = x[:, j]
            b = np.searchsorted(e, col, side="left")
            out[:, j] = np.where(np.isnan(col), MISSING_BIN, b)
        return out


def fit_bins(values: np.ndarray, max_bins: int = 255) -> BinMap:
    """Equal-frequency edges per column; one bin per distinct value when few."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise ValueError("cannot fit bins on an empty matrix")
    if not 2 <= max_bins <= 255:
        raise ValueError("max_bins must lie in [2, 255]")
    edges = []
    for j in range(x.shape[1]):
        col = x[:, j]
        col = col[~np.isnan(col)]
        distinct = np.unique(col)
        if distinct.size <= max_bins:
            e = (distinct[:-1] + distinct[1:]) / 2.0
        else:
            qs = np.arange(1, max_bins) / max_bins
            e = np.unique(np.quantile(col, qs, method="linear"))
        edges.append(e)
    return BinMap(edges)
