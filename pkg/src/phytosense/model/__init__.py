"""Histogram gradient boosting, logistic baseline, pipeline search, persistence."""

from .binning import BinMap, fit_bins
from .hgb import (BoostedModel, OneVsRestModel, TrainingError, TrainParams, Tree, predict_logit,
                  predict_proba, train_hgb, train_ovr)
from .logistic import LogisticModel, LogisticParams, train_logistic
from .persist import ChecksumError, FORMAT_VERSION, ModelFormatError, load_model, save_model
from .search import SearchResult, pipeline_search

__all__ = [
    "BinMap", "fit_bins", "BoostedModel", "OneVsRestModel", "TrainingError", "TrainParams", "Tree",
    "predict_logit", "predict_proba", "train_hgb", "train_ovr", "LogisticModel", "LogisticParams",
    "train_logistic", "ChecksumError", "FORMAT_VERSION", "ModelFormatError", "load_model",
    "save_model", "SearchResult", "pipeline_search",
]
