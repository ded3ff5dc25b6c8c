"""Versioned, checksummed JSON model files."""

from __future__ import annotations

import hashlib
import json
import os
from typing import IO, Union

from .. import GENERATOR_VERSION
from .binning import BinMap
from .hgb import BoostedModel, Tree

FORMAT_VERSION = "phytosense-model/1"


class ModelFormatError(ValueError):
    pass


class ChecksumError(ModelFormatError):
    pass


def _canonical(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def model_to_dict(model: BoostedModel, meta: dict | None = None) -> dict:
    """Self-describing document; ``meta`` is stored unchecked next to the payload."""
    payload = {
        "base_score": model.base_score,
        "learning_rate": model.learning_rate,
        "temperature": model.temperature,
        "classes": list(model.classes),
        "feature_manifest": list(model.feature_manifest),
        "bin_edges": [[float(v) for v in e] for e in model.bin_map.edges],
        "trees": [t.to_dict() for t in model.trees],
        "params": model.params,
        "history": model.history,
    }
    doc = {"format": FORMAT_VERSION, "generator_version": GENERATOR_VERSION,
           "checksum": hashlib.sha256(_canonical(payload)).hexdigest(), "payload": payload}
    if meta:
        doc["metadata"] = dict(meta)
    return doc


def model_from_dict(doc: dict) -> BoostedModel:
    fmt = doc.get("format")
    if fmt != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format {fmt!r}; expected {FORMAT_VERSION!r}")
    payload = doc.get("payload")
    if not isinstance(payload, dict) or hashlib.sha256(_canonical(payload)).hexdigest() != doc.get("checksum"):
        raise ChecksumError("model checksum mismatch")
    return BoostedModel(
        trees=[Tree.from_dict(t) for t in payload["trees"]],
        base_score=float(payload["base_score"]),
        learning_rate=float(payload["learning_rate"]),
        bin_map=BinMap(payload["bin_edges"]),
        feature_manifest=list(payload["feature_manifest"]),
        temperature=float(payload["temperature"]),
        classes=tuple(payload["classes"]),
        params=dict(payload["params"]),
        history=dict(payload["history"]),
    )


def dumps_model(model: BoostedModel, meta: dict | None = None) -> str:
    return json.dumps(model_to_dict(model, meta), sort_keys=True, indent=1, allow_nan=False) + "\n"


def save_model(model: BoostedModel, sink: Union[str, os.PathLike, IO[str]], meta: dict | None = None) -> None:
    text = dumps_model(model, meta)
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sink.write(text)


def load_model(source: Union[str, os.PathLike, IO[str]]) -> BoostedModel:
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = source.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"model file is truncated or corrupt ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise ModelFormatError("model file must hold a JSON object")
    return model_from_dict(doc)
