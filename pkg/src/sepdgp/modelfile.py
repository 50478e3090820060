"""Versioned JSON persistence for trained models and their SEP state."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import Standardizer
from .kernel import KernelParams
from .layer import GaussianSite, SparseGpLayer
from .network import DgpModel, InferenceState

FORMAT_VERSION = 1


class ModelFileError(ValueError):
    pass


def _site(site: GaussianSite):
    return {"eta1": site.eta1.tolist(), "eta2": site.eta2.tolist()}


def _load_site(d):
    return GaussianSite(np.array(d["eta1"], dtype=np.float64),
                        np.array(d["eta2"], dtype=np.float64))


def to_dict(model: DgpModel, state: InferenceState, architecture: str,
            metadata=None):
    std = model.standardizer
    layers = []
    for layer, g, q in zip(model.layers, state.factors, state.posteriors):
        layers.append({
            "output_dim": layer.output_dim,
            "log_sf2": float(layer.kernel.log_sf2),
            "log_lengthscales": np.asarray(layer.kernel.log_lengthscales,
                                           dtype=np.float64).tolist(),
            "log_noise": float(layer.log_noise),
            "Z": layer.Z.tolist(),
            "factor": _site(g),
            "posterior": _site(q),
        })
    return {
        "format_version": FORMAT_VERSION,
        "architecture": architecture,
        "n_train": int(state.n_train),
        "standardizer": None if std is None else {
            "input_means": std.input_means.tolist(),
            "input_stds": std.input_stds.tolist(),
            "target_mean": std.target_mean,
            "target_std": std.target_std,
            "constant_columns": [bool(c) for c in std.constant_columns],
        },
        "layers": layers,
        "metadata": dict(metadata or {}),
    }


def dumps(model, state, architecture, metadata=None) -> str:
    try:
        text = json.dumps(to_dict(model, state, architecture, metadata),
                          indent=1, sort_keys=True, allow_nan=False)
    except ValueError as exc:
        raise ModelFileError(f"model contains non-finite values: {exc}")
    return text + "\n"


def save(path, model, state, architecture, metadata=None):
    Path(path).write_text(dumps(model, state, architecture, metadata),
                          encoding="utf-8")


def from_dict(doc):
    """Rebuild ``(model, state, architecture, metadata)`` from a document."""
    version = doc.get("format_version") if isinstance(doc, dict) else None
    if version != FORMAT_VERSION:
        raise ModelFileError(f"unsupported model file version {version!r}")
    try:
        s = doc["standardizer"]
        std = None if s is None else Standardizer(
            np.array(s["input_means"], dtype=np.float64),
            np.array(s["input_stds"], dtype=np.float64),
            s["target_mean"], s["target_std"],
            np.array(s["constant_columns"], dtype=bool))
        layers, factors, posteriors = [], [], []
        for d in doc["layers"]:
            kernel = KernelParams(d["log_sf2"],
                                  np.array(d["log_lengthscales"],
                                           dtype=np.float64))
            layers.append(SparseGpLayer(np.array(d["Z"], dtype=np.float64),
                                        kernel, d["log_noise"],
                                        int(d["output_dim"])))
            factors.append(_load_site(d["factor"]))
            posteriors.append(_load_site(d["posterior"]))
        model = DgpModel(layers, std)
        state = InferenceState(factors, [], [], int(doc["n_train"]))
        state.rebuild(model)
        # keep the stored posteriors bit-for-bit rather than re-summing them
        state.posteriors = posteriors
        return model, state, doc["architecture"], dict(doc["metadata"])
    except (KeyError, TypeError) as exc:
        raise ModelFileError(f"malformed model file: {exc!r}") from None


def loads(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"model file is not valid JSON: {exc}") from None
    return from_dict(doc)


def load(path):
    path = Path(path)
    if not path.is_file():
        raise ModelFileError(f"no such model file: {path}")
    return loads(path.read_text(encoding="utf-8"))
