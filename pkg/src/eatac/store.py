"""Versioned JSON containers for checkpoints, Fisher maps and dataset bundles.

Arrays are stored as little-endian base64 with dtype and shape, and documents
are written with sorted keys, so identical inputs give identical bytes.
"""

from __future__ import annotations

import base64
import json
import os
from pathlib import Path

import numpy as np

from .data import Dataset, DatasetSpec, Split
from .fisher import FisherMap
from .network import Architecture, Model, adaptable_parameters

FORMAT_VERSION = 1


class ContainerError(ValueError):
    """Malformed, mismatched or unsupported container file."""


def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a)
    dtype = "<f8" if a.dtype.kind == "f" else "<i8"
    raw = np.ascontiguousarray(a, dtype=dtype).tobytes()
    return {"dtype": dtype, "shape": list(a.shape), "data": base64.b64encode(raw).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    if d.get("dtype") not in ("<f8", "<i8"):
        raise ContainerError(f"unsupported dtype {d.get('dtype')!r}")
    flat = np.frombuffer(base64.b64decode(d["data"]), dtype=d["dtype"])
    return flat.reshape(d["shape"]).astype(np.float64 if d["dtype"] == "<f8" else np.int64)


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def write_document(path: str | os.PathLike, doc: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(doc))
    return path


def read_document(path: str | os.PathLike, kind: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: not a readable container ({exc})") from exc
    if doc.get("kind") != kind:
        raise ContainerError(f"{path}: expected a {kind} container, found {doc.get('kind')!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported container version {doc.get('version')!r}")
    return doc


# -- checkpoints -------------------------------------------------------------

def checkpoint_document(model: Model, lineage: dict | None = None) -> dict:
    return {
        "kind": "checkpoint",
        "version": FORMAT_VERSION,
        "architecture": model.arch.to_dict(),
        "model_seed": model.seed,
        "lineage": lineage or {},
        "tensors": {k: encode_array(v) for k, v in model.state_dict().items()},
    }


def save_checkpoint(path, model: Model, lineage: dict | None = None) -> Path:
    return write_document(path, checkpoint_document(model, lineage))


def load_checkpoint(path) -> tuple[Model, dict]:
    """Model plus the seed lineage it was stored with."""
    doc = read_document(path, "checkpoint")
    model = Model(Architecture(**doc["architecture"]), seed=doc["model_seed"])
    state = {k: decode_array(v) for k, v in doc["tensors"].items()}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise ContainerError(f"{path}: checkpoint lacks {sorted(missing)}")
    model.load_state_dict(state)
    model.set_trainable("adaptable")
    return model, doc["lineage"]


# -- Fisher maps -------------------------------------------------------------

def save_fisher(path, fisher: FisherMap, names: list[str]) -> Path:
    if len(names) != len(fisher.omega):
        raise ValueError("one name per Fisher entry is required")
    doc = {
        "kind": "fisher",
        "version": FORMAT_VERSION,
        "num_samples": fisher.num_samples,
        "names": list(names),
        "omega": [encode_array(w) for w in fisher.omega],
        "anchor": [encode_array(a) for a in fisher.anchor],
    }
    return write_document(path, doc)


def load_fisher(path, model: Model | None = None) -> FisherMap:
    """Load a Fisher map; with ``model`` given, its layout is checked against the model."""
    doc = read_document(path, "fisher")
    fisher = FisherMap(tuple(decode_array(d) for d in doc["omega"]),
                       tuple(decode_array(d) for d in doc["anchor"]), doc["num_samples"])
    if model is not None:
        if doc["names"] != model.adaptable_names():
            raise ContainerError(f"{path}: Fisher layout does not match the model")
        shapes = [p.shape for p in adaptable_parameters(model)]
        if [w.shape for w in fisher.omega] != shapes:
            raise ContainerError(f"{path}: Fisher shapes do not match the model")
    return fisher


# -- dataset bundles ---------------------------------------------------------

def save_dataset(path, dataset: Dataset) -> Path:
    splits = {
        name: {"x": encode_array(s.x), "y": encode_array(s.y),
               "clean_y": encode_array(s.clean_y), "index": encode_array(s.index)}
        for name, s in dataset.splits().items()
    }
    doc = {"kind": "dataset", "version": FORMAT_VERSION, "spec": dataset.spec.to_dict(),
           "scale": dataset.scale, "splits": splits}
    return write_document(path, doc)


def load_dataset(path) -> Dataset:
    doc = read_document(path, "dataset")
    splits = {name: Split(**{k: decode_array(v) for k, v in s.items()})
              for name, s in doc["splits"].items()}
    return Dataset(DatasetSpec(**doc["spec"]), splits["train"], splits["test"], splits["probe"],
                   splits["fisher"], float(doc["scale"]))
