"""Checkpoint serialization and embedding export.

A checkpoint is a directory with ``checkpoint.json`` (format version,
configs, dataset fingerprint, parameter manifest) and ``params.bin``, the
concatenated raw little-endian parameter arrays in manifest order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import RegionDataset
from .trainer import ModelConfig, RegionEmbeddingModel, TrainConfig

FORMAT_VERSION = "1"
_NP_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


class FingerprintMismatch(ValueError):
    pass


def dataset_summary(dataset: RegionDataset) -> dict:
    return {
        "n": dataset.n,
        "v": dataset.v,
        "features": [int(view.matrix.shape[1]) for view in dataset.views],
        "sha256": dataset.fingerprint(),
    }


def config_hash(model_cfg: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(model_cfg), sort_keys=True).encode()).hexdigest()[:16]


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(
    directory,
    model: RegionEmbeddingModel,
    dataset: RegionDataset,
    epoch: int,
    train_cfg: Optional[TrainConfig] = None,
) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, p in model.named_parameters():
        dt = _NP_DTYPES[p.dtype]
        raw = np.ascontiguousarray(p.detach().cpu().numpy(), dtype=dt).tobytes()
        entries.append({"name": name, "shape": list(p.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    h = model.embed(dataset)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(model.cfg),
        "train_config": asdict(train_cfg) if train_cfg else None,
        "dataset": dataset_summary(dataset),
        "epoch": epoch,
        "parameters": entries,
        "final_h": {"shape": list(h.shape), "values": h.tolist()},
    }
    _write_atomic(root / "params.bin", b"".join(blobs))
    _write_atomic(root / "checkpoint.json", (json.dumps(manifest) + "\n").encode())
    return root


def load_checkpoint(directory, dataset: RegionDataset) -> RegionEmbeddingModel:
    root = Path(directory)
    manifest = json.loads((root / "checkpoint.json").read_text())
    if manifest["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest['format_version']!r}")
    expected = manifest["dataset"]
    actual = dataset_summary(dataset)
    if expected != actual:
        raise FingerprintMismatch(
            f"checkpoint was trained on dataset {expected['sha256'][:12]} "
            f"(n={expected['n']}), got {actual['sha256'][:12]} (n={actual['n']})"
        )
    model = RegionEmbeddingModel(dataset, ModelConfig(**manifest["model_config"]))
    blob = (root / "params.bin").read_bytes()
    params = dict(model.named_parameters())
    dtypes = {e["dtype"] for e in manifest["parameters"]}
    if len(dtypes) == 1:
        model.to(torch.float64 if dtypes == {"<f8"} else torch.float32)
        params = dict(model.named_parameters())
    with torch.no_grad():
        for e in manifest["parameters"]:
            arr = np.frombuffer(blob, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
            params[e["name"]].copy_(torch.from_numpy(arr.reshape(e["shape"]).copy()))
    model.eval()
    return model


def write_embeddings(path, h: np.ndarray) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in h:
            writer.writerow([repr(float(x)) for x in row])
    os.replace(tmp, path)
    return path


def read_embeddings(path) -> np.ndarray:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    return np.array(rows, dtype=np.float64)


def export_embeddings(
    model: RegionEmbeddingModel,
    dataset: RegionDataset,
    directory,
    seed: int,
    epoch: int,
    checkpoint_dir=None,
) -> np.ndarray:
    """Write ``embeddings.csv`` and ``embeddings.meta.json`` into ``directory``.

    When ``checkpoint_dir`` is given, the model is reloaded from it and the
    dataset fingerprint is verified first.
    """
    if checkpoint_dir is not None:
        model = load_checkpoint(checkpoint_dir, dataset)
    h = model.embed(dataset)
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    write_embeddings(root / "embeddings.csv", h)
    meta = {
        "n": int(h.shape[0]),
        "d": int(h.shape[1]),
        "seed": seed,
        "epoch": epoch,
        "config_hash": config_hash(model.cfg),
        "region_ids": list(dataset.region_ids),
    }
    _write_atomic(root / "embeddings.meta.json", (json.dumps(meta, indent=2) + "\n").encode())
    return h
