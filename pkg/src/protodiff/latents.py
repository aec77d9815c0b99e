"""Latent-table export and class-separation statistics.

The exported CSV (``ref,label,z0..z{d-1}``, full float precision) feeds any
external embedding or projection tool. The separation statistics quantify
how well the two classes split in cosine space: mean similarity over all
intra-class pairs, over all inter-class pairs, and their difference.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

__all__ = [
    "LatentTable",
    "SeparationStats",
    "export_latents",
    "load_latent_table",
    "separation_stats",
]


@dataclass(frozen=True)
class LatentTable:
    """Rows of (image ref, binary label, latent vector) with unique refs."""

    refs: tuple[str, ...]
    labels: np.ndarray
    latents: np.ndarray

    def __post_init__(self):
        if self.latents.ndim != 2:
            raise ValueError("latents must be 2-D")
        if not (len(self.refs) == self.labels.shape[0] == self.latents.shape[0]):
            raise ValueError("refs, labels and latents must have equal length")
        if len(set(self.refs)) != len(self.refs):
            raise ValueError("latent table refs must be unique")


@dataclass(frozen=True)
class SeparationStats:
    intra: float
    inter: float
    margin: float


def _encode_split(model, manifest, split: str, batch_size: int = 64):
    """Encode every image of a split in manifest order."""
    from .data import load_image

    recs = manifest.split_records(split)
    size = model.config.image_size
    latents = []
    with torch.no_grad():
        for start in range(0, len(recs), batch_size):
            chunk = recs[start:start + batch_size]
            images = np.stack(
                [load_image(manifest.resolve(r), size) for r in chunk]
            )[:, None, :, :]
            z = model.encode_semantic(torch.from_numpy(images))
            latents.append(z.cpu().numpy())
    lat = np.concatenate(latents) if latents else np.zeros((0, model.config.latent_dim))
    labels = np.array([r.label for r in recs], dtype=np.int64)
    refs = tuple(r.path for r in recs)
    return refs, labels, lat


def export_latents(model, manifest, split: str, out_path) -> LatentTable:
    """Encode a split and write the latent table CSV.

    Floats are written with ``repr`` so re-parsing reproduces them exactly;
    re-exporting with the same checkpoint yields an identical file.
    """
    refs, labels, lat = _encode_split(model, manifest, split)
    d = lat.shape[1]
    out_path = Path(out_path)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ref", "label"] + [f"z{i}" for i in range(d)])
        for ref, label, row in zip(refs, labels, lat):
            writer.writerow([ref, int(label)] + [repr(float(v)) for v in row])
    return LatentTable(refs=refs, labels=labels, latents=lat.astype(np.float64))


def load_latent_table(path) -> LatentTable:
    """Read a CSV written by :func:`export_latents`."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["ref", "label"]:
            raise ValueError(f"{path}: not a latent table (header {header[:2]})")
        refs, labels, rows = [], [], []
        for row in reader:
            refs.append(row[0])
            labels.append(int(row[1]))
            rows.append([float(v) for v in row[2:]])
    return LatentTable(
        refs=tuple(refs),
        labels=np.array(labels, dtype=np.int64),
        latents=np.array(rows, dtype=np.float64),
    )


def separation_stats(table: LatentTable, block_size: int = 512) -> SeparationStats:
    """Exact pairwise cosine statistics over the table.

    Computes the mean over all intra-class pairs and all inter-class pairs
    by blocked accumulation (no sampling); feasible for N up to ~10^4.
    Requires at least two rows per class and nonzero rows.
    """
    labels = table.labels
    n = labels.shape[0]
    n1 = int(labels.sum())
    n0 = n - n1
    if n0 < 2 or n1 < 2:
        raise ValueError("separation stats need at least 2 rows per class")
    lat = table.latents.astype(np.float64)
    norms = np.linalg.norm(lat, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm latent rows cannot enter cosine statistics")
    unit = lat / norms
    same_sum = 0.0
    cross_sum = 0.0
    same_mask_cache = labels[None, :]
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        gram = unit[start:stop] @ unit.T
        block_labels = labels[start:stop, None]
        same = block_labels == same_mask_cache
        same_sum += float(gram[same].sum())
        cross_sum += float(gram[~same].sum())
    # Every row contributes sim(v, v) = 1 to the same-class sum; remove the
    # diagonal, then halve to count unordered pairs once.
    same_pairs = (n0 * (n0 - 1) + n1 * (n1 - 1)) // 2
    cross_pairs = n0 * n1
    intra = (same_sum - n) / 2.0 / same_pairs
    inter = cross_sum / 2.0 / cross_pairs
    return SeparationStats(intra=intra, inter=inter, margin=intra - inter)
