"""Cosine-similarity KNN over semantic latents.

The index is an exact full-scan structure: latents, binary labels, and stable
image references, queried by cosine similarity with deterministic ordering.
Similarity ties break by ascending image reference; mode ties (possible only
for even K) resolve to the label of the single most similar neighbor.

Persisted index layout (little-endian, documented for portability):

    bytes 0-3    magic ``PDIX``
    bytes 4-7    format version (uint32)
    bytes 8-15   row count N (uint64)
    bytes 16-19  latent dimension d (uint32)
    next N*d*4   latents, row-major float32
    next N       labels, uint8 (0 or 1)
    remainder    N references, each uint32 byte length + UTF-8 bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

__all__ = [
    "PrototypeIndex",
    "Prediction",
    "cosine_similarity",
    "build_index",
    "knn_predict",
    "save_index",
    "load_index",
]

INDEX_MAGIC = b"PDIX"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sIQI")


@dataclass(frozen=True)
class PrototypeIndex:
    """Immutable training-set latents with labels and image references."""

    latents: np.ndarray
    labels: np.ndarray
    image_refs: tuple[str, ...]
    norms: np.ndarray

    @property
    def size(self) -> int:
        return int(self.latents.shape[0])

    @property
    def dim(self) -> int:
        return int(self.latents.shape[1])


@dataclass(frozen=True)
class Prediction:
    """KNN outcome: mode label plus the ranked neighbor evidence."""

    label: int
    neighbor_ids: tuple[str, ...]
    similarities: tuple[float, ...]
    soft_probabilities: tuple[float, float]


def _as_vector(v) -> np.ndarray:
    if torch.is_tensor(v):
        v = v.detach().cpu().numpy()
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    return arr


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two nonzero vectors, in [-1, 1]."""
    va, vb = _as_vector(a), _as_vector(b)
    if va.shape != vb.shape:
        raise ValueError("vectors must have equal length")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    return float(np.dot(va, vb) / (na * nb))


def build_index(latents, labels, image_refs) -> PrototypeIndex:
    """Validate and assemble a queryable prototype index.

    Latents are stored float32 (the persisted precision); norms are
    precomputed from the stored values. Raises on an empty index, length
    mismatches, non-binary labels, duplicate references, or any zero-norm
    row (reported by its reference).
    """
    if torch.is_tensor(latents):
        latents = latents.detach().cpu().numpy()
    lat = np.ascontiguousarray(np.asarray(latents, dtype=np.float32))
    if lat.ndim != 2 or lat.shape[0] == 0:
        raise ValueError("empty index: need at least one latent row")
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    refs = tuple(str(r) for r in image_refs)
    if not (lat.shape[0] == lab.shape[0] == len(refs)):
        raise ValueError(
            f"length mismatch: {lat.shape[0]} latents, {lab.shape[0]} labels, {len(refs)} refs"
        )
    if not np.isin(lab, (0, 1)).all():
        raise ValueError("labels must be binary (0 or 1)")
    if len(set(refs)) != len(refs):
        raise ValueError("image references must be unique")
    norms = np.linalg.norm(lat.astype(np.float64), axis=1)
    if np.any(norms == 0.0):
        bad = refs[int(np.argmin(norms))]
        raise ValueError(f"zero-norm latent for reference {bad!r}")
    lat.setflags(write=False)
    lab.setflags(write=False)
    norms.setflags(write=False)
    return PrototypeIndex(latents=lat, labels=lab, image_refs=refs, norms=norms)


def _ranked_candidates(z, index: PrototypeIndex, exclude: str | None):
    """All usable entries ordered by descending similarity, ref-ascending ties."""
    zq = _as_vector(z)
    if zq.shape[0] != index.dim:
        raise ValueError(f"query dimension {zq.shape[0]} != index dimension {index.dim}")
    nq = np.linalg.norm(zq)
    if nq == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm query")
    sims = index.latents.astype(np.float64) @ zq / (index.norms * nq)
    refs = np.asarray(index.image_refs)
    usable = np.arange(index.size)
    if exclude is not None:
        usable = usable[refs != exclude]
    order = usable[np.lexsort((refs[usable], -sims[usable]))]
    return order, sims


def knn_predict(z, index: PrototypeIndex, k: int, exclude: str | None = None,
                tau_pred: float = 0.1) -> Prediction:
    """Mode-vote prediction from the K most cosine-similar prototypes.

    ``exclude`` removes the anchor's own entry (training-time queries).
    The reported soft probabilities use the tempered-similarity vote over the
    same K neighbors.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    order, sims = _ranked_candidates(z, index, exclude)
    if k > order.shape[0]:
        raise ValueError(f"k={k} exceeds the usable index size {order.shape[0]}")
    top = order[:k]
    top_sims = sims[top]
    top_labels = index.labels[top]
    ones = int(top_labels.sum())
    zeros = k - ones
    if ones > zeros:
        label = 1
    elif zeros > ones:
        label = 0
    else:
        label = int(top_labels[0])
    shifted = (top_sims - top_sims.max()) / tau_pred
    weights = np.exp(shifted)
    weights /= weights.sum()
    p1 = float((weights * top_labels).sum())
    return Prediction(
        label=label,
        neighbor_ids=tuple(index.image_refs[i] for i in top),
        similarities=tuple(float(s) for s in top_sims),
        soft_probabilities=(1.0 - p1, p1),
    )


def save_index(index: PrototypeIndex, path) -> None:
    """Write the index in the documented binary layout."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.size, index.dim))
        fh.write(np.ascontiguousarray(index.latents, dtype="<f4").tobytes())
        fh.write(index.labels.astype(np.uint8).tobytes())
        for ref in index.image_refs:
            raw = ref.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def load_index(path) -> PrototypeIndex:
    """Read an index written by :func:`save_index`."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path} is too short to be a prototype index")
    magic, version, n, d = _HEADER.unpack_from(blob, 0)
    if magic != INDEX_MAGIC:
        raise ValueError(f"{path} is not a prototype index (bad magic)")
    if version != INDEX_VERSION:
        raise ValueError(f"unsupported index format version {version}")
    offset = _HEADER.size
    lat_bytes = n * d * 4
    lat = np.frombuffer(blob, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    offset += lat_bytes
    labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=offset).astype(np.int64)
    offset += n
    refs = []
    for _ in range(n):
        (length,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        refs.append(blob[offset:offset + length].decode("utf-8"))
        offset += length
    return build_index(lat, labels, refs)
