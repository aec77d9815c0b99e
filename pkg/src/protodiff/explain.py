"""Prototype-based explanations with pixel difference maps.

Each explained prediction gets the top-k most similar training images
(ordered exactly as the classifier orders neighbors), a signed pixel
difference against the rank-1 prototype, and a rendered report: a one-row
image grid plus a JSON sidecar carrying every number in the report.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .knn import PrototypeIndex, knn_predict, _ranked_candidates

__all__ = [
    "PrototypeEntry",
    "ExplanationReport",
    "explain",
    "difference_map",
    "render_report",
]


@dataclass(frozen=True)
class PrototypeEntry:
    ref: str
    label: int
    similarity: float
    rank: int


@dataclass
class ExplanationReport:
    """Everything needed to display and audit one explained prediction."""

    test_ref: str
    predicted_label: int
    true_label: int | None
    prototypes: tuple[PrototypeEntry, ...]
    difference_signed: np.ndarray
    test_image: np.ndarray
    prototype_images: tuple[np.ndarray, ...]
    render_paths: dict = field(default_factory=dict)


def difference_map(test_image: np.ndarray, prototype_image: np.ndarray):
    """Signed pixel difference and its absolute 8-bit rendering.

    The signed map is ``test - prototype`` in [-1, 1]; the rendering is its
    magnitude scaled by the fixed factor 255 (no per-image normalization), so
    a unit difference saturates white.
    """
    if test_image.shape != prototype_image.shape:
        raise ValueError(
            f"shape mismatch: {test_image.shape} vs {prototype_image.shape}"
        )
    signed = test_image.astype(np.float64) - prototype_image.astype(np.float64)
    rendered = np.round(np.abs(signed) * 255.0).astype(np.uint8)
    return signed, rendered


def explain(z, test_image: np.ndarray, index: PrototypeIndex, k: int,
            load_image: Callable[[str], np.ndarray], *, test_ref: str = "test",
            true_label: int | None = None, predict_k: int | None = None) -> ExplanationReport:
    """Build an explanation: top-k prototypes plus a rank-1 difference map.

    ``load_image`` resolves an index reference to the image array used for
    the grid and the difference map. ``predict_k`` sets the neighbor count of
    the reported label (defaults to ``k``), so the headline prediction can use
    the classifier's K while the visual explanation shows fewer prototypes.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > index.size:
        raise ValueError(f"k={k} exceeds index size {index.size}")
    order, sims = _ranked_candidates(z, index, exclude=None)
    top = order[:k]
    prototypes = tuple(
        PrototypeEntry(
            ref=index.image_refs[i],
            label=int(index.labels[i]),
            similarity=float(sims[i]),
            rank=rank,
        )
        for rank, i in enumerate(top, start=1)
    )
    prediction = knn_predict(z, index, predict_k or k)
    prototype_images = tuple(load_image(p.ref) for p in prototypes)
    if prototype_images[0].shape != test_image.shape:
        raise ValueError("prototype and test images must have the same shape")
    signed, _ = difference_map(test_image, prototype_images[0])
    return ExplanationReport(
        test_ref=test_ref,
        predicted_label=prediction.label,
        true_label=true_label,
        prototypes=prototypes,
        difference_signed=signed,
        test_image=test_image,
        prototype_images=prototype_images,
    )


def _to_tile(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def report_id(test_ref: str) -> str:
    """Deterministic directory name derived from the test-image reference."""
    stem = Path(test_ref).stem or "image"
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", stem)
    digest = hashlib.sha1(test_ref.encode("utf-8")).hexdigest()[:8]
    return f"{safe}_{digest}"


def render_report(report: ExplanationReport, out_dir) -> dict:
    """Write the report as ``<id>/grid.png`` plus ``<id>/report.json``.

    The grid is one row of equal tiles: test image, prototypes in rank order,
    then the absolute difference map, so its width is ``(k + 2) * tile``.
    Rendering the same report twice produces byte-identical files; the JSON
    stores floats at full precision and only relative paths.
    """
    out_dir = Path(out_dir) / report_id(report.test_ref)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, rendered_diff = difference_map(report.test_image, report.prototype_images[0])
    tiles = [_to_tile(report.test_image)]
    tiles.extend(_to_tile(img) for img in report.prototype_images)
    tiles.append(rendered_diff)
    grid = np.concatenate(tiles, axis=1)
    grid_path = out_dir / "grid.png"
    Image.fromarray(grid, mode="L").save(grid_path)
    payload = {
        "test_ref": report.test_ref,
        "predicted_label": report.predicted_label,
        "true_label": report.true_label,
        "prototypes": [
            {
                "ref": p.ref,
                "label": p.label,
                "similarity": p.similarity,
                "rank": p.rank,
            }
            for p in report.prototypes
        ],
        "difference_map": [[float(v) for v in row] for row in report.difference_signed],
        "grid_png": "grid.png",
    }
    json_path = out_dir / "report.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    report.render_paths = {"grid": grid_path, "json": json_path}
    return report.render_paths
