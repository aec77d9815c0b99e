"""Dataset manifests, image loading, balanced batching, synthetic corpus.

A dataset is described by a UTF-8 CSV manifest with header ``path,label,split``
whose paths are resolved against the manifest's directory. Labels are binary
and splits are ``train``/``val``/``test``; no path may appear in more than
one split.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "DatasetError",
    "ManifestRecord",
    "DatasetManifest",
    "BatchSpec",
    "load_manifest",
    "load_image",
    "balanced_batch_indices",
    "balanced_batches",
    "generate_synthetic_dataset",
]

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Malformed manifest, unreadable image, or an unsatisfiable batch spec."""


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: int
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    """Validated dataset description rooted at the manifest's directory."""

    root: Path
    records: tuple[ManifestRecord, ...]

    def split_records(self, split: str) -> tuple[ManifestRecord, ...]:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return tuple(r for r in self.records if r.split == split)

    def class_counts(self, split: str) -> tuple[int, int]:
        recs = self.split_records(split)
        ones = sum(r.label for r in recs)
        return len(recs) - ones, ones

    def resolve(self, record: ManifestRecord) -> Path:
        return self.root / record.path


@dataclass(frozen=True)
class BatchSpec:
    """Per-class batch size M; every batch carries exactly M of each class."""

    per_class: int

    def __post_init__(self):
        if self.per_class < 1:
            raise ValueError("per-class batch size must be >= 1")


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest CSV.

    Errors carry the 1-based line number of the offending row. Validation
    covers the header, binary labels, known splits, resolvable image paths,
    and cross-split leakage.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    root = path.parent
    records: list[ManifestRecord] = []
    seen: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty manifest") from None
        if [h.strip() for h in header] != ["path", "label", "split"]:
            raise DatasetError(f"{path}: header must be 'path,label,split'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DatasetError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            rel, label_s, split = (field.strip() for field in row)
            if label_s not in ("0", "1"):
                raise DatasetError(f"{path}:{lineno}: label must be 0 or 1, got {label_s!r}")
            if split not in SPLITS:
                raise DatasetError(f"{path}:{lineno}: unknown split {split!r}")
            if rel in seen and seen[rel] != split:
                raise DatasetError(
                    f"{path}:{lineno}: split leakage: {rel!r} appears in "
                    f"{seen[rel]!r} and {split!r}"
                )
            seen[rel] = split
            if not (root / rel).is_file():
                raise DatasetError(f"{path}:{lineno}: image not found: {rel}")
            records.append(ManifestRecord(path=rel, label=int(label_s), split=split))
    return DatasetManifest(root=root, records=tuple(records))


def load_image(path, target_size: int) -> np.ndarray:
    """Load a grayscale image as a float32 array in [0, 1].

    Any raster PIL can read is accepted and converted to single-channel;
    off-size inputs are resized bilinearly to ``target_size`` square.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            gray = img.convert("L")
            if gray.size != (target_size, target_size):
                gray = gray.resize((target_size, target_size), Image.BILINEAR)
            arr = np.asarray(gray, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return arr


def _epoch_rng(epoch_seed) -> np.random.Generator:
    return np.random.default_rng(epoch_seed)


def balanced_batch_indices(manifest: DatasetManifest, split: str, spec: BatchSpec,
                           epoch_seed) -> list[np.ndarray]:
    """Index plan for one epoch of class-balanced batches.

    Returns, per batch, the indices into ``manifest.split_records(split)``
    ordered class-0 rows first. The majority class is visited at most once
    per epoch; the minority class cycles through reshuffled permutations, so
    reuse counts differ by at most one. Deterministic in ``epoch_seed``.
    """
    recs = manifest.split_records(split)
    idx0 = np.array([i for i, r in enumerate(recs) if r.label == 0], dtype=np.int64)
    idx1 = np.array([i for i, r in enumerate(recs) if r.label == 1], dtype=np.int64)
    m = spec.per_class
    for label, idx in ((0, idx0), (1, idx1)):
        if idx.shape[0] < m:
            raise DatasetError(
                f"class {label} has {idx.shape[0]} members in split {split!r}, "
                f"fewer than the {m} required per batch"
            )
    rng = _epoch_rng(epoch_seed)
    if idx0.shape[0] >= idx1.shape[0]:
        major, minor, major_first = idx0, idx1, True
    else:
        major, minor, major_first = idx1, idx0, False
    n_batches = major.shape[0] // m
    need = n_batches * m
    major_perm = rng.permutation(major)
    minor_stream = []
    while len(minor_stream) < need:
        minor_stream.extend(rng.permutation(minor))
    minor_arr = np.array(minor_stream[:need], dtype=np.int64)
    batches = []
    for b in range(n_batches):
        big = major_perm[b * m:(b + 1) * m]
        small = minor_arr[b * m:(b + 1) * m]
        zeros, ones = (big, small) if major_first else (small, big)
        batches.append(np.concatenate([zeros, ones]))
    return batches


def balanced_batches(manifest: DatasetManifest, split: str, spec: BatchSpec,
                     epoch_seed, target_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of (images, labels) batches, each exactly M per class.

    Images come out as ``(2M, 1, S, S)`` float32 in [0, 1]; labels as
    ``(2M,)`` int64. Batch composition is fixed by ``epoch_seed``.
    """
    recs = manifest.split_records(split)
    for batch_idx in balanced_batch_indices(manifest, split, spec, epoch_seed):
        images = np.stack(
            [load_image(manifest.resolve(recs[i]), target_size) for i in batch_idx]
        )[:, None, :, :]
        labels = np.array([recs[i].label for i in batch_idx], dtype=np.int64)
        yield images, labels


def _render_blob(rng: np.random.Generator, size: int, with_voids: bool) -> np.ndarray:
    """One synthetic sample: a soft-edged bright ellipse on a dim background.

    Class 1 samples carry dark interior voids; everything else (background
    level, blob brightness, position, size, orientation) jitters identically
    across classes so only the voids are class-informative.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size / 2 + rng.uniform(-0.08, 0.08) * size
    cy = size / 2 + rng.uniform(-0.08, 0.08) * size
    ax = rng.uniform(0.26, 0.42) * size
    ay = rng.uniform(0.26, 0.42) * size
    theta = rng.uniform(0.0, np.pi)
    brightness = rng.uniform(0.55, 0.95)
    background = rng.uniform(0.02, 0.18)
    softness = rng.uniform(0.05, 0.10)

    cos_t, sin_t = np.cos(theta), np.sin(theta)
    xr = (xx - cx) * cos_t + (yy - cy) * sin_t
    yr = -(xx - cx) * sin_t + (yy - cy) * cos_t
    radial = (xr / ax) ** 2 + (yr / ay) ** 2
    mask = 1.0 / (1.0 + np.exp(-(1.0 - radial) / softness))

    interior = np.full((size, size), brightness)
    if with_voids:
        n_voids = int(rng.integers(2, 4))
        for _ in range(n_voids):
            # Void centers stay well inside the ellipse.
            u = rng.uniform(0.0, 0.55)
            phi = rng.uniform(0.0, 2 * np.pi)
            vx = cx + u * ax * np.cos(phi) * cos_t - u * ay * np.sin(phi) * sin_t
            vy = cy + u * ax * np.cos(phi) * sin_t + u * ay * np.sin(phi) * cos_t
            vr = rng.uniform(0.17, 0.28) * min(ax, ay)
            dist2 = ((xx - vx) / vr) ** 2 + ((yy - vy) / vr) ** 2
            void_mask = 1.0 / (1.0 + np.exp(-(1.0 - dist2) / 0.25))
            interior = interior * (1.0 - 0.8 * void_mask)

    img = background + mask * (interior - background)
    img += rng.normal(0.0, 0.015, size=(size, size))
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_dataset(n_per_class: int, image_size: int, seed: int,
                               out_dir) -> DatasetManifest:
    """Write a deterministic two-class PNG corpus with an 80/10/10 split.

    Class 0 holds filled soft-boundary ellipses; class 1 the same family of
    ellipses with dark interior voids. Re-running with the same arguments
    reproduces the corpus byte for byte.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_train = int(n_per_class * 0.8)
    n_val = int(n_per_class * 0.1)
    rows = []
    for label in (0, 1):
        cls_dir = out / f"class{label}"
        cls_dir.mkdir(exist_ok=True)
        for i in range(n_per_class):
            img = _render_blob(rng, image_size, with_voids=(label == 1))
            name = f"class{label}/img_{i:05d}.png"
            pixels = np.round(img * 255.0).astype(np.uint8)
            Image.fromarray(pixels, mode="L").save(out / name)
            if i < n_train:
                split = "train"
            elif i < n_train + n_val:
                split = "val"
            else:
                split = "test"
            rows.append((name, label, split))
    manifest_path = out / "manifest.csv"
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "split"])
        writer.writerows(rows)
    return load_manifest(manifest_path)
