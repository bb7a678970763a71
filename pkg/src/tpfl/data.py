"""Synthetic few-shot image data, label-skew partitioning, and on-disk format.

On disk a dataset is a directory holding ``manifest.json``, ``images.f64``
(little-endian float64, row-major ``[N, H, W, Ch]``) and ``labels.u32``
(little-endian uint32, ``[N]``).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tpfl import seeding

FORMAT_VERSION = 1
PROTOTYPE_BOUND = 1.0
SPLITS = ("train", "test")


class DatasetFormatError(ValueError):
    """Raised for anything wrong with a dataset directory; ``field`` names the culprit."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class PartitionError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    seed: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.split, self.seed)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.class_count == other.class_count
            and self.split == other.split
            and self.seed == other.seed
            and self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
            and np.array_equal(self.labels, other.labels)
        )


def class_prototypes(seed: int, C: int, H: int, W: int, Ch: int, n_waves: int = 3) -> np.ndarray:
    """One smooth pattern per class: a sum of low-frequency plane waves scaled to max |x| = 1."""
    rng = seeding.rng(seed, "data", 0)
    yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    protos = np.zeros((C, H, W, Ch))
    for c in range(C):
        for ch in range(Ch):
            img = np.zeros((H, W))
            for _ in range(n_waves):
                fy, fx = rng.integers(0, 3, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                img += rng.normal() * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
            protos[c, :, :, ch] = img
        protos[c] *= PROTOTYPE_BOUND / max(np.abs(protos[c]).max(), 1e-12)
    return protos


def generate_synthetic(seed: int, C: int, per_class: int, H: int, W: int, Ch: int,
                       noise_sigma: float, split: str = "train") -> Dataset:
    """prototype + N(0, sigma^2) noise, clipped to the prototype bound plus 6 sigma.

    Prototypes depend only on ``seed``; the noise stream also depends on
    ``split`` so train and test never share draws.
    """
    if C < 2 or per_class < 1:
        raise ValueError("need C >= 2 and per_class >= 1")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    protos = class_prototypes(seed, C, H, W, Ch)
    labels = np.repeat(np.arange(C), per_class)
    images = protos[labels]
    if noise_sigma > 0:
        noise = seeding.rng(seed, "noise", zlib.crc32(split.encode())).normal(0.0, noise_sigma, size=images.shape)
        bound = PROTOTYPE_BOUND + 6 * noise_sigma
        images = np.clip(images + noise, -bound, bound)
    return Dataset(images, labels, C, split, seed)


# -------------------------------------------------------------- partitioning


@dataclass
class PartitionPlan:
    assignments: list[list[int]]
    client_classes: list[list[int]]
    classes_per_client: int
    shots: int

    def label_histogram(self, dataset: Dataset, client: int) -> np.ndarray:
        return np.bincount(dataset.labels[self.assignments[client]], minlength=dataset.class_count)


def partition_label_skew(dataset: Dataset, M: int, s: int, n_k: int, seed: int) -> PartitionPlan:
    """Give each of M clients s classes and n_k distinct samples of each.

    Classes are dealt round-robin over a seeded permutation, so M * s >= C
    covers every class. Samples are drawn without replacement from a seeded
    shuffle of each class, so no index is used twice.
    """
    C = dataset.class_count
    if not 1 <= s <= C:
        raise PartitionError(f"classes per client s={s} must be in [1, {C}]")
    if M < 1 or n_k < 1:
        raise PartitionError("need M >= 1 and n_k >= 1")
    rng = seeding.rng(seed, "partition")
    perm = rng.permutation(C)
    client_classes = [[int(perm[(k * s + j) % C]) for j in range(s)] for k in range(M)]

    pools = {}
    for c in range(C):
        pools[c] = list(rng.permutation(np.flatnonzero(dataset.labels == c)))
    cursor = dict.fromkeys(range(C), 0)
    for c in range(C):
        need = n_k * sum(cl.count(c) for cl in client_classes)
        if need > len(pools[c]):
            raise PartitionError(f"class {c} needs {need} samples but has {len(pools[c])}")

    assignments = []
    for classes in client_classes:
        idx = []
        for c in classes:
            idx.extend(int(i) for i in pools[c][cursor[c]:cursor[c] + n_k])
            cursor[c] += n_k
        assignments.append(sorted(idx))
    return PartitionPlan(assignments, client_classes, s, n_k)


def required_per_class(C: int, M: int, s: int, n_k: int) -> int:
    """Smallest per-class sample count that lets partition_label_skew succeed."""
    return -(-M * s // C) * n_k


# ---------------------------------------------------------------- persistence


def save_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": FORMAT_VERSION,
        "shape": list(dataset.images.shape),
        "class_count": int(dataset.class_count),
        "split": dataset.split,
        "seed": dataset.seed,
        "images_dtype": "<f8",
        "labels_dtype": "<u4",
    }
    (directory / "images.f64").write_bytes(dataset.images.astype("<f8").tobytes(order="C"))
    (directory / "labels.u32").write_bytes(dataset.labels.astype("<u4").tobytes(order="C"))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def _read_manifest(directory: Path) -> dict:
    path = directory / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"missing {path}", "manifest") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"malformed manifest: {exc}", "manifest") from None
    if not isinstance(manifest, dict):
        raise DatasetFormatError("manifest must be a JSON object", "manifest")
    for key in ("version", "shape", "class_count", "split"):
        if key not in manifest:
            raise DatasetFormatError(f"manifest missing {key!r}", key)
    if manifest["version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {manifest['version']!r}", "version")
    shape = manifest["shape"]
    if (not isinstance(shape, list) or len(shape) != 4
            or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape)
            or min(shape[1:]) < 1):
        raise DatasetFormatError(f"shape must be [N, H, W, Ch] of non-negative ints, got {shape!r}", "shape")
    cc = manifest["class_count"]
    if not isinstance(cc, int) or isinstance(cc, bool) or cc < 1:
        raise DatasetFormatError(f"bad class_count {cc!r}", "class_count")
    if manifest["split"] not in SPLITS:
        raise DatasetFormatError(f"bad split {manifest['split']!r}", "split")
    return manifest


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = _read_manifest(directory)
    shape = tuple(manifest["shape"])
    N = shape[0]
    blobs = {}
    for name, itemsize, count in (("images.f64", 8, int(np.prod(shape))), ("labels.u32", 4, N)):
        path = directory / name
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            raise DatasetFormatError(f"missing {path}", name) from None
        if len(raw) != itemsize * count:
            raise DatasetFormatError(
                f"{name} holds {len(raw)} bytes, manifest shape {list(shape)} needs {itemsize * count}", name)
        blobs[name] = raw
    images = np.frombuffer(blobs["images.f64"], dtype="<f8").reshape(shape).astype(np.float64)
    labels = np.frombuffer(blobs["labels.u32"], dtype="<u4").astype(np.int64)
    if labels.size and labels.max() >= manifest["class_count"]:
        raise DatasetFormatError("label outside [0, class_count)", "labels.u32")
    return Dataset(images, labels, manifest["class_count"], manifest["split"], manifest.get("seed"))
