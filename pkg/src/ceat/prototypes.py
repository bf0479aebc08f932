"""Class prototypes and batch-interpolation pseudo-features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BETA_A = 0.8
BETA_B = 0.5


@dataclass(frozen=True)
class Prototype:
    class_id: int
    vector: np.ndarray
    task_of_origin: int


class PrototypeStore:
    """Append-only store holding one frozen mean feature per old class."""

    def __init__(self):
        self._protos: dict[int, Prototype] = {}

    def __len__(self) -> int:
        return len(self._protos)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._protos

    def add(self, class_id: int, vector: np.ndarray, task: int) -> None:
        if class_id in self._protos:
            raise ValueError(f"prototype for class {class_id} already stored")
        v = np.array(vector, copy=True)
        v.setflags(write=False)
        self._protos[class_id] = Prototype(int(class_id), v, int(task))

    def class_ids(self) -> list[int]:
        return sorted(self._protos)

    def get(self, class_id: int) -> Prototype:
        return self._protos[class_id]

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """(vectors stacked in class-id order, class ids)."""
        ids = self.class_ids()
        if not ids:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return np.stack([self._protos[i].vector for i in ids]), np.array(ids, dtype=np.int64)

    def items(self):
        return [self._protos[i] for i in self.class_ids()]


def class_means(features: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    """Arithmetic mean of ``features`` per distinct label (float64 accumulation)."""
    features = np.asarray(features)
    labels = np.asarray(labels)
    out = {}
    for c in np.unique(labels):
        rows = features[labels == c].astype(np.float64)
        out[int(c)] = (rows.sum(axis=0) / rows.shape[0]).astype(features.dtype)
    return out


def compute_prototypes(feature_fn, images: np.ndarray, labels: np.ndarray, classes, batch_size: int = 256):
    """Per-class mean of ``feature_fn`` over all images, accumulated in streaming batches.

    ``classes`` lists the classes that must be present; a class with no
    sample raises.
    """
    classes = [int(c) for c in classes]
    sums: dict[int, np.ndarray] = {}
    counts = {c: 0 for c in classes}
    dtype = None
    for start in range(0, len(labels), batch_size):
        feats = np.asarray(feature_fn(images[start : start + batch_size]))
        dtype = feats.dtype
        lab = labels[start : start + batch_size]
        for c in np.unique(lab):
            c = int(c)
            if c not in counts:
                continue
            part = feats[lab == c].astype(np.float64).sum(axis=0)
            sums[c] = sums[c] + part if c in sums else part
            counts[c] += int((lab == c).sum())
    empty = [c for c in classes if counts[c] == 0]
    if empty:
        raise ValueError(f"classes without training samples: {empty}")
    return {c: (sums[c] / counts[c]).astype(dtype) for c in classes}


def batch_class_centers(features: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    if len(labels) == 0:
        raise ValueError("empty batch")
    return class_means(features, labels)


def nearest_center(prototype: np.ndarray, centers: dict[int, np.ndarray]) -> int:
    """Class id of the center closest (L2) to ``prototype``; ties go to the lowest id."""
    if not centers:
        raise ValueError("no batch centers")
    best, best_d = None, np.inf
    for c in sorted(centers):
        diff = np.asarray(centers[c], dtype=np.float64) - np.asarray(prototype, dtype=np.float64)
        dist = float(np.sqrt(np.dot(diff, diff)))
        if dist < best_d:
            best, best_d = c, dist
    return best


def zeta_for(task: int, total_tasks: int) -> float:
    """Interpolation ceiling rising linearly from 0.5 at task 1 to 0.7 at the last task."""
    if not 1 <= task <= total_tasks:
        raise ValueError(f"task {task} outside 1..{total_tasks}")
    if total_tasks == 1:
        return 0.5
    return 0.5 + 0.2 * (task - 1) / (total_tasks - 1)


def sample_beta(rng: np.random.Generator, a: float, b: float, size=None):
    x = rng.gamma(a, 1.0, size=size)
    y = rng.gamma(b, 1.0, size=size)
    return x / (x + y)


def sample_eta(rng: np.random.Generator, task: int, total_tasks: int, size=None):
    return zeta_for(task, total_tasks) * sample_beta(rng, BETA_A, BETA_B, size)


def interpolate(prototype: np.ndarray, feature: np.ndarray, eta: float) -> np.ndarray:
    prototype, feature = np.asarray(prototype), np.asarray(feature)
    if prototype.shape != feature.shape:
        raise ValueError(f"dimension mismatch {prototype.shape} vs {feature.shape}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta={eta} outside [0, 1]")
    return (1.0 - eta) * prototype + eta * feature


@dataclass
class PseudoBatch:
    features: np.ndarray
    labels: np.ndarray
    etas: np.ndarray
    source_classes: np.ndarray
    source_index: np.ndarray


def generate_pseudo_batch(
    store: PrototypeStore,
    batch_features: np.ndarray,
    batch_labels: np.ndarray,
    task: int,
    total_tasks: int,
    rng: np.random.Generator,
    count: int | None = None,
) -> PseudoBatch:
    """One pseudo-feature per real sample (or ``count``), labelled with its prototype's class.

    Each draws a prototype uniformly, finds the nearest new-class center in
    the batch, picks a random member feature of that class and interpolates
    toward it by ``eta ~ zeta_t * Beta(0.8, 0.5)``.
    """
    if len(store) == 0:
        raise ValueError("prototype store is empty")
    feats = np.asarray(batch_features)
    labels = np.asarray(batch_labels)
    n = len(labels) if count is None else count
    centers = batch_class_centers(feats, labels)
    members = {c: np.flatnonzero(labels == c) for c in centers}
    protos, ids = store.matrix()
    nearest_cache: dict[int, int] = {}
    out = np.empty((n, feats.shape[1]), dtype=feats.dtype)
    lab = np.empty(n, dtype=np.int64)
    etas = np.empty(n)
    src_cls = np.empty(n, dtype=np.int64)
    src_idx = np.empty(n, dtype=np.int64)
    for k in range(n):
        pi = int(rng.integers(len(ids)))
        if pi not in nearest_cache:
            nearest_cache[pi] = nearest_center(protos[pi], centers)
        j = nearest_cache[pi]
        row = int(members[j][rng.integers(len(members[j]))])
        eta = float(sample_eta(rng, task, total_tasks))
        out[k] = interpolate(protos[pi], feats[row], eta)
        lab[k] = ids[pi]
        etas[k] = eta
        src_cls[k] = j
        src_idx[k] = row
    return PseudoBatch(out, lab, etas, src_cls, src_idx)
