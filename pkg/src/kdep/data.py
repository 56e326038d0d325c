"""Synthetic Gaussian-cluster datasets.

All datasets built from the same ``seed`` share one pool of unit-norm class
centroids. The pretraining corpus uses the pool as is; a downstream task
moves each centroid by ``shift`` along its own random direction (then
renormalises), giving related but distinct classes. Sample noise for each
role and task comes from a separate stream, so pretraining and downstream
draws never overlap.
"""

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .container import content_hash
from .errors import SpecError
from .rng import SplitMix64, derive_seed

PRETRAIN = "pretrain_unlabeled"
DOWNSTREAM_TRAIN = "downstream_train"
DOWNSTREAM_TEST = "downstream_test"
ROLES = (PRETRAIN, DOWNSTREAM_TRAIN, DOWNSTREAM_TEST)


@dataclass(frozen=True)
class DatasetSpec:
    classes: int
    per_class: int
    spread: float
    seed: int
    role: str = PRETRAIN
    dim: int = 32
    image: Optional[tuple] = None  # (h, w, ch); overrides dim when set
    shift: float = 0.0
    task: int = 0

    def validate(self):
        if self.classes < 2:
            raise SpecError(f"need at least 2 classes, got {self.classes}")
        if self.per_class < 1:
            raise SpecError(f"per_class must be >= 1, got {self.per_class}")
        if not self.spread > 0:
            raise SpecError(f"spread must be positive, got {self.spread}")
        if self.role not in ROLES:
            raise SpecError(f"unknown role {self.role!r}")
        if self.image is None and self.dim < 1:
            raise SpecError("dim must be positive")
        if self.image is not None and (len(self.image) != 3 or min(self.image) < 1):
            raise SpecError(f"image shape must be (h, w, ch), got {self.image}")
        if self.shift < 0:
            raise SpecError("shift must be nonnegative")

    @property
    def sample_shape(self):
        return tuple(self.image) if self.image is not None else (self.dim,)


@dataclass
class Dataset:
    """Samples plus class ids.

    ``classes`` always holds the generating class of each sample; ``labels``
    is ``None`` for the unlabeled pretraining role, which keeps class ids
    only for stratified subsampling (and for the supervised baselines that
    stand in for a labeled pretraining corpus).
    """

    samples: np.ndarray
    classes: np.ndarray
    spec: DatasetSpec

    @property
    def labels(self):
        return None if self.spec.role == PRETRAIN else self.classes

    def __len__(self):
        return self.samples.shape[0]

    def class_counts(self):
        return np.bincount(self.classes, minlength=self.spec.classes)

    def to_sections(self):
        return {"samples": self.samples, "classes": self.classes}

    def digest(self):
        return content_hash(self.to_sections())

    def manifest(self):
        return dataset_manifest(self)


def centroids(spec):
    """Unit-norm class centroids for ``spec`` (flattened sample shape)."""
    width = int(np.prod(spec.sample_shape))
    pool = SplitMix64(derive_seed(spec.seed, "centroid")).normal((spec.classes, width))
    pool /= np.linalg.norm(pool, axis=1, keepdims=True)
    if spec.role == PRETRAIN or spec.shift == 0:
        return pool
    moves = SplitMix64(derive_seed(spec.seed, "shift", spec.task)).normal((spec.classes, width))
    moves /= np.linalg.norm(moves, axis=1, keepdims=True)
    moved = pool + spec.shift * moves
    return moved / np.linalg.norm(moved, axis=1, keepdims=True)


def generate(spec):
    """Draw ``per_class`` samples per class, grouped by class in ascending order."""
    spec.validate()
    centre = centroids(spec)
    noise_stream = SplitMix64(derive_seed(spec.seed, "noise", spec.role, spec.task))
    n = spec.classes * spec.per_class
    classes = np.repeat(np.arange(spec.classes, dtype=np.int64), spec.per_class)
    noise = noise_stream.normal((n, centre.shape[1]), spec.spread)
    samples = (centre[classes] + noise).reshape((n,) + spec.sample_shape)
    return Dataset(samples, classes, spec)


def subsample(dataset, fraction, seed):
    """Stratified sample of ceil(fraction * class size) items per class, original order kept."""
    if not 0 < fraction <= 1:
        raise SpecError(f"fraction must lie in (0, 1], got {fraction}")
    keep = []
    for c in range(dataset.spec.classes):
        members = np.flatnonzero(dataset.classes == c)
        if members.size == 0:
            continue
        m = math.ceil(fraction * members.size - 1e-9)
        chosen = SplitMix64(derive_seed(seed, "subsample", c)).sample(members.size, m)
        keep.append(members[chosen])
    idx = np.sort(np.concatenate(keep))
    return Dataset(dataset.samples[idx].copy(), dataset.classes[idx].copy(), dataset.spec)


def dataset_manifest(dataset):
    """``key=value`` text describing how a dataset was produced."""
    fields = asdict(dataset.spec)
    fields["image"] = "x".join(map(str, dataset.spec.image)) if dataset.spec.image else ""
    fields["n_samples"] = len(dataset)
    fields["sha256"] = dataset.digest()
    return "".join(f"{k}={v}\n" for k, v in fields.items())
