"""Statistics correction for aligned teacher targets.

After SVD alignment the per-channel spreads of the targets differ by orders
of magnitude. These transforms shrink that spread before the student
regresses onto the targets:

* ``sn``  - divide each channel by its std
* ``sm``  - rescale each channel's std to the matching pre-alignment std
* ``pts`` - sign(f) * |f / T| ** (1 / n), applied elementwise

All are fitted once on the full distillation set and then frozen.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError, KindError, MissingStatsError, ParamError
from .linalg import as_feature_matrix, channel_stats

IDENTITY, SN, SM, PTS = "identity", "sn", "sm", "pts"
KIND_TAGS = {IDENTITY: 0, SN: 1, SM: 2, PTS: 3}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}

STD_FLOOR = 1e-12
DEFAULT_T = 0.1
DEFAULT_N = 3.0


@dataclass(frozen=True)
class TargetTransform:
    kind: str = IDENTITY
    stds: Optional[np.ndarray] = None
    source_stds: Optional[np.ndarray] = None
    target_stds: Optional[np.ndarray] = None
    T: float = DEFAULT_T
    n: float = DEFAULT_N

    def __post_init__(self):
        if self.kind not in KIND_TAGS:
            raise KindError(f"unknown transform kind {self.kind!r}")
        if self.kind == PTS:
            _check_pts_params(self.T, self.n)

    @property
    def width(self):
        if self.kind == SN:
            return self.stds.shape[0]
        if self.kind == SM:
            return self.source_stds.shape[0]
        return None

    def to_sections(self):
        out = {"kind": np.array(KIND_TAGS[self.kind], dtype=np.int64)}
        if self.kind == SN:
            out["stds"] = self.stds
        elif self.kind == SM:
            out["source_stds"] = self.source_stds
            out["target_stds"] = self.target_stds
        elif self.kind == PTS:
            out["T"] = np.array(self.T, dtype=np.float64)
            out["n"] = np.array(self.n, dtype=np.float64)
        return out

    @classmethod
    def from_sections(cls, s):
        kind = TAG_KINDS[int(s["kind"])]
        if kind == PTS:
            return cls(PTS, T=float(s["T"]), n=float(s["n"]))
        return cls(kind, stds=s.get("stds"), source_stds=s.get("source_stds"), target_stds=s.get("target_stds"))


def _check_pts_params(T, n):
    if not T > 0:
        raise ParamError(f"PTS temperature must be positive, got {T}")
    if not n >= 1:
        raise ParamError(f"PTS exponent n must be >= 1, got {n}")


def _std_vector(stds, width, name):
    stds = np.asarray(stds, dtype=np.float64).reshape(-1)
    if stds.shape[0] != width:
        raise DimensionError(f"{name} has length {stds.shape[0]}, features have width {width}")
    return np.maximum(stds, STD_FLOOR)


def pts(values, T=DEFAULT_T, n=DEFAULT_N):
    """Power temperature scaling, ``sign(f) * |f / T| ** (1 / n)``."""
    _check_pts_params(T, n)
    f = np.asarray(values, dtype=np.float64)
    return np.sign(f) * np.abs(f / T) ** (1.0 / n)


def scale_normalize(values, stds):
    x = as_feature_matrix(values)
    return x / _std_vector(stds, x.shape[1], "stds")


def std_match(values, source_stds, target_stds):
    x = as_feature_matrix(values)
    source = _std_vector(source_stds, x.shape[1], "source_stds")
    target = np.asarray(target_stds, dtype=np.float64).reshape(-1)
    if target.shape[0] != x.shape[1]:
        raise DimensionError(f"target_stds has length {target.shape[0]}, features have width {x.shape[1]}")
    return x * (target / source)


def fit_transform(aligned, kind, pre_svd_stats=None, T=DEFAULT_T, n=DEFAULT_N):
    """Fit a :class:`TargetTransform` on the aligned distillation targets.

    For ``sm`` the target stds are the ``D_s`` largest channel stds of the
    teacher features before alignment, sorted descending.
    """
    if kind == IDENTITY:
        return TargetTransform(IDENTITY)
    if kind == PTS:
        return TargetTransform(PTS, T=float(T), n=float(n))
    x = as_feature_matrix(aligned, "aligned")
    stats = channel_stats(x)
    if kind == SN:
        return TargetTransform(SN, stds=np.maximum(stats.stds, STD_FLOOR))
    if kind == SM:
        if pre_svd_stats is None:
            raise MissingStatsError("std matching needs the pre-alignment channel stats")
        pre = np.asarray(pre_svd_stats.stds if hasattr(pre_svd_stats, "stds") else pre_svd_stats, dtype=np.float64)
        d_s = x.shape[1]
        if pre.shape[0] < d_s:
            raise DimensionError(f"pre-alignment stats have {pre.shape[0]} channels, need >= {d_s}")
        target = np.sort(pre)[::-1][:d_s].copy()
        return TargetTransform(SM, source_stds=np.maximum(stats.stds, STD_FLOOR), target_stds=target)
    raise KindError(f"unknown transform kind {kind!r}")


def apply_transform(t, values):
    if t.kind == IDENTITY:
        return as_feature_matrix(values).copy()
    if t.kind == PTS:
        return pts(as_feature_matrix(values), t.T, t.n)
    if t.kind == SN:
        return scale_normalize(values, t.stds)
    return std_match(values, t.source_stds, t.target_stds)
