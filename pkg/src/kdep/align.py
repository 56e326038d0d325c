"""Teacher-to-student feature width alignment.

Non-parametric aligners map a teacher feature row of width D_t to width
D_s <= D_t with no learned parameters: SVD projection onto the top right
singular vectors of the centred teacher features, variance-ranked or random
channel selection, and nearest-neighbour interpolation. The parametric
baseline instead attaches a learnable D_s -> D_t head to the student.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .container import seed_from_section, seed_section
from .errors import DimensionError, KindError
from .linalg import SvdFactors, as_feature_matrix, channel_stats, svd_topk
from .nn import ParametricHead
from .rng import SplitMix64

SVD = "svd"
CS_VAR = "cs_var"
CS_RAND = "cs_rand"
INTERP = "interp"
PARAMETRIC = "parametric"

KIND_TAGS = {SVD: 1, CS_VAR: 2, CS_RAND: 3, INTERP: 4, PARAMETRIC: 5}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}
NON_PARAMETRIC = (SVD, CS_VAR, CS_RAND, INTERP)


@dataclass(frozen=True)
class AlignmentArtifact:
    kind: str
    d_teacher: int
    d_student: int
    mean: Optional[np.ndarray] = None
    factors: Optional[SvdFactors] = None
    indices: Optional[np.ndarray] = None
    seed: Optional[int] = None
    head: Optional[ParametricHead] = None

    def to_sections(self):
        if self.kind == PARAMETRIC:
            raise KindError("parametric heads are trained with the student, not persisted as aligners")
        out = {
            "kind": np.array(KIND_TAGS[self.kind], dtype=np.int64),
            "d_teacher": np.array(self.d_teacher, dtype=np.int64),
            "d_student": np.array(self.d_student, dtype=np.int64),
        }
        if self.kind == SVD:
            out["mean"] = self.mean
            out["singular_values"] = self.factors.singular_values
            out["right_vectors"] = self.factors.right_vectors
        if self.kind in (CS_VAR, CS_RAND):
            out["indices"] = self.indices
        if self.kind == CS_RAND:
            out["seed"] = seed_section(self.seed)
        return out

    @classmethod
    def from_sections(cls, s):
        kind = TAG_KINDS[int(s["kind"])]
        factors = None
        if kind == SVD:
            factors = SvdFactors(s["singular_values"], s["right_vectors"])
        return cls(
            kind=kind,
            d_teacher=int(s["d_teacher"]),
            d_student=int(s["d_student"]),
            mean=s.get("mean"),
            factors=factors,
            indices=s.get("indices"),
            seed=seed_from_section(s["seed"]) if "seed" in s else None,
        )


def _check_widths(d_teacher, d_student):
    if d_student < 1 or d_student > d_teacher:
        raise DimensionError(f"need 1 <= d_student <= d_teacher, got {d_student} and {d_teacher}")


def fit_svd_projector(teacher_feats, d_student):
    """Centre the teacher features and keep their top ``d_student`` right singular vectors."""
    x = as_feature_matrix(teacher_feats, "teacher_feats")
    n, d_teacher = x.shape
    _check_widths(d_teacher, d_student)
    if n < d_student:
        raise DimensionError(f"need at least {d_student} samples to fit, got {n}")
    mean = x.mean(axis=0)
    factors = svd_topk(x - mean, d_student)
    return AlignmentArtifact(SVD, d_teacher, d_student, mean=mean, factors=factors)


def fit_channel_select(teacher_feats, d_student, mode="var", seed=0):
    """Keep ``d_student`` teacher channels, by largest variance or at random.

    Variance ties go to the lower channel index; indices are stored ascending.
    """
    x = as_feature_matrix(teacher_feats, "teacher_feats")
    d_teacher = x.shape[1]
    _check_widths(d_teacher, d_student)
    if mode == "var":
        variances = channel_stats(x).stds ** 2
        keep = np.sort(np.argsort(-variances, kind="stable")[:d_student])
        return AlignmentArtifact(CS_VAR, d_teacher, d_student, indices=keep.astype(np.int64))
    if mode == "rand":
        keep = SplitMix64(seed).sample(d_teacher, d_student)
        return AlignmentArtifact(CS_RAND, d_teacher, d_student, indices=keep.astype(np.int64), seed=int(seed))
    raise KindError(f"mode must be 'var' or 'rand', got {mode!r}")


def make_interpolation(d_teacher, d_student):
    _check_widths(d_teacher, d_student)
    return AlignmentArtifact(INTERP, d_teacher, d_student)


def interpolation_indices(d_teacher, d_student):
    """Half-pixel nearest neighbour: output j reads input floor((j + 0.5) * D_t / D_s)."""
    j = np.arange(d_student)
    return ((2 * j + 1) * d_teacher) // (2 * d_student)


def make_parametric_head(d_student, d_teacher, position="pre_relu", seed=0):
    if d_student < 1 or d_teacher < 1:
        raise DimensionError("head widths must be positive")
    head = ParametricHead(d_student, d_teacher, position=position, seed=seed)
    return AlignmentArtifact(PARAMETRIC, int(d_teacher), int(d_student), head=head)


def apply_alignment(artifact, feats):
    """Map teacher features of width D_t to the student width D_s."""
    if artifact.kind == PARAMETRIC:
        raise KindError("the parametric head runs inside the training graph, not as a fixed aligner")
    x = as_feature_matrix(feats)
    if x.shape[1] != artifact.d_teacher:
        raise DimensionError(f"expected width {artifact.d_teacher}, got {x.shape[1]}")
    if artifact.kind == SVD:
        return (x - artifact.mean) @ artifact.factors.right_vectors
    if artifact.kind in (CS_VAR, CS_RAND):
        return x[:, artifact.indices]
    if artifact.kind == INTERP:
        return x[:, interpolation_indices(artifact.d_teacher, artifact.d_student)]
    raise KindError(f"unknown alignment kind {artifact.kind!r}")


def reconstruction_error(artifact, feats):
    """Mean squared error of rebuilding width-D_t rows from their aligned form.

    SVD rebuilds through V V^T around the stored mean; channel selection
    rebuilds kept channels exactly and dropped channels at their mean over
    ``feats``, so both are compared as linear reconstructions of centred data.
    """
    x = as_feature_matrix(feats)
    if artifact.kind == SVD:
        v = artifact.factors.right_vectors
        centred = x - artifact.mean
        return float(np.mean((centred - centred @ v @ v.T) ** 2))
    if artifact.kind in (CS_VAR, CS_RAND):
        rebuilt = np.broadcast_to(x.mean(axis=0), x.shape).copy()
        rebuilt[:, artifact.indices] = x[:, artifact.indices]
        return float(np.mean((x - rebuilt) ** 2))
    raise KindError(f"no reconstruction rule for {artifact.kind!r}")


def fit_alignment(kind, teacher_feats, d_student, seed=0):
    """Dispatch by kind name for the non-parametric aligners."""
    if kind == SVD:
        return fit_svd_projector(teacher_feats, d_student)
    if kind == CS_VAR:
        return fit_channel_select(teacher_feats, d_student, "var")
    if kind == CS_RAND:
        return fit_channel_select(teacher_feats, d_student, "rand", seed)
    if kind == INTERP:
        return make_interpolation(as_feature_matrix(teacher_feats).shape[1], d_student)
    raise KindError(f"unknown alignment kind {kind!r}")
