"""Dense linear algebra used throughout the pipeline.

Feature matrices are plain 2-D float64 numpy arrays (rows are samples,
columns are channels). Truncated SVD is computed with a cyclic one-sided
Jacobi iteration so that results are deterministic and carry a fixed sign
convention.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError

MAX_SWEEPS = 30
JACOBI_TOL = 1e-12
TIE_TOL = 1e-12


def as_feature_matrix(x, name="features"):
    """Validate and return ``x`` as a finite, non-empty (N, D) float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must have at least one row and column, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class ChannelStats:
    means: np.ndarray
    stds: np.ndarray

    @property
    def channels(self):
        return self.means.shape[0]


@dataclass(frozen=True)
class SvdFactors:
    singular_values: np.ndarray
    right_vectors: np.ndarray

    @property
    def k(self):
        return self.singular_values.shape[0]


def channel_stats(x):
    """Per-channel mean and population (divide-by-N) standard deviation."""
    x = as_feature_matrix(x)
    means = x.mean(axis=0)
    stds = np.sqrt(np.mean((x - means) ** 2, axis=0))
    return ChannelStats(means=means, stds=stds)


def std_ratio(stats, eps=1e-12):
    """Largest channel std over the smallest, with the denominator floored at ``eps``.

    ``stats`` may be a :class:`ChannelStats` or a bare vector of stds.
    """
    stds = stats.stds if isinstance(stats, ChannelStats) else np.asarray(stats, dtype=np.float64)
    if eps <= 0:
        raise ValueError("eps must be positive")
    return float(np.max(stds) / max(float(np.min(stds)), eps))


def _one_sided_jacobi(m):
    """Orthogonalise the columns of ``m`` by plane rotations.

    Returns (column norms, accumulated right rotation V) for the input in its
    original column order.
    """
    m = m.copy()
    d = m.shape[1]
    v = np.eye(d)
    # columns at rounding-noise level carry no direction; leave them alone
    negligible = (max(m.shape) * np.finfo(np.float64).eps) ** 2 * float(np.sum(m * m))
    for _ in range(MAX_SWEEPS):
        rotated = False
        for p in range(d - 1):
            for q in range(p + 1, d):
                mp, mq = m[:, p], m[:, q]
                alpha = mp @ mp
                beta = mq @ mq
                gamma = mp @ mq
                if min(alpha, beta) <= negligible or abs(gamma) <= JACOBI_TOL * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if abs(zeta) > 1e150:
                    t = 0.5 / zeta
                else:
                    t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * mp - s * mq
                m[:, q] = s * mp + c * mq
                m[:, p] = new_p
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if not rotated:
            return np.sqrt(np.sum(m * m, axis=0)), v
    raise NumericError(f"one-sided Jacobi did not converge within {MAX_SWEEPS} sweeps")


def _descending_order(values):
    """Indices sorting ``values`` descending; near-equal values keep computation order."""
    order = list(range(values.shape[0]))
    # insertion sort keeps the comparison rule explicit and the sort stable
    for i in range(1, len(order)):
        j = i
        while j > 0:
            a, b = order[j - 1], order[j]
            va, vb = values[a], values[b]
            if abs(va - vb) <= TIE_TOL * max(1.0, abs(va), abs(vb)):
                swap = a > b
            else:
                swap = va < vb
            if not swap:
                break
            order[j - 1], order[j] = b, a
            j -= 1
    return np.array(order, dtype=np.int64)


def _canonical_completion(basis, d, count):
    """Extend orthonormal ``basis`` (d x r) with ``count`` canonical-derived vectors."""
    cols = [basis[:, i] for i in range(basis.shape[1])]
    added = []
    for i in range(d):
        if len(added) == count:
            break
        e = np.zeros(d)
        e[i] = 1.0
        for _ in range(2):
            for b in cols:
                e -= (b @ e) * b
        norm = np.linalg.norm(e)
        if norm > 1e-8:
            e /= norm
            cols.append(e)
            added.append(e)
    return np.stack(added, axis=1) if added else np.zeros((d, 0))


def _apply_sign_convention(v):
    v = v.copy()
    for j in range(v.shape[1]):
        # argmax returns the lowest index among ties
        i = int(np.argmax(np.abs(v[:, j])))
        if v[i, j] < 0:
            v[:, j] = -v[:, j]
    return v


def svd_topk(x, k):
    """Top-``k`` singular values and right singular vectors of ``x``.

    Parameters
    ----------
    x : array_like, shape (N, D)
    k : int
        Retained rank, ``1 <= k <= D``.

    Returns
    -------
    SvdFactors
        Nonincreasing singular values and a (D, k) matrix of orthonormal
        right singular vectors, each column signed so that its largest
        magnitude entry is nonnegative. Directions with zero singular value
        are filled with canonical basis vectors outside the span of the
        others, lowest index first.
    """
    x = as_feature_matrix(x)
    n, d = x.shape
    if not 1 <= k <= d:
        raise DimensionError(f"k must lie in [1, {d}], got {k}")
    # Reduce a tall matrix to its D x D triangular factor; R^T R is the Gram matrix.
    work = np.linalg.qr(x, mode="r") if n > d else x
    norms, v = _one_sided_jacobi(work)
    order = _descending_order(norms)
    sigma = norms[order]
    v = v[:, order]

    zero_tol = max(n, d) * np.finfo(np.float64).eps * (sigma[0] if d else 0.0)
    nonzero = int(np.sum(sigma > zero_tol)) if sigma[0] > 0 else 0
    if nonzero < d:
        sigma = sigma.copy()
        sigma[nonzero:] = 0.0
        basis = v[:, :nonzero]
        v = np.concatenate([basis, _canonical_completion(basis, d, d - nonzero)], axis=1)
    v = _apply_sign_convention(v[:, :k])
    return SvdFactors(singular_values=sigma[:k].copy(), right_vectors=v)
