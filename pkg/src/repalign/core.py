"""Dense-matrix foundation shared by every other module.

Feature matrices hold one sample per row. Kernels are the Gram matrices of
those rows. Everything here is float64 and immutable once constructed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.stats import rankdata


class AlignmentError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(AlignmentError, ValueError):
    """Bad input: shapes, ranges, malformed files or configs."""


class NumericalError(AlignmentError, ArithmeticError):
    """A computation could not produce a meaningful number."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FeatureMatrix:
    """n x d sample representations (rows are samples)."""

    data: np.ndarray
    sample_ids: tuple = ()

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValidationError(f"feature matrix must be 2-D, got shape {data.shape}")
        n, d = data.shape
        if n < 2 or d < 1:
            raise ValidationError(f"feature matrix needs n >= 2 and d >= 1, got {n}x{d}")
        bad = ~np.isfinite(data).all(axis=1)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ValidationError(f"non-finite entry in row {row}")
        ids = tuple(self.sample_ids) if len(self.sample_ids) else tuple(range(n))
        if len(ids) != n:
            raise ValidationError(f"{len(ids)} sample ids for {n} rows")
        if len(set(ids)) != n:
            raise ValidationError("sample ids are not unique")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "sample_ids", ids)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def take(self, idx: Sequence[int]) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=np.intp)
        return FeatureMatrix(self.data[idx], tuple(self.sample_ids[i] for i in idx))


@dataclass(frozen=True)
class GramKernel:
    """Symmetric n x n kernel matrix."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise ValidationError(f"kernel must be square, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValidationError("kernel has non-finite entries")
        scale = max(np.abs(data).max(initial=0.0), 1e-300)
        if np.abs(data - data.T).max(initial=0.0) > 1e-10 * scale:
            raise ValidationError("kernel is not symmetric")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def n(self) -> int:
        return self.data.shape[0]


NORMALIZED_METRICS = frozenset(
    {"mutual_knn", "cka", "cknna", "cycle_knn", "edit_knn", "lcs_knn", "svcca"}
)


@dataclass(frozen=True)
class AlignmentScore:
    metric_name: str
    value: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        v = float(self.value)
        if not np.isfinite(v):
            raise NumericalError(f"{self.metric_name} produced a non-finite score")
        lo = self._lower_bound()
        if lo is not None:
            # round-off can push exact-match scores a hair past 1
            if v < lo - 1e-9 or v > 1 + 1e-9:
                raise NumericalError(f"{self.metric_name} score {v} outside [{lo:g}, 1]")
            v = min(max(v, lo), 1.0)
        object.__setattr__(self, "value", v)

    def _lower_bound(self):
        if self.metric_name not in NORMALIZED_METRICS or self.params.get("estimator") == "unbiased":
            return None
        # masked cross terms are only Cauchy-Schwarz bounded
        if self.metric_name == "cknna" or self.params.get("diagonal") == "excluded":
            return -1.0
        return 0.0

    def to_dict(self) -> dict[str, Any]:
        return {"metric": self.metric_name, "value": self.value, "params": dict(self.params)}


def as_features(F) -> FeatureMatrix:
    return F if isinstance(F, FeatureMatrix) else FeatureMatrix(np.asarray(F, dtype=np.float64))


def as_kernel(K) -> GramKernel:
    return K if isinstance(K, GramKernel) else GramKernel(np.asarray(K, dtype=np.float64))


def gram(F) -> GramKernel:
    """Inner-product kernel of the rows of ``F``, exactly symmetric."""
    F = as_features(F)
    G = F.data @ F.data.T
    upper = np.triu(G)
    return GramKernel(upper + np.triu(G, 1).T)


def l2_normalize_rows(F) -> FeatureMatrix:
    F = as_features(F)
    norms = np.linalg.norm(F.data, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValidationError(f"cannot normalize zero row (sample_id={F.sample_ids[zero[0]]!r})")
    return FeatureMatrix(F.data / norms[:, None], F.sample_ids)


def clamp_outliers(F, percentile: float = 95.0) -> FeatureMatrix:
    """Cap every entry at the matrix-wide ``percentile`` (linear interpolation)."""
    F = as_features(F)
    if not 0 < percentile <= 100:
        raise ValidationError(f"percentile must be in (0, 100], got {percentile}")
    cap = np.percentile(F.data, percentile, method="linear")
    return FeatureMatrix(np.where(F.data > cap, cap, F.data), F.sample_ids)


def double_center(K) -> GramKernel:
    """HKH with H = I - 11^T/n."""
    K = as_kernel(K).data
    Kc = K - K.mean(axis=0, keepdims=True)
    Kc = Kc - Kc.mean(axis=1, keepdims=True)
    # average with the transpose so the result is symmetric to the last bit
    return GramKernel(0.5 * (Kc + Kc.T))


def spearman_rank_corr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ValidationError("spearman needs two vectors of equal length >= 2")
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    ra -= ra.mean()
    rb -= rb.mean()
    den = np.sqrt((ra @ ra) * (rb @ rb))
    if den == 0:
        raise ValidationError("spearman undefined for a constant vector")
    return float(np.clip((ra @ rb) / den, -1.0, 1.0))


def sym_eig(K) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues in descending order and the matching orthonormal eigenvectors."""
    K = as_kernel(K).data
    try:
        w, V = np.linalg.eigh(K)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"symmetric eigendecomposition did not converge for n={K.shape[0]}: {exc}") from exc
    order = np.argsort(w)[::-1]
    return w[order], V[:, order]
