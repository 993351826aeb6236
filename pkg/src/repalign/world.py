"""Discrete event worlds, windowed cooccurrence tables, and PMI kernels.

A world is a time-homogeneous Markov chain over ``N`` events observed for
``horizon`` steps. Two observations cooccur when they are at most ``window``
steps apart. By default the same-time pair (t, t) is not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import NumericalError, ValidationError, sym_eig

# sequences per independently seeded sampling chunk
SAMPLE_CHUNK = 10_000


def _readonly(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DiscreteWorld:
    transition: np.ndarray
    initial: np.ndarray
    horizon: int
    window: int
    include_same_time: bool = False

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] < 1:
            raise ValidationError(f"transition must be square N x N, got shape {P.shape}")
        if (P < 0).any() or not np.isfinite(P).all():
            raise ValidationError("transition has negative or non-finite entries")
        sums = P.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1) > 1e-12)
        if bad.size:
            r = int(bad[0])
            raise ValidationError(f"transition row {r} sums to {sums[r]!r}, not 1")
        p0 = np.asarray(self.initial, dtype=np.float64)
        if p0.shape != (P.shape[0],) or (p0 < 0).any() or abs(p0.sum() - 1) > 1e-12:
            raise ValidationError("initial must be a probability vector of length N")
        if int(self.horizon) != self.horizon or self.horizon < 2:
            raise ValidationError(f"horizon must be an integer >= 2, got {self.horizon}")
        if int(self.window) != self.window or not 1 <= self.window < self.horizon:
            raise ValidationError(f"window must satisfy 1 <= window < horizon, got {self.window}")
        object.__setattr__(self, "transition", _readonly(P))
        object.__setattr__(self, "initial", _readonly(p0))
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "window", int(self.window))

    @property
    def N(self) -> int:
        return self.transition.shape[0]

    @classmethod
    def stationary_start(cls, transition, horizon, window, **kw) -> "DiscreteWorld":
        """World whose initial distribution is a stationary distribution of the chain."""
        P = np.asarray(transition, dtype=np.float64)
        w, V = np.linalg.eig(P.T)
        v = np.real(V[:, np.argmin(np.abs(w - 1))])
        v = np.abs(v) / np.abs(v).sum()
        return cls(P, v, horizon, window, **kw)


@dataclass(frozen=True)
class ObservationMap:
    """Bijection from event index to observation symbol index."""

    permutation: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.permutation)
        if p.ndim != 1 or not np.array_equal(np.sort(p), np.arange(p.size)):
            raise ValidationError("observation map must be a permutation of 0..N-1")
        object.__setattr__(self, "permutation", _readonly(p, np.intp))

    @property
    def N(self) -> int:
        return self.permutation.size

    def inverse(self) -> "ObservationMap":
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(self.N)
        return ObservationMap(inv)

    def then(self, other: "ObservationMap") -> "ObservationMap":
        """Apply self, then other."""
        return ObservationMap(other.permutation[self.permutation])

    @classmethod
    def random(cls, N: int, seed: int) -> "ObservationMap":
        return cls(np.random.default_rng(seed).permutation(N))


@dataclass(frozen=True)
class CooccurrenceTable:
    """Symmetric joint over symbol pairs and its marginal.

    ``labels`` optionally names what each row stands for (e.g. color bins).
    """

    joint: np.ndarray
    marginal: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        J = np.asarray(self.joint, dtype=np.float64)
        if J.ndim != 2 or J.shape[0] != J.shape[1]:
            raise ValidationError(f"joint must be square, got shape {J.shape}")
        if (J < 0).any() or not np.isfinite(J).all():
            raise ValidationError("joint has negative or non-finite entries")
        if np.abs(J - J.T).max(initial=0.0) > 1e-12:
            raise ValidationError("joint is not symmetric")
        if abs(J.sum() - 1) > 1e-10:
            raise ValidationError(f"joint sums to {J.sum()!r}, not 1")
        m = J.sum(axis=1) if self.marginal is None else np.asarray(self.marginal, dtype=np.float64)
        if m.shape != (J.shape[0],) or np.abs(m - J.sum(axis=1)).max() > 1e-10:
            raise ValidationError("marginal does not match the row sums of joint")
        object.__setattr__(self, "joint", _readonly(J))
        object.__setattr__(self, "marginal", _readonly(m))
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if len(labels) != J.shape[0]:
                raise ValidationError("labels length does not match the table size")
            object.__setattr__(self, "labels", _readonly(labels, labels.dtype))

    @property
    def N(self) -> int:
        return self.joint.shape[0]

    @classmethod
    def from_counts(cls, counts, labels=None) -> "CooccurrenceTable":
        """Symmetrize a pair-count matrix and normalize it to total mass 1."""
        C = np.asarray(counts, dtype=np.float64)
        S = C + C.T
        total = S.sum()
        if total <= 0:
            raise ValidationError("no cooccurrence counts")
        return cls(S / total, labels=labels)


@dataclass(frozen=True)
class PmiKernel:
    data: np.ndarray
    support_mask: np.ndarray

    @property
    def N(self) -> int:
        return self.data.shape[0]

    @property
    def full_support(self) -> bool:
        return bool(self.support_mask.all())


def exact_cooccurrence(W: DiscreteWorld) -> CooccurrenceTable:
    """Exact windowed cooccurrence by marginalizing the chain over all (t, t') pairs."""
    N, T, L = W.N, W.horizon, W.window
    marg = np.empty((T, N))
    marg[0] = W.initial
    for t in range(1, T):
        marg[t] = marg[t - 1] @ W.transition
    # M[a, b] = sum over t < t' <= t + L of P(X_t = a, X_t' = b)
    M = np.zeros((N, N))
    step = np.eye(N)
    for lag in range(1, L + 1):
        step = step @ W.transition
        mass = marg[: T - lag].sum(axis=0)
        M += mass[:, None] * step
    S = M + M.T
    if W.include_same_time:
        S += np.diag(marg.sum(axis=0))
    return CooccurrenceTable(S / S.sum())


def sample_sequences(W: DiscreteWorld, num: int, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(W.transition, axis=1)
    cdf[:, -1] = 1.0
    seq = np.empty((num, W.horizon), dtype=np.intp)
    p0 = np.cumsum(W.initial)
    p0[-1] = 1.0
    seq[:, 0] = np.searchsorted(p0, rng.random(num), side="right")
    for t in range(1, W.horizon):
        u = rng.random(num)
        seq[:, t] = (u[:, None] >= cdf[seq[:, t - 1]]).sum(axis=1)
    return seq


def _window_counts(W: DiscreteWorld, seq: np.ndarray) -> np.ndarray:
    N = W.N
    C = np.zeros(N * N, dtype=np.int64)
    for lag in range(1, W.window + 1):
        a, b = seq[:, :-lag].ravel(), seq[:, lag:].ravel()
        C += np.bincount(a * N + b, minlength=N * N)
    C = C.reshape(N, N)
    C = C + C.T
    if W.include_same_time:
        C += np.diag(np.bincount(seq.ravel(), minlength=N)).astype(np.int64)
    return C


def empirical_cooccurrence(W: DiscreteWorld, num_sequences: int, seed: int, workers: int = 1) -> CooccurrenceTable:
    """Monte-Carlo cooccurrence table from ``num_sequences`` sampled sequences.

    Sequences are drawn in fixed-size chunks, each with its own child seed,
    and integer counts are summed, so the result depends on ``seed`` only.
    """
    if int(num_sequences) != num_sequences or num_sequences < 1:
        raise ValidationError("num_sequences must be a positive integer")
    sizes = [SAMPLE_CHUNK] * (num_sequences // SAMPLE_CHUNK)
    if num_sequences % SAMPLE_CHUNK:
        sizes.append(num_sequences % SAMPLE_CHUNK)
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))

    def chunk(i):
        return _window_counts(W, sample_sequences(W, sizes[i], np.random.default_rng(seeds[i])))

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(chunk, range(len(sizes))))
    else:
        parts = [chunk(i) for i in range(len(sizes))]
    counts = np.sum(parts, axis=0)
    return CooccurrenceTable(counts / counts.sum())


def total_variation(A: CooccurrenceTable, B: CooccurrenceTable) -> float:
    return 0.5 * float(np.abs(A.joint - B.joint).sum())


def pmi_kernel(C: CooccurrenceTable) -> PmiKernel:
    """log joint - log marginal_i - log marginal_j; cells with zero joint are masked (set to 0)."""
    zero = np.flatnonzero(C.marginal <= 0)
    if zero.size:
        name = C.labels[zero[0]] if C.labels is not None else int(zero[0])
        raise ValidationError(f"symbol {name} never occurs (zero marginal); drop it before computing PMI")
    support = C.joint > 0
    logm = np.log(C.marginal)
    with np.errstate(divide="ignore"):
        # summing the two marginal logs first keeps K bitwise symmetric
        K = np.log(C.joint) - (logm[:, None] + logm[None, :])
    K = np.where(support, K, 0.0)
    K.setflags(write=False)
    support.setflags(write=False)
    return PmiKernel(K, support)


def apply_observation(C: CooccurrenceTable, m: ObservationMap) -> CooccurrenceTable:
    """Relabel events through ``m``: row a of the input becomes row m[a]."""
    if m.N != C.N:
        raise ValidationError(f"observation map has size {m.N}, table has {C.N}")
    p = m.permutation
    J = np.empty_like(C.joint)
    J[np.ix_(p, p)] = C.joint
    marg = np.empty_like(C.marginal)
    marg[p] = C.marginal
    labels = None
    if C.labels is not None:
        labels = np.empty_like(C.labels)
        labels[p] = C.labels
    return CooccurrenceTable(J, marg, labels)


def permute_kernel(K: np.ndarray, m: ObservationMap) -> np.ndarray:
    p = m.permutation
    out = np.empty_like(K)
    out[np.ix_(p, p)] = K
    return out


def _require_full_support(K: PmiKernel, what: str):
    if not K.full_support:
        i, j = np.argwhere(~K.support_mask)[0]
        raise ValidationError(f"{what} needs full support; cooccurrence ({i}, {j}) is zero")


def psd_shift_constant(K: PmiKernel) -> float:
    """C = -min_i mean_j K_ij, the shift that makes K + C diagonally dominant."""
    _require_full_support(K, "psd_shift_constant")
    return float(-K.data.mean(axis=1).min())


@dataclass(frozen=True)
class PropositionReport:
    rho_min: float
    delta: float
    condition_holds: bool
    C: float
    min_eigenvalue: float
    psd: bool

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def smoothness_condition(K: np.ndarray) -> tuple[float, float, bool]:
    """(rho_min, delta, holds) where holds means K_ii >= N*delta + log(rho_min) for all i."""
    N = K.shape[0]
    off = K[~np.eye(N, dtype=bool)]
    lo, hi = off.min(), off.max()
    delta = float(hi - lo)
    holds = bool((np.diag(K) >= N * delta + lo).all())
    return float(np.exp(lo)), delta, holds


def check_proposition(K: PmiKernel) -> PropositionReport:
    """Check that smoothness of the PMI kernel implies K + C*11^T is PSD."""
    _require_full_support(K, "check_proposition")
    A = K.data
    N = A.shape[0]
    if N < 2:
        raise ValidationError("check_proposition needs at least two symbols")
    off = A[~np.eye(N, dtype=bool)]
    if (off > 0).any():
        raise ValidationError(
            f"off-diagonal PMI entries must be <= 0 (max is {off.max():.4g}); "
            "the smoothness proposition only covers kernels bounded in (-inf, 0]"
        )
    rho_min, delta, holds = smoothness_condition(A)
    C = psd_shift_constant(K)
    shifted = A + C
    w, _ = sym_eig(0.5 * (shifted + shifted.T))
    min_eig = float(w[-1])
    psd = min_eig >= -1e-8 * max(np.abs(A).max(), 1.0)
    if holds and not psd:
        raise NumericalError(
            f"smoothness condition holds but K + C has eigenvalue {min_eig:.3e}; check kernel construction"
        )
    return PropositionReport(rho_min, delta, holds, C, min_eig, bool(psd))


def sticky_world(N: int, seed: int, stay: float | None = None, jitter: float = 0.02,
                 horizon: int = 8, window: int = 2) -> DiscreteWorld:
    """Chain that mostly stays put and otherwise jumps near-uniformly.

    Such worlds have a heavy PMI diagonal and nearly constant, non-positive
    off-diagonal PMI, which is the smooth regime.
    """
    rng = np.random.default_rng(seed)
    if stay is None:
        stay = rng.uniform(0.6, 0.9)
    off = 1.0 + jitter * rng.uniform(-1, 1, size=(N, N))
    np.fill_diagonal(off, 0.0)
    off = (1 - stay) * off / off.sum(axis=1, keepdims=True)
    P = off + stay * np.eye(N)
    P /= P.sum(axis=1, keepdims=True)
    return DiscreteWorld.stationary_start(P, horizon, window)
