"""Kernel-alignment metrics between two sample-aligned representations.

Neighbor-based metrics (mutual k-NN, CKNNA, cycle, edit, LCS) share
``knn_ranking``: neighbors are the k rows with the largest inner product (or
smallest Euclidean distance), self excluded, ties going to the lower index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .core import (
    AlignmentError,
    AlignmentScore,
    NumericalError,
    ValidationError,
    as_features,
    as_kernel,
    double_center,
    gram,
)

SIMILARITIES = ("inner_product", "euclidean")


@dataclass(frozen=True)
class NeighborRanking:
    k: int
    lists: np.ndarray  # n x k, nearest first

    def sets(self) -> "NeighborSets":
        return NeighborSets(self.k, [frozenset(map(int, row)) for row in self.lists])

    def mask(self) -> np.ndarray:
        n = self.lists.shape[0]
        m = np.zeros((n, n), dtype=bool)
        m[np.arange(n)[:, None], self.lists] = True
        return m


@dataclass(frozen=True)
class NeighborSets:
    k: int
    sets: list


def _check_k(k: int, n: int) -> int:
    if int(k) != k or not 1 <= k <= n - 1:
        raise ValidationError(f"k must be an integer in [1, {n - 1}], got {k}")
    return int(k)


def _check_pair(F, G):
    F, G = as_features(F), as_features(G)
    if F.n != G.n:
        raise ValidationError(f"sample counts differ: {F.n} vs {G.n}")
    if F.sample_ids != G.sample_ids:
        raise ValidationError("sample ids of the two feature matrices are not aligned")
    return F, G


def _similarity(F, similarity: str) -> np.ndarray:
    if similarity == "inner_product":
        return gram(F).data.copy()
    if similarity == "euclidean":
        return -cdist(F.data, F.data, "sqeuclidean")
    raise ValidationError(f"unknown similarity {similarity!r}; expected one of {SIMILARITIES}")


def knn_ranking(F, k: int, similarity: str = "inner_product") -> NeighborRanking:
    F = as_features(F)
    k = _check_k(k, F.n)
    S = _similarity(F, similarity)
    np.fill_diagonal(S, -np.inf)
    # stable sort on the negated similarity keeps ascending index among ties
    order = np.argsort(-S, axis=1, kind="stable")[:, :k]
    return NeighborRanking(k, order)


def knn_sets(F, k: int, similarity: str = "inner_product") -> NeighborSets:
    return knn_ranking(F, k, similarity).sets()


def mutual_knn(F, G, k: int = 10, similarity: str = "inner_product") -> AlignmentScore:
    F, G = _check_pair(F, G)
    k = _check_k(k, F.n)
    both = knn_ranking(F, k, similarity).mask() & knn_ranking(G, k, similarity).mask()
    value = both.sum(axis=1).mean() / k
    return AlignmentScore("mutual_knn", value, {"k": k, "similarity": similarity})


def hsic_biased(K, L) -> float:
    K, L = as_kernel(K), as_kernel(L)
    if K.n != L.n:
        raise ValidationError(f"kernel sizes differ: {K.n} vs {L.n}")
    n = K.n
    if n < 2:
        raise ValidationError("HSIC needs n >= 2")
    Kc, Lc = double_center(K).data, double_center(L).data
    # tr(Kc Lc) for symmetric matrices is the elementwise product sum
    return float((Kc * Lc).sum() / (n - 1) ** 2)


def hsic_unbiased(K, L) -> float:
    """Unbiased HSIC estimator (Song et al., 2012) on kernels with zeroed diagonals."""
    K, L = as_kernel(K), as_kernel(L)
    if K.n != L.n:
        raise ValidationError(f"kernel sizes differ: {K.n} vs {L.n}")
    n = K.n
    if n < 4:
        raise ValidationError(f"unbiased HSIC needs n >= 4, got {n}")
    Kt = K.data.copy()
    Lt = L.data.copy()
    np.fill_diagonal(Kt, 0.0)
    np.fill_diagonal(Lt, 0.0)
    kl = (Kt * Lt).sum()
    ksum, lsum = Kt.sum(), Lt.sum()
    cross = Kt.sum(axis=1) @ Lt.sum(axis=1)
    total = kl + ksum * lsum / ((n - 1) * (n - 2)) - 2.0 * cross / (n - 2)
    return float(total / (n * (n - 3)))


def cka(K, L, estimator: str = "biased") -> AlignmentScore:
    if estimator == "biased":
        hsic = hsic_biased
    elif estimator == "unbiased":
        hsic = hsic_unbiased
    else:
        raise ValidationError(f"unknown estimator {estimator!r}")
    kk, ll = hsic(K, K), hsic(L, L)
    if kk <= 0 or ll <= 0:
        raise NumericalError("CKA undefined: a kernel has zero self-HSIC (constant features?)")
    value = hsic(K, L) / np.sqrt(kk * ll)
    return AlignmentScore("cka", value, {"estimator": estimator})


def cka_offdiagonal(K, L) -> AlignmentScore:
    """CKA whose HSIC terms sum over i != j only (the CKNNA k = n-1 limit)."""
    Kc, Lc = double_center(K).data, double_center(L).data

    def term(A, B):
        return (A * B).sum() - np.diag(A) @ np.diag(B)

    kk, ll = term(Kc, Kc), term(Lc, Lc)
    if kk <= 0 or ll <= 0:
        raise NumericalError("off-diagonal CKA undefined: zero self-alignment")
    return AlignmentScore("cka", term(Kc, Lc) / np.sqrt(kk * ll), {"diagonal": "excluded"})


def mutual_mask(F, G, k: int, similarity: str = "inner_product") -> np.ndarray:
    """alpha(i, j): j is among the k nearest neighbors of i in both F and G."""
    F, G = _check_pair(F, G)
    k = _check_k(k, F.n)
    return knn_ranking(F, k, similarity).mask() & knn_ranking(G, k, similarity).mask()


def cknna(F, G, k: int = 10, similarity: str = "inner_product") -> AlignmentScore:
    F, G = _check_pair(F, G)
    alpha = mutual_mask(F, G, k, similarity)
    if not alpha.any():
        raise NumericalError(f"CKNNA undefined: no mutual nearest neighbors at k={k}")
    Kc = double_center(gram(F)).data
    Lc = double_center(gram(G)).data
    kk = (alpha * Kc * Kc).sum()
    ll = (alpha * Lc * Lc).sum()
    if kk <= 0 or ll <= 0:
        raise NumericalError("CKNNA undefined: zero masked self-alignment")
    value = (alpha * Kc * Lc).sum() / np.sqrt(kk * ll)
    return AlignmentScore("cknna", value, {"k": int(k), "similarity": similarity})


def _svd_reduce(X: np.ndarray, variance_kept: float) -> np.ndarray:
    scale = np.linalg.norm(X)
    X = X - X.mean(axis=0)
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    energy = s**2
    total = energy.sum()
    # centering leaves round-off behind when all rows are equal
    if total == 0 or s[0] <= 1e-12 * scale:
        raise NumericalError("SVCCA: feature matrix has no variance")
    frac = np.cumsum(energy) / total
    keep = int(np.searchsorted(frac, variance_kept - 1e-12) + 1)
    keep = min(keep, int((s > s[0] * 1e-10).sum()))
    return U[:, :keep] * s[:keep]


def canonical_correlations(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Canonical correlations of two column-centered data matrices via QR."""
    Qx, Rx = np.linalg.qr(X)
    Qy, Ry = np.linalg.qr(Y)
    for R in (Rx, Ry):
        d = np.abs(np.diag(R))
        if d.size == 0 or d.min() <= 1e-10 * d.max():
            raise NumericalError("SVCCA: rank collapse after projection")
    rho = np.linalg.svd(Qx.T @ Qy, compute_uv=False)
    return np.clip(rho, 0.0, 1.0)


def svcca(F, G, variance_kept: float = 0.99) -> AlignmentScore:
    F, G = _check_pair(F, G)
    if not 0 < variance_kept <= 1:
        raise ValidationError(f"variance_kept must be in (0, 1], got {variance_kept}")
    X = _svd_reduce(F.data, variance_kept)
    Y = _svd_reduce(G.data, variance_kept)
    if max(X.shape[1], Y.shape[1]) >= F.n:
        raise NumericalError("SVCCA: need more samples than retained dimensions")
    rho = canonical_correlations(X - X.mean(axis=0), Y - Y.mean(axis=0))
    return AlignmentScore("svcca", rho.mean(), {"variance_kept": variance_kept})


def cycle_knn(F, G, k: int = 10, similarity: str = "inner_product") -> AlignmentScore:
    """Cycle consistency of nearest neighbors from F through G.

    For each i, let j be its nearest neighbor in F. The cycle closes in a
    representation when i is among the k nearest neighbors of j there. The
    score is the fraction of samples whose cycle closes in G among those
    whose cycle closes in F itself, so ``cycle_knn(F, F) == 1``. Not
    symmetric in its arguments.
    """
    F, G = _check_pair(F, G)
    k = _check_k(k, F.n)
    idx = np.arange(F.n)
    first = knn_ranking(F, 1, similarity).lists[:, 0]
    closes_f = knn_ranking(F, k, similarity).mask()[first, idx]
    closes_g = knn_ranking(G, k, similarity).mask()[first, idx]
    # the closest pair is mutual, so this only trips on degenerate ties
    if not closes_f.any():
        raise NumericalError("cycle_knn undefined: no neighbor cycle closes in F")
    value = (closes_f & closes_g).sum() / closes_f.sum()
    return AlignmentScore("cycle_knn", value, {"k": k, "similarity": similarity})


def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def edit_knn(F, G, k: int = 10, similarity: str = "inner_product") -> AlignmentScore:
    F, G = _check_pair(F, G)
    k = _check_k(k, F.n)
    rf = knn_ranking(F, k, similarity).lists.tolist()
    rg = knn_ranking(G, k, similarity).lists.tolist()
    dist = np.mean([levenshtein(a, b) for a, b in zip(rf, rg)])
    return AlignmentScore("edit_knn", 1.0 - dist / k, {"k": k, "similarity": similarity})


def lcs_knn(F, G, k: int = 10, similarity: str = "inner_product") -> AlignmentScore:
    F, G = _check_pair(F, G)
    k = _check_k(k, F.n)
    rf = knn_ranking(F, k, similarity).lists.tolist()
    rg = knn_ranking(G, k, similarity).lists.tolist()
    common = np.mean([lcs_length(a, b) for a, b in zip(rf, rg)])
    return AlignmentScore("lcs_knn", common / k, {"k": k, "similarity": similarity})


def _cka_features(F, G, estimator: str = "biased") -> AlignmentScore:
    F, G = _check_pair(F, G)
    return cka(gram(F), gram(G), estimator)


def _unbiased_cka_features(F, G) -> AlignmentScore:
    s = _cka_features(F, G, "unbiased")
    return AlignmentScore("unbiased_cka", s.value, s.params)


METRICS: dict[str, Callable[..., AlignmentScore]] = {
    "mutual_knn": mutual_knn,
    "cka": _cka_features,
    "unbiased_cka": _unbiased_cka_features,
    "cknna": cknna,
    "svcca": svcca,
    "cycle_knn": cycle_knn,
    "edit_knn": edit_knn,
    "lcs_knn": lcs_knn,
}

# which keyword parameters each metric accepts
METRIC_PARAMS = {
    "mutual_knn": ("k", "similarity"),
    "cka": ("estimator",),
    "unbiased_cka": (),
    "cknna": ("k", "similarity"),
    "svcca": ("variance_kept",),
    "cycle_knn": ("k", "similarity"),
    "edit_knn": ("k", "similarity"),
    "lcs_knn": ("k", "similarity"),
}

SYMMETRIC_METRICS = frozenset(METRICS) - {"cycle_knn"}


def compute_metric(name: str, F, G, **params) -> AlignmentScore:
    """Dispatch by metric name; parameters a metric does not take are ignored."""
    if name not in METRICS:
        raise ValidationError(f"unknown metric {name!r}; choose from {sorted(METRICS)}")
    kwargs = {p: params[p] for p in METRIC_PARAMS[name] if p in params}
    return METRICS[name](F, G, **kwargs)


@dataclass(frozen=True)
class LayerSearch:
    score: AlignmentScore
    pair: tuple[int, int]
    grid: np.ndarray  # scores per (i, j); NaN where the metric failed
    errors: dict


def best_layer_alignment(layers_f, layers_g, metric: str | Callable, **params) -> LayerSearch:
    """Best score over every (layer of F, layer of G) pair; ties go to the first pair."""
    if not layers_f or not layers_g:
        raise ValidationError("both layer lists must be non-empty")
    fn = metric if callable(metric) else (lambda F, G: compute_metric(metric, F, G, **params))
    grid = np.full((len(layers_f), len(layers_g)), np.nan)
    errors = {}
    best = None
    for i, F in enumerate(layers_f):
        for j, G in enumerate(layers_g):
            try:
                s = fn(F, G)
            except AlignmentError as exc:
                errors[(i, j)] = str(exc)
                continue
            grid[i, j] = s.value
            if best is None or s.value > best[0].value:
                best = (s, (i, j))
    if best is None:
        raise NumericalError(f"metric failed on every layer pair: {next(iter(errors.values()))}")
    return LayerSearch(best[0], best[1], grid, errors)
