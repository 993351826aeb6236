"""Colour cooccurrence experiment.

Quantize pixel colours, count which colours sit near each other in images,
turn the PMI of those counts into a dissimilarity, embed it in 3-D by
metric MDS and compare the result with CIELAB after a similarity alignment.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .core import NumericalError, ValidationError, spearman_rank_corr
from .world import CooccurrenceTable, pmi_kernel

PAIR_CHUNK = 50_000


@dataclass(frozen=True)
class ColorQuantizer:
    bins_per_channel: int = 8

    def __post_init__(self):
        b = self.bins_per_channel
        if int(b) != b or not 1 <= b <= 256:
            raise ValidationError(f"bins_per_channel must be an integer in [1, 256], got {b}")

    @property
    def total_bins(self) -> int:
        return self.bins_per_channel ** 3

    def index(self, rgb) -> np.ndarray:
        """Bin index of each 8-bit RGB triple (last axis)."""
        rgb = np.asarray(rgb)
        if rgb.shape[-1] != 3:
            raise ValidationError(f"expected RGB triples on the last axis, got shape {rgb.shape}")
        if rgb.dtype != np.uint8:
            if (rgb < 0).any() or (rgb > 255).any():
                raise ValidationError("RGB channels must lie in [0, 255]")
        b = self.bins_per_channel
        q = rgb.astype(np.int64) * b // 256
        return (q[..., 0] * b + q[..., 1]) * b + q[..., 2]

    def centers(self, idx) -> np.ndarray:
        """RGB coordinates (0-255 scale) of bin centres."""
        idx = np.asarray(idx, dtype=np.int64)
        b = self.bins_per_channel
        q = np.stack([idx // (b * b), (idx // b) % b, idx % b], axis=-1)
        return (q + 0.5) * (256.0 / b)


@dataclass(frozen=True)
class PixelPairSample:
    num_pairs: int = 300_000
    radius: int = 4
    seed: int = 0
    metric: str = "euclidean"

    def __post_init__(self):
        if self.num_pairs < 1 or self.radius < 1:
            raise ValidationError("num_pairs and radius must be positive")
        if self.metric not in ("euclidean", "chebyshev"):
            raise ValidationError(f"metric must be euclidean or chebyshev, got {self.metric!r}")

    def offsets(self) -> np.ndarray:
        r = self.radius
        dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
        dy, dx = dy.ravel(), dx.ravel()
        if self.metric == "euclidean":
            keep = dy * dy + dx * dx <= r * r
        else:
            keep = np.ones_like(dy, dtype=bool)
        keep &= (dy != 0) | (dx != 0)
        return np.stack([dy[keep], dx[keep]], axis=1)


@dataclass(frozen=True)
class Embedding3D:
    points: np.ndarray
    stress: float
    seed_of_best: int
    histories: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if not np.isfinite(self.points).all() or not self.stress >= 0:
            raise NumericalError("embedding has non-finite points or negative stress")


@dataclass(frozen=True)
class SimilarityTransform:
    rotation: np.ndarray
    scale: float
    translation: np.ndarray
    flipped: bool = False
    rmsd: float = float("nan")

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-10 or abs(np.linalg.det(R) - 1) > 1e-10:
            raise NumericalError("rotation is not proper orthogonal")
        if self.scale < 0:
            raise NumericalError("negative scale")

    def apply(self, points) -> np.ndarray:
        P = np.asarray(points, dtype=np.float64)
        if self.flipped:
            P = -P
        return self.scale * P @ self.rotation.T + self.translation


# ------------------------------------------------------------------ counting


def _as_images(images) -> list[np.ndarray]:
    out = []
    for i, im in enumerate(images):
        a = np.asarray(im)
        if a.ndim != 3 or a.shape[2] != 3 or a.dtype != np.uint8:
            raise ValidationError(f"image {i} must be an H x W x 3 uint8 array, got {a.shape} {a.dtype}")
        out.append(a)
    if not out:
        raise ValidationError("image corpus is empty")
    return out


def _sample_chunk(bins, shapes, offsets, n, seed):
    """Draw n pixel pairs; return their bin indices."""
    rng = np.random.default_rng(seed)
    k = rng.integers(len(bins), size=n)
    H, W = shapes[k, 0], shapes[k, 1]
    y = (rng.random(n) * H).astype(np.int64)
    x = (rng.random(n) * W).astype(np.int64)
    off = np.empty((n, 2), dtype=np.int64)
    todo = np.arange(n)
    # rejection keeps the second pixel uniform over in-bounds offsets
    while todo.size:
        o = offsets[rng.integers(len(offsets), size=todo.size)]
        yy, xx = y[todo] + o[:, 0], x[todo] + o[:, 1]
        ok = (yy >= 0) & (yy < H[todo]) & (xx >= 0) & (xx < W[todo])
        off[todo[ok]] = o[ok]
        todo = todo[~ok]
    a = np.empty(n, dtype=np.int64)
    b = np.empty(n, dtype=np.int64)
    for j in np.unique(k):
        sel = k == j
        a[sel] = bins[j][y[sel], x[sel]]
        b[sel] = bins[j][y[sel] + off[sel, 0], x[sel] + off[sel, 1]]
    return a, b


def count_cooccurrences(images, Q: ColorQuantizer, S: PixelPairSample, workers: int = 1,
                        pseudocount: float = 0.0) -> CooccurrenceTable:
    """Symmetric, normalized colour-pair table over the bins that occur.

    ``labels`` holds the quantizer bin index of each surviving row. A positive
    ``pseudocount`` is added to every surviving cell before normalizing, which
    gives the PMI full support on sparse corpora.
    """
    images = _as_images(images)
    if pseudocount < 0:
        raise ValidationError("pseudocount must be >= 0")
    shapes = np.array([im.shape[:2] for im in images], dtype=np.int64)
    offsets = S.offsets()
    for i, (h, w) in enumerate(shapes):
        if h * w < 2 or not (((np.abs(offsets[:, 0]) < h) & (np.abs(offsets[:, 1]) < w)).any()):
            raise ValidationError(f"image {i} ({h}x{w}) has no pixel pair within radius {S.radius}")
    bins = [Q.index(im) for im in images]
    sizes = [PAIR_CHUNK] * (S.num_pairs // PAIR_CHUNK)
    if S.num_pairs % PAIR_CHUNK:
        sizes.append(S.num_pairs % PAIR_CHUNK)
    seeds = np.random.SeedSequence(S.seed).spawn(len(sizes))
    jobs = [(bins, shapes, offsets, n, sd) for n, sd in zip(sizes, seeds)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(lambda j: _sample_chunk(*j), jobs))
    else:
        parts = [_sample_chunk(*j) for j in jobs]
    counts = np.zeros((Q.total_bins, Q.total_bins))
    for a, b in parts:
        np.add.at(counts, (a, b), 1.0)
    seen = np.flatnonzero(counts.sum(axis=0) + counts.sum(axis=1))
    sub = counts[np.ix_(seen, seen)]
    if pseudocount:
        sub = sub + pseudocount
    return CooccurrenceTable.from_counts(sub, labels=seen)


def pmi_dissimilarity(C: CooccurrenceTable) -> np.ndarray:
    """D = max(K_PMI) - K_PMI: symmetric, non-negative, zero at the PMI maximum."""
    K = pmi_kernel(C)
    if not K.full_support:
        raise ValidationError(
            "colour PMI has unobserved bin pairs; use fewer bins_per_channel, more pairs, or a pseudocount"
        )
    D = K.data.max() - K.data
    return 0.5 * (D + D.T)


# ----------------------------------------------------------------------- MDS


def _check_dissimilarity(D, dim):
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValidationError(f"dissimilarity must be square, got {D.shape}")
    if not np.isfinite(D).all() or (D < 0).any():
        raise ValidationError("dissimilarity must be finite and non-negative")
    if np.abs(D - D.T).max(initial=0.0) > 1e-10 * max(np.abs(D).max(initial=0.0), 1.0):
        raise ValidationError("dissimilarity is not symmetric")
    if dim < 1 or dim >= D.shape[0]:
        raise ValidationError(f"embedding dimension {dim} must be in [1, {D.shape[0] - 1}] for {D.shape[0]} items")
    D = 0.5 * (D + D.T)
    # only off-diagonal dissimilarities enter the stress
    np.fill_diagonal(D, 0.0)
    return D


def stress(X: np.ndarray, D: np.ndarray) -> float:
    """Raw stress: sum over i < j of (||x_i - x_j|| - D_ij)^2."""
    return float(((pdist(X) - squareform(D, checks=False)) ** 2).sum())


def classical_mds(D: np.ndarray, dim: int) -> np.ndarray:
    D = np.asarray(D, dtype=np.float64)
    M = D.shape[0]
    J = np.eye(M) - 1.0 / M
    B = -0.5 * J @ (D * D) @ J
    w, V = np.linalg.eigh(0.5 * (B + B.T))
    order = np.argsort(w)[::-1][:dim]
    return V[:, order] * np.sqrt(np.clip(w[order], 0.0, None))


def smacof(D: np.ndarray, X0: np.ndarray, max_iter: int = 300, rel_tol: float = 1e-9):
    """Guttman-transform iterations from X0; returns (X, history of stress).

    An update that would raise the stress (round-off near convergence) is not
    taken, so the history is non-increasing.
    """
    M = D.shape[0]
    X = np.array(X0, dtype=np.float64)
    cur = stress(X, D)
    hist = [cur]
    for _ in range(max_iter):
        dist = squareform(pdist(X))
        with np.errstate(divide="ignore", invalid="ignore"):
            B = np.where(dist > 0, -D / dist, 0.0)
        np.fill_diagonal(B, 0.0)
        np.fill_diagonal(B, -B.sum(axis=1))
        Xn = B @ X / M
        new = stress(Xn, D)
        if new > cur:
            break
        X, prev, cur = Xn, cur, new
        hist.append(cur)
        if prev - cur <= rel_tol * prev or cur < 1e-30:
            break
    return X, hist


def mds_embed(D, dim: int = 3, restarts: int = 100, seed: int = 0, max_iter: int = 300,
              workers: int = 1) -> Embedding3D:
    """Best of SMACOF fits from a classical-MDS start and ``restarts`` random starts.

    ``seed_of_best`` is the random restart index, or -1 for the classical start.
    Diagonal entries of D are ignored.
    """
    D = _check_dissimilarity(D, dim)
    if restarts < 1:
        raise ValidationError("restarts must be >= 1")
    M = D.shape[0]
    scale = D[np.triu_indices(M, 1)].mean() if M > 1 else 0.0
    inits = [classical_mds(D, dim)]
    for ss in np.random.SeedSequence(seed).spawn(restarts):
        inits.append(np.random.default_rng(ss).normal(0.0, max(scale, 1e-12), size=(M, dim)))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            fits = list(ex.map(lambda X0: smacof(D, X0, max_iter), inits))
    else:
        fits = [smacof(D, X0, max_iter) for X0 in inits]
    best = min(range(len(fits)), key=lambda i: (fits[i][1][-1], i))
    X, hist = fits[best]
    return Embedding3D(X, hist[-1], best - 1, tuple(tuple(h) for _, h in fits))


# ----------------------------------------------------------------- alignment


def kabsch_umeyama(source, target, allow_scale: bool = True):
    """Least-squares similarity transform taking ``source`` onto ``target``."""
    X = np.asarray(source, dtype=np.float64)
    Y = np.asarray(target, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValidationError(f"point sets must both be M x 3, got {X.shape} and {Y.shape}")
    if X.shape[0] < 3:
        raise ValidationError("need at least 3 corresponding points")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    sx = np.linalg.svd(Xc, compute_uv=False)
    if sx[1] <= 1e-12 * max(sx[0], 1e-300):
        raise ValidationError("source points are degenerate (rank < 2)")
    U, s, Vt = np.linalg.svd(Yc.T @ Xc / X.shape[0])
    sign = np.ones(3)
    sign[2] = np.sign(np.linalg.det(U) * np.linalg.det(Vt)) or 1.0
    R = (U * sign) @ Vt
    var_x = (Xc * Xc).sum() / X.shape[0]
    c = float((s * sign).sum() / var_x) if allow_scale else 1.0
    t = my - c * R @ mx
    resid = c * X @ R.T + t - Y
    rmsd = float(np.sqrt((resid * resid).sum() / X.shape[0]))
    return SimilarityTransform(R, c, t, False, rmsd), rmsd


def align_with_flip(embedding, target, allow_scale: bool = True):
    """Align ``embedding`` and its reflection; keep the reflection only if strictly better."""
    P = embedding.points if isinstance(embedding, Embedding3D) else np.asarray(embedding, dtype=np.float64)
    T, r = kabsch_umeyama(P, target, allow_scale)
    Tf, rf = kabsch_umeyama(-P, target, allow_scale)
    if rf < r:
        T = SimilarityTransform(Tf.rotation, Tf.scale, Tf.translation, True, rf)
    return T.apply(P), T


# --------------------------------------------------------------------- CIELAB

_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_WHITE = _SRGB_TO_XYZ.sum(axis=1)


def srgb_to_cielab(rgb) -> np.ndarray:
    """8-bit sRGB (last axis) to CIELAB under D65."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    if c.shape[-1] != 3:
        raise ValidationError("expected RGB triples on the last axis")
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _SRGB_TO_XYZ.T / _WHITE
    eps = (6 / 29) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6 / 29) ** 2) + 4 / 29)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


# ------------------------------------------------------------------ pipeline


def gradient_corpus(num_images: int = 64, size: int = 32, seed: int = 0) -> list[np.ndarray]:
    """Images that blend four random corner colours bilinearly."""
    rng = np.random.default_rng(seed)
    u = np.linspace(0.0, 1.0, size)
    wy, wx = np.meshgrid(u, u, indexing="ij")
    w = np.stack([(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx], axis=-1)
    out = []
    for _ in range(num_images):
        corners = rng.uniform(0, 255, size=(4, 3))
        out.append(np.clip(np.rint(w @ corners), 0, 255).astype(np.uint8))
    return out


@dataclass
class ColorResult:
    table: CooccurrenceTable
    centers: np.ndarray
    lab: np.ndarray
    embedding: Embedding3D
    aligned: np.ndarray
    transform: SimilarityTransform
    spearman: float
    shuffled: np.ndarray

    def report(self) -> dict:
        return {
            "bins": int(self.centers.shape[0]),
            "stress": self.embedding.stress,
            "seed_of_best": self.embedding.seed_of_best,
            "flipped": bool(self.transform.flipped),
            "scale": self.transform.scale,
            "rmsd": self.transform.rmsd,
            "spearman": self.spearman,
            "shuffled_spearman": [float(v) for v in self.shuffled],
            "shuffled_p95": float(np.percentile(self.shuffled, 95)),
        }


def distance_spearman(aligned, target) -> float:
    return spearman_rank_corr(pdist(aligned), pdist(target))


def color_pipeline(images, Q: ColorQuantizer | None = None, S: PixelPairSample | None = None,
                   restarts: int = 100, seed: int = 0, pseudocount: float = 0.0, shuffles: int = 20,
                   workers: int = 1) -> ColorResult:
    """Count, embed, align to CIELAB and score against label-shuffled controls."""
    Q = Q or ColorQuantizer()
    S = S or PixelPairSample(seed=seed)
    C = count_cooccurrences(images, Q, S, workers, pseudocount)
    if C.N < 4:
        raise ValidationError(f"only {C.N} colour bin(s) observed; need at least 4 to embed in 3-D")
    D = pmi_dissimilarity(C)
    emb = mds_embed(D, 3, restarts, seed, workers=workers)
    centers = Q.centers(C.labels)
    lab = srgb_to_cielab(centers)
    aligned, T = align_with_flip(emb, lab)
    rho = distance_spearman(aligned, lab)
    rng = np.random.default_rng(seed)
    control = []
    for _ in range(shuffles):
        perm = rng.permutation(C.N)
        a_s, _ = align_with_flip(emb, lab[perm])
        control.append(distance_spearman(a_s, lab[perm]))
    return ColorResult(C, centers, lab, emb, aligned, T, rho, np.array(control))
