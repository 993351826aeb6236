"""Contrastive learners over a discrete world.

Each symbol gets a row of a shared embedding table and pairs are scored by
``g(a, b) = <v_a, v_b> + bias``. Losses are computed either exactly in
expectation over a cooccurrence table or on a seeded minibatch, and every
loss comes with its exact gradient.

All losses are first expressed as a function of the N x N logit matrix ``g``
and its gradient ``dL/dg``; the chain rule to the table is shared.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.special import expit, gammaln, log_expit

from .core import GramKernel, NumericalError, ValidationError, double_center, gram
from .world import CooccurrenceTable, PmiKernel

OBJECTIVES = ("binary_nce", "infonce")
MODES = ("expectation", "sampled")

# cap on (anchors x candidates x negative multisets) for exact InfoNCE
MAX_INFONCE_CELLS = 50_000_000


@dataclass(frozen=True)
class EmbeddingTable:
    vectors: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        V = np.array(self.vectors, dtype=np.float64)
        if V.ndim != 2 or V.shape[1] < 1:
            raise ValidationError(f"embedding vectors must be N x d with d >= 1, got {V.shape}")
        if not np.isfinite(V).all() or not math.isfinite(self.bias):
            raise NumericalError("embedding table has non-finite entries")
        V.setflags(write=False)
        object.__setattr__(self, "vectors", V)
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def N(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def logits(self) -> np.ndarray:
        return gram(self.vectors).data + self.bias

    def flat(self) -> np.ndarray:
        return np.append(self.vectors.ravel(), self.bias)

    @classmethod
    def from_flat(cls, x: np.ndarray, N: int, d: int) -> "EmbeddingTable":
        return cls(x[:-1].reshape(N, d), x[-1])

    @classmethod
    def init(cls, N: int, d: int, seed: int, scale: float = 0.01) -> "EmbeddingTable":
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-scale, scale, size=(N, d)), 0.0)


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "binary_nce"
    p_pos: float = 0.5
    num_negatives: int = 4
    temperature: float = 1.0
    learning_rate: float = 1.0
    steps: int = 20_000
    seed: int = 0
    mode: str = "expectation"
    batch_size: int = 512
    tol: float = 1e-7
    log_every: int = 100

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        _check_p_pos(self.p_pos)
        _check_infonce(self.num_negatives, self.temperature)
        if self.learning_rate <= 0 or self.steps < 1 or self.batch_size < 1:
            raise ValidationError("learning_rate, steps and batch_size must be positive")


@dataclass
class TrainReport:
    final_loss: float
    loss_curve: list
    grad_check: float
    learned_gram: GramKernel
    steps_taken: int
    stop_reason: str
    config: TrainConfig = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "final_loss": self.final_loss,
            "loss_curve": [[int(s), float(v)] for s, v in self.loss_curve],
            "grad_check": self.grad_check,
            "steps_taken": self.steps_taken,
            "stop_reason": self.stop_reason,
        }


def _check_p_pos(p_pos):
    if not 0 < p_pos < 1:
        raise ValidationError(f"p_pos must be in (0, 1), got {p_pos}")


def _check_infonce(K_neg, tau):
    if int(K_neg) != K_neg or K_neg < 1:
        raise ValidationError(f"num_negatives must be a positive integer, got {K_neg}")
    if not tau > 0:
        raise ValidationError(f"temperature must be > 0, got {tau}")


# ---------------------------------------------------------------- logit level


def binary_nce_expected(g: np.ndarray, C: CooccurrenceTable, p_pos: float):
    """Exact binary NCE loss and dL/dg for a logit matrix ``g``."""
    _check_p_pos(p_pos)
    J, m = C.joint, C.marginal
    neg = np.outer(m, m)
    loss = -(p_pos * (J * log_expit(g)).sum() + (1 - p_pos) * (neg * log_expit(-g)).sum())
    dg = -p_pos * J * expit(-g) + (1 - p_pos) * neg * expit(g)
    return float(loss), dg


def _draw_pairs(C: CooccurrenceTable, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    N = C.N
    flat = rng.choice(N * N, size=n, p=C.joint.ravel() / C.joint.sum())
    return flat // N, flat % N


def _draw_marginal(C: CooccurrenceTable, size, rng) -> np.ndarray:
    return rng.choice(C.N, size=size, p=C.marginal / C.marginal.sum())


def binary_nce_sampled(g: np.ndarray, C: CooccurrenceTable, p_pos: float, seed: int, batch_size: int = 512):
    """Binary NCE on one seeded minibatch of positive and negative pairs."""
    _check_p_pos(p_pos)
    rng = np.random.default_rng(seed)
    a, b = _draw_pairs(C, batch_size, rng)
    na, nb = _draw_marginal(C, batch_size, rng), _draw_marginal(C, batch_size, rng)
    gp, gn = g[a, b], g[na, nb]
    loss = -(p_pos * log_expit(gp).mean() + (1 - p_pos) * log_expit(-gn).mean())
    dg = np.zeros_like(g)
    np.add.at(dg, (a, b), -p_pos * expit(-gp) / batch_size)
    np.add.at(dg, (na, nb), (1 - p_pos) * expit(gn) / batch_size)
    return float(loss), dg


@lru_cache(maxsize=16)
def negative_multisets(N: int, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Count vectors of every size-K multiset over N symbols and their multinomial coefficients (log)."""
    combos = itertools.combinations_with_replacement(range(N), K)
    counts = np.array([np.bincount(c, minlength=N) for c in combos], dtype=np.float64)
    log_coef = gammaln(K + 1) - gammaln(counts + 1).sum(axis=1)
    counts.setflags(write=False)
    log_coef.setflags(write=False)
    return counts, log_coef


def infonce_expected(g: np.ndarray, C: CooccurrenceTable, K_neg: int, tau: float):
    """Exact InfoNCE loss and dL/dg.

    The loss for anchor a and positive b depends on the negatives only through
    the multiset drawn, so the expectation is a finite sum over multisets
    weighted by their multinomial probability under the marginal.
    """
    _check_infonce(K_neg, tau)
    N = C.N
    n_sets = math.comb(N + K_neg - 1, K_neg)
    if n_sets * N * N > MAX_INFONCE_CELLS:
        raise ValidationError(
            f"exact InfoNCE over {n_sets} negative multisets is too large for N={N}, K={K_neg}; use sampled mode"
        )
    counts, log_coef = negative_multisets(N, int(K_neg))
    J, m = C.joint, C.marginal
    with np.errstate(divide="ignore"):
        logm = np.log(m)
    # symbols with zero marginal never appear as negatives
    logm_safe = np.where(m > 0, logm, 0.0)
    prob = np.exp(log_coef + counts @ logm_safe)
    prob[(counts[:, m <= 0] > 0).any(axis=1)] = 0.0

    z = g / tau
    shift = z.max(axis=1, keepdims=True)
    e = np.exp(z - shift)  # N x N, anchor rows
    S = e @ counts.T  # N x M, summed negative scores per multiset
    D = e[:, :, None] + S[:, None, :]  # anchor, candidate, multiset
    logD = np.log(D)
    loss = (J * ((logD @ prob) + shift - z)).sum()
    R = 1.0 / D
    Q = R @ prob
    Y = (np.einsum("ab,abm->am", J, R) * prob) @ counts
    dg = (J * (e * Q - 1.0) + e * Y) / tau
    return float(loss), dg


def infonce_sampled(g: np.ndarray, C: CooccurrenceTable, K_neg: int, tau: float, seed: int, batch_size: int = 512):
    """InfoNCE on one seeded minibatch: each positive pair gets K_neg marginal negatives."""
    _check_infonce(K_neg, tau)
    rng = np.random.default_rng(seed)
    a, b = _draw_pairs(C, batch_size, rng)
    negs = _draw_marginal(C, (batch_size, K_neg), rng)
    cand = np.concatenate([b[:, None], negs], axis=1)
    z = g[a[:, None], cand] / tau
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    lse = np.log(ez.sum(axis=1)) + zmax[:, 0]
    loss = (lse - z[:, 0]).mean()
    p = ez / ez.sum(axis=1, keepdims=True)
    p[:, 0] -= 1.0
    dg = np.zeros_like(g)
    np.add.at(dg, (np.repeat(a, K_neg + 1), cand.ravel()), (p / (tau * batch_size)).ravel())
    return float(loss), dg


# ---------------------------------------------------------------- table level


def _to_table_grad(E: EmbeddingTable, dg: np.ndarray) -> EmbeddingTable:
    return EmbeddingTable((dg + dg.T) @ E.vectors, float(dg.sum()))


def binary_nce_loss(E: EmbeddingTable, C: CooccurrenceTable, p_pos: float = 0.5,
                    mode: str = "expectation", seed: int = 0, batch_size: int = 512):
    """Binary NCE loss of the table and its gradient (an EmbeddingTable of partials)."""
    g = E.logits()
    if mode == "expectation":
        loss, dg = binary_nce_expected(g, C, p_pos)
    elif mode == "sampled":
        loss, dg = binary_nce_sampled(g, C, p_pos, seed, batch_size)
    else:
        raise ValidationError(f"mode must be one of {MODES}")
    return loss, _to_table_grad(E, dg)


def infonce_loss(E: EmbeddingTable, C: CooccurrenceTable, K_neg: int = 4, tau: float = 1.0,
                 mode: str = "expectation", seed: int = 0, batch_size: int = 512):
    g = E.logits()
    if mode == "expectation":
        loss, dg = infonce_expected(g, C, K_neg, tau)
    elif mode == "sampled":
        loss, dg = infonce_sampled(g, C, K_neg, tau, seed, batch_size)
    else:
        raise ValidationError(f"mode must be one of {MODES}")
    return loss, _to_table_grad(E, dg)


def objective_fn(C: CooccurrenceTable, cfg: TrainConfig):
    """``f(E, seed) -> (loss, grad)`` for the configured objective."""
    if cfg.objective == "binary_nce":
        return lambda E, seed: binary_nce_loss(E, C, cfg.p_pos, cfg.mode, seed, cfg.batch_size)
    return lambda E, seed: infonce_loss(E, C, cfg.num_negatives, cfg.temperature, cfg.mode, seed, cfg.batch_size)


def gradient_check(f, E: EmbeddingTable, h: float = 1e-5, coords=None) -> float:
    """Max abs difference of analytic and central-difference gradients over
    ``coords``, relative to the largest gradient magnitude seen."""
    x0 = E.flat()
    _, grad = f(E)
    analytic = grad.flat()
    coords = range(x0.size) if coords is None else coords
    err, scale = 0.0, 0.0
    for i in coords:
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        lp, _ = f(EmbeddingTable.from_flat(xp, E.N, E.d))
        lm, _ = f(EmbeddingTable.from_flat(xm, E.N, E.d))
        numeric = (lp - lm) / (2 * h)
        err = max(err, abs(numeric - analytic[i]))
        scale = max(scale, abs(numeric), abs(analytic[i]))
    return err / scale if scale > 0 else err


def train(C: CooccurrenceTable, d: int, cfg: TrainConfig, init: EmbeddingTable | None = None):
    """Gradient descent with a step-size line search.

    Accepted steps grow the step by 1.2x; a step that raises the loss is
    halved until it does not (up to 40 halvings). Stops when the largest
    gradient entry falls below ``cfg.tol`` or the step budget runs out.
    """
    if d < 1:
        raise ValidationError("embedding dimension must be >= 1")
    if cfg.mode == "expectation" and cfg.objective == "infonce":
        # fail fast on sizes the exact expectation cannot handle
        infonce_expected(np.zeros((C.N, C.N)), C, cfg.num_negatives, cfg.temperature)
    f = objective_fn(C, cfg)
    E = init or EmbeddingTable.init(C.N, d, cfg.seed)
    batch_seeds = np.random.SeedSequence(cfg.seed).generate_state(cfg.steps + 1, dtype=np.uint64)

    def seed_at(step):
        return 0 if cfg.mode == "expectation" else int(batch_seeds[step])

    lr = cfg.learning_rate
    curve = []
    rising = 0
    last = None
    stop = "step budget exhausted"
    step = 0
    for step in range(cfg.steps):
        s = seed_at(step)
        loss, grad = f(E, s)
        if not math.isfinite(loss):
            raise NumericalError(f"loss became non-finite at step {step}; curve={curve}")
        if step % cfg.log_every == 0:
            curve.append((step, loss))
        if last is not None and loss > last:
            rising += 1
            if rising >= 100:
                raise NumericalError(f"training diverged: loss rose for 100 consecutive steps; curve={curve}")
        else:
            rising = 0
        last = loss
        gmax = max(np.abs(grad.vectors).max(), abs(grad.bias))
        if gmax < cfg.tol:
            stop = "converged"
            break
        x, gx = E.flat(), grad.flat()
        for _ in range(40):
            cand = EmbeddingTable.from_flat(x - lr * gx, E.N, E.d)
            new_loss, _ = f(cand, s)
            if new_loss <= loss:
                break
            lr *= 0.5
        else:
            stop = "line search stalled"
            break
        E = cand
        lr *= 1.2
    else:
        step = cfg.steps
    final, _ = f(E, seed_at(min(step, cfg.steps)))
    curve.append((step, final))
    # probe near the solution: at a stationary point the relative error is all round-off
    rng = np.random.default_rng(cfg.seed)
    probe = EmbeddingTable.from_flat(E.flat() + rng.normal(0.0, 0.1, E.N * E.d + 1), E.N, E.d)
    coords = rng.choice(E.N * E.d, size=min(16, E.N * E.d), replace=False).tolist() + [E.N * E.d]
    s_final = seed_at(min(step, cfg.steps))
    check = gradient_check(lambda T: f(T, s_final), probe, coords=coords)
    report = TrainReport(final, curve, check, gram(E.vectors), step, stop, cfg)
    return E, report


@dataclass(frozen=True)
class RecoveryReport:
    centered_max_abs: float
    centered_rms: float
    offdiag_pearson: float
    fitted_scale: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def kernel_recovery_error(E: EmbeddingTable | np.ndarray, K: PmiKernel) -> RecoveryReport:
    """Compare the learned Gram with the PMI kernel up to a constant offset.

    ``centered_rms`` is the root-mean-square of the same difference; it is the
    measure that shrinks monotonically with embedding dimension, which the
    max-abs error need not do.
    ``fitted_scale`` is the least-squares slope of the centered Gram on the
    centered kernel (close to the temperature for InfoNCE). The Pearson
    correlation is NaN when the kernel's off-diagonal is constant.
    """
    if not K.full_support:
        raise ValidationError("kernel recovery needs a full-support PMI kernel")
    G = gram(E.vectors if isinstance(E, EmbeddingTable) else E).data
    if G.shape != K.data.shape:
        raise ValidationError("embedding table and kernel sizes differ")
    Gc, Kc = double_center(G).data, double_center(K.data).data
    max_abs = float(np.abs(Gc - Kc).max())
    rms = float(np.sqrt(((Gc - Kc) ** 2).mean()))
    kk = (Kc * Kc).sum()
    scale = float((Gc * Kc).sum() / kk) if kk > 0 else float("nan")
    iu = np.triu_indices(K.N, 1)
    x, y = G[iu], K.data[iu]
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        r = float("nan")
    else:
        r = float(np.corrcoef(x, y)[0, 1])
    return RecoveryReport(max_abs, rms, r, scale)


def optimal_table(K: PmiKernel, p_pos: float = 0.5) -> EmbeddingTable:
    """Table whose logits equal K + log(p_pos / (1 - p_pos)), the binary NCE optimum.

    Requires K + C to be PSD for the shift C returned by the proposition
    check; the shift is moved into the bias.
    """
    from .world import psd_shift_constant

    C = psd_shift_constant(K)
    A = K.data + C
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    if w.min() < -1e-8 * max(np.abs(A).max(), 1.0):
        raise NumericalError("K + C is not PSD; no embedding table can represent this kernel")
    vectors = V * np.sqrt(np.clip(w, 0.0, None))
    return EmbeddingTable(vectors, math.log(p_pos / (1 - p_pos)) - C)


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
