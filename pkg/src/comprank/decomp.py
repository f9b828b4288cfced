"""CP and Tensor-Train factorization of dense weight tensors.

Provides reconstruction, gradient-descent decomposition at a fixed rank,
an ALS reference fitter, and the factored convolution forward passes that
replace a dense convolution with a pipeline of smaller ones.

CP factors for a conv kernel follow the kernel axis order (O, C, k1, k2).
TT factorization of a conv kernel acts on the 3-way view (O, k1*k2, C)
with the two spatial axes merged into the middle core.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensors import (
    ShapeMismatchError,
    as_tensor,
    check_conv_kernel,
    conv2d_dense,
    conv_output_size,
    frobenius_norm_sq,
)


class DivergedError(RuntimeError):
    """Optimization produced a non-finite loss."""


# ---------------------------------------------------------------------------
# factor containers


@dataclass
class CPFactors:
    """Kruskal factors: matrix n has shape (I_n, R), column r holding the
    n-th vector of the r-th rank-one component."""

    factors: list

    def __post_init__(self):
        if not self.factors:
            raise ValueError("CPFactors needs at least one factor matrix")
        self.factors = [np.asarray(f, dtype=np.float64) for f in self.factors]
        ranks = {f.shape[1] for f in self.factors if f.ndim == 2}
        if any(f.ndim != 2 for f in self.factors) or len(ranks) != 1:
            raise ValueError("factors must be matrices sharing one column count")
        if self.rank < 1:
            raise ValueError("CP rank must be >= 1")

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]

    @property
    def dims(self) -> tuple:
        return tuple(f.shape[0] for f in self.factors)


@dataclass
class TTFactors:
    """Tensor-train cores: core k has shape (R_{k-1}, I_k, R_k), boundary
    ranks R_0 = R_N = 1, adjacent cores agreeing on the shared rank."""

    cores: list

    def __post_init__(self):
        if not self.cores:
            raise ValueError("TTFactors needs at least one core")
        self.cores = [np.asarray(c, dtype=np.float64) for c in self.cores]
        if any(c.ndim != 3 for c in self.cores):
            raise ValueError("TT cores must be 3-way")
        if self.cores[0].shape[0] != 1 or self.cores[-1].shape[2] != 1:
            raise ValueError("boundary TT ranks must be 1")
        for left, right in zip(self.cores, self.cores[1:]):
            if left.shape[2] != right.shape[0]:
                raise ValueError(
                    f"adjacent cores disagree on rank: {left.shape} vs {right.shape}")

    @property
    def ranks(self) -> tuple:
        return tuple(c.shape[2] for c in self.cores[:-1])

    @property
    def dims(self) -> tuple:
        return tuple(c.shape[1] for c in self.cores)


@dataclass
class DecomposeConfig:
    """Hyperparameters for gradient-descent decomposition."""

    learning_rate: float = 0.1
    iterations: int = 2000
    momentum: float = 0.9
    seed: object = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")


@dataclass
class DecomposeResult:
    """Factors plus the per-iteration loss trace (length iterations + 1;
    entry t is the loss entering iteration t, the last entry is final)."""

    factors: object
    loss_history: np.ndarray = field(repr=False)

    @property
    def final_loss(self) -> float:
        return float(self.loss_history[-1])


# ---------------------------------------------------------------------------
# reconstruction and basic multilinear algebra


def unfold(t, n) -> np.ndarray:
    """Mode-n unfolding: rows indexed by i_n, remaining axes row-major."""
    t = np.asarray(t)
    return np.moveaxis(t, n, 0).reshape(t.shape[n], -1)


def khatri_rao(mats) -> np.ndarray:
    """Column-wise Khatri-Rao product, first matrix varying slowest.

    Matches :func:`unfold`: unfold(cp_reconstruct(f), n) equals
    factors[n] @ khatri_rao(all other factors in order).T.
    """
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, out.shape[1])
    return out


def cp_reconstruct(f: CPFactors) -> np.ndarray:
    """Assemble the dense tensor Σ_r v_1^(r) ∘ ... ∘ v_N^(r)."""
    mats = f.factors
    if len(mats) == 1:
        return mats[0].sum(axis=1)
    return (mats[0] @ khatri_rao(mats[1:]).T).reshape(f.dims)


def tt_reconstruct(f: TTFactors) -> np.ndarray:
    """Assemble the dense tensor by chaining core contractions."""
    out = f.cores[0][0]
    for core in f.cores[1:]:
        out = np.tensordot(out, core, axes=(-1, 0))
    return out[..., 0]


def cp_rank_cap(shape) -> int:
    """Largest admissible CP rank: product of all extents except the largest."""
    dims = sorted(int(d) for d in shape)
    cap = 1
    for d in dims[:-1]:
        cap *= d
    return max(cap, 1)


def tt_bond_caps(shape) -> tuple:
    """Admissible cap per TT bond: min of the two unfolding sizes it splits."""
    dims = [int(d) for d in shape]
    caps = []
    for k in range(len(dims) - 1):
        left = int(np.prod(dims[: k + 1]))
        right = int(np.prod(dims[k + 1:]))
        caps.append(min(left, right))
    return tuple(caps)


# ---------------------------------------------------------------------------
# gradients of ||reconstruct(f) - target||_F^2


def cp_factor_grads(factors, cotangent) -> list:
    """Per-factor gradient given d(loss)/d(reconstruction) = `cotangent`."""
    grads = []
    n_modes = len(factors)
    for n in range(n_modes):
        others = factors[:n] + factors[n + 1:]
        if others:
            grads.append(unfold(cotangent, n) @ khatri_rao(others))
        else:
            grads.append(np.tile(cotangent.reshape(-1, 1), (1, factors[0].shape[1])))
    return grads


def tt_factor_grads(cores, cotangent) -> list:
    """Per-core gradient given d(loss)/d(reconstruction) = `cotangent`."""
    n_cores = len(cores)
    lefts = [np.ones((1, 1))]
    running = np.ones((1, 1))
    for core in cores[:-1]:
        running = np.tensordot(running, core, axes=(-1, 0)).reshape(-1, core.shape[2])
        lefts.append(running)
    rights = [None] * n_cores
    running = np.ones((1, 1))
    rights[-1] = running
    for k in range(n_cores - 2, -1, -1):
        core = cores[k + 1]
        running = np.tensordot(core, running, axes=(2, 0)).reshape(core.shape[0], -1)
        rights[k] = running
    grads = []
    for k, core in enumerate(cores):
        block = cotangent.reshape(lefts[k].shape[0], core.shape[1], rights[k].shape[1])
        grads.append(np.einsum("pa,piq,bq->aib", lefts[k], block, rights[k]))
    return grads


def reconstruct(f) -> np.ndarray:
    return cp_reconstruct(f) if isinstance(f, CPFactors) else tt_reconstruct(f)


def factor_arrays(f) -> list:
    """The mutable parameter arrays of a factor set, in a fixed order."""
    return f.factors if isinstance(f, CPFactors) else f.cores


def factor_grads(f, cotangent) -> list:
    if isinstance(f, CPFactors):
        return cp_factor_grads(f.factors, cotangent)
    return tt_factor_grads(f.cores, cotangent)


# ---------------------------------------------------------------------------
# shared SGD core (also drives the rank search's weight updates)


def sgd_step(params, grads, bufs, lr, momentum):
    """In-place Nesterov-momentum SGD step on a flat list of arrays."""
    for p, g, b in zip(params, grads, bufs):
        b *= momentum
        b += g
        p -= lr * (g + momentum * b)


def mixture_weight_step(target, factor_sets, probs, ranks, bufs, lr, momentum,
                        gamma, beta):
    """One descent step of every factor set against the mixture objective
    ||target - Σ_c probs[c]·reconstruct(factor_sets[c])||_F^2
    + gamma·(Σ_c probs[c]·ranks[c])^beta.

    The rank term has zero gradient with respect to the factors; it is
    evaluated here only so the returned loss is the full objective.
    Returns (total, fit, rank_term) evaluated before the step.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        recons = [reconstruct(f) for f in factor_sets]
        mix = probs[0] * recons[0]
        for p, rec in zip(probs[1:], recons[1:]):
            mix = mix + p * rec
        resid = mix - target
        fit = frobenius_norm_sq(resid)
        expected_rank = float(np.dot(probs, ranks))
        rank_term = gamma * expected_rank ** beta
        total = fit + rank_term
        if not np.isfinite(total):
            raise DivergedError(f"loss became non-finite ({total})")
        for f, p, b in zip(factor_sets, probs, bufs):
            cot = (2.0 * p) * resid
            sgd_step(factor_arrays(f), factor_grads(f, cot), b, lr, momentum)
    return total, fit, rank_term


def zero_momentum(f) -> list:
    return [np.zeros_like(a) for a in factor_arrays(f)]


# ---------------------------------------------------------------------------
# initialization


def init_half_width(w, order, init_scale) -> float:
    """Half-width a of the uniform(-a, a) factor initialization."""
    return init_scale * (np.sqrt(frobenius_norm_sq(w)) / w.size) ** (1.0 / order)


def random_cp(shape, rank, rng, half_width) -> CPFactors:
    return CPFactors([rng.uniform(-half_width, half_width, (d, rank)) for d in shape])


def random_tt(shape, ranks, rng, half_width) -> TTFactors:
    bonds = (1,) + tuple(ranks) + (1,)
    cores = [rng.uniform(-half_width, half_width, (bonds[k], d, bonds[k + 1]))
             for k, d in enumerate(shape)]
    return TTFactors(cores)


def init_factors(w, rank, rng, init_scale=1.0):
    """Seeded factor initialization for a CP rank (int) or TT ranks (tuple)."""
    w = np.asarray(w)
    a = init_half_width(w, w.ndim, init_scale)
    if np.isscalar(rank) or isinstance(rank, (int, np.integer)):
        r = int(rank)
        if r < 1:
            raise ValueError("CP rank must be >= 1")
        cap = cp_rank_cap(w.shape)
        if r > cap:
            raise ValueError(f"CP rank {r} exceeds cap {cap} for shape {w.shape}")
        return random_cp(w.shape, r, rng, a)
    ranks = tuple(int(r) for r in rank)
    if len(ranks) != w.ndim - 1:
        raise ValueError(f"TT rank tuple must have {w.ndim - 1} entries")
    if any(r < 1 for r in ranks):
        raise ValueError("TT ranks must be >= 1")
    caps = tt_bond_caps(w.shape)
    for r, cap in zip(ranks, caps):
        if r > cap:
            raise ValueError(f"TT rank {r} exceeds cap {cap} for shape {w.shape}")
    return random_tt(w.shape, ranks, rng, a)


# ---------------------------------------------------------------------------
# decomposition drivers


def decompose_sgd(w, rank, cfg: DecomposeConfig) -> DecomposeResult:
    """Fit factors to `w` at a fixed rank by full-gradient descent.

    Minimizes ||w - reconstruct(f)||_F^2 with Nesterov momentum at a
    constant learning rate for cfg.iterations steps. The full gradient is
    used on every step (the objective is deterministic, there is no data
    to sample).

    Parameters
    ----------
    w : array
        Target tensor.
    rank : int or tuple of int
        CP rank, or the N-1 TT bond ranks.
    cfg : DecomposeConfig

    Returns
    -------
    DecomposeResult with the fitted factors and the loss trace.

    Raises
    ------
    DivergedError if the loss becomes non-finite.
    """
    w = as_tensor(w)
    rng = np.random.default_rng(cfg.seed)
    factors = init_factors(w, rank, rng, cfg.init_scale)
    bufs = zero_momentum(factors)
    probs = np.ones(1)
    ranks = np.ones(1)
    losses = np.empty(cfg.iterations + 1)
    for t in range(cfg.iterations):
        _, fit, _ = mixture_weight_step(
            w, [factors], probs, ranks, [bufs],
            cfg.learning_rate, cfg.momentum, 0.0, 1.0)
        losses[t] = fit
    losses[-1] = frobenius_norm_sq(w - reconstruct(factors))
    if not np.isfinite(losses[-1]):
        raise DivergedError("final loss is non-finite")
    return DecomposeResult(factors, losses)


def als_oracle_cp(w, rank, sweeps, seed=0, ridge=1e-10, return_history=False):
    """Classic alternating least squares for CP, used as a quality reference.

    Each sweep solves the ridge-stabilized normal equations
    (G + ridge·I) V_n^T = (khatri_rao of the other factors)^T unfold_n(w)^T
    for every mode in turn, where G is the Hadamard product of the other
    factors' Gram matrices.
    """
    w = as_tensor(w)
    if rank < 1:
        raise ValueError("rank must be >= 1")
    rng = np.random.default_rng(seed)
    f = random_cp(w.shape, rank, rng, max(init_half_width(w, w.ndim, 1.0), 1e-3))
    mats = f.factors
    unfoldings = [unfold(w, n) for n in range(w.ndim)]
    eye = np.eye(rank)
    history = []
    for _ in range(sweeps):
        for n in range(len(mats)):
            others = mats[:n] + mats[n + 1:]
            gram = np.ones((rank, rank))
            for m in others:
                gram *= m.T @ m
            kr = khatri_rao(others) if others else np.ones((1, rank))
            rhs = unfoldings[n] @ kr
            mats[n] = np.linalg.solve(gram + ridge * eye, rhs.T).T
        if return_history:
            history.append(frobenius_norm_sq(w - cp_reconstruct(f)))
    result = CPFactors(mats)
    if return_history:
        return result, np.asarray(history)
    return result


# ---------------------------------------------------------------------------
# factored convolution forwards (pipelines equal to the dense conv on the
# reconstructed kernel)


def cp_conv_forward(f: CPFactors, x, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Four-stage CP convolution: 1x1 C→R, per-rank k1x1 and 1xk2, 1x1 R→O.

    Algebraically identical to conv2d_dense(cp_reconstruct(f), x).
    """
    if len(f.factors) != 4:
        raise ShapeMismatchError("CP conv factors must cover 4 kernel modes")
    vo, vc, vh, vw = f.factors
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeMismatchError(f"input must be (C, H, W), got order {x.ndim}")
    if x.shape[0] != vc.shape[0]:
        raise ShapeMismatchError(
            f"factors expect {vc.shape[0]} input channels, input has {x.shape[0]}")
    k1, k2 = vh.shape[0], vw.shape[0]
    conv_output_size(x.shape[1], k1, stride, padding)
    conv_output_size(x.shape[2], k2, stride, padding)

    z = np.tensordot(vc, x, axes=(0, 0))                      # (R, H, W)
    zp = np.pad(z, ((0, 0), (padding, padding), (padding, padding)))
    rows = sliding_window_view(zp, k1, axis=1)[:, ::stride]   # (R, H', Wp, k1)
    u = np.einsum("rhwk,kr->rhw", rows, vh)
    cols = sliding_window_view(u, k2, axis=2)[:, :, ::stride]  # (R, H', W', k2)
    v = np.einsum("rhwk,kr->rhw", cols, vw)
    return np.tensordot(vo, v, axes=(1, 0))                   # (O, H', W')


def tt_conv_forward(f: TTFactors, kernel_size, x, stride: int = 1,
                    padding: int = 0) -> np.ndarray:
    """Three-stage TT convolution: 1x1 C→R2, k1xk2 R2→R1, 1x1 R1→O.

    The factor set covers the 3-way kernel view (O, k1*k2, C); kernel_size
    unmerges the middle core's spatial axis.
    """
    if len(f.cores) != 3:
        raise ShapeMismatchError("TT conv factors must have exactly 3 cores")
    g1, g2, g3 = f.cores
    k1, k2 = (int(k) for k in kernel_size)
    if g2.shape[1] != k1 * k2:
        raise ShapeMismatchError(
            f"middle core holds {g2.shape[1]} spatial taps, kernel_size gives {k1 * k2}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeMismatchError(f"input must be (C, H, W), got order {x.ndim}")
    if x.shape[0] != g3.shape[1]:
        raise ShapeMismatchError(
            f"factors expect {g3.shape[1]} input channels, input has {x.shape[0]}")
    r1, _, r2 = g2.shape
    z = np.tensordot(g3[:, :, 0], x, axes=(1, 0))                   # (R2, H, W)
    mid = g2.reshape(r1, k1, k2, r2).transpose(0, 3, 1, 2)          # (R1, R2, k1, k2)
    m = conv2d_dense(mid, z, stride, padding)                       # (R1, H', W')
    return np.tensordot(g1[0], m, axes=(1, 0))                      # (O, H', W')


# ---------------------------------------------------------------------------
# conv kernel <-> TT view adapters


def kernel_to_tt_view(kernel) -> np.ndarray:
    """(O, C, k1, k2) kernel as the 3-way tensor (O, k1*k2, C) that TT factors."""
    k = check_conv_kernel(kernel)
    o, c, k1, k2 = k.shape
    return np.ascontiguousarray(k.transpose(0, 2, 3, 1).reshape(o, k1 * k2, c))


def tt_kernel(f: TTFactors, kernel_size) -> np.ndarray:
    """Reconstruct the (O, C, k1, k2) kernel from 3-way TT factors."""
    k1, k2 = (int(k) for k in kernel_size)
    t3 = tt_reconstruct(f)
    if t3.ndim != 3 or t3.shape[1] != k1 * k2:
        raise ShapeMismatchError(
            f"TT reconstruction {t3.shape} does not match kernel_size {(k1, k2)}")
    o, _, c = t3.shape
    return np.ascontiguousarray(t3.reshape(o, k1, k2, c).transpose(0, 3, 1, 2))


def kernel_reconstruct(f, kernel_size=None) -> np.ndarray:
    """Reconstruct a conv kernel from either factor kind."""
    if isinstance(f, CPFactors):
        return cp_reconstruct(f)
    if kernel_size is None:
        raise ValueError("kernel_size required for TT factors")
    return tt_kernel(f, kernel_size)


def tt_storage_cores(f: TTFactors, kernel_size) -> list:
    """TT cores in their archived shapes (O,R1), (R1,k1,k2,R2), (C,R2)."""
    g1, g2, g3 = f.cores
    k1, k2 = (int(k) for k in kernel_size)
    r1, _, r2 = g2.shape
    return [g1[0], g2.reshape(r1, k1, k2, r2), g3[:, :, 0].T]


def tt_from_storage_cores(cores) -> TTFactors:
    """Inverse of :func:`tt_storage_cores`."""
    if len(cores) != 3:
        raise ValueError("expected 3 stored TT cores")
    c0, c1, c2 = (np.asarray(c, dtype=np.float64) for c in cores)
    if c0.ndim != 2 or c1.ndim != 4 or c2.ndim != 2:
        raise ValueError("stored TT cores must have orders (2, 4, 2)")
    r1, k1, k2, r2 = c1.shape
    return TTFactors([
        c0[None, :, :],
        c1.reshape(r1, k1 * k2, r2),
        c2.T[:, :, None],
    ])
