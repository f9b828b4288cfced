"""Coarse-to-fine differentiable rank search over super-layers.

Every convolutional layer is replaced by a super-layer holding one factor
set per candidate rank plus a learnable score per candidate. The scores
feed a softmax, and the search descends the composite objective

    sum_i ||W_i - sum_r p_i(r) * reconstruct_i(r)||_F^2
        + gamma * sum_i (sum_r p_i(r) * r)^beta

alternating one step on the factors with one step on the scores. After a
phase, each layer keeps the argmax-probability rank, the candidate window
shrinks around it and the step drops tenfold, until a final full phase at
step 1.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import decomp
from .decomp import (
    CPFactors,
    DivergedError,
    cp_rank_cap,
    init_factors,
    kernel_to_tt_view,
    reconstruct,
    tt_bond_caps,
    zero_momentum,
)
from .tensors import check_conv_kernel, frobenius_norm_sq


class InvalidBoundsError(ValueError):
    """A rank window violates the evenly-spaced search-set contract."""


# ---------------------------------------------------------------------------
# rank sets


@dataclass
class RankSet:
    """Evenly spaced candidate ranks {lower, lower+step, ..., upper}."""

    lower: int
    upper: int
    step: int
    ranks: list = field(default_factory=list)

    def __post_init__(self):
        if self.step < 1:
            raise InvalidBoundsError(f"step must be >= 1, got {self.step}")
        if self.lower < 1:
            raise InvalidBoundsError(f"lower bound must be >= 1, got {self.lower}")
        if self.upper < self.lower:
            raise InvalidBoundsError(
                f"upper bound {self.upper} below lower bound {self.lower}")
        if (self.upper - self.lower) % self.step != 0:
            raise InvalidBoundsError(
                f"width {self.upper - self.lower} not divisible by step {self.step}")
        if not self.ranks:
            self.ranks = list(range(self.lower, self.upper + 1, self.step))

    def __len__(self):
        return len(self.ranks)


def _broadcast(value, n, name):
    if np.isscalar(value):
        return [int(value)] * n
    values = [int(v) for v in value]
    if len(values) != n:
        raise InvalidBoundsError(f"{name} needs 1 or {n} entries, got {len(values)}")
    return values


def rss_function(lower, upper, step, n) -> list:
    """Build the per-layer rank search sets from bounds and a common step.

    `lower`/`upper` may be scalars (broadcast to all n layers) or length-n
    sequences. Raises InvalidBoundsError if any window is not evenly
    divisible by the step.
    """
    if n < 1:
        raise InvalidBoundsError("layer count must be >= 1")
    lows = _broadcast(lower, n, "lower bounds")
    ups = _broadcast(upper, n, "upper bounds")
    return [RankSet(lo, up, int(step)) for lo, up in zip(lows, ups)]


def refine_search_space(selected, step, caps=None, floors=None):
    """Shrink each layer's window around its selected rank.

    New bounds are selected ± step//2 (the old step's half width), clamped
    to [floor, cap] (defaults [1, unbounded]), the upper bound then lowered
    until the width divides the new step. The new step is max(1, step//10).

    Returns (list of (lower, upper), new_step).
    """
    if step <= 1:
        raise InvalidBoundsError("refinement requires the current step > 1")
    n = len(selected)
    cap_list = [None] * n if caps is None else list(caps)
    floor_list = [1] * n if floors is None else [int(f) for f in floors]
    new_step = max(1, step // 10)
    half = step // 2
    bounds = []
    for sr, cap, floor in zip(selected, cap_list, floor_list):
        lo = max(int(floor), int(sr) - half)
        up = int(sr) + half
        if cap is not None:
            up = min(int(cap), up)
        if up < lo:
            raise InvalidBoundsError(
                f"refined window around rank {sr} collapsed (floor {floor}, cap {cap})")
        up = lo + ((up - lo) // new_step) * new_step
        bounds.append((lo, up))
    return bounds, new_step


# ---------------------------------------------------------------------------
# super-layers


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


@dataclass
class RankCandidate:
    """One candidate decomposition with its learnable selection score."""

    rank: int
    factors: object
    alpha: float = 0.0


class SuperLayer:
    """A frozen target tensor plus its rank candidates and optimizer state."""

    def __init__(self, target, candidates):
        target = np.array(target, dtype=np.float64)
        target.flags.writeable = False
        self.target = target
        self.candidates = list(candidates)
        if not self.candidates:
            raise ValueError("a super-layer needs at least one candidate")
        self._weight_bufs = [zero_momentum(c.factors) for c in self.candidates]
        self._alpha_buf = np.zeros(len(self.candidates))

    @property
    def ranks(self) -> np.ndarray:
        return np.array([c.rank for c in self.candidates], dtype=np.float64)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([c.alpha for c in self.candidates], dtype=np.float64)

    def probabilities(self) -> np.ndarray:
        return softmax(self.alphas)


@dataclass
class SearchConfig:
    """Hyperparameters of the rank search."""

    gamma: float = 0.2
    beta: float = 0.6
    lr_weights: float = 0.1
    lr_alpha: float = 0.1
    iterations_per_phase: int = 1000
    lr_schedule: bool = True
    momentum: float = 0.9
    seed: int = 0
    warmup_iterations: int = 500
    lr_warmup: float = None  # None: use lr_weights

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.lr_weights <= 0 or self.lr_alpha <= 0:
            raise ValueError("learning rates must be positive")
        if self.iterations_per_phase < 1:
            raise ValueError("iterations_per_phase must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if int(self.seed) < 0:
            raise ValueError("seed must be unsigned")
        if self.warmup_iterations < 0:
            raise ValueError("warmup_iterations must be >= 0")
        if self.lr_warmup is not None and self.lr_warmup <= 0:
            raise ValueError("lr_warmup must be positive")


def cosine_lr(base, t, total) -> float:
    """CosineAnnealingLR value for iteration t of `total` (floor 0)."""
    return 0.5 * base * (1.0 + math.cos(math.pi * t / total))


# ---------------------------------------------------------------------------
# losses


def rank_loss(layers, beta) -> float:
    """sum over layers of (expected candidate rank)^beta.

    `layers` is a sequence of (probabilities, ranks) pairs; each
    probability vector must sum to 1.
    """
    total = 0.0
    for probs, ranks in layers:
        probs = np.asarray(probs, dtype=np.float64)
        if abs(probs.sum() - 1.0) > 1e-8:
            raise ValueError("candidate probabilities must sum to 1")
        total += float(np.dot(probs, ranks)) ** beta
    return total


def layer_loss_parts(sl: SuperLayer, gamma, beta):
    """(total, fit, rank_term, resid, recons, probs) at the current state."""
    probs = sl.probabilities()
    with np.errstate(over="ignore", invalid="ignore"):
        recons = [reconstruct(c.factors) for c in sl.candidates]
        mix = probs[0] * recons[0]
        for p, rec in zip(probs[1:], recons[1:]):
            mix = mix + p * rec
        resid = mix - sl.target
        fit = frobenius_norm_sq(resid)
    rank_term = gamma * float(np.dot(probs, sl.ranks)) ** beta
    return fit + rank_term, fit, rank_term, resid, recons, probs


def total_loss(superlayers, config: SearchConfig):
    """Composite loss over all layers plus a per-layer breakdown."""
    breakdown = []
    total = 0.0
    for sl in superlayers:
        t, fit, rank_term, _, _, probs = layer_loss_parts(sl, config.gamma, config.beta)
        total += t
        breakdown.append({
            "total": t,
            "fit": fit,
            "rank_term": rank_term,
            "expected_rank": float(np.dot(probs, sl.ranks)),
        })
    return total, breakdown


# ---------------------------------------------------------------------------
# updates


def update_weights(sl: SuperLayer, config: SearchConfig, lr=None):
    """One descent step on every candidate's factors.

    The rank term does not depend on the factors, so the step only follows
    the probability-weighted mixture residual. Returns (total, fit,
    rank_term) evaluated before the step.
    """
    return decomp.mixture_weight_step(
        sl.target,
        [c.factors for c in sl.candidates],
        sl.probabilities(),
        sl.ranks,
        sl._weight_bufs,
        config.lr_weights if lr is None else lr,
        config.momentum,
        config.gamma,
        config.beta,
    )


def alpha_gradient(sl: SuperLayer, gamma, beta):
    """Gradient of the composite loss w.r.t. the candidate scores.

    Both loss terms flow through the softmax Jacobian: the mixture via
    d(fit)/dp_c = -2 <target - mix, recon_c>, the rank penalty via
    gamma * beta * (expected rank)^(beta-1) * rank_c.
    """
    total, fit, rank_term, resid, recons, probs = layer_loss_parts(sl, gamma, beta)
    ranks = sl.ranks
    expected = float(np.dot(probs, ranks))
    dfit_dp = np.array([2.0 * float(np.vdot(resid, rec)) for rec in recons])
    drank_dp = gamma * beta * expected ** (beta - 1.0) * ranks
    dl_dp = dfit_dp + drank_dp
    grad = probs * (dl_dp - float(np.dot(probs, dl_dp)))
    return grad, (total, fit, rank_term)


def update_alphas(sl: SuperLayer, config: SearchConfig, lr=None):
    """One descent step on the candidate scores. Returns (total, fit,
    rank_term) evaluated before the step."""
    grad, parts = alpha_gradient(sl, config.gamma, config.beta)
    if not np.isfinite(parts[0]):
        raise DivergedError(f"loss became non-finite ({parts[0]})")
    buf = sl._alpha_buf
    buf *= config.momentum
    buf += grad
    step = (config.lr_alpha if lr is None else lr) * (grad + config.momentum * buf)
    for c, d in zip(sl.candidates, step):
        c.alpha -= d
    return parts


def select_rank(sl: SuperLayer) -> int:
    """Rank of the highest-score candidate; ties go to the smallest rank."""
    alphas = sl.alphas
    best = int(np.argmax(alphas))  # candidates are rank-ascending
    return sl.candidates[best].rank


# ---------------------------------------------------------------------------
# search driver


@dataclass
class PhaseHistory:
    step: int
    lower: int
    upper: int
    ranks: list
    selected_rank: int
    probabilities: dict
    loss_total: np.ndarray = field(repr=False)
    loss_fit: np.ndarray = field(repr=False)
    loss_rank: np.ndarray = field(repr=False)


@dataclass
class LayerSearchResult:
    name: str
    shape: tuple
    rank_cap: int
    initial_lower: int
    initial_upper: int
    selected_rank: int
    final_probabilities: dict
    phases: list


@dataclass
class SearchReport:
    decomp: str
    selected_ranks: list
    layers: list

    def phase_totals(self):
        """Per-phase loss traces summed over layers."""
        totals = []
        for pi in range(len(self.layers[0].phases)):
            acc = None
            for layer in self.layers:
                ph = layer.phases[pi]
                stack = np.stack([ph.loss_total, ph.loss_fit, ph.loss_rank])
                acc = stack if acc is None else acc + stack
            totals.append({
                "step": self.layers[0].phases[pi].step,
                "loss_total": acc[0],
                "loss_fit": acc[1],
                "loss_rank": acc[2],
            })
        return totals


def layer_rank_cap(kernel, kind: str) -> int:
    """Largest candidate rank a layer admits under the given decomposition."""
    kernel = check_conv_kernel(kernel)
    if kind == "cp":
        return cp_rank_cap(kernel.shape)
    return min(tt_bond_caps(kernel_to_tt_view(kernel).shape))


_UNIT_PROB = np.ones(1)
_UNIT_RANK = np.ones(1)


def build_superlayer(target, ranks, kind, cfg: SearchConfig,
                     phase_index) -> SuperLayer:
    """Fresh candidates (zero scores, seeded factor init) for one phase.

    Each candidate is warm-started with cfg.warmup_iterations steps of
    plain per-candidate decomposition before the coupled search begins, so
    the score updates compare candidates near their own best fits rather
    than at random initialization. Candidate seeds depend only on the
    global seed, the phase, and the candidate index, so identical layers
    search identically.
    """
    candidates = []
    lr_warm = cfg.lr_weights if cfg.lr_warmup is None else cfg.lr_warmup
    for ci, r in enumerate(ranks):
        rng = np.random.default_rng([cfg.seed, phase_index, ci])
        spec = int(r) if kind == "cp" else (int(r), int(r))
        factors = init_factors(target, spec, rng)
        if cfg.warmup_iterations:
            bufs = zero_momentum(factors)
            for _ in range(cfg.warmup_iterations):
                decomp.mixture_weight_step(
                    target, [factors], _UNIT_PROB, _UNIT_RANK, [bufs],
                    lr_warm, cfg.momentum, 0.0, 1.0)
        candidates.append(RankCandidate(rank=int(r), factors=factors))
    return SuperLayer(target, candidates)


def _search_layer(kernel, name, lower, upper, step, cfg, kind):
    kernel = check_conv_kernel(kernel)
    cap = layer_rank_cap(kernel, kind)
    target = kernel if kind == "cp" else kernel_to_tt_view(kernel)

    RankSet(lower, upper, step)  # reject invalid windows before clamping
    # Clamp into what the layer admits, keeping the width divisible by the
    # step.
    upper_eff = min(upper, cap)
    lower_eff = min(lower, upper_eff)
    upper_eff = lower_eff + ((upper_eff - lower_eff) // step) * step

    lo, up, s = lower_eff, upper_eff, step
    phases = []
    phase_index = 0
    while True:
        ranks = list(range(lo, up + 1, s))
        sl = build_superlayer(target, ranks, kind, cfg, phase_index)
        T = cfg.iterations_per_phase
        loss_total = np.empty(T)
        loss_fit = np.empty(T)
        loss_rank = np.empty(T)
        for t in range(T):
            lr_w = cosine_lr(cfg.lr_weights, t, T) if cfg.lr_schedule else cfg.lr_weights
            lr_a = cosine_lr(cfg.lr_alpha, t, T) if cfg.lr_schedule else cfg.lr_alpha
            tot, fit, rk = update_weights(sl, cfg, lr=lr_w)
            update_alphas(sl, cfg, lr=lr_a)
            loss_total[t] = tot
            loss_fit[t] = fit
            loss_rank[t] = rk
        sr = select_rank(sl)
        probs = sl.probabilities()
        phases.append(PhaseHistory(
            step=s, lower=lo, upper=up, ranks=ranks, selected_rank=sr,
            probabilities={int(r): float(p) for r, p in zip(ranks, probs)},
            loss_total=loss_total, loss_fit=loss_fit, loss_rank=loss_rank))
        if s == 1:
            break
        bounds, s = refine_search_space(
            [sr], s, caps=[min(cap, upper_eff)], floors=[lower_eff])
        lo, up = bounds[0]
        phase_index += 1

    return LayerSearchResult(
        name=name, shape=tuple(kernel.shape), rank_cap=cap,
        initial_lower=lower_eff, initial_upper=upper_eff,
        selected_rank=phases[-1].selected_rank,
        final_probabilities=phases[-1].probabilities,
        phases=phases)


def run_search(kernels, lower, upper, step, config: SearchConfig,
               decomp_kind: str = "cp", names=None, threads: int = 1) -> SearchReport:
    """Run the full coarse-to-fine rank search over a list of conv kernels.

    Layers are independent under the composite loss, so they are searched
    in parallel when threads > 1; results are deterministic for a given
    config.seed regardless of the thread count.

    Parameters
    ----------
    kernels : list of (O, C, k1, k2) arrays
    lower, upper : int or per-layer sequence
        Initial rank window; clamped per layer to its admissible cap.
    step : int
        Initial spacing between candidate ranks.
    config : SearchConfig
    decomp_kind : "cp" or "tt"
    names : optional per-layer labels for the report
    threads : layer-level parallelism
    """
    if decomp_kind not in ("cp", "tt"):
        raise ValueError(f"unknown decomposition kind {decomp_kind!r}")
    n = len(kernels)
    if n == 0:
        raise InvalidBoundsError("model has no convolutional layers")
    lows = _broadcast(lower, n, "lower bounds")
    ups = _broadcast(upper, n, "upper bounds")
    step = int(step)
    if names is None:
        names = [f"layer{i}" for i in range(n)]

    def job(i):
        return _search_layer(kernels[i], names[i], lows[i], ups[i], step,
                             config, decomp_kind)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            layers = list(pool.map(job, range(n)))
    else:
        layers = [job(i) for i in range(n)]

    return SearchReport(
        decomp=decomp_kind,
        selected_ranks=[layer.selected_rank for layer in layers],
        layers=layers)


def final_decompose(kernels, selected_ranks, cfg, decomp_kind: str = "cp",
                    restarts: int = 1):
    """Decompose every kernel at its selected rank (no mixture, no penalty).

    Runs `restarts` seeded fits per layer and keeps the lowest loss
    (factorization landscapes have occasional poor local minima).
    Returns (factor sets, per-layer relative reconstruction errors).
    """
    if len(kernels) != len(selected_ranks):
        raise ValueError("one selected rank per layer required")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    factor_sets = []
    rel_errors = []
    base_seed = list(cfg.seed) if isinstance(cfg.seed, (list, tuple)) else [cfg.seed]
    for i, (kernel, rank) in enumerate(zip(kernels, selected_ranks)):
        kernel = check_conv_kernel(kernel)
        target = kernel if decomp_kind == "cp" else kernel_to_tt_view(kernel)
        spec = int(rank) if decomp_kind == "cp" else (int(rank), int(rank))
        best = None
        for attempt in range(restarts):
            layer_cfg = decomp.DecomposeConfig(
                learning_rate=cfg.learning_rate, iterations=cfg.iterations,
                momentum=cfg.momentum, seed=base_seed + [i, attempt],
                init_scale=cfg.init_scale)
            result = decomp.decompose_sgd(target, spec, layer_cfg)
            if best is None or result.final_loss < best.final_loss:
                best = result
        norm_sq = frobenius_norm_sq(target)
        rel = math.sqrt(best.final_loss / norm_sq) if norm_sq > 0 else 0.0
        factor_sets.append(best.factors)
        rel_errors.append(rel)
    return factor_sets, rel_errors
