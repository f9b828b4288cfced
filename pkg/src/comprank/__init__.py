"""Low-rank compression of convolutional weight tensors with automatic
coarse-to-fine rank search."""

from .decomp import (
    CPFactors,
    DecomposeConfig,
    DecomposeResult,
    DivergedError,
    TTFactors,
    als_oracle_cp,
    cp_conv_forward,
    cp_rank_cap,
    cp_reconstruct,
    decompose_sgd,
    tt_bond_caps,
    tt_conv_forward,
    tt_reconstruct,
)
from .metrics import LayerCost, cp_cost, dense_cost, model_report, tt_cost
from .search import (
    InvalidBoundsError,
    RankCandidate,
    RankSet,
    SearchConfig,
    SearchReport,
    SuperLayer,
    final_decompose,
    rank_loss,
    refine_search_space,
    rss_function,
    run_search,
    select_rank,
    total_loss,
    update_alphas,
    update_weights,
)
from .tensors import ShapeMismatchError, conv2d_dense, frobenius_norm_sq

__version__ = "0.1.0"

__all__ = [
    "CPFactors", "TTFactors", "DecomposeConfig", "DecomposeResult",
    "DivergedError", "ShapeMismatchError", "InvalidBoundsError",
    "als_oracle_cp", "decompose_sgd", "cp_reconstruct", "tt_reconstruct",
    "cp_conv_forward", "tt_conv_forward", "cp_rank_cap", "tt_bond_caps",
    "conv2d_dense", "frobenius_norm_sq",
    "LayerCost", "dense_cost", "cp_cost", "tt_cost", "model_report",
    "RankSet", "RankCandidate", "SuperLayer", "SearchConfig", "SearchReport",
    "rss_function", "refine_search_space", "rank_loss", "total_loss",
    "update_weights", "update_alphas", "select_rank", "run_search",
    "final_decompose",
]
