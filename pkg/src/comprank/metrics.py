"""Parameter and FLOP accounting for dense vs factored convolutions.

FLOPs count multiply-accumulates times two, with every pipeline stage
evaluated at the layer's output spatial resolution (exact for stride 1;
a documented overestimate of the intermediate stages for stride > 1).
Biases and normalization parameters are excluded throughout.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class LayerCost:
    """Parameter count and FLOPs of one convolutional layer."""

    params: int
    flops: int

    def __post_init__(self):
        if self.params < 0 or self.flops < 0:
            raise ValueError("costs must be nonnegative")


def _require_positive(**dims):
    for name, value in dims.items():
        if value < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")


def dense_cost(o, c, k1, k2, h_out, w_out) -> LayerCost:
    """Cost of a dense (O, C, k1, k2) convolution at output size h_out x w_out."""
    _require_positive(o=o, c=c, k1=k1, k2=k2, h_out=h_out, w_out=w_out)
    params = o * c * k1 * k2
    return LayerCost(params=params, flops=2 * params * h_out * w_out)


def cp_cost(o, c, k1, k2, rank, h_out, w_out) -> LayerCost:
    """Cost of the four-stage CP pipeline at rank `rank`."""
    _require_positive(o=o, c=c, k1=k1, k2=k2, rank=rank, h_out=h_out, w_out=w_out)
    params = rank * (o + c + k1 + k2)
    flops = 2 * h_out * w_out * rank * (c + k1 + k2 + o)
    return LayerCost(params=params, flops=flops)


def tt_cost(o, c, k1, k2, r1, r2, h_out, w_out) -> LayerCost:
    """Cost of the three-stage TT pipeline with bond ranks (r1, r2)."""
    _require_positive(o=o, c=c, k1=k1, k2=k2, r1=r1, r2=r2, h_out=h_out, w_out=w_out)
    params = o * r1 + r1 * k1 * k2 * r2 + c * r2
    flops = 2 * h_out * w_out * (c * r2 + r1 * r2 * k1 * k2 + r1 * o)
    return LayerCost(params=params, flops=flops)


def reduction_pct(dense_total, compressed_total) -> float:
    """100 * (1 - compressed/dense); negative when compression inflates."""
    if dense_total <= 0:
        raise ValueError("dense total must be positive")
    return 100.0 * (1.0 - compressed_total / dense_total)


def model_report(dense_costs, decomposed_costs) -> dict:
    """Aggregate reduction percentages over equal-length cost lists.

    Returns a dict with total params/flops on both sides, the two
    reduction percentages, and per-layer percentage pairs. Reductions may
    be negative (flagged with "inflated": True) when a decomposition is
    larger than its dense layer.
    """
    if len(dense_costs) != len(decomposed_costs):
        raise ValueError("layer count mismatch between dense and decomposed costs")
    if not dense_costs:
        raise ValueError("at least one layer required")
    dense_params = sum(lc.params for lc in dense_costs)
    dense_flops = sum(lc.flops for lc in dense_costs)
    comp_params = sum(lc.params for lc in decomposed_costs)
    comp_flops = sum(lc.flops for lc in decomposed_costs)
    per_layer = [
        {
            "params_reduction_pct": reduction_pct(d.params, x.params),
            "flops_reduction_pct": reduction_pct(d.flops, x.flops),
            "inflated": x.params > d.params,
        }
        for d, x in zip(dense_costs, decomposed_costs)
    ]
    return {
        "dense_params": dense_params,
        "dense_flops": dense_flops,
        "compressed_params": comp_params,
        "compressed_flops": comp_flops,
        "params_reduction_pct": reduction_pct(dense_params, comp_params),
        "flops_reduction_pct": reduction_pct(dense_flops, comp_flops),
        "per_layer": per_layer,
    }
