"""Command-line front end: search, decompose, report, sweep, verify.

Exit codes: 0 success, 1 usage or input-contract error, 2 file I/O or
format error, 3 numerical divergence (or a failed verify equivalence).
"""

import argparse
import os
import sys

import numpy as np

from . import archive, metrics
from .decomp import (
    CPFactors,
    DecomposeConfig,
    DivergedError,
    cp_conv_forward,
    cp_reconstruct,
    tt_conv_forward,
    tt_from_storage_cores,
    tt_kernel,
    tt_storage_cores,
)
from .search import (
    InvalidBoundsError,
    SearchConfig,
    final_decompose,
    run_search,
)
from .tensors import ShapeMismatchError, conv2d_dense, frobenius_norm_sq

USAGE_EXIT = 1
IO_EXIT = 2
DIVERGED_EXIT = 3


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# flag parsing helpers


def _parse_int_list(text, name):
    try:
        return [int(tok) for tok in str(text).split(",") if tok != ""]
    except ValueError:
        raise CliError(USAGE_EXIT, f"--{name} expects INT or comma list, got {text!r}")


def _parse_float_list(text, name):
    try:
        return [float(tok) for tok in str(text).split(",") if tok != ""]
    except ValueError:
        raise CliError(USAGE_EXIT, f"--{name} expects REAL or comma list, got {text!r}")


def _parse_input_size(text):
    parts = str(text).lower().split("x")
    if len(parts) != 3:
        raise CliError(USAGE_EXIT, f"--input-size expects CxHxW, got {text!r}")
    try:
        c, h, w = (int(p) for p in parts)
    except ValueError:
        raise CliError(USAGE_EXIT, f"--input-size expects integers, got {text!r}")
    if min(c, h, w) < 1:
        raise CliError(USAGE_EXIT, "--input-size dimensions must be positive")
    return c, h, w


def _load_model(path):
    """Conv kernels (order preserved) from a model archive."""
    try:
        tensors = archive.read_archive_file(path)
    except OSError as exc:
        raise CliError(IO_EXIT, f"cannot read model archive {path}: {exc}")
    except archive.ArchiveError as exc:
        raise CliError(IO_EXIT, f"bad model archive {path}: {exc}")
    names, kernels = [], []
    for name, arr in tensors.items():
        if arr.ndim == 4:
            names.append(name)
            kernels.append(arr)
    if not kernels:
        raise CliError(USAGE_EXIT, f"model archive {path} holds no 4-way conv tensors")
    return names, kernels


def _read_report(path):
    try:
        return archive.read_report(path)
    except OSError as exc:
        raise CliError(IO_EXIT, f"cannot read report {path}: {exc}")
    except ValueError as exc:
        raise CliError(IO_EXIT, f"report {path} is not valid JSON: {exc}")


def _float(value):
    return float(value)


# ---------------------------------------------------------------------------
# search


def _search_config(args):
    try:
        return SearchConfig(
            gamma=args.gamma, beta=args.beta,
            lr_weights=args.lr_w, lr_alpha=args.lr_alpha,
            iterations_per_phase=args.iters,
            lr_schedule=not args.no_cosine,
            momentum=args.momentum, seed=args.seed,
            warmup_iterations=args.warmup,
            lr_warmup=args.lr_warmup)
    except ValueError as exc:
        raise CliError(USAGE_EXIT, str(exc))


def _expected_metrics(shapes, selected, kind, input_size):
    h_out = w_out = 1
    if input_size is not None:
        _, h_out, w_out = input_size
    dense, comp = [], []
    for (o, c, k1, k2), rank in zip(shapes, selected):
        dense.append(metrics.dense_cost(o, c, k1, k2, h_out, w_out))
        if kind == "cp":
            comp.append(metrics.cp_cost(o, c, k1, k2, rank, h_out, w_out))
        else:
            comp.append(metrics.tt_cost(o, c, k1, k2, rank, rank, h_out, w_out))
    report = metrics.model_report(dense, comp)
    report["spatial_size_assumed"] = [h_out, w_out]
    return report


def _report_dict(result, names, shapes, config, lower, upper, step, model_path,
                 input_size):
    layers = []
    for layer in result.layers:
        phases = []
        for ph in layer.phases:
            phases.append({
                "step": ph.step,
                "lower": ph.lower,
                "upper": ph.upper,
                "ranks": list(ph.ranks),
                "selected_rank": ph.selected_rank,
                "probabilities": [[r, _float(p)] for r, p in sorted(ph.probabilities.items())],
                "loss_total": [_float(v) for v in ph.loss_total],
                "loss_fit": [_float(v) for v in ph.loss_fit],
                "loss_rank": [_float(v) for v in ph.loss_rank],
            })
        layers.append({
            "name": layer.name,
            "shape": list(layer.shape),
            "rank_cap": layer.rank_cap,
            "initial_lower": layer.initial_lower,
            "initial_upper": layer.initial_upper,
            "selected_rank": layer.selected_rank,
            "final_probabilities": [[r, _float(p)] for r, p in sorted(layer.final_probabilities.items())],
            "phases": phases,
        })
    totals = []
    for ph in result.phase_totals():
        totals.append({
            "step": ph["step"],
            "loss_total": [_float(v) for v in ph["loss_total"]],
            "loss_fit": [_float(v) for v in ph["loss_fit"]],
            "loss_rank": [_float(v) for v in ph["loss_rank"]],
        })
    return {
        "format": "comprank-report",
        "version": 1,
        "model": str(model_path),
        "decomp": result.decomp,
        "config": {
            "gamma": config.gamma, "beta": config.beta,
            "lr_weights": config.lr_weights, "lr_alpha": config.lr_alpha,
            "iterations_per_phase": config.iterations_per_phase,
            "lr_schedule": config.lr_schedule, "momentum": config.momentum,
            "seed": config.seed, "warmup_iterations": config.warmup_iterations,
            "lr_warmup": config.lr_warmup,
        },
        "space": {"step": step, "lower": lower, "upper": upper},
        "selected_ranks": {name: sr for name, sr in zip(names, result.selected_ranks)},
        "layers": layers,
        "phase_totals": totals,
        "metrics": _expected_metrics(shapes, result.selected_ranks, result.decomp,
                                     input_size),
    }


def cmd_search(args):
    names, kernels = _load_model(args.model)
    n = len(kernels)
    lower = _parse_int_list(args.lb, "lb")
    upper = _parse_int_list(args.ub, "ub")
    if len(lower) == 1:
        lower *= n
    if len(upper) == 1:
        upper *= n
    config = _search_config(args)
    input_size = _parse_input_size(args.input_size) if args.input_size else None
    try:
        result = run_search(kernels, lower, upper, args.step, config,
                            decomp_kind=args.decomp, names=names,
                            threads=args.threads)
    except InvalidBoundsError as exc:
        raise CliError(USAGE_EXIT, str(exc))
    report = _report_dict(result, names, [k.shape for k in kernels], config,
                          lower, upper, args.step, args.model, input_size)
    try:
        archive.write_report(args.out, report)
    except OSError as exc:
        raise CliError(IO_EXIT, f"cannot write report {args.out}: {exc}")
    print(f"selected ranks: {result.selected_ranks}")
    print(f"report written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# decompose


def cmd_decompose(args):
    names, kernels = _load_model(args.model)
    report = _read_report(args.report)
    kind = report.get("decomp")
    if kind not in ("cp", "tt"):
        raise CliError(USAGE_EXIT, f"report lacks a valid decomp kind ({kind!r})")
    selected = report.get("selected_ranks", {})
    ranks = []
    for name in names:
        if name not in selected:
            raise CliError(USAGE_EXIT,
                           f"report has no selected rank for layer {name!r}")
        ranks.append(int(selected[name]))
    cfg = DecomposeConfig(learning_rate=args.lr, iterations=args.iters,
                          momentum=args.momentum, seed=args.seed)
    factor_sets, rel_errors = final_decompose(kernels, ranks, cfg, kind,
                                              restarts=args.restarts)
    entries = []
    for i, (kernel, factors) in enumerate(zip(kernels, factor_sets)):
        if kind == "cp":
            for nmode, mat in enumerate(factors.factors):
                entries.append((f"layer{i}.factor{nmode}", mat))
        else:
            k1, k2 = kernel.shape[2], kernel.shape[3]
            for ncore, core in enumerate(tt_storage_cores(factors, (k1, k2))):
                entries.append((f"layer{i}.core{ncore}", core))
    try:
        archive.write_archive_file(args.out, entries)
    except OSError as exc:
        raise CliError(IO_EXIT, f"cannot write archive {args.out}: {exc}")
    summary = {
        "decomp": kind,
        "out": str(args.out),
        "layers": [
            {"name": name, "rank": rank, "relative_error": _float(err)}
            for name, rank, err in zip(names, ranks, rel_errors)
        ],
    }
    sys.stdout.write(archive.report_to_bytes(summary).decode("utf-8"))
    return 0


# ---------------------------------------------------------------------------
# compressed-archive loading shared by report and verify


def _load_compressed(path, names, kernels):
    """Per-layer factor sets from a compressed archive, validated against
    the model's kernel shapes. Returns (kind, factor sets)."""
    try:
        tensors = archive.read_archive_file(path)
    except OSError as exc:
        raise CliError(IO_EXIT, f"cannot read compressed archive {path}: {exc}")
    except archive.ArchiveError as exc:
        raise CliError(IO_EXIT, f"bad compressed archive {path}: {exc}")
    kind = "cp" if any(key.endswith(".factor0") for key in tensors) else "tt"
    factor_sets = []
    for i, (name, kernel) in enumerate(zip(names, kernels)):
        o, c, k1, k2 = kernel.shape
        try:
            if kind == "cp":
                mats = [tensors[f"layer{i}.factor{n}"] for n in range(4)]
                factors = CPFactors(mats)
                if factors.dims != (o, c, k1, k2):
                    raise CliError(USAGE_EXIT,
                                   f"layer {name!r}: factors shaped for {factors.dims}, "
                                   f"model kernel is {(o, c, k1, k2)}")
            else:
                cores = [tensors[f"layer{i}.core{n}"] for n in range(3)]
                factors = tt_from_storage_cores(cores)
                stored = (cores[0].shape[0], cores[2].shape[0],
                          cores[1].shape[1], cores[1].shape[2])
                if stored != (o, c, k1, k2):
                    raise CliError(USAGE_EXIT,
                                   f"layer {name!r}: cores shaped for {stored}, "
                                   f"model kernel is {(o, c, k1, k2)}")
        except KeyError as exc:
            raise CliError(USAGE_EXIT,
                           f"compressed archive is missing tensor {exc.args[0]!r} "
                           f"for layer {name!r}")
        except ValueError as exc:
            raise CliError(IO_EXIT, f"layer {name!r}: {exc}")
        factor_sets.append(factors)
    return kind, factor_sets


def _factor_rank(kind, factors):
    if kind == "cp":
        return {"rank": factors.rank}
    r1, r2 = factors.ranks
    return {"rank": [r1, r2]}


# ---------------------------------------------------------------------------
# report


def cmd_report(args):
    names, kernels = _load_model(args.model)
    kind, factor_sets = _load_compressed(args.compressed, names, kernels)
    _, h, w = _parse_input_size(args.input_size)
    dense, comp, rows = [], [], []
    for name, kernel, factors in zip(names, kernels, factor_sets):
        o, c, k1, k2 = kernel.shape
        dense.append(metrics.dense_cost(o, c, k1, k2, h, w))
        if kind == "cp":
            comp.append(metrics.cp_cost(o, c, k1, k2, factors.rank, h, w))
            rank_repr = factors.rank
        else:
            r1, r2 = factors.ranks
            comp.append(metrics.tt_cost(o, c, k1, k2, r1, r2, h, w))
            rank_repr = f"{r1}/{r2}"
        rows.append((name, f"{o}x{c}x{k1}x{k2}", rank_repr,
                     dense[-1].params, comp[-1].params,
                     dense[-1].flops, comp[-1].flops))
    summary = metrics.model_report(dense, comp)

    if args.json:
        doc = {
            "decomp": kind,
            "input_size": [int(p) for p in str(args.input_size).lower().split("x")],
            "layers": [
                {
                    "name": row[0], "shape": row[1], "rank": row[2],
                    "dense_params": row[3], "compressed_params": row[4],
                    "dense_flops": row[5], "compressed_flops": row[6],
                    "params_reduction_pct": per["params_reduction_pct"],
                    "flops_reduction_pct": per["flops_reduction_pct"],
                }
                for row, per in zip(rows, summary["per_layer"])
            ],
            "totals": {k: v for k, v in summary.items() if k != "per_layer"},
        }
        sys.stdout.write(archive.report_to_bytes(doc).decode("utf-8"))
    else:
        header = (f"{'layer':<20} {'shape':<14} {'rank':>7} {'params':>10} "
                  f"{'params(c)':>10} {'dP%':>8} {'flops':>13} {'flops(c)':>13} {'dF%':>8}")
        print(header)
        print("-" * len(header))
        for row, per in zip(rows, summary["per_layer"]):
            print(f"{row[0]:<20.20} {row[1]:<14} {str(row[2]):>7} {row[3]:>10} "
                  f"{row[4]:>10} {per['params_reduction_pct']:>8.2f} "
                  f"{row[5]:>13} {row[6]:>13} {per['flops_reduction_pct']:>8.2f}")
        print("-" * len(header))
        print(f"total params {summary['dense_params']} -> {summary['compressed_params']} "
              f"({summary['params_reduction_pct']:.2f}% reduction)")
        print(f"total flops  {summary['dense_flops']} -> {summary['compressed_flops']} "
              f"({summary['flops_reduction_pct']:.2f}% reduction)")

    if args.figures:
        from . import plots
        os.makedirs(args.figures, exist_ok=True)
        made = [plots.reduction_bars(summary["per_layer"], names, args.figures)]
        if args.report:
            search_report = _read_report(args.report)
            made.append(plots.rank_distribution(search_report, args.figures))
            made.append(plots.loss_traces(search_report, args.figures))
        for path in made:
            print(f"figure written to {path}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(args):
    names, kernels = _load_model(args.model)
    n = len(kernels)
    lower = _parse_int_list(args.lb, "lb")
    upper = _parse_int_list(args.ub, "ub")
    if len(lower) == 1:
        lower *= n
    if len(upper) == 1:
        upper *= n
    gammas = _parse_float_list(args.gamma_grid, "gamma-grid")
    betas = _parse_float_list(args.beta_grid, "beta-grid")
    if not gammas or not betas:
        raise CliError(USAGE_EXIT, "gamma and beta grids must be non-empty")
    input_size = _parse_input_size(args.input_size) if args.input_size else None
    os.makedirs(args.out_dir, exist_ok=True)

    rows = []
    for gamma in gammas:
        for beta in betas:
            cell = argparse.Namespace(**vars(args))
            cell.gamma, cell.beta = gamma, beta
            config = _search_config(cell)
            try:
                result = run_search(kernels, lower, upper, args.step, config,
                                    decomp_kind=args.decomp, names=names,
                                    threads=args.threads)
            except InvalidBoundsError as exc:
                raise CliError(USAGE_EXIT, str(exc))
            report = _report_dict(result, names, [k.shape for k in kernels],
                                  config, lower, upper, args.step, args.model,
                                  input_size)
            cell_path = os.path.join(args.out_dir, f"report_g{gamma:g}_b{beta:g}.json")
            try:
                archive.write_report(cell_path, report)
            except OSError as exc:
                raise CliError(IO_EXIT, f"cannot write report {cell_path}: {exc}")
            rows.append({
                "gamma": gamma,
                "beta": beta,
                "total_rank": sum(result.selected_ranks),
                "params_reduction_pct": report["metrics"]["params_reduction_pct"],
                "flops_reduction_pct": report["metrics"]["flops_reduction_pct"],
            })
            print(f"gamma={gamma:g} beta={beta:g}: ranks {result.selected_ranks}")

    lines = ["gamma,beta,total_rank,params_reduction_pct,flops_reduction_pct"]
    for row in rows:
        lines.append(f"{row['gamma']:g},{row['beta']:g},{row['total_rank']},"
                     f"{row['params_reduction_pct']!r},{row['flops_reduction_pct']!r}")
    try:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise CliError(IO_EXIT, f"cannot write CSV {args.csv}: {exc}")
    print(f"sweep summary written to {args.csv}")

    if args.figures:
        from . import plots
        os.makedirs(args.figures, exist_ok=True)
        for key in ("total_rank", "params_reduction_pct", "flops_reduction_pct"):
            path = plots.sweep_heatmap(rows, key, args.figures)
            print(f"figure written to {path}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# verify


def _rel_dev(a, b):
    scale = np.sqrt(max(frobenius_norm_sq(b), 1e-300))
    return float(np.sqrt(frobenius_norm_sq(a - b)) / scale)


def cmd_verify(args):
    names, kernels = _load_model(args.model)
    kind, factor_sets = _load_compressed(args.compressed, names, kernels)
    _, h, w = _parse_input_size(args.input_size)
    rng = np.random.default_rng(args.seed)
    dev_reconstructed = 0.0
    dev_original = 0.0
    for _ in range(args.trials):
        for kernel, factors in zip(kernels, factor_sets):
            o, c, k1, k2 = kernel.shape
            x = rng.standard_normal((c, h, w))
            try:
                if kind == "cp":
                    y_fact = cp_conv_forward(factors, x, args.stride, args.padding)
                    recon = cp_reconstruct(factors)
                else:
                    y_fact = tt_conv_forward(factors, (k1, k2), x, args.stride,
                                             args.padding)
                    recon = tt_kernel(factors, (k1, k2))
                y_recon = conv2d_dense(recon, x, args.stride, args.padding)
                y_orig = conv2d_dense(kernel, x, args.stride, args.padding)
            except ShapeMismatchError as exc:
                raise CliError(USAGE_EXIT, f"incompatible shapes: {exc}")
            dev_reconstructed = max(dev_reconstructed, _rel_dev(y_fact, y_recon))
            dev_original = max(dev_original, _rel_dev(y_fact, y_orig))
    doc = {
        "trials": args.trials,
        "max_rel_dev_factored_vs_reconstructed": dev_reconstructed,
        "max_rel_dev_vs_original": dev_original,
        "tolerance": 1e-6,
    }
    sys.stdout.write(archive.report_to_bytes(doc).decode("utf-8"))
    if dev_reconstructed > 1e-6:
        print("verify FAILED: factored forward deviates from the reconstructed "
              "kernel's dense convolution", file=sys.stderr)
        return DIVERGED_EXIT
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def _add_search_flags(p, need_out):
    p.add_argument("--model", required=True, help="input model archive (.otar)")
    p.add_argument("--decomp", choices=("cp", "tt"), default="cp")
    p.add_argument("--lb", required=True, help="lower rank bound (INT or comma list)")
    p.add_argument("--ub", required=True, help="upper rank bound (INT or comma list)")
    p.add_argument("--step", type=int, required=True, help="initial rank step")
    p.add_argument("--gamma", type=float, default=0.2)
    p.add_argument("--beta", type=float, default=0.6)
    p.add_argument("--iters", type=int, default=1000,
                   help="search iterations per phase")
    p.add_argument("--lr-w", type=float, default=0.1, dest="lr_w")
    p.add_argument("--lr-alpha", type=float, default=0.1, dest="lr_alpha")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--warmup", type=int, default=500,
                   help="per-candidate decomposition steps before each phase")
    p.add_argument("--lr-warmup", type=float, default=None, dest="lr_warmup")
    p.add_argument("--no-cosine", action="store_true",
                   help="disable cosine annealing of the learning rates")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1,
                   help="layer-level parallelism")
    p.add_argument("--input-size", default=None,
                   help="CxHxW used for FLOPs accounting in the report")
    if need_out:
        p.add_argument("--out", required=True, help="output report JSON path")


def build_parser():
    parser = _Parser(prog="comprank",
                     description="CP/TT compression of conv weights with "
                                 "automatic coarse-to-fine rank search")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("search", help="run the rank search and write a report")
    _add_search_flags(p, need_out=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("decompose",
                       help="decompose a model at the ranks a report selected")
    p.add_argument("--model", required=True)
    p.add_argument("--report", required=True, help="search report JSON")
    p.add_argument("--out", required=True, help="output compressed archive (.otar)")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("report", help="params/FLOPs reductions of a compression")
    p.add_argument("--model", required=True)
    p.add_argument("--compressed", required=True)
    p.add_argument("--input-size", required=True, help="CxHxW feature-map size")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--figures", default=None,
                   help="directory for rendered figure files")
    p.add_argument("--report", default=None,
                   help="search report JSON for rank/loss figures")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="grid of searches over gamma and beta")
    _add_search_flags(p, need_out=False)
    p.add_argument("--gamma-grid", required=True, dest="gamma_grid")
    p.add_argument("--beta-grid", required=True, dest="beta_grid")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--csv", required=True, help="summary CSV path")
    p.add_argument("--figures", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify",
                       help="check factored forwards against dense convolution")
    p.add_argument("--model", required=True)
    p.add_argument("--compressed", required=True)
    p.add_argument("--input-size", required=True)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--padding", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_EXIT
    try:
        return args.func(args)
    except CliError as exc:
        print(f"comprank: error: {exc}", file=sys.stderr)
        return exc.code
    except DivergedError as exc:
        print(f"comprank: numerical divergence: {exc}", file=sys.stderr)
        return DIVERGED_EXIT
    except (InvalidBoundsError, ShapeMismatchError, ValueError) as exc:
        print(f"comprank: error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except OSError as exc:
        print(f"comprank: I/O error: {exc}", file=sys.stderr)
        return IO_EXIT


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
