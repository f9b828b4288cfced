"""Shared fixtures and independent brute-force oracles.

The oracles here are deliberately written as plain nested loops or
elementwise sums, independent of the library's vectorized code paths.
"""

import numpy as np

from comprank.decomp import CPFactors, cp_reconstruct
from comprank.tensors import frobenius_norm_sq


def naive_conv(kernel, x, stride=1, padding=0):
    """Six-nested-loop correlation reference."""
    o_ch, c_ch, k1, k2 = kernel.shape
    _, h, w = x.shape
    h_out = (h + 2 * padding - k1) // stride + 1
    w_out = (w + 2 * padding - k2) // stride + 1
    y = np.zeros((o_ch, h_out, w_out))
    for o in range(o_ch):
        for i in range(h_out):
            for j in range(w_out):
                acc = 0.0
                for c in range(c_ch):
                    for a in range(k1):
                        for b in range(k2):
                            ii = i * stride + a - padding
                            jj = j * stride + b - padding
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += kernel[o, c, a, b] * x[c, ii, jj]
                y[o, i, j] = acc
    return y


def naive_cp_reconstruct(factors):
    """Direct summation over the rank-one components."""
    dims = tuple(f.shape[0] for f in factors)
    rank = factors[0].shape[1]
    out = np.zeros(dims)
    for idx in np.ndindex(*dims):
        acc = 0.0
        for r in range(rank):
            term = 1.0
            for n, i in enumerate(idx):
                term *= factors[n][i, r]
            acc += term
        out[idx] = acc
    return out


def naive_tt_reconstruct(cores):
    """Direct summation over all bond indices."""
    dims = tuple(c.shape[1] for c in cores)
    bonds = [c.shape[0] for c in cores] + [cores[-1].shape[2]]
    out = np.zeros(dims)
    for idx in np.ndindex(*dims):
        total = 0.0
        for joint in np.ndindex(*bonds):
            if joint[0] != 0 or joint[-1] != 0:
                continue
            term = 1.0
            for k, i in enumerate(idx):
                term *= cores[k][joint[k], i, joint[k + 1]]
            total += term
        out[idx] = total
    return out


def fd_grad(fun, arr, h=1e-5):
    """Central finite differences of a scalar function w.r.t. an array."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        up = fun()
        arr[idx] = orig - h
        down = fun()
        arr[idx] = orig
        grad[idx] = (up - down) / (2.0 * h)
    return grad


def rel_norm_err(got, want):
    scale = np.linalg.norm(np.asarray(want).ravel())
    return np.linalg.norm((np.asarray(got) - np.asarray(want)).ravel()) / max(scale, 1e-300)


def planted_cp_kernel(shape, rank, seed, norm=None):
    """Random Gaussian CP-planted tensor, optionally normalized."""
    g = np.random.default_rng(seed)
    factors = CPFactors([g.standard_normal((d, rank)) for d in shape])
    w = cp_reconstruct(factors)
    if norm is not None:
        w = w * (norm / np.sqrt(frobenius_norm_sq(w)))
    return w


def planted_diag_kernel(channels, k1, k2, rank, seed, norm=5.0):
    """Planted kernel whose components are pairwise orthogonal by
    construction: component r occupies the (r, r) channel pair with a
    unit-norm random spatial pattern, so the best rank-(rank-1) relative
    error is exactly sqrt(1/rank) while rank `rank` fits exactly."""
    if rank > channels:
        raise ValueError("needs rank <= channels for disjoint channel pairs")
    g = np.random.default_rng(seed)
    vo = np.zeros((channels, rank))
    vc = np.zeros((channels, rank))
    for r in range(rank):
        vo[r, r] = 1.0
        vc[r, r] = 1.0
    vh = g.standard_normal((k1, rank))
    vh /= np.linalg.norm(vh, axis=0)
    vw = g.standard_normal((k2, rank))
    vw /= np.linalg.norm(vw, axis=0)
    w = cp_reconstruct(CPFactors([vo, vc, vh, vw]))
    return w * (norm / np.sqrt(frobenius_norm_sq(w)))
