"""Dense N-way tensor arithmetic.

All tensors are numpy float64 arrays in row-major (C) order. Convolution
kernels use the fixed axis order (O, C, k1, k2): output channels, input
channels, kernel height, kernel width. The reference convolution is a
direct sliding-window correlation (no kernel flip).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes or violate a size constraint."""


def as_tensor(a) -> np.ndarray:
    """Coerce `a` to a C-contiguous float64 array and check finiteness."""
    t = np.ascontiguousarray(a, dtype=np.float64)
    if t.ndim < 1:
        t = t.reshape(1)
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite values")
    return t


def check_shape(shape) -> tuple:
    """Validate a tensor shape: order >= 1, every extent >= 1."""
    dims = tuple(int(d) for d in shape)
    if len(dims) < 1:
        raise ShapeMismatchError("tensor order must be >= 1")
    if any(d < 1 for d in dims):
        raise ShapeMismatchError(f"extents must be >= 1, got {dims}")
    return dims


def element_count(shape) -> int:
    n = 1
    for d in check_shape(shape):
        n *= d
    return n


def flat_offset(shape, index) -> int:
    """Row-major flat offset of a multi-index (last index fastest)."""
    dims = check_shape(shape)
    if len(index) != len(dims):
        raise ShapeMismatchError("index order does not match shape order")
    off = 0
    for i, d in zip(index, dims):
        if not 0 <= i < d:
            raise IndexError(f"index {tuple(index)} out of bounds for {dims}")
        off = off * d + i
    return off


def multi_index(shape, offset) -> tuple:
    """Inverse of :func:`flat_offset`."""
    dims = check_shape(shape)
    if not 0 <= offset < element_count(dims):
        raise IndexError(f"offset {offset} out of bounds for {dims}")
    idx = []
    for d in reversed(dims):
        idx.append(offset % d)
        offset //= d
    return tuple(reversed(idx))


def frobenius_norm_sq(t) -> float:
    """Sum of squared entries of `t` (squared Frobenius norm)."""
    flat = np.asarray(t, dtype=np.float64).ravel()
    return float(np.dot(flat, flat))


def check_conv_kernel(kernel) -> np.ndarray:
    """Validate a (O, C, k1, k2) convolution kernel."""
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 4:
        raise ShapeMismatchError(f"conv kernel must be 4-way, got order {k.ndim}")
    check_shape(k.shape)
    return k


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    """Output extent of a strided correlation along one axis.

    Requires (size + 2*padding - k) to be nonnegative and divisible by
    `stride` so the window tiling is exact.
    """
    if stride < 1:
        raise ShapeMismatchError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeMismatchError(f"padding must be >= 0, got {padding}")
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeMismatchError(
            f"kernel extent {k} exceeds padded input extent {size + 2 * padding}")
    if span % stride != 0:
        raise ShapeMismatchError(
            f"(size + 2*padding - k) = {span} not divisible by stride {stride}")
    return span // stride + 1


def conv2d_dense(kernel, x, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct 2-D correlation of a dense (O, C, k1, k2) kernel with a (C, H, W) input.

    Parameters
    ----------
    kernel : array, shape (O, C, k1, k2)
    x : array, shape (C, H, W)
    stride : int
        Common stride for both spatial axes.
    padding : int
        Zero padding applied symmetrically to both spatial axes.

    Returns
    -------
    array, shape (O, H', W') with H' = (H + 2*padding - k1)/stride + 1.
    """
    k = check_conv_kernel(kernel)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeMismatchError(f"input must be (C, H, W), got order {x.ndim}")
    o, c, k1, k2 = k.shape
    ci, h, w = x.shape
    if ci != c:
        raise ShapeMismatchError(f"kernel expects {c} input channels, input has {ci}")
    conv_output_size(h, k1, stride, padding)
    conv_output_size(w, k2, stride, padding)

    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k1, k2), axis=(1, 2))[:, ::stride, ::stride]
    return np.einsum("ocij,chwij->ohw", k, win)
