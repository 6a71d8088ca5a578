"""Dense convolution kernels and elementwise operators.

Signals are arrays shaped ``(channels, height, width)`` or batched
``(batch, channels, height, width)``; filter banks are arrays shaped
``(out_channels, in_channels, kernel_h, kernel_w)``. Storage is float32 by
default; float64 inputs stay float64 (used by the test oracles). Reductions
always accumulate in float64.

``conv_full`` is a true (flipped) full convolution and ``corr_valid`` the
unflipped valid correlation, so the pair are exact adjoints::

    <conv_full(A, x), y> == <x, corr_valid(y, A)>

The compiled kernels in :mod:`hcsc.tensor_core._ckernels` are used when the
extension is built; otherwise the numpy kernels are used. ``BACKEND`` names
the active one and :func:`use_backend` switches it.
"""
import numpy as np

from ..errors import ShapeError
from . import _npkernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

__all__ = [
    "BACKEND", "available_backends", "use_backend",
    "as_signal", "conv_full", "corr_valid", "corr_filter_grad",
    "soft_threshold", "inner_product", "norm_l1", "norm_l2_sq",
]

_BACKENDS = {"numpy": _npkernels}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels

BACKEND = "compiled" if _ckernels is not None else "numpy"
_kernels = _BACKENDS[BACKEND]


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Select the kernel backend (``"compiled"`` or ``"numpy"``); returns the previous one."""
    global BACKEND, _kernels
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {available_backends()}")
    previous = BACKEND
    BACKEND, _kernels = name, _BACKENDS[name]
    return previous


def _result_dtype(*arrays):
    if any(np.asarray(a).dtype == np.float64 for a in arrays):
        return np.float64
    return np.float32


def as_signal(a, dtype=np.float32):
    """Return ``a`` as a C-contiguous real array of the requested dtype."""
    return np.ascontiguousarray(a, dtype=dtype)


def _batched(signal, dtype, name):
    s = np.ascontiguousarray(signal, dtype=dtype)
    if s.ndim == 3:
        return s[None], True
    if s.ndim == 4:
        return s, False
    raise ShapeError(f"{name} must have 3 or 4 dims (got shape {s.shape})")


def _filters(filters, dtype):
    f = np.ascontiguousarray(filters, dtype=dtype)
    if f.ndim != 4:
        raise ShapeError(f"filter bank must have 4 dims (got shape {f.shape})")
    return f


def conv_full(filters, signal):
    """Full 2-D convolution, summed over input channels.

    ``out[r] = sum_c filters[r, c] * signal[c]`` with output spatial size
    ``(h + H - 1, w + W - 1)``.
    """
    dtype = _result_dtype(filters, signal)
    f = _filters(filters, dtype)
    x, single = _batched(signal, dtype, "signal")
    if x.shape[1] != f.shape[1]:
        raise ShapeError(
            f"conv_full: signal shape {tuple(np.shape(signal))} has {x.shape[1]} channels "
            f"but filter bank shape {f.shape} expects {f.shape[1]} input channels")
    N, _, h, w = x.shape
    C, _, H, W = f.shape
    out = np.zeros((N, C, h + H - 1, w + W - 1), dtype=dtype)
    _kernels.conv_full(x, f, out)
    return out[0] if single else out


def corr_valid(signal, filters):
    """Valid correlation, the adjoint of :func:`conv_full`.

    ``out[c] = sum_r signal[r] (star) filters[r, c]`` with output spatial size
    ``(h - H + 1, w - W + 1)``.
    """
    dtype = _result_dtype(filters, signal)
    f = _filters(filters, dtype)
    y, single = _batched(signal, dtype, "signal")
    if y.shape[1] != f.shape[0]:
        raise ShapeError(
            f"corr_valid: signal shape {tuple(np.shape(signal))} has {y.shape[1]} channels "
            f"but filter bank shape {f.shape} has {f.shape[0]} output channels")
    N, _, h, w = y.shape
    C, D, H, W = f.shape
    if H > h or W > w:
        raise ShapeError(
            f"corr_valid: kernel {H}x{W} larger than signal {h}x{w}")
    out = np.zeros((N, D, h - H + 1, w - W + 1), dtype=dtype)
    _kernels.corr_valid(y, f, out)
    return out[0] if single else out


def corr_filter_grad(residual, code, kernel_h, kernel_w):
    """Gradient of ``0.5 * ||residual||^2`` w.r.t. the filters that produced it.

    With ``residual = conv_full(A, code) - target``, entry ``(r, c, p, q)`` is
    ``sum_ij residual[r, i + p, j + q] * code[c, i, j]``, summed over the batch
    when inputs are batched. Returned as float64.
    """
    dtype = _result_dtype(residual, code)
    res, _ = _batched(residual, dtype, "residual")
    x, _ = _batched(code, dtype, "code")
    if res.shape[0] != x.shape[0]:
        raise ShapeError(
            f"corr_filter_grad: batch sizes differ ({res.shape[0]} vs {x.shape[0]})")
    if (res.shape[2] != x.shape[2] + kernel_h - 1
            or res.shape[3] != x.shape[3] + kernel_w - 1):
        raise ShapeError(
            f"corr_filter_grad: residual {res.shape[2:]} is not code {x.shape[2:]} "
            f"fully convolved with a {kernel_h}x{kernel_w} kernel")
    out = np.zeros((res.shape[1], x.shape[1], kernel_h, kernel_w), dtype=np.float64)
    _kernels.filter_grad(res, x, out)
    return out


def soft_threshold(signal, threshold):
    """Proximal operator of ``threshold * ||.||_1``: ``relu(b - t) - relu(-b - t)``."""
    if threshold < 0:
        raise ValueError(f"soft_threshold: threshold must be >= 0, got {threshold}")
    b = np.asarray(signal)
    t = b.dtype.type(threshold) if b.dtype.kind == "f" else threshold
    return np.maximum(b - t, 0) - np.maximum(-b - t, 0)


def inner_product(a, b):
    return float(np.dot(np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)))


def norm_l1(a):
    return float(np.abs(np.asarray(a, dtype=np.float64)).sum())


def norm_l2_sq(a):
    v = np.ravel(a).astype(np.float64)
    return float(np.dot(v, v))
