"""Hierarchical convolutional sparse coding (analysis step).

Each layer solves, for fixed filters ``A``, ``B`` and target ``x_prev``::

    min_{x, u}  1/2 ||x_prev - A * x - B * u||^2 + lam ||u||_1 + gamma/2 ||x||^2

with FISTA (or plain ISTA), and the layers are solved one after another,
each estimated scale code becoming the next layer's target. The ``u`` update
is a gradient step followed by soft-thresholding, i.e. a pair of ReLUs.

All solvers accept a single signal ``(C, H, W)`` or a batch
``(N, C, H, W)``; batches are solved example-wise in lockstep.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import os

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, DivergenceError, ShapeError

# Fixed encode chunk size; keeps results independent of the thread count.
CHUNK = 32


@dataclass
class FistaSettings:
    step: float = 0.01
    iters: int = 40
    record_objective: bool = False

    def validate(self):
        if not (np.isfinite(self.step) and self.step > 0):
            raise ConfigError(f"step must be positive, got {self.step!r}")
        if int(self.iters) != self.iters or self.iters < 1:
            raise ConfigError(f"iters must be a positive integer, got {self.iters!r}")


@dataclass
class Encoding:
    """Codes for one image or a batch.

    ``x[l]`` and ``u[l]`` hold the scale and detail codes of layer ``l + 1``.
    ``objective_trace[l]`` has one row per recorded iterate (only the final
    value unless the solver recorded the full trace) and one column per
    example for batches. ``layer_residual_mse[l]`` is the mean squared
    residual of layer ``l + 1``.
    """

    x: list
    u: list
    objective_trace: list = field(default_factory=list)
    layer_residual_mse: list = field(default_factory=list)

    @property
    def depth(self):
        return len(self.x)

    @property
    def batched(self):
        return self.x[0].ndim == 4


def _as_batch(a, dtype=None):
    a = np.asarray(a)
    if dtype is None:
        dtype = np.float64 if a.dtype == np.float64 else np.float32
    a = np.ascontiguousarray(a, dtype=dtype)
    if a.ndim == 3:
        return a[None], True
    if a.ndim == 4:
        return a, False
    raise ShapeError(f"expected a (C, H, W) signal or (N, C, H, W) batch, got shape {a.shape}")


def residual(x_prev, A, x, B, u):
    """``A * x + B * u - x_prev``."""
    r = tc.conv_full(A, x) + tc.conv_full(B, u)
    if r.shape != np.shape(x_prev):
        raise ShapeError(
            f"reconstruction shape {r.shape} does not match target shape {np.shape(x_prev)}")
    return r - x_prev


def _sq_sum(a):
    a = np.asarray(a, dtype=np.float64)
    return np.einsum("...ijk,...ijk->...", a, a)


def _abs_sum(a):
    return np.abs(np.asarray(a, dtype=np.float64)).sum(axis=(-3, -2, -1))


def data_fidelity(x_prev, A, x, B, u):
    """``1/2 ||x_prev - A * x - B * u||^2`` (per example for batches)."""
    out = 0.5 * _sq_sum(residual(x_prev, A, x, B, u))
    return float(out) if np.ndim(out) == 0 else out


def layer_objective(x_prev, A, x, B, u, lam, gamma):
    """Data fidelity plus ``lam ||u||_1 + gamma/2 ||x||^2``."""
    out = (0.5 * _sq_sum(residual(x_prev, A, x, B, u))
           + lam * _abs_sum(u) + 0.5 * gamma * _sq_sum(x))
    return float(out) if np.ndim(out) == 0 else out


def grad_u(x_prev, A, x, B, u):
    """Gradient of the data fidelity w.r.t. the detail code: ``r (star) B``."""
    return tc.corr_valid(residual(x_prev, A, x, B, u), B)


def grad_x(x_prev, A, x, B, u):
    """Gradient of the data fidelity w.r.t. the scale code: ``r (star) A``."""
    return tc.corr_valid(residual(x_prev, A, x, B, u), A)


def lipschitz_constant(A, B, code_hw, gamma=0.0, iters=100, seed=0):
    """Estimate the gradient Lipschitz constant of the smooth layer objective.

    Power iteration on ``M^T M`` with ``M(x, u) = A * x + B * u``; returns the
    largest eigenvalue plus ``gamma``.
    """
    rng = np.random.default_rng(seed)
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    x = rng.standard_normal((A.shape[1], *code_hw))
    u = rng.standard_normal((B.shape[1], *code_hw))
    eig = 0.0
    for _ in range(iters):
        norm = np.sqrt(_sq_sum(x) + _sq_sum(u))
        x, u = x / norm, u / norm
        y = tc.conv_full(A, x) + tc.conv_full(B, u)
        x, u = tc.corr_valid(y, A), tc.corr_valid(y, B)
        eig = float(np.sqrt(_sq_sum(x) + _sq_sum(u)))
    return eig + gamma


def _solve(x_prev, A, B, lam, gamma, settings, init, accelerated):
    settings.validate()
    if lam < 0 or gamma < 0:
        raise ConfigError(f"lam and gamma must be nonnegative (got {lam}, {gamma})")
    target, single = _as_batch(x_prev)
    dtype = target.dtype
    A = np.ascontiguousarray(A, dtype=dtype)
    B = np.ascontiguousarray(B, dtype=dtype)
    if A.shape[0] != target.shape[1] or B.shape[0] != target.shape[1]:
        raise ShapeError(
            f"filters A {A.shape} / B {B.shape} do not produce {target.shape[1]} channels")
    if A.shape[2:] != B.shape[2:]:
        raise ShapeError(f"A {A.shape} and B {B.shape} kernel sizes differ")
    N, _, H, W = target.shape
    h, w = H - A.shape[2] + 1, W - A.shape[3] + 1
    if h < 1 or w < 1:
        raise ShapeError(f"kernel {A.shape[2:]} larger than target {target.shape[2:]}")
    if init is None:
        x = np.zeros((N, A.shape[1], h, w), dtype=dtype)
        u = np.zeros((N, B.shape[1], h, w), dtype=dtype)
    else:
        x = _as_batch(init[0], dtype)[0].copy()
        u = _as_batch(init[1], dtype)[0].copy()
        if x.shape != (N, A.shape[1], h, w) or u.shape != (N, B.shape[1], h, w):
            raise ShapeError(f"warm start shapes {x.shape}, {u.shape} do not fit the layer")

    alpha, lam, gamma = float(settings.step), float(lam), float(gamma)
    thresh = lam * alpha
    trace = []
    if settings.record_objective:
        trace.append(layer_objective(target, A, x, B, u, lam, gamma))
    x_old, u_old = x, u
    t = 1.0
    # overflow is caught explicitly below, so silence numpy's warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, settings.iters + 1):
            if accelerated:
                # plain floats: a numpy float64 here would upcast float32 codes
                t_next = (1.0 + (1.0 + 4.0 * t * t) ** 0.5) / 2.0
                beta = (t - 1.0) / t_next
            else:
                t_next, beta = 1.0, 0.0
            if beta:
                xb = x + beta * (x - x_old)
                ub = u + beta * (u - u_old)
            else:
                xb, ub = x, u
            r = tc.conv_full(A, xb)
            r += tc.conv_full(B, ub)
            r -= target
            if not np.isfinite(r).all():
                raise DivergenceError(
                    f"non-finite residual at iteration {k} with step {alpha}",
                    iteration=k, step=alpha)
            x_old, u_old = x, u
            x = xb - alpha * (tc.corr_valid(r, A) + gamma * xb)
            u = tc.soft_threshold(ub - alpha * tc.corr_valid(r, B), thresh)
            t = t_next
            if settings.record_objective:
                trace.append(layer_objective(target, A, x, B, u, lam, gamma))
        if not settings.record_objective:
            trace.append(layer_objective(target, A, x, B, u, lam, gamma))
    trace = np.array(trace)
    if not np.isfinite(trace[-1]).all():
        raise DivergenceError(
            f"non-finite objective after {settings.iters} iterations with step {alpha}",
            iteration=settings.iters, step=alpha)
    if single:
        return x[0], u[0], trace[:, 0]
    return x, u, trace


def fista_layer(x_prev, A, B, lam, gamma, settings, init=None):
    """Solve one layer with FISTA; returns ``(x, u, objective_trace)``.

    The first iteration takes no momentum step. ``init`` is an optional
    ``(x, u)`` warm start (zeros otherwise). Raises
    :class:`~hcsc.errors.DivergenceError` if the iterates stop being finite.
    """
    return _solve(x_prev, A, B, lam, gamma, settings, init, accelerated=True)


def ista_layer(x_prev, A, B, lam, gamma, settings, init=None):
    """Unaccelerated proximal gradient; same contract as :func:`fista_layer`."""
    return _solve(x_prev, A, B, lam, gamma, settings, init, accelerated=False)


def default_threads():
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1


def _encode_batch(model, batch, settings, solver):
    xs, us, traces, mses = [], [], [], []
    target = batch
    for layer in range(1, model.depth + 1):
        i = layer - 1
        cfg = model.layers[i]
        try:
            x, u, trace = solver(target, model.A[i], model.B[i], cfg.lam, cfg.gamma, settings)
        except DivergenceError as exc:
            exc.layer = layer
            exc.args = (f"layer {layer}: {exc}",)
            raise
        except ShapeError as exc:
            raise ShapeError(f"layer {layer}: {exc}") from exc
        r = residual(target, model.A[i], x, model.B[i], u)
        mses.append(_sq_sum(r) / r[0].size)
        xs.append(x)
        us.append(u)
        traces.append(trace)
        target = x
    return xs, us, traces, mses


def encode(model, x0, settings=None, threads=1, accelerated=True):
    """Encode an image or batch layer by layer.

    Layer ``l`` is solved against the previous layer's estimated scale code;
    layer 1 sees the image multiplied by ``model.input_scale``. Batches are
    split into fixed chunks which are spread over ``threads`` worker
    threads; the result does not depend on the thread count.
    """
    settings = settings or FistaSettings()
    batch, single = _as_batch(x0)
    if model.input_scale != 1.0:
        batch = batch * batch.dtype.type(model.input_scale)
    if batch.shape[1] != model.image_channels:
        raise ShapeError(
            f"image has {batch.shape[1]} channels, model expects {model.image_channels}")
    model.code_shapes(batch.shape[2:])
    solver = fista_layer if accelerated else ista_layer
    chunks = [batch[s:s + CHUNK] for s in range(0, len(batch), CHUNK)]
    if threads and threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _encode_batch(model, c, settings, solver), chunks))
    else:
        parts = [_encode_batch(model, c, settings, solver) for c in chunks]
    depth = model.depth
    xs = [np.concatenate([p[0][l] for p in parts]) for l in range(depth)]
    us = [np.concatenate([p[1][l] for p in parts]) for l in range(depth)]
    traces = [np.concatenate([p[2][l] for p in parts], axis=1) for l in range(depth)]
    mses = [np.concatenate([p[3][l] for p in parts]) for l in range(depth)]
    if single:
        return Encoding(x=[a[0] for a in xs], u=[a[0] for a in us],
                        objective_trace=[t[:, 0] for t in traces],
                        layer_residual_mse=[float(m[0]) for m in mses])
    return Encoding(x=xs, u=us, objective_trace=traces, layer_residual_mse=mses)


def reconstruct(model, encoding, from_layer=None):
    """Synthesize ``x_0`` noise-free from the codes of layer ``from_layer`` down.

    Uses ``x_{from_layer}`` and ``u_1 .. u_{from_layer}``; defaults to the
    deepest layer. The result is in image units (divided by
    ``model.input_scale``).
    """
    if from_layer is None:
        from_layer = encoding.depth
    if not 1 <= from_layer <= min(model.depth, encoding.depth):
        raise ShapeError(f"from_layer must be in 1..{model.depth}, got {from_layer}")
    x = encoding.x[from_layer - 1]
    for layer in range(from_layer, 0, -1):
        i = layer - 1
        x = tc.conv_full(model.A[i], x) + tc.conv_full(model.B[i], encoding.u[i])
    if model.input_scale != 1.0:
        x = x / x.dtype.type(model.input_scale)
    return x


def relative_error(x0, recon):
    """``||x0 - recon|| / ||x0||`` per example (0 where ``x0`` is all zero)."""
    num = np.sqrt(_sq_sum(np.asarray(x0, dtype=np.float64) - recon))
    den = np.sqrt(_sq_sum(x0))
    out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(out) if np.ndim(out) == 0 else out


def nonzero_fraction(codes):
    """Fraction of nonzero entries, per example for batches."""
    codes = np.asarray(codes)
    if codes.ndim == 4:
        return np.count_nonzero(codes.reshape(len(codes), -1), axis=1) / codes[0].size
    return np.count_nonzero(codes) / codes.size
