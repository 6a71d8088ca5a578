"""Convolutional dictionary learning by alternating minimization.

Each minibatch is encoded with the current filters, then every layer's
filters take one projected gradient step on the mean reconstruction loss
``1/2 ||x_{l-1} - A_l * x_l - B_l * u_l||^2`` with the codes held fixed. The
projection rescales each atom (one code channel's slice of a bank) back to
unit l2 norm. Filter gradients come straight from the correlation kernels;
no autodiff and no Fourier transforms.
"""
from dataclasses import dataclass, field
import logging

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, DegenerateAtomError, DivergenceError, EmptyBatchError, ShapeError
from .inference import FistaSettings, encode, reconstruct, relative_error, residual

log = logging.getLogger(__name__)


@dataclass
class TrainSettings:
    epochs: int = 5
    batch_size: int = 32
    dict_lr: float = 0.1
    fista: FistaSettings = field(default_factory=FistaSettings)
    seed: int = 0
    shuffle: bool = True
    threads: int = 1

    def validate(self):
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigError(f"epochs must be a nonnegative integer, got {self.epochs!r}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size!r}")
        if not (np.isfinite(self.dict_lr) and self.dict_lr > 0):
            raise ConfigError(f"dict_lr must be positive, got {self.dict_lr!r}")
        self.fista.validate()


def filter_gradients(A, B, x_prev, x, u):
    """Mean-over-batch gradients of ``1/2 ||A * x + B * u - x_prev||^2``.

    Returns ``(grad_A, grad_B)`` as float64 arrays shaped like ``A``/``B``.
    Accepts single examples or batches along the first axis.
    """
    x_prev = np.asarray(x_prev)
    if x_prev.ndim == 4 and len(x_prev) == 0:
        raise EmptyBatchError("filter_gradients needs at least one example")
    r = residual(x_prev, A, x, B, u)
    n = len(x_prev) if x_prev.ndim == 4 else 1
    kh, kw = np.shape(A)[2:]
    ga = tc.corr_filter_grad(r, x, kh, kw) / n
    gb = tc.corr_filter_grad(r, u, kh, kw) / n
    return ga, gb


def project_unit_atoms(bank):
    """Rescale every atom ``bank[:, c]`` to unit l2 norm (float32 result)."""
    bank = np.asarray(bank, dtype=np.float64)
    norms = np.sqrt(np.sum(bank ** 2, axis=(0, 2, 3)))
    bad = np.flatnonzero(~(norms > 0) | ~np.isfinite(norms))
    if bad.size:
        raise DegenerateAtomError(
            f"atom for code channel {int(bad[0])} has norm {norms[bad[0]]}", channel=int(bad[0]))
    return (bank / norms[None, :, None, None]).astype(np.float32)


def layer_gradients(model, encoding, images):
    """Per-layer ``(grad_A, grad_B)`` for a batch and its encoding.

    The losses are measured in units of the unscaled images (divided by
    ``input_scale ** 2``), so a given ``dict_lr`` behaves the same whatever
    ``input_scale`` is.
    """
    s = float(model.input_scale)
    grads, target = [], np.asarray(images) * np.float32(s)
    for i in range(model.depth):
        ga, gb = filter_gradients(model.A[i], model.B[i], target, encoding.x[i], encoding.u[i])
        grads.append((ga / s**2, gb / s**2))
        target = encoding.x[i]
    return grads


def apply_gradients(model, grads, lr):
    """Projected gradient step on every trainable bank, in place.

    In tied mode the gradients of all layers are summed into the shared bank
    and a single step is taken; the shared arrays are updated in place so
    all layers keep referencing the same values.
    """
    if model.tied:
        ga = sum(g[0] for g in grads)
        gb = sum(g[1] for g in grads)
        grads = [(ga, gb)]
    for i, (ga, gb) in enumerate(grads):
        cfg = model.layers[i]
        if cfg.scale_filter_trainable:
            model.A[i][...] = project_unit_atoms(model.A[i] - lr * ga)
        model.B[i][...] = project_unit_atoms(model.B[i] - lr * gb)
    return model


def dict_step(model, layer, images, encoding, lr):
    """One projected gradient step on layer ``layer`` (1-based) only.

    In tied mode the gradients of every layer are accumulated into the
    shared bank, so ``layer`` is ignored.
    """
    grads = layer_gradients(model, encoding, images)
    if model.tied:
        return apply_gradients(model, grads, lr)
    i = layer - 1
    cfg = model.layers[i]
    ga, gb = grads[i]
    if cfg.scale_filter_trainable:
        model.A[i][...] = project_unit_atoms(model.A[i] - lr * ga)
    model.B[i][...] = project_unit_atoms(model.B[i] - lr * gb)
    return model


@dataclass
class History:
    """Training record.

    ``records`` holds one ``(epoch, batch, layer, objective, recon_rel_err)``
    tuple per layer per minibatch; ``epoch_recon`` and ``epoch_objective``
    hold per-epoch means of the layer-0 relative reconstruction error and of
    each layer's objective.
    """

    records: list = field(default_factory=list)
    epoch_recon: list = field(default_factory=list)
    epoch_objective: list = field(default_factory=list)

    def summary(self):
        return {
            "epochs": len(self.epoch_recon),
            "epoch_recon": [float(v) for v in self.epoch_recon],
            "epoch_objective": [[float(v) for v in row] for row in self.epoch_objective],
        }


def train(model, images, settings=None, callbacks=()):
    """Alternate between encoding minibatches and updating filters.

    ``images`` is an ``(N, C, H, W)`` array. The model is updated in place
    and returned together with a :class:`History`. Each callback is called
    as ``cb(epoch, model, history)`` once before training (epoch 0) and
    after every epoch.
    """
    settings = settings or TrainSettings()
    settings.validate()
    images = np.ascontiguousarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1] != model.image_channels:
        raise ShapeError(f"images must be (N, {model.image_channels}, H, W), got {images.shape}")
    model.code_shapes(images.shape[2:])
    history = History()
    for cb in callbacks:
        cb(0, model, history)
    rng = np.random.default_rng(settings.seed)
    n = len(images)
    for epoch in range(1, settings.epochs + 1):
        order = rng.permutation(n) if settings.shuffle else np.arange(n)
        recon, objective = [], []
        for b, start in enumerate(range(0, n, settings.batch_size), start=1):
            batch = images[order[start:start + settings.batch_size]]
            try:
                enc = encode(model, batch, settings.fista, threads=settings.threads)
            except DivergenceError as exc:
                exc.args = (f"epoch {epoch} batch {b}: {exc}",)
                raise
            err = relative_error(batch, reconstruct(model, enc))
            objs = [float(np.mean(t[-1])) for t in enc.objective_trace]
            target = batch * np.float32(model.input_scale)
            for i in range(model.depth):
                layer_err = relative_error(
                    target, reconstruct_layer(model, i + 1, enc.x[i], enc.u[i]))
                history.records.append((epoch, b, i + 1, objs[i], float(np.mean(layer_err))))
                target = enc.x[i]
            recon.append(err)
            objective.append(objs)
            apply_gradients(model, layer_gradients(model, enc, batch), settings.dict_lr)
        history.epoch_recon.append(float(np.mean(np.concatenate(recon))))
        history.epoch_objective.append(np.mean(objective, axis=0).tolist())
        log.info("epoch %d: recon_rel_err=%.4f objective=%s", epoch,
                 history.epoch_recon[-1], history.epoch_objective[-1])
        for cb in callbacks:
            cb(epoch, model, history)
    model.history_summary = history.summary()
    return model, history


def reconstruct_layer(model, layer, x, u):
    """``A_l * x + B_l * u`` for a single layer."""
    i = layer - 1
    return tc.conv_full(model.A[i], x) + tc.conv_full(model.B[i], u)
