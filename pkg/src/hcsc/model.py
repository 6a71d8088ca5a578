"""Hierarchical scale/detail generative model.

Layer ``l`` maps a scale signal ``x_l`` and a detail signal ``u_l`` to the
scale signal one level up::

    x_{l-1} = A_l * x_l + B_l * u_l + eps_l

where ``*`` is the full convolution of :func:`hcsc.tensor_core.conv_full`.
``x_0`` is the observed image times ``input_scale``. With ``tied=True``
every layer shares one ``(A, B)`` pair, the way a wavelet is reused across
decomposition levels.

Filter banks are float32 arrays shaped ``(out, in, kh, kw)``: ``A_l`` is
``(C_{l-1}, scale_channels_l, kh, kw)`` and ``B_l`` is
``(C_{l-1}, detail_channels_l, kh, kw)``, where ``C_{l-1}`` is the channel
count of ``x_{l-1}``. An *atom* is the slice ``bank[:, c]`` for one code
channel ``c``; learning keeps every atom at unit l2 norm.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, ShapeError


@dataclass
class LayerConfig:
    """Per-layer geometry and hyperparameters.

    ``lam`` weights the l1 penalty on the detail code (and is the Laplace
    diversity when sampling); ``gamma`` weights the ridge penalty
    ``gamma / 2 * ||x||^2`` on the scale code. ``sigma_eps`` and ``sigma_x``
    only affect sampling and synthesis.
    """

    scale_channels: int = 1
    detail_channels: int = 32
    kernel_h: int = 5
    kernel_w: int = 5
    lam: float = 1.0
    gamma: float = 0.01
    sigma_eps: float = 0.0
    sigma_x: float = 1.0
    scale_filter_trainable: bool = False

    def validate(self):
        for name in ("scale_channels", "detail_channels", "kernel_h", "kernel_w"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("lam", "gamma", "sigma_eps", "sigma_x"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be a finite nonnegative number, got {v!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class HierarchicalModel:
    layers: list
    A: list
    B: list
    tied: bool = False
    image_channels: int = 1
    input_scale: float = 1.0
    seed: int = 0
    history_summary: dict = field(default_factory=dict)

    @property
    def depth(self):
        return len(self.layers)

    def input_channels(self, layer):
        """Channel count of ``x_{layer-1}`` (1-based ``layer``)."""
        if layer == 1:
            return self.image_channels
        return self.layers[layer - 2].scale_channels

    def code_shape(self, layer, prev_hw):
        """Spatial size of ``x_layer``/``u_layer`` given the size of ``x_{layer-1}``."""
        cfg = self.layers[layer - 1]
        h, w = prev_hw[0] - cfg.kernel_h + 1, prev_hw[1] - cfg.kernel_w + 1
        if h < 1 or w < 1:
            raise ShapeError(
                f"layer {layer}: {cfg.kernel_h}x{cfg.kernel_w} kernel does not fit "
                f"a {prev_hw[0]}x{prev_hw[1]} signal")
        return h, w

    def code_shapes(self, image_hw):
        """Spatial sizes ``[(h_1, w_1), ..., (h_L, w_L)]`` for an image of size ``image_hw``."""
        shapes, hw = [], tuple(image_hw)
        for layer in range(1, self.depth + 1):
            hw = self.code_shape(layer, hw)
            shapes.append(hw)
        return shapes

    def trainable_banks(self):
        """Yield ``(name, array)`` for each distinct trainable filter bank."""
        n = 1 if self.tied else self.depth
        for i in range(n):
            if self.layers[i].scale_filter_trainable:
                yield f"A{i + 1}", self.A[i]
            yield f"B{i + 1}", self.B[i]

    def copy(self):
        if self.tied:
            a, b = self.A[0].copy(), self.B[0].copy()
            A, B = [a] * self.depth, [b] * self.depth
        else:
            A, B = [a.copy() for a in self.A], [b.copy() for b in self.B]
        return HierarchicalModel(
            layers=[LayerConfig(**c.to_dict()) for c in self.layers], A=A, B=B,
            tied=self.tied, image_channels=self.image_channels,
            input_scale=self.input_scale, seed=self.seed,
            history_summary=dict(self.history_summary))


def validate_chain(configs, image_channels=1, tied=False):
    if not configs:
        raise ConfigError("model needs at least one layer")
    for cfg in configs:
        cfg.validate()
    if tied:
        first = configs[0].to_dict()
        for i, cfg in enumerate(configs[1:], start=2):
            if cfg.to_dict() != first:
                raise ConfigError(f"tied model: layer {i} config differs from layer 1")
        if configs[0].scale_channels != image_channels:
            raise ConfigError(
                f"tied model needs scale_channels == image channels "
                f"({configs[0].scale_channels} != {image_channels})")


def box_filter(out_channels, in_channels, kernel_h, kernel_w):
    """Constant low-pass bank whose atoms have unit l2 norm."""
    value = 1.0 / np.sqrt(out_channels * kernel_h * kernel_w)
    return np.full((out_channels, in_channels, kernel_h, kernel_w), value, dtype=np.float32)


def normalize_atoms(bank):
    norms = np.sqrt(np.sum(np.asarray(bank, dtype=np.float64) ** 2, axis=(0, 2, 3)))
    return (bank / norms[None, :, None, None]).astype(np.float32)


def init_model(configs, seed=0, tied=False, image_channels=1, input_scale=1.0):
    """Build a model with Gaussian, atom-normalized trainable filters.

    Fixed (non-trainable) scale filters are set to :func:`box_filter`. In
    tied mode a single ``(A, B)`` pair is created and every layer references
    the same arrays.
    """
    configs = [c if isinstance(c, LayerConfig) else LayerConfig(**c) for c in configs]
    validate_chain(configs, image_channels, tied)
    rng = np.random.default_rng(seed)
    n_banks = 1 if tied else len(configs)
    A, B = [], []
    prev = image_channels
    for cfg in configs[:n_banks]:
        a_shape = (prev, cfg.scale_channels, cfg.kernel_h, cfg.kernel_w)
        b_shape = (prev, cfg.detail_channels, cfg.kernel_h, cfg.kernel_w)
        if cfg.scale_filter_trainable:
            a = normalize_atoms(rng.standard_normal(a_shape))
        else:
            a = box_filter(*a_shape)
        A.append(a)
        B.append(normalize_atoms(rng.standard_normal(b_shape)))
        prev = cfg.scale_channels
    if tied:
        A, B = A * len(configs), B * len(configs)
    if not (np.isfinite(input_scale) and input_scale > 0):
        raise ConfigError(f"input_scale must be positive, got {input_scale!r}")
    return HierarchicalModel(layers=configs, A=A, B=B, tied=tied,
                             image_channels=image_channels, input_scale=input_scale,
                             seed=seed)


def trainable_param_count(model):
    """Number of trainable filter entries; tied banks count once, fixed scale filters not at all."""
    return int(sum(bank.size for _, bank in model.trainable_banks()))


def synthesize(model, x_top, u, noise=False, seed=0):
    """Run the generative recursion top-down.

    ``x_top`` is ``x_L`` and ``u`` is ``[u_1, ..., u_L]``. Returns
    ``[x_{L-1}, ..., x_0]``. Inputs may be single signals or batches.
    """
    if len(u) != model.depth:
        raise ShapeError(f"expected {model.depth} detail signals, got {len(u)}")
    rng = np.random.default_rng(seed) if noise else None
    x = np.asarray(x_top)
    outputs = []
    for layer in range(model.depth, 0, -1):
        i = layer - 1
        ul = np.asarray(u[i])
        if ul.shape[-2:] != x.shape[-2:]:
            raise ShapeError(
                f"layer {layer}: scale code {x.shape} and detail code {ul.shape} "
                f"differ in spatial size")
        try:
            x = tc.conv_full(model.A[i], x) + tc.conv_full(model.B[i], ul)
        except ShapeError as exc:
            raise ShapeError(f"layer {layer}: {exc}") from exc
        sigma = model.layers[i].sigma_eps
        if noise and sigma > 0:
            x = x + rng.normal(0.0, sigma, size=x.shape).astype(x.dtype)
        outputs.append(x)
    return outputs


def laplace(rng, scale, size):
    """Laplace(0, scale) draws by inverse-CDF sampling."""
    v = rng.uniform(-0.5, 0.5, size=size)
    v = np.clip(v, -0.5 + 1e-12, 0.5 - 1e-12)
    return -scale * np.sign(v) * np.log1p(-2.0 * np.abs(v))


def sample_priors(model, top_hw, seed=0):
    """Draw ``x_L ~ N(0, sigma_x^2)`` and ``u_l ~ Laplace(0, lam_l)``.

    ``top_hw`` is the spatial size of ``x_L``; lower layers grow by the
    kernel size minus one. Returns ``(x_L, [u_1, ..., u_L])`` as float32.
    """
    rng = np.random.default_rng(seed)
    top = model.layers[-1]
    x_top = rng.normal(0.0, 1.0, size=(top.scale_channels, *top_hw)) * top.sigma_x
    sizes = [tuple(top_hw)]
    for cfg in reversed(model.layers[1:]):
        h, w = sizes[-1]
        sizes.append((h + cfg.kernel_h - 1, w + cfg.kernel_w - 1))
    sizes.reverse()
    u = [laplace(rng, cfg.lam, (cfg.detail_channels, *hw)).astype(np.float32)
         for cfg, hw in zip(model.layers, sizes)]
    return x_top.astype(np.float32), u
