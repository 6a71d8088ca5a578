"""Toy data drawn from a known one-layer model, for dictionary recovery checks."""
import numpy as np

from hcsc import inference as I
from hcsc import model as M

RECOVERY_LAYER = M.LayerConfig(detail_channels=1, lam=0.25)
RECOVERY_FISTA = I.FistaSettings(iters=200)


def recovery_problem(n=256, size=20, seed=0, truth_seed=100):
    """Sparse high-amplitude spikes on a flat background, through a random atom.

    Returns ``(truth_model, images)``. Spikes have density 2% and magnitude
    in [10, 20]; the background level is N(0, 0.2^2) per image.
    """
    truth = M.init_model([RECOVERY_LAYER], seed=truth_seed)
    rng = np.random.default_rng(seed)
    hw = size - RECOVERY_LAYER.kernel_h + 1
    shape = (n, RECOVERY_LAYER.detail_channels, hw, hw)
    u = ((rng.uniform(size=shape) < 0.02) * rng.choice([-1.0, 1.0], size=shape)
         * rng.uniform(10.0, 20.0, size=shape))
    x = rng.normal(0.0, 0.2, size=(n, 1, 1, 1)) * np.ones((1, 1, hw, hw))
    images = M.synthesize(truth, x.astype(np.float32), [u.astype(np.float32)])[-1]
    return truth, images.astype(np.float32)


def probe_error(model, images, settings=RECOVERY_FISTA):
    enc = I.encode(model, images, settings)
    return float(np.mean(I.relative_error(images, I.reconstruct(model, enc))))
