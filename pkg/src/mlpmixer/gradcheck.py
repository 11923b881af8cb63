"""Central finite-difference check of Mixer parameter gradients (float64)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import MixerConfig, MixerParams, apply, bind, randomized_params


def _problem(config: MixerConfig, seed: int, batch: int):
    rng = np.random.default_rng([seed, 99])
    images = rng.standard_normal((batch,) + config.image)
    targets = np.eye(config.num_classes)[rng.integers(0, config.num_classes, size=batch)]
    return images, targets


def loss_and_grads(params: MixerParams, config: MixerConfig, images, targets):
    leaves = bind(params, requires_grad=True)
    loss = T.softmax_xent(apply(images, leaves, config), targets)
    return float(loss.data), T.grad(loss, list(leaves.values()))


def loss_value(params: MixerParams, config: MixerConfig, images, targets) -> float:
    return float(T.softmax_xent(apply(images, bind(params), config), targets).data)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``.

    The floor matters for the token-MLP output bias ``b2``: it shifts every
    channel of a token equally, which the downstream LayerNorms remove, so its
    true gradient is exactly zero and both sides are rounding noise.
    """
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(config: MixerConfig, seed: int = 0, h: float = 1e-4, batch: int = 2) -> dict[str, float]:
    """Relative error between backprop and central differences for every parameter tensor."""
    params = randomized_params(config, seed, dtype=np.float64)
    images, targets = _problem(config, seed, batch)
    _, analytic = loss_and_grads(params, config, images, targets)
    errors = {}
    for name, value in params.items():
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_value(params, config, images, targets)
            flat[i] = keep - h
            down = loss_value(params, config, images, targets)
            flat[i] = keep
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        errors[name] = relative_error(analytic[name], numeric)
    return errors
