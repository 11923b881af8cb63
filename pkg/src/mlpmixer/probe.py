"""Linear few-shot probe on frozen pooled features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .data import Dataset, normalize
from .model import MixerConfig, MixerParams, pooled_features

DEFAULT_LAMBDAS = (1e-6, 1e-4, 1e-2, 1.0)


class SolverError(RuntimeError):
    pass


@dataclass
class FeatureMatrix:
    features: np.ndarray  # (N, C)
    targets: np.ndarray  # (N, K) one-hot

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.targets, axis=1)


def extract_features(params: MixerParams, config: MixerConfig, images: np.ndarray,
                     batch: int = 256) -> np.ndarray:
    """Eval-mode pooled representation (after the pre-head norm), shape (N, C), float64."""
    out = [pooled_features(normalize(images[i:i + batch]), params, config)
           for i in range(0, len(images), batch)]
    return np.concatenate(out).astype(np.float64)


def ridge_fit(features: np.ndarray, targets: np.ndarray, lam: float) -> np.ndarray:
    """Solve ``(F^T F + lam*N*I) W = F^T Y`` by Cholesky; returns W of shape (C, K)."""
    if lam <= 0:
        raise ValueError("ridge lambda must be positive")
    f = np.asarray(features, dtype=np.float64)
    n, c = f.shape
    gram = f.T @ f + lam * n * np.eye(c)
    try:
        factor = cho_factor(gram, lower=True, check_finite=True)
    except LinAlgError as err:
        raise SolverError(f"Gram matrix is not positive definite at lambda={lam}; "
                          "try a larger lambda") from err
    return cho_solve(factor, f.T @ np.asarray(targets, dtype=np.float64))


def top1(scores: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy; ``np.argmax`` breaks ties toward the lowest class index."""
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def sample_shots(labels: np.ndarray, shots: int, num_classes: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    picks = []
    for k in range(num_classes):
        pool = np.flatnonzero(labels == k)
        if len(pool) < shots:
            raise ValueError(f"class {k} has {len(pool)} examples, need {shots}")
        picks.append(rng.choice(pool, size=shots, replace=False))
    return np.concatenate(picks)


def few_shot_from_features(train_f: np.ndarray, train_y: np.ndarray, test_f: np.ndarray,
                           test_y: np.ndarray, num_classes: int, shots: int = 5,
                           lambdas=DEFAULT_LAMBDAS, seed: int = 0) -> tuple[float, float]:
    """Returns (test top-1, chosen lambda).

    Lambda is picked by accuracy on the shots themselves; ties go to the larger lambda.
    """
    if shots * num_classes > len(train_y):
        raise ValueError(f"{shots} shots x {num_classes} classes exceeds {len(train_y)} training examples")
    idx = sample_shots(train_y, shots, num_classes, seed)
    f, y = train_f[idx], train_y[idx]
    targets = np.eye(num_classes)[y]
    best = None
    for lam in sorted(lambdas):
        w = ridge_fit(f, targets, lam)
        score = top1(f @ w, y)
        if best is None or score >= best[0]:
            best = (score, lam, w)
    _, lam, w = best
    return top1(test_f @ w, test_y), lam


def few_shot_eval(params: MixerParams, config: MixerConfig, train: Dataset, test: Dataset,
                  shots: int = 5, lambdas=DEFAULT_LAMBDAS, seed: int = 0) -> float:
    """Linear few-shot top-1 of a frozen model."""
    idx = sample_shots(train.labels, shots, train.num_classes, seed)
    # only the sampled shots need features; re-index so sampling is reproduced exactly
    train_f = np.zeros((len(train), config.hidden_c))
    train_f[idx] = extract_features(params, config, train.images[idx])
    test_f = extract_features(params, config, test.images)
    acc, _ = few_shot_from_features(train_f, train.labels, test_f, test.labels,
                                    train.num_classes, shots, lambdas, seed)
    return acc
