"""Diagonal Gaussians on top of :mod:`bandit_lab.ndcore`.

Covariances are never materialised: a ``DiagGaussian`` carries a standard
deviation per coordinate and everything below works elementwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ndcore import ContractError, NumericError, ShapeError, Tensor, as_tensor, log, logsumexp, square

LOG_2PI = math.log(2.0 * math.pi)

# added to every exp-link standard deviation
STD_FLOOR = 1e-6


@dataclass
class DiagGaussian:
    mean: Tensor
    std: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.std = as_tensor(self.std)
        try:
            np.broadcast_shapes(self.mean.shape, self.std.shape)
        except ValueError as exc:
            raise ShapeError(f"mean {self.mean.shape} vs std {self.std.shape}") from exc
        if not (self.std.data > 0).all():
            raise NumericError("standard deviation must be strictly positive")


def logpdf(d: DiagGaussian, x) -> Tensor:
    """Per-coordinate ``log N(x_k; mean_k, std_k^2)``; callers sum (or mask) themselves."""
    x = as_tensor(x)
    try:
        np.broadcast_shapes(x.shape, d.mean.shape, d.std.shape)
    except ValueError as exc:
        raise ShapeError(f"logpdf: x {x.shape} vs mean {d.mean.shape}") from exc
    z = (x - d.mean) / d.std
    return -0.5 * LOG_2PI - log(d.std) - 0.5 * square(z)


def reparam_sample(d: DiagGaussian, noise) -> Tensor:
    noise = as_tensor(noise)
    if noise.shape != np.broadcast_shapes(d.mean.shape, d.std.shape):
        raise ShapeError(f"noise {noise.shape} does not match mean {d.mean.shape}")
    return d.mean + d.std * noise


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> float:
    """Closed-form KL(q || p) summed over coordinates."""
    qm, qs, pm, ps = q.mean.data, q.std.data, p.mean.data, p.std.data
    if qm.shape != pm.shape:
        raise ShapeError(f"kl_diag: {qm.shape} vs {pm.shape}")
    ratio = (qs / ps) ** 2
    kl = 0.5 * (ratio + ((qm - pm) / ps) ** 2 - 1.0 - np.log(ratio))
    return float(kl.sum())


def log_mean_exp(values, axis: int = -1) -> Tensor:
    """``log(mean(exp(values)))`` along ``axis``, computed with a max shift."""
    values = as_tensor(values)
    n = values.shape[axis] if values.ndim else 0
    if n == 0:
        raise ContractError("log_mean_exp needs at least one entry")
    return logsumexp(values, axis=axis) - math.log(n)
