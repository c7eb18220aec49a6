"""Likelihood models for quantized latents and the bits-per-pixel estimate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LIKELIHOOD_FLOOR = 1e-9
SCALE_MIN = 0.11


@dataclass
class FactorizedEntropyParams:
    """Per-channel logistic distribution; ``log_scale`` keeps the scale positive."""

    loc: Tensor
    log_scale: Tensor

    @classmethod
    def init(cls, channels: int, scale: float = 1.0) -> "FactorizedEntropyParams":
        return cls(
            loc=Tensor(np.zeros(channels), requires_grad=True),
            log_scale=Tensor(np.full(channels, np.log(scale)), requires_grad=True),
        )

    @property
    def channels(self) -> int:
        return self.loc.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"loc": self.loc, "log_scale": self.log_scale}


@dataclass(frozen=True)
class GaussianConditionalParams:
    scale_min: float = SCALE_MIN


def _reshape_c(p: Tensor) -> Tensor:
    return ad.reshape(p, (1, p.shape[0], 1, 1))


def likelihood_factorized(y_hat: Tensor, params: FactorizedEntropyParams) -> Tensor:
    """Probability mass of each integer bin ``[y-0.5, y+0.5]`` under a logistic.

    For 4-D input the parameters are indexed by channel (axis 1); for other
    shapes they broadcast against the trailing axis.
    """
    y_hat = ad.as_tensor(y_hat)
    if y_hat.ndim == 4:
        if y_hat.shape[1] != params.channels:
            raise ad.ShapeError("likelihood_factorized", y_hat.shape, params.loc.shape)
        loc, log_scale = _reshape_c(params.loc), _reshape_c(params.log_scale)
    else:
        loc, log_scale = params.loc, params.log_scale
    inv_scale = ad.exp(-log_scale)
    centered = y_hat - loc
    # evaluate in the tail nearer zero so the difference does not cancel
    flip = Tensor(-np.sign(centered.data) + (centered.data == 0), dtype=centered.data.dtype)
    upper = ad.sigmoid(flip * (centered + 0.5) * inv_scale)
    lower = ad.sigmoid(flip * (centered - 0.5) * inv_scale)
    mass = ad.abs(upper - lower)
    return ad.clamp(mass, LIKELIHOOD_FLOOR, 1.0)


def likelihood_gaussian(y_hat: Tensor, sigma: Tensor,
                        params: GaussianConditionalParams = GaussianConditionalParams()) -> Tensor:
    """Zero-mean Gaussian bin masses with the scale bounded below by ``scale_min``."""
    y_hat, sigma = ad.as_tensor(y_hat), ad.as_tensor(sigma)
    if y_hat.shape != sigma.shape:
        raise ad.ShapeError("likelihood_gaussian", y_hat.shape, sigma.shape)
    if np.any(sigma.data < 0):
        raise ValueError("likelihood_gaussian: negative scale; apply exp upstream")
    s = ad.clamp(sigma, params.scale_min, None)
    mag = ad.abs(y_hat)
    upper = ad.normal_cdf((0.5 - mag) / s)
    lower = ad.normal_cdf((-0.5 - mag) / s)
    return ad.clamp(upper - lower, LIKELIHOOD_FLOOR, 1.0)


def bits(likelihoods: Tensor) -> Tensor:
    return -ad.sum(ad.log2(likelihoods))


def bpp_from_likelihoods(likelihoods: Iterable[Tensor], num_pixels: int) -> Tensor:
    """Total information ``sum(-log2 p)`` over all tensors divided by ``num_pixels``."""
    if num_pixels <= 0:
        raise ValueError("num_pixels must be positive")
    total = None
    for p in likelihoods:
        p = ad.as_tensor(p)
        if np.any(p.data <= 0) or np.any(p.data > 1):
            raise ValueError("likelihoods must lie in (0, 1]")
        b = bits(p)
        total = b if total is None else total + b
    if total is None:
        raise ValueError("no likelihood tensors given")
    return total / float(num_pixels)
