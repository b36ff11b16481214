"""
MAP objective over the network output f for one sinogram.

    E(f, G) = sum_j (I_j - G_j)^2 / (2 sigma^2) - G_j ln I0_j + G_j f_j + ln G_j! + I0_j exp(-f_j)
              + k * sum_axes sum_j ln(1 + |D2 f|_j / eps)

The first line is the negative log-likelihood of the compound Poisson-Gaussian model,
the second the sparsity prior on second differences (applied along both sinogram axes).
update_G minimizes E over the integer latent counts with f held fixed.
"""

import logging
import math
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field
from scipy.special import gammaln

from sinomap.errors import ShapeMismatchError, ValidationError
from sinomap.noise_sim import PhotonData, ScanConfig

logger = logging.getLogger(__name__)

_LOG_FACTORIAL_TABLE = np.array([math.log(math.factorial(n)) for n in range(21)])


class PriorConfig(BaseModel):
    """k = 0 switches the prior off."""

    model_config = ConfigDict(frozen=True)

    k: float = Field(0.3, ge=0)
    eps: float = Field(1e-3, gt=0)


class LossBreakdown(BaseModel):
    model_config = ConfigDict(frozen=True)

    data_term: float
    prior_term: float

    @computed_field
    @property
    def total(self) -> float:
        return self.data_term + self.prior_term


def log_factorial(n):
    """ln(n!) for a non-negative integer or integer array; exact table up to 20."""
    arr = np.asarray(n)
    if np.any(arr < 0):
        raise ValidationError("log_factorial needs n >= 0")
    small = arr <= 20
    out = np.where(small, _LOG_FACTORIAL_TABLE[np.where(small, arr, 0).astype(np.int64)], gammaln(arr + 1.0))
    return float(out) if out.ndim == 0 else out


def second_diff(f: np.ndarray, axis: int) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    n = f.shape[axis]
    if n < 3:
        raise ValidationError(f"second difference needs at least 3 entries along axis {axis}, got {n}")
    fm = np.moveaxis(f, axis, 0)
    out = np.zeros_like(fm)
    out[1:-1] = fm[:-2] - 2.0 * fm[1:-1] + fm[2:]
    return np.moveaxis(out, 0, axis)


def second_diff_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of second_diff: boundary entries of g are ignored."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape[axis] < 3:
        raise ValidationError(f"second difference needs at least 3 entries along axis {axis}, got {g.shape[axis]}")
    gm = np.moveaxis(g, axis, 0)
    inner = gm[1:-1]
    out = np.zeros_like(gm)
    out[:-2] += inner
    out[1:-1] -= 2.0 * inner
    out[2:] += inner
    return np.moveaxis(out, 0, axis)


def prior_energy(f: np.ndarray, cfg: PriorConfig) -> float:
    total = 0.0
    for axis in (0, 1):
        total += float(np.sum(np.log1p(np.abs(second_diff(f, axis)) / cfg.eps)))
    return cfg.k * total


def prior_grad(f: np.ndarray, cfg: PriorConfig) -> np.ndarray:
    grad = np.zeros(np.shape(f))
    for axis in (0, 1):
        d = second_diff(f, axis)
        grad += second_diff_adjoint(np.sign(d) / (np.abs(d) + cfg.eps), axis)
    return cfg.k * grad


def _check(f: np.ndarray, pd: PhotonData) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.shape != pd.shape:
        raise ShapeMismatchError(f"sinogram shape {f.shape} does not match photon data {pd.shape}")
    return f


def _require_noise(scan: ScanConfig):
    if scan.sigma <= 0:
        raise ValidationError("the likelihood needs sigma > 0; simulate noiseless electronics instead")


def latent_objective(G: np.ndarray, f: np.ndarray, I: np.ndarray, scan: ScanConfig) -> np.ndarray:
    """Entrywise h(G) = (I-G)^2/(2 sigma^2) - G ln I0 + G f + ln G!."""
    _require_noise(scan)
    G = np.asarray(G)
    f = np.asarray(f, dtype=np.float64)
    I = np.asarray(I, dtype=np.float64)
    i0 = scan.i0_field(np.broadcast_shapes(G.shape, f.shape, I.shape))
    return (I - G) ** 2 / (2.0 * scan.sigma ** 2) - G * np.log(i0) + G * f + log_factorial(G)


def data_energy(f: np.ndarray, pd: PhotonData, scan: ScanConfig) -> float:
    f = _check(f, pd)
    _require_noise(scan)
    i0 = scan.i0_field(f.shape)
    return float(np.sum(latent_objective(pd.G, f, pd.I, scan) + i0 * np.exp(-f)))


def data_grad_f(f: np.ndarray, pd: PhotonData, scan: ScanConfig) -> np.ndarray:
    f = _check(f, pd)
    return pd.G - scan.i0_field(f.shape) * np.exp(-f)


def unsup_loss_and_grad(f: np.ndarray, pd: PhotonData, scan: ScanConfig,
                        cfg: PriorConfig) -> Tuple[LossBreakdown, np.ndarray]:
    breakdown = LossBreakdown(data_term=data_energy(f, pd, scan), prior_term=prior_energy(f, cfg))
    return breakdown, data_grad_f(f, pd, scan) + prior_grad(f, cfg)


def update_G(f: np.ndarray, pd: PhotonData, scan: ScanConfig) -> PhotonData:
    """
    Exact integer minimization of h over each G_j, warm-started from pd.G.

    h is convex in G, so walking up while the forward difference is negative and then
    down while the backward difference is positive ends at a global minimizer.
    """
    f = _check(f, pd)
    _require_noise(scan)
    G = pd.G.astype(np.int64).ravel().copy()
    I = pd.I.ravel()
    shift = f.ravel() - np.log(scan.i0_field(f.shape)).ravel()
    two_var = 2.0 * scan.sigma ** 2

    def forward_diff(g, idx):
        # h(g + 1) - h(g)
        return (2.0 * (g - I[idx]) + 1.0) / two_var + shift[idx] + np.log(g + 1.0)

    active = np.flatnonzero(forward_diff(G, slice(None)) < 0)
    while active.size:
        G[active] += 1
        active = active[forward_diff(G[active], active) < 0]

    active = np.flatnonzero(G > 0)
    active = active[forward_diff(G[active] - 1, active) > 0]
    while active.size:
        G[active] -= 1
        still = G[active] > 0
        active = active[still]
        active = active[forward_diff(G[active] - 1, active) > 0]

    return PhotonData(I=pd.I, G=G.reshape(pd.shape))
