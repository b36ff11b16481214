"""
Low-dose sinogram synthesis.

The generative chain: clean line integrals y -> expected counts I0*exp(-y) ->
Poisson photon counts G -> measured counts I = G + Normal(0, sigma^2) ->
log-domain sinogram x = ln(I0 / max(I, 1)).

Random draws come from Philox streams keyed by (seed, stream, row) so that rows can be
sampled in any order or in parallel with identical results.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from sinomap.errors import NonFiniteError, ShapeMismatchError, ValidationError
from sinomap.parallel import ordered_map

logger = logging.getLogger(__name__)

I_FLOOR = 1.0

# Stream tags keep photon and electronic draws independent under the same seed.
POISSON_STREAM = 0
GAUSSIAN_STREAM = 1


@dataclass(frozen=True, eq=False)
class ScanConfig:
    """Incident fluence (scalar or per-ray field) and electronic-noise std in photons."""

    i0: Union[float, np.ndarray]
    sigma: float = 0.0

    def __post_init__(self):
        i0 = np.asarray(self.i0, dtype=np.float64)
        if not np.all(np.isfinite(i0)) or np.any(i0 <= 0):
            raise ValidationError("I0 must be finite and > 0 everywhere")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValidationError(f"sigma must be >= 0, got {self.sigma}")
        object.__setattr__(self, "i0", float(i0) if i0.ndim == 0 else i0)

    def i0_field(self, shape: Tuple[int, ...]) -> np.ndarray:
        if np.ndim(self.i0) == 0:
            return np.full(shape, self.i0, dtype=np.float64)
        if self.i0.shape != tuple(shape):
            raise ShapeMismatchError(f"I0 field shape {self.i0.shape} does not match {tuple(shape)}")
        return self.i0


@dataclass(eq=False)
class PhotonData:
    """Measured counts I and latent photon counts G of one sinogram."""

    I: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        self.I = np.asarray(self.I, dtype=np.float64)
        self.G = np.asarray(self.G, dtype=np.int64)
        if self.I.shape != self.G.shape:
            raise ShapeMismatchError(f"I shape {self.I.shape} does not match G shape {self.G.shape}")
        if not np.all(np.isfinite(self.I)):
            raise NonFiniteError("measured counts contain non-finite values")
        if np.any(self.G < 0):
            raise ValidationError("latent counts must be >= 0")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.I.shape

    @classmethod
    def from_measured(cls, I: np.ndarray) -> "PhotonData":
        """Warm start G = round(max(I, 1))."""
        I = np.asarray(I, dtype=np.float64)
        return cls(I=I, G=np.rint(np.maximum(I, I_FLOOR)).astype(np.int64))


def i0_for_dose(mas: float, i0_high: float = 2e5, reference_mas: float = 200.0) -> float:
    """Fluence scales linearly with tube current-time product."""
    if mas <= 0:
        raise ValidationError(f"dose must be > 0 mAs, got {mas}")
    return i0_high * mas / reference_mas


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 63-bit seed for a (seed, keys...) tuple."""
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def _row_rng(seed: int, stream: int, row: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), stream, row])))


def attenuate(y: np.ndarray, scan: ScanConfig) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("sinogram contains non-finite values")
    return scan.i0_field(y.shape) * np.exp(-y)


def log_transform(I: np.ndarray, scan: ScanConfig) -> np.ndarray:
    I = np.asarray(I, dtype=np.float64)
    return np.log(scan.i0_field(I.shape) / np.maximum(I, I_FLOOR))


def sample_low_dose(y: np.ndarray, scan: ScanConfig, seed: int,
                    threads: Optional[int] = None) -> Tuple[PhotonData, np.ndarray]:
    """
    Draw one noisy realization of the scan of y.

    Args:
        y: clean log-domain sinogram
        scan: fluence and electronic noise
        seed: fixes every draw

    Returns:
        (PhotonData with measured I and true photon counts G, low-dose sinogram x)
    """
    expected = attenuate(y, scan)
    if expected.ndim != 2:
        raise ShapeMismatchError(f"sinogram must be 2-D, got shape {expected.shape}")

    def sample_row(r: int) -> Tuple[np.ndarray, np.ndarray]:
        counts = _row_rng(seed, POISSON_STREAM, r).poisson(expected[r])
        measured = counts.astype(np.float64)
        if scan.sigma > 0:
            measured = measured + _row_rng(seed, GAUSSIAN_STREAM, r).normal(0.0, scan.sigma, size=counts.shape)
        return counts, measured

    rows = ordered_map(sample_row, range(expected.shape[0]), threads)
    G = np.stack([g for g, _ in rows]).astype(np.int64)
    I = np.stack([i for _, i in rows])
    pd = PhotonData(I=I, G=G)
    return pd, log_transform(I, scan)
