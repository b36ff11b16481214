"""
PSNR / SSIM evaluation in the sinogram and image domains.
"""

import logging
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, computed_field
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from sinomap.errors import ShapeMismatchError, ValidationError
from sinomap.geometry import Geometry, fbp_reconstruct, inscribed_mask

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11

Domain = Literal["sinogram", "image"]


class MetricReport(BaseModel):
    domain: Domain
    psnr: List[float]
    ssim: List[float]
    peaks: List[float]

    @computed_field
    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @computed_field
    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")


def _pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs give the 99 dB cap."""
    a, b = _pair(a, b)
    if peak <= 0:
        raise ValidationError(f"peak must be > 0, got {peak}")
    if np.array_equal(a, b):
        return PSNR_CAP
    return float(peak_signal_noise_ratio(b, a, data_range=peak))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (std 1.5)."""
    a, b = _pair(a, b)
    if peak <= 0:
        raise ValidationError(f"peak must be > 0, got {peak}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValidationError(f"fields must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    return float(structural_similarity(a, b, data_range=peak, gaussian_weights=True, sigma=SSIM_SIGMA,
                                       use_sample_covariance=False))


def evaluate_pairs(outputs: Sequence[np.ndarray], references: Sequence[np.ndarray], domain: Domain,
                   peak: Optional[float] = None) -> MetricReport:
    """Per-sample metrics; peak defaults to each reference's maximum."""
    if len(outputs) != len(references):
        raise ShapeMismatchError(f"{len(outputs)} outputs but {len(references)} references")
    psnrs, ssims, peaks = [], [], []
    for out, ref in zip(outputs, references):
        p = float(np.max(ref)) if peak is None else float(peak)
        psnrs.append(psnr(out, ref, p))
        ssims.append(ssim(out, ref, p))
        peaks.append(p)
    return MetricReport(domain=domain, psnr=psnrs, ssim=ssims, peaks=peaks)


def to_image_domain(sino: np.ndarray, reference_sino: np.ndarray, geom: Geometry,
                    threads: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Reconstruct both sinograms and normalize by the reference image maximum on the
    inscribed disc; pixels outside the disc are zeroed.
    """
    mask = inscribed_mask(geom.image_size)
    img = fbp_reconstruct(sino, geom, threads) * mask
    ref = fbp_reconstruct(reference_sino, geom, threads) * mask
    scale = float(np.max(ref[mask]))
    if scale <= 0:
        raise ValidationError("reference reconstruction has no positive values")
    return img / scale, ref / scale


def evaluate_images(outputs: Sequence[np.ndarray], references: Sequence[np.ndarray], geom: Geometry,
                    threads: Optional[int] = None) -> MetricReport:
    if len(outputs) != len(references):
        raise ShapeMismatchError(f"{len(outputs)} outputs but {len(references)} references")
    pairs = [to_image_domain(o, r, geom, threads) for o, r in zip(outputs, references)]
    return evaluate_pairs([p[0] for p in pairs], [p[1] for p in pairs], "image", peak=1.0)
