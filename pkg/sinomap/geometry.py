"""
Parallel-beam CT geometry.

This module:
- Builds ellipse phantoms (the standard head phantom and seeded random variants)
- Computes sinograms by bilinear ray sampling at half-pixel steps
- Reconstructs images by ramp-filtered (Ram-Lak) backprojection

Images are square float64 arrays of per-pixel attenuation (mu * pixel size).
Pixel (r, c) of an N x N image sits at x = c - (N-1)/2, y = r - (N-1)/2.
Sinograms are (n_angles, n_detectors) arrays, angle-major.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy import ndimage

from sinomap.errors import ShapeMismatchError, ValidationError
from sinomap.parallel import ordered_map

logger = logging.getLogger(__name__)

RAY_STEP = 0.5  # pixels
ANGLE_CHUNK = 16  # angles per work item; fixed so reductions never depend on thread count


class Ellipse(BaseModel):
    """One ellipse in normalized canvas coordinates ([-1, 1] on both axes)."""

    cx: float = 0.0
    cy: float = 0.0
    a: float = Field(..., gt=0)
    b: float = Field(..., gt=0)
    angle: float = 0.0  # degrees
    value: float

    def half_extents(self) -> tuple:
        phi = math.radians(self.angle)
        ex = math.sqrt((self.a * math.cos(phi)) ** 2 + (self.b * math.sin(phi)) ** 2)
        ey = math.sqrt((self.a * math.sin(phi)) ** 2 + (self.b * math.cos(phi)) ** 2)
        return ex, ey

    def inside_canvas(self) -> bool:
        ex, ey = self.half_extents()
        return abs(self.cx) + ex <= 1.0 and abs(self.cy) + ey <= 1.0


class PhantomSpec(BaseModel):
    """Ellipse list plus canvas size; randomize switches on seeded perturbations."""

    size: int = Field(128, ge=1)
    ellipses: List[Ellipse] = Field(default_factory=list)
    scale: float = Field(1.0, gt=0)
    randomize: bool = False
    jitter: float = Field(0.03, ge=0, le=0.05)
    n_random: int = Field(0, ge=0)

    @field_validator("ellipses")
    @classmethod
    def check_within_canvas(cls, ellipses):
        for i, e in enumerate(ellipses):
            if not e.inside_canvas():
                raise ValueError(f"ellipse {i} extends outside the canvas")
        return ellipses


# Shepp-Logan layout with soft-tissue-like contrast: skull 1.0, brain 0.8, inserts +-0.1.
HEAD_ELLIPSES = [
    (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.2),
    (0.22, 0.0, 0.11, 0.31, -18.0, -0.1),
    (-0.22, 0.0, 0.16, 0.41, 18.0, -0.1),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.05),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.05),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.05),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.05),
    (0.0, -0.605, 0.023, 0.023, 0.0, 0.05),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.05),
]


def head_phantom_spec(size: int = 128, scale: float = 0.03, **kwargs) -> PhantomSpec:
    """Standard head phantom; scale 0.03 puts the sinogram peak near 3."""
    ellipses = [Ellipse(cx=cx, cy=cy, a=a, b=b, angle=ang, value=v) for cx, cy, a, b, ang, v in HEAD_ELLIPSES]
    return PhantomSpec(size=size, ellipses=ellipses, scale=scale, **kwargs)


def _perturb(spec: PhantomSpec, rng: np.random.Generator) -> List[Ellipse]:
    j = spec.jitter
    out = []
    for e in spec.ellipses:
        out.append(Ellipse(
            cx=e.cx + rng.uniform(-0.5, 0.5) * j * e.a,
            cy=e.cy + rng.uniform(-0.5, 0.5) * j * e.b,
            a=e.a * (1.0 + rng.uniform(-j, j)),
            b=e.b * (1.0 + rng.uniform(-j, j)),
            angle=e.angle + rng.uniform(-30.0, 30.0) * j,
            value=e.value * (1.0 + rng.uniform(-j, j)),
        ))
    for _ in range(spec.n_random):
        radius = 0.45 * math.sqrt(rng.uniform())
        phi = rng.uniform(0.0, 2.0 * math.pi)
        out.append(Ellipse(
            cx=radius * math.cos(phi),
            cy=radius * math.sin(phi),
            a=rng.uniform(0.03, 0.12),
            b=rng.uniform(0.03, 0.12),
            angle=rng.uniform(0.0, 180.0),
            value=rng.uniform(-0.1, 0.1),
        ))
    return out


def make_phantom(spec: PhantomSpec, seed: int = 0) -> np.ndarray:
    """
    Rasterize a phantom: each pixel is the summed value of the ellipses covering its
    center, times spec.scale, clamped at 0.

    The seed is only consumed when spec.randomize is set.
    """
    ellipses = spec.ellipses
    if spec.randomize:
        ellipses = _perturb(spec, np.random.default_rng(seed))
    for i, e in enumerate(ellipses):
        if not e.inside_canvas():
            raise ValidationError(f"ellipse {i} extends outside the canvas")

    n = spec.size
    coords = (np.arange(n) - (n - 1) / 2.0) / (n / 2.0)
    xn, yn = np.meshgrid(coords, coords)
    img = np.zeros((n, n), dtype=np.float64)
    for e in ellipses:
        phi = math.radians(e.angle)
        dx, dy = xn - e.cx, yn - e.cy
        u = dx * math.cos(phi) + dy * math.sin(phi)
        v = -dx * math.sin(phi) + dy * math.cos(phi)
        img[(u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0] += e.value
    img *= spec.scale
    return np.maximum(img, 0.0)


def default_detector_count(image_size: int, detector_spacing: float = 1.0) -> int:
    return int(math.ceil((image_size - 1) * math.sqrt(2.0) / detector_spacing)) + 1


@dataclass(frozen=True, eq=False)
class Geometry:
    """Parallel-beam scan: angles in [0, pi), a centered detector row spanning the image diagonal."""

    image_size: int
    n_angles: int
    n_detectors: Optional[int] = None
    detector_spacing: float = 1.0
    angles: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.image_size < 1:
            raise ValidationError(f"image_size must be >= 1, got {self.image_size}")
        if self.n_angles < 1:
            raise ValidationError(f"n_angles must be >= 1, got {self.n_angles}")
        if self.detector_spacing <= 0:
            raise ValidationError(f"detector_spacing must be > 0, got {self.detector_spacing}")
        if self.n_detectors is None:
            object.__setattr__(self, "n_detectors", default_detector_count(self.image_size, self.detector_spacing))
        if self.angles is None:
            angles = np.pi * np.arange(self.n_angles) / self.n_angles
        else:
            angles = np.asarray(self.angles, dtype=np.float64)
        if angles.shape != (self.n_angles,):
            raise ValidationError(f"expected {self.n_angles} angles, got shape {angles.shape}")
        if np.any(angles < 0) or np.any(angles >= np.pi):
            raise ValidationError("angles must lie in [0, pi)")
        if np.any(np.diff(angles) <= 0):
            raise ValidationError("angles must be strictly increasing")
        angles.setflags(write=False)
        object.__setattr__(self, "angles", angles)
        span = self.n_detectors * self.detector_spacing
        if span < (self.image_size - 1) * math.sqrt(2.0):
            raise ValidationError(
                f"detector row ({self.n_detectors} x {self.detector_spacing}) does not span "
                f"the diagonal of a {self.image_size}-pixel image"
            )

    @property
    def offsets(self) -> np.ndarray:
        return (np.arange(self.n_detectors) - (self.n_detectors - 1) / 2.0) * self.detector_spacing

    @property
    def sinogram_shape(self) -> tuple:
        return (self.n_angles, self.n_detectors)


def _chunks(n: int) -> List[np.ndarray]:
    return [np.arange(start, min(start + ANGLE_CHUNK, n)) for start in range(0, n, ANGLE_CHUNK)]


def project_rays(img: np.ndarray, angles: Sequence[float], offsets: Sequence[float],
                 threads: Optional[int] = None) -> np.ndarray:
    """Line integrals of img along rays (angle, offset); any angle values are accepted."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeMismatchError(f"image must be 2-D, got shape {img.shape}")
    angles = np.asarray(angles, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    center_r = (img.shape[0] - 1) / 2.0
    center_c = (img.shape[1] - 1) / 2.0
    n_steps = int(math.ceil((0.5 * math.hypot(*img.shape) + 1.0) / RAY_STEP))
    t = RAY_STEP * np.arange(-n_steps, n_steps + 1)

    def project_chunk(idx: np.ndarray) -> np.ndarray:
        rows = np.empty((len(idx), len(offsets)))
        for k, a in enumerate(idx):
            c, s = math.cos(angles[a]), math.sin(angles[a])
            xs = offsets[:, None] * c - t[None, :] * s
            ys = offsets[:, None] * s + t[None, :] * c
            coords = np.stack([ys.ravel() + center_r, xs.ravel() + center_c])
            vals = ndimage.map_coordinates(img, coords, order=1, mode="grid-constant", cval=0.0, output=np.float64)
            rows[k] = vals.reshape(xs.shape).sum(axis=1) * RAY_STEP
        return rows

    parts = ordered_map(project_chunk, _chunks(len(angles)), threads)
    if not parts:
        return np.zeros((0, len(offsets)))
    return np.concatenate(parts, axis=0)


def forward_project(img: np.ndarray, geom: Geometry, threads: Optional[int] = None) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (geom.image_size, geom.image_size):
        raise ShapeMismatchError(f"image shape {img.shape} does not match geometry size {geom.image_size}")
    return project_rays(img, geom.angles, geom.offsets, threads)


def ramp_filter(sino: np.ndarray, detector_spacing: float = 1.0) -> np.ndarray:
    """Ram-Lak filtering along the detector axis, zero-padded to the next power of two."""
    n_angles, n_det = sino.shape
    size = max(64, int(2 ** math.ceil(math.log2(2 * n_det))))
    # Spatial-domain Ram-Lak taps, wrapped so index 0 is the center tap.
    n = np.concatenate([np.arange(1, size // 2 + 1, 2), np.arange(size // 2 - 1, 0, -2)])
    taps = np.zeros(size)
    taps[0] = 0.25
    taps[1::2] = -1.0 / (np.pi * n) ** 2
    response = np.real(np.fft.fft(taps))

    padded = np.zeros((n_angles, size))
    padded[:, :n_det] = sino
    filtered = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * response, axis=1))
    return filtered[:, :n_det] / detector_spacing


def fbp_reconstruct(sino: np.ndarray, geom: Geometry, threads: Optional[int] = None) -> np.ndarray:
    """Filtered backprojection onto the geometry's image grid."""
    sino = np.asarray(sino, dtype=np.float64)
    if geom.n_angles < 2:
        raise ValidationError("filtered backprojection needs at least 2 angles")
    if sino.shape != geom.sinogram_shape:
        raise ShapeMismatchError(f"sinogram shape {sino.shape} does not match geometry {geom.sinogram_shape}")

    q = ramp_filter(sino, geom.detector_spacing)
    n = geom.image_size
    coords = np.arange(n) - (n - 1) / 2.0
    xs, ys = np.meshgrid(coords, coords)
    det_index = np.arange(geom.n_detectors, dtype=np.float64)
    center = (geom.n_detectors - 1) / 2.0

    def backproject_chunk(idx: np.ndarray) -> np.ndarray:
        acc = np.zeros((n, n))
        for a in idx:
            theta = geom.angles[a]
            t = xs * math.cos(theta) + ys * math.sin(theta)
            pos = t / geom.detector_spacing + center
            acc += np.interp(pos.ravel(), det_index, q[a], left=0.0, right=0.0).reshape(n, n)
        return acc

    recon = np.zeros((n, n))
    for part in ordered_map(backproject_chunk, _chunks(geom.n_angles), threads):
        recon += part
    return recon * (np.pi / geom.n_angles)


def inscribed_mask(size: int, fraction: float = 1.0) -> np.ndarray:
    """
    Pixels on the disc inscribed in the square (only they are fully determined by the
    scan), optionally shrunk to a concentric disc of the given radius fraction.
    """
    if not 0 < fraction <= 1:
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    coords = np.arange(size) - (size - 1) / 2.0
    xs, ys = np.meshgrid(coords, coords)
    return xs ** 2 + ys ** 2 <= (fraction * (size - 1) / 2.0) ** 2


def relative_rmse(rec: np.ndarray, ref: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """RMSE of rec against ref over mask, divided by the RMS of ref there."""
    if rec.shape != ref.shape:
        raise ShapeMismatchError(f"shapes differ: {rec.shape} vs {ref.shape}")
    if mask is None:
        mask = np.ones(ref.shape, dtype=bool)
    err = np.sqrt(np.mean((rec[mask] - ref[mask]) ** 2))
    scale = np.sqrt(np.mean(ref[mask] ** 2))
    if scale == 0:
        raise ValidationError("reference is zero on the mask")
    return float(err / scale)
