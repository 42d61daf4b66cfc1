"""RF frame to B-mode image reconstruction.

The pipeline runs envelope detection and attenuation compensation per scan
line, log-compresses in the polar (line, sample) domain, scan-converts the
dB field onto a Cartesian grid, maps it to 8-bit pixels and optionally
resizes the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.fft import next_fast_len

from .errors import InvalidInputError

EPS_AMP = 1e-12
DEFAULT_OUT_SIZE = (299, 299)


@dataclass(frozen=True)
class ConvexGeometry:
    """Convex-array scan geometry.

    Attributes
    ----------
    radius : float
        Transducer curvature radius in meters.
    angular_span : float
        Total sector angle in radians, first line to last line.
    depth_offset : float
        Distance from the curvature center to the first RF sample, meters.
    """

    radius: float = 0.06
    angular_span: float = float(np.deg2rad(60.0))
    depth_offset: float = 0.06

    def __post_init__(self):
        if not np.isfinite(self.radius) or self.radius <= 0:
            raise InvalidInputError(f"radius must be > 0, got {self.radius}")
        if not 0 < self.angular_span < np.pi:
            raise InvalidInputError(
                f"angular_span must lie in (0, pi), got {self.angular_span}")
        if not np.isfinite(self.depth_offset) or self.depth_offset < 0:
            raise InvalidInputError(
                f"depth_offset must be >= 0, got {self.depth_offset}")

    def line_angles(self, n_lines: int) -> np.ndarray:
        k = np.arange(n_lines, dtype=np.float64)
        return -self.angular_span / 2 + k * self.angular_span / (n_lines - 1)


@dataclass(frozen=True)
class RfFrame:
    """Post-beamformed RF samples indexed ``[line][sample]``."""

    samples: np.ndarray
    fs: float
    f0: float
    c: float = 1540.0
    geometry: ConvexGeometry = field(default_factory=ConvexGeometry)
    label: Optional[int] = None

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2:
            raise InvalidInputError(f"samples must be 2-D, got shape {s.shape}")
        if s.shape[0] < 2 or s.shape[1] < 16:
            raise InvalidInputError(
                f"need >= 2 lines and >= 16 samples, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise InvalidInputError("samples contain non-finite values")
        if self.f0 <= 0 or self.c <= 0:
            raise InvalidInputError("f0 and c must be positive")
        if not self.fs > 2 * self.f0 * 1e6:
            raise InvalidInputError(
                f"fs={self.fs} Hz violates Nyquist for f0={self.f0} MHz")
        if self.label not in (None, 0, 1):
            raise InvalidInputError(f"label must be 0, 1 or None, got {self.label}")

    @property
    def n_lines(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def sample_spacing(self) -> float:
        """Radial distance between consecutive samples, meters."""
        return self.c / (2.0 * self.fs)

    def tissue_depths_cm(self) -> np.ndarray:
        """Depth of every sample below the transducer face, cm."""
        gap = max(self.geometry.depth_offset - self.geometry.radius, 0.0)
        j = np.arange(self.n_samples, dtype=np.float64)
        return (j * self.sample_spacing + gap) * 100.0


@dataclass(frozen=True)
class ReconParams:
    """Attackable reconstruction parameters.

    ``beta`` is in dB/(cm*MHz); ``alpha_l`` and ``alpha_u`` are the dB
    display thresholds.
    """

    beta: float = 0.9
    alpha_l: float = 10.0
    alpha_u: float = 55.0

    def __post_init__(self):
        if not all(np.isfinite([self.beta, self.alpha_l, self.alpha_u])):
            raise InvalidInputError("reconstruction parameters must be finite")
        if self.beta < 0:
            raise InvalidInputError(f"beta must be >= 0, got {self.beta}")
        if not self.alpha_u > self.alpha_l:
            raise InvalidInputError(
                f"alpha_u ({self.alpha_u}) must exceed alpha_l ({self.alpha_l})")

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.beta, self.alpha_l, self.alpha_u)

    @classmethod
    def from_sequence(cls, values) -> "ReconParams":
        b, lo, hi = (float(v) for v in values)
        return cls(b, lo, hi)


@dataclass(frozen=True)
class BModeImage:
    """8-bit grayscale image; ``mask`` marks pixels inside the scan sector."""

    pixels: np.ndarray
    pixel_pitch: float
    mask: Optional[np.ndarray] = None

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def sector_mask(self) -> np.ndarray:
        if self.mask is not None:
            return self.mask
        return self.pixels > 0


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def envelope(x: np.ndarray, n_fft: Optional[int] = None) -> np.ndarray:
    """Magnitude of the analytic signal along the last axis.

    The analytic signal is built in the frequency domain: negative-frequency
    bins are zeroed, positive ones doubled, DC and (for even lengths) the
    Nyquist bin kept as they are. With ``n_fft`` larger than the line, the
    line is zero-padded first and the result truncated back, which stops
    the end of the line from wrapping around onto its start.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 16:
        raise InvalidInputError(f"envelope needs >= 16 samples, got {n}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("envelope input contains non-finite values")
    m = n if n_fft is None else int(n_fft)
    if m < n:
        raise InvalidInputError(f"n_fft ({m}) is shorter than the line ({n})")
    h = np.zeros(m)
    h[0] = 1.0
    if m % 2 == 0:
        h[m // 2] = 1.0
        h[1:m // 2] = 2.0
    else:
        h[1:(m + 1) // 2] = 2.0
    z = np.fft.ifft(np.fft.fft(x, n=m, axis=-1) * h, axis=-1)
    return np.abs(z[..., :n])


def padded_length(n: int) -> int:
    """FFT length used by the reconstruction: a fast size of at least 2n."""
    return next_fast_len(2 * n)


def attenuation_compensate(env, beta, f0, depths):
    """Apply the round-trip gain ``2 * beta * f0 * depth`` dB per sample.

    ``depths`` (cm) indexes the last axis of ``env``.
    """
    env = np.asarray(env, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    if depths.ndim != 1 or env.shape[-1] != depths.shape[0]:
        raise InvalidInputError("env and depths must have matching lengths")
    if np.any(depths < 0):
        raise InvalidInputError("depths must be non-negative")
    if np.any(np.diff(depths) < 0):
        raise InvalidInputError("depths must be non-decreasing")
    gain_db = 2.0 * beta * f0 * depths
    return env * 10.0 ** (gain_db / 20.0)


def log_compress(amp, alpha_l, alpha_u):
    """Convert amplitudes to dB (reference 1.0) and clamp to [alpha_l, alpha_u]."""
    if not alpha_u > alpha_l:
        raise InvalidInputError("alpha_u must exceed alpha_l")
    d = 20.0 * np.log10(np.asarray(amp, dtype=np.float64) + EPS_AMP)
    return np.clip(d, alpha_l, alpha_u)


def map_to_pixels(compressed, alpha_l, alpha_u):
    p = round_half_up(255.0 * (np.asarray(compressed) - alpha_l) / (alpha_u - alpha_l))
    return np.clip(p, 0, 255).astype(np.uint8)


def _lerp_grid(values, i0, fi, j0, fj):
    # nested lerps keep constants exact and stay monotone in the corner values
    v00 = values[i0, j0]
    v01 = values[i0, j0 + 1]
    v10 = values[i0 + 1, j0]
    v11 = values[i0 + 1, j0 + 1]
    top = v00 + fj * (v01 - v00)
    bottom = v10 + fj * (v11 - v10)
    return top + fi * (bottom - top)


def resize_bilinear(img, out_h, out_w):
    """Corner-aligned bilinear resize of an 8-bit image."""
    img = np.asarray(img)
    h, w = img.shape
    if h < 2 or w < 2:
        raise InvalidInputError(f"resize needs an image of at least 2x2, got {img.shape}")
    if (out_h, out_w) == (h, w):
        return img.astype(np.uint8, copy=True)

    def axis(n_in, n_out):
        if n_out == 1:
            pos = np.zeros(1)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        i0 = np.minimum(np.floor(pos).astype(np.intp), n_in - 2)
        return i0, pos - i0

    i0, fi = axis(h, out_h)
    j0, fj = axis(w, out_w)
    out = _lerp_grid(img.astype(np.float64), i0[:, None], fi[:, None], j0[None, :], fj[None, :])
    return np.clip(round_half_up(out), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class ScanPlan:
    """Precomputed polar-to-Cartesian lookup for one geometry and output size."""

    line0: np.ndarray
    line_frac: np.ndarray
    sample0: np.ndarray
    sample_frac: np.ndarray
    mask: np.ndarray
    pixel_pitch: float
    # pixel-center coordinates relative to the curvature center, meters
    x: np.ndarray
    z: np.ndarray


def plan_scan(geometry: ConvexGeometry, n_lines: int, n_samples: int,
              sample_spacing: float, out_h: int, out_w: int) -> ScanPlan:
    if out_h < 8 or out_w < 8:
        raise InvalidInputError(f"output must be at least 8x8, got {out_h}x{out_w}")
    if n_lines < 2 or n_samples < 2:
        raise InvalidInputError("need at least 2 lines and 2 samples")
    if sample_spacing <= 0:
        raise InvalidInputError("sample_spacing must be positive")
    half = geometry.angular_span / 2
    r0 = geometry.depth_offset
    r1 = r0 + (n_samples - 1) * sample_spacing
    width = 2 * r1 * np.sin(half)
    z_min = r0 * np.cos(half)
    height = r1 - z_min
    pitch = max(width / out_w, height / out_h)

    # centered laterally, top-aligned axially
    x = (np.arange(out_w) + 0.5 - out_w / 2) * pitch
    z = z_min + (np.arange(out_h) + 0.5) * pitch
    xx, zz = np.meshgrid(x, z)
    r = np.hypot(xx, zz)
    theta = np.arctan2(xx, zz)

    fl = (theta + half) / (geometry.angular_span / (n_lines - 1))
    fs = (r - r0) / sample_spacing
    mask = (fl >= 0) & (fl <= n_lines - 1) & (fs >= 0) & (fs <= n_samples - 1)
    fl = np.where(mask, fl, 0.0)
    fs = np.where(mask, fs, 0.0)
    l0 = np.minimum(np.floor(fl).astype(np.intp), n_lines - 2)
    s0 = np.minimum(np.floor(fs).astype(np.intp), n_samples - 2)
    return ScanPlan(l0, fl - l0, s0, fs - s0, mask, float(pitch), xx, zz)


def apply_scan_plan(plan: ScanPlan, polar: np.ndarray, fill: float) -> np.ndarray:
    polar = np.asarray(polar, dtype=np.float64)
    vals = _lerp_grid(polar, plan.line0, plan.line_frac, plan.sample0, plan.sample_frac)
    return np.where(plan.mask, vals, fill)


def scan_convert(polar, geometry, sample_spacing, out_h, out_w, fill=0.0):
    """Resample a ``[line][sample]`` field onto a Cartesian pixel grid.

    Pixels whose centers fall outside the sector or its depth range get
    ``fill``; the rest are bilinearly interpolated in (angle, radius).
    """
    polar = np.asarray(polar)
    if not isinstance(geometry, ConvexGeometry):
        raise InvalidInputError("geometry must be a ConvexGeometry")
    plan = plan_scan(geometry, polar.shape[0], polar.shape[1],
                     sample_spacing, out_h, out_w)
    return apply_scan_plan(plan, polar, fill)


class Reconstructor:
    """Reconstruct one frame repeatedly under different parameters.

    Parameter-independent work (envelope detection, depth axis, the
    scan-conversion lookup) is done once at construction. Instances are
    immutable afterwards and safe to share between threads.
    """

    def __init__(self, frame: RfFrame, out_size=DEFAULT_OUT_SIZE, scan_size=None):
        self.frame = frame
        self.out_size = (int(out_size[0]), int(out_size[1]))
        self.scan_size = self.out_size if scan_size is None else (int(scan_size[0]), int(scan_size[1]))
        self.envelope = envelope(frame.samples, n_fft=padded_length(frame.n_samples))
        self.depths_cm = frame.tissue_depths_cm()
        self.plan = plan_scan(frame.geometry, frame.n_lines, frame.n_samples,
                              frame.sample_spacing, *self.scan_size)
        if self.scan_size == self.out_size:
            self.out_mask = self.plan.mask
            self.out_pitch = self.plan.pixel_pitch
        else:
            out_plan = plan_scan(frame.geometry, frame.n_lines, frame.n_samples,
                                 frame.sample_spacing, *self.out_size)
            self.out_mask = out_plan.mask
            self.out_pitch = out_plan.pixel_pitch

    def compressed(self, params: ReconParams) -> np.ndarray:
        """Clamped dB field in the polar domain."""
        comp = attenuation_compensate(self.envelope, params.beta, self.frame.f0, self.depths_cm)
        return log_compress(comp, params.alpha_l, params.alpha_u)

    def __call__(self, params: ReconParams) -> BModeImage:
        db = self.compressed(params)
        field_db = apply_scan_plan(self.plan, db, fill=params.alpha_l)
        px = map_to_pixels(field_db, params.alpha_l, params.alpha_u)
        if self.scan_size != self.out_size:
            px = resize_bilinear(px, *self.out_size)
            px[~self.out_mask] = 0
        return BModeImage(px, self.out_pitch, self.out_mask)


def reconstruct(frame: RfFrame, params: ReconParams = ReconParams(),
                out_size=DEFAULT_OUT_SIZE, scan_size=None) -> BModeImage:
    return Reconstructor(frame, out_size, scan_size)(params)


def as_rgb(img: BModeImage) -> np.ndarray:
    """Stack the grayscale pixels into three identical channels (H, W, 3)."""
    return np.repeat(img.pixels[:, :, None], 3, axis=2)
