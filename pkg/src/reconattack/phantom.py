"""Synthetic speckle phantoms standing in for clinical RF data.

Scatterers with i.i.d. Gaussian amplitudes are dropped at jittered sample
positions along every scan line, convolved with a Gaussian-modulated pulse,
attenuated with depth and topped with white noise. The "fatty" class is
brighter and attenuates more strongly than the "normal" class.

All randomness comes from numpy's PCG64 bit generator seeded with the
frame seed, so a given (spec, seed, label) always yields the same bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import gausspulse

from .errors import InvalidInputError
from .formats import ManifestEntry, write_manifest, write_rff
from .rfcore import ConvexGeometry, RfFrame

_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class PhantomSpec:
    geometry: ConvexGeometry = field(default_factory=ConvexGeometry)
    n_lines: int = 128
    n_samples: int = 3072
    fs: float = 20e6
    f0: float = 2.5
    c: float = 1540.0
    scatterer_density: float = 12.0
    echogenicity_normal: float = 1.0
    echogenicity_fatty: float = 1.8
    beta_true_normal: float = 0.5
    beta_true_fatty: float = 1.0
    pulse_bandwidth: float = 0.6
    noise_floor: float = 0.02
    # RF RMS of normal tissue at the transducer face, dB re 1.0
    amplitude_db: float = 26.0
    seed: int = 0

    def __post_init__(self):
        if self.n_lines < 2 or self.n_samples < 16:
            raise InvalidInputError("need n_lines >= 2 and n_samples >= 16")
        if not self.fs > 2 * self.f0 * 1e6:
            raise InvalidInputError("fs must exceed twice the center frequency")
        if self.c <= 0:
            raise InvalidInputError("c must be positive")
        if self.scatterer_density < 5:
            raise InvalidInputError("scatterer_density must be >= 5 for developed speckle")
        if self.echogenicity_normal <= 0 or self.echogenicity_fatty <= 0:
            raise InvalidInputError("echogenicity values must be positive")
        if self.beta_true_normal < 0 or self.beta_true_fatty < 0:
            raise InvalidInputError("beta_true values must be >= 0")
        if not 0 < self.pulse_bandwidth < 1:
            raise InvalidInputError("pulse_bandwidth must lie in (0, 1)")
        if self.noise_floor < 0:
            raise InvalidInputError("noise_floor must be >= 0")
        if not 0 <= self.seed <= _SEED_MASK:
            raise InvalidInputError("seed must be an unsigned 64-bit integer")

    @property
    def resolution_cell_samples(self) -> float:
        """Axial resolution cell length in samples (inverse pulse bandwidth)."""
        return self.fs / (self.f0 * 1e6 * self.pulse_bandwidth)

    def class_params(self, label: int):
        if label == 1:
            return self.echogenicity_fatty, self.beta_true_fatty
        if label == 0:
            return self.echogenicity_normal, self.beta_true_normal
        raise InvalidInputError(f"label must be 0 or 1, got {label}")


def make_pulse(spec: PhantomSpec) -> np.ndarray:
    """Unit-energy Gaussian-modulated cosine centered at f0."""
    fc = spec.f0 * 1e6
    t_cut = gausspulse("cutoff", fc=fc, bw=spec.pulse_bandwidth, tpr=-60)
    half = int(np.ceil(t_cut * spec.fs))
    t = np.arange(-half, half + 1) / spec.fs
    p = gausspulse(t, fc=fc, bw=spec.pulse_bandwidth)
    return p / np.sqrt(np.sum(p ** 2))


def generate_frame(spec: PhantomSpec, label: int) -> RfFrame:
    echo, beta_true = spec.class_params(label)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n_lines, n_samples = spec.n_lines, spec.n_samples

    rate = spec.scatterer_density / spec.resolution_cell_samples
    n_scat = max(1, int(round(rate * n_samples)))
    level = 10.0 ** (spec.amplitude_db / 20.0)
    amp_std = echo * level / np.sqrt(rate)

    # one scatterer per equal-width stratum, uniformly jittered inside it
    strata = (np.arange(n_scat) + rng.random((n_lines, n_scat))) * (n_samples / n_scat)
    pos = np.minimum(strata.astype(np.intp), n_samples - 1)
    amps = rng.standard_normal((n_lines, n_scat)) * amp_std
    scat = np.zeros((n_lines, n_samples))
    rows = np.broadcast_to(np.arange(n_lines)[:, None], pos.shape)
    np.add.at(scat, (rows, pos), amps)

    pulse = make_pulse(spec)
    rf = np.empty_like(scat)
    for k in range(n_lines):
        rf[k] = np.convolve(scat[k], pulse, mode="same")

    frame_geom = spec.geometry
    j = np.arange(n_samples, dtype=np.float64)
    gap = max(frame_geom.depth_offset - frame_geom.radius, 0.0)
    depth_cm = (j * spec.c / (2.0 * spec.fs) + gap) * 100.0
    rf *= 10.0 ** (-2.0 * beta_true * spec.f0 * depth_cm / 20.0)

    noise_rms = spec.noise_floor * spec.echogenicity_normal * level
    rf += rng.standard_normal((n_lines, n_samples)) * noise_rms

    # round-trip through float32 so in-memory frames equal what .rff stores
    rf = rf.astype(np.float32).astype(np.float64)
    return RfFrame(rf, spec.fs, spec.f0, spec.c, frame_geom, int(label))


def frame_seed(base_seed: int, index: int) -> int:
    return (base_seed + index) & _SEED_MASK


def generate_dataset(spec: PhantomSpec, n_per_class: int, out_dir):
    """Write ``2 * n_per_class`` frames plus ``manifest.csv`` into ``out_dir``.

    Frame ``i`` uses seed ``spec.seed + i``; labels alternate 0, 1, 0, ...
    Returns ``(manifest_path, entries)``.
    """
    if n_per_class < 1:
        raise InvalidInputError(f"n_per_class must be >= 1, got {n_per_class}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(2 * n_per_class):
        label = i % 2
        frame = generate_frame(replace(spec, seed=frame_seed(spec.seed, i)), label)
        name = f"frame_{i:04d}.rff"
        write_rff(out_dir / name, frame)
        entries.append(ManifestEntry(out_dir / name, label))
    manifest_path = out_dir / "manifest.csv"
    write_manifest(manifest_path, entries)
    return manifest_path, entries
