"""Straight-ray ultrasound simulator working on the CT pixel grid.

One scan line per image column.  Marching down a column accumulates
interface losses and frequency-linear attenuation into a transmission map;
echoes are interface reflections plus a speckle field, both weighted by
transmission, convolved with a Gaussian-modulated pulse.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np

from sonoct.acoustic import AcousticMap
from sonoct.grid import Kernel2D, conv2d

# -6 dB full width of a Gaussian amplitude spectrum in units of its sigma
BANDWIDTH_FACTOR = 2.0 * math.sqrt(2.0 * math.log(2.0))

REFLECTION_WEIGHT = 1.0
SCATTER_WEIGHT = 0.35


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeSpec:
    center_frequency_hz: float = 5e6
    q_factor: float = 0.5
    axial_samples_per_pixel: int = 1
    carrier_cycles_per_sample: float = 0.25
    lateral_beam_sigma_px: float = 1.0
    tgc_enabled: bool = False
    scatter_weight: float = SCATTER_WEIGHT
    reflection_weight: float = REFLECTION_WEIGHT

    def __post_init__(self):
        if self.center_frequency_hz <= 0:
            raise ValueError("center frequency must be positive")
        if not 0 < self.q_factor <= 10:
            raise ValueError("q_factor must lie in (0, 10]")
        if not 0 < self.carrier_cycles_per_sample < 0.5:
            raise ValueError("carrier must lie strictly between 0 and 0.5 cycles/sample")
        if self.axial_samples_per_pixel != 1:
            raise ValueError("only one axial sample per pixel is supported")
        if self.lateral_beam_sigma_px <= 0:
            raise ValueError("lateral beam sigma must be positive")

    @property
    def center_frequency_mhz(self) -> float:
        return self.center_frequency_hz / 1e6

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeSpec":
        return cls(**d)


@dataclass(frozen=True)
class ScanResult:
    reflectivity: np.ndarray
    transmission: np.ndarray
    rf: np.ndarray
    seed: int


def reflection_coefficients(impedance: np.ndarray) -> np.ndarray:
    """Pressure reflection at the boundary below each pixel; zero on the last row."""
    z = np.asarray(impedance, dtype=np.float64)
    r = np.zeros_like(z)
    r[:-1] = (z[1:] - z[:-1]) / (z[1:] + z[:-1])
    return r


def trace_scanlines(amap: AcousticMap, probe: ProbeSpec = ProbeSpec()) -> Tuple[np.ndarray, np.ndarray]:
    """Reflectivity and one-way transmission for every pixel."""
    z = amap.impedance
    if z.size == 0:
        raise ShapeError("empty acoustic map")
    for name in ("attenuation", "density", "speed", "echogenicity"):
        if getattr(amap, name).shape != z.shape:
            raise ShapeError(f"{name} grid does not match impedance grid")
    r = reflection_coefficients(z)
    step_cm = amap.spacing_mm[0] / 10.0
    # accumulate in log10 so transmission is an exact product of per-row factors
    log_step = np.log10(1.0 - r * r) - amap.attenuation * probe.center_frequency_mhz * step_cm / 10.0
    log_t = np.zeros_like(z)
    log_t[1:] = np.cumsum(log_step[:-1], axis=0)
    transmission = 10.0 ** log_t
    reflectivity = transmission * np.abs(r)
    return reflectivity, transmission


def scatter_field(amap: AcousticMap, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal(amap.shape) * amap.echogenicity


def pulse_sigma_samples(probe: ProbeSpec) -> float:
    """Axial Gaussian envelope width whose -6 dB fractional bandwidth is 1/Q."""
    return BANDWIDTH_FACTOR * probe.q_factor / (2.0 * math.pi * probe.carrier_cycles_per_sample)


def pulse_psf(probe: ProbeSpec = ProbeSpec()) -> Kernel2D:
    """Separable pulse-echo kernel: modulated Gaussian axially, Gaussian laterally."""
    sigma_t = pulse_sigma_samples(probe)
    half_t = max(1, math.ceil(3.0 * sigma_t))
    t = np.arange(-half_t, half_t + 1, dtype=np.float64)
    axial = np.exp(-0.5 * (t / sigma_t) ** 2) * np.cos(2.0 * math.pi * probe.carrier_cycles_per_sample * t)
    axial -= axial.mean()
    sigma_l = probe.lateral_beam_sigma_px
    half_l = max(1, math.ceil(3.0 * sigma_l))
    x = np.arange(-half_l, half_l + 1, dtype=np.float64)
    lateral = np.exp(-0.5 * (x / sigma_l) ** 2)
    lateral /= lateral.sum()
    return Kernel2D(np.outer(axial, lateral))


def baseband_psf(probe: ProbeSpec = ProbeSpec()) -> Kernel2D:
    """The pulse kernel as seen after demodulation, normalised to unit DC gain.

    Mixing a Gaussian-modulated cosine down by its carrier leaves its real
    Gaussian envelope, so the same real kernel deconvolves both IQ channels.
    """
    sigma_t = pulse_sigma_samples(probe)
    half_t = max(1, math.ceil(3.0 * sigma_t))
    t = np.arange(-half_t, half_t + 1, dtype=np.float64)
    axial = np.exp(-0.5 * (t / sigma_t) ** 2)
    sigma_l = probe.lateral_beam_sigma_px
    half_l = max(1, math.ceil(3.0 * sigma_l))
    x = np.arange(-half_l, half_l + 1, dtype=np.float64)
    lateral = np.exp(-0.5 * (x / sigma_l) ** 2)
    k = np.outer(axial, lateral)
    return Kernel2D(k / k.sum())


def tgc_gain(rows: int, probe: ProbeSpec, spacing_mm: Tuple[float, float],
             attenuation: float = 0.54) -> np.ndarray:
    """Depth gain undoing soft-tissue attenuation, one factor per row."""
    d = np.arange(rows, dtype=np.float64)
    return 10.0 ** (attenuation * probe.center_frequency_mhz * (spacing_mm[0] / 10.0) * d / 10.0)


def simulate_rf(amap: AcousticMap, probe: ProbeSpec = ProbeSpec(), seed: int = 0) -> ScanResult:
    reflectivity, transmission = trace_scanlines(amap, probe)
    scatter = scatter_field(amap, seed)
    source = reflectivity * probe.reflection_weight + scatter * transmission * probe.scatter_weight
    rf = conv2d(source, pulse_psf(probe), boundary="reflect")
    if probe.tgc_enabled:
        rf = rf * tgc_gain(rf.shape[0], probe, amap.spacing_mm)[:, None]
    return ScanResult(reflectivity, transmission, rf, seed)
