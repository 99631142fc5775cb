"""RF to IQ demodulation, envelope detection and log compression."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sonoct.grid import Kernel2D, conv2d

LOWPASS_TAPS = 21


class ParameterError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class IqImage:
    data: np.ndarray
    carrier_cycles_per_sample: float = 0.25

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.complex128, copy=True)
        if arr.ndim != 2:
            raise ValueError("IQ image must be 2D")
        if not np.all(np.isfinite(arr)):
            raise ValueError("IQ image must be finite")
        if not 0 < self.carrier_cycles_per_sample < 0.5:
            raise ParameterError("carrier must lie strictly between 0 and 0.5 cycles/sample")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape

    def scaled(self, s: complex) -> "IqImage":
        return IqImage(self.data * s, self.carrier_cycles_per_sample)


def lowpass_taps(cutoff: float, taps: int = LOWPASS_TAPS) -> np.ndarray:
    """Hamming-windowed sinc with unit DC gain; ``cutoff`` in cycles/sample."""
    n = np.arange(taps) - (taps - 1) / 2
    h = 2.0 * cutoff * np.sinc(2.0 * cutoff * n) * np.hamming(taps)
    return h / h.sum()


def demodulate(rf, carrier_cycles_per_sample: float = 0.25) -> IqImage:
    """Mix each column down by the carrier, low-pass along depth, double."""
    if not 0 < carrier_cycles_per_sample < 0.5:
        raise ParameterError("carrier must lie strictly between 0 and 0.5 cycles/sample")
    rf = np.asarray(rf, dtype=np.float64)
    d = np.arange(rf.shape[0], dtype=np.float64)[:, None]
    phase = -2.0 * np.pi * carrier_cycles_per_sample * d
    k = Kernel2D(lowpass_taps(carrier_cycles_per_sample)[:, None])
    re = conv2d(rf * np.cos(phase), k, boundary="reflect")
    im = conv2d(rf * np.sin(phase), k, boundary="reflect")
    return IqImage(2.0 * (re + 1j * im), carrier_cycles_per_sample)


def envelope(iq) -> np.ndarray:
    data = iq.data if isinstance(iq, IqImage) else np.asarray(iq)
    return np.abs(data)


def bmode(env, dynamic_range_db: float = 60.0) -> np.ndarray:
    """Log-compress an envelope into [0, 1] over ``dynamic_range_db``."""
    if not dynamic_range_db > 0:
        raise ParameterError("dynamic range must be positive")
    env = np.asarray(env, dtype=np.float64)
    peak = env.max()
    if peak <= 0:
        raise DegenerateInputError("envelope is identically zero")
    db = np.clip(20.0 * np.log10(env / peak + 1e-12), -dynamic_range_db, 0.0)
    return (db + dynamic_range_db) / dynamic_range_db
