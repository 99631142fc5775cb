"""Hounsfield units to acoustic tissue properties."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from sonoct.grid import reflect_index

AIR_DENSITY = 1.2  # kg/m^3
SPEED_MIN, SPEED_MAX = 300.0, 4500.0
BONE_SPEED = 2800.0
BONE_HU = 300.0
# local HU standard deviation that maps to full echogenicity
ECHO_SCALE_HU = 100.0

# dB / (cm MHz)
ATTEN_AIR = 41.0
ATTEN_FAT = 0.48
ATTEN_SOFT = 0.54
ATTEN_BONE = 6.9

PROPERTIES = ("density", "speed", "impedance", "attenuation", "echogenicity")


@dataclass(frozen=True)
class AcousticMap:
    density: np.ndarray       # kg/m^3
    speed: np.ndarray         # m/s
    impedance: np.ndarray     # Rayl
    attenuation: np.ndarray   # dB/(cm MHz)
    echogenicity: np.ndarray  # [0, 1]
    spacing_mm: Tuple[float, float] = (0.7, 0.7)

    def __post_init__(self):
        shape = np.shape(self.density)
        for name in PROPERTIES:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape != shape or arr.size == 0:
                raise ValueError(f"{name} grid has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.density.shape

    def with_(self, **changes) -> "AcousticMap":
        fields = {name: getattr(self, name) for name in PROPERTIES}
        fields["spacing_mm"] = self.spacing_mm
        fields.update(changes)
        return AcousticMap(**fields)


def local_std(hu: np.ndarray) -> np.ndarray:
    """Standard deviation over each 3x3 neighbourhood (reflect boundary).

    Computed on differences to the centre pixel so a constant input gives
    exactly zero.
    """
    rows, cols = hu.shape
    ri = reflect_index(np.arange(-1, rows + 1), rows)
    ci = reflect_index(np.arange(-1, cols + 1), cols)
    p = hu[np.ix_(ri, ci)]
    s1 = np.zeros_like(hu)
    s2 = np.zeros_like(hu)
    for a in range(3):
        for b in range(3):
            d = p[a:a + rows, b:b + cols] - hu
            s1 += d
            s2 += d * d
    var = s2 / 9.0 - (s1 / 9.0) ** 2
    return np.sqrt(np.maximum(var, 0.0))


def hu_to_acoustic(slice_, spacing_mm: Optional[Tuple[float, float]] = None) -> AcousticMap:
    """Map a Hounsfield slice (or 2D HU array) to density/speed/impedance/attenuation/echogenicity."""
    if hasattr(slice_, "hu"):
        hu = np.asarray(slice_.hu, dtype=np.float64)
        spacing_mm = spacing_mm or tuple(slice_.pixel_spacing_mm)
    else:
        hu = np.asarray(slice_, dtype=np.float64)
        spacing_mm = spacing_mm or (0.7, 0.7)
    density = np.maximum(AIR_DENSITY, 1000.0 + hu)
    soft_speed = 331.1 + 1.209 * np.minimum(density, 1100.0)
    speed = np.clip(np.where(hu > BONE_HU, BONE_SPEED, soft_speed), SPEED_MIN, SPEED_MAX)
    impedance = density * speed
    attenuation = np.select(
        [hu < -900.0, hu < -30.0, hu <= BONE_HU],
        [ATTEN_AIR, ATTEN_FAT, ATTEN_SOFT],
        default=ATTEN_BONE,
    )
    echogenicity = np.clip(local_std(hu) / ECHO_SCALE_HU, 0.0, 1.0)
    return AcousticMap(density, speed, impedance, attenuation, echogenicity, tuple(spacing_mm))
