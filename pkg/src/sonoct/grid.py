"""Dense 2D grids, convolution/padding/patch primitives and their file formats.

Grids are numpy arrays at heart. :class:`RealGrid`, :class:`ComplexGrid` and
:class:`Kernel2D` are thin validated wrappers that also carry pixel spacing;
every numerical routine in the package accepts either the wrapper or a plain
2D array (the wrappers implement ``__array__``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from sonoct._backend import kernels

__all__ = [
    "GridError",
    "InvalidKernelError",
    "BoundsError",
    "RealGrid",
    "ComplexGrid",
    "Kernel2D",
    "conv2d",
    "extract_patch",
    "pad_reflect",
    "reflect_index",
    "write_pfm",
    "read_pfm",
    "write_c64",
    "read_c64",
    "write_png16",
]

Spacing = Optional[Tuple[float, float]]


class GridError(ValueError):
    """Base class for grid construction and indexing errors."""


class InvalidKernelError(GridError):
    pass


class BoundsError(GridError, IndexError):
    pass


def _as_real(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise GridError(f"expected a 2D grid, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class RealGrid:
    values: np.ndarray
    spacing_mm: Spacing = None

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise GridError(f"RealGrid needs a non-empty 2D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise GridError("RealGrid values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class ComplexGrid:
    values: np.ndarray
    spacing_mm: Spacing = None

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.complex128, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise GridError(f"ComplexGrid needs a non-empty 2D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise GridError("ComplexGrid values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_parts(cls, re, im, spacing_mm: Spacing = None) -> "ComplexGrid":
        re = _as_real(re)
        im = _as_real(im)
        if re.shape != im.shape:
            raise GridError("re and im parts must have equal shapes")
        return cls(re + 1j * im, spacing_mm)

    @property
    def re(self) -> np.ndarray:
        return self.values.real

    @property
    def im(self) -> np.ndarray:
        return self.values.imag

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class Kernel2D:
    """Centered convolution kernel; both dimensions must be odd."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[0] % 2 == 0 or arr.shape[1] % 2 == 0:
            raise InvalidKernelError(f"kernel dims must be odd, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidKernelError("kernel values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def impulse(cls) -> "Kernel2D":
        return cls(np.ones((1, 1)))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def reflect_index(i: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices into ``[0, n)`` without repeating the edge sample."""
    i = np.asarray(i)
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.mod(i, period)
    return np.where(i < n, i, period - i)


def pad_reflect(g, margin: int) -> np.ndarray:
    arr = _as_real(g)
    if margin < 0 or margin >= min(arr.shape):
        raise BoundsError(f"reflect margin {margin} needs to be < min(shape)={min(arr.shape)}")
    if margin == 0:
        return arr.copy()
    return np.pad(arr, margin, mode="reflect")


def extract_patch(g, top: int, left: int, h: int, w: int) -> np.ndarray:
    arr = np.asarray(g)
    if arr.ndim != 2:
        raise GridError(f"expected a 2D grid, got shape {arr.shape}")
    if h < 1 or w < 1 or top < 0 or left < 0 or top + h > arr.shape[0] or left + w > arr.shape[1]:
        raise BoundsError(
            f"patch ({top},{left},{h},{w}) does not fit a {arr.shape[0]}x{arr.shape[1]} grid"
        )
    return arr[top:top + h, left:left + w].copy()


def conv2d(x, k, boundary: str = "reflect") -> np.ndarray:
    """Direct-sum 2D convolution, output the same size as ``x``.

    ``out[i, j] = sum_{a, b} k[a, b] * x[i - a + cr, j - b + cc]`` with
    ``(cr, cc)`` the kernel center; samples outside ``x`` come from
    ``boundary`` (``"reflect"`` mirrors without edge repeat, ``"zero"``).
    """
    arr = _as_real(x)
    ker = k.values if isinstance(k, Kernel2D) else np.asarray(k, dtype=np.float64)
    if ker.ndim != 2 or ker.shape[0] % 2 == 0 or ker.shape[1] % 2 == 0:
        raise InvalidKernelError(f"kernel dims must be odd, got {ker.shape}")
    mr, mc = ker.shape[0] // 2, ker.shape[1] // 2
    if boundary == "zero":
        padded = np.pad(arr, ((mr, mr), (mc, mc)))
    elif boundary == "reflect":
        rows = reflect_index(np.arange(-mr, arr.shape[0] + mr), arr.shape[0])
        cols = reflect_index(np.arange(-mc, arr.shape[1] + mc), arr.shape[1])
        padded = arr[np.ix_(rows, cols)]
    else:
        raise ValueError(f"unknown boundary {boundary!r}")
    # correlation with the flipped kernel == convolution
    return kernels.correlate_valid(np.ascontiguousarray(padded), np.ascontiguousarray(ker[::-1, ::-1]))


# ---------------------------------------------------------------------------
# serialization


def write_pfm(path, g) -> None:
    """Greyscale PFM, little-endian (scale -1.0), bottom row first."""
    arr = np.asarray(g, dtype=np.float64)
    if arr.ndim != 2:
        raise GridError("PFM export needs a 2D real grid")
    rows, cols = arr.shape
    header = f"Pf\n{cols} {rows}\n-1.0\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"Pf":
            raise GridError(f"{path}: not a greyscale PFM file")
        try:
            cols, rows = (int(v) for v in fh.readline().split())
            scale = float(fh.readline())
        except ValueError as exc:
            raise GridError(f"{path}: malformed PFM header") from exc
        payload = fh.read()
    dtype = "<f4" if scale < 0 else ">f4"
    if len(payload) < rows * cols * 4:
        raise GridError(f"{path}: PFM payload truncated")
    arr = np.frombuffer(payload, dtype=dtype, count=rows * cols)
    return arr.reshape(rows, cols)[::-1].astype(np.float64)


def write_c64(path, g: Union[ComplexGrid, np.ndarray], spacing_mm: Spacing = None, **extra) -> None:
    """Interleaved little-endian float32 (re, im) pairs plus a ``.json`` sidecar."""
    if isinstance(g, ComplexGrid):
        spacing_mm = spacing_mm or g.spacing_mm
    arr = np.asarray(g, dtype=np.complex128)
    inter = np.empty(arr.shape + (2,), dtype="<f4")
    inter[..., 0] = arr.real
    inter[..., 1] = arr.imag
    path = Path(path)
    path.write_bytes(inter.tobytes())
    meta = {
        "rows": int(arr.shape[0]),
        "cols": int(arr.shape[1]),
        "dtype": "c64-interleaved-f32",
        "spacing_mm": list(spacing_mm) if spacing_mm is not None else None,
    }
    meta.update(extra)
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_c64(path) -> Tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    if meta.get("dtype") != "c64-interleaved-f32":
        raise GridError(f"{path}: unsupported complex dtype {meta.get('dtype')!r}")
    rows, cols = int(meta["rows"]), int(meta["cols"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != rows * cols * 2:
        raise GridError(f"{path}: expected {rows * cols * 2} floats, found {raw.size}")
    raw = raw.reshape(rows, cols, 2).astype(np.float64)
    return raw[..., 0] + 1j * raw[..., 1], meta


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_png16(path, g, lo: Optional[float] = None, hi: Optional[float] = None) -> None:
    """Linear rescale of ``g`` onto 0..65535 and save as a 16-bit greyscale PNG."""
    from PIL import Image

    arr = np.asarray(g, dtype=np.float64)
    lo = float(arr.min()) if lo is None else lo
    hi = float(arr.max()) if hi is None else hi
    scaled = np.zeros_like(arr) if hi <= lo else (np.clip(arr, lo, hi) - lo) / (hi - lo)
    img = np.round(scaled * 65535.0).astype(np.uint16)
    Image.fromarray(img).save(path)
