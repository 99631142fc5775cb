"""Homomorphic despeckling.

Wiener deconvolution, envelope, log transform, left-tail outlier shrinkage,
a pluggable denoiser on the normalised log image, then exponentiation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from sonoct.denoisers import Bm3dParams, NlmParams, TvParams, bm3d_denoise, nlm_denoise, tv_denoise
from sonoct.grid import InvalidKernelError, Kernel2D
from sonoct.iq import IqImage, envelope

# relative to the envelope maximum when no absolute epsilon is configured
LOG_EPSILON_FRACTION = 1e-3


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class IdentityDenoiser:
    pass


Denoiser = Union[TvParams, NlmParams, Bm3dParams, IdentityDenoiser]


def denoiser_to_dict(d: Denoiser) -> dict:
    if isinstance(d, TvParams):
        return {"kind": "tv", "lambda": d.lam, "iters": d.iters, "tau": d.tau}
    if isinstance(d, NlmParams):
        return {"kind": "nlm", "patch_radius": d.patch_radius, "search_radius": d.search_radius, "h": d.h}
    if isinstance(d, Bm3dParams):
        return {"kind": "bm3d", "sigma": d.sigma}
    if isinstance(d, IdentityDenoiser):
        return {"kind": "identity"}
    raise TypeError(f"unknown denoiser {d!r}")


def denoiser_from_dict(d: dict) -> Denoiser:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "tv":
        return TvParams(lam=float(d.pop("lambda")), **d)
    if kind == "nlm":
        return NlmParams(**d)
    if kind == "bm3d":
        return Bm3dParams(**d)
    if kind == "identity":
        return IdentityDenoiser()
    raise ValueError(f"unknown denoiser kind {kind!r}")


def denoise(l: np.ndarray, d: Denoiser, backend=None) -> np.ndarray:
    if isinstance(d, TvParams):
        return tv_denoise(l, d, backend)
    if isinstance(d, NlmParams):
        return nlm_denoise(l, d, backend)
    if isinstance(d, Bm3dParams):
        return bm3d_denoise(l, d, backend)
    if isinstance(d, IdentityDenoiser):
        return np.array(l, dtype=np.float64)
    raise TypeError(f"unknown denoiser {d!r}")


@dataclass(frozen=True)
class DespeckleConfig:
    """Despeckling pipeline parameters.

    ``log_epsilon=None`` means ``1e-3`` times the envelope maximum, which
    keeps the pipeline covariant under scaling of the input.
    """

    psf: Kernel2D = field(default_factory=Kernel2D.impulse)
    wiener_noise_ratio: float = 0.0
    log_epsilon: Optional[float] = None
    shrink_k: float = 3.0
    denoiser: Denoiser = field(default_factory=lambda: TvParams(lam=0.3, iters=100))

    def __post_init__(self):
        if not isinstance(self.psf, Kernel2D):
            object.__setattr__(self, "psf", Kernel2D(np.asarray(self.psf)))
        if not self.wiener_noise_ratio >= 0:
            raise ValueError("wiener_noise_ratio must be >= 0")
        if self.log_epsilon is not None and not self.log_epsilon > 0:
            raise ValueError("log_epsilon must be positive")
        if not self.shrink_k > 0:
            raise ValueError("shrink_k must be positive")
        if not isinstance(self.denoiser, (TvParams, NlmParams, Bm3dParams, IdentityDenoiser)):
            raise TypeError(f"unknown denoiser {self.denoiser!r}")

    @classmethod
    def bypass(cls) -> "DespeckleConfig":
        """Impulse PSF, no regularisation, identity denoiser, no shrinkage."""
        return cls(Kernel2D.impulse(), 0.0, None, 1e6, IdentityDenoiser())

    def to_dict(self) -> dict:
        return {
            "psf": np.asarray(self.psf).tolist(),
            "wiener_noise_ratio": self.wiener_noise_ratio,
            "log_epsilon": self.log_epsilon,
            "shrink_k": self.shrink_k,
            "denoiser": denoiser_to_dict(self.denoiser),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DespeckleConfig":
        psf = d.get("psf")
        return cls(
            psf=Kernel2D(np.asarray(psf, dtype=np.float64)) if psf is not None else Kernel2D.impulse(),
            wiener_noise_ratio=float(d.get("wiener_noise_ratio", 0.0)),
            log_epsilon=d.get("log_epsilon"),
            shrink_k=float(d.get("shrink_k", 3.0)),
            denoiser=denoiser_from_dict(d.get("denoiser", {"kind": "identity"})),
        )


def psf_transfer(psf, shape) -> np.ndarray:
    """DFT of the kernel zero-padded to ``shape`` with its centre moved to (0, 0)."""
    k = np.asarray(psf, dtype=np.float64)
    rows, cols = shape
    kr, kc = k.shape
    if kr > rows or kc > cols:
        raise InvalidKernelError(f"{kr}x{kc} kernel larger than {rows}x{cols} image")
    padded = np.zeros(shape)
    padded[:kr, :kc] = k
    padded = np.roll(padded, (-(kr // 2), -(kc // 2)), axis=(0, 1))
    return np.fft.fft2(padded)


def wiener_deconvolve(iq, psf, noise_ratio: float):
    """Apply ``conj(H) / (|H|^2 + noise_ratio)`` to the real and imaginary channels."""
    if not noise_ratio >= 0:
        raise ValueError("noise ratio must be >= 0")
    k = np.asarray(psf, dtype=np.float64)
    if not np.any(k):
        raise InvalidKernelError("PSF is identically zero")
    is_iq = isinstance(iq, IqImage)
    data = iq.data if is_iq else np.asarray(iq, dtype=np.complex128)
    c = k[k.shape[0] // 2, k.shape[1] // 2]
    if np.count_nonzero(k) == 1 and c != 0:
        # centred impulse: |H| is flat, so the filter is an exact scalar gain
        out = data * (c / (c * c + noise_ratio))
        return IqImage(out, iq.carrier_cycles_per_sample) if is_iq else out
    h = psf_transfer(k, data.shape)
    den = (h * h.conj()).real + noise_ratio
    # exact zeros of H (with no regularisation) carry no information: output 0 there
    g = np.divide(h.conj(), den, out=np.zeros_like(h), where=den > 0)
    re = np.fft.ifft2(np.fft.fft2(data.real) * g).real
    im = np.fft.ifft2(np.fft.fft2(data.imag) * g).real
    out = re + 1j * im
    return IqImage(out, iq.carrier_cycles_per_sample) if is_iq else out


def log_transform(env, eps: float) -> np.ndarray:
    env = np.asarray(env, dtype=np.float64)
    if not eps > 0:
        raise DomainError("epsilon must be positive")
    if np.any(env < 0):
        raise DomainError("envelope must be non-negative")
    return np.log(env + eps)


def exp_transform(l, eps: float) -> np.ndarray:
    """``max(exp(l) - eps, 0)``, written so that ``l == ln(eps)`` maps to exactly 0."""
    l = np.asarray(l, dtype=np.float64)
    return np.maximum(eps * np.expm1(l - np.log(eps)), 0.0)


def outlier_shrink(l, k: float) -> np.ndarray:
    """Soft-clamp values below ``mean - k*std`` with a tanh of scale ``std``."""
    if not k > 0:
        raise ValueError("k must be positive")
    l = np.asarray(l, dtype=np.float64)
    mu = l.mean()
    sd = l.std()
    out = l.copy()
    if sd == 0:
        return out
    t = mu - k * sd
    low = l < t
    out[low] = t + np.tanh((l[low] - t) / sd) * sd
    return out


def resolve_epsilon(env: np.ndarray, cfg: DespeckleConfig) -> float:
    if cfg.log_epsilon is not None:
        return float(cfg.log_epsilon)
    peak = float(np.max(env)) if env.size else 0.0
    # an all-zero envelope still needs a positive floor
    return LOG_EPSILON_FRACTION * peak if peak > 0 else 1e-12


def despeckle(iq, cfg: DespeckleConfig, backend=None) -> np.ndarray:
    """Despeckled envelope (non-negative, same shape as the input)."""
    deconv = wiener_deconvolve(iq, cfg.psf, cfg.wiener_noise_ratio)
    env = envelope(deconv)
    eps = resolve_epsilon(env, cfg)
    l = outlier_shrink(log_transform(env, eps), cfg.shrink_k)
    if isinstance(cfg.denoiser, IdentityDenoiser):
        return exp_transform(l, eps)
    mu = l.mean()
    sd = l.std()
    scale = sd if sd > 0 else 1.0
    den = denoise((l - mu) / scale, cfg.denoiser, backend)
    return exp_transform(den * scale + mu, eps)
