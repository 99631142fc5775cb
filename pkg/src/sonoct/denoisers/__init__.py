"""TV, NLM and BM3D denoisers (all operate on float64 2D arrays)."""
from sonoct.denoisers.bm3d import Bm3dParams, bm3d_denoise, estimate_sigma
from sonoct.denoisers.nlm import NlmParams, nlm_denoise
from sonoct.denoisers.tv import TvParams, rof_objective, tv_denoise

__all__ = [
    "TvParams",
    "NlmParams",
    "Bm3dParams",
    "tv_denoise",
    "nlm_denoise",
    "bm3d_denoise",
    "rof_objective",
    "estimate_sigma",
]
