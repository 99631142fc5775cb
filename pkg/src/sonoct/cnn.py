"""Multi-resolution fully convolutional network written directly on numpy.

Forward pass, exact backpropagation, Adam and MSE, plus the on-disk
checkpoint format.  Convolutions are 3x3 with zero padding, lowered to a
single BLAS matrix product per layer (im2col).  Activations are kept in a
channel-major ``(c, n, h, w)`` layout internally; the public API takes and
returns ``(n, c, h, w)`` arrays.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from sonoct import _backend

__all__ = [
    "ShapeError",
    "StaleCacheError",
    "LayerSpec",
    "NetworkSpec",
    "Network",
    "AdamState",
    "adam_step",
    "mse_loss",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
    "gradient_check",
    "relative_error",
]

RESAMPLE = ("none", "down2", "up2")
ACTIVATIONS = ("relu", "linear")


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    """Raised when a forward cache is used after the weights changed."""


@dataclass(frozen=True)
class LayerSpec:
    in_channels: int
    out_channels: int
    resample: str = "none"
    activation: str = "relu"

    def __post_init__(self):
        if self.resample not in RESAMPLE:
            raise ValueError(f"resample must be one of {RESAMPLE}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered 3x3 conv layers plus additive skips.

    A skip pair ``(src, dst)`` (1-based layer numbers) feeds the
    pre-activation output of layer ``src`` into the input of layer ``dst``:
    it is added to the pre-activation of layer ``dst - 1`` before that
    layer's nonlinearity.
    """

    layers: Tuple[LayerSpec, ...]
    skip_pairs: Tuple[Tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "skip_pairs", tuple(tuple(p) for p in self.skip_pairs))
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ValueError("consecutive layers disagree on channel counts")
        n = len(self.layers)
        for src, dst in self.skip_pairs:
            if not (1 <= src < dst - 1 <= n - 1):
                raise ValueError(f"skip pair {(src, dst)} is not a forward skip")
            if self.layers[src - 1].out_channels != self.layers[dst - 2].out_channels:
                raise ValueError(f"skip pair {(src, dst)} joins tensors with different channel counts")

    @classmethod
    def paper(cls, width: int = 32, in_channels: int = 2, out_channels: int = 1) -> "NetworkSpec":
        """The 10-layer encoder/decoder: two stride-2 stages down, two nearest-2x stages up."""
        w1, w2, w3 = width, 2 * width, 4 * width
        down = [
            LayerSpec(in_channels, w1),
            LayerSpec(w1, w1, "down2"),
            LayerSpec(w1, w2),
            LayerSpec(w2, w2, "down2"),
            LayerSpec(w2, w3),
        ]
        up = [
            LayerSpec(w3, w2),
            LayerSpec(w2, w2, "up2"),
            LayerSpec(w2, w1),
            LayerSpec(w1, w1, "up2"),
            LayerSpec(w1, out_channels, activation="linear"),
        ]
        spec = cls(tuple(down + up), tuple((i, 11 - i) for i in range(1, 5)))
        spec.check_symmetric()
        return spec

    def check_symmetric(self) -> None:
        """Invariants of the 10-layer encoder/decoder plan."""
        if len(self.layers) != 10:
            raise ValueError("expected exactly 10 convolutional layers")
        if sorted(self.skip_pairs) != [(i, 11 - i) for i in range(1, 5)]:
            raise ValueError("skip pairs must be (i, 11 - i) for i in 1..4")
        if self.layers[-1].activation != "linear":
            raise ValueError("final layer must be linear")

    @property
    def downsample_factor(self) -> int:
        f = 1
        for layer in self.layers:
            if layer.resample == "down2":
                f *= 2
        return f

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        shapes = []
        for i, layer in enumerate(self.layers, start=1):
            shapes.append((f"conv{i}.weight", (layer.out_channels, layer.in_channels, 3, 3)))
            shapes.append((f"conv{i}.bias", (layer.out_channels,)))
        return shapes

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def to_dict(self) -> dict:
        return {
            "layers": [
                {
                    "in_channels": l.in_channels,
                    "out_channels": l.out_channels,
                    "resample": l.resample,
                    "activation": l.activation,
                }
                for l in self.layers
            ],
            "skip_pairs": [list(p) for p in self.skip_pairs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(LayerSpec(**l) for l in d["layers"]), tuple(tuple(p) for p in d["skip_pairs"]))


def _im2col(xp: np.ndarray, ho: int, wo: int, stride: int) -> np.ndarray:
    ci, n = xp.shape[:2]
    cols = np.empty((ci, 3, 3, n, ho, wo))
    for a in range(3):
        for b in range(3):
            cols[:, a, b] = xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]
    return cols.reshape(ci * 9, n * ho * wo)


def _col2im(gcols: np.ndarray, shape, ho: int, wo: int, stride: int) -> np.ndarray:
    ci, n, hp, wp = shape
    g = gcols.reshape(ci, 3, 3, n, ho, wo)
    gxp = np.zeros(shape)
    for a in range(3):
        for b in range(3):
            gxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += g[:, a, b]
    return gxp


class Network:
    """Weights for a :class:`NetworkSpec`, stored in one flat float64 vector."""

    def __init__(self, spec: NetworkSpec, params: Optional[np.ndarray] = None):
        self.spec = spec
        self._shapes = spec.param_shapes()
        self._offsets = []
        off = 0
        for _, shape in self._shapes:
            size = int(np.prod(shape))
            self._offsets.append((off, size))
            off += size
        self._version = 0
        if params is None:
            params = np.zeros(off)
        self.set_params(params)

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int) -> "Network":
        """He-uniform weights (fan-in scaling), zero biases."""
        rng = np.random.default_rng(seed)
        net = cls(spec)
        flat = np.zeros(spec.num_params)
        for (name, shape), (off, size) in zip(net._shapes, net._offsets):
            if name.endswith("weight"):
                bound = np.sqrt(6.0 / (shape[1] * 9))
                flat[off:off + size] = rng.uniform(-bound, bound, size)
        net.set_params(flat)
        return net

    @property
    def params(self) -> np.ndarray:
        return self._params

    def set_params(self, params: np.ndarray) -> None:
        params = np.array(params, dtype=np.float64, copy=True)
        if params.shape != (self.spec.num_params,):
            raise ShapeError(f"expected {self.spec.num_params} parameters, got {params.shape}")
        self._params = params
        self._version += 1

    def tensors(self, flat: Optional[np.ndarray] = None):
        """Named views into ``flat`` (defaults to the live parameters)."""
        flat = self._params if flat is None else flat
        return {
            name: flat[off:off + size].reshape(shape)
            for (name, shape), (off, size) in zip(self._shapes, self._offsets)
        }

    def _layer_params(self, i: int):
        (off_w, size_w), (off_b, size_b) = self._offsets[2 * i], self._offsets[2 * i + 1]
        w = self._params[off_w:off_w + size_w].reshape(self._shapes[2 * i][1])
        b = self._params[off_b:off_b + size_b]
        return w, b

    # ------------------------------------------------------------------
    def forward(self, x: np.ndarray, keep_cache: bool = True):
        """Run the network on ``x`` of shape ``(n, c, h, w)``.

        Returns ``(y, cache)``; ``cache`` is ``None`` when ``keep_cache`` is
        false (inference).
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4:
            raise ShapeError(f"expected an (n, c, h, w) tensor, got shape {x.shape}")
        n, c, h, w = x.shape
        if c != self.spec.layers[0].in_channels:
            raise ShapeError(f"expected {self.spec.layers[0].in_channels} input channels, got {c}")
        f = self.spec.downsample_factor
        if h % f or w % f:
            raise ShapeError(f"spatial dims {h}x{w} must be divisible by {f}")
        skip_into = {dst - 1: [] for _, dst in self.spec.skip_pairs}
        for src, dst in self.spec.skip_pairs:
            skip_into[dst - 1].append(src)

        a = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
        z_store = {}
        records = []
        for i, layer in enumerate(self.spec.layers, start=1):
            wgt, bias = self._layer_params(i - 1)
            inp = a
            if layer.resample == "up2":
                inp = inp.repeat(2, axis=2).repeat(2, axis=3)
            ci, nb, hi, wi = inp.shape
            stride = 2 if layer.resample == "down2" else 1
            ho, wo = hi // stride, wi // stride
            xp = np.zeros((ci, nb, hi + 2, wi + 2))
            xp[:, :, 1:-1, 1:-1] = inp
            cols = _im2col(xp, ho, wo, stride)
            z = (wgt.reshape(layer.out_channels, -1) @ cols).reshape(layer.out_channels, nb, ho, wo)
            z += bias[:, None, None, None]
            for src in skip_into.get(i, ()):
                z += z_store[src]
            if any(src == i for src, _ in self.spec.skip_pairs):
                z_store[i] = z
            a = np.maximum(z, 0.0) if layer.activation == "relu" else z
            if keep_cache:
                records.append((cols, xp.shape, z if layer.activation == "relu" else None, (ho, wo)))
        y = np.ascontiguousarray(a.transpose(1, 0, 2, 3))
        cache = _Cache(self, self._version, records, x.shape) if keep_cache else None
        return y, cache

    def _weights32(self):
        if getattr(self, "_w32_version", None) != self._version:
            self._w32 = [
                tuple(np.ascontiguousarray(t, dtype=np.float32) for t in self._layer_params(i))
                for i in range(len(self.spec.layers))
            ]
            self._w32_version = self._version
        return self._w32

    def infer(self, x: np.ndarray, backend=None) -> np.ndarray:
        """Inference-only forward pass in float32 through the backend's direct 3x3 convolution.

        Agrees with :meth:`forward` to float32 rounding; returns float32.
        """
        k = _backend.kernels if backend is None else _backend.get(backend)
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != self.spec.layers[0].in_channels:
            raise ShapeError(f"expected (n, {self.spec.layers[0].in_channels}, h, w) input, got {x.shape}")
        f = self.spec.downsample_factor
        if x.shape[2] % f or x.shape[3] % f:
            raise ShapeError(f"spatial dims {x.shape[2:]} must be divisible by {f}")
        weights = self._weights32()
        sources = {src for src, _ in self.spec.skip_pairs}
        into = {}
        for src, dst in self.spec.skip_pairs:
            into.setdefault(dst - 1, []).append(src)
        outs = []
        for img in x:
            a = np.ascontiguousarray(img, dtype=np.float32)
            stored = {}
            for i, layer in enumerate(self.spec.layers, start=1):
                if layer.resample == "up2":
                    a = a.repeat(2, axis=1).repeat(2, axis=2)
                w, b = weights[i - 1]
                z = k.conv3x3(a, w, b, 2 if layer.resample == "down2" else 1)
                for src in into.get(i, ()):
                    z += stored[src]
                if i in sources:
                    stored[i] = z
                    a = np.maximum(z, 0) if layer.activation == "relu" else z
                else:
                    a = np.maximum(z, 0, out=z) if layer.activation == "relu" else z
            outs.append(a)
        return np.stack(outs)

    def predict(self, x: np.ndarray, batch: int = 8) -> np.ndarray:
        outs = [self.forward(x[i:i + batch], keep_cache=False)[0] for i in range(0, len(x), batch)]
        return np.concatenate(outs, axis=0)

    def backward(self, cache: "_Cache", grad_y: np.ndarray):
        """Gradients of ``sum(grad_y * y)`` w.r.t. parameters and input.

        Returns ``(grad_params_flat, grad_x)``.
        """
        if cache is None or cache.net is not self or cache.version != self._version:
            raise StaleCacheError("cache does not belong to the current weights")
        grad_y = np.asarray(grad_y, dtype=np.float64)
        n_out = self.spec.layers[-1].out_channels
        expect = (cache.x_shape[0], n_out) + cache.x_shape[2:]
        if grad_y.shape != expect:
            raise ShapeError(f"grad_y shape {grad_y.shape} != output shape {expect}")
        grads = np.zeros_like(self._params)
        gtens = self.tensors(grads)
        pending = {}
        g = np.ascontiguousarray(grad_y.transpose(1, 0, 2, 3))
        for i in range(len(self.spec.layers), 0, -1):
            layer = self.spec.layers[i - 1]
            cols, xp_shape, z, (ho, wo) = cache.records[i - 1]
            if layer.activation == "relu":
                g = g * (z > 0)
            if i in pending:
                g = g + pending.pop(i)
            for src, dst in self.spec.skip_pairs:
                if dst - 1 == i:
                    pending[src] = pending.get(src, 0.0) + g
            wgt, _ = self._layer_params(i - 1)
            co = layer.out_channels
            g2 = g.reshape(co, -1)
            gtens[f"conv{i}.weight"][...] = (g2 @ cols.T).reshape(wgt.shape)
            gtens[f"conv{i}.bias"][...] = g2.sum(axis=1)
            gcols = wgt.reshape(co, -1).T @ g2
            stride = 2 if layer.resample == "down2" else 1
            gxp = _col2im(gcols, xp_shape, ho, wo, stride)
            g = gxp[:, :, 1:-1, 1:-1]
            if layer.resample == "up2":
                c_, n_, h_, w_ = g.shape
                g = g.reshape(c_, n_, h_ // 2, 2, w_ // 2, 2).sum(axis=(3, 5))
        grad_x = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        return grads, grad_x


@dataclass
class _Cache:
    net: Network
    version: int
    records: list
    x_shape: tuple


# ---------------------------------------------------------------------------
# optimizer and loss


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-4) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError("params, grads and optimizer moments must share a shape")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, step=t)


def mse_loss(y: np.ndarray, t: np.ndarray):
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if y.shape != t.shape:
        raise ShapeError(f"shape mismatch {y.shape} vs {t.shape}")
    r = y - t
    return float(np.mean(r * r)), 2.0 * r / r.size


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Max of ``|a - b| / max(|a|, |b|)`` over entries where either exceeds ``floor``."""
    a = np.ravel(a)
    b = np.ravel(b)
    den = np.maximum(np.abs(a), np.abs(b))
    mask = den > floor
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a - b)[mask] / den[mask]))


def gradient_check(net: "Network", x: np.ndarray, seed: int = 0, h: float = 1e-6) -> Tuple[float, float]:
    """Analytic vs central-difference gradients of ``sum(g * net(x))`` for a random ``g``.

    Returns the max relative errors for (parameters, input).
    """
    rng = np.random.default_rng(seed)
    y, cache = net.forward(x)
    g = rng.standard_normal(y.shape)
    gp, gx = net.backward(cache, g)

    def objective(params, inp):
        saved = net.params
        net.set_params(params)
        out = float(np.sum(g * net.forward(inp, keep_cache=False)[0]))
        net.set_params(saved)
        return out

    p0 = net.params.copy()
    num_p = np.empty_like(p0)
    for i in range(p0.size):
        e = np.zeros_like(p0)
        e[i] = h
        num_p[i] = (objective(p0 + e, x) - objective(p0 - e, x)) / (2 * h)
    num_x = np.empty(x.size)
    flat = np.asarray(x, dtype=np.float64).ravel()
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        num_x[i] = (objective(p0, (flat + e).reshape(x.shape)) - objective(p0, (flat - e).reshape(x.shape))) / (2 * h)
    return relative_error(gp, num_p), relative_error(gx, num_x)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    net: Network
    adam: Optional[AdamState] = None
    norm_stats: dict = field(default_factory=dict)
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return self.adam.step if self.adam is not None else 0


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``manifest.json`` + ``weights.bin`` (+ Adam moment blobs) into ``path``.

    Blobs are little-endian float32; the manifest lists offset/len (bytes)
    for every tensor.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    net = ckpt.net
    tensors = []
    off = 0
    for (name, shape), (_, size) in zip(net._shapes, net._offsets):
        tensors.append({"name": name, "shape": list(shape), "offset": off, "len": size * 4})
        off += size * 4
    manifest = {
        "format": "sonoct-checkpoint",
        "version": 1,
        "dtype": "float32-le",
        "topology": net.spec.to_dict(),
        "channel_plan": [l.out_channels for l in net.spec.layers],
        "num_params": net.spec.num_params,
        "norm_stats": ckpt.norm_stats,
        "seed": ckpt.seed,
        "step": ckpt.step,
        "tensors": tensors,
        "blobs": {"weights": "weights.bin"},
    }
    (path / "weights.bin").write_bytes(net.params.astype("<f4").tobytes())
    if ckpt.adam is not None:
        a = ckpt.adam
        (path / "adam_m.bin").write_bytes(a.m.astype("<f4").tobytes())
        (path / "adam_v.bin").write_bytes(a.v.astype("<f4").tobytes())
        manifest["blobs"].update({"adam_m": "adam_m.bin", "adam_v": "adam_v.bin"})
        manifest["adam"] = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step}
    manifest.update(ckpt.extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    spec = NetworkSpec.from_dict(manifest["topology"])

    def blob(name):
        arr = np.frombuffer((path / manifest["blobs"][name]).read_bytes(), dtype="<f4").astype(np.float64)
        if arr.size != spec.num_params:
            raise ShapeError(f"{name} blob holds {arr.size} values, expected {spec.num_params}")
        return arr

    net = Network(spec, blob("weights"))
    adam = None
    if "adam_m" in manifest["blobs"]:
        a = manifest["adam"]
        adam = AdamState(blob("adam_m"), blob("adam_v"), a["step"], a["lr"], a["beta1"], a["beta2"], a["eps"])
    known = {"format", "version", "dtype", "topology", "channel_plan", "num_params", "norm_stats",
             "seed", "step", "tensors", "blobs", "adam"}
    extra = {k: v for k, v in manifest.items() if k not in known}
    return Checkpoint(net, adam, manifest.get("norm_stats", {}), manifest.get("seed", 0), extra)
