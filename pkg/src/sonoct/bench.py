"""PSNR and the run-time benchmark harness."""
from __future__ import annotations

import csv
import io
import math
import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

# reported when two images are identical
PSNR_CAP_DB = 99.0

CONVENTIONAL = ("tv", "nlm", "bm3d")


class ConfigurationError(ValueError):
    pass


def dynamic_range(ref) -> float:
    """``max - min`` of ``ref``; falls back to ``max |ref|`` (then 1) for flat images."""
    ref = np.asarray(ref, dtype=np.float64)
    r = float(ref.max() - ref.min())
    if r > 0:
        return r
    m = float(np.abs(ref).max())
    return m if m > 0 else 1.0


def psnr(a, b, peak: Optional[float] = None) -> float:
    """``10 log10(peak^2 / MSE)`` in dB, capped at 99 dB for identical inputs.

    ``b`` is the reference; ``peak`` defaults to its dynamic range.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if peak is None:
        peak = dynamic_range(b)
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))


def mean_psnr(outputs: Sequence[np.ndarray], refs: Sequence[np.ndarray]) -> float:
    return float(np.mean([psnr(o, r) for o, r in zip(outputs, refs)]))


@dataclass(frozen=True)
class BenchRow:
    method: str
    cpu_seconds: float
    threads: int
    psnr_db: Optional[float] = None


@dataclass
class BenchReport:
    rows: List[BenchRow]
    volume_shape: Tuple[int, int, int]
    environment: str = ""
    times: Dict[str, List[float]] = field(default_factory=dict, compare=False)

    def row(self, method: str) -> BenchRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def seconds(self, method: str) -> float:
        return self.row(method).cpu_seconds

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# volume_shape={'x'.join(str(v) for v in self.volume_shape)}\n")
        buf.write(f"# environment={self.environment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "cpu_seconds", "threads", "psnr_db"])
        for r in self.rows:
            w.writerow([r.method, repr(r.cpu_seconds), r.threads, "" if r.psnr_db is None else repr(r.psnr_db)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "BenchReport":
        meta = {}
        body = []
        for line in text.splitlines():
            if line.startswith("# ") and "=" in line:
                k, v = line[2:].split("=", 1)
                meta[k] = v
            elif line:
                body.append(line)
        rows = [
            BenchRow(r["method"], float(r["cpu_seconds"]), int(r["threads"]),
                     float(r["psnr_db"]) if r["psnr_db"] else None)
            for r in csv.DictReader(body)
        ]
        shape = tuple(int(v) for v in meta.get("volume_shape", "0x0x0").split("x"))
        return cls(rows, shape, meta.get("environment", ""))

    def table(self) -> str:
        """Run-time table with a PSNR column (CNN rows: PSNR against the method it imitates)."""
        f, h, w = self.volume_shape
        lines = [f"Run time on a {h}x{w}x{f} volume ({self.environment})",
                 f"{'method':<12}{'CPU [s]':>12}{'threads':>9}{'PSNR [dB]':>11}"]
        for r in self.rows:
            p = "-" if r.psnr_db is None else f"{r.psnr_db:.2f}"
            lines.append(f"{r.method:<12}{r.cpu_seconds:>12.3f}{r.threads:>9d}{p:>11}")
        return "\n".join(lines) + "\n"


def environment_string(threads: int) -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'}, python {platform.python_version()}, {threads} thread(s)"


Method = Callable[[Sequence[np.ndarray]], List[np.ndarray]]


def time_method(fn: Method, volume, repeats: int, clock=time.process_time) -> Tuple[List[float], list]:
    """One discarded warm-up run, then ``repeats`` timed runs over the volume."""
    outputs = fn(volume)
    times = []
    for _ in range(repeats):
        t0 = clock()
        fn(volume)
        times.append(clock() - t0)
    return times, outputs


def run_bench(
    volume: Sequence,
    methods: Sequence[Union[str, Tuple[str, Method]]],
    repeats: int = 3,
    configs: Optional[Mapping] = None,
    checkpoints: Optional[Mapping] = None,
    threads: int = 1,
    clock=time.process_time,
    backend=None,
) -> BenchReport:
    """Median CPU time per method over ``repeats`` runs (after a warm-up).

    Named methods: ``tv``/``nlm``/``bm3d`` run the full despeckle pipeline with
    ``configs[name]``; ``cnn`` or ``cnn-<kind>`` runs network inference only
    with a pre-loaded ``checkpoints[name]``.  A ``(name, callable)`` pair times
    the callable.  A CNN row's PSNR is its mean per-frame PSNR against the
    conventional method its checkpoint imitates, when that method also ran.
    """
    from sonoct.homomorphic import despeckle
    from sonoct.trainer import infer

    if repeats < 3:
        raise ConfigurationError("at least 3 repeats are required")
    frames = [np.asarray(getattr(v, "data", v)) for v in volume]
    if not frames:
        raise ConfigurationError("empty volume")
    configs = dict(configs or {})
    checkpoints = dict(checkpoints or {})

    plan = []
    for m in methods:
        if isinstance(m, tuple):
            plan.append(m)
            continue
        if m in CONVENTIONAL:
            if m not in configs:
                raise ConfigurationError(f"no despeckle configuration for {m}")
            cfg = configs[m]
            plan.append((m, lambda vol, cfg=cfg: [despeckle(f, cfg, backend) for f in vol]))
        elif m == "cnn" or m.startswith("cnn-"):
            if m not in checkpoints:
                raise ConfigurationError(f"no checkpoint loaded for {m}")
            ck = checkpoints[m]
            plan.append((m, lambda vol, ck=ck: [infer(ck, f, backend) for f in vol]))
        else:
            raise ConfigurationError(f"unknown method {m!r}")

    rows, times, outputs = [], {}, {}
    for name, fn in plan:
        ts, out = time_method(fn, frames, repeats, clock)
        times[name] = ts
        outputs[name] = out
    for name, _ in plan:
        p = None
        if name in checkpoints:
            kind = checkpoints[name].extra.get("target_kind")
            if kind in outputs and outputs[name] is not None:
                p = mean_psnr(outputs[name], outputs[kind])
        rows.append(BenchRow(name, float(statistics.median(times[name])), threads, p))
    shape = (len(frames),) + tuple(frames[0].shape)
    return BenchReport(rows, shape, environment_string(threads), times)
