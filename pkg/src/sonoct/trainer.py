"""Paired datasets (simulated IQ -> despeckled or CT target) and the training loop."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from sonoct.acoustic import hu_to_acoustic
from sonoct.bench import psnr
from sonoct.cnn import AdamState, Checkpoint, Network, NetworkSpec, adam_step, mse_loss, save_checkpoint
from sonoct.dicom import HU_MAX, HU_MIN, HounsfieldSlice
from sonoct.homomorphic import DespeckleConfig, despeckle, denoiser_to_dict
from sonoct.iq import demodulate
from sonoct.sim import ProbeSpec, simulate_rf

log = logging.getLogger(__name__)

TARGET_KINDS = ("tv", "nlm", "bm3d", "ct", "identity")
# patches whose target range is below this fraction of the slice's range are
# shadowed or empty and carry no usable signal
MIN_RANGE_FRACTION = 1e-3


class EmptyDatasetError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class PairedDataset:
    """Aligned ``(iq, target)`` patches.

    ``inputs`` is ``(n, p, p)`` complex, ``targets`` is ``(n, p, p)`` real;
    ``origins`` records ``(slice, top, left)`` for every pair and
    ``val_index`` the held-out pairs.  ``norm_stats`` come from the
    training split only.
    """

    inputs: np.ndarray
    targets: np.ndarray
    target_kind: str
    norm_stats: dict
    seed: int
    val_index: np.ndarray
    origins: np.ndarray
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.shape != self.targets.shape:
            raise ValueError(f"inputs {self.inputs.shape} and targets {self.targets.shape} are not aligned")
        if self.inputs.ndim != 3 or self.inputs.shape[1] % 4 or self.inputs.shape[2] % 4:
            raise ValueError("patches must be 2D with sides divisible by 4")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def train_index(self) -> np.ndarray:
        return np.setdiff1d(np.arange(len(self)), self.val_index)

    def subset(self, index) -> "PairedDataset":
        """Pairs at ``index`` with unchanged statistics, all marked as validation."""
        index = np.asarray(index, dtype=np.int64)
        return PairedDataset(self.inputs[index], self.targets[index], self.target_kind, dict(self.norm_stats),
                             self.seed, np.arange(len(index)), self.origins[index], dict(self.config))

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        np.savez(path / "pairs.npz", inputs=self.inputs, targets=self.targets,
                 val_index=self.val_index, origins=self.origins)
        meta = {"target_kind": self.target_kind, "norm_stats": self.norm_stats, "seed": self.seed,
                "pairs": len(self), "patch": list(self.inputs.shape[1:]), "config": self.config}
        (path / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "PairedDataset":
        path = Path(path)
        meta = json.loads((path / "dataset.json").read_text())
        with np.load(path / "pairs.npz") as z:
            return cls(z["inputs"], z["targets"], meta["target_kind"], meta["norm_stats"], meta["seed"],
                       z["val_index"], z["origins"], meta.get("config", {}))


def compute_norm_stats(inputs: np.ndarray, targets: np.ndarray) -> dict:
    def sd(a):
        s = float(a.std())
        return s if s > 0 else 1.0

    return {
        "input_mean": [float(inputs.real.mean()), float(inputs.imag.mean())],
        "input_std": [sd(inputs.real), sd(inputs.imag)],
        "target_mean": float(targets.mean()),
        "target_std": sd(targets),
    }


def normalize_inputs(iq: np.ndarray, stats: dict) -> np.ndarray:
    """``(n, h, w)`` complex -> ``(n, 2, h, w)`` standardised channels."""
    m, s = stats["input_mean"], stats["input_std"]
    return np.stack([(iq.real - m[0]) / s[0], (iq.imag - m[1]) / s[1]], axis=1)


def normalize_targets(t: np.ndarray, stats: dict) -> np.ndarray:
    return ((t - stats["target_mean"]) / stats["target_std"])[:, None]


def denormalize_targets(y: np.ndarray, stats: dict) -> np.ndarray:
    return y[:, 0] * stats["target_std"] + stats["target_mean"]


def ct_target(hu: np.ndarray) -> np.ndarray:
    """HU mapped linearly onto [0, 1] over the valid HU range."""
    return (np.asarray(hu, dtype=np.float64) - HU_MIN) / (HU_MAX - HU_MIN)


def slice_seeds(seed: int, n: int) -> List[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def simulate_iq(slice_: HounsfieldSlice, probe: ProbeSpec, seed: int):
    amap = hu_to_acoustic(slice_)
    scan = simulate_rf(amap, probe, seed)
    return demodulate(scan.rf, probe.carrier_cycles_per_sample)


def _slice_pair(args):
    slice_, probe, target, seed = args
    iq = simulate_iq(slice_, probe, seed)
    if target == "ct":
        tgt = ct_target(slice_.hu)
    else:
        tgt = despeckle(iq, target)
    return iq.data, tgt


def tile_origins(rows: int, cols: int, patch: int, stride: int) -> List[Tuple[int, int]]:
    return [(r, c) for r in range(0, rows - patch + 1, stride) for c in range(0, cols - patch + 1, stride)]


def build_dataset(
    slices: Sequence[HounsfieldSlice],
    probe: ProbeSpec,
    target: Union[DespeckleConfig, str],
    patch: int = 64,
    stride: int = 64,
    seed: int = 0,
    val_fraction: float = 0.05,
    min_range_fraction: float = MIN_RANGE_FRACTION,
    workers: int = 1,
) -> PairedDataset:
    """Simulate every slice, compute its target and tile both into aligned patches.

    ``target`` is a :class:`DespeckleConfig` or the string ``"ct"``.
    Patches whose target range is below ``min_range_fraction`` of the
    slice's target range (deep shadow, air) are skipped.
    """
    if patch < 4 or patch % 4:
        raise ValueError("patch size must be a positive multiple of 4")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not 0 <= val_fraction < 0.5:
        raise ValueError("val_fraction must lie in [0, 0.5)")
    if isinstance(target, str):
        if target != "ct":
            raise ValueError(f"unknown target {target!r}")
        kind = "ct"
    else:
        kind = denoiser_to_dict(target.denoiser)["kind"]
    seeds = slice_seeds(seed, len(slices))
    jobs = [(s, probe, target, sd) for s, sd in zip(slices, seeds)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_slice_pair, jobs))
    else:
        results = [_slice_pair(j) for j in jobs]

    inputs, targets, origins = [], [], []
    for i, (iq, tgt) in enumerate(results):
        full_range = float(tgt.max() - tgt.min())
        for r, c in tile_origins(iq.shape[0], iq.shape[1], patch, stride):
            t = tgt[r:r + patch, c:c + patch]
            if kind != "ct" and float(t.max() - t.min()) <= min_range_fraction * full_range:
                continue
            inputs.append(iq[r:r + patch, c:c + patch])
            targets.append(t)
            origins.append((i, r, c))
    if not inputs:
        raise EmptyDatasetError("no usable patches")
    inputs = np.stack(inputs)
    targets = np.stack(targets)
    n = len(inputs)
    n_val = int(round(val_fraction * n))
    if val_fraction > 0 and n >= 2:
        n_val = max(1, n_val)
    perm = np.random.default_rng(seed).permutation(n)
    val_index = np.sort(perm[:n_val])
    train_index = np.setdiff1d(np.arange(n), val_index)
    stats = compute_norm_stats(inputs[train_index], targets[train_index])
    config = {
        "probe": probe.to_dict(),
        "target": "ct" if kind == "ct" else target.to_dict(),
        "patch": patch,
        "stride": stride,
        "val_fraction": val_fraction,
        "min_range_fraction": min_range_fraction,
        "slices": [s.source_id for s in slices],
    }
    return PairedDataset(inputs, targets, kind, stats, seed, val_index, np.array(origins, dtype=np.int64), config)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 6
    iterations: int = 5000
    lr: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 1000
    val_fraction: float = 0.05
    eval_every: int = 250
    eval_pairs: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.val_fraction < 0.5:
            raise ValueError("val_fraction must lie in [0, 0.5)")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise ValueError("eval_every and checkpoint_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def batch_indices(train_index: np.ndarray, batch: int, seed: int, it: int) -> np.ndarray:
    """Indices for iteration ``it`` (0-based).

    Batches walk an endless sequence of per-epoch permutations, each drawn
    from ``(seed, epoch)``, so any iteration can be reproduced on resume.
    """
    n = len(train_index)
    start = it * batch
    out = []
    while len(out) < batch:
        epoch, pos = divmod(start + len(out), n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch - len(out), n - pos)
        out.extend(perm[pos:pos + take])
    return train_index[np.array(out)]


def _mse_on(net: Network, x: np.ndarray, t: np.ndarray, batch: int = 16) -> float:
    if len(x) == 0:
        return float("nan")
    y = net.predict(x, batch)
    return float(np.mean((y - t) ** 2))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curve: List[Tuple[int, float, float]]
    best: Optional[Checkpoint] = None


def train(spec: NetworkSpec, data: PairedDataset, cfg: TrainConfig, out_dir=None,
          resume: Optional[Checkpoint] = None) -> TrainResult:
    """Adam on the normalised MSE.

    The loss curve holds ``(iteration, train_mse, val_mse)`` rows evaluated at
    iteration 0, every ``eval_every`` iterations and at the end, over fixed
    subsets of at most ``eval_pairs`` pairs per split.  With ``out_dir`` the
    curve goes to ``loss.csv`` and checkpoints to ``step_<n>/``, ``last/`` and
    ``best/`` (lowest validation MSE).
    """
    train_index = data.train_index
    if len(train_index) == 0:
        raise EmptyDatasetError("dataset has no training pairs")
    stats = data.norm_stats
    x_all = normalize_inputs(data.inputs, stats)
    t_all = normalize_targets(data.targets, stats)
    ev_train = train_index[:cfg.eval_pairs]
    ev_val = data.val_index[:cfg.eval_pairs]
    extra = {"target_kind": data.target_kind, "train_config": cfg.to_dict()}

    if resume is not None:
        if resume.net.spec != spec:
            raise ValueError("checkpoint topology does not match the requested network")
        net = Network(spec, resume.net.params)
        adam = resume.adam if resume.adam is not None else AdamState.zeros(spec.num_params, cfg.lr)
    else:
        net = Network.initialize(spec, cfg.seed)
        adam = AdamState.zeros(spec.num_params, cfg.lr)
    start = adam.step
    out = Path(out_dir) if out_dir is not None else None

    def snapshot():
        return Checkpoint(Network(spec, net.params), adam, dict(stats), cfg.seed, dict(extra))

    def evaluate_now(it):
        row = (it, _mse_on(net, x_all[ev_train], t_all[ev_train]), _mse_on(net, x_all[ev_val], t_all[ev_val]))
        curve.append(row)
        log.info("iter %d train_mse %.6g val_mse %.6g", *row)
        return row

    curve: List[Tuple[int, float, float]] = []
    row = evaluate_now(start)
    best_val = row[2] if np.isfinite(row[2]) else row[1]
    best = snapshot()
    for it in range(start, cfg.iterations):
        idx = batch_indices(train_index, cfg.batch_size, cfg.seed, it)
        y, cache = net.forward(x_all[idx])
        loss, grad = mse_loss(y, t_all[idx])
        if not np.isfinite(loss):
            peak = max((float(np.max(np.abs(r[2]))) for r in cache.records if r[2] is not None), default=0.0)
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it}, batch {idx.tolist()}, max activation {peak:.3g}")
        grads, _ = net.backward(cache, grad)
        params, adam = adam_step(net.params, grads, adam)
        net.set_params(params)
        done = it + 1
        if done % cfg.eval_every == 0 or done == cfg.iterations:
            row = evaluate_now(done)
            score = row[2] if np.isfinite(row[2]) else row[1]
            if score < best_val:
                best_val = score
                best = snapshot()
        if out is not None and done % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"step_{done}", snapshot())
    final = snapshot()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "last", final)
        save_checkpoint(out / "best", best)
        write_loss_curve(out / "loss.csv", curve)
    return TrainResult(final, curve, best)


def write_loss_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "train_mse", "val_mse"])
        for it, tr, va in curve:
            w.writerow([it, repr(tr), repr(va)])


def read_loss_curve(path) -> List[Tuple[int, float, float]]:
    with open(path, newline="") as fh:
        return [(int(r["iteration"]), float(r["train_mse"]), float(r["val_mse"])) for r in csv.DictReader(fh)]


def infer(ckpt: Checkpoint, iq: np.ndarray, backend=None) -> np.ndarray:
    """Network prediction in target units for ``(n, h, w)`` or ``(h, w)`` complex IQ.

    Runs the float32 inference path; agrees with the float64 training
    forward pass to about 1e-6 relative.
    """
    iq = np.asarray(iq)
    single = iq.ndim == 2
    if single:
        iq = iq[None]
    x = normalize_inputs(iq, ckpt.norm_stats)
    y = denormalize_targets(ckpt.net.infer(x, backend).astype(np.float64), ckpt.norm_stats)
    return y[0] if single else y


def evaluate(ckpt: Checkpoint, data: PairedDataset, index=None) -> Tuple[List[float], float]:
    """Per-pair PSNR (target units, peak = target range) and their mean.

    ``index`` defaults to the validation split (all pairs if it is empty).
    """
    if len(data) == 0:
        raise EmptyDatasetError("empty dataset")
    if index is None:
        index = data.val_index if len(data.val_index) else np.arange(len(data))
    index = np.asarray(index, dtype=np.int64)
    if len(index) == 0:
        raise EmptyDatasetError("nothing to evaluate")
    pred = infer(ckpt, data.inputs[index])
    scores = [psnr(p, t) for p, t in zip(pred, data.targets[index])]
    return scores, float(np.mean(scores))
