"""Command-line entry point: ``sonoct <subcommand> ...``.

Every subcommand writes only under its ``-o`` target (for single-file
outputs that includes the ``<file>.json`` manifest written next to it).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

SUBCOMMANDS = ("ingest", "make-phantom", "acoustic-map", "simulate", "demod", "despeckle", "denoise",
               "build-dataset", "train", "infer", "bench", "reproduce")

log = logging.getLogger("sonoct")


class UsageError(Exception):
    pass


def _hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"no such file or directory: {p}")


def _manifest(args, inputs=(), **extra) -> dict:
    from sonoct import __version__

    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    m = {
        "artifact": f"sonoct {args.command}",
        "version": __version__,
        "seed": args.seed,
        "threads": args.threads,
        "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()},
        "inputs": {str(p): _hash_file(p) for p in inputs if Path(p).is_file()},
    }
    m.update(extra)
    return m


def _write_manifest(path: Path, manifest: dict) -> None:
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _load_slice(path):
    """HU grid from a ``.pfm`` (spacing from its manifest when present) or a DICOM file."""
    from sonoct.dicom import DEFAULT_SPACING_MM, HounsfieldSlice, read_slice
    from sonoct.grid import RealGrid, read_pfm

    path = Path(path)
    if path.suffix.lower() == ".pfm":
        hu = read_pfm(path)
        spacing = DEFAULT_SPACING_MM
        side = _sidecar(path)
        if side.exists():
            spacing = tuple(json.loads(side.read_text()).get("spacing_mm") or spacing)
        return HounsfieldSlice(RealGrid(hu, spacing), spacing, str(path))
    return read_slice(path.read_bytes(), str(path))


def _load_iq(path):
    from sonoct.grid import read_c64

    data, meta = read_c64(path)
    return data, meta


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args):
    from sonoct.dicom import parse_dicom, read_slice
    from sonoct.grid import write_pfm

    _require(args.input)
    data = Path(args.input).read_bytes()
    header, _ = parse_dicom(data)
    sl = read_slice(data, str(args.input))
    write_pfm(args.output, sl.hu)
    meta = _manifest(args, [args.input], spacing_mm=list(sl.pixel_spacing_mm), rows=header.rows,
                     cols=header.cols, rescale_slope=header.rescale_slope,
                     rescale_intercept=header.rescale_intercept, transfer_syntax=header.transfer_syntax)
    _write_manifest(Path(args.meta) if args.meta else _sidecar(args.output), meta)


def cmd_make_phantom(args):
    from sonoct.dicom import make_phantom
    from sonoct.grid import write_pfm

    sl = make_phantom(args.kind, args.size, args.size, args.seed)
    write_pfm(args.output, sl.hu)
    _write_manifest(_sidecar(args.output), _manifest(args, spacing_mm=list(sl.pixel_spacing_mm),
                                                     source_id=sl.source_id))


def cmd_acoustic_map(args):
    from sonoct.acoustic import PROPERTIES, hu_to_acoustic
    from sonoct.grid import write_pfm

    _require(args.input)
    sl = _load_slice(args.input)
    amap = hu_to_acoustic(sl)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for name in PROPERTIES:
        write_pfm(out / f"{name}.pfm", getattr(amap, name))
    _write_manifest(out / "manifest.json", _manifest(args, [args.input], spacing_mm=list(amap.spacing_mm)))


def _load_map(path):
    from sonoct.acoustic import PROPERTIES, AcousticMap
    from sonoct.grid import read_pfm

    path = Path(path)
    _require(*(path / f"{n}.pfm" for n in PROPERTIES))
    spacing = (0.7, 0.7)
    if (path / "manifest.json").exists():
        spacing = tuple(json.loads((path / "manifest.json").read_text()).get("spacing_mm", spacing))
    return AcousticMap(**{n: read_pfm(path / f"{n}.pfm") for n in PROPERTIES}, spacing_mm=spacing)


def _load_probe(path):
    from sonoct.sim import ProbeSpec

    if path is None:
        return ProbeSpec()
    _require(path)
    return ProbeSpec.from_dict(json.loads(Path(path).read_text()))


def cmd_simulate(args):
    from sonoct.grid import write_pfm
    from sonoct.sim import simulate_rf

    _require(args.input, args.probe)
    amap = _load_map(args.input)
    probe = _load_probe(args.probe)
    scan = simulate_rf(amap, probe, args.seed)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_pfm(out / "reflectivity.pfm", scan.reflectivity)
    write_pfm(out / "transmission.pfm", scan.transmission)
    write_pfm(out / "rf.pfm", scan.rf)
    inputs = [p for p in Path(args.input).glob("*.pfm")] + ([args.probe] if args.probe else [])
    _write_manifest(out / "manifest.json", _manifest(args, inputs, probe=probe.to_dict(),
                                                     spacing_mm=list(amap.spacing_mm)))


def cmd_demod(args):
    from sonoct.grid import read_pfm, write_c64
    from sonoct.iq import demodulate

    _require(args.input)
    rf = read_pfm(args.input)
    iq = demodulate(rf, args.carrier)
    man = _manifest(args, [args.input])
    write_c64(args.output, iq.data, None, carrier_cycles_per_sample=args.carrier,
              manifest={k: man[k] for k in ("artifact", "version", "seed", "inputs")})


def _checkpoint_dir(path) -> Path:
    """A checkpoint directory, or a training output directory (its ``best`` checkpoint)."""
    _require(path)
    path = Path(path)
    if not (path / "weights.bin").exists() and (path / "best" / "weights.bin").exists():
        path = path / "best"
    return path


def _load_despeckle_config(path):
    from sonoct.homomorphic import DespeckleConfig

    if path is None:
        from sonoct.reproduce import despeckle_configs

        return despeckle_configs()["tv"]
    _require(path)
    return DespeckleConfig.from_dict(json.loads(Path(path).read_text()))


def cmd_despeckle(args):
    from sonoct.grid import write_pfm
    from sonoct.homomorphic import despeckle

    _require(args.input, args.config)
    iq, _ = _load_iq(args.input)
    cfg = _load_despeckle_config(args.config)
    out = despeckle(iq, cfg)
    write_pfm(args.output, out)
    _write_manifest(_sidecar(args.output), _manifest(args, [p for p in (args.input, args.config) if p],
                                                     despeckle=cfg.to_dict()))


def cmd_denoise(args):
    from sonoct.denoisers import Bm3dParams, NlmParams, TvParams
    from sonoct.grid import read_pfm, write_pfm
    from sonoct.homomorphic import denoise, denoiser_to_dict

    _require(args.input)
    img = read_pfm(args.input)
    if args.kind == "tv":
        d = TvParams(lam=args.lam, iters=args.iters)
    elif args.kind == "nlm":
        d = NlmParams(args.patch_radius, args.search_radius, args.h)
    else:
        d = Bm3dParams(sigma=args.sigma)
    write_pfm(args.output, denoise(img, d))
    _write_manifest(_sidecar(args.output), _manifest(args, [args.input], denoiser=denoiser_to_dict(d)))


def cmd_build_dataset(args):
    from sonoct.reproduce import despeckle_configs, phantom_set
    from sonoct.trainer import build_dataset

    probe = _load_probe(args.probe)
    slices = phantom_set(args.phantoms, args.size, args.seed)
    target = "ct" if args.target == "ct" else despeckle_configs(probe)[args.target]
    if args.config:
        _require(args.config)
        target = _load_despeckle_config(args.config)
    ds = build_dataset(slices, probe, target, args.patch, args.stride, args.seed, args.val_fraction,
                       workers=args.threads)
    ds.save(args.output)
    _write_manifest(Path(args.output) / "manifest.json", _manifest(args, [], pairs=len(ds), norm_stats=ds.norm_stats))
    log.info("%d pairs (%d validation) written to %s", len(ds), len(ds.val_index), args.output)


def cmd_train(args):
    from sonoct.cnn import NetworkSpec, load_checkpoint
    from sonoct.trainer import PairedDataset, TrainConfig, train

    _require(args.dataset, args.resume)
    ds = PairedDataset.load(args.dataset)
    spec = NetworkSpec.paper(width=args.width)
    cfg = TrainConfig(batch_size=args.batch, iterations=args.iters, lr=args.lr, seed=args.seed,
                      checkpoint_every=args.checkpoint_every, eval_every=args.eval_every)
    resume = load_checkpoint(args.resume) if args.resume else None
    res = train(spec, ds, cfg, out_dir=args.output, resume=resume)
    inputs = [Path(args.dataset) / "pairs.npz", Path(args.dataset) / "dataset.json"]
    _write_manifest(Path(args.output) / "manifest.json",
                    _manifest(args, inputs, train=cfg.to_dict(), final=list(res.curve[-1])))


def cmd_infer(args):
    from sonoct.cnn import load_checkpoint
    from sonoct.grid import write_pfm
    from sonoct.trainer import infer

    _require(args.input)
    ckpt = _checkpoint_dir(args.ckpt)
    ck = load_checkpoint(ckpt)
    iq, _ = _load_iq(args.input)
    write_pfm(args.output, infer(ck, iq))
    _write_manifest(_sidecar(args.output), _manifest(args, [args.input, ckpt / "weights.bin"]))


def cmd_bench(args):
    from sonoct.bench import run_bench
    from sonoct.cnn import load_checkpoint
    from sonoct.reproduce import despeckle_configs, phantom_set
    from sonoct.trainer import simulate_iq
    from sonoct.sim import ProbeSpec

    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    checkpoints = {}
    for m in methods:
        if m == "cnn" or m.startswith("cnn-"):
            if not args.ckpt:
                raise UsageError(f"method {m} needs --ckpt")
            checkpoints[m] = load_checkpoint(_checkpoint_dir(args.ckpt))
    if args.volume:
        _require(args.volume)
        files = sorted(Path(args.volume).glob("*.c64"))
        if not files:
            raise FileNotFoundError(f"no .c64 frames in {args.volume}")
        frames = [_load_iq(f)[0] for f in files]
    else:
        probe = ProbeSpec()
        slices = phantom_set(args.frames, args.size, args.seed)
        frames = [simulate_iq(s, probe, args.seed + i).data for i, s in enumerate(slices)]
    report = run_bench(frames, methods, args.repeats, despeckle_configs(), checkpoints, args.threads)
    out = Path(args.output)
    out.write_text(report.to_csv())
    out.with_suffix(".txt").write_text(report.table())
    print(report.table(), end="")


def cmd_reproduce(args):
    from sonoct.reproduce import run

    checks = run(args.output, args.scale, args.seed, args.threads, log=lambda s: print(s, flush=True))
    failed = [c for c in checks if c.status == "fail"]
    for c in failed:
        print(f"FAILED criterion {c.criterion} ({c.name}): {c.detail}", file=sys.stderr)
    return 1 if failed else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root random seed (default 0)")
    common.add_argument("--threads", type=int, default=1, help="worker/BLAS thread count (default 1)")
    common.add_argument("--scale", choices=("tiny", "small", "paper"), default="tiny",
                        help="dataset/iteration size preset (default tiny)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sonoct", description="CT-derived ultrasound simulation, despeckling "
                                     "and despeckling/CT-regression networks.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    p = add("ingest", cmd_ingest, "DICOM slice -> HU PFM")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--meta", help="metadata JSON path (default <output>.json)")

    p = add("make-phantom", cmd_make_phantom, "synthetic HU phantom -> PFM")
    p.add_argument("--kind", choices=("layered", "circles", "abdomen-like"), default="layered")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("-o", "--output", required=True)

    p = add("acoustic-map", cmd_acoustic_map, "HU slice -> acoustic property maps")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)

    p = add("simulate", cmd_simulate, "acoustic map -> reflectivity, transmission, RF")
    p.add_argument("input", help="acoustic map directory")
    p.add_argument("--probe", help="probe JSON (ProbeSpec fields)")
    p.add_argument("-o", "--output", required=True)

    p = add("demod", cmd_demod, "RF PFM -> IQ .c64")
    p.add_argument("input")
    p.add_argument("--carrier", type=float, default=0.25, help="carrier in cycles/sample")
    p.add_argument("-o", "--output", required=True)

    p = add("despeckle", cmd_despeckle, "IQ .c64 -> despeckled envelope PFM")
    p.add_argument("input")
    p.add_argument("--config", help="despeckle JSON (default: TV pipeline)")
    p.add_argument("-o", "--output", required=True)

    p = add("denoise", cmd_denoise, "run one denoiser on a PFM image")
    p.add_argument("input")
    p.add_argument("--kind", choices=("tv", "nlm", "bm3d"), required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.3)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--patch-radius", type=int, default=3)
    p.add_argument("--search-radius", type=int, default=10)
    p.add_argument("--h", type=float, default=0.8)
    p.add_argument("--sigma", type=float, default=None, help="BM3D noise level (default: estimated)")
    p.add_argument("-o", "--output", required=True)

    p = add("build-dataset", cmd_build_dataset, "phantoms -> paired IQ/target patch dataset")
    p.add_argument("--phantoms", type=int, default=40)
    p.add_argument("--target", choices=("tv", "nlm", "bm3d", "ct"), default="tv")
    p.add_argument("--config", help="despeckle JSON overriding the target's default")
    p.add_argument("--probe", help="probe JSON")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--patch", type=int, default=64)
    p.add_argument("--stride", type=int, default=64)
    p.add_argument("--val-fraction", type=float, default=0.05)
    p.add_argument("-o", "--out", "--output", dest="output", required=True)

    p = add("train", cmd_train, "train a network on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--batch", type=int, default=6)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.add_argument("--eval-every", type=int, default=250)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("-o", "--out", "--output", dest="output", required=True)

    p = add("infer", cmd_infer, "network inference on an IQ frame")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("-o", "--output", required=True)

    p = add("bench", cmd_bench, "run-time/PSNR benchmark")
    p.add_argument("--volume", help="directory of .c64 frames (default: simulate phantoms)")
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--methods", default="tv,nlm,bm3d")
    p.add_argument("--ckpt", help="checkpoint directory for the cnn method")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("-o", "--output", required=True, help="report CSV (a .txt table is written alongside)")

    p = add("reproduce", cmd_reproduce, "full pipeline with acceptance checks")
    p.add_argument("-o", "--output", default="report")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # only effective when numpy has not been imported yet (console-script use)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        rc = args.func(args)
    except FileNotFoundError as exc:
        print(f"sonoct {args.command}: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"sonoct {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"sonoct {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
