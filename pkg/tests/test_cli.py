import filecmp
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sonoct.cli import SUBCOMMANDS, main
from sonoct.dicom import write_dicom
from sonoct.grid import read_c64, read_pfm

ENV = {**os.environ, "OMP_NUM_THREADS": "1"}


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "sonoct.cli", *args], capture_output=True, text=True, env=ENV)


def snapshot(root: Path):
    return {p for p in root.rglob("*") if p.is_file()}


class TestUsage:
    def test_help(self):
        r = run_cli("--help")
        assert r.returncode == 0 and "usage" in r.stdout
        for name in SUBCOMMANDS:
            assert name in r.stdout

    @pytest.mark.parametrize("name", SUBCOMMANDS)
    def test_subcommand_help(self, name, capsys):
        with pytest.raises(SystemExit) as e:
            main([name, "--help"])
        assert e.value.code == 0
        assert "--seed" in capsys.readouterr().out

    def test_missing_input(self, tmp_path):
        r = run_cli("simulate", str(tmp_path / "missing.pfm"), "-o", str(tmp_path / "out"))
        assert r.returncode == 2 and "missing.pfm" in r.stderr
        assert not (tmp_path / "out").exists()

    def test_unknown_subcommand(self):
        r = run_cli("frobnicate")
        assert r.returncode == 2 and "invalid choice" in r.stderr

    def test_cnn_bench_without_checkpoint(self, tmp_path):
        assert main(["bench", "--methods", "cnn", "-o", str(tmp_path / "r.csv")]) == 2


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def test_ingest(work):
    raw = np.random.default_rng(4).integers(0, 3000, (32, 32))
    (work / "ct.dcm").write_bytes(write_dicom(raw, spacing_mm=(0.5, 0.5)))
    before = snapshot(work)
    assert main(["ingest", "ct.dcm", "-o", "hu.pfm", "--seed", "5"]) == 0
    assert snapshot(work) - before == {work / "hu.pfm", work / "hu.pfm.json"}
    np.testing.assert_array_equal(read_pfm(work / "hu.pfm"), raw - 1024.0)
    meta = json.loads((work / "hu.pfm.json").read_text())
    assert meta["seed"] == 5 and meta["spacing_mm"] == [0.5, 0.5] and "ct.dcm" in meta["inputs"]


def test_signal_chain(work):
    """make-phantom -> acoustic-map -> simulate -> demod -> despeckle, each writing only under -o."""
    steps = [
        (["make-phantom", "--kind", "layered", "--size", "64", "--seed", "2", "-o", "ph.pfm"],
         {"ph.pfm", "ph.pfm.json"}),
        (["acoustic-map", "ph.pfm", "-o", "amap"], None),
        (["simulate", "amap", "--seed", "3", "-o", "scan"], None),
        (["demod", "scan/rf.pfm", "-o", "iq.c64"], {"iq.c64", "iq.c64.json"}),
        (["despeckle", "iq.c64", "-o", "tv.pfm"], {"tv.pfm", "tv.pfm.json"}),
        (["denoise", "tv.pfm", "--kind", "nlm", "--search-radius", "3", "-o", "nlm.pfm"], {"nlm.pfm", "nlm.pfm.json"}),
    ]
    for argv, expected in steps:
        before = snapshot(work)
        assert main(argv) == 0, argv
        new = {p.relative_to(work) for p in snapshot(work) - before}
        out = Path(argv[argv.index("-o") + 1])
        if expected is None:
            assert new and all(p.parts[0] == out.name for p in new)
            assert (work / out / "manifest.json").exists()
        else:
            assert {str(p) for p in new} == expected
    iq, meta = read_c64(work / "iq.c64")
    assert iq.shape == (64, 64) and np.iscomplexobj(iq)
    assert json.loads((work / "scan" / "manifest.json").read_text())["seed"] == 3
    assert read_pfm(work / "tv.pfm").min() >= 0


def test_simulate_is_seeded(work):
    main(["make-phantom", "--size", "32", "-o", "ph.pfm"])
    main(["acoustic-map", "ph.pfm", "-o", "amap"])
    for d in ("a", "b"):
        main(["simulate", "amap", "--seed", "9", "-o", d])
    assert filecmp.cmp(work / "a" / "rf.pfm", work / "b" / "rf.pfm", shallow=False)


def test_dataset_train_infer_bench(work):
    assert main(["build-dataset", "--phantoms", "2", "--size", "64", "--patch", "32", "--stride", "32",
                 "--target", "tv", "--val-fraction", "0.2", "-o", "ds"]) == 0
    man = json.loads((work / "ds" / "manifest.json").read_text())
    assert man["pairs"] >= 5 and man["config"]["target"] == "tv"
    assert main(["train", "--dataset", "ds", "--iters", "6", "--width", "2", "--eval-every", "3",
                 "--checkpoint-every", "3", "-o", "ck"]) == 0
    lines = (work / "ck" / "loss.csv").read_text().splitlines()
    assert lines[0] == "iteration,train_mse,val_mse" and len(lines) == 4
    assert main(["train", "--dataset", "ds", "--iters", "9", "--width", "2", "--resume", "ck/last",
                 "-o", "ck2"]) == 0
    from sonoct.cnn import load_checkpoint
    assert load_checkpoint(work / "ck2" / "last").step == 9

    main(["make-phantom", "--size", "32", "-o", "ph.pfm"])
    main(["acoustic-map", "ph.pfm", "-o", "amap"])
    main(["simulate", "amap", "-o", "scan"])
    main(["demod", "scan/rf.pfm", "-o", "iq.c64"])
    assert main(["infer", "--ckpt", "ck", "--input", "iq.c64", "-o", "out.pfm"]) == 0
    assert read_pfm(work / "out.pfm").shape == (32, 32)

    os.mkdir(work / "vol")
    os.replace(work / "iq.c64", work / "vol" / "f0.c64")
    os.replace(work / "iq.c64.json", work / "vol" / "f0.c64.json")
    assert main(["bench", "--volume", "vol", "--methods", "tv,cnn", "--ckpt", "ck", "-o", "r.csv"]) == 0
    text = (work / "r.csv").read_text()
    assert "volume_shape=1x32x32" in text and "\ncnn," in text
    assert (work / "r.txt").exists()


def test_train_missing_dataset(work):
    assert main(["train", "--dataset", "nope", "-o", "ck"]) == 2
    assert not (work / "ck").exists()


def _compare_trees(a: Path, b: Path):
    fa = {p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.relative_to(a).parts[0] != "timing"}
    fb = {p.relative_to(b) for p in b.rglob("*") if p.is_file() and p.relative_to(b).parts[0] != "timing"}
    assert fa == fb
    return [str(p) for p in sorted(fa) if (a / p).read_bytes() != (b / p).read_bytes()]


@pytest.mark.slow
def test_reproduce_tiny_is_deterministic(tmp_path):
    for d in ("r1", "r2"):
        r = run_cli("reproduce", "--scale", "tiny", "--seed", "1", "-o", str(tmp_path / d))
        assert r.returncode == 0, r.stderr
    assert _compare_trees(tmp_path / "r1", tmp_path / "r2") == []
    acc = (tmp_path / "r1" / "acceptance.txt").read_text()
    for c in (1, 3, 4):
        assert f"PASS] criterion {c}:" in acc
    for name in ("manifest.json", "table2.txt", "figures/fig1_tv.png", "figures/fig2_ct.png",
                 "checkpoints/tv/best/manifest.json", "timing/table1.txt"):
        assert (tmp_path / "r1" / name).exists()
    man = json.loads((tmp_path / "r1" / "manifest.json").read_text())
    assert man["seed"] == 1 and man["scale"] == "tiny" and len(man["stage_seeds"]) == 12
