import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from nestcut.cli import main
from nestcut.volume import FAT, LNP, PBS, LabelVolume, dice, read_labels, read_volume, write_labels

SMALL = {"dims": [40, 40, 40], "lnp_semi_axes": [11.0, 10.0, 9.0], "fat_thickness": 4.0, "a_fat": 85.0,
         "rng_seed": 5}


@pytest.fixture(scope="module")
def phantom_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("ph")
    spec = d / "spec.json"
    spec.write_text(json.dumps(SMALL))
    assert main(["phantom", str(spec), str(d / "vol.ncvol"), str(d / "truth.ncvol")]) == 0
    return d


@pytest.fixture(scope="module")
def segmented(phantom_files):
    d = phantom_files
    trace = d / "trace"
    out = subprocess.run(
        [sys.executable, "-m", "nestcut", "segment", str(d / "vol.ncvol"), str(d / "labels.ncvol"),
         "--trace-dir", str(trace), "--dump-profiles", str(d / "profiles.txt")],
        capture_output=True, text=True, check=False,
    )
    return d, out


def test_segment_report_and_outputs(segmented):
    d, out = segmented
    assert out.returncode == 0, out.stderr
    report = json.loads(out.stdout)
    assert set(report) == {"selected_k", "fat_ratios", "runtime_seconds", "downsample_factor", "stage_seconds"}
    assert 1 <= len(report["selected_k"]) <= 3
    assert read_labels(d / "labels.ncvol").dims == (40, 40, 40)
    assert (d / "profiles.txt").read_text().startswith("# depth class mean std\n")


def test_trace_dir_has_one_file_per_stage(segmented):
    d, _ = segmented
    names = sorted(p.name for p in (d / "trace").iterdir())
    assert names == [
        "01_ngc_initial.ncvol", "02_ln_mask.ncvol", "03_round1_fat_counts.ncvol", "04_round1_confident.ncvol",
        "05_round2_confident.ncvol", "06_vote_map.ncvol", "07_seeds.ncvol", "08_refined.ncvol", "trace.json",
    ]


def test_evaluate_matches_library(segmented, capsys):
    d, _ = segmented
    assert main(["evaluate", str(d / "labels.ncvol"), str(d / "truth.ncvol")]) == 0
    report = json.loads(capsys.readouterr().out)
    a = read_labels(d / "labels.ncvol").labels
    b = read_labels(d / "truth.ncvol").labels
    assert report["dsc_lnp"] == dice(a == LNP, b == LNP)
    assert report["dsc_fat"] == dice(a == FAT, b == FAT)


def test_evaluate_identical_and_swapped(tmp_path, capsys):
    lab = np.zeros((4, 4, 4), np.uint8)
    lab[1:3, 1:3, 1:3] = FAT
    lab[1, 1, 1] = LNP
    write_labels(tmp_path / "a.ncvol", LabelVolume(lab))
    swapped = np.where(lab == FAT, LNP, np.where(lab == LNP, FAT, PBS)).astype(np.uint8)
    write_labels(tmp_path / "b.ncvol", LabelVolume(swapped))
    assert main(["evaluate", str(tmp_path / "a.ncvol"), str(tmp_path / "a.ncvol")]) == 0
    assert json.loads(capsys.readouterr().out)["dsc_lnp"] == 1.0
    assert main(["evaluate", str(tmp_path / "a.ncvol"), str(tmp_path / "b.ncvol")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["dsc_lnp"] == 0.0 and rep["dsc_fat"] == 0.0 and rep["dsc_pbs"] == 1.0


def test_phantom_default_and_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("NESTCUT_SEED", "12")
    for tag in ("a", "b"):
        assert main(["phantom", str(tmp_path / f"v{tag}.ncvol"), str(tmp_path / f"t{tag}.ncvol")]) == 0
    assert (tmp_path / "va.ncvol").read_bytes() == (tmp_path / "vb.ncvol").read_bytes()
    assert read_volume(tmp_path / "va.ncvol").dims == (64, 64, 64)


def test_phantom_invalid_geometry(tmp_path, capsys):
    spec = tmp_path / "bad.json"
    spec.write_text(json.dumps({"dims": [20, 20, 20], "lnp_semi_axes": [12, 5, 5]}))
    assert main(["phantom", str(spec), str(tmp_path / "v"), str(tmp_path / "t")]) == 2
    assert "margin" in capsys.readouterr().err


def test_missing_file_and_bad_config(tmp_path, capsys):
    assert main(["segment", str(tmp_path / "nope.ncvol"), str(tmp_path / "o.ncvol")]) == 2
    assert "nope.ncvol" in capsys.readouterr().err
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"unknown_key": 1}))
    vol = tmp_path / "v.ncvol"
    main(["phantom", str(vol), str(tmp_path / "t.ncvol")])
    assert main(["segment", str(vol), str(tmp_path / "o.ncvol"), "--config", str(cfg)]) == 2
    assert "unknown_key" in capsys.readouterr().err
    assert main([]) == 2


def test_stage_failure_exit_code(tmp_path, capsys):
    from nestcut.volume import IntensityVolume, write_volume

    rng = np.random.default_rng(0)
    write_volume(tmp_path / "bath.ncvol", IntensityVolume(5.0 * rng.rayleigh(0.8, (20, 20, 20))))
    assert main(["segment", str(tmp_path / "bath.ncvol"), str(tmp_path / "o.ncvol")]) == 1
    assert "stage" in capsys.readouterr().err


def test_render_labels_and_intensity(phantom_files, tmp_path):
    d = phantom_files
    assert main(["render", str(d / "truth.ncvol"), "2", "20", str(tmp_path / "l.png")]) == 0
    img = np.asarray(Image.open(tmp_path / "l.png"))
    colours = {tuple(c) for c in img.reshape(-1, 3)}
    assert colours <= {(0, 0, 0), (230, 105, 180), (255, 255, 255)} and len(colours) == 3
    assert main(["render", str(d / "vol.ncvol"), "0", "5", str(tmp_path / "g.png")]) == 0
    grey = np.asarray(Image.open(tmp_path / "g.png"))
    assert np.all(grey[..., 0] == grey[..., 1]) and grey.min() == 0 and grey.max() == 255
    assert main(["render", str(d / "vol.ncvol"), "0", "99", str(tmp_path / "x.png")]) == 2
