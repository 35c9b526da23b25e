import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from facebound import cli
from facebound import datapipe as dp
from facebound import geometry as geo
from facebound import stage1 as s1
from facebound import stage2 as s2
from facebound.evalsuite import validate_report
from facebound.models import file_digest

from raster_oracle import raster_oracle

GOLDEN = Path(__file__).parent / "fixtures" / "golden"
SMALL = ["--set", "ch=4", "--set", "z_dim=16", "--set", "c_b=8", "--set", "d_id=8", "--set", "batch_size=4",
         "--set", "ckpt_every=2", "--resolution", "32"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# -- prepare ------------------------------------------------------------------------------

def test_prepare_matches_golden_files(tmp_path, capsys):
    code, out, _ = run(capsys, "prepare", "--manifest", GOLDEN / "manifest.jsonl", "--out", tmp_path, "--resolution", 64)
    assert code == 0 and "rendered 3" in out
    produced = sorted((tmp_path / "boundaries").glob("*.png"))
    expected = sorted((GOLDEN / "expected").glob("*.png"))
    assert [p.name for p in produced] == [p.name for p in expected]
    for a, b in zip(produced, expected):
        assert a.read_bytes() == b.read_bytes()
    index = [json.loads(line) for line in (tmp_path / "index.jsonl").read_text().splitlines()]
    assert [r["sha256"] for r in index] == [file_digest(p) for p in expected]


def test_golden_files_equal_reference_rasterizer():
    records, _ = dp.load_manifest(GOLDEN / "manifest.jsonl")
    for rec, png in zip(records, sorted((GOLDEN / "expected").glob("*.png"))):
        lms, _ = dp.record_landmarks(rec)
        ref = dp.boundary_to_uint8(raster_oracle(lms.points, (64, 64)))
        assert np.array_equal(np.asarray(Image.open(png)), ref)


def test_prepare_empty_manifest(tmp_path, capsys):
    (tmp_path / "m.jsonl").write_text("")
    code, _, _ = run(capsys, "prepare", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "o")
    assert code == 0 and (tmp_path / "o" / "index.jsonl").read_text() == ""


def test_prepare_unreadable_landmark_file(tmp_path, capsys):
    shutil.copytree(GOLDEN, tmp_path / "g")
    (tmp_path / "g" / "landmarks" / "id000_front_01.txt").write_text("# x y\n1 2\nbroken\n")
    code, _, err = run(capsys, "prepare", "--manifest", tmp_path / "g" / "manifest.jsonl", "--out", tmp_path / "o")
    assert code == 3 and "id000_front_01.txt" in err


def test_usage_and_config_errors(tmp_path, capsys, monkeypatch):
    code, _, err = run(capsys, "prepare", "--manifest", GOLDEN / "manifest.jsonl", "--set", "bogus=1")
    assert code == 2 and "bogus" in err
    code, _, _ = run(capsys, "prepare", "--manifest", GOLDEN / "manifest.jsonl", "--resolution", 48, "--out", tmp_path)
    assert code == 2
    code, _, _ = run(capsys, "prepare", "--out", tmp_path)
    assert code == 2
    monkeypatch.setenv("BM_NUM_WORKERS", "many")
    code, _, _ = run(capsys, "train", "--phase", "estimators", "--manifest", GOLDEN / "manifest.jsonl",
                     "--out", tmp_path)
    assert code == 2
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("# comment\nresolution = 32\nnot a pair\n")
    code, _, err = run(capsys, "prepare", "--config", cfg_file, "--manifest", GOLDEN / "manifest.jsonl")
    assert code == 2 and "c.cfg:3" in err


def test_make_fixture(tmp_path, capsys):
    code, out, _ = run(capsys, "make-fixture", "--out", tmp_path, "--identities", 3, "--per-illumination", 2,
                       "--image-size", 32, "--test-identities", 1)
    assert code == 0 and "train=" in out
    _, counts = dp.load_manifest(tmp_path / "manifest.jsonl")
    assert counts == {"train": 8, "val": 0, "test": 4}


# -- training / sweep / eval ---------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    manifest = dp.make_toy_fixture(root / "fx", n_identities=4, per_illumination=5, image_size=64, n_test_identities=2)
    common = [*SMALL, "--manifest", manifest, "--out", root / "run", "--steps", 4]
    logs = {}
    for phase in ("estimators", "boundary", "proxy", "synth"):
        code = cli.main([str(a) for a in ("train", "--phase", phase, *common)])
        assert code == 0
    return root, manifest, common, logs


def test_train_echoes_config_and_hash(pipeline, capsys):
    root, manifest, common, _ = pipeline
    code, out, _ = run(capsys, "train", "--phase", "estimators", *common)
    assert code == 0
    assert "lambda1=0.1 alpha=(0.01, 50, 0.02) m=7 lr=0.0002" in out
    digest = out.strip().splitlines()[-1].split("sha256=")[1]
    assert digest == file_digest(root / "run" / "checkpoints" / "estimators.pt")


def test_same_seed_same_checkpoint_hash(pipeline, tmp_path, capsys):
    root, manifest, _, _ = pipeline
    digests = []
    for k in range(2):
        code, out, _ = run(capsys, "train", "--phase", "estimators", *SMALL, "--manifest", manifest,
                           "--out", tmp_path / str(k), "--steps", 3, "--seed", 0)
        assert code == 0
        digests.append(out.strip().splitlines()[-1].split("sha256=")[1])
    assert digests[0] == digests[1]


def test_synth_before_boundary_is_dependency_error(pipeline, tmp_path, capsys):
    _, manifest, _, _ = pipeline
    code, _, err = run(capsys, "train", "--phase", "synth", *SMALL, "--manifest", manifest, "--out", tmp_path)
    assert code == 4 and "proxy" in err
    run(capsys, "train", "--phase", "proxy", *SMALL, "--manifest", manifest, "--out", tmp_path, "--steps", 1)
    code, _, err = run(capsys, "train", "--phase", "synth", *SMALL, "--manifest", manifest, "--out", tmp_path)
    assert code == 4 and "stage1.pt" in err and "boundary" in err


def test_sweep_grid(pipeline, capsys):
    root, manifest, common, _ = pipeline
    rec = dp.load_manifest(manifest)[0][0]
    out_dir = root / "run"
    code, out, _ = run(capsys, "sweep", "--out", out_dir, "--image", rec.image_path, "--landmarks", rec.landmarks_path,
                       "--grid", "yaw=18.75:56.25:3.75")
    assert code == 0 and "11 tiles" in out
    meta = json.loads((out_dir / "sweep.json").read_text())
    assert (meta["rows"], meta["cols"]) == (1, 11)
    yaws = [t["pose"][0] * 90 for t in meta["tiles"]]
    np.testing.assert_allclose(yaws, np.arange(18.75, 56.26, 3.75))
    grid = np.asarray(Image.open(out_dir / "sweep.png"))
    assert grid.shape == (32, 11 * 32, 3)


def test_sweep_single_tile_equals_manipulate(pipeline, tmp_path, capsys):
    root, manifest, _, _ = pipeline
    rec = dp.load_manifest(manifest)[0][0]
    ck = root / "run" / "checkpoints"
    shutil.copytree(ck, tmp_path / "checkpoints")
    code, _, _ = run(capsys, "sweep", "--out", tmp_path, "--image", rec.image_path, "--landmarks", rec.landmarks_path,
                     "--grid", "yaw=20", "--au", "AU25=0.5")
    assert code == 0
    tile = np.asarray(Image.open(tmp_path / "sweep.png"))
    lms, _ = dp.record_landmarks(rec)
    p = geo.pose_from_landmarks(lms)
    p[0] = 20 / 90
    e = np.zeros(17)
    e[dp.AU_INDEX["AU25"]] = 0.5
    ref = s2.manipulate(s1.BoundaryPredictor(ck / "stage1.pt"), s2.Synthesizer(ck / "synth.pt"),
                        dp.decode_and_normalize(rec.image_path, 32), lms, p, e)
    assert np.array_equal(tile, dp.to_uint8(ref))


def test_sweep_rejects_bad_grids(pipeline, capsys):
    root, manifest, _, _ = pipeline
    rec = dp.load_manifest(manifest)[0][0]
    for grid in ("yaw=10:0:1", "tilt=0:1:1", "yaw=a:b"):
        code, _, _ = run(capsys, "sweep", "--out", root / "run", "--image", rec.image_path,
                         "--landmarks", rec.landmarks_path, "--grid", grid)
        assert code == 2


@pytest.mark.parametrize("metric", ["fid", "rank1"])
def test_eval_reports(pipeline, metric, capsys):
    root, _, common, _ = pipeline
    code, out, _ = run(capsys, "eval", "--metric", metric, *common)
    assert code == 0
    rep = json.loads((root / "run" / f"{metric}_report.json").read_text())
    validate_report(rep)
    assert rep["metric"] == metric
    if metric == "rank1":
        assert set(rep["buckets"]) <= {"0", "±15", "±30", "±45"} and rep["n_gallery"] == 2


def test_eval_empty_split_is_data_error(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--metric", "fid", "--manifest", GOLDEN / "manifest.jsonl",
                       "--out", tmp_path, "--split", "val")
    assert code == 3 and "'val'" in err


def test_m_sweep_structure(pipeline, capsys):
    root, _, common, _ = pipeline
    common = [*common[:-2], "--steps", 1]
    code, out, _ = run(capsys, "eval", "--metric", "fid", *common, "--m-sweep", "5,6,7,8,9,10")
    assert code == 0
    reports = json.loads((root / "run" / "m_sweep_fid.json").read_text())
    assert sorted(reports, key=float) == ["5", "6", "7", "8", "9", "10"]
    for m, rep in reports.items():
        validate_report(rep)
        assert rep["margin_m"] == float(m)
        assert (root / "run" / "checkpoints" / f"synth_m{m}.pt").exists()
