import os

import numpy as np
import pytest

from scenes import noisy_floor_scene, sphere_scene
from tilt_rectify import io_formats as fio
from tilt_rectify import losses
from tilt_rectify.cli import (
    EXIT_ABORT,
    EXIT_AUDIT,
    EXIT_OK,
    EXIT_USAGE,
    main,
    parse_bins,
    parse_vec3,
    worker_count,
)
from tilt_rectify.errors import AntipodalDrift


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    old = os.getcwd()
    os.chdir(root)
    try:
        assert main(["synth", "--count", "2", "--roll-deg", "20", "--pitch-deg", "10", "--seed", "3", "--out", "synth"]) == 0
        assert main(["build-q", "--normals", "synth/sample_0000_normals.png", "--out", "q.json"]) == 0
        depth, normals, K, mask, _ = noisy_floor_scene()
        os.makedirs("planes")
        fio.write_depth_map(depth, "planes/depth.png")
        fio.write_normal_map(normals, "planes/normals.png")
        fio.write_intrinsics(K, "planes/intrinsics.json")
        fio.write_mask(mask.mask, "planes/mask_0.png")
        fio.write_mask(np.zeros(K.shape, bool), "planes/mask_1.png")
        depth, normals, K, sphere = sphere_scene()
        os.makedirs("sphere")
        fio.write_depth_map(depth, "sphere/depth.png")
        fio.write_normal_map(normals, "sphere/normals.png")
        fio.write_intrinsics(K, "sphere/intrinsics.json")
        fio.write_mask(sphere.mask, "sphere/mask_0.png")
    finally:
        os.chdir(old)
    return root


@pytest.fixture
def cwd(work, monkeypatch):
    monkeypatch.chdir(work)
    return work


def manifest_item(i=0):
    return fio.read_json("synth/manifest.json")["items"][i]


def gravity_arg(item):
    return ",".join(repr(v) for v in item["g"])


def test_helpers(monkeypatch):
    np.testing.assert_array_equal(parse_vec3("0, 1, 0"), [0.0, 1.0, 0.0])
    assert (parse_bins("13x24").n_theta, parse_bins("13x24").n_phi) == (13, 24)
    monkeypatch.setenv("TILT_RECTIFY_THREADS", "3")
    assert worker_count() == 3


def test_synth_outputs(cwd):
    names = set(os.listdir("synth"))
    assert {"sample_0000_image.png", "sample_0001_normals.png", "intrinsics.json", "scene.json", "manifest.json"} <= names
    doc = fio.read_json("synth/manifest.json")
    assert doc["command"] == "synth" and doc["seed"] == 3 and len(doc["items"]) == 2
    item = doc["items"][0]
    assert abs(item["roll_deg"]) <= 20 and abs(item["pitch_deg"]) <= 10
    assert item["e_source"] == "analytic"
    assert set(doc["outputs"]) >= {"intrinsics.json", "sample_0000_image.png"}


def test_build_q_and_bad_bins(cwd):
    Q = fio.read_histogram("q.json")
    assert abs(Q.mass.sum() - 1) < 1e-12
    assert os.path.exists("q.json.manifest.json")
    assert main(["build-q", "--normals", "synth/*.png", "--bins", "19by36", "--out", "bad.json"]) == EXIT_USAGE
    assert main(["build-q", "--normals", "nothing/*.png", "--out", "bad.json"]) == EXIT_USAGE


def test_optimize_e(cwd):
    item = manifest_item()
    argv = ["optimize-e", "--normals", "synth/sample_0000_normals.png", "--image", "synth/sample_0000_image.png",
            "--gravity", gravity_arg(item), "--q", "q.json", "--intrinsics", "synth/intrinsics.json",
            "--sample-size", "800", "--out", "e.json"]
    assert main(argv) == EXIT_OK
    r = fio.read_result("e.json")
    assert abs(np.linalg.norm(r.e_star) - 1) < 1e-8 and r.objective_trace


def test_optimize_e_abort(cwd, monkeypatch):
    import tilt_rectify.cli as cli

    def boom(*a, **k):
        raise AntipodalDrift("drifted", [1.0])

    monkeypatch.setattr(cli, "optimize_e", boom)
    argv = ["optimize-e", "--normals", "synth/sample_0000_normals.png", "--gravity", "0,1,0", "--q", "q.json",
            "--intrinsics", "synth/intrinsics.json", "--sample-size", "200", "--out", "abort.json"]
    assert main(argv) == EXIT_ABORT
    assert not os.path.exists("abort.json")


def test_optimize_e_bad_gravity(cwd):
    argv = ["optimize-e", "--normals", "synth/sample_0000_normals.png", "--gravity", "0,0", "--q", "q.json",
            "--intrinsics", "synth/intrinsics.json", "--out", "x.json"]
    assert main(argv) == EXIT_USAGE


def test_rectify(cwd):
    item = manifest_item()
    argv = ["rectify", "--image", "synth/sample_0000_image.png", "--normals", "synth/sample_0000_normals.png",
            "--g", gravity_arg(item), "--e", "0,1,0", "--intrinsics", "synth/intrinsics.json", "--out", "rect"]
    assert main(argv) == EXIT_OK
    stats = fio.read_json("rect/stats.json")
    assert stats["invisible_count"] + stats["visible_count"] == 320 * 240
    assert stats["invisible_count"] == int((~fio.read_mask("rect/visible.png").mask).sum())


def test_eval(cwd):
    argv = ["eval", "--pred", "synth/sample_000*_normals.png", "--gt", "synth/sample_000*_normals.png",
            "--loss", "tal", "--report", "report.json", "--csv", "report.csv"]
    assert main(argv) == EXIT_OK
    rep = fio.read_json("report.json")
    assert rep["loss_name"] == "tal" and rep["loss"] == 0.0
    assert rep["summary"]["median"] < 1e-3 and rep["summary"]["p5"] == 1.0
    lines = open("report.csv").read().splitlines()
    assert lines[0].startswith("pred,gt,status,loss,mean")
    assert len(lines) == 3


@pytest.mark.parametrize("loss", ["l2", "al", "slant-tilt", "satd"])
def test_eval_losses(cwd, loss):
    argv = ["eval", "--pred", "synth/sample_0000_normals.png", "--gt", "synth/sample_0001_normals.png",
            "--loss", loss, "--report", f"rep_{loss}.json"]
    assert main(argv) == EXIT_OK
    assert fio.read_json(f"rep_{loss}.json")["loss"] > 0


def test_eval_bad_pair_continues(cwd):
    os.makedirs("mixed", exist_ok=True)
    fio.write_normal_map(fio.read_normal_map("synth/sample_0000_normals.png"), "mixed/a.png")
    fio.write_mask(np.ones((4, 4), bool), "mixed/b.png")  # 8-bit: unreadable as normals
    argv = ["eval", "--pred", "mixed/*.png", "--gt", "mixed/*.png", "--report", "mixed.json"]
    assert main(argv) == EXIT_OK
    pairs = fio.read_json("mixed.json")["pairs"]
    assert pairs[0]["error"] is None and pairs[1]["error"].startswith("FormatError")
    assert main(["eval", "--pred", "mixed/b.png", "--gt", "mixed/b.png", "--report", "none.json"]) == EXIT_USAGE
    assert main(["eval", "--pred", "mixed/*.png", "--gt", "mixed/a.png", "--report", "none.json"]) == EXIT_USAGE


def test_refine_planes(cwd):
    argv = ["refine-planes", "--depth", "planes/depth.png", "--normals", "planes/normals.png",
            "--masks", "planes/mask_*.png", "--intrinsics", "planes/intrinsics.json", "--out", "refined"]
    assert main(argv) == EXIT_OK
    doc = fio.read_json("refined/refine.json")
    assert doc["kept"] == ["mask_0.png"]
    assert doc["discarded"] == ["mask_1.png"]
    assert doc["masks"][1]["error"].startswith("EmptyMask")
    assert os.path.exists("refined/refined_000.png")
    argv = ["refine-planes", "--depth", "sphere/depth.png", "--normals", "sphere/normals.png",
            "--masks", "sphere/mask_*.png", "--intrinsics", "sphere/intrinsics.json", "--out", "sphere_out"]
    assert main(argv) == EXIT_OK
    assert fio.read_json("sphere_out/refine.json")["discarded"] == ["mask_0.png"]


def test_gradcheck_cli(cwd, capsys):
    assert main(["gradcheck", "--trials", "30", "--report", "gc.json"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") == 6
    assert all(s["passed"] for s in fio.read_json("gc.json")["suites"])
    assert main(["gradcheck", "--trials", "0"]) == EXIT_USAGE


def test_gradcheck_catches_mutation(cwd, monkeypatch, capsys):
    # sign-flipped L2 gradient
    monkeypatch.setattr(losses, "l2_grad", lambda p, g: losses._tangent_of(p, g))
    assert main(["gradcheck", "--trials", "20"]) == EXIT_AUDIT
    assert "FAIL l2" in capsys.readouterr().out


def test_usage_errors(cwd):
    assert main([]) == EXIT_USAGE
    assert main(["synth", "--count", "0", "--out", "x"]) == EXIT_USAGE
    assert main(["synth", "--roll-deg", "95", "--out", "x"]) == EXIT_USAGE
    assert main(["rectify", "--image", "missing.png", "--normals", "missing.png", "--g", "0,1,0", "--e", "0,1,0",
                 "--intrinsics", "synth/intrinsics.json", "--out", "r2"]) == EXIT_USAGE


@pytest.mark.parametrize(
    "manifest",
    ["synth/manifest.json", "q.json.manifest.json", "e.json.manifest.json", "rect/manifest.json",
     "report.json.manifest.json", "refined/manifest.json", "gc.json.manifest.json"],
)
def test_replay_is_byte_identical(cwd, manifest):
    before = fio.read_json(manifest)["outputs"]
    assert main(["replay", manifest]) == EXIT_OK
    assert fio.read_json(manifest)["outputs"] == before


def test_replay_detects_tampering(cwd, tmp_path):
    doc = fio.read_json("q.json.manifest.json")
    doc["outputs"]["q.json"] = "0" * 64
    fio.write_json(doc, "tampered.manifest.json")
    assert main(["replay", "tampered.manifest.json"]) == EXIT_AUDIT
    assert main(["replay", "missing.manifest.json"]) == EXIT_USAGE
