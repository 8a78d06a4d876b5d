import json

import numpy as np
import pytest

from loopsplat import harness, rasterizer
from loopsplat.cli import dump_defaults, format_table, main
from loopsplat.config import default_config_dict
from loopsplat.core import GaussianCloud
from loopsplat.imageio import quantize, read_pfm, write_ppm
from loopsplat.trainer import read_checkpoint, write_checkpoint

SMALL = {"scene": {"n": 12},
         "rig": {"n_views": 5, "width": 24, "height": 24, "train_views": [0, 2, 4]},
         "train": {"iterations": 12, "log_every": 4},
         "pgi": {"loops": 1, "iterations_per_loop": 12}}


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_defaults(capsys):
    assert main(["defaults"]) == 0
    assert json.loads(capsys.readouterr().out) == default_config_dict()
    assert json.loads(dump_defaults()) == default_config_dict()


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train", "--bogus"],
                                  ["train", "--iterations", "x"], ["render", "--rig", "r"]])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"iters": 3}}))
    assert main(["train", "--config", str(p)]) == 1
    assert "unknown key train.iters" in capsys.readouterr().err


def test_malformed_config(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text("{")
    assert main(["loop", "--config", str(p)]) == 1
    assert "invalid JSON" in capsys.readouterr().err
    assert main(["loop", "--config", str(tmp_path / "missing.json")]) == 1


def test_negative_counts_rejected(small):
    assert main(["loop", "--config", str(small), "--loops", "-1"]) == 1
    assert main(["train", "--config", str(small), "--iterations", "-3"]) == 1


def test_init(small, tmp_path):
    out = tmp_path / "o"
    assert main(["init", "--config", str(small), "--out", str(out)]) == 0
    for f in ("init.ckpt", "rig.json", "config.json", "sparse_init/points3D.txt"):
        assert (out / f).exists(), f
    cloud, meta = read_checkpoint(out / "init.ckpt")
    assert len(cloud) > 0 and meta["iteration"] == 0
    assert len(harness.load_rig(out / "rig.json")) == 5


def test_zero_loops_equals_train(small, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(small), "--out", str(a)]) == 0
    assert main(["loop", "--config", str(small), "--out", str(b), "--loops", "0"]) == 0
    for f in ("final.ckpt", "metrics.jsonl", "eval.json", "loop_0/cloud.ckpt"):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    assert not (b / "loop_1").exists()


def test_loop_outputs(small, tmp_path):
    out = tmp_path / "o"
    assert main(["loop", "--config", str(small), "--out", str(out)]) == 0
    recs = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert {r["loop"] for r in recs} == {0, 1}
    assert any(r["kind"] == "pseudo" for r in recs)
    hist = json.loads((out / "history.json").read_text())
    assert len(hist["point_counts"]) == 2 and hist["accumulated_pseudo"] == 12
    report = json.loads((out / "eval.json").read_text())
    assert len(report["views"]) == 5
    _, meta = read_checkpoint(out / "final.ckpt")
    assert meta["iteration"] == 24


def test_render_files_are_exact(small, tmp_path):
    out = tmp_path / "o"
    assert main(["init", "--config", str(small), "--out", str(out)]) == 0
    r = tmp_path / "r"
    assert main(["render", "--checkpoint", str(out / "init.ckpt"), "--rig",
                 str(out / "rig.json"), "--view", "view_002", "--out", str(r)]) == 0
    cloud, _ = read_checkpoint(out / "init.ckpt")
    cam = {c.name: c for c in harness.load_rig(out / "rig.json")}["view_002"]
    ref = rasterizer.render(cloud, cam)
    raw = (r / "view_002.ppm").read_bytes()
    assert raw.endswith(quantize(ref.color).tobytes())
    np.testing.assert_array_equal(read_pfm(r / "view_002_depth.pfm"),
                                  ref.depth.astype(np.float32))
    assert sorted(p.name for p in r.iterdir()) == ["view_002.ppm", "view_002_depth.pfm"]
    assert main(["render", "--checkpoint", str(out / "init.ckpt"), "--rig",
                 str(out / "rig.json"), "--view", "nope", "--out", str(r)]) == 1


def test_depth_filters(fixtures_dir, tmp_path):
    src = str(fixtures_dir / "colmap_filters")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["depth", "--colmap", src, "--out", str(a)]) == 0
    m = read_pfm(a / "pseudo_c.pfm")
    assert {tuple(ix) for ix in np.argwhere(m > 0)} == {(19, 28)}
    assert not (read_pfm(a / "pseudo_d.pfm") > 0).any()
    assert main(["depth", "--colmap", src, "--out", str(b), "--no-filter2"]) == 0
    m = read_pfm(b / "pseudo_c.pfm")
    assert m[24, 23] == 5.0 and m[19, 28] == 4.0
    assert read_pfm(b / "pseudo_d.pfm")[24, 33] == 5.0
    t = read_pfm(b / "train_a.pfm")
    assert {tuple(ix) for ix in np.argwhere(t > 0)} == {(24, 32), (19, 35)}


def test_pseudo_json(small, tmp_path, capsys):
    assert main(["pseudo", "--config", str(small), "--loop", "2"]) == 0
    first = json.loads(capsys.readouterr().out)
    assert len(first) == 12 and first[0]["name"] == "pseudo_l2_v00_0"
    f = tmp_path / "p.json"
    assert main(["pseudo", "--config", str(small), "--loop", "2", "--out", str(f)]) == 0
    assert json.loads(f.read_text()) == first
    assert main(["pseudo", "--config", str(small), "--loop", "2", "--seed", "9"]) == 0
    assert json.loads(capsys.readouterr().out) != first
    rig = tmp_path / "rig.json"
    harness.save_rig(rig, harness.gen_rig(n_views=2))
    assert main(["pseudo", "--rig", str(rig), "--loop", "1"]) == 0
    assert len(json.loads(capsys.readouterr().out)) == 8


def test_eval_perfect_match(tmp_path, capsys):
    cams = harness.gen_rig(n_views=2, width=8, height=8)
    rig, imgs = tmp_path / "rig.json", tmp_path / "imgs"
    imgs.mkdir()
    harness.save_rig(rig, cams)
    for c in cams:
        write_ppm(imgs / f"{c.name}.ppm", np.zeros((8, 8, 3)))
    ck = tmp_path / "empty.ckpt"
    write_checkpoint(ck, GaussianCloud())
    js = tmp_path / "e.json"
    assert main(["eval", "--checkpoint", str(ck), "--rig", str(rig), "--images", str(imgs),
                 "--json", str(js)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["view", "psnr", "ssim"]
    assert [ln.split()[1] for ln in lines[1:]] == ["99.000"] * 3
    assert json.loads(js.read_text())["mean_psnr"] == 99.0
    assert main(["eval", "--checkpoint", str(ck), "--rig", str(rig)]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--rig", str(rig),
                 "--images", str(imgs)]) == 1


def test_format_table_aligns():
    t = format_table({"views": [{"name": "a_long_name", "psnr": 30.0, "ssim": 0.9}],
                      "mean_psnr": 30.0, "mean_ssim": 0.9})
    lines = t.splitlines()
    assert len({len(ln) for ln in lines}) == 1


def test_runtime_failure_exit_2(fixtures_dir, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    src = str(fixtures_dir / "colmap_min")
    cfg.write_text(json.dumps({"colmap_dir": src, "images_dir": str(tmp_path),
                               "providers": {"sfm": {"kind": "colmap_dir", "path": src},
                                             "mono": {"kind": "file_dir", "path": src}}}))
    assert main(["init", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "FileNotFoundError" in capsys.readouterr().err
