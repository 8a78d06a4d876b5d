import numpy as np
import pytest
from PIL import Image

from loopsplat.config import (ConfigError, build_run, config_from_dict,
                              default_config_dict, load_config)
from loopsplat.imageio import write_pfm


def test_defaults_round_trip():
    d = default_config_dict()
    assert config_from_dict(d).to_json() == d
    assert d["pgi"]["iterations_per_loop"] == 10000
    assert "seed" not in d["train"] and "seed" not in d["pgi"]


@pytest.mark.parametrize("doc, where", [
    ({"bogus": 1}, "bogus"),
    ({"train": {"iterationz": 5}}, "train.iterationz"),
    ({"rig": {"views": 3}}, "rig.views"),
    ({"providers": {"sfm": {"kind": "synthetic", "nosie_px": 1}}}, "providers.sfm.nosie_px"),
    ({"train": {"seed": 3}}, "train.seed"),
    ({"pgi": {"seed": 3}}, "pgi.seed"),
])
def test_unknown_keys_are_named(doc, where):
    with pytest.raises(ConfigError, match=f"unknown key {where}"):
        config_from_dict(doc)


@pytest.mark.parametrize("doc", [
    {"train": {"iterations": -1}},
    {"pgi": {"pseudo_per_view": 0}},
    {"providers": {"sfm": {"kind": "nope"}}},
    {"providers": {"sfm": {"kind": "colmap_dir"}}},
    {"colmap_dir": "x"},
    {"seed": 1.5},
])
def test_invalid_values(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_malformed_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)


def test_top_level_seed_drives_sections():
    cfg = config_from_dict({"seed": 7, "deterministic": False})
    assert cfg.train.seed == cfg.pgi.seed == 7
    assert cfg.train.deterministic is False


def test_build_run_split(tmp_path):
    cfg = config_from_dict({"scene": {"n": 10}, "rig": {"n_views": 5, "width": 16, "height": 16,
                                                         "train_views": [1, 3]}})
    run = build_run(cfg)
    assert [v.name for v in run.training] == ["view_001", "view_003"]
    assert [v.name for v in run.held_out] == ["view_000", "view_002", "view_004"]
    assert all(v.mono_depth is not None for v in run.training)
    assert run.initial_model.training_image_ids and not run.initial_model.pseudo_image_ids
    with pytest.raises(ConfigError, match="train_views"):
        build_run(config_from_dict({"rig": {"n_views": 3, "train_views": [5]}}))


def test_colmap_source(fixtures_dir, tmp_path):
    img, mono = tmp_path / "images", tmp_path / "mono"
    img.mkdir()
    mono.mkdir()
    for n in ("frame_a", "frame_b"):
        Image.fromarray(np.full((48, 64, 3), 128, np.uint8)).save(img / f"{n}.png")
        write_pfm(mono / f"{n}.pfm", np.full((48, 64), 2.0))
    src = str(fixtures_dir / "colmap_min")
    cfg = config_from_dict({"colmap_dir": src, "images_dir": str(img),
                            "providers": {"sfm": {"kind": "colmap_dir", "path": src},
                                          "mono": {"kind": "file_dir", "path": str(mono)}}})
    assert cfg.scene is None
    run = build_run(cfg)
    assert [v.name for v in run.training] == ["frame_a.png", "frame_b.png"]
    assert run.held_out == []
    assert len(run.initial_model.points) == 3
    np.testing.assert_array_equal(run.training[0].image, np.full((48, 64, 3), 128 / 255))
