"""JSON run configuration and assembly of the concrete pipeline pieces.

A run config names a scene source (a synthetic scene or a COLMAP text
model), the camera rig, the per-module settings and the two providers.
Unknown keys are rejected with the offending dotted path in the message.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import harness, rasterizer
from .core import scene_extent
from .densify import DensifyConfig
from .imageio import read_image
from .losses import LossWeights
from .pgi import PgiConfig
from .sfm import ColmapDirProvider, SfmView, label_images, parse_colmap_text
from .trainer import TrainConfig, View


class ConfigError(ValueError):
    """Raised for malformed or inconsistent run configs."""


SCENE_DEFAULTS = {"kind": "blob_field", "n": 50, "seed": 0}
RIG_DEFAULTS = {"kind": "forward_arc", "n_views": 9, "radius": 2.0, "target": [0.0, 0.0, 0.0],
                "width": 64, "height": 64, "arc_deg": 60.0, "train_views": [0, 4, 8]}
SFM_DEFAULTS = {
    "synthetic": {"kind": "synthetic", "noise_px": 0.5, "dropout": 0.0, "samples_per_gaussian": 8,
                  "detect_prob": 0.35, "min_track": 2, "match_tolerance": 0.2},
    "colmap_dir": {"kind": "colmap_dir", "path": None},
}
MONO_DEFAULTS = {
    "simulator": {"kind": "simulator", "mode": "affine"},
    "file_dir": {"kind": "file_dir", "path": None, "is_inverse": False},
}
# Owned by the top-level keys so one value drives every module.
_RESERVED = {"train": ("seed", "deterministic"), "pgi": ("seed",)}


@dataclass
class RunConfig:
    scene: dict | None = field(default_factory=lambda: dict(SCENE_DEFAULTS))
    colmap_dir: str | None = None
    images_dir: str | None = None
    rig: dict = field(default_factory=lambda: copy.deepcopy(RIG_DEFAULTS))
    train: TrainConfig = field(default_factory=TrainConfig)
    pgi: PgiConfig = field(default_factory=PgiConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    providers: dict = field(default_factory=lambda: {"sfm": dict(SFM_DEFAULTS["synthetic"]),
                                                     "mono": dict(MONO_DEFAULTS["simulator"])})
    output_dir: str = "out"
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        self.sync()

    def sync(self) -> None:
        """Push the top-level seed and determinism flag into the sections."""
        self.train.seed = self.seed
        self.train.deterministic = self.deterministic
        self.pgi.seed = self.seed

    def to_json(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "__dataclass_fields__"):
                v = asdict(v)
                for k in _RESERVED.get(f.name, ()):
                    v.pop(k, None)
                v = {k: list(x) if isinstance(x, tuple) else x for k, x in v.items()}
            out[f.name] = v
        return out


def _check_keys(d, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown key {where + '.' if where else ''}{k}")


def _section(cls, d, where: str):
    names = {f.name for f in fields(cls)} - set(_RESERVED.get(where, ()))
    _check_keys(d, names, where)
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _provider(d, defaults: dict, where: str) -> dict:
    if not isinstance(d, dict) or d.get("kind") not in defaults:
        raise ConfigError(f"{where}.kind must be one of {sorted(defaults)}")
    base = dict(defaults[d["kind"]])
    _check_keys(d, base, where)
    base.update(d)
    if "path" in base and base["path"] is None:
        raise ConfigError(f"{where}.path is required for kind {d['kind']!r}")
    return base


def config_from_dict(d: dict) -> RunConfig:
    top = {f.name for f in fields(RunConfig)}
    _check_keys(d, top, "")
    kw = {}
    if "scene" in d and d["scene"] is not None:
        _check_keys(d["scene"], SCENE_DEFAULTS, "scene")
        kw["scene"] = {**SCENE_DEFAULTS, **d["scene"]}
    if d.get("colmap_dir") is not None:
        kw["colmap_dir"] = str(d["colmap_dir"])
        if "scene" not in d:
            kw["scene"] = None
    if kw.get("scene") is not None and kw.get("colmap_dir"):
        raise ConfigError("give either scene or colmap_dir, not both")
    if d.get("images_dir") is not None:
        kw["images_dir"] = str(d["images_dir"])
    if "rig" in d:
        _check_keys(d["rig"], RIG_DEFAULTS, "rig")
        kw["rig"] = {**copy.deepcopy(RIG_DEFAULTS), **d["rig"]}
    for name, cls in (("train", TrainConfig), ("pgi", PgiConfig), ("densify", DensifyConfig),
                      ("losses", LossWeights)):
        if name in d:
            kw[name] = _section(cls, d[name], name)
    if "providers" in d:
        p = d["providers"]
        _check_keys(p, ("sfm", "mono"), "providers")
        kw["providers"] = {
            "sfm": _provider(p.get("sfm", {"kind": "synthetic"}), SFM_DEFAULTS, "providers.sfm"),
            "mono": _provider(p.get("mono", {"kind": "simulator"}), MONO_DEFAULTS,
                              "providers.mono"),
        }
    for k in ("output_dir", "seed", "deterministic"):
        if k in d:
            kw[k] = d[k]
    if not isinstance(kw.get("seed", 0), int) or isinstance(kw.get("seed", 0), bool):
        raise ConfigError("seed must be an integer")
    cfg = RunConfig(**kw)
    if cfg.scene is None and cfg.colmap_dir is None:
        raise ConfigError("a scene or a colmap_dir is required")
    if cfg.scene is None and cfg.providers["sfm"]["kind"] == "synthetic":
        raise ConfigError("providers.sfm: the synthetic provider needs a synthetic scene")
    if cfg.scene is None and cfg.providers["mono"]["kind"] == "simulator":
        raise ConfigError("providers.mono: the simulator needs a synthetic scene")
    return cfg


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return config_from_dict(d)


def default_config_dict() -> dict:
    return RunConfig().to_json()


@dataclass
class Run:
    """Everything a pipeline command needs, built from a RunConfig."""

    config: RunConfig
    training: list
    held_out: list
    initial_model: object
    sfm_provider: object
    mono_provider: object
    extent: float
    scene: object = None


def build_run(cfg: RunConfig) -> Run:
    seed = cfg.seed
    scene = None
    if cfg.scene is not None:
        s = cfg.scene
        scene = harness.gen_scene(s["kind"], int(s["n"]), int(s["seed"]))
        r = cfg.rig
        cams = harness.gen_rig(r["kind"], int(r["n_views"]), float(r["radius"]), r["target"],
                               int(r["width"]), int(r["height"]), float(r["arc_deg"]))
        idx = list(r["train_views"])
        if not idx or any(i < 0 or i >= len(cams) for i in idx):
            raise ConfigError("rig.train_views: index out of range")
        images = {c.name: rasterizer.render(scene.gt_cloud, c).color for c in cams}
        train_cams = [cams[i] for i in idx]
        rest = [c for i, c in enumerate(cams) if i not in set(idx)]
    else:
        model = label_images(parse_colmap_text(cfg.colmap_dir))
        img_dir = Path(cfg.images_dir or Path(cfg.colmap_dir) / "images")
        train_cams = [model.camera_for(i) for i in sorted(model.training_image_ids)]
        rest = []
        images = {c.name: read_image(img_dir / c.name) for c in train_cams}

    ps = cfg.providers["sfm"]
    if ps["kind"] == "synthetic":
        kw = {k: v for k, v in ps.items() if k != "kind"}
        sfm_provider = harness.SyntheticSfmProvider(scene, seed=seed, **kw)
    else:
        sfm_provider = ColmapDirProvider(ps["path"])
    pm = cfg.providers["mono"]
    if pm["kind"] == "simulator":
        mono_provider = harness.SimulatedMonoProvider(scene, pm["mode"], seed)
    else:
        mono_provider = harness.FileMonoProvider(pm["path"], bool(pm["is_inverse"]))

    training = []
    for c in train_cams:
        img = images[c.name]
        mono, inv = mono_provider.estimate(c, img)
        training.append(View(c, "training", img, None, mono, inv))
    held_out = [View(c, "training", images[c.name]) for c in rest]
    initial = sfm_provider.run([SfmView(c.name, c, False, images[c.name]) for c in train_cams])
    return Run(cfg, training, held_out, initial, sfm_provider, mono_provider,
               scene_extent(train_cams), scene)


def all_views(run: Run) -> list:
    return list(run.training) + list(run.held_out)
