"""Run configuration: TOML in, frozen dataclasses out, plus a config hash.

The hash covers the canonical key=value form (comments and formatting do
not affect it) and is embedded in every artifact a run produces.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - py310
    import tomli as tomllib

from .backbone import BackboneConfig, Stage1Config
from .codec import CodecConfig
from .env import EnvConfig
from .expert import ExpertConfig, Stage2Config

DEFAULT_CONFIG_NAME = "default.toml"


@dataclass
class DataConfig:
    n_episodes: int = 200
    seed: int = 1000
    heldout_frac: float = 0.1


@dataclass
class EvalConfig:
    n_trials: int = 20
    seed: int = 77
    frame_strip_every: int = 10


@dataclass
class AblateConfig:
    variants: tuple = ("full", "no_force_reg", "vision_only", "late_fusion")
    seeds: tuple = (0, 1, 2)
    n_trials: int = 50


@dataclass
class RunConfig:
    run_seed: int = 7
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    _SECTIONS = ("env", "data", "codec", "backbone", "stage1", "expert",
                 "stage2", "eval", "ablate")

    def canonical_lines(self):
        lines = [f"run.run_seed={_fmt(self.run_seed)}"]
        for section in self._SECTIONS:
            obj = getattr(self, section)
            for f in sorted(fields(obj), key=lambda f: f.name):
                lines.append(f"{section}.{f.name}={_fmt(getattr(obj, f.name))}")
        return lines

    def config_hash(self):
        blob = "\n".join(self.canonical_lines()).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _fmt(v):
    if isinstance(v, float):
        return repr(float(v))
    if isinstance(v, (tuple, list)):
        return "[" + ",".join(_fmt(x) for x in v) + "]"
    return repr(v)


def load_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        raw = tomllib.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"load_config: cannot read {path}: {exc}") from exc
    if "run" in raw and "run_seed" in raw["run"]:
        cfg.run_seed = int(raw["run"]["run_seed"])
    for section in RunConfig._SECTIONS:
        if section not in raw:
            continue
        obj = getattr(cfg, section)
        valid = {f.name: f for f in fields(obj)}
        for key, val in raw[section].items():
            if key not in valid:
                raise KeyError(f"load_config: unknown key [{section}] {key}")
            current = getattr(obj, key)
            if isinstance(current, tuple):
                val = tuple(val)
            elif isinstance(current, float):
                val = float(val)
            elif isinstance(current, int) and not isinstance(current, bool):
                val = int(val)
            setattr(obj, key, val)
    return cfg


def write_default_config(path):
    """Write the canonical desk-scale config with reference values noted."""
    cfg = RunConfig()
    out = ["# Desk-scale defaults. Comments note the full-scale reference",
           "# values this configuration is scaled down from.",
           "", "[run]", f"run_seed = {cfg.run_seed}", ""]
    notes = {
        ("backbone", "blocks"): "reference: 28 transformer layers",
        ("backbone", "heads"): "reference: 32 heads",
        ("backbone", "d_model"): "reference: 2048 hidden dim",
        ("backbone", "future_frames"): "temporal chunk 4 = 1 cond + 3 future; reference chunk: 9 frames",
        ("expert", "chunk_len"): "reference action chunk: 54 (1:6 frame ratio kept)",
        ("expert", "lambda_state"): "loss weights fixed at 1",
        ("expert", "lambda_force"): "loss weights fixed at 1",
        ("stage1", "steps"): "reference: 50k steps",
        ("stage1", "warmup"): "reference: 1000 warmup steps",
        ("stage1", "cond_noise"): "first-frame noise injection scale 0.1",
        ("stage1", "lr"): "reference: 3e-4",
        ("stage2", "steps"): "reference: 20k steps",
        ("stage2", "lr"): "reference: 5e-5 on a pretrained trunk; desk expert trains from scratch",
        ("data", "n_episodes"): "reference dataset: 100 real trajectories",
        ("eval", "n_trials"): "reference protocol: 20 trials",
        ("ablate", "n_trials"): "reference ablation: 10 trials per variant",
    }
    for section in RunConfig._SECTIONS:
        obj = getattr(cfg, section)
        out.append(f"[{section}]")
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                if all(isinstance(x, str) for x in v):
                    vs = "[" + ", ".join(f'"{x}"' for x in v) + "]"
                else:
                    vs = "[" + ", ".join(str(x) for x in v) + "]"
            elif isinstance(v, str):
                vs = f'"{v}"'
            else:
                vs = str(v)
            note = notes.get((section, f.name))
            out.append(f"{f.name} = {vs}" + (f"  # {note}" if note else ""))
        out.append("")
    Path(path).write_text("\n".join(out))
    return cfg
