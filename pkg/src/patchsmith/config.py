"""Flat ``key = value`` configuration with documented defaults.

Lines starting with ``#`` are comments. Every key must be known; the
resolved document is echoed into each output directory.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


@dataclass(frozen=True)
class Key:
    default: Any
    doc: str
    kind: type = str


def _expand(v: str) -> list[str]:
    """Comma list whose items may be inclusive integer ranges ``a..b``."""
    out = []
    for item in (x.strip() for x in v.split(",")):
        if not item:
            continue
        if ".." in item:
            lo, hi = (int(x) for x in item.split(".."))
            out.extend(str(i) for i in range(lo, hi + 1))
        else:
            out.append(item)
    return out


def _floats(v: str) -> list[float]:
    return [float(x) for x in _expand(v)]


def _ints(v: str) -> list[int]:
    return [int(float(x)) for x in _expand(v)]


# key -> (default, doc, parser)
KEYS: dict[str, Key] = {
    "run.seed": Key(0, "root seed for every random draw", int),
    "run.dtype": Key("float32", "float32 | float64"),
    "run.init_s": Key(166, "APS step size for the initial patch (drawn from pure noise at t_start = T)", int),
    "world.kind": Key("toy", "toy (synthetic corpus + toy detector + toy generator) | corpus"),
    "world.cache": Key("", "cache dir for trained toy fixtures; empty -> $PATCHSMITH_CACHE or ~/.cache/patchsmith"),
    "toy.n_scenes": Key(200, "synthetic scenes in the attack corpus", int),
    "toy.n_eval_scenes": Key(100, "synthetic scenes in the evaluation corpus", int),
    "toy.scene_size": Key(64, "synthetic scene side in pixels", int),
    "toy.patch_size": Key(16, "toy latent/patch side in pixels", int),
    "toy.detector_steps": Key(2000, "toy detector training steps", int),
    "toy.generator_steps": Key(3000, "toy generator training steps", int),
    "generator.manifest": Key("", "adapter manifest; empty -> toy generator"),
    "detector.manifest": Key("", "adapter manifest; empty -> toy detector"),
    "corpus.index": Key("", "index file of image paths (world.kind=corpus)"),
    "corpus.sidecar": Key("", "detections sidecar (JSONL); generated when missing"),
    "condition.prompt": Key("", "text condition for adapter generators"),
    "condition.label": Key(0, "label condition for the toy generator", int),
    "sampler.schedule": Key("scaled_linear", "linear | scaled_linear | cosine"),
    "sampler.beta_min": Key(0.00085, "first beta of the schedule", float),
    "sampler.beta_max": Key(0.012, "last beta of the schedule", float),
    "sampler.T": Key(1000, "total diffusion steps", int),
    "sampler.t_start": Key(500, "APS starting step", int),
    "sampler.s": Key(166, "APS step size", int),
    "sampler.cfg_weight": Key(1.0, "classifier-free guidance weight", float),
    "optim.max_iterations": Key(200, "optimizer iterations", int),
    "optim.batch_size": Key(8, "scenes per minibatch", int),
    "optim.lr": Key(0.005, "Adam initial learning rate", float),
    "optim.lr_decay_factor": Key(0.5, "multiplier applied on plateau", float),
    "optim.lr_patience": Key(10, "plateau epochs before decay", int),
    "optim.loss_delta_threshold": Key(1e-4, "plateau threshold on epoch-mean loss", float),
    "optim.min_lr": Key(1e-6, "learning-rate floor", float),
    "optim.lambda": Key(0.1, "TV weight", float),
    "optim.val_fraction": Key(0.1, "held-out fraction for best-checkpoint selection", float),
    "optim.checkpoint_every": Key(50, "iterations between checkpoints / validation", int),
    "transform.brightness": Key("-0.1,0.1", "brightness shift range", _floats),
    "transform.contrast": Key("0.8,1.2", "contrast gain range", _floats),
    "transform.noise": Key("0,0.05", "noise amplitude range", _floats),
    "transform.rotation": Key("-20,20", "rotation range in degrees", _floats),
    "transform.scale": Key("0.9,1.1", "scale jitter range", _floats),
    "placement.width_frac": Key(0.65, "patch width as a fraction of box width", float),
    "placement.center_y_frac": Key(0.45, "patch centre height as a fraction of box height", float),
    "eval.iou_threshold": Key(0.5, "IoU for a true positive", float),
    "eval.conf_threshold": Key(0.5, "score threshold for reference and evaluated detections", float),
    "eval.interpolation": Key("11point", "11point | allpoint", str),
    "eval.seed": Key(1234, "transform seed used during evaluation", int),
    "eval.patch": Key("", "patch PNG to evaluate; empty -> clean evaluation"),
    "eval.matrix_patches": Key("", "comma list of name:path.png for --matrix (path 'random'/'none' allowed)"),
    "eval.matrix_detectors": Key("", "comma list of name:manifest for --matrix; empty -> toy detector"),
    "sweep.t_starts": Key("200,400,600,800", "t_start grid", _ints),
    "sweep.s_values": Key("", "absolute s grid; empty -> use sweep.s_divisors", _ints),
    "sweep.s_divisors": Key("3", "s = t_start // d for each d", _ints),
    "sweep.cfg_weights": Key("1", "guidance weight grid; ranges like 1..20 allowed", _floats),
    "sweep.max_iterations": Key(150, "optimizer iterations per cell", int),
}


class RunConfig:
    """Resolved flat configuration; attribute-free, look up by key."""

    def __init__(self, raw: dict[str, str] | None = None):
        raw = dict(raw or {})
        unknown = sorted(set(raw) - set(KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        self.raw = {k: str(v) for k, v in raw.items()}
        self._values = {}
        for key, entry in KEYS.items():
            text = self.raw.get(key, str(entry.default))
            try:
                self._values[key] = entry.kind(text) if entry.kind is not str else text
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: cannot parse {text!r}: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Iterable[str] = (), seed: int | None = None) -> "RunConfig":
        raw: dict[str, str] = {}
        if path:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            raw.update(parse_kv(p.read_text()))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            raw[k.strip()] = v.strip()
        if seed is not None:
            raw["run.seed"] = str(seed)
        return cls(raw)

    def __getitem__(self, key: str):
        return self._values[key]

    def text(self) -> str:
        lines = ["# resolved patchsmith configuration"]
        for key, entry in KEYS.items():
            lines.append(f"# {entry.doc}")
            lines.append(f"{key} = {self.raw.get(key, entry.default)}")
        return "\n".join(lines) + "\n"

    def echo(self, out_dir: str | Path) -> Path:
        p = Path(out_dir) / "config.resolved.txt"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.text())
        return p
