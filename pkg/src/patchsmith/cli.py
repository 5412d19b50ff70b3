"""Command-line entry point: ``generate``, ``attack``, ``eval`` and ``sweep``.

Exit codes: 0 success, 2 configuration error, 3 missing asset, 4 numeric
failure (NaN loss, diverged training), 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from .config import RunConfig
from .diffusion import LatentState, NoiseSchedule, SamplerConfig, build_schedule
from .errors import ConfigError, MissingAssetError, PatchsmithError, StageError
from .evaluation import (
    EvalReport,
    cross_model_matrix,
    evaluate_map,
    generate_reference_labels,
    load_corpus,
    random_noise_patch,
    read_sidecar,
    with_reference_boxes,
    write_reports_csv,
)
from .generator import ConditionRef, adapt_pretrained_generator
from .io import read_png, save_latent, write_png
from .objective import AttackStack
from .optimize import OptimizeConfig, init_patch, optimize_patch, resample_patch
from .render import PlacementPolicy, SceneSample, TransformRanges
from .sweeps import SweepGrid, plot_sweep, sweep_noise_step, write_sweep_csv
from .toydetector import adapt_detector

log = logging.getLogger("patchsmith")

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class Bound:
    """Everything a subcommand needs, resolved from one config."""

    cfg: RunConfig
    schedule: NoiseSchedule
    predictor: object
    codec: object
    detector: object
    condition: ConditionRef
    attack_scenes: list[SceneSample]
    eval_scenes: list[SceneSample]
    eval_reference: dict
    dtype: torch.dtype
    extra: dict = field(default_factory=dict)

    def stack(self) -> AttackStack:
        return AttackStack(self.predictor, self.codec, self.detector, self.schedule,
                           transform_ranges(self.cfg), placement(self.cfg))


def transform_ranges(cfg: RunConfig) -> TransformRanges:
    def pair(key):
        v = cfg[key]
        if len(v) != 2:
            raise ConfigError(f"{key} needs two comma-separated numbers")
        return tuple(v)

    ranges = TransformRanges(brightness=pair("transform.brightness"), contrast=pair("transform.contrast"),
                             noise=pair("transform.noise"), rotation=pair("transform.rotation"),
                             scale=pair("transform.scale"))
    ranges.validate()
    return ranges


def placement(cfg: RunConfig) -> PlacementPolicy:
    return PlacementPolicy(width_frac=cfg["placement.width_frac"], center_y_frac=cfg["placement.center_y_frac"])


def sampler_config(cfg: RunConfig) -> SamplerConfig:
    return SamplerConfig(t_start=cfg["sampler.t_start"], s=cfg["sampler.s"], cfg_weight=cfg["sampler.cfg_weight"],
                         seed=cfg["run.seed"], T=cfg["sampler.T"])


def optimize_config(cfg: RunConfig, max_iterations: int | None = None) -> OptimizeConfig:
    return OptimizeConfig(
        max_iterations=cfg["optim.max_iterations"] if max_iterations is None else max_iterations,
        batch_size=cfg["optim.batch_size"], lr=cfg["optim.lr"], lr_decay_factor=cfg["optim.lr_decay_factor"],
        lr_patience=cfg["optim.lr_patience"], loss_delta_threshold=cfg["optim.loss_delta_threshold"],
        min_lr=cfg["optim.min_lr"], lam=cfg["optim.lambda"], val_fraction=cfg["optim.val_fraction"],
        checkpoint_every=cfg["optim.checkpoint_every"], sampler=sampler_config(cfg), seed=cfg["run.seed"])


def _eval_kw(cfg: RunConfig) -> dict:
    return {"iou_threshold": cfg["eval.iou_threshold"], "conf_threshold": cfg["eval.conf_threshold"],
            "interpolation": cfg["eval.interpolation"]}


def bind(cfg: RunConfig, need_detector: bool = True) -> Bound:
    if cfg["run.dtype"] not in DTYPES:
        raise ConfigError(f"run.dtype must be one of {sorted(DTYPES)}")
    dtype = DTYPES[cfg["run.dtype"]]
    kind = cfg["world.kind"]
    sched = build_schedule(cfg["sampler.T"], cfg["sampler.schedule"], cfg["sampler.beta_min"], cfg["sampler.beta_max"])
    condition = (ConditionRef(prompt=cfg["condition.prompt"]) if cfg["condition.prompt"]
                 else ConditionRef.label(cfg["condition.label"]))
    if kind == "toy":
        from .toyworld import ToyWorldConfig, build_toy_world

        wcfg = ToyWorldConfig(scene_size=cfg["toy.scene_size"], patch_size=cfg["toy.patch_size"],
                              n_scenes=cfg["toy.n_scenes"], n_eval_scenes=cfg["toy.n_eval_scenes"],
                              detector_steps=cfg["toy.detector_steps"], generator_steps=cfg["toy.generator_steps"],
                              T=cfg["sampler.T"], schedule_kind=cfg["sampler.schedule"],
                              beta_min=cfg["sampler.beta_min"], beta_max=cfg["sampler.beta_max"],
                              conf_threshold=cfg["eval.conf_threshold"])
        world = build_toy_world(wcfg, cfg["world.cache"] or None)
        predictor, codec, detector = world.predictor, world.codec, world.detector
        if cfg["generator.manifest"]:
            predictor, codec = adapt_pretrained_generator(cfg["generator.manifest"], sched)
        if cfg["detector.manifest"]:
            detector = adapt_detector(cfg["detector.manifest"])
            train_ref = generate_reference_labels(detector, world.train_scenes, conf_threshold=cfg["eval.conf_threshold"])
            eval_ref = generate_reference_labels(detector, world.eval_scenes, conf_threshold=cfg["eval.conf_threshold"])
        else:
            train_ref, eval_ref = world.train_reference, world.eval_reference
        return Bound(cfg, sched, predictor, codec, detector, condition,
                     with_reference_boxes(world.train_scenes, train_ref), world.eval_scenes, eval_ref, dtype)
    if kind == "corpus":
        if not cfg["generator.manifest"]:
            raise ConfigError("world.kind=corpus needs generator.manifest")
        predictor, codec = adapt_pretrained_generator(cfg["generator.manifest"], sched)
        detector, scenes, ref = None, [], {}
        if need_detector:
            if not cfg["detector.manifest"]:
                raise ConfigError("world.kind=corpus needs detector.manifest")
            if not cfg["corpus.index"]:
                raise ConfigError("world.kind=corpus needs corpus.index")
            if not Path(cfg["corpus.index"]).exists():
                raise MissingAssetError(f"corpus index not found: {cfg['corpus.index']}", "corpus.index")
            detector = adapt_detector(cfg["detector.manifest"])
            scenes = load_corpus(cfg["corpus.index"])
            sidecar = cfg["corpus.sidecar"]
            if sidecar and Path(sidecar).exists():
                ref = read_sidecar(sidecar)
            else:
                ref = generate_reference_labels(detector, scenes, sidecar or None,
                                                conf_threshold=cfg["eval.conf_threshold"])
        attack = with_reference_boxes(scenes, ref) if scenes else []
        return Bound(cfg, sched, predictor, codec, detector, condition, attack, scenes, ref, dtype)
    raise ConfigError(f"world.kind must be 'toy' or 'corpus', got {kind!r}")


def _init_latent(b: Bound) -> LatentState:
    cfg = SamplerConfig(t_start=b.schedule.T, s=b.cfg["run.init_s"], cfg_weight=b.cfg["sampler.cfg_weight"],
                        seed=b.cfg["run.seed"], T=b.schedule.T)
    try:
        return init_patch(cfg, b.condition, b.stack(), b.dtype)
    except PatchsmithError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise StageError("generate", exc) from exc


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig, out: Path) -> int:
    b = bind(cfg, need_detector=False)
    init = _init_latent(b)
    write_png(b.codec.decode(init.value), out / "patch_init.png")
    save_latent(init.value, out / "latent_init.npy")
    return 0


def cmd_attack(cfg: RunConfig, out: Path) -> int:
    b = bind(cfg)
    stack = b.stack()
    init = _init_latent(b)
    write_png(b.codec.decode(init.value), out / "patch_init.png")
    save_latent(init.value, out / "latent_init.npy")
    ocfg = optimize_config(cfg)
    best, trace = optimize_patch(init, b.attack_scenes, ocfg, stack, checkpoint_dir=out / "checkpoints")
    trace.write_csv(out / "trace.csv")
    save_latent(best.value, out / "latent_final.npy")
    write_png(b.codec.decode(best.value.detach()), out / "patch_final.png")
    with torch.no_grad():
        resampled = resample_patch(best, replace(ocfg.sampler, seed=cfg["eval.seed"]), stack)
    write_png(resampled, out / "patch_resampled.png")
    log.info("attack done: %d iterations, best validation %.6g at iteration %s",
             len(trace), trace.best_val or float("nan"), trace.best_iteration)
    return 0


def _load_patch(source: str, shape, seed: int) -> torch.Tensor | None:
    if source in ("", "none"):
        return None
    if source == "random":
        return random_noise_patch(shape, seed)
    p = Path(source)
    if not p.exists():
        raise MissingAssetError(f"patch image not found: {p}", str(p))
    return read_png(p)


def _pairs(text: str, key: str) -> list[tuple[str, str]]:
    out = []
    for item in (x.strip() for x in text.split(",")):
        if not item:
            continue
        if ":" not in item:
            raise ConfigError(f"{key}: expected name:value, got {item!r}")
        name, value = item.split(":", 1)
        out.append((name.strip(), value.strip()))
    return out


def cmd_eval(cfg: RunConfig, out: Path, matrix: bool = False) -> int:
    b = bind(cfg)
    kw = _eval_kw(cfg)
    ranges, geom, seed = transform_ranges(cfg), placement(cfg), cfg["eval.seed"]
    pixel_shape = tuple(b.codec.decode(torch.zeros(b.predictor.latent_shape)).shape)
    reports: list[EvalReport] = [evaluate_map(b.detector, b.eval_scenes, b.eval_reference, None, ranges, seed,
                                              geometry=geom, detector_id="detector", dataset_id="clean", **kw)]
    patch = _load_patch(cfg["eval.patch"], pixel_shape, seed)
    if patch is not None:
        reports.append(evaluate_map(b.detector, b.eval_scenes, b.eval_reference, patch, ranges, seed,
                                    geometry=geom, detector_id="detector", dataset_id="patched", **kw))
    write_reports_csv(out / "eval.csv", reports)
    for r in reports:
        print(f"{r.dataset_id}: mAP {r.map_percent:.2f} over {r.n_images} images")
    if matrix:
        patches: dict[str, torch.Tensor | None] = {}
        for name, source in _pairs(cfg["eval.matrix_patches"], "eval.matrix_patches"):
            patches[name] = _load_patch(source, pixel_shape, seed)
        if not patches:
            patches["Random Noise"] = random_noise_patch(pixel_shape, seed)
            patches["Unoptimized Patch"] = b.codec.decode(_init_latent(b).value).detach()
            if patch is not None:
                patches["patch"] = patch
        detectors = {name: adapt_detector(man) for name, man in _pairs(cfg["eval.matrix_detectors"],
                                                                        "eval.matrix_detectors")}
        references = {name: generate_reference_labels(d, b.eval_scenes, conf_threshold=kw["conf_threshold"])
                      for name, d in detectors.items()}
        if not detectors:
            detectors, references = {"detector": b.detector}, {"detector": b.eval_reference}
        rep = cross_model_matrix(patches, detectors, b.eval_scenes, references, ranges=ranges, seed=seed,
                                 geometry=geom, **kw)
        rep.write_csv(out / "matrix.csv")
    return 0


def sweep_grid(cfg: RunConfig) -> SweepGrid:
    if cfg["sweep.s_values"]:
        return SweepGrid(cfg["sweep.t_starts"], cfg["sweep.s_values"], cfg["sweep.cfg_weights"], "absolute")
    return SweepGrid(cfg["sweep.t_starts"], cfg["sweep.s_divisors"], cfg["sweep.cfg_weights"], "divisor")


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    grid = sweep_grid(cfg)
    b = bind(cfg)
    init = _init_latent(b)
    sweep_noise_step(grid, b.stack(), b.attack_scenes, init, optimize_config(cfg, cfg["sweep.max_iterations"]),
                     b.eval_scenes, b.eval_reference, eval_seed=cfg["eval.seed"], **_eval_kw(cfg))
    write_sweep_csv(out / "sweep.csv", grid)
    plot_sweep(grid, out / "sweep.png")
    failed = sum(not r.ok for r in grid.rows)
    print(f"sweep: {len(grid.rows)} cells, {failed} failed")
    return 0


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--out", metavar="DIR", help="output directory (default: runs/<command>)")
    common.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
    common.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="patchsmith", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="sample the initial patch from pure noise")
    sub.add_parser("attack", parents=[common], help="optimize a patch against the detector")
    ev = sub.add_parser("eval", parents=[common], help="normalized mAP of clean / patched scenes")
    ev.add_argument("--matrix", action="store_true", help="also write the patch x detector matrix")
    sub.add_parser("sweep", parents=[common], help="t_start / s / guidance-weight ablation grid")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.overrides or (), args.seed)
        out = Path(args.out or Path("runs") / args.command)
        out.mkdir(parents=True, exist_ok=True)
        cfg.echo(out)
        if args.command == "generate":
            return cmd_generate(cfg, out)
        if args.command == "attack":
            return cmd_attack(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.matrix)
        return cmd_sweep(cfg, out)
    except PatchsmithError as exc:
        stage = getattr(exc, "stage", None) or type(exc).__name__
        print(f"patchsmith {args.command}: [{stage}] {exc}", file=sys.stderr)
        diagnostics = getattr(exc, "diagnostics", None) or getattr(exc.__cause__, "diagnostics", None)
        if diagnostics:
            print(f"diagnostics: {diagnostics}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
