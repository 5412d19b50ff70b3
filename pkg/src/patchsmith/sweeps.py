"""Ablation sweeps over noise level, step size and guidance weight.

Each grid cell runs a short-budget attack from a shared initial patch and
records the attacked mAP and the similarity between the initial and the
final (resampled) patch.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .diffusion import LatentState
from .evaluation import RandomProjectionEmbedder, embedding_similarity, evaluate_map
from .optimize import OptimizeConfig, optimize_patch, resample_patch
from .render import BoundingBox, SceneSample

log = logging.getLogger(__name__)

CSV_HEADER = ("t_start", "s", "cfg_w", "mAP", "clip_sim", "status")


@dataclass(frozen=True)
class SweepRow:
    t_start: int
    s: int
    cfg_w: float
    map_percent: float
    clip_sim: float
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class SweepGrid:
    """Grid axes plus one row per cell. With ``s_mode="divisor"`` each entry
    of ``s_values`` is a divisor and the realized step is ``t_start // d``."""

    t_starts: list[int]
    s_values: list[int]
    cfg_weights: list[float] = field(default_factory=lambda: [1.0])
    s_mode: str = "absolute"
    rows: list[SweepRow] = field(default_factory=list)

    def __post_init__(self):
        if self.s_mode not in ("absolute", "divisor"):
            raise ValueError(f"s_mode must be 'absolute' or 'divisor', got {self.s_mode!r}")

    def step_for(self, t_start: int, s_value: int) -> int:
        if self.s_mode == "divisor":
            return max(1, int(t_start) // int(s_value))
        return int(s_value)

    def cells(self) -> list[tuple[int, int, float]]:
        return [(int(t), self.step_for(t, s), float(w))
                for t, s, w in itertools.product(self.t_starts, self.s_values, self.cfg_weights)]

    def mean_by(self, axis: str, metric: str) -> dict[float, float]:
        """Metric averaged over the other axes, skipping failed cells."""
        acc: dict[float, list[float]] = {}
        for r in self.rows:
            if r.ok:
                acc.setdefault(getattr(r, axis), []).append(getattr(r, metric))
        return {k: sum(v) / len(v) for k, v in acc.items()}


def sweep_noise_step(grid: SweepGrid, stack, scenes: Sequence[SceneSample], init: LatentState,
                     opt_cfg: OptimizeConfig, eval_scenes: Sequence[SceneSample],
                     reference: Mapping[str, Sequence[BoundingBox]], embedder=None,
                     eval_seed: int = 1234, **eval_kw) -> SweepGrid:
    """Fill ``grid.rows`` in place (and return it). A failing cell is kept
    as a row with NaN metrics and an ``error: ...`` status."""
    init_img = stack.codec.decode(init.value).detach()
    embedder = embedder or RandomProjectionEmbedder(channels=init_img.shape[0])
    grid.rows = []
    for t_start, s, w in grid.cells():
        try:
            sampler = replace(opt_cfg.sampler, t_start=t_start, s=s, cfg_weight=w)
            sampler.validate(stack.schedule, aps=True)
            best, _ = optimize_patch(init, scenes, replace(opt_cfg, sampler=sampler), stack)
            final = resample_patch(best, replace(sampler, seed=eval_seed), stack).detach()
            report = evaluate_map(stack.detectors[0], eval_scenes, reference, final, stack.ranges,
                                  seed=eval_seed, geometry=stack.geometry, **eval_kw)
            row = SweepRow(t_start, s, w, report.map_percent, embedding_similarity(init_img, final, embedder))
        except Exception as exc:  # noqa: BLE001
            log.warning("sweep cell (t_start=%s, s=%s, w=%s) failed: %s", t_start, s, w, exc)
            row = SweepRow(t_start, s, w, math.nan, math.nan, f"error: {type(exc).__name__}: {exc}")
        log.info("sweep cell %s", row)
        grid.rows.append(row)
    return grid


def write_sweep_csv(path, grid: SweepGrid) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in grid.rows:
            w.writerow([r.t_start, r.s, repr(r.cfg_w), repr(r.map_percent), repr(r.clip_sim), r.status])
    return path


def read_sweep_csv(path) -> SweepGrid:
    """Parse a sweep CSV back into a grid with absolute step sizes."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected sweep CSV header {header}")
        rows = [SweepRow(int(t), int(s), float(w), float(m), float(c), status)
                for t, s, w, m, c, status in reader]
    axes = [list(dict.fromkeys(getattr(r, a) for r in rows)) for a in ("t_start", "s", "cfg_w")]
    return SweepGrid(axes[0], axes[1], axes[2], "absolute", rows)


def plot_sweep(grid: SweepGrid, path) -> Path | None:
    """Dual-axis line plot of mAP and similarity against the swept variable.
    Best effort: returns None instead of raising."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        from matplotlib import pyplot as plt

        axis = "cfg_w" if len(grid.cfg_weights) > 1 and len(grid.t_starts) == 1 else "t_start"
        maps = grid.mean_by(axis, "map_percent")
        sims = grid.mean_by(axis, "clip_sim")
        xs = sorted(maps)
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(xs, [maps[x] for x in xs], "o-", color="tab:blue", label="mAP")
        ax.set_xlabel(axis)
        ax.set_ylabel("mAP (%)", color="tab:blue")
        ax2 = ax.twinx()
        ax2.plot(xs, [sims[x] for x in xs], "s-", color="tab:red", label="similarity")
        ax2.set_ylabel("embedding similarity", color="tab:red")
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=100)
        plt.close(fig)
        return path
    except Exception as exc:  # noqa: BLE001
        log.warning("sweep plot failed: %s", exc)
        return None
