import csv

import numpy as np
import pytest
import torch

from patchsmith import cli, seeding
from patchsmith.errors import NumericError
from patchsmith.io import read_png, to_uint8, write_png

# Small corpora keep CLI runs quick; the trained fixtures are shared via the cache.
SMALL = ["--set", "toy.n_scenes=12", "--set", "toy.n_eval_scenes=8", "--set", "optim.batch_size=4",
         "--set", "optim.checkpoint_every=2"]


def run(cmd, out, *extra):
    return cli.main([cmd, "--out", str(out), *SMALL, *extra])


@pytest.fixture(scope="module")
def fixtures_ready():
    """Build (or load) the cached toy fixtures once for this module."""
    from patchsmith.toyworld import ToyWorldConfig, build_toy_world

    build_toy_world(ToyWorldConfig(n_scenes=4, n_eval_scenes=4))


# ------------------------------------------------------------ exit codes


def test_unknown_key_exits_2(tmp_path, capsys):
    assert run("generate", tmp_path, "--set", "sampler.tstart=3") == 2
    assert "sampler.tstart" in capsys.readouterr().err


def test_bad_values_exit_2(tmp_path):
    assert run("generate", tmp_path, "--set", "world.kind=mars") == 2
    assert run("generate", tmp_path, "--set", "run.dtype=float16") == 2
    assert run("generate", tmp_path, "--config", str(tmp_path / "nope.cfg")) == 2


def test_missing_asset_exits_3(tmp_path, capsys):
    man = tmp_path / "gen.txt"
    man.write_text("generator.kind = toy\ngenerator.checkpoint = weights/missing.pt\n")
    code = run("generate", tmp_path / "o", "--set", "world.kind=corpus", "--set", f"generator.manifest={man}")
    assert code == 3
    err = capsys.readouterr().err
    assert "generator.checkpoint" in err and str(tmp_path / "weights" / "missing.pt") in err


def test_numeric_failure_exits_4(tmp_path, monkeypatch, capsys):
    def boom(cfg, out):
        raise NumericError("loss became NaN", {"iteration": 7})

    monkeypatch.setattr(cli, "cmd_generate", boom)
    assert run("generate", tmp_path) == 4
    err = capsys.readouterr().err
    assert "NaN" in err and "'iteration': 7" in err


# ------------------------------------------------------------ generate


def _pointmass_manifest(tmp_path, target):
    write_png(target, tmp_path / "target.png")
    man = tmp_path / "gen.txt"
    man.write_text("generator.kind = pointmass\ngenerator.checkpoint = target.png\n")
    return man


def test_generate_with_pointmass_reproduces_target(tmp_path):
    target = seeding.uniform((3, 16, 16), 5, 0.0, 1.0, torch.float32)
    man = _pointmass_manifest(tmp_path, target)
    assert run("generate", tmp_path / "o", "--set", "world.kind=corpus", "--set", f"generator.manifest={man}",
               "--set", "run.dtype=float64") == 0
    out = read_png(tmp_path / "o" / "patch_init.png")
    assert np.array_equal(to_uint8(out), to_uint8(read_png(tmp_path / "target.png")))
    assert (tmp_path / "o" / "config.resolved.txt").exists()
    assert (tmp_path / "o" / "latent_init.npy").exists()


def test_generate_is_deterministic(tmp_path, fixtures_ready):
    for name in ("a", "b"):
        assert run("generate", tmp_path / name, "--seed", "3") == 0
    assert run("generate", tmp_path / "c", "--seed", "4") == 0
    a, b, c = ((tmp_path / n / "patch_init.png").read_bytes() for n in "abc")
    assert a == b and a != c


# ------------------------------------------------------------ attack


def test_attack_with_zero_iterations_keeps_init(tmp_path, fixtures_ready):
    assert run("attack", tmp_path, "--set", "optim.max_iterations=0") == 0
    assert (tmp_path / "patch_final.png").read_bytes() == (tmp_path / "patch_init.png").read_bytes()
    assert (tmp_path / "trace.csv").read_text().splitlines() == ["iteration,det_term,tv_term,total,lr"]


def test_attack_outputs_and_reproducibility(tmp_path, fixtures_ready):
    for name in ("a", "b"):
        assert run("attack", tmp_path / name, "--set", "optim.max_iterations=3") == 0
    a, b = tmp_path / "a", tmp_path / "b"
    rows = list(csv.reader((a / "trace.csv").open()))
    assert len(rows) == 4 and rows[0][0] == "iteration"
    for f in ("patch_final.png", "trace.csv", "patch_resampled.png", "latent_final.npy"):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    ckpts = sorted(p.name for p in (a / "checkpoints").glob("*.npy"))
    assert ckpts == ["ckpt_000000.npy", "ckpt_000002.npy", "ckpt_000003.npy"]


# ------------------------------------------------------------ eval


def test_eval_clean_is_100_and_matrix(tmp_path, fixtures_ready, capsys):
    assert run("eval", tmp_path, "--matrix", "--set", "eval.patch=random") == 0
    rows = list(csv.DictReader((tmp_path / "eval.csv").open()))
    assert [r["dataset_id"] for r in rows] == ["clean", "patched"]
    assert float(rows[0]["map_percent"]) == 100.0
    assert "clean: mAP 100.00" in capsys.readouterr().out
    matrix = list(csv.reader((tmp_path / "matrix.csv").open()))
    assert matrix[0] == ["patch", "detector", "Avg."]
    assert [r[0] for r in matrix[1:]] == ["Random Noise", "Unoptimized Patch", "patch", "Avg."]


def test_eval_missing_patch_exits_3(tmp_path, fixtures_ready):
    assert run("eval", tmp_path, "--set", f"eval.patch={tmp_path / 'nope.png'}") == 3


# ------------------------------------------------------------ sweep


def test_guidance_weight_sweep_rows(tmp_path, fixtures_ready, capsys):
    assert run("sweep", tmp_path, "--set", "sweep.cfg_weights=1..20", "--set", "sweep.t_starts=300",
               "--set", "sweep.s_values=100", "--set", "sweep.max_iterations=1") == 0
    rows = list(csv.DictReader((tmp_path / "sweep.csv").open()))
    assert [float(r["cfg_w"]) for r in rows] == [float(w) for w in range(1, 21)]
    assert all(r["status"] == "ok" for r in rows)
    assert "sweep: 20 cells, 0 failed" in capsys.readouterr().out
    assert (tmp_path / "sweep.png").exists()
