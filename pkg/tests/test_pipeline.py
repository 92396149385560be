"""End-to-end tests for the config-driven commands and the CLI."""

import json
import time

import numpy as np
import pytest
from click.testing import CliRunner

from deskdiff.cli import main
from deskdiff.config import load_config
from deskdiff.errors import ParameterError, SetupError
from deskdiff.fieldio import load_field
from deskdiff.model import save_weights
from deskdiff.pipeline import (
    cmd_bench_evals,
    cmd_convergence,
    cmd_edit,
    cmd_eval_masks,
    cmd_invert,
    cmd_sweep_scale,
    cmd_variations,
    format_cell,
    write_csv,
)
from deskdiff.tinynet import init_tiny_weights

TWO_BLOB_MODEL = {"gmm": {"shape": [1, 6, 6], "components": [
    {"mean": 0.6, "scale": 0.25},
    {"mean": -0.6, "scale": 0.25},
]}}


def base_config(**overrides):
    data = {
        "seed": 7,
        "schedule": {"kind": "linear", "T": 60},
        "grid": {"steps": 8},
        "model": TWO_BLOB_MODEL,
        "input": {"sample": {"seed": 3}},
        "edits": [{"components": [0], "scale": 4.0}],
    }
    data.update(overrides)
    return data


def write_and_load(tmp_path, data, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return load_config(path)


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    header = lines[1].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[2:]]
    return lines[0].split("=", 1)[1], header, rows


class TestCsvWriting:
    def test_header_and_formatting(self, tmp_path):
        rows = [{"a": 1.5, "b": True, "c": "x"}, {"a": 0.1 + 0.2, "b": False, "c": "y"}]
        path = write_csv(tmp_path / "r.csv", ["a", "b", "c"], rows, "cafe01")
        digest, header, out = read_csv(path)
        assert digest == "cafe01"
        assert header == ["a", "b", "c"]
        assert out[0] == {"a": "1.5", "b": "true", "c": "x"}
        assert out[1]["a"] == "0.3"

    def test_comma_in_cell_rejected(self, tmp_path):
        with pytest.raises(ParameterError, match="delimited"):
            write_csv(tmp_path / "r.csv", ["a"], [{"a": "x,y"}], "00")

    def test_float_keeps_ten_significant_digits(self):
        assert format_cell(1.0 / 3.0) == "0.3333333333"


class TestInvertCommand:
    def test_replay_is_exact_and_files_land(self, tmp_path):
        cfg = write_and_load(tmp_path, base_config())
        result = cmd_invert(cfg, tmp_path / "out")
        assert result.ok
        assert result.summary["rmse"] <= 1e-6
        assert result.summary["executed"] == 8
        for name in ("invert.csv", "invert_zpower.csv", "invert.png",
                     "input.lpf", "reconstruction.lpf"):
            assert (tmp_path / "out" / name).exists(), name
        digest, _, rows = read_csv(tmp_path / "out" / "invert_zpower.csv")
        assert digest == cfg.config_hash
        assert len(rows) == 8
        recon = load_field(tmp_path / "out" / "reconstruction.lpf")
        original = load_field(tmp_path / "out" / "input.lpf")
        assert np.sqrt(np.mean((recon - original) ** 2)) <= 1e-6

    def test_second_run_reuses_cached_latents(self, tmp_path):
        cfg = write_and_load(tmp_path, base_config())
        first = cmd_invert(cfg, tmp_path / "out")
        second = cmd_invert(cfg, tmp_path / "out")
        assert first.summary["cached"] is False
        assert second.summary["cached"] is True
        assert second.summary["rmse"] == first.summary["rmse"]

    def test_model_change_does_not_reuse_cache(self, tmp_path):
        cfg_a = write_and_load(tmp_path, base_config(), "a.json")
        other_model = {"gmm": {"shape": [1, 6, 6], "components": [
            {"mean": 0.5, "scale": 0.25}, {"mean": -0.5, "scale": 0.25},
        ]}}
        cfg_b = write_and_load(tmp_path, base_config(model=other_model), "b.json")
        cmd_invert(cfg_a, tmp_path / "out")
        result = cmd_invert(cfg_b, tmp_path / "out")
        assert result.summary["cached"] is False
        assert len(list((tmp_path / "out" / "latents").glob("*.lpl"))) == 2


class TestEditCommand:
    def test_no_edits_reproduces_reconstruction_bitwise(self, tmp_path):
        cfg = write_and_load(tmp_path, base_config(edits=[]))
        result = cmd_edit(cfg, tmp_path / "out")
        assert result.ok
        assert result.summary["identical_to_recon"] is True
        assert result.summary["rms_delta"] == 0.0
        assert not (tmp_path / "out" / "edit_masks.csv").exists()

    def test_edit_changes_output_and_counts_evals(self, tmp_path):
        cfg = write_and_load(tmp_path, base_config())
        result = cmd_edit(cfg, tmp_path / "out")
        assert result.ok
        assert result.summary["rms_delta"] > 0
        assert result.summary["identical_to_recon"] is False
        assert (result.summary["conditional_evals_measured"]
                == result.summary["conditional_evals_predicted"] == 8)

    def test_skip_gates_concept_evaluations(self, tmp_path):
        edits = [
            {"components": [0], "scale": 2.0},
            {"components": [1], "direction": "negative", "scale": 2.0, "skip": 0.5},
        ]
        cfg = write_and_load(tmp_path, base_config(edits=edits))
        result = cmd_edit(cfg, tmp_path / "out")
        assert result.ok
        measured = result.summary["conditional_evals_measured"]
        assert 8 < measured < 16
        skipped_rows = [r for r in result.rows if r["concept"] == 1]
        assert all(r["t"] <= 30 for r in skipped_rows)

    def test_dump_masks_writes_one_set_per_record(self, tmp_path):
        cfg = write_and_load(tmp_path, base_config())
        result = cmd_edit(cfg, tmp_path / "out", dump_masks=True)
        pgms = sorted((tmp_path / "out" / "masks").glob("*.pgm"))
        assert len(pgms) == 3 * len(result.rows)
        digest, _, rows = read_csv(tmp_path / "out" / "edit_masks.csv")
        assert digest == cfg.config_hash
        assert len(rows) == len(result.rows)

    def test_mask_figure_written(self, tmp_path):
        cfg = write_and_load(tmp_path, base_config())
        cmd_edit(cfg, tmp_path / "out")
        assert (tmp_path / "out" / "edit.png").exists()


class TestVariationsCommand:
    def test_seeds_give_distinct_edits(self, tmp_path):
        cfg = write_and_load(tmp_path, base_config(experiment={"variations": 3}))
        result = cmd_variations(cfg, tmp_path / "out")
        assert result.ok
        assert result.summary["distinct_outputs"] == 3
        digests = {row["edited_digest"] for row in result.rows}
        assert len(digests) == 3
        assert (tmp_path / "out" / "variations.png").exists()
        for v in range(3):
            assert (tmp_path / "out" / "variations" / f"v{v}-edited.lpf").exists()

    def test_reconstruction_stays_exact_per_seed(self, tmp_path):
        cfg = write_and_load(tmp_path, base_config(experiment={"variations": 3}))
        result = cmd_variations(cfg, tmp_path / "out")
        for row in result.rows:
            assert row["rmse_recon"] <= 1e-6

    def test_single_variation_rejected(self, tmp_path):
        cfg = write_and_load(tmp_path, base_config(experiment={"variations": 1}))
        with pytest.raises(ParameterError, match="at least 2"):
            cmd_variations(cfg, tmp_path / "out")


class TestSweepCommand:
    def test_projections_increase_with_scale(self, tmp_path):
        cfg = write_and_load(tmp_path, base_config(
            experiment={"scales": [0, 1, 2, 4, 8]},
        ))
        result = cmd_sweep_scale(cfg, tmp_path / "out")
        assert result.ok
        projections = [row["projection"] for row in result.rows]
        assert projections == sorted(projections)
        assert projections[0] == 0.0
        assert (tmp_path / "out" / "sweep_scale.csv").exists()
        assert (tmp_path / "out" / "sweep_scale.png").exists()

    def test_zero_effect_edit_fails_the_check(self, tmp_path):
        model = {"gmm": {"shape": [1, 6, 6], "components": [{"mean": 0.4, "scale": 0.3}]}}
        cfg = write_and_load(tmp_path, base_config(model=model))
        result = cmd_sweep_scale(cfg, tmp_path / "out")
        assert not result.ok
        assert any("no effect" in f for f in result.failures)

    def test_needs_exactly_one_edit(self, tmp_path):
        edits = [{"components": [0]}, {"components": [1]}]
        cfg = write_and_load(tmp_path, base_config(edits=edits))
        with pytest.raises(ParameterError, match="exactly one edit"):
            cmd_sweep_scale(cfg, tmp_path / "out")


class TestConvergenceCommand:
    def centered_config(self, grids=(4, 8, 16)):
        return {
            "seed": 11,
            "schedule": {"kind": "linear", "T": 500},
            "grid": {"steps": 8},
            "model": {"gmm": {"shape": [1, 4, 4], "components": [{"mean": 0.0, "scale": 1.0}]}},
            "experiment": {"grids": list(grids)},
        }

    def test_errors_strictly_decrease(self, tmp_path):
        cfg = write_and_load(tmp_path, self.centered_config())
        start = time.perf_counter()
        result = cmd_convergence(cfg, tmp_path / "out")
        assert time.perf_counter() - start < 5.0
        assert result.ok
        solver = [r["rel_error"] for r in result.rows if r["family"] == "solver-2m"]
        assert all(b < a for a, b in zip(solver, solver[1:]))
        ddim = [r["rel_error"] for r in result.rows if r["family"] == "ddim"]
        assert all(b < a for a, b in zip(ddim, ddim[1:]))
        assert (tmp_path / "out" / "convergence.csv").exists()
        assert (tmp_path / "out" / "convergence.png").exists()

    def test_noncentered_model_rejected_before_writing(self, tmp_path):
        data = self.centered_config()
        data["model"]["gmm"]["components"] = [{"mean": 1.0, "scale": 1.0}]
        cfg = write_and_load(tmp_path, data)
        with pytest.raises(ParameterError, match="zero-mean"):
            cmd_convergence(cfg, tmp_path / "out")
        assert not (tmp_path / "out").exists()

    def test_multi_component_model_rejected(self, tmp_path):
        data = self.centered_config()
        data["model"] = TWO_BLOB_MODEL
        cfg = write_and_load(tmp_path, data)
        with pytest.raises(ParameterError, match="single zero-mean"):
            cmd_convergence(cfg, tmp_path / "out")


class TestEvalMasksCommand:
    def tiny_config(self, tmp_path, scenes=2):
        save_weights(tmp_path / "w.lpw", init_tiny_weights(11, features=8))
        return {
            "seed": 5,
            "schedule": {"kind": "linear", "T": 100},
            "grid": {"steps": 20},
            "model": {"tiny": {"weights": "w.lpw"}},
            "input": {"scene": {"seed": 9, "index": 4}},
            "experiment": {"scenes": scenes},
        }

    def test_mechanics_rows_and_files(self, tmp_path):
        cfg = write_and_load(tmp_path, self.tiny_config(tmp_path))
        result = cmd_eval_masks(cfg, tmp_path / "out")
        assert len(result.rows) == result.summary["probes"] > 0
        for row in result.rows:
            assert 0.0 <= row["iou_m1"] <= 1.0
            assert 0.0 <= row["iou_m2"] <= 1.0
            assert 0.0 <= row["iou_inter"] <= 1.0
            assert 0.5 <= row["lam"] <= 0.98
            assert 30 <= row["t"] <= 70
            assert row["scene"] >= 4
        assert (tmp_path / "out" / "eval_masks.csv").exists()
        assert (tmp_path / "out" / "eval_masks.png").exists()

    def test_mixture_model_rejected(self, tmp_path):
        cfg = write_and_load(tmp_path, base_config())
        with pytest.raises(SetupError, match="trained"):
            cmd_eval_masks(cfg, tmp_path / "out")


class TestBenchCommand:
    def test_budgets_match_exactly(self, tmp_path):
        edits = [
            {"components": [0], "scale": 2.0},
            {"components": [1], "direction": "negative", "skip": 0.5},
        ]
        cfg = write_and_load(tmp_path, base_config(
            edits=edits,
            experiment={"bench_inversions": 4, "bench_generations": 3},
        ))
        result = cmd_bench_evals(cfg, tmp_path / "out")
        assert result.ok
        inversion, generation = result.rows
        assert inversion["predicted"] == inversion["measured"] == 4 * 8
        assert generation["predicted"] == generation["measured"]
        per_gen = generation["predicted"] // 3
        # 8 unconditional + 8 for the ungated concept + a strict subset for
        # the skip-gated one
        assert 8 + 8 < per_gen < 8 + 2 * 8
        assert (tmp_path / "out" / "bench_evals.csv").exists()
        assert (tmp_path / "out" / "bench_evals.png").exists()


class TestCli:
    def run(self, tmp_path, data, *args):
        path = tmp_path / "cli.json"
        path.write_text(json.dumps(data))
        runner = CliRunner()
        return runner.invoke(main, [*args, "--config", str(path),
                                    "--out", str(tmp_path / "cliout")])

    def test_invert_succeeds_and_lists_files(self, tmp_path):
        result = self.run(tmp_path, base_config(), "invert")
        assert result.exit_code == 0, result.output
        assert "rmse:" in result.output
        assert "wrote" in result.output

    def test_edit_with_dump_masks(self, tmp_path):
        path = tmp_path / "cli.json"
        path.write_text(json.dumps(base_config()))
        result = CliRunner().invoke(main, [
            "edit", "--config", str(path), "--out", str(tmp_path / "cliout"),
            "--dump-masks",
        ])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "cliout" / "masks").is_dir()

    def test_config_error_exits_one(self, tmp_path):
        result = self.run(tmp_path, {"model": TWO_BLOB_MODEL, "nonsense": 1}, "invert")
        assert result.exit_code == 1
        assert "error:" in result.output

    def test_failed_check_exits_two(self, tmp_path):
        data = base_config(
            model={"gmm": {"shape": [1, 6, 6], "components": [{"mean": 0.4, "scale": 0.3}]}},
        )
        result = self.run(tmp_path, data, "sweep-scale")
        assert result.exit_code == 2
        assert "check failed" in result.output

    def test_all_subcommands_registered(self):
        result = CliRunner().invoke(main, ["--help"])
        for name in ("invert", "edit", "variations", "sweep-scale",
                     "convergence", "eval-masks", "bench-evals"):
            assert name in result.output
