"""Tests for run-file parsing, validation, hashing, and builders."""

import json

import numpy as np
import pytest

from deskdiff.config import (
    build_grid_from,
    build_instructions,
    build_model_from,
    build_schedule_from,
    load_config,
    parse_config,
    resolve_input_field,
)
from deskdiff.errors import FormatError, ParameterError
from deskdiff.fieldio import save_field, write_mask_pgm
from deskdiff.model import AnalyticGMMDenoiser, save_weights
from deskdiff.shapes import SIDE
from deskdiff.tinynet import TinyDenoiser, init_tiny_weights

MINIMAL = {
    "model": {"gmm": {"shape": [1, 4, 4], "components": [{"mean": 0.0}]}},
}


def write_config(tmp_path, data, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


class TestParsing:
    def test_minimal_config_fills_defaults(self, tmp_path):
        cfg = load_config(write_config(tmp_path, MINIMAL))
        assert cfg.schedule.T == 1000
        assert cfg.grid.steps == 50
        assert cfg.grid.terminal == "exact"
        assert cfg.seed == 0
        assert cfg.edits == ()
        assert cfg.experiment.scales == (0.0, 2.0, 4.0, 8.0, 12.0, 16.0)
        assert cfg.experiment.grids == (4, 8, 16, 32, 64)
        assert cfg.input is None

    def test_hash_ignores_formatting_and_key_order(self, tmp_path):
        a = load_config(write_config(tmp_path, {
            "model": MINIMAL["model"], "seed": 3, "schedule": {"T": 100, "kind": "linear"},
        }, "a.json"))
        b = load_config(write_config(tmp_path, {
            "schedule": {"kind": "linear", "T": 100}, "seed": 3, "model": MINIMAL["model"],
        }, "b.json"))
        assert a.config_hash == b.config_hash

    def test_hash_changes_with_values(self, tmp_path):
        a = load_config(write_config(tmp_path, {**MINIMAL, "seed": 1}, "a.json"))
        b = load_config(write_config(tmp_path, {**MINIMAL, "seed": 2}, "b.json"))
        assert a.config_hash != b.config_hash

    def test_unknown_top_level_key_rejected(self, tmp_path):
        with pytest.raises(ParameterError, match="unknown keys"):
            load_config(write_config(tmp_path, {**MINIMAL, "extra": 1}))

    def test_unknown_section_key_rejected(self, tmp_path):
        data = {**MINIMAL, "schedule": {"T": 10, "betas": [0.1]}}
        with pytest.raises(ParameterError, match="unknown keys in schedule"):
            load_config(write_config(tmp_path, data))

    def test_model_required(self, tmp_path):
        with pytest.raises(ParameterError, match="model"):
            load_config(write_config(tmp_path, {"seed": 1}))

    def test_model_must_name_exactly_one_kind(self, tmp_path):
        data = {"model": {"gmm": MINIMAL["model"]["gmm"], "tiny": {"weights": "w.lpw"}}}
        with pytest.raises(ParameterError, match="exactly one"):
            load_config(write_config(tmp_path, data))

    def test_input_must_name_exactly_one_kind(self, tmp_path):
        data = {**MINIMAL, "input": {"path": "x.lpf", "sample": {"seed": 1}}}
        with pytest.raises(ParameterError, match="exactly one"):
            load_config(write_config(tmp_path, data))

    def test_edit_needs_conditioning(self, tmp_path):
        data = {**MINIMAL, "edits": [{"label": "x"}]}
        with pytest.raises(ParameterError, match="needs tokens"):
            load_config(write_config(tmp_path, data))

    def test_edit_rejects_both_conditionings(self, tmp_path):
        data = {**MINIMAL, "edits": [{"tokens": [1], "components": [0]}]}
        with pytest.raises(ParameterError, match="both"):
            load_config(write_config(tmp_path, data))

    def test_bad_json_is_a_format_error(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(FormatError, match="not valid JSON"):
            load_config(path)

    def test_missing_file_is_a_format_error(self, tmp_path):
        with pytest.raises(FormatError, match="cannot read"):
            load_config(tmp_path / "absent.json")

    def test_bool_rejected_where_number_expected(self, tmp_path):
        data = {**MINIMAL, "seed": True}
        with pytest.raises(ParameterError, match="wrong type"):
            load_config(write_config(tmp_path, data))

    def test_negative_seed_rejected(self, tmp_path):
        with pytest.raises(ParameterError, match="non-negative"):
            load_config(write_config(tmp_path, {**MINIMAL, "seed": -1}))


class TestBuilders:
    def test_schedule_and_grid(self, tmp_path):
        data = {
            **MINIMAL,
            "schedule": {"T": 200, "beta_max": 0.01},
            "grid": {"steps": 10, "skip": 0.2, "terminal": "deterministic"},
        }
        cfg = load_config(write_config(tmp_path, data))
        schedule = build_schedule_from(cfg)
        assert schedule.T == 200
        grid = build_grid_from(cfg, schedule)
        assert grid.n_steps == 10
        assert grid.steps[0] == 200 and grid.steps[-1] == 1
        assert grid.terminal == "deterministic"
        assert grid.start_index > 0

    def test_gmm_model_built_with_broadcast_and_nested_means(self, tmp_path):
        nested = [[[1.0, 2.0], [3.0, 4.0]]]
        data = {"model": {"gmm": {"shape": [1, 2, 2], "components": [
            {"mean": 0.5, "scale": 2.0, "weight": 1.0},
            {"mean": nested, "scale": 1.0, "weight": 3.0},
        ]}}}
        cfg = load_config(write_config(tmp_path, data))
        model = build_model_from(cfg, build_schedule_from(cfg))
        assert isinstance(model, AnalyticGMMDenoiser)
        np.testing.assert_array_equal(model.spec.means[0], np.full((1, 2, 2), 0.5))
        np.testing.assert_array_equal(model.spec.means[1], np.asarray(nested))
        np.testing.assert_allclose(model.spec.weights, [0.25, 0.75])

    def test_nested_mean_shape_mismatch_rejected(self, tmp_path):
        data = {"model": {"gmm": {"shape": [1, 4, 4], "components": [{"mean": [[[1.0]]]}]}}}
        cfg = load_config(write_config(tmp_path, data))
        with pytest.raises(ParameterError, match="mean shape"):
            build_model_from(cfg, build_schedule_from(cfg))

    def test_tiny_model_loaded_from_relative_path(self, tmp_path):
        weights = init_tiny_weights(3, features=8)
        save_weights(tmp_path / "w.lpw", weights)
        cfg = load_config(write_config(tmp_path, {"model": {"tiny": {"weights": "w.lpw"}}}))
        model = build_model_from(cfg, build_schedule_from(cfg))
        assert isinstance(model, TinyDenoiser)
        assert model.fingerprint_bytes == TinyDenoiser(weights).fingerprint_bytes

    def test_input_from_path(self, tmp_path):
        field = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        save_field(tmp_path / "x.lpf", field)
        cfg = load_config(write_config(tmp_path, {**MINIMAL, "input": {"path": "x.lpf"}}))
        model = build_model_from(cfg, build_schedule_from(cfg))
        out = resolve_input_field(cfg, model)
        assert out.tobytes() == field.tobytes()

    def test_input_sample_is_deterministic(self, tmp_path):
        cfg = load_config(write_config(tmp_path, {**MINIMAL, "input": {"sample": {"seed": 9}}}))
        model = build_model_from(cfg, build_schedule_from(cfg))
        a = resolve_input_field(cfg, model)
        b = resolve_input_field(cfg, model)
        assert a.shape == (1, 4, 4) and a.dtype == np.float32
        assert a.tobytes() == b.tobytes()

    def test_input_scene(self, tmp_path):
        data = {**MINIMAL, "input": {"scene": {"seed": 4, "index": 2}}}
        cfg = load_config(write_config(tmp_path, data))
        model = build_model_from(cfg, build_schedule_from(cfg))
        field = resolve_input_field(cfg, model)
        assert field.shape == (1, SIDE, SIDE)

    def test_input_sample_requires_mixture(self, tmp_path):
        weights = init_tiny_weights(3, features=8)
        save_weights(tmp_path / "w.lpw", weights)
        data = {"model": {"tiny": {"weights": "w.lpw"}}, "input": {"sample": {"seed": 1}}}
        cfg = load_config(write_config(tmp_path, data))
        model = build_model_from(cfg, build_schedule_from(cfg))
        with pytest.raises(ParameterError, match="mixture"):
            resolve_input_field(cfg, model)

    def test_missing_input_section_rejected(self, tmp_path):
        cfg = load_config(write_config(tmp_path, MINIMAL))
        model = build_model_from(cfg, build_schedule_from(cfg))
        with pytest.raises(ParameterError, match="input"):
            resolve_input_field(cfg, model)


class TestInstructions:
    def test_component_edits_for_mixture(self, tmp_path):
        data = {**MINIMAL, "edits": [
            {"components": [0], "direction": "negative", "scale": 3.0, "label": "fade"},
        ]}
        cfg = load_config(write_config(tmp_path, data))
        model = build_model_from(cfg, build_schedule_from(cfg))
        (ins,) = build_instructions(cfg, model)
        assert ins.conditioning.components == (0,)
        assert ins.direction == "negative" and ins.scale == 3.0 and ins.label == "fade"

    def test_token_edit_on_mixture_rejected(self, tmp_path):
        data = {**MINIMAL, "edits": [{"tokens": [1]}]}
        cfg = load_config(write_config(tmp_path, data))
        model = build_model_from(cfg, build_schedule_from(cfg))
        with pytest.raises(ParameterError, match="mixture"):
            build_instructions(cfg, model)

    def test_component_edit_on_trained_model_rejected(self, tmp_path):
        weights = init_tiny_weights(3, features=8)
        save_weights(tmp_path / "w.lpw", weights)
        data = {"model": {"tiny": {"weights": "w.lpw"}}, "edits": [{"components": [0]}]}
        cfg = load_config(write_config(tmp_path, data))
        model = build_model_from(cfg, build_schedule_from(cfg))
        with pytest.raises(ParameterError, match="trained"):
            build_instructions(cfg, model)

    def test_user_mask_flows_through(self, tmp_path):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[1:3, 1:3] = 1
        write_mask_pgm(tmp_path / "m.pgm", mask)
        data = {**MINIMAL, "edits": [{"components": [0], "user_mask": "m.pgm"}]}
        cfg = load_config(write_config(tmp_path, data))
        model = build_model_from(cfg, build_schedule_from(cfg))
        (ins,) = build_instructions(cfg, model)
        np.testing.assert_array_equal(ins.user_mask, mask.astype(np.float32))

    def test_attend_positions_flow_through_for_token_edits(self, tmp_path):
        weights = init_tiny_weights(3, features=8)
        save_weights(tmp_path / "w.lpw", weights)
        data = {
            "model": {"tiny": {"weights": "w.lpw"}},
            "edits": [{"tokens": [0, 1], "attend": [0]}],
        }
        cfg = load_config(write_config(tmp_path, data))
        model = build_model_from(cfg, build_schedule_from(cfg))
        (ins,) = build_instructions(cfg, model)
        assert ins.attend_positions == (0,)

    def test_default_labels_are_positional(self, tmp_path):
        data = {**MINIMAL, "edits": [{"components": [0]}]}
        cfg = load_config(write_config(tmp_path, data))
        model = build_model_from(cfg, build_schedule_from(cfg))
        (ins,) = build_instructions(cfg, model)
        assert ins.label == "edit-0"
