"""Run configuration: a strict JSON schema and builders for its pieces.

A run file describes everything a command needs: the noise schedule, the
step grid, the model (analytic mixture or trained weights), the input
field, the inversion seed, edit instructions, and experiment knobs. Every
section is validated eagerly, unknown keys are rejected, and relative
paths resolve against the config file's directory, so a config-driven run
either fails before touching the filesystem or runs with exactly the
values the file says.

The canonical form (defaults filled in, keys sorted) is hashed with
SHA-256; report files carry that hash so outputs can be traced back to the
configuration that produced them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import FormatError, ParameterError
from .fieldio import load_field, read_mask_pgm
from .guidance import EditInstruction
from .model import AnalyticGMMDenoiser, Conditioning, DenoiserModel, Field, GMMSpec, load_weights
from .rng import DOMAIN_INPUT, stream_generator
from .schedule import NoiseSchedule, TimestepGrid, build_grid, build_schedule
from .shapes import make_scene
from .tinynet import TinyDenoiser

__all__ = [
    "RunConfig",
    "load_config",
    "parse_config",
    "build_schedule_from",
    "build_grid_from",
    "build_model_from",
    "resolve_input_field",
    "build_instructions",
]

_DIRECTIONS = ("positive", "negative")


def _require_keys(section: str, data: dict, allowed: set[str]) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ParameterError(f"unknown keys in {section}: {sorted(unknown)}")


def _expect(section: str, data: dict, key: str, types, default=None, required=False):
    if key not in data:
        if required:
            raise ParameterError(f"{section} requires {key!r}")
        return default
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, types):
        raise ParameterError(f"{section}.{key} has wrong type: {type(value).__name__}")
    return value


def _expect_number(section, data, key, default=None, required=False):
    return _expect(section, data, key, (int, float), default, required)


@dataclass(frozen=True)
class ScheduleSection:
    kind: str = "linear"
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def canonical(self) -> dict:
        return {"kind": self.kind, "T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max}


@dataclass(frozen=True)
class GridSection:
    steps: int = 50
    skip: float = 0.0
    terminal: str = "exact"

    def canonical(self) -> dict:
        return {"steps": self.steps, "skip": self.skip, "terminal": self.terminal}


@dataclass(frozen=True)
class ComponentSection:
    mean: Union[float, tuple]
    scale: float = 1.0
    weight: float = 1.0

    def canonical(self) -> dict:
        return {"mean": self.mean, "scale": self.scale, "weight": self.weight}


@dataclass(frozen=True)
class ModelSection:
    kind: str  # "gmm" or "tiny"
    shape: tuple[int, int, int] = (1, 8, 8)
    components: tuple[ComponentSection, ...] = ()
    weights_path: str = ""

    def canonical(self) -> dict:
        if self.kind == "gmm":
            return {
                "gmm": {
                    "shape": list(self.shape),
                    "components": [c.canonical() for c in self.components],
                }
            }
        return {"tiny": {"weights": self.weights_path}}


@dataclass(frozen=True)
class InputSection:
    kind: str  # "path", "sample", or "scene"
    path: str = ""
    seed: int = 0
    index: int = 0

    def canonical(self) -> dict:
        if self.kind == "path":
            return {"path": self.path}
        if self.kind == "sample":
            return {"sample": {"seed": self.seed}}
        return {"scene": {"seed": self.seed, "index": self.index}}


@dataclass(frozen=True)
class EditSection:
    label: str = ""
    direction: str = "positive"
    scale: float = 5.0
    threshold: float = 0.75
    skip: float = 0.0
    tokens: tuple[int, ...] = ()
    components: tuple[int, ...] = ()
    user_mask: str = ""
    attend: tuple[int, ...] = ()

    def canonical(self) -> dict:
        return {
            "label": self.label,
            "direction": self.direction,
            "scale": self.scale,
            "threshold": self.threshold,
            "skip": self.skip,
            "tokens": list(self.tokens),
            "components": list(self.components),
            "user_mask": self.user_mask,
            "attend": list(self.attend),
        }


@dataclass(frozen=True)
class ExperimentSection:
    scales: tuple[float, ...] = (0.0, 2.0, 4.0, 8.0, 12.0, 16.0)
    grids: tuple[int, ...] = (4, 8, 16, 32, 64)
    data_scale: float = 1.0
    variations: int = 3
    scenes: int = 6
    bench_inversions: int = 20
    bench_generations: int = 20
    field_shape: tuple[int, int, int] = (1, 8, 8)

    def canonical(self) -> dict:
        return {
            "scales": list(self.scales),
            "grids": list(self.grids),
            "data_scale": self.data_scale,
            "variations": self.variations,
            "scenes": self.scenes,
            "bench_inversions": self.bench_inversions,
            "bench_generations": self.bench_generations,
            "field_shape": list(self.field_shape),
        }


@dataclass(frozen=True)
class RunConfig:
    schedule: ScheduleSection
    grid: GridSection
    model: ModelSection
    input: Optional[InputSection]
    seed: int
    edits: tuple[EditSection, ...]
    experiment: ExperimentSection
    base_dir: Path

    def canonical(self) -> dict:
        data = {
            "schedule": self.schedule.canonical(),
            "grid": self.grid.canonical(),
            "model": self.model.canonical(),
            "seed": self.seed,
            "edits": [e.canonical() for e in self.edits],
            "experiment": self.experiment.canonical(),
        }
        if self.input is not None:
            data["input"] = self.input.canonical()
        return data

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _parse_schedule(data: dict) -> ScheduleSection:
    _require_keys("schedule", data, {"kind", "T", "beta_min", "beta_max"})
    return ScheduleSection(
        kind=_expect("schedule", data, "kind", str, "linear"),
        T=_expect("schedule", data, "T", int, 1000),
        beta_min=float(_expect_number("schedule", data, "beta_min", 1e-4)),
        beta_max=float(_expect_number("schedule", data, "beta_max", 0.02)),
    )


def _parse_grid(data: dict) -> GridSection:
    _require_keys("grid", data, {"steps", "skip", "terminal"})
    return GridSection(
        steps=_expect("grid", data, "steps", int, 50),
        skip=float(_expect_number("grid", data, "skip", 0.0)),
        terminal=_expect("grid", data, "terminal", str, "exact"),
    )


def _parse_model(data: dict) -> ModelSection:
    _require_keys("model", data, {"gmm", "tiny"})
    if ("gmm" in data) == ("tiny" in data):
        raise ParameterError("model must name exactly one of 'gmm' or 'tiny'")
    if "gmm" in data:
        gmm = data["gmm"]
        _require_keys("model.gmm", gmm, {"shape", "components"})
        shape = _expect("model.gmm", gmm, "shape", list, required=True)
        if len(shape) != 3 or not all(isinstance(v, int) and v > 0 for v in shape):
            raise ParameterError("model.gmm.shape must be three positive integers [C, H, W]")
        comps_raw = _expect("model.gmm", gmm, "components", list, required=True)
        if not comps_raw:
            raise ParameterError("model.gmm.components must not be empty")
        comps = []
        for i, comp in enumerate(comps_raw):
            if not isinstance(comp, dict):
                raise ParameterError(f"model.gmm.components[{i}] must be an object")
            _require_keys(f"model.gmm.components[{i}]", comp, {"mean", "scale", "weight"})
            mean = comp.get("mean", 0.0)
            if isinstance(mean, list):
                mean = _freeze_nested(mean)
            elif not isinstance(mean, (int, float)) or isinstance(mean, bool):
                raise ParameterError(f"model.gmm.components[{i}].mean must be a number or nested list")
            comps.append(ComponentSection(
                mean=mean,
                scale=float(_expect_number(f"model.gmm.components[{i}]", comp, "scale", 1.0)),
                weight=float(_expect_number(f"model.gmm.components[{i}]", comp, "weight", 1.0)),
            ))
        return ModelSection(kind="gmm", shape=tuple(shape), components=tuple(comps))
    tiny = data["tiny"]
    _require_keys("model.tiny", tiny, {"weights"})
    return ModelSection(kind="tiny", weights_path=_expect("model.tiny", tiny, "weights", str, required=True))


def _freeze_nested(value):
    if isinstance(value, list):
        return tuple(_freeze_nested(v) for v in value)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParameterError("nested mean entries must be numbers")
    return float(value)


def _parse_input(data: dict) -> InputSection:
    _require_keys("input", data, {"path", "sample", "scene"})
    present = [k for k in ("path", "sample", "scene") if k in data]
    if len(present) != 1:
        raise ParameterError("input must name exactly one of 'path', 'sample', or 'scene'")
    if "path" in data:
        return InputSection(kind="path", path=_expect("input", data, "path", str, required=True))
    if "sample" in data:
        sample = data["sample"]
        _require_keys("input.sample", sample, {"seed"})
        return InputSection(kind="sample", seed=_expect("input.sample", sample, "seed", int, required=True))
    scene = data["scene"]
    _require_keys("input.scene", scene, {"seed", "index"})
    return InputSection(
        kind="scene",
        seed=_expect("input.scene", scene, "seed", int, required=True),
        index=_expect("input.scene", scene, "index", int, 0),
    )


def _parse_edit(i: int, data: dict) -> EditSection:
    name = f"edits[{i}]"
    _require_keys(
        name, data,
        {"label", "direction", "scale", "threshold", "skip", "tokens", "components", "user_mask", "attend"},
    )
    direction = _expect(name, data, "direction", str, "positive")
    if direction not in _DIRECTIONS:
        raise ParameterError(f"{name}.direction must be one of {_DIRECTIONS}")
    tokens = _expect(name, data, "tokens", list, [])
    components = _expect(name, data, "components", list, [])
    attend = _expect(name, data, "attend", list, [])
    for field_name, ids in (("tokens", tokens), ("components", components), ("attend", attend)):
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in ids):
            raise ParameterError(f"{name}.{field_name} must be integers")
    if bool(tokens) and bool(components):
        raise ParameterError(f"{name} must not set both tokens and components")
    if not tokens and not components:
        raise ParameterError(f"{name} needs tokens (trained model) or components (mixture model)")
    return EditSection(
        label=_expect(name, data, "label", str, ""),
        direction=direction,
        scale=float(_expect_number(name, data, "scale", 5.0)),
        threshold=float(_expect_number(name, data, "threshold", 0.75)),
        skip=float(_expect_number(name, data, "skip", 0.0)),
        tokens=tuple(tokens),
        components=tuple(components),
        user_mask=_expect(name, data, "user_mask", str, ""),
        attend=tuple(attend),
    )


def _parse_experiment(data: dict) -> ExperimentSection:
    _require_keys(
        "experiment",
        data,
        {"scales", "grids", "data_scale", "variations", "scenes", "bench_inversions", "bench_generations", "field_shape"},
    )
    defaults = ExperimentSection()

    def number_list(key, default):
        values = _expect("experiment", data, key, list, None)
        if values is None:
            return default
        if not values or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
            raise ParameterError(f"experiment.{key} must be a non-empty list of numbers")
        return tuple(float(v) for v in values)

    grids = _expect("experiment", data, "grids", list, None)
    if grids is not None:
        if not grids or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in grids):
            raise ParameterError("experiment.grids must be positive integers")
        grids = tuple(grids)
    else:
        grids = defaults.grids
    shape = _expect("experiment", data, "field_shape", list, None)
    if shape is not None:
        if len(shape) != 3 or not all(isinstance(v, int) and v > 0 for v in shape):
            raise ParameterError("experiment.field_shape must be three positive integers")
        shape = tuple(shape)
    else:
        shape = defaults.field_shape
    return ExperimentSection(
        scales=number_list("scales", defaults.scales),
        grids=grids,
        data_scale=float(_expect_number("experiment", data, "data_scale", defaults.data_scale)),
        variations=_expect("experiment", data, "variations", int, defaults.variations),
        scenes=_expect("experiment", data, "scenes", int, defaults.scenes),
        bench_inversions=_expect("experiment", data, "bench_inversions", int, defaults.bench_inversions),
        bench_generations=_expect("experiment", data, "bench_generations", int, defaults.bench_generations),
        field_shape=shape,
    )


def parse_config(data: dict, base_dir: Path) -> RunConfig:
    """Validate a parsed JSON object into a :class:`RunConfig`."""
    if not isinstance(data, dict):
        raise ParameterError("run config must be a JSON object")
    _require_keys("config", data, {"schedule", "grid", "model", "input", "seed", "edits", "experiment"})
    if "model" not in data:
        raise ParameterError("config requires a 'model' section")
    seed = _expect("config", data, "seed", int, 0)
    if seed < 0:
        raise ParameterError(f"seed must be non-negative, got {seed}")
    edits_raw = _expect("config", data, "edits", list, [])
    edits = tuple(_parse_edit(i, e) if isinstance(e, dict) else _bad_edit(i) for i, e in enumerate(edits_raw))
    return RunConfig(
        schedule=_parse_schedule(data.get("schedule", {})),
        grid=_parse_grid(data.get("grid", {})),
        model=_parse_model(data["model"]),
        input=_parse_input(data["input"]) if "input" in data else None,
        seed=seed,
        edits=edits,
        experiment=_parse_experiment(data.get("experiment", {})),
        base_dir=base_dir,
    )


def _bad_edit(i: int):
    raise ParameterError(f"edits[{i}] must be an object")


def load_config(path) -> RunConfig:
    """Read and validate a JSON run file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data, path.resolve().parent)


def build_schedule_from(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return build_schedule(kind=s.kind, T=s.T, beta_min=s.beta_min, beta_max=s.beta_max)


def build_grid_from(cfg: RunConfig, schedule: NoiseSchedule) -> TimestepGrid:
    g = cfg.grid
    return build_grid(schedule, g.steps, skip=g.skip, terminal=g.terminal)


def _mean_array(mean, shape) -> np.ndarray:
    if isinstance(mean, tuple):
        arr = np.asarray(mean, dtype=np.float64)
        if arr.shape != tuple(shape):
            raise ParameterError(f"component mean shape {arr.shape} does not match model shape {tuple(shape)}")
        return arr
    return np.full(shape, float(mean), dtype=np.float64)


def build_model_from(cfg: RunConfig, schedule: NoiseSchedule) -> DenoiserModel:
    m = cfg.model
    if m.kind == "gmm":
        means = np.stack([_mean_array(c.mean, m.shape) for c in m.components])
        spec = GMMSpec(
            means=means,
            scales=np.array([c.scale for c in m.components]),
            weights=np.array([c.weight for c in m.components]),
        )
        return AnalyticGMMDenoiser(spec, schedule)
    weights = load_weights(cfg.resolve(m.weights_path))
    return TinyDenoiser(weights)


def resolve_input_field(cfg: RunConfig, model: DenoiserModel) -> Field:
    """Produce the input field a run operates on."""
    if cfg.input is None:
        raise ParameterError("this command needs an 'input' section")
    inp = cfg.input
    if inp.kind == "path":
        return load_field(cfg.resolve(inp.path))
    if inp.kind == "scene":
        return make_scene(inp.seed, inp.index).field
    if not isinstance(model, AnalyticGMMDenoiser):
        raise ParameterError("input.sample draws from the mixture; the model is not a mixture")
    spec = model.spec
    gen = stream_generator(inp.seed, DOMAIN_INPUT, 0)
    k = int(gen.choice(spec.weights.size, p=spec.weights))
    draw = spec.means[k] + spec.scales[k] * gen.standard_normal(spec.means.shape[1:])
    return draw.astype(np.float32)


def build_instructions(cfg: RunConfig, model: DenoiserModel) -> list[EditInstruction]:
    """Turn edit sections into instructions matched to the model's conditioning."""
    instructions = []
    for i, e in enumerate(cfg.edits):
        is_mixture = isinstance(model, AnalyticGMMDenoiser)
        if is_mixture and e.tokens:
            raise ParameterError(f"edits[{i}] uses tokens but the model is a mixture; use components")
        if not is_mixture and e.components:
            raise ParameterError(f"edits[{i}] uses components but the model is trained; use tokens")
        cond = Conditioning(tokens=e.tokens, components=e.components, label=e.label)
        user_mask = None
        if e.user_mask:
            user_mask = read_mask_pgm(cfg.resolve(e.user_mask))
        instructions.append(EditInstruction(
            conditioning=cond,
            direction=e.direction,
            scale=e.scale,
            threshold=e.threshold,
            user_mask=user_mask,
            skip=e.skip,
            label=e.label or f"edit-{i}",
            attend_positions=e.attend,
        ))
    return instructions
