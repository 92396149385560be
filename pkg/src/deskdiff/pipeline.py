"""Config-driven commands behind the command line.

Each command follows the same contract: validate everything up front,
compute in memory, then write its artifacts (delimited report, figures,
field files) into the output directory. A command that detects a broken
invariant reports it in its result instead of raising, so the command line
can distinguish "the run is wrong" (exit 2) from "the invocation is wrong"
(exit 1).

Reports are CSV with a leading ``# config_hash=...`` comment line tying
every output back to the configuration that produced it. Field outputs are
written in the raw field format with previews alongside.
"""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass, field as dataclass_field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import plots
from .closedform import exact_ddim_endpoint, exact_solver_endpoint
from .config import (
    RunConfig,
    build_grid_from,
    build_instructions,
    build_model_from,
    build_schedule_from,
    resolve_input_field,
)
from .errors import ParameterError, SetupError, StaleCacheError
from .fieldio import atomic_write_text, save_field, write_mask_pgm, write_preview
from .guidance import GuidanceRecorder, active_concepts_at, build_guidance
from .inversion import EditFriendlyLatents, invert, load_latents, save_latents
from .masking import masks_for_concept
from .model import AnalyticGMMDenoiser, Conditioning, CountingModel, DenoiserModel, Field
from .rng import DOMAIN_FORWARD_NOISE, stream_generator
from .sampler import run_ancestral, run_reverse, zeros_noise
from .schedule import NoiseSchedule, TimestepGrid, build_grid
from .shapes import make_scene
from .tinynet import TinyDenoiser

__all__ = [
    "CommandResult",
    "format_cell",
    "write_csv",
    "cmd_invert",
    "cmd_edit",
    "cmd_variations",
    "cmd_sweep_scale",
    "cmd_convergence",
    "cmd_eval_masks",
    "cmd_bench_evals",
]


@dataclass
class CommandResult:
    """What a command produced and whether its invariants held."""

    ok: bool
    rows: list[dict]
    files: list[Path]
    summary: dict
    failures: list[str] = dataclass_field(default_factory=list)


def format_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.10g}"
    text = str(value)
    if "," in text or "\n" in text:
        raise ParameterError(f"cell value {text!r} would break the delimited format")
    return text


def write_csv(path, header: Sequence[str], rows: Sequence[dict], config_hash: str) -> Path:
    path = Path(path)
    lines = [f"# config_hash={config_hash}", ",".join(header)]
    for row in rows:
        lines.append(",".join(format_cell(row[h]) for h in header))
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def _prepare(cfg: RunConfig):
    schedule = build_schedule_from(cfg)
    grid = build_grid_from(cfg, schedule)
    model = build_model_from(cfg, schedule)
    return schedule, grid, model


def _latents_key(x0: Field, schedule: NoiseSchedule, model: DenoiserModel, grid: TimestepGrid, seed: int) -> str:
    digest = hashlib.sha256()
    digest.update(x0.tobytes())
    digest.update(schedule.fingerprint_bytes)
    digest.update(model.fingerprint_bytes)
    digest.update(repr((grid.steps, grid.skip, grid.start_index, grid.terminal, seed)).encode())
    return digest.hexdigest()[:16]


def _replay_noise(latents: EditFriendlyLatents):
    def provider(index: int, shape):
        return latents.z_seq[index]

    return provider


def _ensure_latents(
    cfg: RunConfig,
    out_dir: Path,
    schedule: NoiseSchedule,
    grid: TimestepGrid,
    model: DenoiserModel,
    x0: Field,
    seed: Optional[int] = None,
) -> tuple[EditFriendlyLatents, bool, Path]:
    """Load a matching latent cache or invert and write one."""
    seed = cfg.seed if seed is None else seed
    cache_dir = out_dir / "latents"
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{_latents_key(x0, schedule, model, grid, seed)}.lpl"
    if path.exists():
        try:
            latents = load_latents(path, schedule=schedule, model=model)
            if latents.grid == grid and latents.seed == seed:
                return latents, True, path
        except StaleCacheError:
            pass  # key collision with stale content; recompute below
    latents = invert(x0, model, schedule, grid, seed)
    tmp = path.with_name(path.name + ".tmp")
    save_latents(tmp, latents)
    os.replace(tmp, path)
    return latents, False, path


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)))


def cmd_invert(cfg: RunConfig, out_dir) -> CommandResult:
    """Invert the input and verify that replay reproduces it."""
    out_dir = Path(out_dir)
    schedule, grid, model = _prepare(cfg)
    x0 = resolve_input_field(cfg, model)
    out_dir.mkdir(parents=True, exist_ok=True)
    latents, cached, cache_path = _ensure_latents(cfg, out_dir, schedule, grid, model, x0)
    recon = run_reverse(model, schedule, grid, latents.x_start, _replay_noise(latents))
    rmse = _rmse(recon, x0)

    z_rows = []
    for i in range(grid.start_index, grid.n_steps):
        z_rows.append({
            "t": grid.steps[i],
            "z_power": float(np.mean(latents.z_seq[i].astype(np.float64) ** 2)),
        })
    summary_row = {
        "steps": grid.n_steps,
        "executed": grid.n_executed,
        "skip": grid.skip,
        "terminal": grid.terminal,
        "seed": latents.seed,
        "cached": cached,
        "rmse": rmse,
        "mean_z_power": latents.mean_z_power(),
    }
    files = [cache_path]
    files.append(write_csv(out_dir / "invert.csv", list(summary_row), [summary_row], cfg.config_hash))
    files.append(write_csv(out_dir / "invert_zpower.csv", ["t", "z_power"], z_rows, cfg.config_hash))
    save_field(out_dir / "input.lpf", x0)
    files.append(out_dir / "input.lpf")
    files.append(Path(write_preview(out_dir / "input", x0)))
    save_field(out_dir / "reconstruction.lpf", recon)
    files.append(out_dir / "reconstruction.lpf")
    files.append(Path(write_preview(out_dir / "reconstruction", recon)))
    files.append(plots.plot_z_power(z_rows, out_dir / "invert.png"))
    return CommandResult(ok=True, rows=z_rows, files=files, summary=summary_row)


def cmd_edit(cfg: RunConfig, out_dir, dump_masks: bool = False) -> CommandResult:
    """Apply the configured edits on top of an exact inversion."""
    out_dir = Path(out_dir)
    schedule, grid, model = _prepare(cfg)
    instructions = build_instructions(cfg, model)
    x0 = resolve_input_field(cfg, model)
    out_dir.mkdir(parents=True, exist_ok=True)
    latents, cached, _ = _ensure_latents(cfg, out_dir, schedule, grid, model, x0)

    recon = run_reverse(model, schedule, grid, latents.x_start, _replay_noise(latents))
    recorder = GuidanceRecorder(keep_pairs=dump_masks)
    counting = CountingModel(model)
    guidance_fn = build_guidance(counting, schedule, instructions, recorder=recorder)
    edited = run_reverse(model, schedule, grid, latents.x_start, _replay_noise(latents), guidance_fn)

    predicted_extra = sum(
        active_concepts_at(instructions, schedule, t) for t in grid.executed_steps
    )
    mask_rows = [
        {
            "t": r.t, "concept": r.concept, "label": r.label, "source": r.source,
            "m1_count": r.m1_count, "m2_count": r.m2_count, "phi_count": r.phi_count,
        }
        for r in recorder.records
    ]
    summary = {
        "concepts": len(instructions),
        "cached": cached,
        "rmse_recon": _rmse(recon, x0),
        "rms_delta": float(np.sqrt(np.mean((edited.astype(np.float64) - recon.astype(np.float64)) ** 2))),
        "identical_to_recon": bool(edited.tobytes() == recon.tobytes()),
        "conditional_evals_predicted": predicted_extra,
        "conditional_evals_measured": counting.count,
    }
    failures = []
    if counting.count != predicted_extra:
        failures.append(
            f"conditional evaluations measured {counting.count}, predicted {predicted_extra}"
        )

    files = []
    save_field(out_dir / "edited.lpf", edited)
    files.append(out_dir / "edited.lpf")
    files.append(Path(write_preview(out_dir / "edited", edited)))
    save_field(out_dir / "reconstruction.lpf", recon)
    files.append(out_dir / "reconstruction.lpf")
    files.append(Path(write_preview(out_dir / "reconstruction", recon)))
    files.append(write_csv(out_dir / "edit.csv", list(summary), [summary], cfg.config_hash))
    if mask_rows:
        header = ["t", "concept", "label", "source", "m1_count", "m2_count", "phi_count"]
        files.append(write_csv(out_dir / "edit_masks.csv", header, mask_rows, cfg.config_hash))
        files.append(plots.plot_mask_trajectories(mask_rows, out_dir / "edit.png"))
    if dump_masks:
        mask_dir = out_dir / "masks"
        mask_dir.mkdir(exist_ok=True)
        for rec in recorder.records:
            if rec.pair is None:
                continue
            base = f"t{rec.t:04d}-c{rec.concept}"
            for kind, mask in (("m1", rec.pair.m1), ("m2", rec.pair.m2),
                               ("inter", rec.pair.intersection)):
                p = mask_dir / f"{base}-{kind}.pgm"
                write_mask_pgm(p, mask)
                files.append(p)
    return CommandResult(ok=not failures, rows=mask_rows, files=files, summary=summary, failures=failures)


def cmd_variations(cfg: RunConfig, out_dir) -> CommandResult:
    """Re-invert under fresh seeds and re-apply the same edits."""
    out_dir = Path(out_dir)
    schedule, grid, model = _prepare(cfg)
    instructions = build_instructions(cfg, model)
    x0 = resolve_input_field(cfg, model)
    n = cfg.experiment.variations
    if n < 2:
        raise ParameterError(f"variations need at least 2 runs, got {n}")
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    panels = []
    edited_hashes = set()
    var_dir = out_dir / "variations"
    var_dir.mkdir(exist_ok=True)
    files = []
    for v in range(n):
        seed = cfg.seed + v
        latents, _, _ = _ensure_latents(cfg, out_dir, schedule, grid, model, x0, seed=seed)
        recon = run_reverse(model, schedule, grid, latents.x_start, _replay_noise(latents))
        guidance_fn = build_guidance(model, schedule, instructions)
        edited = run_reverse(model, schedule, grid, latents.x_start, _replay_noise(latents), guidance_fn)
        digest = hashlib.sha256(edited.tobytes()).hexdigest()[:12]
        edited_hashes.add(digest)
        rows.append({
            "variation": v,
            "seed": seed,
            "rmse_recon": _rmse(recon, x0),
            "rms_delta": float(np.sqrt(np.mean((edited.astype(np.float64) - recon.astype(np.float64)) ** 2))),
            "edited_digest": digest,
        })
        panels.append((f"seed {seed}", [x0, recon, edited]))
        save_field(var_dir / f"v{v}-edited.lpf", edited)
        files.append(var_dir / f"v{v}-edited.lpf")
        files.append(Path(write_preview(var_dir / f"v{v}-edited", edited)))

    distinct = len(edited_hashes) == n
    failures = [] if distinct else ["variations collapsed to identical outputs"]
    summary = {"variations": n, "distinct_outputs": len(edited_hashes)}
    header = ["variation", "seed", "rmse_recon", "rms_delta", "edited_digest"]
    files.append(write_csv(out_dir / "variations.csv", header, rows, cfg.config_hash))
    files.append(plots.plot_variations(panels, out_dir / "variations.png"))
    return CommandResult(ok=distinct, rows=rows, files=files, summary=summary, failures=failures)


def cmd_sweep_scale(cfg: RunConfig, out_dir) -> CommandResult:
    """Sweep the guidance scale of a single edit and test monotonicity.

    The edit direction is fixed as the (normalized) difference between the
    top-scale result and the reconstruction; each sweep point is projected
    onto it. Projections must be nondecreasing in scale within ``1e-4``.
    """
    out_dir = Path(out_dir)
    schedule, grid, model = _prepare(cfg)
    instructions = build_instructions(cfg, model)
    if len(instructions) != 1:
        raise ParameterError(f"scale sweep needs exactly one edit, got {len(instructions)}")
    base = instructions[0]
    scales = sorted(cfg.experiment.scales)
    if len(scales) < 2:
        raise ParameterError("scale sweep needs at least two scales")
    x0 = resolve_input_field(cfg, model)
    out_dir.mkdir(parents=True, exist_ok=True)
    latents, _, _ = _ensure_latents(cfg, out_dir, schedule, grid, model, x0)
    recon = run_reverse(model, schedule, grid, latents.x_start, _replay_noise(latents))

    outputs = {}
    for scale in scales:
        ins = [replace(base, scale=float(scale))]
        guidance_fn = build_guidance(model, schedule, ins)
        outputs[scale] = run_reverse(
            model, schedule, grid, latents.x_start, _replay_noise(latents), guidance_fn
        )

    top = outputs[scales[-1]].astype(np.float64) - recon.astype(np.float64)
    norm = float(np.linalg.norm(top))
    failures = []
    if norm == 0.0:
        failures.append("edit has no effect at the top scale; no direction to project onto")
        direction = np.zeros_like(top)
    else:
        direction = top / norm
    rows = []
    for scale in scales:
        delta = outputs[scale].astype(np.float64) - recon.astype(np.float64)
        rows.append({
            "scale": scale,
            "projection": float(np.sum(delta * direction)),
            "rms_delta": float(np.sqrt(np.mean(delta**2))),
        })
    tolerance = 1e-4
    for prev, cur in zip(rows, rows[1:]):
        if cur["projection"] < prev["projection"] - tolerance:
            failures.append(
                f"projection decreases from scale {prev['scale']:g} "
                f"({prev['projection']:.6g}) to {cur['scale']:g} ({cur['projection']:.6g})"
            )
    summary = {
        "scales": len(scales),
        "monotone": not any(f.startswith("projection") for f in failures),
        "tolerance": tolerance,
    }
    files = [
        write_csv(out_dir / "sweep_scale.csv", ["scale", "projection", "rms_delta"], rows, cfg.config_hash),
        plots.plot_sweep(rows, out_dir / "sweep_scale.png"),
    ]
    return CommandResult(ok=not failures, rows=rows, files=files, summary=summary, failures=failures)


def cmd_convergence(cfg: RunConfig, out_dir) -> CommandResult:
    """Measure solver error against the continuum limit over grid sizes.

    Requires a centered single-component mixture model, the case with a
    closed-form continuum endpoint. Errors of the second-order solver must
    strictly decrease as the grid refines.
    """
    out_dir = Path(out_dir)
    schedule = build_schedule_from(cfg)
    model = build_model_from(cfg, schedule)
    if not isinstance(model, AnalyticGMMDenoiser):
        raise ParameterError("convergence needs the analytic mixture model")
    spec = model.spec
    if spec.means.shape[0] != 1 or np.any(spec.means != 0.0):
        raise ParameterError("convergence needs a single zero-mean component")
    data_scale = float(spec.scales[0])
    grids = sorted(cfg.experiment.grids)
    if len(grids) < 2:
        raise ParameterError("convergence needs at least two grid sizes")
    shape = spec.means.shape[1:]
    gen = stream_generator(cfg.seed, DOMAIN_FORWARD_NOISE, 0)
    x_start = gen.standard_normal(shape).astype(np.float32)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()

    solver_target = x_start.astype(np.float64) * exact_solver_endpoint(schedule, data_scale, schedule.T, 1)
    ddim_target = x_start.astype(np.float64) * exact_ddim_endpoint(schedule, data_scale, schedule.T, 1)
    target_rms = float(np.sqrt(np.mean(solver_target**2)))
    ddim_rms = float(np.sqrt(np.mean(ddim_target**2)))

    rows = []
    solver_errors = []
    for n in grids:
        grid = build_grid(schedule, n, terminal="deterministic")
        out = run_reverse(model, schedule, grid, x_start, zeros_noise)
        err = _rmse(out, solver_target) / target_rms
        prev = solver_errors[-1] if solver_errors else None
        solver_errors.append(err)
        rows.append({
            "family": "solver-2m", "n_steps": n, "rel_error": err,
            "ratio_to_prev": (prev / err) if prev else float("nan"),
        })
    ddim_errors = []
    for n in grids:
        grid = build_grid(schedule, n)
        out = run_ancestral(model, schedule, grid.steps, x_start, 0.0, zeros_noise)
        err = _rmse(out, ddim_target) / ddim_rms
        prev = ddim_errors[-1] if ddim_errors else None
        ddim_errors.append(err)
        rows.append({
            "family": "ddim", "n_steps": n, "rel_error": err,
            "ratio_to_prev": (prev / err) if prev else float("nan"),
        })
    elapsed = time.perf_counter() - start

    failures = []
    for (n_a, e_a), (n_b, e_b) in zip(zip(grids, solver_errors), zip(grids[1:], solver_errors[1:])):
        if not e_b < e_a:
            failures.append(f"solver error did not decrease from {n_a} ({e_a:.3e}) to {n_b} ({e_b:.3e}) steps")
    summary = {
        "grids": len(grids),
        "strictly_decreasing": not failures,
        "seconds": elapsed,
        "final_error": solver_errors[-1],
    }
    header = ["family", "n_steps", "rel_error", "ratio_to_prev"]
    files = [
        write_csv(out_dir / "convergence.csv", header, rows, cfg.config_hash),
        plots.plot_convergence(rows, out_dir / "convergence.png"),
    ]
    return CommandResult(ok=not failures, rows=rows, files=files, summary=summary, failures=failures)


def cmd_eval_masks(cfg: RunConfig, out_dir) -> CommandResult:
    """Score implicit masks against dataset ground truth.

    Needs a trained attention-bearing model. For each scene object the
    concept caption is (scene token, kind token); the attention and noise
    masks are thresholded with the percentile set to roughly twice the
    kind's true area, then compared with the exact union mask of that kind
    by IoU. The intersection must beat either mask alone on average.
    """
    out_dir = Path(out_dir)
    schedule, grid, model = _prepare(cfg)
    if not isinstance(model, TinyDenoiser):
        raise SetupError("mask evaluation needs trained tiny-model weights")
    n_scenes = cfg.experiment.scenes
    if n_scenes < 1:
        raise ParameterError(f"scenes must be >= 1, got {n_scenes}")
    scene_seed = cfg.input.seed if cfg.input is not None and cfg.input.kind == "scene" else cfg.seed
    base_index = cfg.input.index if cfg.input is not None and cfg.input.kind == "scene" else 0

    executed = grid.executed_steps
    lo, hi = 0.3 * schedule.T, 0.7 * schedule.T
    probe_steps = [t for t in executed if lo <= t <= hi]
    if not probe_steps:
        raise ParameterError("no executed grid steps in the mid-range probe band")

    rows = []
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in range(n_scenes):
        scene = make_scene(scene_seed, base_index + s)
        x0 = scene.field
        area = x0[0].size
        gen = stream_generator(scene_seed, DOMAIN_FORWARD_NOISE, base_index + s)
        kinds = sorted(set(scene.tokens[1:]))
        for t in probe_steps:
            abar = schedule.abar(t)
            noise = gen.standard_normal(x0.shape).astype(np.float32)
            x_t = np.float32(np.sqrt(abar)) * x0 + np.float32(np.sqrt(1.0 - abar)) * noise
            eps_u, _ = model.eps(x_t, t, None)
            for kind in kinds:
                gt = np.zeros(x0.shape[1:], dtype=bool)
                for tok, mask in zip(scene.tokens[1:], scene.masks):
                    if tok == kind:
                        gt |= mask > 0
                # generous per-mask budget (~2x the true area): each mask
                # over-selects and the intersection prunes the false hits
                lam = float(np.clip(1.0 - 2.0 * gt.sum() / area, 0.5, 0.98))
                cond = Conditioning(tokens=(scene.tokens[0], kind))
                eps_c, stash = model.eps(x_t, t, cond)
                pair = masks_for_concept(eps_c - eps_u, stash, (1,), lam)
                rows.append({
                    "scene": base_index + s, "kind": kind, "t": t, "lam": lam,
                    "iou_m1": _iou(pair.m1, gt),
                    "iou_m2": _iou(pair.m2, gt),
                    "iou_inter": _iou(pair.intersection, gt),
                })

    mean_m1 = float(np.mean([r["iou_m1"] for r in rows]))
    mean_m2 = float(np.mean([r["iou_m2"] for r in rows]))
    mean_inter = float(np.mean([r["iou_inter"] for r in rows]))
    ok = mean_inter > max(mean_m1, mean_m2)
    failures = [] if ok else [
        f"intersection IoU {mean_inter:.4f} does not beat attention {mean_m1:.4f} / noise {mean_m2:.4f}"
    ]
    summary = {
        "scenes": n_scenes, "probes": len(rows),
        "mean_iou_m1": mean_m1, "mean_iou_m2": mean_m2, "mean_iou_inter": mean_inter,
        "intersection_wins": ok,
    }
    header = ["scene", "kind", "t", "lam", "iou_m1", "iou_m2", "iou_inter"]
    files = [
        write_csv(out_dir / "eval_masks.csv", header, rows, cfg.config_hash),
        plots.plot_iou(rows, out_dir / "eval_masks.png"),
    ]
    return CommandResult(ok=ok, rows=rows, files=files, summary=summary, failures=failures)


def _iou(mask: np.ndarray, gt: np.ndarray) -> float:
    m = mask > 0
    union = np.logical_or(m, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(m, gt).sum() / union)


def cmd_bench_evals(cfg: RunConfig, out_dir) -> CommandResult:
    """Count model evaluations against the budget the method promises.

    Inversion costs one unconditional evaluation per executed transition.
    Edited generation costs one unconditional plus one per active concept
    per executed step. Measured counts must match exactly.
    """
    out_dir = Path(out_dir)
    schedule, grid, model = _prepare(cfg)
    instructions = build_instructions(cfg, model)
    x0 = resolve_input_field(cfg, model)
    n_inv = cfg.experiment.bench_inversions
    n_gen = cfg.experiment.bench_generations
    if n_inv < 1 or n_gen < 1:
        raise ParameterError("bench needs at least one inversion and one generation")

    counting = CountingModel(model)
    t0 = time.perf_counter()
    latents = None
    for i in range(n_inv):
        latents = invert(x0, counting, schedule, grid, cfg.seed + i)
    inv_seconds = time.perf_counter() - t0
    inv_measured = counting.count
    inv_predicted = n_inv * grid.n_executed

    per_gen = sum(1 + active_concepts_at(instructions, schedule, t) for t in grid.executed_steps)
    counting.count = 0
    t0 = time.perf_counter()
    for _ in range(n_gen):
        guidance_fn = build_guidance(counting, schedule, instructions)
        run_reverse(counting, schedule, grid, latents.x_start, _replay_noise(latents), guidance_fn)
    gen_seconds = time.perf_counter() - t0
    gen_measured = counting.count
    gen_predicted = n_gen * per_gen

    rows = [
        {"phase": "inversion", "runs": n_inv, "predicted": inv_predicted,
         "measured": inv_measured, "seconds": inv_seconds},
        {"phase": "generation", "runs": n_gen, "predicted": gen_predicted,
         "measured": gen_measured, "seconds": gen_seconds},
    ]
    failures = []
    for row in rows:
        if row["predicted"] != row["measured"]:
            failures.append(
                f"{row['phase']} used {row['measured']} evaluations, budget says {row['predicted']}"
            )
    summary = {
        "executed_steps": grid.n_executed,
        "concepts": len(instructions),
        "evals_per_generation": per_gen,
        "budget_respected": not failures,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["phase", "runs", "predicted", "measured", "seconds"]
    files = [
        write_csv(out_dir / "bench_evals.csv", header, rows, cfg.config_hash),
        plots.plot_bench(rows, out_dir / "bench_evals.png"),
    ]
    return CommandResult(ok=not failures, rows=rows, files=files, summary=summary, failures=failures)
