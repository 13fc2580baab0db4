"""End-to-end workflows behind the CLI commands (also driven directly by tests)."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import theory
from .config import RunConfig, load_config, parse_config_text
from .core import PixelDecoder, Prompt
from .engine import run_inversion
from .errors import ConfigError
from .evaluate import (
    ComparisonReport, alignment_score, compare_pipelines, sample_eval_prompts,
)
from .nets import ToyDenoiser, ToyReferee
from .toys import (
    load_dataset, load_denoiser, load_referee, make_shapes_dataset,
    save_dataset, save_denoiser, save_referee, train_toy_denoiser,
    train_toy_referee,
)


# ---------------------------------------------------------------------------
# toy-stack training
# ---------------------------------------------------------------------------

@dataclass
class ToyBundle:
    referee: ToyReferee
    eval_referee: ToyReferee
    prior: ToyDenoiser
    decoder: PixelDecoder
    manifest: dict


def train_toys_workflow(cfg: RunConfig, toys_dir: str | Path) -> dict:
    """Train and persist the full desk-scale stack: dataset, two referees
    (different widths and seeds), and the diffusion prior."""
    cfg.validate()
    out = Path(toys_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(cfg.run.threads)

    dataset = make_shapes_dataset(cfg.dataset)
    save_dataset(dataset, out / "dataset")

    referee = train_toy_referee(dataset, cfg.referee_train, seed=cfg.run.referee_seed)
    eval_referee = train_toy_referee(dataset, cfg.eval_referee_train, seed=cfg.run.eval_referee_seed)
    if referee.checksum() == eval_referee.checksum():
        raise ConfigError("inversion and evaluation referees must differ")
    prior = train_toy_denoiser(dataset, cfg.denoiser_train, seed=cfg.run.denoiser_seed)

    checksums = {
        "referee": save_referee(referee, out / "referee.pt", seed=cfg.run.referee_seed),
        "eval_referee": save_referee(eval_referee, out / "eval_referee.pt", seed=cfg.run.eval_referee_seed),
        "prior": save_denoiser(prior, out / "prior.pt", seed=cfg.run.denoiser_seed),
    }
    manifest = {
        "image_size": cfg.dataset.image_size,
        "seeds": {
            "dataset": cfg.dataset.seed,
            "referee": cfg.run.referee_seed,
            "eval_referee": cfg.run.eval_referee_seed,
            "denoiser": cfg.run.denoiser_seed,
        },
        "checksums": checksums,
        "config_hash": cfg.hash(),
        "train_reports": {
            "referee": referee.train_report,
            "eval_referee": eval_referee.train_report,
            "prior": prior.train_report,
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    (out / "config.txt").write_text(cfg.to_text())
    return manifest


def load_toys(toys_dir: str | Path) -> ToyBundle:
    src = Path(toys_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    return ToyBundle(
        referee=load_referee(src / "referee.pt"),
        eval_referee=load_referee(src / "eval_referee.pt"),
        prior=load_denoiser(src / "prior.pt"),
        decoder=PixelDecoder(manifest["image_size"], manifest["image_size"]),
        manifest=manifest,
    )


def load_toys_dataset(toys_dir: str | Path):
    return load_dataset(Path(toys_dir) / "dataset")


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _generate_one(config_text: str, prompt_text: str, toys_dir: str, run_dir: str) -> str:
    """Run one prompt into one run directory (top-level so it pickles)."""
    cfg = parse_config_text(config_text)
    cfg.validate()
    torch.set_num_threads(cfg.run.threads)
    bundle = load_toys(toys_dir)
    prompt = Prompt.from_text(prompt_text)

    referee = bundle.referee
    prior = bundle.prior
    if cfg.run.variant == "referee-only":
        prior = None
    elif cfg.run.variant == "sds-only":
        referee = None

    run_path = Path(run_dir)
    run_path.mkdir(parents=True, exist_ok=True)
    (run_path / "config.txt").write_text(config_text)
    (run_path / "run.json").write_text(json.dumps({
        "prompt": prompt_text,
        "seed": cfg.schedule.seed,
        "variant": cfg.run.variant,
        "config_hash": cfg.hash(),
        "checksums": bundle.manifest["checksums"],
        "sds_space": "pixel",
    }, indent=2))

    run_inversion(
        cfg.schedule, referee, prior, bundle.decoder, prompt, cfg.augment,
        sds_t_range=(cfg.run.sds_t_min, cfg.run.sds_t_max),
        run_dir=run_path,
        snapshot_every=cfg.run.snapshot_every,
        dump_gradients=cfg.run.dump_gradients,
        config_hash=cfg.hash(),
    )
    return str(run_path)


def generate_workflow(cfg: RunConfig, prompts: list[str], toys_dir: str | Path,
                      out_dir: str | Path) -> list[str]:
    """Run the inversion per prompt; per-prompt seed = base seed + index.

    The variant is applied to the schedule before the config copy is written
    (referee-only forces w2 to 0), so every run directory reproduces itself.
    """
    cfg.validate()
    if not prompts:
        raise ConfigError("no prompts given")
    if cfg.run.variant == "referee-only":
        cfg = cfg.with_overrides({"schedule.w2_start": "0", "schedule.w2_end": "0"})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    jobs = []
    for i, prompt_text in enumerate(prompts):
        Prompt.from_text(prompt_text)   # validate before any compute
        cfg_i = cfg.with_overrides({"schedule.seed": str(cfg.schedule.seed + i)})
        run_dir = out / f"run_{i:03d}"
        jobs.append((cfg_i.to_text(), prompt_text, str(toys_dir), str(run_dir)))

    if cfg.run.parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.run.parallel) as pool:
            return list(pool.map(_generate_one, *zip(*jobs)))
    return [_generate_one(*job) for job in jobs]


# ---------------------------------------------------------------------------
# theory verification
# ---------------------------------------------------------------------------

@dataclass
class TheoryReport:
    probe_results: list[theory.ProbeResult]
    condition_rows: list[tuple[str, float, float, bool]]   # (name, kappa, kappa_tilde, pass)
    gd_comparison: theory.GDComparison

    @property
    def all_passed(self) -> bool:
        return (all(r.passed for r in self.probe_results)
                and all(ok for *_rest, ok in self.condition_rows)
                and self.gd_comparison.smoothed_faster())

    def lines(self) -> list[str]:
        out = theory.probe_report_lines(self.probe_results)
        for name, k, kt, ok in self.condition_rows:
            out.append(f"condition:{name},,{k:.6f},{kt:.6f},,{'pass' if ok else 'FAIL'}")
        gd = self.gd_comparison
        out.append(
            f"gd_remark,,median_raw={sorted(gd.raw_iterations)[len(gd.raw_iterations) // 2]},"
            f"median_smoothed={sorted(gd.smoothed_iterations)[len(gd.smoothed_iterations) // 2]},,"
            f"{'pass' if gd.smoothed_faster() else 'FAIL'}"
        )
        return out


def theory_workflow(sigmas: tuple[float, ...] = (0.25, 0.5, 1.0), seed: int = 0,
                    out_dir: str | Path | None = None) -> TheoryReport:
    for s in sigmas:
        if s <= 0:
            raise ConfigError(f"sigma must be > 0, got {s}")
    probe_results = theory.run_probe_suite(sigmas=sigmas, seed=seed)

    grid = np.linspace(-6.0, 6.0, 481)
    rows = []
    k, kt = theory.smoothed_condition_number([theory.piecewise_f_pp], 1.0, grid)
    rows.append(("piecewise_sigma1", k, kt, abs(k - 10.0) < 1e-9 and kt <= 9.5))
    k0, kt0 = theory.smoothed_condition_number(
        [lambda x: np.full_like(x, 1.0), lambda x: np.full_like(x, 10.0)], 1.0, grid)
    rows.append(("quadratic", k0, kt0, abs(kt0 - k0) <= 1e-3))
    kv, ktv = theory.smoothed_condition_number([theory.piecewise_f_pp], 0.01, grid)
    rows.append(("piecewise_sigma001", kv, ktv, abs(ktv - kv) / kv <= 0.02))

    gd = theory.gd_convergence_comparison(sigma=1.0, n_starts=20, seed=seed)
    report = TheoryReport(probe_results=probe_results, condition_rows=rows, gd_comparison=gd)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "theory_report.csv").write_text("\n".join(report.lines()) + "\n")
    return report


# ---------------------------------------------------------------------------
# evaluation and ablation
# ---------------------------------------------------------------------------

def evaluate_workflow(cfg: RunConfig, toys_dir: str | Path,
                      out_dir: str | Path | None = None) -> ComparisonReport:
    cfg.validate()
    torch.set_num_threads(cfg.run.threads)
    bundle = load_toys(toys_dir)
    prompts = sample_eval_prompts(cfg.eval.n_prompts, seed=cfg.eval.prompt_seed)
    report = compare_pipelines(
        prompts, list(cfg.eval.seeds),
        referee=bundle.referee, prior=bundle.prior, decoder=bundle.decoder,
        eval_referee=bundle.eval_referee, sched=cfg.schedule, aug_spec=cfg.augment,
        t_eval=cfg.eval.t_eval, n_mc=cfg.eval.n_mc,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(report.to_csv_text() + "\n")
        (out / "summary.txt").write_text(report.to_text() + "\n")
    return report


def ablate_workflow(cfg: RunConfig, toys_dir: str | Path, out_dir: str | Path,
                    grid: dict[str, list[str]]) -> list[dict]:
    """Cross-product sweep over ScheduleConfig fields, scored by the
    evaluation referee; cells are persisted as they complete."""
    cfg.validate()
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("ablation grid must name at least one schedule field with values")
    torch.set_num_threads(cfg.run.threads)
    bundle = load_toys(toys_dir)
    prompts = sample_eval_prompts(cfg.eval.n_prompts, seed=cfg.eval.prompt_seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    keys = list(grid.keys())
    combos: list[list[str]] = [[]]
    for key in keys:
        combos = [c + [v] for c in combos for v in grid[key]]

    cells: list[dict] = []
    with open(out / "cells.csv", "w") as fh:
        fh.write(",".join(keys) + ",alignment,n_runs\n")
        fh.flush()
        for combo in combos:
            cell_cfg = cfg.with_overrides({f"schedule.{k}": v for k, v in zip(keys, combo)})
            scores = []
            for pi, prompt in enumerate(prompts):
                for seed in cfg.eval.seeds:
                    sched = cell_cfg.schedule.replace(seed=int(seed) + 10007 * pi)
                    try:
                        result = run_inversion(
                            sched, bundle.referee, bundle.prior, bundle.decoder,
                            prompt, cell_cfg.augment,
                            sds_t_range=(cfg.run.sds_t_min, cfg.run.sds_t_max),
                        )
                    except Exception:
                        continue
                    scores.append(alignment_score(
                        result.image, [prompt], bundle.eval_referee,
                        inversion_checksum=bundle.referee.checksum(),
                    ))
            cell = dict(zip(keys, combo))
            cell["alignment"] = float(np.mean(scores)) if scores else float("nan")
            cell["n_runs"] = len(scores)
            cells.append(cell)
            fh.write(",".join(combo) + f",{cell['alignment']:.6f},{cell['n_runs']}\n")
            fh.flush()

    if len(keys) == 2:
        _write_pivot(out / "pivot.txt", keys, grid, cells)
    return cells


def _write_pivot(path: Path, keys: list[str], grid: dict[str, list[str]], cells: list[dict]) -> None:
    k0, k1 = keys
    lookup = {(c[k0], c[k1]): c["alignment"] for c in cells}
    lines = [f"{k1} \\ {k0}," + ",".join(grid[k0])]
    for v1 in grid[k1]:
        row = [v1] + [f"{lookup[(v0, v1)]:.4f}" for v0 in grid[k0]]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")
