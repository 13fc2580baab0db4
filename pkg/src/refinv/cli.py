"""Command-line surface: train toys, generate, verify theory, evaluate, ablate.

Exit codes: 0 success, 2 validation error, 3 compute failure.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .config import load_config
from .errors import ConfigError, RefinvError


def _overrides(set_args: tuple[str, ...]) -> dict[str, str]:
    out = {}
    for item in set_args:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _run(fn):
    """Map package errors onto the documented exit codes."""
    try:
        return fn()
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(2)
    except RefinvError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(3)


config_opt = click.option("--config", "config_path", type=click.Path(exists=True),
                          default=None, help="Key-value config file.")
set_opt = click.option("--set", "set_args", multiple=True, metavar="KEY=VALUE",
                       help="Override any config field (repeatable).")


@click.group()
def main() -> None:
    """Conditional image generation by inverting a frozen referee model,
    balanced against a diffusion fidelity prior."""


@main.command("train-toys")
@config_opt
@set_opt
@click.option("--out", "out_dir", default="toys", show_default=True,
              help="Directory for the dataset and checkpoints.")
def cmd_train_toys(config_path, set_args, out_dir):
    """Build the dataset and train both referees and the diffusion prior."""
    def body():
        from .workflow import train_toys_workflow
        cfg = load_config(config_path, _overrides(set_args))
        manifest = train_toys_workflow(cfg, out_dir)
        click.echo(f"toys written to {out_dir}")
        for name, ck in manifest["checksums"].items():
            click.echo(f"  {name}: {ck[:16]}")
    _run(body)


@main.command("generate")
@config_opt
@set_opt
@click.option("--toys", "toys_dir", default="toys", show_default=True)
@click.option("--out", "out_dir", default="runs", show_default=True)
@click.option("--prompt", "prompts", multiple=True, help="Prompt text (repeatable).")
@click.option("--prompt-file", type=click.Path(exists=True), default=None,
              help="File with one prompt per line.")
@click.option("--variant", type=click.Choice(["combined", "referee-only", "sds-only"]),
              default=None, help="Pipeline variant (overrides run.variant).")
@click.option("--parallel", type=int, default=None, help="Worker processes (overrides run.parallel).")
def cmd_generate(config_path, set_args, toys_dir, out_dir, prompts, prompt_file, variant, parallel):
    """Generate one image per prompt; per-prompt seed = base seed + index."""
    def body():
        from .workflow import generate_workflow
        over = _overrides(set_args)
        if variant is not None:
            over["run.variant"] = variant
        if parallel is not None:
            over["run.parallel"] = str(parallel)
        cfg = load_config(config_path, over)
        prompt_list = list(prompts)
        if prompt_file is not None:
            prompt_list += [ln.strip() for ln in Path(prompt_file).read_text().splitlines()
                            if ln.strip()]
        if not prompt_list:
            raise ConfigError("no prompts given (use --prompt or --prompt-file)")
        dirs = generate_workflow(cfg, prompt_list, toys_dir, out_dir)
        for d in dirs:
            click.echo(d)
    _run(body)


@main.command("verify-theory")
@click.option("--sigma", "sigmas", multiple=True, type=float,
              help="Smoothing stds to test (default 0.25 0.5 1.0).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", default=None, help="Where to write theory_report.csv.")
def cmd_verify_theory(sigmas, seed, out_dir):
    """Numerically check the smoothing bounds; nonzero exit on any failure."""
    def body():
        from .workflow import theory_workflow
        use = tuple(sigmas) if sigmas else (0.25, 0.5, 1.0)
        report = theory_workflow(use, seed=seed, out_dir=out_dir)
        for line in report.lines():
            click.echo(line)
        if not report.all_passed:
            raise RefinvError("one or more theory checks failed")
        click.echo("all theory checks passed")
    _run(body)


@main.command("evaluate")
@config_opt
@set_opt
@click.option("--toys", "toys_dir", default="toys", show_default=True)
@click.option("--out", "out_dir", default="evaluation", show_default=True)
def cmd_evaluate(config_path, set_args, toys_dir, out_dir):
    """Compare referee-only / sds-only / combined pipelines on a prompt grid."""
    def body():
        from .workflow import evaluate_workflow
        cfg = load_config(config_path, _overrides(set_args))
        report = evaluate_workflow(cfg, toys_dir, out_dir)
        click.echo(report.to_text())
    _run(body)


@main.command("ablate")
@config_opt
@set_opt
@click.option("--toys", "toys_dir", default="toys", show_default=True)
@click.option("--out", "out_dir", default="ablation", show_default=True)
@click.option("--grid", "grid_args", multiple=True, metavar="FIELD=V1,V2,...",
              help="ScheduleConfig field and its values (repeatable).")
def cmd_ablate(config_path, set_args, toys_dir, out_dir, grid_args):
    """Sweep schedule fields over a cross-product grid and score each cell."""
    def body():
        from .workflow import ablate_workflow
        cfg = load_config(config_path, _overrides(set_args))
        grid: dict[str, list[str]] = {}
        for item in grid_args:
            if "=" not in item:
                raise ConfigError(f"--grid expects field=v1,v2,..., got {item!r}")
            key, vals = item.split("=", 1)
            grid[key.strip()] = [v.strip() for v in vals.split(",") if v.strip()]
        cells = ablate_workflow(cfg, toys_dir, out_dir, grid)
        for cell in cells:
            click.echo(str(cell))
    _run(body)


if __name__ == "__main__":
    main()
