"""Grading generated images with a held-out referee, the fidelity proxy,
pipeline comparisons, and gradient visualizations."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import augment, grammar
from .core import Decoder, Prompt, ScheduleConfig
from .engine import run_inversion
from .errors import ConfigError, EvalError, VocabError
from .nets import ToyDenoiser, ToyReferee
from .referee import MATCH, RefereeInterface
from .sds import DiffusionPriorInterface


# ---------------------------------------------------------------------------
# alignment score
# ---------------------------------------------------------------------------

def predict_attribute_pairs(eval_referee: ToyReferee, images: torch.Tensor,
                            itm_gate: bool = True) -> list[list[grammar.Attribute]]:
    """Attribute pairs read off each image by the evaluation referee.

    Pairs come from a greedy caption decode; with the ITM gate enabled a
    decoded pair is kept only if the referee's match head also accepts the
    single-pair caption for that image, which suppresses the decoder's
    fixed-caption bias on off-manifold images.
    """
    toks = eval_referee.greedy_caption(images)
    decoded: list[list[grammar.Attribute]] = []
    for row in toks:
        try:
            decoded.append(list(grammar.decode_tokens(row)))
        except VocabError:
            decoded.append([])
    if not itm_gate:
        return decoded
    flat_imgs, flat_toks, owners = [], [], []
    for i, pairs in enumerate(decoded):
        for pair in pairs:
            flat_imgs.append(images[i])
            flat_toks.append(torch.tensor(grammar.caption_tokens([pair]), dtype=torch.long))
            owners.append((i, pair))
    if not owners:
        return decoded
    with torch.no_grad():
        p = eval_referee.itm_probs(torch.stack(flat_imgs), torch.stack(flat_toks))
    kept: list[list[grammar.Attribute]] = [[] for _ in decoded]
    for (i, pair), prob in zip(owners, p[:, MATCH]):
        if float(prob) >= 0.5:
            kept[i].append(pair)
    return kept


def alignment_score(images: torch.Tensor, prompts: list[Prompt],
                    eval_referee: ToyReferee, *,
                    inversion_checksum: str | None = None,
                    all_or_nothing: bool = False,
                    itm_gate: bool = True) -> float:
    """Fraction of prompted (color, shape) pairs the evaluation referee reads
    back from each image, averaged over the set (in [0, 1]).

    The evaluation referee must be distinct from the inversion referee; pass
    the inversion referee's checksum to enforce the inequality.
    """
    if images.ndim != 4 or images.shape[0] == 0:
        raise EvalError(f"alignment_score needs a non-empty (N,3,H,W) batch, got {tuple(images.shape)}")
    if len(prompts) != images.shape[0]:
        raise EvalError(f"{images.shape[0]} images but {len(prompts)} prompts")
    if not eval_referee.frozen:
        raise ConfigError("evaluation referee must be frozen")
    if inversion_checksum is not None and eval_referee.checksum() == inversion_checksum:
        raise ConfigError("evaluation referee must differ from the inversion referee")

    predicted = predict_attribute_pairs(eval_referee, images, itm_gate=itm_gate)
    scores = []
    for pairs, prompt in zip(predicted, prompts):
        want = list(prompt.attributes)
        pool = list(pairs)
        hit = 0
        for pair in want:
            if pair in pool:
                pool.remove(pair)
                hit += 1
        if all_or_nothing:
            scores.append(1.0 if hit == len(want) else 0.0)
        else:
            scores.append(hit / len(want))
    return float(sum(scores) / len(scores))


# ---------------------------------------------------------------------------
# fidelity proxy
# ---------------------------------------------------------------------------

def fidelity_proxy(images: torch.Tensor, prior: DiffusionPriorInterface,
                   t_eval: int = 25, n_mc: int = 8, seed: int = 0) -> float:
    """Mean squared noise-prediction residual at a fixed timestep (null
    condition), averaged over noise draws; lower = more data-like."""
    if not prior.frozen:
        raise EvalError("prior must be frozen")
    rng = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for _ in range(n_mc):
            eps = torch.randn(images.shape, generator=rng)
            x_t = prior.schedule.noise_to(images, t_eval, eps)
            pred = prior.predict_eps(x_t, t_eval, None)
            total += float(((pred - eps) ** 2).mean())
    return total / n_mc


# ---------------------------------------------------------------------------
# pipeline comparison
# ---------------------------------------------------------------------------

PIPELINE_VARIANTS = ("referee-only", "sds-only", "combined")


@dataclass
class PipelineScore:
    alignment_mean: float
    alignment_std: float
    fidelity_mean: float
    fidelity_std: float
    n_runs: int
    failures: int


@dataclass
class ComparisonReport:
    prompts: list[str]
    seeds: list[int]
    pipelines: dict[str, PipelineScore] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"pipelines compared on {len(self.prompts)} prompts x {len(self.seeds)} seeds"]
        for name, s in self.pipelines.items():
            lines.append(
                f"  {name:14s} alignment {s.alignment_mean:.4f} +/- {s.alignment_std:.4f}"
                f"   fidelity {s.fidelity_mean:.4f} +/- {s.fidelity_std:.4f}"
                f"   runs {s.n_runs} (failed {s.failures})"
            )
        return "\n".join(lines)

    def to_csv_text(self) -> str:
        lines = ["pipeline,alignment_mean,alignment_std,fidelity_mean,fidelity_std,n_runs,failures"]
        for name, s in self.pipelines.items():
            lines.append(
                f"{name},{s.alignment_mean:.6f},{s.alignment_std:.6f},"
                f"{s.fidelity_mean:.6f},{s.fidelity_std:.6f},{s.n_runs},{s.failures}"
            )
        return "\n".join(lines)


def variant_setup(name: str, sched: ScheduleConfig, aug_spec: augment.AugmentationSpec,
                  referee: RefereeInterface | None, prior: DiffusionPriorInterface | None):
    """(schedule, aug_spec, referee, prior) for a named pipeline variant.

    referee-only forces w2 to 0 (and skips the prior entirely for speed);
    sds-only disables the referee branch; the -noaug variant additionally
    evaluates the referee loss without augmentation (K = 0).
    """
    if name == "combined":
        return sched, aug_spec, referee, prior
    if name == "referee-only":
        return sched.replace(w2_start=0.0, w2_end=0.0), aug_spec, referee, None
    if name == "referee-only-noaug":
        return sched.replace(w2_start=0.0, w2_end=0.0), replace(aug_spec, k=0), referee, None
    if name == "sds-only":
        return sched, aug_spec, None, prior
    raise ConfigError(f"unknown pipeline variant {name!r}")


def sample_eval_prompts(n: int, seed: int = 0) -> list[Prompt]:
    """Deterministic selection of two-object prompts with distinct pairs."""
    pairs = [(c, s) for c in range(len(grammar.COLORS)) for s in range(len(grammar.SHAPES))]
    combos = [(a, b) for a in pairs for b in pairs if a != b]
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(combos))[:n]
    return [Prompt.from_attributes([combos[i][0], combos[i][1]]) for i in sorted(idx)]


def compare_pipelines(prompts: list[Prompt], seeds: list[int], *,
                      referee: RefereeInterface, prior: DiffusionPriorInterface,
                      decoder: Decoder, eval_referee: ToyReferee,
                      sched: ScheduleConfig | None = None,
                      aug_spec: augment.AugmentationSpec | None = None,
                      variants: tuple[str, ...] = PIPELINE_VARIANTS,
                      t_eval: int = 25, n_mc: int = 4,
                      progress=None) -> ComparisonReport:
    """Run every variant over the identical prompt x seed grid and score it.

    Failed runs are recorded as missing cells; the report is produced either
    way. Assertions about orderings live in the caller (acceptance tests).
    """
    if len(prompts) == 0 or len(seeds) == 0:
        raise ConfigError("compare_pipelines needs at least one prompt and one seed")
    sched = sched or ScheduleConfig()
    aug_spec = aug_spec or augment.AugmentationSpec()
    report = ComparisonReport(prompts=[p.text for p in prompts], seeds=list(seeds))
    inv_checksum = referee.checksum()

    for name in variants:
        v_sched, v_aug, v_ref, v_prior = variant_setup(name, sched, aug_spec, referee, prior)
        images, owners, failures = [], [], 0
        for pi, prompt in enumerate(prompts):
            for seed in seeds:
                run_sched = v_sched.replace(seed=int(seed) + 10007 * pi)
                try:
                    result = run_inversion(run_sched, v_ref, v_prior, decoder, prompt, v_aug)
                    images.append(result.image[0])
                    owners.append(prompt)
                except Exception:
                    failures += 1
                if progress is not None:
                    progress(name, pi, seed)
        if not images:
            report.pipelines[name] = PipelineScore(
                alignment_mean=float("nan"), alignment_std=float("nan"),
                fidelity_mean=float("nan"), fidelity_std=float("nan"),
                n_runs=0, failures=failures,
            )
            continue
        batch = torch.stack(images)
        per_align = []
        for i in range(batch.shape[0]):
            per_align.append(alignment_score(
                batch[i:i + 1], [owners[i]], eval_referee,
                inversion_checksum=inv_checksum,
            ))
        per_fid = [fidelity_proxy(batch[i:i + 1], prior, t_eval=t_eval, n_mc=n_mc)
                   for i in range(batch.shape[0])]
        report.pipelines[name] = PipelineScore(
            alignment_mean=float(np.mean(per_align)),
            alignment_std=float(np.std(per_align)),
            fidelity_mean=float(np.mean(per_fid)),
            fidelity_std=float(np.std(per_fid)),
            n_runs=len(per_align), failures=failures,
        )
    return report


# ---------------------------------------------------------------------------
# gradient visualization
# ---------------------------------------------------------------------------

def dump_gradient_channels(grad: torch.Tensor, path: str | Path) -> Path:
    """Write a min-max normalized image of the first three gradient channels.

    A constant gradient maps to mid-gray; fewer than three channels fall back
    to replicating channel 0 with a warning.
    """
    g = grad.detach()
    if g.ndim == 4:
        g = g[0]
    if g.ndim != 3:
        raise EvalError(f"expected (C,H,W) gradient, got {tuple(grad.shape)}")
    if g.shape[0] < 3:
        warnings.warn(f"gradient has {g.shape[0]} channel(s); replicating channel 0", RuntimeWarning)
        g = g[0:1].expand(3, -1, -1)
    else:
        g = g[:3]
    mn, mx = float(g.min()), float(g.max())
    if not math.isfinite(mn) or not math.isfinite(mx):
        raise EvalError("non-finite gradient values")
    if mx - mn < 1e-12:
        norm = torch.full_like(g, 0.5)
    else:
        norm = (g - mn) / (mx - mn)
    arr = (norm * 255.0).round().clamp(0, 255).to(torch.uint8).permute(1, 2, 0).numpy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)
    return path
