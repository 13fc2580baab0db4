"""Frozen discriminative referee: two-head contract, alignment losses, gradient.

The referee exposes a match head (image x caption -> 2-class probabilities,
index 0 = match) and a caption head (image x token prefix -> next-token
probabilities, teacher forced). Any external model can drive the inversion by
implementing :class:`RefereeInterface`; a small convolutional/GRU referee is
bundled for the desk-scale stack (see :mod:`refinv.toys`).
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import augment, grammar
from .core import Decoder, LatentState, Prompt
from .errors import EvalError, ShapeError

MATCH, NO_MATCH = 0, 1
LABEL_SMOOTHING = 0.1
_PROB_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# interface
# ---------------------------------------------------------------------------

class RefereeInterface:
    """Adapter contract for plugging a vision-language referee into the engine.

    Implementations must be frozen (no parameter updates during inversion) and
    both heads must return valid probability distributions. Shapes:

    - ``itm_probs(images, tokens)``: (N, 3, H, W) x (N, S) -> (N, 2)
    - ``caption_probs(images, tokens)``: (N, 3, H, W) x (N, S) -> (N, S-1, V),
      teacher-forced next-token distributions for positions 1..S-1.
    """

    vocab_size: int = grammar.VOCAB_SIZE

    @property
    def frozen(self) -> bool:
        raise NotImplementedError

    def checksum(self) -> str:
        raise NotImplementedError

    def itm_probs(self, images: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def caption_probs(self, images: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


def module_checksum(module: nn.Module) -> str:
    """sha256 over name-sorted parameter/buffer bytes; detects any mutation."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        t = state[name].detach().cpu().contiguous()
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    """Alignment loss split L = L_itm + L_cg; fields are torch scalars."""

    itm: torch.Tensor
    cg: torch.Tensor
    total: torch.Tensor

    def floats(self) -> tuple[float, float, float]:
        return float(self.itm), float(self.cg), float(self.total)


def itm_loss(p: torch.Tensor, label: int) -> torch.Tensor:
    """Binary cross-entropy of a match/no-match distribution against a label.

    ``p`` is (..., 2) with index 0 = match. A zero probability at the labeled
    class is clamped to 1e-12 with a warning.
    """
    if p.shape[-1] != 2:
        raise ShapeError(f"itm distribution must have 2 classes, got {tuple(p.shape)}")
    if label not in (MATCH, NO_MATCH):
        raise ValueError(f"label must be MATCH (0) or NO_MATCH (1), got {label}")
    sel = p[..., label]
    if float(sel.detach().min()) < _PROB_FLOOR:
        warnings.warn("itm probability at labeled class clamped to 1e-12", RuntimeWarning)
    return -torch.log(sel.clamp(min=_PROB_FLOOR)).mean()


def smoothed_targets(gt_tokens: torch.Tensor, vocab: int, alpha: float) -> torch.Tensor:
    """(1-alpha) one-hot + alpha/V uniform, per step (float64)."""
    one_hot = F.one_hot(gt_tokens, vocab).to(torch.float64)
    return (1.0 - alpha) * one_hot + alpha / vocab


def caption_loss(step_probs: torch.Tensor, gt_tokens: torch.Tensor,
                 alpha: float = LABEL_SMOOTHING) -> torch.Tensor:
    """Label-smoothed autoregressive cross-entropy, averaged over steps.

    ``step_probs`` is (S, V) or (N, S, V) of next-token distributions and
    ``gt_tokens`` the matching (S,) / (N, S) targets. PAD positions are
    excluded from the average. Returns a scalar (mean over batch and steps).
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    if step_probs.ndim == 2:
        step_probs = step_probs.unsqueeze(0)
        gt_tokens = gt_tokens.unsqueeze(0)
    if step_probs.shape[:2] != gt_tokens.shape:
        raise ShapeError(
            f"step_probs {tuple(step_probs.shape)} does not match targets {tuple(gt_tokens.shape)}"
        )
    vocab = step_probs.shape[-1]
    q = smoothed_targets(gt_tokens, vocab, alpha).to(step_probs.dtype)
    h = -(q * torch.log(step_probs.clamp(min=_PROB_FLOOR))).sum(-1)   # (N, S)
    mask = (gt_tokens != grammar.PAD).to(step_probs.dtype)
    denom = mask.sum(-1).clamp(min=1.0)
    return ((h * mask).sum(-1) / denom).mean()


def caption_loss_per_sample(step_probs: torch.Tensor, gt_tokens: torch.Tensor,
                            alpha: float = LABEL_SMOOTHING) -> torch.Tensor:
    """Per-sample variant of :func:`caption_loss`: (N, S, V) -> (N,)."""
    vocab = step_probs.shape[-1]
    q = smoothed_targets(gt_tokens, vocab, alpha).to(step_probs.dtype)
    h = -(q * torch.log(step_probs.clamp(min=_PROB_FLOOR))).sum(-1)
    mask = (gt_tokens != grammar.PAD).to(step_probs.dtype)
    return (h * mask).sum(-1) / mask.sum(-1).clamp(min=1.0)


def alignment_loss(referee: RefereeInterface, x: torch.Tensor, y: Prompt) -> LossBreakdown:
    """L = L_itm + L_cg for an image batch against one prompt (label = match)."""
    if not referee.frozen:
        raise EvalError("referee must be frozen during inversion")
    n = x.shape[0]
    tokens = y.token_tensor().unsqueeze(0).expand(n, -1)
    p_itm = referee.itm_probs(x, tokens)
    itm = itm_loss(p_itm, MATCH)
    probs = referee.caption_probs(x, tokens)
    cg = caption_loss(probs, tokens[:, 1:], alpha=LABEL_SMOOTHING)
    return LossBreakdown(itm=itm, cg=cg, total=itm + cg)


def alignment_per_replica(referee: RefereeInterface, reps: torch.Tensor,
                          tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-replica (itm, cg) losses for a stack of augmented images."""
    p_itm = referee.itm_probs(reps, tokens)
    if float(p_itm[:, MATCH].detach().min()) < _PROB_FLOOR:
        warnings.warn("itm probability at labeled class clamped to 1e-12", RuntimeWarning)
    itm_per = -torch.log(p_itm[:, MATCH].clamp(min=_PROB_FLOOR))
    probs = referee.caption_probs(reps, tokens)
    cg_per = caption_loss_per_sample(probs, tokens[:, 1:], alpha=LABEL_SMOOTHING)
    return itm_per, cg_per


@dataclass
class RefereeGradResult:
    grad: torch.Tensor              # shape of z
    itm_mean: float
    cg_mean: float
    total_mean: float               # the K-sample estimate of the smoothed loss
    per_sample: list[tuple[str, float]]


def alignment_grad_stats(referee: RefereeInterface, state: LatentState, decoder: Decoder,
                         y: Prompt, spec: augment.AugmentationSpec,
                         rng: torch.Generator) -> RefereeGradResult:
    """Gradient of the K-sample Monte-Carlo estimate of the smoothed alignment
    loss w.r.t. z, plus the loss statistics from the same replicas."""
    if not referee.frozen:
        raise EvalError("referee must be frozen during inversion")
    z = state.z.detach().clone().requires_grad_(True)
    x = decoder(z)
    k = max(spec.k, 1)
    transforms = augment.sample_transforms(spec, rng, k) if spec.k > 0 else [augment.Transform()]
    reps = augment.apply_transform_stack(transforms, x)
    tokens = y.token_tensor().unsqueeze(0).expand(reps.shape[0], -1)
    itm_per, cg_per = alignment_per_replica(referee, reps, tokens)
    total_per = itm_per + cg_per
    loss = total_per.mean()
    if loss.requires_grad:
        loss.backward()
    # a constant referee (no dependence on the image) has zero gradient
    grad = z.grad.detach().clone() if z.grad is not None else torch.zeros_like(z)
    if not torch.isfinite(grad).all():
        raise EvalError("non-finite referee gradient")
    per = sorted(
        ((t.describe(), float(v)) for t, v in zip(transforms, total_per.detach())),
        key=lambda p: p[1],
    )
    return RefereeGradResult(
        grad=grad, itm_mean=float(itm_per.detach().mean()),
        cg_mean=float(cg_per.detach().mean()), total_mean=float(loss.detach()),
        per_sample=per,
    )


def alignment_grad(referee: RefereeInterface, state: LatentState, decoder: Decoder,
                   y: Prompt, spec: augment.AugmentationSpec,
                   rng: torch.Generator) -> torch.Tensor:
    return alignment_grad_stats(referee, state, decoder, y, spec, rng).grad


# ---------------------------------------------------------------------------
# stub referees (interface demonstrations; used heavily by tests)
# ---------------------------------------------------------------------------

class UniformStubReferee(RefereeInterface):
    """Outputs uniform distributions regardless of input: itm = (0.5, 0.5),
    caption = 1/V everywhere. Constant, so its inversion gradient is zero."""

    @property
    def frozen(self) -> bool:
        return True

    def checksum(self) -> str:
        return "uniform-stub"

    def itm_probs(self, images, tokens):
        n = images.shape[0]
        return torch.full((n, 2), 0.5, dtype=images.dtype)

    def caption_probs(self, images, tokens):
        n, s = tokens.shape
        v = self.vocab_size
        return torch.full((n, s - 1, v), 1.0 / v, dtype=images.dtype)


class ConstantStubReferee(RefereeInterface):
    """Outputs fixed (input-independent) distributions supplied at build time."""

    def __init__(self, p_match: float = 0.9, gt_prob: float = 0.9, gt_token: int = grammar.BOS):
        self.p_match = p_match
        self.gt_prob = gt_prob
        self.gt_token = gt_token

    @property
    def frozen(self) -> bool:
        return True

    def checksum(self) -> str:
        return f"constant-stub-{self.p_match}-{self.gt_prob}-{self.gt_token}"

    def itm_probs(self, images, tokens):
        n = images.shape[0]
        p = torch.tensor([self.p_match, 1.0 - self.p_match], dtype=images.dtype)
        return p.expand(n, 2)

    def caption_probs(self, images, tokens):
        n, s = tokens.shape
        v = self.vocab_size
        rest = (1.0 - self.gt_prob) / (v - 1)
        p = torch.full((v,), rest, dtype=images.dtype)
        p[self.gt_token] = self.gt_prob
        return p.expand(n, s - 1, v)
