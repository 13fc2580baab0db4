"""Diffusion fidelity prior: noise schedule, CFG combination, SDS gradient.

The SDS gradient follows the score-distillation approximation: the guided
noise residual is treated as a constant (no gradient flows through the noise
prediction network) and is chained through the decoder Jacobian only. The
residual is normalized by the number of image elements (mean-reduced
objective) so the configured weights stay meaningful at any resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .core import Decoder, LatentState, Prompt
from .errors import ConfigError, EvalError, ShapeError


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta forward schedule with cumulative products alpha_bar[0..T],
    where alpha_bar[0] = 1 and alpha_bar[t] is strictly decreasing."""

    betas: tuple[float, ...]

    @classmethod
    def linear(cls, steps: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2) -> "NoiseSchedule":
        if steps < 1 or not (0 < beta_start <= beta_end < 1):
            raise ConfigError(f"bad schedule ({steps}, {beta_start}, {beta_end})")
        if steps == 1:
            return cls(betas=(beta_start,))
        step = (beta_end - beta_start) / (steps - 1)
        return cls(betas=tuple(beta_start + i * step for i in range(steps)))

    @property
    def steps(self) -> int:
        return len(self.betas)

    def alpha_bars(self) -> torch.Tensor:
        ab = [1.0]
        for b in self.betas:
            ab.append(ab[-1] * (1.0 - b))
        t = torch.tensor(ab, dtype=torch.float64)
        if not (t[1:] < t[:-1]).all() or float(t[-1]) <= 0.0:
            raise ConfigError("alpha_bar must be strictly decreasing within (0, 1]")
        return t

    def noise_to(self, x: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
        ab = float(self.alpha_bars()[t])
        return math.sqrt(ab) * x + math.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# prior contract
# ---------------------------------------------------------------------------

class DiffusionPriorInterface:
    """Frozen noise-prediction model with classifier-free guidance support.

    ``predict_eps(x_t, t, cond)`` returns the predicted noise for integer
    timestep t in 1..T; ``cond=None`` selects the null-condition branch
    (reserved token), which is the unconditional input to CFG.
    """

    schedule: NoiseSchedule

    @property
    def frozen(self) -> bool:
        raise NotImplementedError

    def checksum(self) -> str:
        raise NotImplementedError

    def predict_eps(self, x_t: torch.Tensor, t: int, cond: Prompt | None) -> torch.Tensor:
        raise NotImplementedError


@dataclass(frozen=True)
class SDSConfig:
    """Guidance scale and the uniform timestep sampler range (fractions of T)."""

    cfg_scale: float = 30.0
    t_min: float = 0.02
    t_max: float = 0.98

    def validate(self) -> None:
        if self.cfg_scale < 0:
            raise ConfigError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise ConfigError(f"need 0 <= t_min < t_max <= 1, got {self.t_min}, {self.t_max}")

    def t_bounds(self, steps: int) -> tuple[int, int]:
        lo = max(1, math.ceil(self.t_min * steps))
        hi = max(lo, min(steps, math.floor(self.t_max * steps)))
        return lo, hi


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, s: float) -> torch.Tensor:
    """Classifier-free guidance: eps_c + s * (eps_c - eps_u)."""
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(
            f"eps shapes differ: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}"
        )
    return eps_cond + s * (eps_cond - eps_uncond)


def sds_gradient(prior: DiffusionPriorInterface, state: LatentState, decoder: Decoder,
                 y: Prompt | None, cfg: SDSConfig, rng: torch.Generator) -> torch.Tensor:
    """One-draw SDS gradient w.r.t. z.

    Draws t uniformly from the sampler range and eps ~ N(0, I), noises the
    decoded image, and chains the guided residual (stop-gradient) through the
    decoder: grad = (cfg_combine(...) - eps) . dx/dz / numel(x).
    """
    if not prior.frozen:
        raise EvalError("prior must be frozen during inversion")
    cfg.validate()
    z = state.z.detach().clone().requires_grad_(True)
    x = decoder(z)
    lo, hi = cfg.t_bounds(prior.schedule.steps)
    t = int(torch.randint(lo, hi + 1, (), generator=rng).item())
    eps = torch.randn(x.shape, generator=rng).to(x.dtype)
    with torch.no_grad():
        x_t = prior.schedule.noise_to(x.detach(), t, eps)
        e_c = prior.predict_eps(x_t, t, y)
        e_u = prior.predict_eps(x_t, t, None)
        residual = cfg_combine(e_c, e_u, cfg.cfg_scale) - eps
    (residual * x).sum().div(x.numel()).backward()
    grad = z.grad.detach().clone()
    if not torch.isfinite(grad).all():
        raise EvalError("non-finite SDS gradient")
    return grad


def sds_weight(i: int, sched) -> float:
    """Cosine-decayed SDS weight w2(i) over iterations 0..I-1."""
    from .core import cosine_interp
    if not 0 <= i < sched.iterations:
        raise IndexError(f"iteration {i} outside [0, {sched.iterations})")
    return cosine_interp(sched.w2_start, sched.w2_end, i, sched.iterations)


def ancestral_sample(prior: DiffusionPriorInterface, n: int, cond: Prompt | None,
                     cfg_scale: float, rng: torch.Generator,
                     image_shape: tuple[int, int, int] = (3, 32, 32)) -> torch.Tensor:
    """Plain DDPM ancestral sampling (used for toy-prior sanity checks only)."""
    ab = prior.schedule.alpha_bars()
    betas = prior.schedule.betas
    x = torch.randn((n, *image_shape), generator=rng)
    with torch.no_grad():
        for t in range(prior.schedule.steps, 0, -1):
            e = prior.predict_eps(x, t, cond)
            if cfg_scale > 0:
                e_u = prior.predict_eps(x, t, None)
                e = cfg_combine(e, e_u, cfg_scale)
            beta = betas[t - 1]
            alpha = 1.0 - beta
            coef = beta / math.sqrt(1.0 - float(ab[t]))
            x = (x - coef * e) / math.sqrt(alpha)
            if t > 1:
                var = (1.0 - float(ab[t - 1])) / (1.0 - float(ab[t])) * beta
                x = x + math.sqrt(var) * torch.randn(x.shape, generator=rng)
    return x.clamp(-1.0, 1.0)


# ---------------------------------------------------------------------------
# stub priors (interface demonstrations; used heavily by tests)
# ---------------------------------------------------------------------------

class ZeroStubPrior(DiffusionPriorInterface):
    """Predicts zero noise on both branches."""

    def __init__(self, schedule: NoiseSchedule | None = None):
        self.schedule = schedule or NoiseSchedule.linear()

    @property
    def frozen(self) -> bool:
        return True

    def checksum(self) -> str:
        return "zero-stub"

    def predict_eps(self, x_t, t, cond):
        return torch.zeros_like(x_t)


class ConstantStubPrior(DiffusionPriorInterface):
    """Predicts a constant value on both branches (CFG collapses)."""

    def __init__(self, value: float, schedule: NoiseSchedule | None = None):
        self.value = value
        self.schedule = schedule or NoiseSchedule.linear()

    @property
    def frozen(self) -> bool:
        return True

    def checksum(self) -> str:
        return f"constant-stub-{self.value}"

    def predict_eps(self, x_t, t, cond):
        return torch.full_like(x_t, self.value)


class PerfectStubPrior(DiffusionPriorInterface):
    """Inverts the forward noising of a known clean image: given
    x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps, returns exactly eps."""

    def __init__(self, x0: torch.Tensor, schedule: NoiseSchedule | None = None):
        self.x0 = x0.detach()
        self.schedule = schedule or NoiseSchedule.linear()

    @property
    def frozen(self) -> bool:
        return True

    def checksum(self) -> str:
        return "perfect-stub"

    def predict_eps(self, x_t, t, cond):
        ab = float(self.schedule.alpha_bars()[t])
        return (x_t - math.sqrt(ab) * self.x0) / math.sqrt(1.0 - ab)
