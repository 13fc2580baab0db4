"""The inversion loop: dual-gradient updates with adaptive norm coupling,
Adam for the referee gradient, a raw step for SDS, EMA-with-restart, and
latent noise injection.

Iterations are 0-based. Per-iteration random draws happen in a fixed order
(SDS timestep and noise, then augmentation transforms, then injected latent
noise) from a single generator seeded by the schedule, so a run is bit-stable
under a fixed seed and thread count 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch

from . import augment, referee as referee_mod, sds
from .core import (
    METRICS_HEADER, Decoder, LatentState, Prompt, RunRecord, RunRow,
    ScheduleConfig, cosine_interp, decode, init_latent,
)
from .errors import EvalError


# ---------------------------------------------------------------------------
# primitive steps
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moments for the latent; the step counter advances only on
    iterations where the referee branch fires, keeping bias correction
    meaningful at referee_freq > 1."""

    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @classmethod
    def zeros_like(cls, z: torch.Tensor) -> "AdamState":
        return cls(m=torch.zeros_like(z), v=torch.zeros_like(z), step=0)


def adam_step(astate: AdamState, z: torch.Tensor, grad: torch.Tensor, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              ) -> tuple[AdamState, torch.Tensor]:
    """Bias-corrected Adam update; returns the new state and updated z."""
    step = astate.step + 1
    m = beta1 * astate.m + (1.0 - beta1) * grad
    v = beta2 * astate.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    z_new = z - lr * m_hat / (v_hat.sqrt() + eps)
    return AdamState(m=m, v=v, step=step), z_new


def coupled_scale(g_ref: torch.Tensor, g_sds: torch.Tensor, w1: float,
                  ) -> tuple[torch.Tensor, bool]:
    """Rescale the referee gradient so its norm is w1 times the SDS gradient
    norm, preserving direction. Returns (scaled, degenerate): a zero gradient
    on either side yields a zero vector with the degenerate flag set."""
    n_ref = float(torch.linalg.vector_norm(g_ref))
    n_sds = float(torch.linalg.vector_norm(g_sds))
    if n_ref == 0.0 or n_sds == 0.0:
        return torch.zeros_like(g_ref), True
    return g_ref * (w1 * n_sds / n_ref), False


def ema_step(shadow: torch.Tensor, current: torch.Tensor, lam: float) -> torch.Tensor:
    """lam * shadow + (1 - lam) * current."""
    if shadow.shape != current.shape:
        raise EvalError(f"ema shapes differ: {tuple(shadow.shape)} vs {tuple(current.shape)}")
    return lam * shadow + (1.0 - lam) * current


def ema_restart_due(i: int, e_s: int, e_rs: int) -> bool:
    """True iff i >= e_s and (i - e_s) % e_rs == 0."""
    return i >= e_s and (i - e_s) % e_rs == 0


def lr_value(i: int, sched: ScheduleConfig) -> float:
    """Cosine-decayed learning rate over iterations 0..I-1."""
    if not 0 <= i < sched.iterations:
        raise IndexError(f"iteration {i} outside [0, {sched.iterations})")
    return cosine_interp(sched.lr_start, sched.lr_end, i, sched.iterations)


def inject_noise(z: torch.Tensor, sigma_z: float, rng: torch.Generator) -> torch.Tensor:
    if sigma_z < 0:
        raise EvalError(f"sigma_z must be >= 0, got {sigma_z}")
    if sigma_z == 0.0:
        return z
    return z + sigma_z * torch.randn(z.shape, generator=rng).to(z.dtype)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

class InversionAborted(EvalError):
    """A sub-operation failed mid-run; carries the partial RunRecord."""

    def __init__(self, message: str, record: RunRecord):
        super().__init__(message)
        self.record = record


@dataclass
class RunResult:
    state: LatentState
    image: torch.Tensor
    record: RunRecord


def run_inversion(sched: ScheduleConfig,
                  referee: referee_mod.RefereeInterface | None,
                  prior: sds.DiffusionPriorInterface | None,
                  decoder: Decoder,
                  y: Prompt,
                  aug_spec: augment.AugmentationSpec | None = None,
                  *,
                  sds_t_range: tuple[float, float] = (0.02, 0.98),
                  run_dir: str | Path | None = None,
                  snapshot_every: int = 0,
                  dump_gradients: bool = False,
                  config_hash: str = "") -> RunResult:
    """Execute the full dual-gradient inversion for one prompt.

    Per iteration i in 0..I-1: decode; form the w2(i)-scaled SDS gradient;
    every referee_freq iterations (outside the SDS-only tail) form the
    augmented referee gradient, couple its norm to w1 times the scaled SDS
    gradient, and apply it with Adam; apply the SDS gradient as a raw step
    with the (cosine-decayed) learning rate; inject latent noise; update the
    EMA shadow and restart from it when due.

    A referee of None (or referee_freq beyond I) degenerates to pure SDS
    optimization; w2 == 0 (or prior None) degenerates to pure referee
    inversion, in which case the referee gradient bypasses the norm coupling.
    """
    sched.validate()
    if aug_spec is None:
        aug_spec = augment.AugmentationSpec()
    aug_spec.validate()
    if referee is not None and not referee.frozen:
        raise EvalError("referee must be frozen")
    if prior is not None and not prior.frozen:
        raise EvalError("prior must be frozen")

    rng = torch.Generator().manual_seed(int(sched.seed))
    state = init_latent(decoder.latent_shape(), sched.seed)
    astate = AdamState.zeros_like(state.z)
    cfg = sds.SDSConfig(cfg_scale=sched.cfg_scale, t_min=sds_t_range[0], t_max=sds_t_range[1])
    record = RunRecord(config_hash=config_hash, sds_space="pixel")

    run_path = Path(run_dir) if run_dir is not None else None
    csv_file = None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        csv_file = open(run_path / "metrics.csv", "w", newline="")
        csv_file.write(",".join(METRICS_HEADER) + "\n")
        csv_file.flush()

    def close_csv():
        if csv_file is not None:
            csv_file.close()

    try:
        for i in range(sched.iterations):
            lr = lr_value(i, sched)
            w2 = sds.sds_weight(i, sched)

            # -- SDS branch (always evaluated when a prior is configured, so
            #    variant ablations share the same draw sequence)
            if prior is not None:
                g_sds_raw = sds.sds_gradient(prior, state, decoder, y, cfg, rng)
                g_sds_scaled = w2 * g_sds_raw
            else:
                g_sds_scaled = torch.zeros_like(state.z)
            sds_active = prior is not None and w2 > 0.0
            n_sds_scaled = float(torch.linalg.vector_norm(g_sds_scaled))

            # -- referee branch
            itm = cg = tilde = n_ref = None
            in_tail = i >= sched.iterations - sched.sds_only_tail
            fire = (referee is not None) and (not in_tail) and (i % sched.referee_freq == 0)
            if fire:
                res = referee_mod.alignment_grad_stats(referee, state, decoder, y, aug_spec, rng)
                if sds_active:
                    g_ref, degenerate = coupled_scale(res.grad, g_sds_scaled, sched.w1)
                else:
                    g_ref, degenerate = res.grad, False
                if dump_gradients and run_path is not None and snapshot_every and i % snapshot_every == 0:
                    from .evaluate import dump_gradient_channels
                    dump_gradient_channels(res.grad, run_path / "grads" / f"referee_{i:03d}.png")
                    if prior is not None:
                        dump_gradient_channels(g_sds_raw, run_path / "grads" / f"sds_{i:03d}.png")
                itm, cg, tilde = res.itm_mean, res.cg_mean, res.total_mean
                n_ref = float(torch.linalg.vector_norm(g_ref))
                astate, z_new = adam_step(
                    astate, state.z, g_ref, lr,
                    sched.adam_beta1, sched.adam_beta2, sched.adam_eps,
                )
                state.z = z_new

            # -- raw SDS step
            if sds_active:
                sds_lr = sched.sds_lr if sched.sds_lr is not None else lr
                state.z = state.z - sds_lr * g_sds_scaled

            # -- noise injection (after both updates, before the EMA update)
            state.z = inject_noise(state.z, sched.sigma_z, rng)

            # -- EMA update and scheduled restart
            state.z_ema = ema_step(state.z_ema, state.z, sched.lambda_ema)
            restart = ema_restart_due(i, sched.e_s, sched.e_rs)
            if restart:
                state.z = state.z_ema.clone()

            state.iter = i + 1
            state.check()

            row = RunRow(
                iter=i, loss_itm=itm, loss_cg=cg, loss_tilde=tilde,
                grad_ref_norm=n_ref, grad_sds_norm=n_sds_scaled,
                lr=lr, w2=w2, ema_restart=restart,
            )
            record.rows.append(row)
            if csv_file is not None:
                csv_file.write(",".join(row.to_csv_fields()) + "\n")
                csv_file.flush()

            if run_path is not None and snapshot_every and i % snapshot_every == 0:
                from .images import save_image
                snap = run_path / "snapshots" / f"{i:03d}.png"
                save_image(decode(decoder, state), snap)
                record.snapshot_paths.append(str(snap))
    except Exception as exc:
        close_csv()
        raise InversionAborted(f"run aborted at iteration {state.iter}: {exc}", record) from exc

    image = decode(decoder, state)
    if run_path is not None:
        from .images import save_image
        final = run_path / "final.png"
        save_image(image, final)
        record.final_image_path = str(final)
    close_csv()
    return RunResult(state=state, image=image, record=record)
