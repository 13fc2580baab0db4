"""Optimization state, run configuration, the decoder contract, and run records."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass, field

import torch

from . import grammar
from .errors import ConfigError, EvalError, ShapeError


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Prompt:
    """A text condition with its parsed attributes and caption tokens."""

    text: str
    attributes: tuple[grammar.Attribute, ...]
    tokens: tuple[int, ...]

    @classmethod
    def from_text(cls, text: str) -> "Prompt":
        attrs = tuple(grammar.parse_prompt_text(text))
        return cls(text=text, attributes=attrs, tokens=grammar.caption_tokens(attrs))

    @classmethod
    def from_attributes(cls, attributes) -> "Prompt":
        attrs = tuple(tuple(a) for a in attributes)
        return cls(
            text=grammar.attributes_text(attrs),
            attributes=attrs,
            tokens=grammar.caption_tokens(attrs),
        )

    def token_tensor(self) -> torch.Tensor:
        return torch.tensor(self.tokens, dtype=torch.long)


# ---------------------------------------------------------------------------
# latent state and image batches
# ---------------------------------------------------------------------------

@dataclass
class LatentState:
    """The optimization target z, its EMA shadow, and iteration bookkeeping."""

    z: torch.Tensor
    z_ema: torch.Tensor
    iter: int = 0
    seed: int = 0

    def check(self) -> None:
        if self.z.shape != self.z_ema.shape:
            raise ShapeError(f"z {tuple(self.z.shape)} != z_ema {tuple(self.z_ema.shape)}")
        if not torch.isfinite(self.z).all() or not torch.isfinite(self.z_ema).all():
            raise EvalError(f"non-finite latent state at iteration {self.iter}")


def init_latent(shape: tuple[int, ...], seed: int, dtype: torch.dtype = torch.float32) -> LatentState:
    """Draw z ~ N(0, I) from a seeded generator; the EMA shadow starts equal."""
    if len(shape) == 0 or any(int(d) <= 0 for d in shape):
        raise ConfigError(f"latent shape must have positive dims, got {shape}")
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(tuple(int(d) for d in shape), generator=gen, dtype=dtype)
    return LatentState(z=z, z_ema=z.clone(), iter=0, seed=int(seed))


def validate_image_batch(x: torch.Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"image batch must be (N, 3, H, W), got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise EvalError("non-finite pixels in image batch")
    if float(x.min()) < -1.0 - 1e-6 or float(x.max()) > 1.0 + 1e-6:
        raise EvalError("image batch outside [-1, 1]")


# ---------------------------------------------------------------------------
# decoder contract
# ---------------------------------------------------------------------------

class Decoder:
    """Differentiable map from a latent (C_l, H_l, W_l) to an image batch (1, 3, H, W).

    The output must lie in [-1, 1] for all finite inputs and be differentiable
    w.r.t. the latent. A learned decoder (e.g. a VAE decoder) plugs in behind
    this same contract; only the pixel decoder is bundled.
    """

    kind: str = "abstract"
    differentiable: bool = True

    def latent_shape(self) -> tuple[int, int, int]:
        raise NotImplementedError

    def __call__(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def check_latent(self, z: torch.Tensor) -> None:
        if tuple(z.shape) != self.latent_shape():
            raise ConfigError(
                f"latent shape {tuple(z.shape)} does not match decoder {self.latent_shape()}"
            )


class PixelDecoder(Decoder):
    """Identity-resolution decoder: x = tanh(z), latent (3, H, W)."""

    kind = "pixel"

    def __init__(self, height: int = 32, width: int = 32):
        self.height = int(height)
        self.width = int(width)

    def latent_shape(self) -> tuple[int, int, int]:
        return (3, self.height, self.width)

    def __call__(self, z: torch.Tensor) -> torch.Tensor:
        self.check_latent(z)
        return torch.tanh(z).unsqueeze(0)


class LearnedDecoder(Decoder):
    """Adapter placing an arbitrary differentiable module behind the contract.

    The module maps (1, C_l, H_l, W_l) to (1, 3, H, W); outputs are squashed
    with tanh so the range contract holds for any plugged-in network.
    """

    kind = "learned"

    def __init__(self, module: torch.nn.Module, latent_shape: tuple[int, int, int]):
        self.module = module
        self._latent_shape = tuple(int(d) for d in latent_shape)
        for p in module.parameters():
            p.requires_grad_(False)

    def latent_shape(self) -> tuple[int, int, int]:
        return self._latent_shape

    def __call__(self, z: torch.Tensor) -> torch.Tensor:
        self.check_latent(z)
        return torch.tanh(self.module(z.unsqueeze(0)))


def decode(decoder: Decoder, state: LatentState) -> torch.Tensor:
    """Decode the current latent into an image batch in [-1, 1]."""
    if not decoder.differentiable:
        raise ConfigError("decoder must be differentiable")
    x = decoder(state.z)
    validate_image_batch(x.detach())
    return x


# ---------------------------------------------------------------------------
# schedule configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleConfig:
    """Every hyperparameter of the inversion loop and its schedules."""

    iterations: int = 160          # I
    sds_only_tail: int = 10        # final iterations skip the referee branch
    w1: float = 2.0                # referee gradient norm multiple
    referee_freq: int = 1          # referee branch fires every f iterations
    w2_start: float = 800.0        # SDS weight, cosine-decayed
    w2_end: float = 400.0
    lr_start: float = 1.0          # learning rate, cosine-decayed
    lr_end: float = 0.5
    lambda_ema: float = 0.95
    e_s: int = 40                  # EMA restart start iteration
    e_rs: int = 60                 # EMA restart interval
    sigma_z: float = 0.2           # latent noise std injected per iteration
    cfg_scale: float = 30.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    sds_lr: float | None = None    # optional constant override for the SDS step
    seed: int = 0

    def validate(self) -> None:
        errs = []
        if not self.iterations > self.sds_only_tail >= 0:
            errs.append(f"need iterations > sds_only_tail >= 0, got {self.iterations}, {self.sds_only_tail}")
        if self.e_s < 1:
            errs.append(f"e_s must be >= 1, got {self.e_s}")
        if self.e_rs < 1:
            errs.append(f"e_rs must be >= 1, got {self.e_rs}")
        sds_disabled = self.w2_start == 0.0 and self.w2_end == 0.0
        if not (self.w2_start >= self.w2_end >= 0.0) or (self.w2_end == 0.0 and not sds_disabled):
            errs.append(f"need w2_start >= w2_end > 0 (or both 0 to disable SDS), got {self.w2_start}, {self.w2_end}")
        if not (self.lr_start >= self.lr_end > 0.0):
            errs.append(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if not (0.0 <= self.lambda_ema < 1.0):
            errs.append(f"lambda_ema must be in [0, 1), got {self.lambda_ema}")
        if self.sigma_z < 0.0:
            errs.append(f"sigma_z must be >= 0, got {self.sigma_z}")
        if self.w1 <= 0.0:
            errs.append(f"w1 must be > 0, got {self.w1}")
        if self.referee_freq < 1:
            errs.append(f"referee_freq must be >= 1, got {self.referee_freq}")
        if self.cfg_scale < 0.0:
            errs.append(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.sds_lr is not None and self.sds_lr <= 0.0:
            errs.append(f"sds_lr override must be > 0, got {self.sds_lr}")
        if errs:
            raise ConfigError("; ".join(errs))

    def replace(self, **kw) -> "ScheduleConfig":
        return dataclasses.replace(self, **kw)


def cosine_interp(start: float, end: float, i: int, total: int) -> float:
    """Cosine interpolation from start (i=0) to end (i=total-1).

    Factored so the golden anchors are bit-exact: the 1.0 + cos(pi * frac)
    sum absorbs the ~6e-17 residue of cos at the midpoint, giving exactly
    start, (start+end)/2 and end at frac = 0, 1/2, 1.
    """
    if total <= 1:
        return float(start)
    frac = i / (total - 1)
    w = (1.0 + math.cos(math.pi * frac)) / 2.0
    return end + (start - end) * w


# ---------------------------------------------------------------------------
# run records
# ---------------------------------------------------------------------------

METRICS_HEADER = (
    "iter", "loss_itm", "loss_cg", "loss_tilde",
    "grad_ref_norm", "grad_sds_norm", "lr", "w2", "ema_restart",
)


@dataclass
class RunRow:
    """One engine iteration. Referee fields are None on iterations where the
    referee branch did not fire."""

    iter: int
    loss_itm: float | None
    loss_cg: float | None
    loss_tilde: float | None
    grad_ref_norm: float | None
    grad_sds_norm: float
    lr: float
    w2: float
    ema_restart: bool

    def to_csv_fields(self) -> list[str]:
        def fmt(v):
            if v is None:
                return ""
            return f"{v:.17g}"
        return [
            str(self.iter), fmt(self.loss_itm), fmt(self.loss_cg), fmt(self.loss_tilde),
            fmt(self.grad_ref_norm), fmt(self.grad_sds_norm), fmt(self.lr), fmt(self.w2),
            "1" if self.ema_restart else "0",
        ]

    @classmethod
    def from_csv_fields(cls, fields: list[str]) -> "RunRow":
        def parse(v):
            return None if v == "" else float(v)
        return cls(
            iter=int(fields[0]), loss_itm=parse(fields[1]), loss_cg=parse(fields[2]),
            loss_tilde=parse(fields[3]), grad_ref_norm=parse(fields[4]),
            grad_sds_norm=float(fields[5]), lr=float(fields[6]), w2=float(fields[7]),
            ema_restart=fields[8] == "1",
        )


@dataclass
class RunRecord:
    """Per-iteration trace of one inversion run plus artifact paths."""

    config_hash: str = ""
    sds_space: str = "pixel"
    rows: list[RunRow] = field(default_factory=list)
    snapshot_paths: list[str] = field(default_factory=list)
    final_image_path: str | None = None

    def referee_rows(self) -> list[RunRow]:
        return [r for r in self.rows if r.loss_tilde is not None]

    def restart_iterations(self) -> list[int]:
        return [r.iter for r in self.rows if r.ema_restart]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in self.rows:
            w.writerow(row.to_csv_fields())
        return buf.getvalue()

    @classmethod
    def from_csv_text(cls, text: str) -> "RunRecord":
        rd = csv.reader(io.StringIO(text))
        header = next(rd)
        if tuple(header) != METRICS_HEADER:
            raise ConfigError(f"unexpected metrics header {header}")
        rec = cls()
        rec.rows = [RunRow.from_csv_fields(f) for f in rd if f]
        return rec


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
