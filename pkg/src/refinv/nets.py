"""Small CPU-friendly architectures for the desk-scale referee and prior."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import grammar
from .core import Prompt
from .errors import EvalError
from .referee import RefereeInterface, module_checksum
from .sds import DiffusionPriorInterface, NoiseSchedule

NO_SECOND_OBJECT = 12   # reserved slot-2 id when a prompt has one pair


def pair_id(color_id: int, shape_id: int) -> int:
    return color_id * len(grammar.SHAPES) + shape_id


def pair_from_id(pid: int) -> tuple[int, int]:
    return divmod(pid, len(grammar.SHAPES))


def prompt_cond_ids(y: Prompt) -> tuple[int, int]:
    ids = [pair_id(c, s) for c, s in y.attributes]
    if len(ids) == 1:
        return ids[0], NO_SECOND_OBJECT
    return ids[0], ids[1]


class _ConvEncoder(nn.Module):
    """Three stride-2 conv stages 32 -> 4 followed by a linear projection."""

    def __init__(self, width: int, feat: int):
        super().__init__()
        c = width
        self.c1 = nn.Conv2d(3, c, 4, 2, 1)
        self.g1 = nn.GroupNorm(2, c)
        self.c2 = nn.Conv2d(c, 2 * c, 4, 2, 1)
        self.g2 = nn.GroupNorm(2, 2 * c)
        self.c3 = nn.Conv2d(2 * c, 4 * c, 4, 2, 1)
        self.g3 = nn.GroupNorm(2, 4 * c)
        self.pool = nn.AdaptiveAvgPool2d(4)   # identity at 32x32 input
        self.fc = nn.Linear(4 * c * 16, feat)

    def forward(self, x):
        h = F.gelu(self.g1(self.c1(x)))
        h = F.gelu(self.g2(self.c2(h)))
        h = F.gelu(self.g3(self.c3(h)))
        return self.fc(self.pool(h).flatten(1))


class ToyReferee(nn.Module, RefereeInterface):
    """Conv encoder + ITM head + autoregressive GRU caption head.

    Index 0 of the ITM output is the match class. The caption head is teacher
    forced for loss computation and decoded greedily for evaluation.
    """

    def __init__(self, width: int = 12, feat: int = 96, emb: int = 32, gru: int = 96):
        super().__init__()
        self.arch = {"width": width, "feat": feat, "emb": emb, "gru": gru}
        self.encoder = _ConvEncoder(width, feat)
        self.tok_emb = nn.Embedding(grammar.VOCAB_SIZE, emb)
        self.pos_emb = nn.Embedding(grammar.SEQ_LEN, emb)
        self.img_proj = nn.Linear(feat, emb)
        self.itm_head = nn.Sequential(
            nn.Linear(4 * emb, 2 * emb), nn.GELU(), nn.Linear(2 * emb, 2),
        )
        self.h0_proj = nn.Linear(feat, gru)
        self.cap_proj = nn.Linear(feat, emb)   # image context fed at every step
        self.cell = nn.GRUCell(2 * emb, gru)
        self.out = nn.Linear(gru, grammar.VOCAB_SIZE)
        self._frozen = False

    # -- referee interface

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "ToyReferee":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self._frozen = True
        return self

    def checksum(self) -> str:
        return module_checksum(self)

    def itm_probs(self, images: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.itm_logits(images, tokens), dim=-1)

    def caption_probs(self, images: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.caption_logits(images, tokens), dim=-1)

    # -- logits (used by the trainer; probabilities are the public surface)

    def _token_vecs(self, tokens: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(tokens.shape[1], device=tokens.device)
        return self.tok_emb(tokens) + self.pos_emb(pos).unsqueeze(0)

    def itm_logits_from_feat(self, feat: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        vecs = self._token_vecs(tokens)
        mask = (tokens != grammar.PAD).to(vecs.dtype).unsqueeze(-1)
        txt = (vecs * mask).sum(1) / mask.sum(1).clamp(min=1.0)
        img = self.img_proj(feat)
        joint = torch.cat([img, txt, img * txt, (img - txt).abs()], dim=-1)
        return self.itm_head(joint)

    def caption_logits_from_feat(self, feat: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        vecs = self._token_vecs(tokens)
        img = self.cap_proj(feat)
        h = torch.tanh(self.h0_proj(feat))
        logits = []
        for t in range(tokens.shape[1] - 1):
            h = self.cell(torch.cat([vecs[:, t], img], dim=-1), h)
            logits.append(self.out(h))
        return torch.stack(logits, dim=1)

    def itm_logits(self, images: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        return self.itm_logits_from_feat(self.encoder(images), tokens)

    def caption_logits(self, images: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        return self.caption_logits_from_feat(self.encoder(images), tokens)

    @torch.no_grad()
    def greedy_caption(self, images: torch.Tensor) -> torch.Tensor:
        """Autoregressive greedy decode starting from <bos>; returns (N, S)."""
        n = images.shape[0]
        feat = self.encoder(images)
        img = self.cap_proj(feat)
        h = torch.tanh(self.h0_proj(feat))
        toks = torch.full((n, grammar.SEQ_LEN), grammar.PAD, dtype=torch.long)
        toks[:, 0] = grammar.BOS
        for t in range(grammar.SEQ_LEN - 1):
            vec = self.tok_emb(toks[:, t]) + self.pos_emb(torch.tensor(t))
            h = self.cell(torch.cat([vec, img], dim=-1), h)
            toks[:, t + 1] = self.out(h).argmax(-1)
        return toks


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------

def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.to(torch.float32).unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class _ResBlock(nn.Module):
    def __init__(self, channels: int, emb_dim: int):
        super().__init__()
        self.n1 = nn.GroupNorm(2, channels)
        self.c1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.n2 = nn.GroupNorm(2, channels)
        self.c2 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.emb = nn.Linear(emb_dim, channels)

    def forward(self, x, e):
        h = self.c1(F.silu(self.n1(x)))
        h = h + self.emb(e)[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return x + h


class ToyDenoiser(nn.Module, DiffusionPriorInterface):
    """Two-scale conditional UNet predicting the forward noise.

    Conditioning: one embedding per attribute slot (12 pairs + a reserved
    "no second object" id) summed with the timestep embedding; a learned null
    vector replaces the condition for the unconditional branch.
    """

    def __init__(self, width: int = 16, emb_dim: int = 64,
                 schedule: NoiseSchedule | None = None):
        super().__init__()
        self.arch = {"width": width, "emb_dim": emb_dim}
        self.schedule = schedule or NoiseSchedule.linear()
        c = width
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.slot1_emb = nn.Embedding(12, emb_dim)
        self.slot2_emb = nn.Embedding(13, emb_dim)
        self.null_emb = nn.Parameter(torch.zeros(emb_dim))
        self.inp = nn.Conv2d(3, c, 3, 1, 1)
        self.b1 = _ResBlock(c, emb_dim)
        self.down = nn.Conv2d(c, 2 * c, 4, 2, 1)
        self.b2 = _ResBlock(2 * c, emb_dim)
        self.b3 = _ResBlock(2 * c, emb_dim)
        self.up = nn.ConvTranspose2d(2 * c, c, 4, 2, 1)
        self.b4 = _ResBlock(c, emb_dim)
        self.outp = nn.Conv2d(c, 3, 3, 1, 1)
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "ToyDenoiser":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self._frozen = True
        return self

    def checksum(self) -> str:
        return module_checksum(self)

    def cond_embedding(self, cond_ids: torch.Tensor, null_mask: torch.Tensor) -> torch.Tensor:
        """(B, 2) slot ids + (B,) null mask -> (B, emb_dim)."""
        vec = self.slot1_emb(cond_ids[:, 0]) + self.slot2_emb(cond_ids[:, 1])
        null = self.null_emb.unsqueeze(0).expand_as(vec)
        m = null_mask.to(vec.dtype).unsqueeze(-1)
        return m * null + (1.0 - m) * vec

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond_ids: torch.Tensor,
                null_mask: torch.Tensor) -> torch.Tensor:
        e = self.time_mlp(_timestep_embedding(t, self.emb_dim).to(x.dtype))
        e = e + self.cond_embedding(cond_ids, null_mask).to(x.dtype)
        h1 = self.b1(self.inp(x), e)
        h2 = self.b3(self.b2(self.down(h1), e), e)
        h = self.b4(self.up(h2) + h1, e)
        return self.outp(h)

    def predict_eps(self, x_t: torch.Tensor, t: int, cond: Prompt | None) -> torch.Tensor:
        if not torch.isfinite(x_t).all():
            raise EvalError("non-finite input to the prior")
        n = x_t.shape[0]
        tt = torch.full((n,), int(t), dtype=torch.long)
        if cond is None:
            cond_ids = torch.zeros((n, 2), dtype=torch.long)
            null_mask = torch.ones(n)
        else:
            i1, i2 = prompt_cond_ids(cond)
            cond_ids = torch.tensor([[i1, i2]], dtype=torch.long).expand(n, 2)
            null_mask = torch.zeros(n)
        return self.forward(x_t, tt, cond_ids, null_mask)
