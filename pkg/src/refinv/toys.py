"""Self-contained desk-scale stack: colored-shapes dataset, trained referee,
trained diffusion prior, and their versioned checkpoints."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import grammar
from .core import Prompt
from .errors import ConfigError, DatasetError, TrainingError
from .nets import NO_SECOND_OBJECT, ToyDenoiser, ToyReferee, pair_id
from .referee import MATCH, NO_MATCH, smoothed_targets
from .sds import NoiseSchedule

# anchors in [-1, 1] pixel space, chosen far from the gray backgrounds
COLOR_ANCHORS = {
    0: (0.90, -0.90, -0.90),   # red
    1: (-0.90, 0.75, -0.90),   # green
    2: (-0.85, -0.85, 0.90),   # blue
    3: (0.90, 0.85, -0.90),    # yellow
}
_N_PAIRS = len(grammar.COLORS) * len(grammar.SHAPES)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapesDatasetSpec:
    image_size: int = 32
    n_samples: int = 12000
    two_object_prob: float = 0.75
    min_half: int = 5
    max_half: int = 9
    max_overlap: float = 0.10     # fraction of either bounding box
    min_x_separation: int = 6     # keeps the left-to-right caption order unambiguous
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 16 or self.n_samples < 1:
            raise ConfigError(f"bad dataset spec {self}")
        if not 0.0 <= self.two_object_prob <= 1.0:
            raise ConfigError(f"two_object_prob must be in [0,1], got {self.two_object_prob}")
        if not 2 <= self.min_half <= self.max_half < self.image_size // 2 - 1:
            raise ConfigError(f"bad object size range [{self.min_half}, {self.max_half}]")
        if not 0 <= self.min_x_separation < self.image_size // 2:
            raise ConfigError(f"bad min_x_separation {self.min_x_separation}")


@dataclass(frozen=True)
class ObjectPlacement:
    color_id: int
    shape_id: int
    cx: int
    cy: int
    half: int
    color: tuple[float, float, float]


@dataclass
class LabeledImage:
    pixels: torch.Tensor                       # (3, S, S) in [-1, 1]
    attributes: tuple[grammar.Attribute, ...]
    tokens: tuple[int, ...]


def object_mask(size: int, shape_id: int, cx: int, cy: int, half: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    dx, dy = xs - cx, ys - cy
    if shape_id == 0:      # square
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if shape_id == 1:      # circle
        return dx * dx + dy * dy <= half * half
    if shape_id == 2:      # triangle, apex up
        return (np.abs(dy) <= half) & (np.abs(dx) <= (dy + half) / 2.0)
    raise ConfigError(f"unknown shape id {shape_id}")


class _PairDeck:
    """Balanced sampling of the 12 (color, shape) pairs: repeated shuffled
    decks keep per-slot counts within one of uniform."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.deck: list[int] = []

    def draw(self) -> int:
        if not self.deck:
            self.deck = list(self.rng.permutation(_N_PAIRS))
        return int(self.deck.pop())


@dataclass
class ShapesDataset:
    spec: ShapesDatasetSpec
    seed: int
    images: torch.Tensor                       # (N, 3, S, S)
    attributes: list[tuple[grammar.Attribute, ...]]
    tokens: torch.Tensor                       # (N, SEQ_LEN) long
    placements: list[list[ObjectPlacement]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(
            pixels=self.images[i], attributes=self.attributes[i],
            tokens=tuple(int(t) for t in self.tokens[i]),
        )

    def prompt(self, i: int) -> Prompt:
        return Prompt.from_attributes(self.attributes[i])


def _place_objects(rng: np.random.Generator, spec: ShapesDatasetSpec, shapes: list[int],
                   ) -> list[tuple[int, int, int]]:
    """Draw (cx, cy, half) per object; bounding boxes may overlap up to the
    allowed fraction but the rendered pixel masks must stay disjoint (so every
    object keeps its anchor color). Raises after bounded retries."""
    size = spec.image_size
    for _ in range(50):
        placed: list[tuple[int, int, int]] = []
        masks: list[np.ndarray] = []
        ok = True
        for shape_id in shapes:
            for _try in range(200):
                half = int(rng.integers(spec.min_half, spec.max_half + 1))
                lo, hi = half + 1, size - half - 2
                cx = int(rng.integers(lo, hi + 1))
                cy = int(rng.integers(lo, hi + 1))
                if not all(_bbox_overlap_ok((cx, cy, half), p, spec.max_overlap) for p in placed):
                    continue
                if any(abs(cx - px) < spec.min_x_separation for (px, _py, _ph) in placed):
                    continue
                mask = object_mask(size, shape_id, cx, cy, half)
                if any((mask & m).any() for m in masks):
                    continue
                placed.append((cx, cy, half))
                masks.append(mask)
                break
            else:
                ok = False
                break
        if ok:
            return placed
    raise DatasetError(f"could not place {len(shapes)} objects within retry budget")


def _bbox_overlap_ok(a, b, max_frac: float) -> bool:
    (ax, ay, ah), (bx, by, bh) = a, b
    ix = max(0, min(ax + ah, bx + bh) - max(ax - ah, bx - bh) + 1)
    iy = max(0, min(ay + ah, by + bh) - max(ay - ah, by - bh) + 1)
    inter = ix * iy
    area_a = (2 * ah + 1) ** 2
    area_b = (2 * bh + 1) ** 2
    return inter <= max_frac * area_a and inter <= max_frac * area_b


def make_shapes_dataset(spec: ShapesDatasetSpec, seed: int | None = None) -> ShapesDataset:
    """Render the dataset deterministically under the seed; attribute pairs are
    drawn from balanced decks and objects are captioned in left-to-right order."""
    spec.validate()
    seed = spec.seed if seed is None else int(seed)
    rng = np.random.default_rng(seed)
    deck1, deck2 = _PairDeck(rng), _PairDeck(rng)
    size = spec.image_size

    images = np.empty((spec.n_samples, 3, size, size), dtype=np.float32)
    attributes: list[tuple[grammar.Attribute, ...]] = []
    placements: list[list[ObjectPlacement]] = []
    tokens = np.zeros((spec.n_samples, grammar.SEQ_LEN), dtype=np.int64)

    for i in range(spec.n_samples):
        two = rng.random() < spec.two_object_prob
        pids = [deck1.draw()]
        if two:
            p2 = deck2.draw()
            if p2 == pids[0]:
                p2 = (p2 + 1 + int(rng.integers(0, _N_PAIRS - 1))) % _N_PAIRS
            pids.append(p2)

        gray = rng.uniform(-0.95, -0.55)
        tint = rng.uniform(-0.05, 0.05, size=3)
        img = np.empty((3, size, size), dtype=np.float32)
        for ch in range(3):
            img[ch] = gray + tint[ch]

        shapes = [divmod(p, len(grammar.SHAPES))[1] for p in pids]
        spots = _place_objects(rng, spec, shapes)
        # caption order follows reading order (left to right by center x)
        order = sorted(range(len(spots)), key=lambda k: (spots[k][0], spots[k][1]))
        objs: list[ObjectPlacement] = []
        for k in order:
            cid, sid = divmod(pids[k], len(grammar.SHAPES))
            cx, cy, half = spots[k]
            jitter = rng.uniform(-0.05, 0.05, size=3)
            color = tuple(float(np.clip(COLOR_ANCHORS[cid][c] + jitter[c], -1, 1)) for c in range(3))
            mask = object_mask(size, sid, cx, cy, half)
            for ch in range(3):
                img[ch][mask] = color[ch]
            objs.append(ObjectPlacement(cid, sid, cx, cy, half, color))

        attrs = tuple((o.color_id, o.shape_id) for o in objs)
        images[i] = img
        attributes.append(attrs)
        placements.append(objs)
        tokens[i] = grammar.caption_tokens(attrs)

    return ShapesDataset(
        spec=spec, seed=seed,
        images=torch.from_numpy(images), attributes=attributes,
        tokens=torch.from_numpy(tokens), placements=placements,
    )


def save_dataset(ds: ShapesDataset, out_dir: str | Path) -> None:
    """Directory of PNGs plus a manifest table (path, attributes, tokens)."""
    from .images import save_image
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "attributes", "tokens", "placements"])
        for i in range(len(ds)):
            name = f"images/{i:05d}.png"
            save_image(ds.images[i], out / name)
            w.writerow([
                name,
                json.dumps([list(a) for a in ds.attributes[i]]),
                json.dumps([int(t) for t in ds.tokens[i]]),
                json.dumps([asdict(p) for p in ds.placements[i]]) if ds.placements else "[]",
            ])
    meta = {"spec": asdict(ds.spec), "seed": ds.seed, "n": len(ds)}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2))


def load_dataset(in_dir: str | Path) -> ShapesDataset:
    from .images import load_image
    src = Path(in_dir)
    meta = json.loads((src / "dataset.json").read_text())
    spec = ShapesDatasetSpec(**meta["spec"])
    images, attributes, placements = [], [], []
    tokens = []
    with open(src / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            images.append(load_image(src / row["file"]))
            attributes.append(tuple(tuple(a) for a in json.loads(row["attributes"])))
            tokens.append(json.loads(row["tokens"]))
            placements.append([ObjectPlacement(**{**p, "color": tuple(p["color"])})
                               for p in json.loads(row["placements"])])
    return ShapesDataset(
        spec=spec, seed=meta["seed"], images=torch.stack(images),
        attributes=attributes, tokens=torch.tensor(tokens, dtype=torch.long),
        placements=placements,
    )


# ---------------------------------------------------------------------------
# referee training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RefereeTrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 2e-3
    lr_decay_epoch: int = 6      # lr is halved from this epoch on
    width: int = 16
    feat: int = 128
    emb: int = 32
    gru: int = 128
    holdout_frac: float = 0.1
    min_dataset: int = 5000
    itm_floor: float = 0.95
    caption_floor: float = 0.95


def _caption_ce(logits: torch.Tensor, targets: torch.Tensor, alpha: float = 0.1) -> torch.Tensor:
    """Label-smoothed cross-entropy on logits, PAD positions masked."""
    logp = F.log_softmax(logits, dim=-1)
    q = smoothed_targets(targets, logits.shape[-1], alpha).to(logits.dtype)
    h = -(q * logp).sum(-1)
    mask = (targets != grammar.PAD).to(logits.dtype)
    return (h * mask).sum() / mask.sum().clamp(min=1.0)


def train_toy_referee(dataset: ShapesDataset, config: RefereeTrainConfig | None = None,
                      seed: int = 0) -> ToyReferee:
    """Train the two-head referee on matched/shuffled pairs and freeze it.

    Negatives are within-batch caption shuffles (label no-match); caption
    generation is teacher-forced with label smoothing 0.1. Raises
    TrainingError if the held-out accuracy floors are missed.
    """
    config = config or RefereeTrainConfig()
    if len(dataset) < config.min_dataset:
        raise ConfigError(f"referee training needs >= {config.min_dataset} samples, got {len(dataset)}")
    torch.manual_seed(seed)
    model = ToyReferee(config.width, config.feat, config.emb, config.gru)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(seed)

    n = len(dataset)
    perm = torch.randperm(n, generator=gen)
    n_hold = max(1, int(n * config.holdout_frac))
    train_idx, hold_idx = perm[:-n_hold], perm[-n_hold:]

    for epoch in range(config.epochs):
        if epoch == config.lr_decay_epoch:
            for group in opt.param_groups:
                group["lr"] = config.lr * 0.5
        order = train_idx[torch.randperm(len(train_idx), generator=gen)]
        for b in range(0, len(order) - config.batch_size + 1, config.batch_size):
            idx = order[b:b + config.batch_size]
            images, tokens = dataset.images[idx], dataset.tokens[idx]
            neg_tokens = tokens.roll(1, dims=0)
            valid_neg = (neg_tokens != tokens).any(-1)

            feat = model.encoder(images)
            pos_logits = model.itm_logits_from_feat(feat, tokens)
            neg_logits = model.itm_logits_from_feat(feat, neg_tokens)
            itm = F.cross_entropy(pos_logits, torch.full((len(idx),), MATCH))
            if bool(valid_neg.any()):
                itm = itm + F.cross_entropy(
                    neg_logits[valid_neg],
                    torch.full((int(valid_neg.sum()),), NO_MATCH),
                )
            cap_logits = model.caption_logits_from_feat(feat, tokens)
            cg = _caption_ce(cap_logits, tokens[:, 1:])
            loss = itm + cg
            opt.zero_grad()
            loss.backward()
            opt.step()

    report = evaluate_referee(model, dataset, hold_idx)
    if report["itm_accuracy"] < config.itm_floor or report["caption_accuracy"] < config.caption_floor:
        raise TrainingError(f"referee missed accuracy floors: {report}")
    model.train_report = report
    return model.freeze()


@torch.no_grad()
def evaluate_referee(model: ToyReferee, dataset: ShapesDataset, idx: torch.Tensor,
                     batch: int = 256) -> dict:
    """Held-out ITM accuracy (matched + shuffled pairs) and teacher-forced
    next-token accuracy on the attribute positions."""
    itm_hits = itm_total = 0
    cap_hits = cap_total = 0
    for b in range(0, len(idx), batch):
        sl = idx[b:b + batch]
        images, tokens = dataset.images[sl], dataset.tokens[sl]
        feat = model.encoder(images)
        pos_pred = model.itm_logits_from_feat(feat, tokens).argmax(-1)
        itm_hits += int((pos_pred == MATCH).sum())
        itm_total += len(sl)
        neg_tokens = tokens.roll(1, dims=0)
        valid = (neg_tokens != tokens).any(-1)
        if bool(valid.any()):
            neg_pred = model.itm_logits_from_feat(feat, neg_tokens).argmax(-1)
            itm_hits += int((neg_pred[valid] == NO_MATCH).sum())
            itm_total += int(valid.sum())
        cap_pred = model.caption_logits_from_feat(feat, tokens).argmax(-1)
        targets = tokens[:, 1:]
        attr_pos = targets >= 5    # color and shape tokens
        cap_hits += int((cap_pred[attr_pos] == targets[attr_pos]).sum())
        cap_total += int(attr_pos.sum())
    return {
        "itm_accuracy": itm_hits / max(1, itm_total),
        "caption_accuracy": cap_hits / max(1, cap_total),
        "holdout": len(idx),
    }


# ---------------------------------------------------------------------------
# denoiser training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserTrainConfig:
    steps: int = 1200
    batch_size: int = 64
    lr: float = 2e-3
    cond_dropout: float = 0.1
    width: int = 16
    emb_dim: int = 64
    t_steps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    min_dataset: int = 5000
    loss_ratio_floor: float = 0.3


def _cond_ids_tensor(dataset: ShapesDataset) -> torch.Tensor:
    ids = torch.full((len(dataset), 2), NO_SECOND_OBJECT, dtype=torch.long)
    for i, attrs in enumerate(dataset.attributes):
        ids[i, 0] = pair_id(*attrs[0])
        if len(attrs) > 1:
            ids[i, 1] = pair_id(*attrs[1])
    return ids


def train_toy_denoiser(dataset: ShapesDataset, config: DenoiserTrainConfig | None = None,
                       seed: int = 0) -> ToyDenoiser:
    """Train the conditional noise-prediction net (null-token dropout enables
    CFG) and freeze it. Raises TrainingError if the loss fails to reach
    loss_ratio_floor of its initial value."""
    config = config or DenoiserTrainConfig()
    if len(dataset) < config.min_dataset:
        raise ConfigError(f"denoiser training needs >= {config.min_dataset} samples, got {len(dataset)}")
    torch.manual_seed(seed)
    schedule = NoiseSchedule.linear(config.t_steps, config.beta_start, config.beta_end)
    model = ToyDenoiser(config.width, config.emb_dim, schedule)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(seed)

    cond_ids = _cond_ids_tensor(dataset)
    ab = schedule.alpha_bars().to(torch.float32)
    losses: list[float] = []
    for _step in range(config.steps):
        idx = torch.randint(0, len(dataset), (config.batch_size,), generator=gen)
        x0 = dataset.images[idx]
        t = torch.randint(1, schedule.steps + 1, (config.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        a = ab[t].view(-1, 1, 1, 1)
        x_t = a.sqrt() * x0 + (1 - a).sqrt() * eps
        null_mask = (torch.rand(config.batch_size, generator=gen) < config.cond_dropout)
        pred = model(x_t, t, cond_ids[idx], null_mask)
        loss = F.mse_loss(pred, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))

    head = sum(losses[:20]) / min(20, len(losses))
    tail = sum(losses[-20:]) / min(20, len(losses))
    report = {"initial_loss": head, "final_loss": tail, "steps": config.steps}
    if tail >= config.loss_ratio_floor * head:
        raise TrainingError(f"denoiser training did not converge: {report}")
    model.train_report = report
    return model.freeze()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_FORMAT_VERSION = 1


def save_referee(model: ToyReferee, path: str | Path, seed: int | None = None) -> str:
    payload = {
        "format_version": _FORMAT_VERSION,
        "kind": "toy_referee",
        "arch": model.arch,
        "state_dict": model.state_dict(),
        "checksum": model.checksum(),
        "seed": seed,
        "train_report": getattr(model, "train_report", None),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return payload["checksum"]


def load_referee(path: str | Path) -> ToyReferee:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != _FORMAT_VERSION or payload.get("kind") != "toy_referee":
        raise ConfigError(f"unsupported referee checkpoint {path}")
    model = ToyReferee(**payload["arch"])
    model.load_state_dict(payload["state_dict"])
    model.freeze()
    if model.checksum() != payload["checksum"]:
        raise ConfigError(f"referee checkpoint corrupted: checksum mismatch in {path}")
    model.train_report = payload.get("train_report")
    return model


def save_denoiser(model: ToyDenoiser, path: str | Path, seed: int | None = None) -> str:
    payload = {
        "format_version": _FORMAT_VERSION,
        "kind": "toy_denoiser",
        "arch": {**model.arch, "betas": list(model.schedule.betas)},
        "state_dict": model.state_dict(),
        "checksum": model.checksum(),
        "seed": seed,
        "train_report": getattr(model, "train_report", None),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return payload["checksum"]


def load_denoiser(path: str | Path) -> ToyDenoiser:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != _FORMAT_VERSION or payload.get("kind") != "toy_denoiser":
        raise ConfigError(f"unsupported denoiser checkpoint {path}")
    arch = dict(payload["arch"])
    betas = arch.pop("betas")
    model = ToyDenoiser(schedule=NoiseSchedule(betas=tuple(betas)), **arch)
    model.load_state_dict(payload["state_dict"])
    model.freeze()
    if model.checksum() != payload["checksum"]:
        raise ConfigError(f"denoiser checkpoint corrupted: checksum mismatch in {path}")
    model.train_report = payload.get("train_report")
    return model
