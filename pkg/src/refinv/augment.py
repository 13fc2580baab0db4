"""Semantic-invariant augmentations and the Monte-Carlo regularized loss.

All transforms are differentiable w.r.t. the image: geometric warps use a
single bilinear resampling pass of the composed homography, and the pixel
noise / erasing fill are drawn once at sample time from a per-transform seed
so a transform can be re-applied bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch

from .errors import ConfigError, EvalError

_EYE3 = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


# ---------------------------------------------------------------------------
# spec
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationSpec:
    """Parameter ranges of the augmentation family and the replica count K.

    Horizontal flip and resized crop are representable but rejected by
    default: they alter multi-object semantics (left/right order, object
    visibility) and empirically raise the referee loss.
    """

    degrees: float = 15.0                 # affine rotation, +/- degrees
    translate: float = 0.10               # affine translation, fraction of size
    scale_range: tuple[float, float] = (0.9, 1.1)
    perspective_distortion: float = 0.2
    perspective_prob: float = 0.5
    jitter: float = 0.2                   # brightness/contrast/saturation delta
    erase_area: tuple[float, float] = (0.04, 0.25)
    erase_prob: float = 0.5
    noise_std: float = 0.08
    hflip_prob: float = 0.0               # rejected by default
    crop_scale: tuple[float, float] | None = None   # rejected by default
    k: int = 30
    seed: int = 0

    def validate(self) -> None:
        errs = []
        if self.k < 0:
            errs.append(f"k must be >= 0, got {self.k}")
        for name in ("perspective_prob", "erase_prob", "hflip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                errs.append(f"{name} must be in [0, 1], got {v}")
        if self.degrees < 0 or self.translate < 0 or self.jitter < 0 or self.noise_std < 0:
            errs.append("degrees/translate/jitter/noise_std must be >= 0")
        if not (0 < self.scale_range[0] <= self.scale_range[1]):
            errs.append(f"bad scale_range {self.scale_range}")
        if not (0 <= self.erase_area[0] <= self.erase_area[1] <= 1):
            errs.append(f"bad erase_area {self.erase_area}")
        if self.crop_scale is not None and not (0 < self.crop_scale[0] <= self.crop_scale[1] <= 1):
            errs.append(f"bad crop_scale {self.crop_scale}")
        if errs:
            raise ConfigError("; ".join(errs))

    @property
    def uses_rejected_transforms(self) -> bool:
        return self.hflip_prob > 0.0 or self.crop_scale is not None

    def all_disabled(self) -> "AugmentationSpec":
        """Copy with every transform turned off (identity family)."""
        return replace(
            self, degrees=0.0, translate=0.0, scale_range=(1.0, 1.0),
            perspective_prob=0.0, jitter=0.0, erase_prob=0.0, noise_std=0.0,
            hflip_prob=0.0, crop_scale=None,
        )


IDENTITY_SPEC = AugmentationSpec().all_disabled()


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Transform:
    """A fully parameterized augmentation draw; re-applicable bit-identically.

    ``matrix`` is the composed 3x3 inverse warp in normalized [-1, 1]
    coordinates (output grid -> input sampling location), or None when the
    geometric part is the identity. ``pixel_seed`` regenerates the erasing
    fill and the additive noise field.
    """

    matrix: tuple[tuple[float, float, float], ...] | None = None
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    erase_box: tuple[int, int, int, int] | None = None   # (top, left, h, w)
    noise_std: float = 0.0
    pixel_seed: int = 0

    @property
    def is_identity(self) -> bool:
        return (
            self.matrix is None and self.brightness == 1.0 and self.contrast == 1.0
            and self.saturation == 1.0 and self.erase_box is None and self.noise_std == 0.0
        )

    def describe(self) -> str:
        if self.is_identity:
            return "identity"
        parts = []
        if self.matrix is not None:
            parts.append("warp")
        if (self.brightness, self.contrast, self.saturation) != (1.0, 1.0, 1.0):
            parts.append(f"jitter(b={self.brightness:.3f},c={self.contrast:.3f},s={self.saturation:.3f})")
        if self.erase_box is not None:
            parts.append(f"erase{self.erase_box}")
        if self.noise_std > 0:
            parts.append(f"noise({self.noise_std:.3f})")
        return "+".join(parts)


def _uniform(rng: torch.Generator, lo: float, hi: float) -> float:
    if lo == hi:
        return lo
    return lo + (hi - lo) * torch.rand((), generator=rng).item()


def _rotation_scale_matrix(angle_deg: float, scale: float, tx: float, ty: float):
    a = math.radians(angle_deg)
    c, s = math.cos(a) * scale, math.sin(a) * scale
    # inverse warp: rotate by -a, scale by 1/s, then shift
    det = scale * scale
    return (
        (c / det, s / det, tx),
        (-s / det, c / det, ty),
        (0.0, 0.0, 1.0),
    )


def _perspective_matrix(rng: torch.Generator, distortion: float):
    """Random 4-corner homography in normalized coordinates.

    Each corner of the unit square [-1,1]^2 is pulled inward by up to
    ``distortion`` of the half-extent; the matrix maps output coordinates to
    the perturbed quadrilateral (inverse warp), solved from 4 correspondences.
    """
    src = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
    dst = []
    for (x, y) in src:
        dx = _uniform(rng, 0.0, distortion) * (1.0 if x < 0 else -1.0)
        dy = _uniform(rng, 0.0, distortion) * (1.0 if y < 0 else -1.0)
        dst.append((x + dx, y + dy))
    # solve h (8 dof) with sum_i |H [x_i,y_i,1] - w_i [u_i,v_i,1]| = 0
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rhs.append(u)
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.append(v)
    A = torch.tensor(rows, dtype=torch.float64)
    b = torch.tensor(rhs, dtype=torch.float64)
    h = torch.linalg.solve(A, b).tolist()
    return (
        (h[0], h[1], h[2]),
        (h[3], h[4], h[5]),
        (h[6], h[7], 1.0),
    )


def _matmul3(a, b):
    return tuple(
        tuple(sum(a[i][k] * b[k][j] for k in range(3)) for j in range(3))
        for i in range(3)
    )


def sample_transform(spec: AugmentationSpec, rng: torch.Generator) -> Transform:
    """Draw one fully parameterized transform from the family distribution."""
    spec.validate()
    m = None

    if spec.crop_scale is not None:
        # resized crop as a pure zoom-in warp (rejected transform)
        area = _uniform(rng, spec.crop_scale[0], spec.crop_scale[1])
        side = math.sqrt(area)
        cx = _uniform(rng, -(1 - side), (1 - side))
        cy = _uniform(rng, -(1 - side), (1 - side))
        m = ((side, 0.0, cx), (0.0, side, cy), (0.0, 0.0, 1.0))

    if spec.degrees > 0 or spec.translate > 0 or spec.scale_range != (1.0, 1.0):
        angle = _uniform(rng, -spec.degrees, spec.degrees)
        tx = _uniform(rng, -spec.translate, spec.translate) * 2.0
        ty = _uniform(rng, -spec.translate, spec.translate) * 2.0
        scale = _uniform(rng, spec.scale_range[0], spec.scale_range[1])
        aff = _rotation_scale_matrix(angle, scale, tx, ty)
        m = aff if m is None else _matmul3(m, aff)

    if spec.perspective_prob > 0 and torch.rand((), generator=rng).item() < spec.perspective_prob:
        persp = _perspective_matrix(rng, spec.perspective_distortion)
        m = persp if m is None else _matmul3(m, persp)

    if spec.hflip_prob > 0 and torch.rand((), generator=rng).item() < spec.hflip_prob:
        flip = ((-1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
        m = flip if m is None else _matmul3(m, flip)

    b = c = s = 1.0
    if spec.jitter > 0:
        b = _uniform(rng, 1 - spec.jitter, 1 + spec.jitter)
        c = _uniform(rng, 1 - spec.jitter, 1 + spec.jitter)
        s = _uniform(rng, 1 - spec.jitter, 1 + spec.jitter)

    erase_box = None
    if spec.erase_prob > 0 and torch.rand((), generator=rng).item() < spec.erase_prob:
        # Image size is unknown at sample time; store the box in fractional
        # units and round on application via a 64x64 virtual canvas.
        area = _uniform(rng, spec.erase_area[0], spec.erase_area[1])
        log_ratio = _uniform(rng, math.log(0.5), math.log(2.0))
        ratio = math.exp(log_ratio)
        eh = min(0.999, math.sqrt(area * ratio))
        ew = min(0.999, math.sqrt(area / ratio))
        top = _uniform(rng, 0.0, 1.0 - eh)
        left = _uniform(rng, 0.0, 1.0 - ew)
        erase_box = (
            int(round(top * 1000)), int(round(left * 1000)),
            max(1, int(round(eh * 1000))), max(1, int(round(ew * 1000))),
        )

    noise_std = spec.noise_std
    pixel_seed = int(torch.randint(0, 2**62, (), generator=rng).item())
    return Transform(
        matrix=m, brightness=b, contrast=c, saturation=s,
        erase_box=erase_box, noise_std=noise_std, pixel_seed=pixel_seed,
    )


def _grid_from_matrix(matrix, n: int, h: int, w: int, dtype, device) -> torch.Tensor:
    m = torch.tensor(matrix, dtype=dtype, device=device)
    ys = torch.linspace(-1.0 + 1.0 / h, 1.0 - 1.0 / h, h, dtype=dtype, device=device)
    xs = torch.linspace(-1.0 + 1.0 / w, 1.0 - 1.0 / w, w, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    ones = torch.ones_like(gx)
    coords = torch.stack([gx, gy, ones], dim=-1)          # (H, W, 3)
    warped = coords @ m.T                                  # (H, W, 3)
    grid = warped[..., :2] / warped[..., 2:].clamp(min=1e-8)
    return grid.unsqueeze(0).expand(n, h, w, 2)


_GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def apply_transform(t: Transform, x: torch.Tensor) -> torch.Tensor:
    """Apply one transform to an image batch (N, 3, H, W); differentiable in x."""
    n, _, h, w = x.shape
    out = x

    if t.matrix is not None:
        grid = _grid_from_matrix(t.matrix, n, h, w, x.dtype, x.device)
        out = torch.nn.functional.grid_sample(
            out, grid, mode="bilinear", padding_mode="zeros", align_corners=False,
        )

    if (t.brightness, t.contrast, t.saturation) != (1.0, 1.0, 1.0):
        u = (out + 1.0) / 2.0
        u = u * t.brightness
        mean = u.mean(dim=(1, 2, 3), keepdim=True)
        u = mean + (u - mean) * t.contrast
        gw = torch.tensor(_GRAY_WEIGHTS, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        gray = (u * gw).sum(dim=1, keepdim=True)
        u = gray + (u - gray) * t.saturation
        out = u * 2.0 - 1.0

    needs_pixels = t.erase_box is not None or t.noise_std > 0
    if needs_pixels:
        prng = torch.Generator().manual_seed(t.pixel_seed)
        if t.erase_box is not None:
            top = int(t.erase_box[0] * h / 1000)
            left = int(t.erase_box[1] * w / 1000)
            eh = max(1, int(t.erase_box[2] * h / 1000))
            ew = max(1, int(t.erase_box[3] * w / 1000))
            eh, ew = min(eh, h - top), min(ew, w - left)
            fill = (torch.rand((n, 3, eh, ew), generator=prng) * 2.0 - 1.0).to(x.dtype)
            mask = torch.zeros((n, 1, h, w), dtype=x.dtype, device=x.device)
            mask[:, :, top:top + eh, left:left + ew] = 1.0
            full = torch.zeros_like(out)
            full[:, :, top:top + eh, left:left + ew] = fill
            out = out * (1.0 - mask) + full * mask
        if t.noise_std > 0:
            noise = (torch.randn(out.shape, generator=prng) * t.noise_std).to(x.dtype)
            out = out + noise

    if t.is_identity:
        return out
    return out.clamp(-1.0, 1.0)


def sample_transforms(spec: AugmentationSpec, rng: torch.Generator, k: int) -> list[Transform]:
    return [sample_transform(spec, rng) for _ in range(k)]


def apply_transform_stack(transforms: list[Transform], x: torch.Tensor) -> torch.Tensor:
    """Apply K transforms to one image (1, 3, H, W), returning (K, 3, H, W).

    Equivalent to stacking apply_transform over the list; kept as a single
    entry point so the fan-out order (and hence the reduction order) is fixed.
    """
    reps = [apply_transform(t, x) for t in transforms]
    return torch.cat(reps, dim=0)


# ---------------------------------------------------------------------------
# regularized loss (Monte-Carlo estimator)
# ---------------------------------------------------------------------------

@dataclass
class AugLossEstimate:
    """K-sample estimate of the augmentation-regularized loss."""

    mean: float
    per_sample: list[tuple[str, float]]   # (transform descriptor, loss), ascending
    std_error: float


def regularized_loss(loss_fn, x: torch.Tensor, y, spec: AugmentationSpec,
                     rng: torch.Generator) -> AugLossEstimate:
    """Estimate E_A[loss_fn(A(x), y)] with K i.i.d. transform draws.

    K = 0 evaluates the raw loss and returns it with empty per_sample.
    """
    spec.validate()
    if spec.k == 0:
        raw = float(loss_fn(x, y))
        return AugLossEstimate(mean=raw, per_sample=[], std_error=0.0)
    transforms = sample_transforms(spec, rng, spec.k)
    vals = []
    for t in transforms:
        v = float(loss_fn(apply_transform(t, x), y))
        if not math.isfinite(v):
            raise EvalError(f"non-finite loss under transform {t.describe()}")
        vals.append(v)
    mean = sum(vals) / len(vals)
    if len(vals) >= 2:
        var = sum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
        std_error = math.sqrt(var / len(vals))
    else:
        std_error = 0.0
    per = sorted(((t.describe(), v) for t, v in zip(transforms, vals)), key=lambda p: p[1])
    return AugLossEstimate(mean=mean, per_sample=per, std_error=std_error)


# ---------------------------------------------------------------------------
# masking-bound diagnostic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskTransform:
    """Occlusion on a fixed pixel set: zeroes masked pixels. Composition is
    mask union, so the family is closed and absorption is decidable exactly."""

    mask: tuple[tuple[int, int], ...]     # (row, col) pixels set to zero

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        out = x.clone()
        for (r, c) in self.mask:
            out[..., r, c] = 0.0
        return out

    def compose(self, other: "MaskTransform") -> "MaskTransform":
        return MaskTransform(mask=tuple(sorted(set(self.mask) | set(other.mask))))

    def absorbs(self, other: "MaskTransform") -> bool:
        """True iff self ∘ other == self, i.e. self's mask contains other's."""
        return set(other.mask) <= set(self.mask)


@dataclass
class BoundReport:
    lhs: float                 # smoothed loss of the masked image
    rhs: float                 # c + P(A not in S) * conditional expectation term
    c: float                   # smoothed loss of the original image
    p_not_absorbed: float
    decomposition_gap: float   # |lhs - rhs|, exact identity up to float error
    holds: bool


def masking_bound_check(loss_fn, x: torch.Tensor, y, family: list[MaskTransform],
                        probs: list[float], a_prime: MaskTransform) -> BoundReport:
    """Exhaustively verify the occlusion-robustness bound on a finite family.

    Computes the smoothed loss of x and of a_prime(x), the probability that a
    family member does not absorb a_prime, and the exact correction term; the
    inequality lhs <= c + correction is identity-derived and is checked to
    1e-9 together with the decomposition equality.
    """
    if len(family) != len(probs):
        raise ConfigError("family and probs must have equal length")
    total_p = sum(probs)
    if abs(total_p - 1.0) > 1e-9:
        raise ConfigError(f"family probabilities must sum to 1, got {total_p}")

    xp = a_prime.apply(x)
    c = sum(p * float(loss_fn(a.apply(x), y)) for a, p in zip(family, probs))
    lhs = sum(p * float(loss_fn(a.apply(xp), y)) for a, p in zip(family, probs))

    p_not = 0.0
    corr = 0.0
    for a, p in zip(family, probs):
        if not a.absorbs(a_prime):
            p_not += p
            la_comp = float(loss_fn(a.compose(a_prime).apply(x), y))
            la = float(loss_fn(a.apply(x), y))
            corr += p * (la_comp - la)
    rhs = c + corr
    gap = abs(lhs - rhs)
    return BoundReport(
        lhs=lhs, rhs=rhs, c=c, p_not_absorbed=p_not,
        decomposition_gap=gap, holds=lhs <= rhs + 1e-9 and gap <= 1e-9,
    )
