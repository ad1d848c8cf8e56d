"""Training objectives for the synthesis network.

Adversarial terms work on raw discriminator logits through a fused
log-sigmoid and average over the patch map. The generator side defaults to
the non-saturating form ``-log D(G(x))``; ``gan_mode="saturating"`` gives the
literal ``log(1 - D(G(x)))`` objective and ``gan_mode="lsgan"`` the
least-squares variant.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

GAN_MODES = ("nonsaturating", "saturating", "lsgan")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 10.0
    lambda4: float = 10.0
    lambda5: float = 1.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not v >= 0:
                raise LossError(f"loss.{name} must be >= 0, got {v}")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)


TERMS = ("adv_A2B", "adv_B2A", "cycle_A", "cycle_B", "seg")


@dataclass
class LossBreakdown:
    adv_A2B: float
    adv_B2A: float
    cycle_A: float
    cycle_B: float
    seg: float
    total: float
    d1_loss: float = float("nan")
    d2_loss: float = float("nan")

    def csv_row(self, step: int) -> list:
        return [step, self.d1_loss, self.d2_loss, self.adv_A2B, self.adv_B2A,
                self.cycle_A, self.cycle_B, self.seg, self.total]


CSV_HEADER = ["step", "d1", "d2", "adv_A2B", "adv_B2A", "cyc_A", "cyc_B", "seg", "total"]


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise LossError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor, gan_mode: str = "nonsaturating") -> torch.Tensor:
    """BCE with target 1 on real and 0 on fake logits, each averaged over its map, summed."""
    _same_shape(d_real, d_fake, "discriminator_loss")
    if gan_mode == "lsgan":
        return ((d_real - 1) ** 2).mean() + (d_fake**2).mean()
    # -log sigmoid(r) = softplus(-r);  -log(1 - sigmoid(f)) = softplus(f)
    return F.softplus(-d_real).mean() + F.softplus(d_fake).mean()


def generator_adversarial_loss(d_fake: torch.Tensor, gan_mode: str = "nonsaturating") -> torch.Tensor:
    if gan_mode == "nonsaturating":
        return F.softplus(-d_fake).mean()
    if gan_mode == "saturating":
        # minimizing E[log(1 - D(G(x)))]
        return -F.softplus(d_fake).mean()
    if gan_mode == "lsgan":
        return ((d_fake - 1) ** 2).mean()
    raise LossError(f"unknown gan_mode {gan_mode!r}")


def cycle_loss(real: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    _same_shape(real, reconstructed, "cycle_loss")
    return (real - reconstructed).abs().mean()


def segmentation_loss(logits: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    """Pixel-mean 2-class cross-entropy of (B,2,H,W) logits against a (B,H,W) binary mask."""
    if logits.dim() != 4 or logits.shape[1] != 2:
        raise LossError(f"segmentation logits must be (B,2,H,W), got {tuple(logits.shape)}")
    if gt_mask.shape != (logits.shape[0], *logits.shape[2:]):
        raise LossError(f"mask shape {tuple(gt_mask.shape)} does not match logits {tuple(logits.shape)}")
    if not torch.isin(gt_mask, torch.tensor([0, 1], device=gt_mask.device)).all():
        raise LossError("segmentation mask must be binary (0/1)")
    return F.cross_entropy(logits, gt_mask.long())


def total_loss(parts, w: LossWeights = LossWeights()):
    """Weighted sum lambda1*adv_A2B + ... + lambda5*seg.

    ``parts`` is a mapping or sequence in ``TERMS`` order; entries may be floats
    or scalar tensors (the result is then differentiable).
    """
    if isinstance(parts, dict):
        parts = [parts[t] for t in TERMS]
    parts = list(parts)
    if len(parts) != 5:
        raise LossError("total_loss needs exactly five parts")
    for name, p in zip(TERMS, parts):
        v = float(p.detach()) if torch.is_tensor(p) else float(p)
        if not math.isfinite(v):
            raise LossError(f"loss term {name} is not finite ({v})")
    out = None
    for lam, p in zip(w.as_tuple(), parts):
        term = lam * p
        out = term if out is None else out + term
    return out
