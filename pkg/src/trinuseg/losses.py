"""Training objectives for the tri-decoder network.

Every branch is scored with a 0.60 cross-entropy + 0.40 dice mix.  The
consistency self-distillation term compares the Sobel contour of the nuclei
branch's soft prediction with the edge branch's soft prediction, so its
gradient flows into both branches.  The total is the weighted sum

    total = 0.30 * l_n + 0.35 * l_e + 0.35 * l_c + gamma_sd(epoch) * l_sd

with gamma_sd starting at 1.0 and stepping down by 0.3 every 10 epochs until
it floors at 0.4.

All functions take channels-last tensors: logits are (..., H, W, 2), binary
targets and probability maps are (..., H, W).  Leading dimensions are
treated as batch; per-map statistics (dice sums, Sobel rescaling) are taken
over the trailing two spatial axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

DICE_EPS = 1e-5
SOBEL_DELTA = 1e-12
# peak |response| of the 3x3 Sobel kernel to a saturated 0 -> 1 step
SOBEL_STEP_RESPONSE = 4.0

SOBEL_GX = torch.tensor(
    [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]
)
SOBEL_GY = SOBEL_GX.t().contiguous()


@dataclass(frozen=True)
class LossWeights:
    """Branch mixing coefficients; gammas must sum to 1."""

    gamma_n: float = 0.30
    gamma_e: float = 0.35
    gamma_c: float = 0.35
    branch_ce: float = 0.60
    branch_dice: float = 0.40

    def __post_init__(self):
        vals = (self.gamma_n, self.gamma_e, self.gamma_c,
                self.branch_ce, self.branch_dice)
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ValueError(f"loss weights must lie in [0, 1]: {vals}")
        if abs(self.gamma_n + self.gamma_e + self.gamma_c - 1.0) > 1e-9:
            raise ValueError("branch gammas must sum to 1")


@dataclass
class LossBreakdown:
    """The four weighted terms and their total; tensors while differentiable."""

    l_n: torch.Tensor
    l_e: torch.Tensor
    l_c: torch.Tensor
    l_sd: torch.Tensor
    gamma_sd_used: float
    total: torch.Tensor

    def as_floats(self) -> dict:
        def value(x):
            return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

        return {
            "l_n": value(self.l_n), "l_e": value(self.l_e),
            "l_c": value(self.l_c), "l_sd": value(self.l_sd),
            "gamma_sd": self.gamma_sd_used, "total": value(self.total),
        }


def _check_spatial_match(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(probs: torch.Tensor, target: torch.Tensor,
              eps: float = DICE_EPS) -> torch.Tensor:
    """Soft dice loss 1 - (2*sum(p*t)+eps) / (sum(p)+sum(t)+eps).

    Sums run over the trailing two axes; any leading axes are averaged.
    """
    _check_spatial_match(probs, target, "dice_loss")
    target = target.to(probs.dtype)
    inter = (probs * target).sum(dim=(-2, -1))
    denom = probs.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def cross_entropy_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean pixel cross-entropy; logits (..., H, W, 2), target binary (..., H, W)."""
    if logits.shape[:-1] != target.shape or logits.shape[-1] != 2:
        raise ValueError(
            f"cross_entropy_loss: logits {tuple(logits.shape)} do not match "
            f"target {tuple(target.shape)} with 2 classes"
        )
    logp = F.log_softmax(logits, dim=-1)
    picked = torch.gather(logp, -1, target.long().unsqueeze(-1)).squeeze(-1)
    return -picked.mean()


def foreground_probability(logits: torch.Tensor) -> torch.Tensor:
    """Softmax foreground channel of (..., H, W, 2) logits."""
    return torch.softmax(logits, dim=-1)[..., 1]


def branch_loss(logits: torch.Tensor, target: torch.Tensor,
                weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Per-branch objective: branch_ce * CE + branch_dice * dice on softmax fg."""
    ce = cross_entropy_loss(logits, target)
    dice = dice_loss(foreground_probability(logits), target)
    return weights.branch_ce * ce + weights.branch_dice * dice


def sobel_edge_map(probs: torch.Tensor) -> torch.Tensor:
    """Soft contour of a probability map via 3x3 Sobel filters.

    Replicate padding, magnitude sqrt(gx^2 + gy^2 + delta) with the constant
    sqrt(delta) floor subtracted so flat inputs map to exactly zero, then
    per-map rescaling by the peak response.  The denominator is floored at
    the saturated-step response (4.0): a full 0 -> 1 step still maps to 1.0,
    while the micro-gradients of a near-flat map are not blown up to full
    scale (un-floored rescaling lets an empty prediction masquerade as a
    dense contour, which derails consistency training).  Fully
    differentiable.
    """
    single = probs.ndim == 2
    if single:
        probs = probs.unsqueeze(0)
    lead = probs.shape[:-2]
    h, w = probs.shape[-2:]
    flat = probs.reshape(-1, 1, h, w)
    flat = F.pad(flat, (1, 1, 1, 1), mode="replicate")
    kernels = torch.stack([SOBEL_GX, SOBEL_GY]).unsqueeze(1)
    kernels = kernels.to(dtype=probs.dtype, device=probs.device)
    grads = F.conv2d(flat, kernels)  # (N, 2, H, W)
    delta = torch.as_tensor(SOBEL_DELTA, dtype=probs.dtype, device=probs.device)
    mag = torch.sqrt(grads.pow(2).sum(dim=1) + delta) - torch.sqrt(delta)
    peak = mag.amax(dim=(-2, -1), keepdim=True).clamp_min(SOBEL_STEP_RESPONSE)
    mag = mag / peak
    mag = mag.reshape(*lead, h, w)
    return mag.squeeze(0) if single else mag


def self_distillation_loss(nuclei_logits: torch.Tensor,
                           edge_logits: torch.Tensor,
                           detach_nuclei: bool = False) -> torch.Tensor:
    """Dice between the Sobel contour of the nuclei branch and the edge branch.

    Soft-vs-soft; gradients flow into both branches unless ``detach_nuclei``
    stops the contour side.
    """
    _check_spatial_match(nuclei_logits, edge_logits, "self_distillation_loss")
    nuclei_fg = foreground_probability(nuclei_logits)
    if detach_nuclei:
        nuclei_fg = nuclei_fg.detach()
    contour = sobel_edge_map(nuclei_fg)
    return dice_loss(contour, foreground_probability(edge_logits))


def gamma_sd_schedule(epoch: int) -> float:
    """1.0 at epoch 0, minus 0.3 every 10 epochs, floored at 0.4."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return max(4, 10 - 3 * (epoch // 10)) / 10.0


def _target_tensors(gt, reference: torch.Tensor):
    """Accept a LabelTriplet or a (nuclei, edge, cluster) tensor triple."""
    if hasattr(gt, "nuclei") and hasattr(gt, "cluster_edge"):
        maps = (gt.nuclei, gt.edge, gt.cluster_edge)
    else:
        maps = tuple(gt)
    out = []
    for m in maps:
        if isinstance(m, np.ndarray):
            m = torch.from_numpy(np.ascontiguousarray(m))
        out.append(m.to(device=reference.device, dtype=reference.dtype))
    return out


def total_loss(pred, gt, epoch: int,
               weights: LossWeights = LossWeights(),
               sd_enabled: bool = True,
               detach_nuclei: bool = False) -> LossBreakdown:
    """Full multi-task objective for one prediction/target pair.

    ``pred`` is a TriPrediction (channels-last logits); ``gt`` is a
    LabelTriplet or a triple of binary maps matching the logits' spatial
    shape.  With ``sd_enabled`` false the distillation term is recorded for
    monitoring but weighted 0 and kept out of the gradient graph.
    """
    t_n, t_e, t_c = _target_tensors(gt, pred.nuclei_logits)
    l_n = branch_loss(pred.nuclei_logits, t_n, weights)
    l_e = branch_loss(pred.edge_logits, t_e, weights)
    l_c = branch_loss(pred.cluster_logits, t_c, weights)
    if sd_enabled:
        gamma_sd = gamma_sd_schedule(epoch)
        l_sd = self_distillation_loss(pred.nuclei_logits, pred.edge_logits,
                                      detach_nuclei=detach_nuclei)
    else:
        gamma_sd = 0.0
        with torch.no_grad():
            l_sd = self_distillation_loss(pred.nuclei_logits, pred.edge_logits)
    total = (weights.gamma_n * l_n + weights.gamma_e * l_e
             + weights.gamma_c * l_c + gamma_sd * l_sd)
    return LossBreakdown(l_n=l_n, l_e=l_e, l_c=l_c, l_sd=l_sd,
                         gamma_sd_used=gamma_sd, total=total)
