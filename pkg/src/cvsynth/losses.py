"""Training objectives: internal learning, cross-view distillation, weighted total."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch

from . import autodiff as ad
from .transforms import haar_pyramid


class NonFiniteLossError(ValueError):
    pass


@dataclass
class LossWeights:
    int_a: float = 1.0
    int_c: float = 1.0
    int_s: float = 1.0
    cmd: float = 0.15
    memory: float = 0.1


@dataclass
class LossReport:
    int_a: float = 0.0
    int_c: float = 0.0
    int_s: float = 0.0
    cmd_c: list = field(default_factory=list)  # one entry per incremental pass
    cmd_s: list = field(default_factory=list)
    com: float = 0.0
    sep: float = 0.0
    total: float = 0.0

    @property
    def cmd_c_mean(self):
        return sum(self.cmd_c) / len(self.cmd_c) if self.cmd_c else 0.0

    @property
    def cmd_s_mean(self):
        return sum(self.cmd_s) / len(self.cmd_s) if self.cmd_s else 0.0

    def to_dict(self):
        return asdict(self)


def view_images(v, view):
    """(N, h, w, l) -> (N, K, rows, cols) stack of the view's 2D images."""
    if view == "axial":
        return v.permute(0, 3, 1, 2)
    if view == "coronal":
        return v
    if view == "sagittal":
        return v.permute(0, 2, 1, 3)
    raise ValueError(f"unknown view {view!r}")


def internal_loss(pred, target, view, use_wavelet=True):
    """MSE plus, per Haar scale 1..3, the MSE of the LH/HL/HH bands of the view's images.

    ``target`` may carry extra trailing slices; they are ignored.
    """
    if target.shape[-1] > pred.shape[-1]:
        target = target[..., : pred.shape[-1]]
    if pred.shape != target.shape:
        raise ValueError(f"internal_loss: incompatible shapes {tuple(pred.shape)} vs {tuple(target.shape)}")
    loss = ad.mse(pred, target)
    if use_wavelet:
        wp = haar_pyramid(view_images(pred, view))
        wt = haar_pyramid(view_images(target, view))
        for (p_bands, t_bands) in zip(wp.scales, wt.scales):
            diff = torch.cat([(p - t).reshape(-1) for p, t in zip(p_bands, t_bands)])
            loss = loss + torch.mean(diff ** 2)
    return loss


@dataclass
class ConsistencySet:
    """Flat voxel indices (per sample) of the best-agreeing fraction ``gamma``."""

    indices: torch.Tensor  # (N, K) long
    gamma: float

    def __len__(self):
        return self.indices.shape[-1]


def select_consistent(a, b, gamma, mask_original=True, r=2) -> ConsistencySet:
    """Pick the ceil(gamma * P) voxels with the smallest squared difference.

    Works per sample on (N, ...) tensors whose last axis is z. With
    ``mask_original`` the slices at 1-based z mod r == 1 are not candidates.
    Ties go to the smaller linear index.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must be in (0, 1]")
    n = a.shape[0]
    d2 = ((a.detach() - b.detach()) ** 2).reshape(n, -1)
    candidate = torch.ones(a.shape[1:], dtype=torch.bool)
    if mask_original:
        candidate[..., ::r] = False
    cand_idx = torch.nonzero(candidate.reshape(-1)).squeeze(1)
    P = cand_idx.numel()
    if P == 0:
        raise ValueError("no candidate voxels for the consistency set")
    k = math.ceil(gamma * P - 1e-9)
    order = torch.sort(d2[:, cand_idx], dim=1, stable=True).indices[:, :k]
    return ConsistencySet(cand_idx[order], gamma)


def cmd_loss(oa, ob, sel: ConsistencySet):
    """Mean squared difference over the selected voxels; gradients reach both volumes."""
    if len(sel) == 0:
        raise ValueError("empty consistency set")
    n = oa.shape[0]
    diff = oa.reshape(n, -1).gather(1, sel.indices) - ob.reshape(n, -1).gather(1, sel.indices)
    return torch.mean(diff ** 2)


def total_loss(parts: LossReport, weights: LossWeights = LossWeights()):
    """L = sum of internal losses + w_cmd (cmd_c + cmd_s) + w_mem (com + sep).

    Works on floats or tensors; cmd parts are averaged over passes.
    """
    def mean(xs):
        return sum(xs) / len(xs) if len(xs) else 0.0

    values = [parts.int_a, parts.int_c, parts.int_s, mean(parts.cmd_c), mean(parts.cmd_s), parts.com, parts.sep]
    for v in values:
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise NonFiniteLossError(f"non-finite loss part: {parts.to_dict() if not torch.is_tensor(v) else v}")
    return (weights.int_a * parts.int_a + weights.int_c * parts.int_c + weights.int_s * parts.int_s
            + weights.cmd * (mean(parts.cmd_c) + mean(parts.cmd_s))
            + weights.memory * (parts.com + parts.sep))
