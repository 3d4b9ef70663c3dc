"""Prototype memory bank read by softmax attention and updated by assignment.

Feature maps are ``(N, d, H, W)``; every spatial position is one query.
Item indices in this module are 0-based.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import autodiff as ad


class MemoryBank(nn.Module):
    """``m x d`` matrix of unit-norm rows, trainable through the read path."""

    def __init__(self, m: int = 10, d: int = 32, seed: int = 0):
        super().__init__()
        if m < 2:
            raise ValueError("memory bank needs at least two items")
        g = torch.Generator().manual_seed(int(seed))
        rows = torch.randn(m, d, generator=g)
        self.M = nn.Parameter(ad.l2_normalize_rows(rows))

    @property
    def m(self):
        return self.M.shape[0]

    @property
    def d(self):
        return self.M.shape[1]

    @torch.no_grad()
    def renormalize(self):
        self.M.copy_(ad.l2_normalize_rows(self.M))

    @torch.no_grad()
    def apply_update(self, E3, read_result=None):
        self.M.copy_(update(self.M, E3, read_result))


@dataclass
class ReadResult:
    D3: torch.Tensor  # (N, d, H, W)
    p: torch.Tensor  # (N, H, W, m)
    z_pos: torch.Tensor  # (N, H, W) long
    z_neg: torch.Tensor  # (N, H, W) long


def _positions(E3):
    n, d, h, w = E3.shape
    return E3.permute(0, 2, 3, 1).reshape(-1, d)


def _memory_matrix(bank):
    return bank.M if isinstance(bank, MemoryBank) else bank


def nearest_items(p):
    """Largest and second-largest weights; ties resolve to the smaller index."""
    z_pos = torch.argmax(p, dim=-1)
    masked = p.detach().clone()
    masked.scatter_(-1, z_pos.unsqueeze(-1), float("-inf"))
    z_neg = torch.argmax(masked, dim=-1)
    return z_pos, z_neg


def read(bank, E3) -> ReadResult:
    M = _memory_matrix(bank)
    n, d, h, w = E3.shape
    if d != M.shape[1]:
        raise ValueError(f"feature width {d} != memory width {M.shape[1]}")
    q = _positions(E3)
    p = ad.softmax(ad.matmul(q, M.t()), axis=-1)
    D3 = ad.matmul(p, M).reshape(n, h, w, d).permute(0, 3, 1, 2)
    z_pos, z_neg = nearest_items(p.detach())
    return ReadResult(D3, p.reshape(n, h, w, -1), z_pos.reshape(n, h, w), z_neg.reshape(n, h, w))


@torch.no_grad()
def update(bank, E3, read_result: ReadResult | None = None) -> torch.Tensor:
    """Return the bank after one accumulation step; gradients never flow here.

    Each item ``z`` gathers the positions whose nearest item it is, weights
    them by a softmax over those positions rescaled so the largest weight is
    one, adds the weighted sum of their features and renormalizes. Items with
    no assigned positions are returned unchanged.
    """
    M = _memory_matrix(bank).detach()
    q = _positions(E3.detach()).to(M.dtype)
    if read_result is None:
        z_pos = torch.argmax(q @ M.t(), dim=-1)
    else:
        z_pos = read_result.z_pos.reshape(-1)
    new = M.clone()
    for z in range(M.shape[0]):
        members = q[z_pos == z]
        if members.shape[0] == 0:
            continue
        weights = torch.softmax(members @ M[z], dim=0)
        weights = weights / weights.max()
        row = M[z] + weights @ members
        new[z] = row / row.norm()
    return new


def regularizers(read_result: ReadResult, E3, bank, alpha: float = 1.0):
    """Compactness and separateness losses, summed over all positions."""
    M = _memory_matrix(bank)
    if M.shape[0] < 2:
        raise ValueError("separateness needs at least two memory items")
    q = _positions(E3)
    d_pos = (q - M[read_result.z_pos.reshape(-1)]).norm(dim=-1)
    d_neg = (q - M[read_result.z_neg.reshape(-1)]).norm(dim=-1)
    l_com = d_pos.sum()
    l_sep = torch.clamp(d_pos - d_neg + alpha, min=0.0).sum()
    return l_com, l_sep
