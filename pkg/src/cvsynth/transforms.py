"""Space-to-depth rearrangement and the 3-scale Haar detail pyramid.

Tensors follow the torch ``(N, C, H, W)`` layout. Both transforms are built
from differentiable torch primitives, so they pass gradients through.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

N_SCALES = 3


def space_to_depth(x: torch.Tensor, block: int) -> torch.Tensor:
    """(N, C, H, W) -> (N, C*b*b, H/b, W/b).

    Output channel ``c*b*b + i*b + j`` holds input channel ``c`` at offset
    ``(i, j)`` inside each ``b x b`` block.
    """
    n, c, h, w = x.shape
    if h % block or w % block:
        raise ValueError(f"spatial size {(h, w)} not divisible by block {block}")
    if block == 1:
        return x
    return F.pixel_unshuffle(x, block)


def depth_to_space(x: torch.Tensor, block: int) -> torch.Tensor:
    n, c, h, w = x.shape
    if c % (block * block):
        raise ValueError(f"channel count {c} not divisible by block^2 = {block * block}")
    if block == 1:
        return x
    return F.pixel_shuffle(x, block)


@dataclass
class WaveletPyramid:
    """Detail bands per scale, finest first; ``lowpass`` is the final LL."""

    scales: list  # [(LH, HL, HH), ...]
    lowpass: torch.Tensor

    def details(self):
        for lh, hl, hh in self.scales:
            yield from (lh, hl, hh)


def _pad_even(x: torch.Tensor) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph, pw = h % 2, w % 2
    if not (ph or pw):
        return x
    # replicate pad works on the last two dims of a (N, C, H, W) view
    lead = x.shape[:-2]
    y = F.pad(x.reshape(-1, 1, h, w), (0, pw, 0, ph), mode="replicate")
    return y.reshape(*lead, h + ph, w + pw)


def haar_step(x: torch.Tensor):
    """One orthonormal Haar analysis step over 2x2 blocks [[a, b], [c, d]]."""
    x = _pad_even(x)
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2
    hl = (a + b - c - d) / 2
    hh = (a - b - c + d) / 2
    return ll, lh, hl, hh


def haar_pyramid(img, n_scales: int = N_SCALES) -> WaveletPyramid:
    """Haar pyramid over the last two axes of ``img`` (numpy or torch).

    Odd sizes are edge-replicated by one row/column before each halving.
    """
    x = torch.as_tensor(np.asarray(img, dtype=np.float64)) if not torch.is_tensor(img) else img
    if x.dim() < 2:
        raise ValueError("haar_pyramid needs at least a 2D input")
    if min(x.shape[-2:]) < 2:
        raise ValueError(f"image dimensions {tuple(x.shape[-2:])} too small for a Haar pyramid")
    scales = []
    ll = x
    for _ in range(n_scales):
        ll, lh, hl, hh = haar_step(ll)
        scales.append((lh, hl, hh))
    return WaveletPyramid(scales, ll)
