"""Finite-difference gradient checks over every differentiable building block.

Each check reduces its op to a scalar through a fixed random weighting, then
compares autograd against central differences in float64.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import torch

from . import autodiff as ad
from .losses import cmd_loss, internal_loss, select_consistent
from .memory import read, regularizers
from .networks import NetConfig, ResidualBlock, build_pint, build_sint, pint_images, randomize_, sint_forward
from .transforms import depth_to_space, haar_pyramid, space_to_depth

D = torch.float64
OP_TOL = 1e-4
NET_TOL = 1e-3


@dataclass
class GradResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _op_cases(g):
    def rnd(*shape):
        return torch.randn(*shape, generator=g, dtype=D)

    w3, p3 = rnd(3, 2, 3, 3), rnd(1, 3, 5, 6)
    x5, p5 = rnd(1, 2, 5, 5), rnd(1, 3, 5, 5)
    ws, ps = rnd(2, 1, 3, 3), rnd(1, 2, 3, 3)
    p45, y45 = rnd(4, 5), rnd(4, 5)
    yc, pc = rnd(1, 2, 3, 3), rnd(1, 5, 3, 3)
    W, b, pl, xl = rnd(3, 4), rnd(3), rnd(2, 3), rnd(2, 4)
    pg, psm, ym, pm, pn = rnd(2, 3), rnd(3, 6), rnd(4, 2), rnd(3, 2), rnd(3, 5)
    sw, dw = rnd(1, 8, 2, 2), rnd(1, 2, 4, 4)
    return {
        "conv2d": (lambda x: (ad.conv2d(x, w3) * p3).sum(), rnd(1, 2, 5, 6)),
        "conv2d_kernel": (lambda k: (ad.conv2d(x5, k) * p5).sum(), rnd(3, 2, 3, 3)),
        "conv2d_stride2": (lambda x: (ad.conv2d(x, ws, stride=2) * ps).sum(), rnd(1, 1, 6, 6)),
        "relu": (lambda x: (ad.relu(x) * p45).sum(), rnd(4, 5)),
        "sigmoid": (lambda x: (ad.sigmoid(x) * p45).sum(), rnd(4, 5)),
        "add": (lambda x: (ad.add(x, y45) * p45).sum(), rnd(4, 5)),
        "scale": (lambda x: (ad.scale(x, -1.7) * p45).sum(), rnd(4, 5)),
        "concat_channels": (lambda x: (ad.concat_channels(x, yc) * pc).sum(), rnd(1, 3, 3, 3)),
        "linear": (lambda x: (ad.linear(x, W, b) * pl).sum(), rnd(2, 4)),
        "linear_weight": (lambda w: (ad.linear(xl, w) * pl).sum(), rnd(3, 4)),
        "global_avg_pool": (lambda x: (ad.global_avg_pool(x) * pg).sum(), rnd(2, 3, 4, 4)),
        "softmax": (lambda x: (ad.softmax(x, axis=-1) * psm).sum(), rnd(3, 6)),
        "mse": (lambda x: ad.mse(x, y45), rnd(4, 5)),
        "matmul": (lambda x: (ad.matmul(x, ym) * pm).sum(), rnd(3, 4)),
        "l2_normalize_rows": (lambda x: (ad.l2_normalize_rows(x) * pn).sum(), rnd(3, 5)),
        "space_to_depth": (lambda x: (space_to_depth(x, 2) * sw).sum(), rnd(1, 2, 4, 4)),
        "depth_to_space": (lambda x: (depth_to_space(x, 2) * dw[:, :2]).sum(), rnd(1, 8, 2, 2)),
        "haar_pyramid": (lambda x: sum((b * b).sum() for b in haar_pyramid(x).details()), rnd(9, 10)),
    }


def _module_cases(g):
    def rnd(*shape):
        return torch.randn(*shape, generator=g, dtype=D)

    block = randomize_(ResidualBlock(8, 4), seed=1).double()
    pb = rnd(1, 8, 4, 4)
    M0 = torch.nn.functional.normalize(rnd(4, 3), dim=1)
    E0, pr = rnd(1, 3, 2, 2), rnd(1, 3, 2, 2)
    res0 = read(M0, E0)
    target = rnd(1, 8, 8, 3)
    a0, b0 = rnd(1, 3, 3, 5), rnd(1, 3, 3, 5)
    sel = select_consistent(a0, b0, 0.4, r=2)
    cases = {
        "residual_block": (lambda x: (block(x) * pb).sum(), rnd(1, 8, 4, 4)),
        "memory_read_features": (lambda e: (read(M0, e).D3 * pr).sum(), E0),
        "memory_read_items": (lambda m: (read(m, E0).D3 * pr).sum(), M0),
        "compactness": (lambda e: regularizers(res0, e, M0)[0], E0),
        "separateness": (lambda e: regularizers(res0, e, M0, alpha=5.0)[1], E0),
        "separateness_items": (lambda m: regularizers(res0, E0, m, alpha=5.0)[1], M0),
        "cmd_loss": (lambda a: cmd_loss(a, b0, sel), a0),
    }
    for view in ("axial", "coronal", "sagittal"):
        cases[f"internal_loss_{view}"] = (lambda p, v=view: internal_loss(p, target, v), rnd(1, 8, 8, 3))
    return cases


def _network_cases(g):
    cfg = NetConfig(base_channels=8, blocks_per_group=1, s2d_block=2, r=2, memory_size=3)
    sint = randomize_(build_sint(cfg, 0), seed=2, std=0.2).double()
    pint = randomize_(build_pint(cfg, 1), seed=3, std=0.2).double()
    bank = torch.nn.functional.normalize(torch.randn(3, 8, generator=g, dtype=D), dim=1)
    x1 = torch.rand(1, 16, 16, generator=g, dtype=D)
    ps = torch.randn(1, 1, 16, 16, generator=g, dtype=D)
    pp = torch.randn(2, 16, 31, generator=g, dtype=D)
    return {
        "sint_network": (lambda x: (sint_forward(sint, bank, x, x1).slices * ps).sum(),
                         torch.rand(1, 16, 16, generator=g, dtype=D)),
        "pint_network": (lambda x: (pint_images(pint, x) * pp).sum(),
                         torch.rand(2, 16, 16, generator=g, dtype=D)),
    }


def run(full: bool = False, seed: int = 0) -> list[GradResult]:
    """Check ops and blocks (tolerance 1e-4); with ``full`` also the tiny networks (1e-3)."""
    g = torch.Generator().manual_seed(seed)
    groups = [(_op_cases(g), OP_TOL), (_module_cases(g), OP_TOL)]
    if full:
        groups.append((_network_cases(g), NET_TOL))
    results = []
    for cases, tol in groups:
        for name, (f, x0) in cases.items():
            t0 = time.perf_counter()
            err = ad.gradcheck(f, x0, eps=1e-6)
            results.append(GradResult(name, err, tol, time.perf_counter() - t0))
    return results


def format_table(results: list[GradResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  {'tol':>7}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:12.3e}  {r.tol:7.0e}  {'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
