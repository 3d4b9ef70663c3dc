"""Differentiable op set on top of torch autograd, plus a finite-difference checker.

torch supplies the tensor storage and the reverse-mode tape. The op wrappers
here pin the shapes and conventions used by the networks. They also add an
optional non-finite guard (``debug_mode``).
"""
from __future__ import annotations

import contextlib

import numpy as np
import torch
import torch.nn.functional as F

_DEBUG = False


class NonFiniteError(FloatingPointError):
    def __init__(self, op, tensor):
        n_bad = int((~torch.isfinite(tensor)).sum())
        super().__init__(f"{op} produced {n_bad} non-finite value(s) in a tensor of shape {tuple(tensor.shape)}")
        self.op = op


def set_debug(flag: bool) -> None:
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def debug_mode(flag: bool = True):
    prev = _DEBUG
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(prev)


def _checked(op, out):
    if _DEBUG and not bool(torch.isfinite(out).all()):
        raise NonFiniteError(op, out)
    return out


def conv2d(x, kernel, bias=None, stride=1):
    """Zero-padded 'same' convolution for odd kernels; (N, Cin, H, W) -> (N, Cout, H', W')."""
    kh, kw = kernel.shape[-2:]
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    return _checked("conv2d", F.conv2d(x, kernel, bias, stride=stride, padding=(kh // 2, kw // 2)))


def relu(x):
    return _checked("relu", torch.relu(x))


def sigmoid(x):
    return _checked("sigmoid", torch.sigmoid(x))


def add(x, y):
    return _checked("add", x + y)


def scale(x, alpha):
    return _checked("scale", x * alpha)


def concat_channels(x, y):
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {tuple(x.shape)} and {tuple(y.shape)}")
    return torch.cat([x, y], dim=1)


def linear(x, weight, bias=None):
    """x: (..., in) with weight (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight width {weight.shape[1]}")
    return _checked("linear", F.linear(x, weight, bias))


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C)."""
    return x.mean(dim=(2, 3))


def softmax(x, axis=-1):
    return _checked("softmax", torch.softmax(x, dim=axis))


def mse(x, y):
    if x.shape != y.shape:
        raise ValueError(f"mse: shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return _checked("mse", torch.mean((x - y) ** 2))


def matmul(x, y):
    if x.shape[-1] != y.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ ({x.shape[-1]} vs {y.shape[-2]})")
    return _checked("matmul", x @ y)


def l2_normalize_rows(x, eps=1e-12):
    return _checked("l2_normalize_rows", x / x.norm(dim=-1, keepdim=True).clamp_min(eps))


def backward(loss):
    """Reverse pass from a scalar loss; gradients accumulate into ``.grad``."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if _DEBUG and not bool(torch.isfinite(loss)):
        raise NonFiniteError("loss", loss)
    loss.backward()


def numeric_grad(f, x0, eps=1e-3):
    """Central differences of scalar ``f`` around ``x0`` (float64)."""
    x = x0.detach().to(torch.float64).clone()
    flat = x.view(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(f(x))
            flat[i] = orig - eps
            fm = float(f(x))
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * eps)
    return grad.view_as(x)


def analytic_grad(f, x0):
    x = x0.detach().to(torch.float64).clone().requires_grad_(True)
    out = f(x)
    backward(out)
    return x.grad.detach()


def relative_error(analytic, numeric) -> float:
    a = analytic.detach().to(torch.float64)
    n = numeric.detach().to(torch.float64)
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, 1e-8))
    return float(((a - n).abs() / denom).max()) if a.numel() else 0.0


def gradcheck(f, x0, eps=1e-3) -> float:
    """Max elementwise relative error between autograd and central differences.

    ``f`` maps a float64 tensor shaped like ``x0`` to a scalar.
    """
    return relative_error(analytic_grad(f, x0), numeric_grad(f, x0, eps))


def to_numpy(t) -> np.ndarray:
    return t.detach().cpu().numpy()
