"""Slice-wise (axial) and pixel-wise (coronal/sagittal) interpolation networks.

Volumes inside the networks are torch tensors shaped ``(N, h, w, l)``. Both
models predict a residual on top of linear interpolation along z, and their
output heads start at zero, so an untrained model reproduces linear
interpolation.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import autodiff as ad
from .memory import MemoryBank, read
from .transforms import depth_to_space, space_to_depth


@dataclass
class NetConfig:
    base_channels: int = 32
    blocks_per_group: int = 3
    groups: int = 3
    pint_groups: int = 1
    pint_z_pad: int = 0  # replicate-pad PInt inputs by this many columns along z
    center_inputs: bool = False  # subtract the per-sample input mean before the residual branch
    pint_bias: bool = True  # without biases a centered PInt leaves constant images untouched
    s2d_block: int = 4
    r: int = 2
    attention_reduction: int = 4
    memory_size: int = 10
    use_memory: bool = True

    def __post_init__(self):
        if self.r < 2:
            raise ValueError("r must be >= 2")
        if self.base_channels % self.attention_reduction:
            raise ValueError("base_channels must be divisible by attention_reduction")
        if self.base_channels % (self.s2d_block ** 2):
            raise ValueError("base_channels must equal head channels * s2d_block^2")
        if self.pint_z_pad < 0:
            raise ValueError("pint_z_pad must be >= 0")
        if self.blocks_per_group < 0 or self.groups < 1 or self.pint_groups < 1:
            raise ValueError("need groups >= 1, pint_groups >= 1 and blocks_per_group >= 0")

    @property
    def head_channels(self):
        return self.base_channels // self.s2d_block ** 2

    def to_dict(self):
        return asdict(self)


FULL_SCALE_NET = dict(base_channels=192, blocks_per_group=12, s2d_block=8)


class Conv(nn.Module):
    def __init__(self, cin, cout, k=3, zero_init=False, generator=None, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k))
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            nn.init.kaiming_uniform_(self.weight, nonlinearity="relu", generator=generator)

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias)


class Linear(nn.Module):
    def __init__(self, cin, cout, generator=None):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin))
        self.bias = nn.Parameter(torch.zeros(cout))
        nn.init.kaiming_uniform_(self.weight, nonlinearity="relu", generator=generator)

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)


class ChannelAttention(nn.Module):
    """Squeeze-excitation gate: u * sigmoid(W2 relu(W1 mean(u)))."""

    def __init__(self, channels, reduction=4, generator=None):
        super().__init__()
        self.squeeze = Linear(channels, channels // reduction, generator)
        self.excite = Linear(channels // reduction, channels, generator)

    def forward(self, u):
        s = ad.sigmoid(self.excite(ad.relu(self.squeeze(ad.global_avg_pool(u)))))
        return u * s[:, :, None, None]


class ResidualBlock(nn.Module):
    """y = x + CA(conv(relu(conv(x)))); the second conv starts at zero."""

    def __init__(self, channels, reduction=4, generator=None, bias=True):
        super().__init__()
        self.channels = channels
        self.conv1 = Conv(channels, channels, 3, generator=generator, bias=bias)
        self.conv2 = Conv(channels, channels, 3, zero_init=True, bias=bias)
        self.attention = ChannelAttention(channels, reduction, generator)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"residual block expects {self.channels} channels, got {x.shape[1]}")
        return ad.add(x, self.attention(self.conv2(ad.relu(self.conv1(x)))))


def residual_block(x, block: ResidualBlock):
    return block(x)


def _blocks(cfg, g, bias=True):
    return nn.Sequential(*[ResidualBlock(cfg.base_channels, cfg.attention_reduction, g, bias)
                           for _ in range(cfg.blocks_per_group)])


def linear_blend(x0, x1, r):
    """Linear interpolation at t/r, t = 1..r-1; inputs (N, H, W) -> (N, r-1, H, W)."""
    t = torch.arange(1, r, dtype=x0.dtype, device=x0.device)[None, :, None, None] / r
    return x0[:, None] * (1 - t) + x1[:, None] * t


def linear_upsample_last(x, r):
    """Linear interpolation of the last axis at j/r, j = 0..r*L-1, clamped at the end."""
    L = x.shape[-1]
    j = torch.arange(r * L, device=x.device)
    i0 = torch.div(j, r, rounding_mode="floor")
    i1 = torch.clamp(i0 + 1, max=L - 1)
    frac = ((j % r).to(x.dtype) / r)
    return x[..., i0] * (1 - frac) + x[..., i1] * frac


class SliceInterpNet(nn.Module):
    """U-shaped two-slice interpolator with a memory read at the bottleneck."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(int(seed))
        c = cfg.base_channels
        self.cfg = cfg
        self.head = Conv(1, cfg.head_channels, 3, generator=g)
        self.merge_in = Conv(2 * c, c, 3, generator=g)
        self.encoder = nn.ModuleList([_blocks(cfg, g) for _ in range(3)])
        self.enc_out = Conv(c, c, 3, generator=g)
        self.dec_convs = nn.ModuleList([Conv(c, c, 3, generator=g) for _ in range(3)])
        self.dec_blocks = nn.ModuleList([_blocks(cfg, g) for _ in range(3)])
        self.skip_merge = nn.ModuleList([Conv(2 * c, c, 1, generator=g) for _ in range(2)])
        self.tail = Conv(c, (cfg.r - 1) * cfg.s2d_block ** 2, 3, zero_init=True)

    def features(self, x):
        return space_to_depth(self.head(x), self.cfg.s2d_block)


def build_sint(cfg: NetConfig, seed: int = 0) -> SliceInterpNet:
    return SliceInterpNet(cfg, seed)


@dataclass
class SIntOutput:
    slices: torch.Tensor  # (N, r-1, H, W)
    E3: torch.Tensor
    read: object  # ReadResult or None


def sint_forward(net: SliceInterpNet, memory: MemoryBank | None, x_i, x_i1, train_mode=False, on_read=None) -> SIntOutput:
    """Predict the r-1 slices between two (N, H, W) slices.

    ``on_read(E3, read_result)`` fires after the memory read when
    ``train_mode`` is set; the trainer uses it to schedule the bank update.
    """
    cfg = net.cfg
    if x_i.shape != x_i1.shape:
        raise ValueError(f"slice shapes differ: {tuple(x_i.shape)} vs {tuple(x_i1.shape)}")
    h, w = x_i.shape[-2:]
    if h % cfg.s2d_block or w % cfg.s2d_block:
        raise ValueError(f"slice size {(h, w)} not divisible by s2d_block={cfg.s2d_block}")
    if cfg.center_inputs:
        mu = (x_i.mean(dim=(1, 2), keepdim=True) + x_i1.mean(dim=(1, 2), keepdim=True)) / 2
        f_i, f_i1 = net.features((x_i - mu)[:, None]), net.features((x_i1 - mu)[:, None])
    else:
        f_i, f_i1 = net.features(x_i[:, None]), net.features(x_i1[:, None])
    e0 = net.merge_in(ad.concat_channels(f_i, f_i1))
    e1 = net.encoder[0](e0)
    e2 = net.encoder[1](e1)
    e3 = net.enc_out(ad.add(net.encoder[2](e2), e0))
    result = None
    if memory is not None and cfg.use_memory:
        result = read(memory, e3)
        d = result.D3
        if train_mode and on_read is not None:
            on_read(e3, result)
    else:
        d = e3
    skips = [None, e2, e1]
    for k in range(3):
        if skips[k] is not None:
            d = net.skip_merge[k - 1](ad.concat_channels(d, skips[k]))
        d = net.dec_blocks[k](net.dec_convs[k](d))
    residual = depth_to_space(net.tail(d), cfg.s2d_block)
    return SIntOutput(ad.add(linear_blend(x_i, x_i1, cfg.r), residual), e3, result)


def interleave(originals, inter):
    """originals (N, l, H, W), inter (N, l-1, r-1, H, W) -> (N, r*l-r+1, H, W)."""
    n, l, h, w = originals.shape
    r = inter.shape[2] + 1
    body = torch.cat([originals[:, :-1, None], inter], dim=2).reshape(n, (l - 1) * r, h, w)
    return torch.cat([body, originals[:, -1:]], dim=1)


def sint_volume(net: SliceInterpNet, memory, v, train_mode=False, on_read=None):
    """(N, h, w, l) -> (N, h, w, r*l-r+1); every r-th output slice copies an input slice."""
    n, h, w, l = v.shape
    if l < 2:
        raise ValueError("slice-wise interpolation needs at least two slices")
    r = net.cfg.r
    slices = v.permute(0, 3, 1, 2)  # (N, l, h, w)
    x0 = slices[:, :-1].reshape(-1, h, w)
    x1 = slices[:, 1:].reshape(-1, h, w)
    out = sint_forward(net, memory, x0, x1, train_mode, on_read)
    inter = out.slices.reshape(n, l - 1, r - 1, h, w)
    return interleave(slices, inter).permute(0, 2, 3, 1)


class PixelInterpNet(nn.Module):
    """Residual-group SR network upscaling the last axis by r with a 1-D sub-pixel head."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(int(seed))
        c = cfg.base_channels
        self.cfg = cfg
        bias = cfg.pint_bias
        self.head = Conv(1, c, 3, generator=g, bias=bias)
        self.groups = nn.ModuleList([_blocks(cfg, g, bias) for _ in range(cfg.pint_groups)])
        self.group_convs = nn.ModuleList([Conv(c, c, 3, generator=g, bias=bias) for _ in range(cfg.pint_groups)])
        self.body_out = Conv(c, c, 3, generator=g, bias=bias)
        self.upsample = Conv(c, cfg.r, 3, zero_init=True, bias=bias)


def build_pint(cfg: NetConfig, seed: int = 0) -> PixelInterpNet:
    return PixelInterpNet(cfg, seed)


def pint_images(net: PixelInterpNet, x):
    """(N, H, L) -> (N, H, r*L-r+1). The last r-1 super-resolved columns are dropped."""
    r, pad = net.cfg.r, net.cfg.pint_z_pad
    n, hgt, L = x.shape
    if pad:
        x = torch.nn.functional.pad(x[:, None], (pad, pad, 0, 0), mode="replicate")[:, 0]
        L += 2 * pad
    inp = x - x.mean(dim=(1, 2), keepdim=True) if net.cfg.center_inputs else x
    f = net.head(inp[:, None].contiguous(memory_format=torch.channels_last))
    body = f
    for blocks, conv in zip(net.groups, net.group_convs):
        body = ad.add(body, conv(blocks(body)))
    body = ad.add(net.body_out(body), f)
    sub = net.upsample(body)  # (N, r, H, L)
    residual = sub.permute(0, 2, 3, 1).reshape(n, hgt, L * r)
    out = ad.add(linear_upsample_last(x, r), residual)
    return out[..., r * pad: r * (L - pad) - r + 1]


def pint_image(net: PixelInterpNet, img, r: int | None = None):
    """Super-resolve one coronal or sagittal :class:`ViewImage` along its slice axis."""
    from .volume import ViewImage

    if r is not None and r != net.cfg.r:
        raise ValueError(f"network was built for r={net.cfg.r}, asked for r={r}")
    if img.view == "axial":
        raise ValueError("pixel-wise interpolation applies to coronal or sagittal images only")
    x = torch.as_tensor(img.data, dtype=next(net.parameters()).dtype)[None]
    with torch.no_grad():
        y = pint_images(net, x)[0]
    return ViewImage(y.numpy().copy(), img.view, img.index)


def pint_volume(net: PixelInterpNet, v, view: str):
    """Apply the pixel-wise model to every coronal or sagittal image of (N, h, w, l)."""
    n, h, w, l = v.shape
    if view == "coronal":
        out = pint_images(net, v.reshape(n * h, w, l))
        return out.reshape(n, h, w, -1)
    if view == "sagittal":
        out = pint_images(net, v.permute(0, 2, 1, 3).reshape(n * w, h, l))
        return out.reshape(n, w, h, -1).permute(0, 2, 1, 3)
    raise ValueError(f"pixel-wise interpolation needs coronal or sagittal, got {view!r}")


def pint_views(net: PixelInterpNet, v, v_sagittal=None):
    """Coronal output of ``v`` and sagittal output of ``v_sagittal`` (default ``v``).

    Both views go through the network as one batch when h == w.
    """
    vs = v if v_sagittal is None else v_sagittal
    n, h, w, l = v.shape
    if h != w or vs.shape != v.shape:
        return pint_volume(net, v, "coronal"), pint_volume(net, vs, "sagittal")
    images = torch.cat([v.reshape(n * h, w, l), vs.permute(0, 2, 1, 3).reshape(n * w, h, l)])
    out = pint_images(net, images)
    oc, os = out[: n * h], out[n * h:]
    return oc.reshape(n, h, w, -1), os.reshape(n, w, h, -1).permute(0, 2, 1, 3)


@torch.no_grad()
def randomize_(module: nn.Module, seed: int = 0, std: float = 0.1):
    """Overwrite every parameter with small Gaussian noise (for gradient checks)."""
    g = torch.Generator().manual_seed(int(seed))
    for p in module.parameters():
        p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * std)
    return module
