"""Two-stage self-supervised training and inference.

Stage 1 (internal learning) subsamples each crop by r along z and asks every
model to restore the crop. Stage 2 keeps those losses and adds cross-view
distillation. For that, each model is applied to the crop itself, and again to
its own output, and the axial result is tied to the coronal and sagittal
results on their best-agreeing voxels.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import autodiff as ad
from .checkpoint import load_tensors, save_tensors
from .losses import LossReport, LossWeights, NonFiniteLossError, cmd_loss, internal_loss, select_consistent, total_loss
from .memory import MemoryBank, regularizers
from .networks import NetConfig, build_pint, build_sint, pint_views, pint_volume, sint_volume
from .volume import Volume, fuse

log = logging.getLogger(__name__)

DEFAULT_SLICES = {2: 7, 3: 7, 4: 9}


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    r: int = 2
    gamma: float = 0.40
    N: int = 2
    m: int = 10
    epochs: int = 50
    stage1_epochs: int = 10
    steps_per_epoch: int | None = None  # None: one pass over the volumes per epoch
    batch_size: int = 4
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_decay_epoch: int = 10
    patch: int = 32
    central_fraction: float = 0.5
    slices_per_sample: int | None = None  # None: 7, 7, 9 for r = 2, 3, 4
    weights: LossWeights = field(default_factory=LossWeights)
    memory_alpha: float = 1.0
    use_cmd: bool = True
    use_wavelet: bool = True
    cmd_mask_originals: bool = True
    truncate_incremental: bool = False
    incremental_crop: bool = True
    augment: bool = False  # random in-plane flips/transposes and z reversal of crops
    fusion_include_axial_at_originals: bool = False
    degradation: dict = field(default_factory=lambda: {"mode": "direct_subsample"})
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.net, dict):
            self.net = NetConfig(**self.net)
        self.net.r = self.r
        self.net.memory_size = self.m
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.epochs and not 1 <= self.stage1_epochs <= self.epochs:
            raise ValueError("need 1 <= stage1_epochs <= epochs")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.patch % self.net.s2d_block:
            raise ValueError("patch must be divisible by s2d_block")

    @property
    def slices(self) -> int:
        if self.slices_per_sample is not None:
            return self.slices_per_sample
        return DEFAULT_SLICES.get(self.r, 2 * self.r + 1)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch."""
        return self.lr * (self.lr_decay if epoch > self.lr_decay_epoch else 1.0)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Models(torch.nn.Module):
    """The slice-wise net, the shared pixel-wise net and the memory bank."""

    def __init__(self, net_cfg: NetConfig, seed: int = 0):
        super().__init__()
        self.sint = build_sint(net_cfg, seed)
        self.pint = build_pint(net_cfg, seed + 1)
        self.memory = MemoryBank(net_cfg.memory_size, net_cfg.base_channels, seed + 2)

    @property
    def bank(self):
        return self.memory if self.sint.cfg.use_memory else None


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@torch.no_grad()
def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> None:
    """One bias-corrected Adam update, in place. Missing grads count as zero."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p.sub_(lr * m_hat / (v_hat.sqrt() + state.eps))


def central_region(shape, cfg: TrainConfig):
    """(y0, y1, x0, x1) of the central in-plane window crops are drawn from."""
    h, w = shape[:2]
    bounds = []
    for n in (h, w):
        size = max(cfg.patch, int(round(cfg.central_fraction * n)))
        start = (n - size) // 2
        bounds += [start, start + size]
    return tuple(bounds)


def sample_batch(volumes, cfg: TrainConfig, rng: np.random.Generator, return_origins=False):
    """Random patch x patch x slices crops from the central region, as (B, p, p, S)."""
    crops, origins = [], []
    for _ in range(cfg.batch_size):
        data = volumes[int(rng.integers(len(volumes)))]
        data = data.data if isinstance(data, Volume) else np.asarray(data)
        y0, y1, x0, x1 = central_region(data.shape, cfg)
        h, w, l = data.shape
        if y1 - y0 < cfg.patch or x1 - x0 < cfg.patch or y0 < 0 or x0 < 0 or l < cfg.slices:
            raise ValueError(f"volume of shape {data.shape} is smaller than the crop "
                             f"{cfg.patch}x{cfg.patch}x{cfg.slices}")
        y = y0 + int(rng.integers(y1 - y0 - cfg.patch + 1))
        x = x0 + int(rng.integers(x1 - x0 - cfg.patch + 1))
        z = int(rng.integers(l - cfg.slices + 1))
        crop = data[y:y + cfg.patch, x:x + cfg.patch, z:z + cfg.slices]
        if cfg.augment:
            crop = _augment(crop, rng)
        crops.append(crop)
        origins.append((y, x, z))
    batch = torch.from_numpy(np.stack(crops).astype(np.float32))
    return (batch, origins) if return_origins else batch


def _augment(crop, rng):
    flip_y, flip_x, flip_z, swap = rng.integers(2, size=4)
    crop = crop[::-1 if flip_y else 1, ::-1 if flip_x else 1, ::-1 if flip_z else 1]
    if swap:
        crop = crop.transpose(1, 0, 2)
    return np.ascontiguousarray(crop)


def incremental_interpolate(model_fn, v, r, n, crop_slices=None, truncate=False):
    """Apply ``model_fn`` n times, feeding each output back in.

    Returns the list of outputs of every pass. ``crop_slices`` trims each
    re-fed input to its central window of that many slices. ``v`` may be a
    tuple of volumes advanced in lockstep.
    """
    if n < 1:
        raise ValueError("need at least one pass")
    def prepare(x):
        if crop_slices is not None and x.shape[-1] > crop_slices:
            start = (x.shape[-1] - crop_slices) // 2
            x = x[..., start:start + crop_slices]
        return x.detach() if truncate else x

    outs = []
    cur = v
    for k in range(n):
        if k > 0:
            cur = tuple(map(prepare, cur)) if isinstance(cur, tuple) else prepare(cur)
        cur = model_fn(cur)
        outs.append(cur)
    return outs


def _named_params(models: Models):
    return dict(models.named_parameters())


def _internal_losses(models, batch, cfg, on_read):
    v_lr = batch[..., ::cfg.r]
    oa = sint_volume(models.sint, models.bank, v_lr, train_mode=True, on_read=on_read)
    oc, os = pint_views(models.pint, v_lr)
    return (internal_loss(oa, batch, "axial", cfg.use_wavelet),
            internal_loss(oc, batch, "coronal", cfg.use_wavelet),
            internal_loss(os, batch, "sagittal", cfg.use_wavelet))


def _cmd_losses(models, batch, cfg):
    crop = cfg.slices if cfg.incremental_crop else None
    pass_a = incremental_interpolate(lambda x: sint_volume(models.sint, models.bank, x), batch, cfg.r, cfg.N, crop, cfg.truncate_incremental)
    # the coronal and sagittal chains advance together so each pass is one batched network call
    pass_cs = incremental_interpolate(lambda xs: pint_views(models.pint, *xs), (batch, batch), cfg.r, cfg.N, crop, cfg.truncate_incremental)
    cmd_c, cmd_s = [], []
    for oa, (oc, os) in zip(pass_a, pass_cs):
        sel_c = select_consistent(oa, oc, cfg.gamma, cfg.cmd_mask_originals, cfg.r)
        sel_s = select_consistent(oa, os, cfg.gamma, cfg.cmd_mask_originals, cfg.r)
        cmd_c.append(cmd_loss(oa, oc, sel_c))
        cmd_s.append(cmd_loss(oa, os, sel_s))
    return cmd_c, cmd_s


def train_step(models: Models, batch, adam: AdamState, cfg: TrainConfig, lr: float, stage: int) -> LossReport:
    """One optimizer step; stage 2 adds the cross-view distillation terms."""
    reads = []
    models.zero_grad(set_to_none=True)
    la, lc, ls = _internal_losses(models, batch, cfg, lambda e3, res: reads.append((e3, res)))
    B = batch.shape[0]
    com = sep = torch.zeros((), dtype=batch.dtype)
    for e3, res in reads:
        c, s = regularizers(res, e3, models.memory, cfg.memory_alpha)
        com, sep = com + c / B, sep + s / B
    cmd_c, cmd_s = ([], [])
    if stage == 2 and cfg.use_cmd:
        cmd_c, cmd_s = _cmd_losses(models, batch, cfg)
    parts = LossReport(la, lc, ls, cmd_c, cmd_s, com, sep)
    loss = total_loss(parts, cfg.weights)
    ad.backward(loss)
    params = _named_params(models)
    adam_step(adam, params, {k: p.grad for k, p in params.items()}, lr)
    if models.bank is not None:
        models.memory.renormalize()
        for e3, res in reads:
            models.memory.apply_update(e3, res)
    f = lambda t: float(t.detach())  # noqa: E731
    report = LossReport(f(la), f(lc), f(ls), [f(x) for x in cmd_c], [f(x) for x in cmd_s], f(com), f(sep))
    report.total = float(total_loss(report, cfg.weights))
    return report


def stage1_step(batch, models, adam, cfg, lr):
    return train_step(models, batch, adam, cfg, lr, stage=1)


def stage2_step(batch, models, adam, cfg, lr):
    return train_step(models, batch, adam, cfg, lr, stage=2)


def save_checkpoint(path, models: Models, cfg: TrainConfig, adam: AdamState | None = None, step=0, epoch=0):
    tensors = dict(_named_params(models))
    if adam is not None:
        for name in tensors.copy():
            if name in adam.m:
                tensors[f"adam.m.{name}"] = adam.m[name]
                tensors[f"adam.v.{name}"] = adam.v[name]
    meta = {
        "config": cfg.to_dict(),
        "memory_shape": list(models.memory.M.shape),
        "step": step,
        "epoch": epoch,
        "adam_step": adam.step if adam is not None else 0,
    }
    save_tensors(path, tensors, meta)


def load_checkpoint(path):
    """-> (models, cfg, adam, meta)."""
    meta, tensors = load_tensors(path)
    cfg = TrainConfig.from_dict(meta["config"])
    models = Models(cfg.net, cfg.seed)
    params = _named_params(models)
    with torch.no_grad():
        for name, p in params.items():
            if name not in tensors:
                raise ValueError(f"{path}: missing tensor {name!r}")
            if tuple(tensors[name].shape) != tuple(p.shape):
                raise ValueError(f"{path}: tensor {name!r} has shape {tuple(tensors[name].shape)}, expected {tuple(p.shape)}")
            p.copy_(tensors[name])
    adam = AdamState(step=meta.get("adam_step", 0))
    for name in params:
        if f"adam.m.{name}" in tensors:
            adam.m[name] = tensors[f"adam.m.{name}"]
            adam.v[name] = tensors[f"adam.v.{name}"]
    return models, cfg, adam, meta


@dataclass
class TrainResult:
    models: Models
    cfg: TrainConfig
    history: list
    checkpoint: Path | None = None


def _volume_arrays(volumes):
    out = []
    for v in volumes:
        out.append(v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float32))
    if not out:
        raise ValueError("no training volumes")
    return out


def train(cfg: TrainConfig, volumes, out_dir=None, resume=None, on_step=None) -> TrainResult:
    """Run stage-1 epochs then stage-2 epochs.

    With ``out_dir``, writes ``init.ckpt``, one checkpoint per epoch,
    ``last.ckpt`` and ``train_log.jsonl``. ``resume`` continues from a
    checkpoint, keeping its step count and optimizer moments.
    """
    arrays = _volume_arrays(volumes)
    torch.manual_seed(cfg.seed)
    if resume is not None:
        models, _, adam, meta = load_checkpoint(resume)
        step, start_epoch = int(meta["step"]), int(meta["epoch"])
    else:
        models, adam, step, start_epoch = Models(cfg.net, cfg.seed), AdamState(), 0, 0
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume is None:
            save_checkpoint(out / "init.ckpt", models, cfg, adam, step, 0)
        log_fh = open(out / "train_log.jsonl", "a")
    steps_per_epoch = cfg.steps_per_epoch or max(1, len(arrays) // cfg.batch_size)
    history = []
    last = out / "last.ckpt" if out is not None else None
    try:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            stage = 1 if epoch <= cfg.stage1_epochs else 2
            lr = cfg.lr_at(epoch)
            rng = np.random.default_rng([cfg.seed, epoch])
            for _ in range(steps_per_epoch):
                t0 = time.perf_counter()
                batch = sample_batch(arrays, cfg, rng)
                try:
                    report = train_step(models, batch, adam, cfg, lr, stage)
                except NonFiniteLossError as exc:
                    raise TrainingDivergedError(f"epoch {epoch}, step {step + 1}: {exc}") from exc
                step += 1
                if not math.isfinite(report.total):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}: {report.to_dict()}")
                entry = {"epoch": epoch, "step": step, "stage": stage, "lr": lr, **report.to_dict(),
                         "wall_time": time.perf_counter() - t0}
                history.append(entry)
                if log_fh is not None:
                    log_fh.write(json.dumps(entry) + "\n")
                if on_step is not None:
                    on_step(entry)
            if out is not None:
                save_checkpoint(out / f"epoch_{epoch:03d}.ckpt", models, cfg, adam, step, epoch)
                save_checkpoint(last, models, cfg, adam, step, epoch)
        if out is not None and not last.exists():
            save_checkpoint(last, models, cfg, adam, step, start_epoch)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(models, cfg, history, last)


@dataclass
class Inference:
    axial: Volume
    coronal: Volume
    sagittal: Volume
    fused: Volume | None


def _pad_to_multiple(x, k):
    h, w = x.shape[1:3]
    ph, pw = (-h) % k, (-w) % k
    if ph or pw:
        x = torch.nn.functional.pad(x.permute(0, 3, 1, 2), (0, pw, 0, ph), mode="replicate").permute(0, 2, 3, 1)
    return x, h, w


@torch.no_grad()
def infer(models, v: Volume, r: int | None = None, do_fuse: bool = True, passes: int = 1,
          include_axial_at_originals: bool = False) -> Inference:
    """Upsample ``v`` along z by the models' factor; ``passes`` > 1 re-applies each model."""
    if isinstance(models, (str, Path)):
        models, cfg, _, _ = load_checkpoint(models)
        include_axial_at_originals = include_axial_at_originals or cfg.fusion_include_axial_at_originals
    net_r = models.sint.cfg.r
    if r is not None and r != net_r:
        raise ValueError(f"checkpoint was trained for r={net_r}, asked for r={r}")
    if v.shape[2] < 2:
        raise ValueError("need at least two slices")
    x = torch.from_numpy(np.array(v.data, dtype=np.float32))[None]
    x, h, w = _pad_to_multiple(x, models.sint.cfg.s2d_block)
    oa, oc, os = x, x, x
    for _ in range(passes):
        oa = sint_volume(models.sint, models.bank, oa)
        oc = pint_volume(models.pint, oc, "coronal")
        os = pint_volume(models.pint, os, "sagittal")
    sy, sx, sz = v.spacing
    spacing = (sy, sx, sz / net_r ** passes)

    def wrap(t):
        return Volume(t[0, :h, :w].numpy(), spacing, v.intensity_range).clamped()

    va, vc, vs = wrap(oa), wrap(oc), wrap(os)
    fused = fuse(va, vc, vs, net_r ** passes, include_axial_at_originals).clamped() if do_fuse else None
    return Inference(va, vc, vs, fused)
