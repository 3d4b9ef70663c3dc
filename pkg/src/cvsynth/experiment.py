"""Desk-scale self-supervision experiment on procedural phantoms.

Training sees only low-resolution volumes; high-resolution phantoms are used
for scoring alone.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .metrics import baseline_interpolate, psnr, ssim_view
from .networks import NetConfig
from .training import TrainConfig, infer, train
from .volume import DegradationSpec, degrade, make_phantom

PHANTOM_SHAPE = (48, 48, 33)


def experiment_config(seed=7, r=2, stage1_steps=300, stage2_steps=300, steps_per_epoch=30, **overrides) -> TrainConfig:
    """Tiny-network config with stage lengths given in optimizer steps."""
    if stage1_steps % steps_per_epoch or stage2_steps % steps_per_epoch:
        raise ValueError("stage lengths must be multiples of steps_per_epoch")
    s1 = stage1_steps // steps_per_epoch
    s2 = stage2_steps // steps_per_epoch
    net = overrides.pop("net", NetConfig(
        base_channels=32, blocks_per_group=3, s2d_block=4, pint_z_pad=3, center_inputs=True, pint_bias=False))
    params = dict(
        r=r, seed=seed, epochs=s1 + s2, stage1_epochs=s1, steps_per_epoch=steps_per_epoch,
        lr_decay_epoch=s1, central_fraction=0.75, batch_size=2, augment=True, net=net,
    )
    params.update(overrides)
    return TrainConfig(**params)


def phantom_split(seed=7, shape=PHANTOM_SHAPE, n_train=8, n_test=2):
    """Alternating layered_sine / ellipsoids phantoms; seeds never overlap between splits."""
    kinds = ("layered_sine", "ellipsoids")
    train_hr = [make_phantom(kinds[i % 2], shape, seed=1000 * seed + i) for i in range(n_train)]
    test_hr = [make_phantom(kinds[i % 2], shape, seed=1000 * seed + 500 + i) for i in range(n_test)]
    return train_hr, test_hr


@dataclass
class ExperimentResult:
    seed: int
    history: list
    psnr_fused: float
    psnr_axial: float
    psnr_coronal: float
    psnr_sagittal: float
    psnr_linear: float
    psnr_nearest: float
    ssim_fused: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def initial_loss(self):
        return self.history[0]["total"]

    @property
    def final_loss(self):
        return self.history[-1]["total"]

    @property
    def losses(self):
        return np.array([h["total"] for h in self.history])


def run_experiment(seed=7, cfg: TrainConfig | None = None, on_step=None) -> ExperimentResult:
    cfg = cfg or experiment_config(seed)
    spec = DegradationSpec(mode="direct_subsample", factor=cfg.r)
    train_hr, test_hr = phantom_split(seed)
    train_lr = [degrade(v, spec) for v in train_hr]
    t0 = time.perf_counter()
    result = train(cfg, train_lr, on_step=on_step)
    seconds = time.perf_counter() - t0
    scores = {k: [] for k in ("fused", "axial", "coronal", "sagittal", "linear", "nearest")}
    ssim = {"a": [], "c": [], "s": []}
    for hr in test_hr:
        lr = degrade(hr, spec)
        out = infer(result.models, lr, include_axial_at_originals=cfg.fusion_include_axial_at_originals)
        scores["fused"].append(psnr(out.fused, hr))
        scores["axial"].append(psnr(out.axial, hr))
        scores["coronal"].append(psnr(out.coronal, hr))
        scores["sagittal"].append(psnr(out.sagittal, hr))
        scores["linear"].append(psnr(baseline_interpolate(lr, cfg.r, "linear"), hr))
        scores["nearest"].append(psnr(baseline_interpolate(lr, cfg.r, "nearest"), hr))
        for key, view in (("a", "axial"), ("c", "coronal"), ("s", "sagittal")):
            ssim[key].append(ssim_view(out.fused, hr, view))
    mean = {k: float(np.mean(v)) for k, v in scores.items()}
    return ExperimentResult(
        seed=seed, history=result.history,
        psnr_fused=mean["fused"], psnr_axial=mean["axial"], psnr_coronal=mean["coronal"],
        psnr_sagittal=mean["sagittal"], psnr_linear=mean["linear"], psnr_nearest=mean["nearest"],
        ssim_fused={k: float(np.mean(v)) for k, v in ssim.items()}, seconds=seconds,
    )
