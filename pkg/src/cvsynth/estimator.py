"""scikit-learn style wrapper around training and inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .networks import NetConfig
from .training import TrainConfig, infer, train
from .volume import Volume


def check_volume(X, name="X") -> Volume:
    """Accept a Volume or a 3-D array-like; return a Volume."""
    if isinstance(X, Volume):
        return X
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be a 3-D volume (h, w, l), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return Volume(arr)


def check_volumes(X) -> list[Volume]:
    """A single volume or a sequence of volumes -> list of Volumes."""
    if isinstance(X, Volume) or (isinstance(X, np.ndarray) and X.ndim == 3):
        return [check_volume(X)]
    vols = [check_volume(x, f"X[{i}]") for i, x in enumerate(X)]
    if not vols:
        raise ValueError("no volumes given")
    return vols


class SliceInterpolator(TransformerMixin, BaseEstimator):
    """Self-supervised z-axis upsampler.

    ``fit`` takes low-resolution volumes only. ``transform`` returns each
    volume upsampled to ``r*l - r + 1`` slices (fused output by default).
    """

    def __init__(self, r=2, gamma=0.40, N=2, m=10, epochs=50, stage1_epochs=10, steps_per_epoch=None,
                 batch_size=4, lr=1e-4, patch=32, base_channels=32, blocks_per_group=3, s2d_block=4,
                 use_cmd=True, output="fused", seed=0):
        self.r = r
        self.gamma = gamma
        self.N = N
        self.m = m
        self.epochs = epochs
        self.stage1_epochs = stage1_epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.lr = lr
        self.patch = patch
        self.base_channels = base_channels
        self.blocks_per_group = blocks_per_group
        self.s2d_block = s2d_block
        self.use_cmd = use_cmd
        self.output = output
        self.seed = seed

    def _config(self) -> TrainConfig:
        net = NetConfig(base_channels=self.base_channels, blocks_per_group=self.blocks_per_group,
                        s2d_block=self.s2d_block)
        return TrainConfig(r=self.r, gamma=self.gamma, N=self.N, m=self.m, epochs=self.epochs,
                           stage1_epochs=min(self.stage1_epochs, self.epochs) or 1,
                           steps_per_epoch=self.steps_per_epoch, batch_size=self.batch_size, lr=self.lr,
                           lr_decay_epoch=self.stage1_epochs, patch=self.patch, use_cmd=self.use_cmd,
                           seed=self.seed, net=net)

    def fit(self, X, y=None):
        if self.output not in ("fused", "axial", "coronal", "sagittal"):
            raise ValueError(f"unknown output {self.output!r}")
        cfg = self._config()
        result = train(cfg, check_volumes(X))
        self.models_ = result.models
        self.config_ = cfg
        self.history_ = result.history
        return self

    def transform(self, X):
        check_is_fitted(self, "models_")
        single = isinstance(X, Volume) or (isinstance(X, np.ndarray) and X.ndim == 3)
        outs = []
        for v in check_volumes(X):
            res = infer(self.models_, v, do_fuse=self.output == "fused")
            outs.append(getattr(res, self.output).data)
        return outs[0] if single else outs

    predict = transform
