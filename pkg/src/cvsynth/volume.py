"""Volume data model, view decomposition, degradation, fusion, phantoms and `.cvol` I/O.

Array layout is ``data[y, x, z]`` with shape ``(h, w, l)``. Formulas that talk
about slice positions use 1-based indices; storage is 0-based, so "slice k"
(1-based) lives at ``data[:, :, k - 1]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

VIEWS = ("axial", "coronal", "sagittal")
DEGRADATION_MODES = ("direct_subsample", "blur_noise")
PHANTOM_KINDS = ("ellipsoids", "bandlimited_noise", "layered_sine")


class VolumeFormatError(ValueError):
    """Raised for malformed, truncated or non-finite `.cvol` files."""


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    intensity_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D grid, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite voxels")
        lo, hi = (float(v) for v in self.intensity_range)
        if not lo < hi:
            raise ValueError(f"intensity_range must satisfy lo < hi, got {(lo, hi)}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "intensity_range", (lo, hi))

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data, spacing=None) -> "Volume":
        return Volume(data, self.spacing if spacing is None else spacing, self.intensity_range)

    def clamped(self) -> "Volume":
        lo, hi = self.intensity_range
        return self.with_data(np.clip(self.data, lo, hi))


@dataclass(frozen=True)
class ViewImage:
    data: np.ndarray
    view: str
    index: int

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}")
        if np.ndim(self.data) != 2:
            raise ValueError("view image must be 2D")
        if self.index < 1:
            raise ValueError("view image index is 1-based")


@dataclass(frozen=True)
class DegradationSpec:
    mode: str = "direct_subsample"
    factor: int = 2
    blur_sigma: float | None = None  # slices; defaults to factor / 2
    noise_sigma: float = 0.01  # fraction of the intensity range
    seed: int = 0

    def __post_init__(self):
        if self.mode not in DEGRADATION_MODES:
            raise ValueError(f"unknown degradation mode {self.mode!r}")
        if int(self.factor) != self.factor or self.factor < 2:
            raise ValueError("degradation factor r must be an integer >= 2")
        if self.blur_sigma is not None and self.blur_sigma <= 0:
            raise ValueError("blur_sigma must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def effective_blur_sigma(self) -> float:
        return self.factor / 2.0 if self.blur_sigma is None else float(self.blur_sigma)


def decompose(v: Volume, view: str) -> list[ViewImage]:
    """Split a volume into its axial (h x w), coronal (w x l) or sagittal (h x l) images."""
    if view == "axial":
        planes = [v.data[:, :, k] for k in range(v.shape[2])]
    elif view == "coronal":
        planes = [v.data[j, :, :] for j in range(v.shape[0])]
    elif view == "sagittal":
        planes = [v.data[:, k, :] for k in range(v.shape[1])]
    else:
        raise ValueError(f"unknown view {view!r}")
    return [ViewImage(p.copy(), view, i + 1) for i, p in enumerate(planes)]


def restack(images: Sequence[ViewImage], spacing=(1.0, 1.0, 1.0), intensity_range=(0.0, 1.0)) -> Volume:
    """Inverse of :func:`decompose`. Images may arrive in any order."""
    if not images:
        raise ValueError("no images to restack")
    views = {im.view for im in images}
    if len(views) != 1:
        raise ValueError(f"mixed views: {sorted(views)}")
    shapes = {np.shape(im.data) for im in images}
    if len(shapes) != 1:
        raise ValueError(f"mixed image shapes: {sorted(shapes)}")
    ordered = sorted(images, key=lambda im: im.index)
    indices = [im.index for im in ordered]
    if indices != list(range(1, len(ordered) + 1)):
        raise ValueError(f"image indices must form 1..{len(ordered)} without gaps, got {indices}")
    axis = {"axial": 2, "coronal": 0, "sagittal": 1}[views.pop()]
    data = np.stack([np.asarray(im.data) for im in ordered], axis=axis)
    return Volume(data, spacing, intensity_range)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def blur_z(data: np.ndarray, sigma: float) -> np.ndarray:
    """1-D Gaussian blur along z; kernel cut at 3 sigma, edge-replicate padding."""
    k = _gaussian_kernel(sigma)
    radius = len(k) // 2
    padded = np.pad(np.asarray(data, dtype=np.float64), ((0, 0), (0, 0), (radius, radius)), mode="edge")
    out = np.zeros(data.shape, dtype=np.float64)
    l = data.shape[2]
    for i, w in enumerate(k):
        out += w * padded[:, :, i:i + l]
    return out


def degrade(v: Volume, spec: DegradationSpec) -> Volume:
    """Build a low-resolution volume keeping slices 1, r+1, 2r+1, ... (1-based)."""
    r = spec.factor
    if v.shape[2] < r:
        raise ValueError(f"volume has {v.shape[2]} slices, fewer than the factor r={r}")
    lo, hi = v.intensity_range
    spacing = (v.spacing[0], v.spacing[1], v.spacing[2] * r)
    if spec.mode == "direct_subsample":
        return Volume(v.data[:, :, ::r], spacing, v.intensity_range)
    data = blur_z(v.data, spec.effective_blur_sigma)[:, :, ::r]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        data = data + rng.normal(0.0, spec.noise_sigma * (hi - lo), size=data.shape)
    return Volume(np.clip(data, lo, hi), spacing, v.intensity_range)


def upsampled_length(l: int, r: int) -> int:
    return r * l - r + 1


def fuse(oa: Volume, oc: Volume, os: Volume, r: int, include_axial_at_originals: bool = False) -> Volume:
    """Voxelwise ensemble of the three view outputs.

    At original slice positions (1-based z with z mod r == 1) only the coronal
    and sagittal outputs are averaged unless ``include_axial_at_originals``.
    """
    if not (oa.shape == oc.shape == os.shape):
        raise ValueError(f"shape mismatch: {oa.shape}, {oc.shape}, {os.shape}")
    if (oa.shape[2] - 1) % r != 0:
        raise ValueError(f"slice count {oa.shape[2]} is not of the form r*l-r+1 for r={r}")
    a = oa.data.astype(np.float64)
    c = oc.data.astype(np.float64)
    s = os.data.astype(np.float64)
    out = (a + c + s) / 3.0
    if not include_axial_at_originals:
        out[:, :, ::r] = (c[:, :, ::r] + s[:, :, ::r]) / 2.0
    return Volume(out, oa.spacing, oa.intensity_range)


def make_phantom(kind: str, shape, seed: int = 0, amplitude: float | None = None, max_z_freq: float = 0.1) -> Volume:
    """Procedural stand-in for a CT volume with intensities in [0, 1].

    Every kind is smooth along z: its z spectrum sits below ``max_z_freq``
    cycles/slice (0.1 keeps r <= 4 subsampling above Nyquist) or, for
    ellipsoids, is Gaussian-damped.
    """
    h, w, l = (int(s) for s in shape)
    if min(h, w, l) < 1:
        raise ValueError(f"phantom shape must be positive, got {shape}")
    rng = np.random.default_rng(seed)
    y, x, z = np.meshgrid(np.arange(h), np.arange(w), np.arange(l), indexing="ij")
    if kind == "layered_sine":
        amp = 0.45 if amplitude is None else float(amplitude)
        acc = np.zeros((h, w, l))
        n_layers = 4
        for _ in range(n_layers):
            fy, fx = rng.uniform(-0.12, 0.12, size=2)
            fz = rng.uniform(0.02, max_z_freq)
            phase = rng.uniform(0, 2 * np.pi)
            acc += np.sin(2 * np.pi * (fy * y + fx * x + fz * z) + phase)
        data = 0.5 + amp * acc / n_layers
    elif kind == "bandlimited_noise":
        amp = 0.45 if amplitude is None else float(amplitude)
        spec = rng.normal(size=(h, w, l)) + 1j * rng.normal(size=(h, w, l))
        fy = np.fft.fftfreq(h)[:, None, None]
        fx = np.fft.fftfreq(w)[None, :, None]
        fz = np.fft.fftfreq(l)[None, None, :]
        spec *= (np.abs(fz) <= max_z_freq) * (np.hypot(fy, fx) <= 0.2)
        field_ = np.real(np.fft.ifftn(spec))
        scale = np.abs(field_).max()
        data = 0.5 + amp * (field_ / scale if scale > 0 else field_)
    elif kind == "ellipsoids":
        data = np.full((h, w, l), 0.1)
        n = 6
        for _ in range(n):
            c = rng.uniform(0.2, 0.8, size=3) * (h, w, l)
            radii = rng.uniform(0.12, 0.35, size=3) * (h, w, l) + 1.0
            dist = ((y - c[0]) / radii[0]) ** 2 + ((x - c[1]) / radii[1]) ** 2 + ((z - c[2]) / radii[2]) ** 2
            inside = 1.0 / (1.0 + np.exp((np.sqrt(dist) - 1.0) * 8.0))
            data = data + rng.uniform(-0.3, 0.5) * inside
        data = blur_z(data, 1.5)
        if amplitude is not None:
            data = 0.5 + amplitude * (data - 0.5)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    return Volume(np.clip(data, 0.0, 1.0), (1.0, 1.0, 1.0), (0.0, 1.0))


def write_volume(v: Volume, path) -> None:
    """Write a `.cvol`: one JSON header line, then f32le voxels in z, y, x order."""
    h, w, l = v.shape
    header = {
        "h": h, "w": w, "l": l,
        "sy": v.spacing[0], "sx": v.spacing[1], "sz": v.spacing[2],
        "lo": v.intensity_range[0], "hi": v.intensity_range[1],
        "dtype": "f32le",
    }
    lo, hi = v.intensity_range
    payload = np.clip(v.data, lo, hi).transpose(2, 0, 1).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise VolumeFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
        h, w, l = (int(header[k]) for k in ("h", "w", "l"))
        spacing = (float(header["sy"]), float(header["sx"]), float(header["sz"]))
        rng_ = (float(header["lo"]), float(header["hi"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise VolumeFormatError(f"{path}: malformed header ({exc})") from exc
    if header.get("dtype") != "f32le":
        raise VolumeFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    if min(h, w, l) < 1:
        raise VolumeFormatError(f"{path}: non-positive dimensions {(h, w, l)}")
    payload = raw[nl + 1:]
    expected = 4 * h * w * l
    if len(payload) != expected:
        raise VolumeFormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(l, h, w).transpose(1, 2, 0)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{path}: payload contains non-finite voxels")
    try:
        return Volume(data, spacing, rng_)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from exc
