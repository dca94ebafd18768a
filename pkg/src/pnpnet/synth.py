"""Synthetic volumetric datasets with three boundary-confusion regimes.

Regime A: adjacent ellipsoidal regions of near-equal intensity, interfaces
blurred and littered with bright patches (unclear or noisy boundaries).
Regime B: fixed anatomy whose label interface is displaced per sample by a
smooth random field (annotator-disagreement proxy).
Regime C: stacked slabs with identical texture but distinct labels
(similar appearance, different class).

Every random draw comes from a counter-based generator keyed by
(spec.seed, sample index), so samples are reproducible independently of
generation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volumes import VolumeSample

REGIMES = ("A", "B", "C")


class ConfigError(ValueError):
    pass


@dataclass
class GenSpec:
    regime: str = "A"
    dims: tuple = (32, 32, 32)
    n_classes: int = 3
    count: int = 1
    sigma_b: float = 1.0          # interface blur width, voxels
    noise: float = 0.05           # uniform intensity noise amplitude
    patch_count: int = 8          # regime A bright patches
    patch_intensity: float = 0.30
    jitter: float = 2.0           # regime B interface displacement, voxels
    slabs: int = 0                # regime C; 0 means n_classes - 1
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError("regime must be one of %r, got %r" % (REGIMES, self.regime))
        if any(d % 16 != 0 for d in self.dims):
            raise ConfigError("dims must be divisible by 16, got %r" % (self.dims,))
        if self.sigma_b < 0:
            raise ConfigError("sigma_b must be >= 0")
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.slabs == 0:
            self.slabs = self.n_classes - 1
        if self.slabs >= self.n_classes:
            raise ConfigError("slab count %d needs n_classes > %d" % (self.slabs, self.slabs))


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream: key is the dataset seed, counter the sample index."""
    return np.random.Generator(np.random.Philox(key=seed, counter=[index, 0, 0, 0]))


def _grids(dims):
    return np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")


def _finish(clean, label, spec, rng, patches=True):
    """Blur the clean intensity field, add interface patches and noise."""
    img = clean
    if spec.sigma_b > 0:
        img = ndimage.gaussian_filter(img, sigma=spec.sigma_b, mode="nearest")
    if patches and spec.patch_count > 0:
        img = img + _interface_patches(label, spec, rng)
    img = img + rng.uniform(-spec.noise, spec.noise, size=spec.dims)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def interface_mask(label):
    """Voxels adjacent (6-neighborhood) to a different foreground class."""
    mask = np.zeros(label.shape, dtype=bool)
    for ax in range(3):
        a = np.take(label, range(label.shape[ax] - 1), axis=ax)
        b = np.take(label, range(1, label.shape[ax]), axis=ax)
        diff = (a != b) & (a > 0) & (b > 0)
        idx = [slice(None)] * 3
        idx[ax] = slice(0, label.shape[ax] - 1)
        mask[tuple(idx)] |= diff
        idx[ax] = slice(1, label.shape[ax])
        mask[tuple(idx)] |= diff
    return mask


def _interface_patches(label, spec, rng):
    """Bright blobs centered within 2 voxels of the inter-class interface."""
    near = ndimage.distance_transform_edt(~interface_mask(label)) <= 2.0
    sites = np.argwhere(near)
    bump = np.zeros(spec.dims, dtype=np.float64)
    if sites.shape[0] == 0:
        return bump
    zz, yy, xx = _grids(spec.dims)
    picks = rng.integers(0, sites.shape[0], size=spec.patch_count)
    for p in picks:
        cz, cy, cx = sites[p]
        r2 = (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2
        bump += spec.patch_intensity * np.exp(-r2 / (2.0 * 1.2 ** 2))
    return bump


# ---------------------------------------------------------------------------
# regime A: blurred, patchy interfaces between near-equal regions

def _regime_a(spec, rng):
    dims = np.asarray(spec.dims, dtype=np.float64)
    zz, yy, xx = _grids(spec.dims)
    center = dims / 2.0 + rng.uniform(-2.0, 2.0, size=3)
    radii = dims * rng.uniform(0.30, 0.38, size=3)
    inside = (((zz - center[0]) / radii[0]) ** 2
              + ((yy - center[1]) / radii[1]) ** 2
              + ((xx - center[2]) / radii[2]) ** 2) <= 1.0

    # split the ellipsoid into adjacent regions by tilted planes; the normal
    # is biased toward +z so the class order along the split axis is a
    # consistent, learnable rule (lowest region is always class 1)
    n_fg = spec.n_classes - 1
    normal = rng.normal(size=3)
    normal[0] = np.abs(normal[0]) + 1.0
    normal /= np.linalg.norm(normal)
    proj = (zz - center[0]) * normal[0] + (yy - center[1]) * normal[1] \
        + (xx - center[2]) * normal[2]
    label = np.zeros(spec.dims, dtype=np.uint8)
    if n_fg == 1:
        label[inside] = 1
    else:
        cuts = np.quantile(proj[inside], np.linspace(0, 1, n_fg + 1)[1:-1])
        region = np.digitize(proj, cuts)
        label[inside] = (region[inside] + 1).astype(np.uint8)

    means = 0.55 + rng.uniform(-0.02, 0.02, size=spec.n_classes)
    means[0] = 0.25
    clean = means[label]
    return _finish(clean, label, spec, rng, patches=True), label


# ---------------------------------------------------------------------------
# regime B: fixed geometry, per-sample jittered label interface

def _canonical_b(spec):
    """Shared anatomy: an ellipsoid split by a fixed wavy surface in z."""
    zz, yy, xx = _grids(spec.dims)
    dims = np.asarray(spec.dims, dtype=np.float64)
    center = dims / 2.0
    radii = dims * 0.36
    inside = (((zz - center[0]) / radii[0]) ** 2
              + ((yy - center[1]) / radii[1]) ** 2
              + ((xx - center[2]) / radii[2]) ** 2) <= 1.0
    surface = center[0] + 1.5 * np.sin(2.0 * np.pi * yy[0] / dims[1]) \
        + 1.0 * np.cos(2.0 * np.pi * xx[0] / dims[2])
    return inside, surface, zz


def jitter_field(spec, index):
    """Smooth per-sample displacement of the interface, |field| <= jitter."""
    rng = sample_rng(spec.seed, index)
    rng.uniform(size=16)  # decorrelate from the image-noise draws below
    ny, nx = spec.dims[1], spec.dims[2]
    y = np.arange(ny)[:, None] / ny
    x = np.arange(nx)[None, :] / nx
    f = np.zeros((ny, nx))
    for _ in range(3):
        fy, fx = rng.integers(1, 3, size=2)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        f += rng.normal() * np.sin(2 * np.pi * fy * y + py) * np.sin(2 * np.pi * fx * x + px)
    peak = np.abs(f).max()
    if peak > 0:
        f *= spec.jitter * rng.uniform(0.6, 1.0) / peak
    return f


def _regime_b(spec, rng, index):
    inside, surface, zz = _canonical_b(spec)
    shifted = surface + jitter_field(spec, index)
    label = np.zeros(spec.dims, dtype=np.uint8)
    below = zz <= shifted[None, :, :]
    label[inside & below] = 1
    if spec.n_classes > 2:
        label[inside & ~below] = 2

    # image reflects the canonical interface, not the jittered labels
    canon = np.zeros(spec.dims, dtype=np.uint8)
    canon_below = zz <= surface[None, :, :]
    canon[inside & canon_below] = 1
    if spec.n_classes > 2:
        canon[inside & ~canon_below] = 2
    means = np.full(spec.n_classes, 0.55)
    means[0] = 0.25
    means[2:] = 0.60
    clean = means[canon]
    return _finish(clean, label, spec, rng, patches=False), label


def regime_b_band(spec):
    """Voxels a jittered interface may touch; labels agree everywhere else."""
    inside, surface, zz = _canonical_b(spec)
    pad = spec.jitter + 1.0  # one voxel of discretization slack
    return inside & (np.abs(zz - surface[None, :, :]) <= pad)


# ---------------------------------------------------------------------------
# regime C: identically textured slabs, distinct labels

def _regime_c(spec, rng):
    d = spec.dims[0]
    margin = 2
    edges = np.linspace(margin, d - margin, spec.slabs + 1).round().astype(int)
    label = np.zeros(spec.dims, dtype=np.uint8)
    clean = np.full(spec.dims, 0.25)
    for k in range(spec.slabs):
        sl = slice(edges[k], edges[k + 1])
        label[sl] = k + 1
        clean[sl] = 0.55
    # thin dark seams so the slabs are separable at all; interiors identical
    for e in edges[1:-1]:
        clean[e - 1:e + 1] *= 0.55
    return _finish(clean, label, spec, rng, patches=False), label


# ---------------------------------------------------------------------------

def generate_one(spec: GenSpec, index: int) -> VolumeSample:
    rng = sample_rng(spec.seed, index)
    if spec.regime == "A":
        image, label = _regime_a(spec, rng)
    elif spec.regime == "B":
        image, label = _regime_b(spec, rng, index)
    else:
        image, label = _regime_c(spec, rng)
    return VolumeSample(image=image, label=label, spacing=spec.spacing)


def generate(spec: GenSpec):
    """All samples for a spec; a pure function of the spec's fields."""
    return [generate_one(spec, i) for i in range(spec.count)]
