"""Hierarchical distance-field algebra: mean-kernel high-pass residual
targets, Sobel-based normal carving, and final field composition.

The field is refined in three additive levels: a base field, a fine
residual whose regression target is d - (d convolved with a k^3 mean
kernel), and a normal-guided carve that adds a 2D displacement map to the
front and back halves of each grid column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CropAlignedCamera, Image, ScalarField3, bilinear_sample


@dataclass
class MeanKernel:
    """Uniform k^3 box kernel, weights 1/k^3. k odd."""

    k: int = 5

    def __post_init__(self):
        self.k = int(self.k)
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError("kernel size must be odd and >= 1")


@dataclass
class SobelKernel7:
    """7x7 derivative kernels: binomial smoothing x binomial derivative.

    s = [1,6,15,20,15,6,1], v = [-1,-4,-5,0,5,4,1]; G_x[y, x] = s[y] v[x],
    scaled so the sliding-inner-product response to a unit-slope ramp is
    exactly 1. G_y is the transpose.
    """

    def __post_init__(self):
        self.smooth = np.array([1.0, 6.0, 15.0, 20.0, 15.0, 6.0, 1.0])
        self.deriv = np.array([-1.0, -4.0, -5.0, 0.0, 5.0, 4.0, 1.0])
        offs = np.arange(-3.0, 4.0)
        # ramp gain = sum(s) * sum(v[x] * x)
        self.norm = float(self.smooth.sum() * (self.deriv * offs).sum())

    def gx(self) -> np.ndarray:
        return np.outer(self.smooth, self.deriv) / self.norm

    def gy(self) -> np.ndarray:
        return np.outer(self.deriv, self.smooth) / self.norm


@dataclass
class CarveGain:
    """Carve amplitude in voxels per unit Sobel response."""

    lam: float = 1.0

    def __post_init__(self):
        self.lam = float(self.lam)
        if self.lam < 0:
            raise ValueError("gain must be nonnegative")


def mean_convolve3(field: ScalarField3, kernel: MeanKernel = None) -> ScalarField3:
    """k^3 box mean with edge replication; separable shifted sums."""
    kernel = kernel or MeanKernel()
    k = kernel.k
    if k > min(field.dims):
        raise ValueError(f"kernel size {k} exceeds a grid dimension {field.dims}")
    r = k // 2
    v = np.pad(field.values, r, mode="edge")
    for axis in range(3):
        length = v.shape[axis] - 2 * r
        idx = [slice(None)] * 3
        acc = None
        for s in range(k):
            idx[axis] = slice(s, s + length)
            sl = v[tuple(idx)]
            acc = sl.copy() if acc is None else acc + sl
        v = acc / k
    return field.copy_with(v)


def highpass_target(field: ScalarField3, kernel: MeanKernel = None) -> ScalarField3:
    """Residual d - (d x mean); the fine level's regression target."""
    low = mean_convolve3(field, kernel)
    return field.copy_with(field.values - low.values)


def _correlate2d_replicate(channel: np.ndarray, kern: np.ndarray) -> np.ndarray:
    """Sliding inner product with edge-replicated borders, hand-rolled."""
    kh, kw = kern.shape
    ry, rx = kh // 2, kw // 2
    p = np.pad(channel, ((ry, ry), (rx, rx)), mode="edge")
    h, w = channel.shape
    out = np.zeros((h, w), dtype=np.float64)
    for dy in range(kh):
        for dx in range(kw):
            wgt = kern[dy, dx]
            if wgt != 0.0:
                out += wgt * p[dy : dy + h, dx : dx + w]
    return out


def normal_displacement(
    nm: Image, kernel: SobelKernel7 = None, gain: CarveGain = None
) -> Image:
    """Displacement map lam * (G_x on n_x + G_y on n_y), divergence style.

    Background pixels (zero normal) output 0 regardless of neighbors.
    """
    kernel = kernel or SobelKernel7()
    gain = gain if gain is not None else CarveGain()
    px = np.asarray(nm.pixels, dtype=np.float64)
    nx, ny = px[:, :, 0], px[:, :, 1]
    resp = _correlate2d_replicate(nx, kernel.gx()) + _correlate2d_replicate(ny, kernel.gy())
    resp *= gain.lam
    covered = np.linalg.norm(px[:, :, :3], axis=2) > 0
    resp[~covered] = 0.0
    return Image(resp[:, :, None])


def _column_crossing_mid(values: np.ndarray, zs: np.ndarray):
    """Per-column (i, j) front/back zero-crossing midpoint along z.

    Returns (has_crossing (nx, ny) bool, mid_z (nx, ny) float). A node at
    exactly 0 counts as inside so on-surface nodes register.
    """
    inside = values <= 0.0
    flips = inside[:, :, :-1] != inside[:, :, 1:]
    has = flips.any(axis=2)
    nz = values.shape[2]
    first = np.argmax(flips, axis=2)
    last = nz - 2 - np.argmax(flips[:, :, ::-1], axis=2)

    def interp_z(seg):
        v0 = np.take_along_axis(values, seg[:, :, None], axis=2)[:, :, 0]
        v1 = np.take_along_axis(values, seg[:, :, None] + 1, axis=2)[:, :, 0]
        denom = v0 - v1
        t = np.where(np.abs(denom) > 0, v0 / np.where(denom == 0, 1.0, denom), 0.0)
        return zs[seg] + t * (zs[1] - zs[0])

    z_front = interp_z(first)
    z_back = interp_z(last)
    return has, 0.5 * (z_front + z_back)


def carve_normals(
    field: ScalarField3,
    front_nm: Image,
    back_nm: Image,
    camera: CropAlignedCamera,
    kernel: SobelKernel7 = None,
    gain: CarveGain = None,
) -> ScalarField3:
    """Add front/back normal-map displacements to the two halves of each
    grid column, split at the per-column midpoint between the first and
    last zero crossings. Columns without a crossing are left unchanged.

    Displacement is in voxels (gain.lam per unit Sobel response) and is
    converted to field units via the grid's mean node spacing.
    """
    if front_nm.pixels.shape != back_nm.pixels.shape:
        raise ValueError("front and back maps must share shape")
    if (camera.width, camera.height) != (front_nm.width, front_nm.height):
        raise ValueError("camera image size must match the normal maps")
    if not (
        np.allclose(field.box_min, camera.box_min, atol=1e-6)
        and np.allclose(field.box_max, camera.box_max, atol=1e-6)
    ):
        raise ValueError("field box and camera box must coincide")
    kernel = kernel or SobelKernel7()
    gain = gain if gain is not None else CarveGain()

    front_disp = normal_displacement(front_nm, kernel, gain).pixels[:, :, 0].astype(np.float64)
    back_disp = normal_displacement(back_nm, kernel, gain).pixels[:, :, 0].astype(np.float64)

    nx_d, ny_d, _ = field.dims
    xs = field.axis_coords(0)
    ys = field.axis_coords(1)
    zs = field.axis_coords(2)
    ext = camera.extent()
    u = (xs - camera.box_min[0]) / ext[0] * camera.width
    v = (ys - camera.box_min[1]) / ext[1] * camera.height
    uu, vv = np.meshgrid(u, v, indexing="ij")
    front_mm = bilinear_sample(front_disp[:, :, None], uu - 0.5, vv - 0.5)[:, :, 0]
    back_mm = bilinear_sample(back_disp[:, :, None], uu - 0.5, vv - 0.5)[:, :, 0]
    scale = field.voxel_size()
    front_mm = front_mm * scale
    back_mm = back_mm * scale

    has, mid = _column_crossing_mid(field.values, zs)
    is_front = zs[None, None, :] <= mid[:, :, None]
    add = np.where(is_front, front_mm[:, :, None], back_mm[:, :, None])
    add = np.where(has[:, :, None], add, 0.0)
    return field.copy_with(field.values + add)


def compose_field(
    base: ScalarField3,
    fine: ScalarField3,
    front_nm: Image,
    back_nm: Image,
    camera: CropAlignedCamera,
    kernel: SobelKernel7 = None,
    gain: CarveGain = None,
) -> ScalarField3:
    """Final field: carve_normals applied to base + fine."""
    if base.dims != fine.dims or not (
        np.allclose(base.box_min, fine.box_min) and np.allclose(base.box_max, fine.box_max)
    ):
        raise ValueError("base and fine grids must share dims and box")
    summed = base.copy_with(base.values + fine.values)
    return carve_normals(summed, front_nm, back_nm, camera, kernel, gain)
