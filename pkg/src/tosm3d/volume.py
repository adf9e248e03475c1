"""Volume containers, phantoms, slicing and cube padding.

Arrays are indexed ``values[x, y, z]`` with dims ``(nx, ny, nz)``. Flattened
voxel order (files, system matrices) is x fastest, i.e. numpy ``order="F"``.

Axis convention for slicing: axis 0 = x (sagittal, y-z planes), axis 1 = y
(coronal, x-z planes), axis 2 = z (transaxial, x-y planes). In-plane order of
a slice keeps the two remaining axes in increasing order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

AXIS_NAMES = {0: "sagittal", 1: "coronal", 2: "transaxial"}
TRANSAXIAL = 2


class SpecificationError(ValueError):
    """Raised when a user-supplied specification is invalid."""


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise SpecificationError(f"spacing must be three positive numbers, got {spacing!r}")
    return sp


@dataclass(frozen=True)
class Volume3D:
    """Real scalar field on a regular grid.

    The stored array is a read-only copy, so instances can be shared freely.
    """

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    _complex = False

    def __post_init__(self):
        arr = np.array(self.values, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise SpecificationError(f"volume must be a non-empty 3D array, got shape {arr.shape}")
        if self._complex:
            arr = arr.astype(np.complex128 if arr.dtype != np.complex64 else np.complex64)
        else:
            if np.iscomplexobj(arr):
                raise SpecificationError("Volume3D holds real values; use ComplexVolume3D")
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise SpecificationError("volume values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def is_cubic(self) -> bool:
        return len(set(self.dims)) == 1

    def flat(self) -> np.ndarray:
        """Values in file order (x fastest)."""
        return self.values.ravel(order="F")

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.values
        return self.values.astype(dtype)


@dataclass(frozen=True)
class ComplexVolume3D(Volume3D):
    """Complex field; stored as complex dtype, serialized as (real, imag) pairs."""

    _complex = True

    @property
    def real(self) -> np.ndarray:
        return self.values.real

    @property
    def imag(self) -> np.ndarray:
        return self.values.imag


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------

PHANTOM_KINDS = ("uniform", "cube", "ellipsoids", "shepp3d", "random_ellipsoids")

# (intensity, a, b, c, x0, y0, z0, phi_degrees); rotation about z only.
# The last field may instead be a 3x3 rotation matrix.
SHEPP3D_ELLIPSOIDS = (
    (1.0, 0.6900, 0.920, 0.810, 0.00, 0.0000, 0.00, 0.0),
    (-0.8, 0.6624, 0.874, 0.780, 0.00, -0.0184, 0.00, 0.0),
    (-0.2, 0.1100, 0.310, 0.220, 0.22, 0.0000, 0.00, -18.0),
    (-0.2, 0.1600, 0.410, 0.280, -0.22, 0.0000, 0.00, 18.0),
    (0.1, 0.2100, 0.250, 0.410, 0.00, 0.3500, -0.15, 0.0),
    (0.1, 0.0460, 0.046, 0.050, 0.00, 0.1000, 0.25, 0.0),
    (0.1, 0.0460, 0.046, 0.050, 0.00, -0.1000, 0.25, 0.0),
    (0.1, 0.0460, 0.023, 0.050, -0.08, -0.6050, 0.00, 0.0),
    (0.1, 0.0230, 0.023, 0.020, 0.00, -0.6060, 0.00, 0.0),
    (0.1, 0.0230, 0.046, 0.020, 0.06, -0.6050, 0.00, 0.0),
)


@dataclass(frozen=True)
class PhantomSpec:
    """Description of a synthetic test object.

    ``ellipsoids`` entries are ``(intensity, a, b, c, x0, y0, z0, phi_deg)`` in
    normalized coordinates [-1, 1]; with ``kind="ellipsoids"`` they are summed
    and clipped to [0, 1]. ``half_width`` (voxels) applies to ``kind="cube"``.
    """

    kind: str
    n: int
    intensity: float = 1.0
    half_width: float | None = None
    ellipsoids: tuple = field(default_factory=tuple)
    seed: int = 0
    count: int = 8


def _normalized_grid(n: int) -> np.ndarray:
    return (2.0 * np.arange(n) - (n - 1)) / n


def _ellipsoid_sum(n: int, ellipsoids) -> np.ndarray:
    c = _normalized_grid(n)
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    out = np.zeros((n, n, n))
    for e in ellipsoids:
        amp, a, b, cc, x0, y0, z0, rot = e
        if np.ndim(rot) == 0:
            rot = Rotation.from_euler("z", rot, degrees=True).as_matrix()
        dx, dy, dz = x - x0, y - y0, z - z0
        # body-frame coordinates: R^T (p - p0)
        u = rot[0, 0] * dx + rot[1, 0] * dy + rot[2, 0] * dz
        v = rot[0, 1] * dx + rot[1, 1] * dy + rot[2, 1] * dz
        w = rot[0, 2] * dx + rot[1, 2] * dy + rot[2, 2] * dz
        inside = (u / a) ** 2 + (v / b) ** 2 + (w / cc) ** 2 <= 1.0
        out[inside] += amp
    return out


def random_ellipsoid_params(seed: int, count: int) -> list:
    """Body ellipsoid plus ``count`` randomly oriented inner ellipsoids.

    Orientations are uniform on SO(3), so slices along all three axes share the
    same statistics.
    """
    rng = np.random.default_rng(seed)
    body_axes = rng.uniform(0.7, 0.9, size=3)
    body_rot = Rotation.random(random_state=rng).as_matrix()
    params = [(rng.uniform(0.35, 0.5), *body_axes, 0.0, 0.0, 0.0, body_rot)]
    for _ in range(count):
        axes = rng.uniform(0.08, 0.35, size=3)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        center = direction * rng.uniform(0.0, 0.5)
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 0.4)
        rot = Rotation.random(random_state=rng).as_matrix()
        params.append((amp, *axes, *center, rot))
    return params


def make_phantom(spec: PhantomSpec, spacing=(1.0, 1.0, 1.0)) -> Volume3D:
    """Build a cubic ``n``-voxel phantom with values in [0, 1]."""
    n = int(spec.n)
    if spec.kind not in PHANTOM_KINDS:
        raise SpecificationError(f"unknown phantom kind {spec.kind!r}; expected one of {PHANTOM_KINDS}")
    if n < 4:
        raise SpecificationError(f"phantom edge length must be >= 4, got {n}")
    if not 0.0 <= spec.intensity <= 1.0:
        raise SpecificationError(f"intensity must lie in [0, 1], got {spec.intensity}")

    if spec.kind == "uniform":
        vals = np.full((n, n, n), float(spec.intensity))
    elif spec.kind == "cube":
        hw = n / 4 if spec.half_width is None else float(spec.half_width)
        c = np.arange(n) - (n - 1) / 2
        inside = np.abs(c) < hw
        vals = spec.intensity * (inside[:, None, None] & inside[None, :, None] & inside[None, None, :])
    elif spec.kind == "ellipsoids":
        if not spec.ellipsoids:
            raise SpecificationError("kind='ellipsoids' requires at least one ellipsoid")
        vals = _ellipsoid_sum(n, spec.ellipsoids)
    elif spec.kind == "shepp3d":
        vals = _ellipsoid_sum(n, SHEPP3D_ELLIPSOIDS)
    else:
        if spec.count < 0:
            raise SpecificationError("count must be non-negative")
        vals = _ellipsoid_sum(n, random_ellipsoid_params(spec.seed, spec.count))
    return Volume3D(np.clip(vals, 0.0, 1.0).astype(np.float64), spacing)


def phantom_family(n: int, seeds: Sequence[int], count: int = 8) -> list[Volume3D]:
    return [make_phantom(PhantomSpec("random_ellipsoids", n, seed=s, count=count)) for s in seeds]


# ---------------------------------------------------------------------------
# slicing
# ---------------------------------------------------------------------------


def _values(vol) -> np.ndarray:
    return vol.values if isinstance(vol, Volume3D) else np.asarray(vol)


def _check_axis(axis) -> int:
    if axis not in (0, 1, 2):
        raise SpecificationError(f"axis must be 0, 1 or 2, got {axis!r}")
    return int(axis)


def slice_stack(vol, axis: int) -> list[np.ndarray]:
    """Split a volume into its ``dims[axis]`` slices perpendicular to ``axis``."""
    axis = _check_axis(axis)
    arr = _values(vol)
    if arr.ndim != 3:
        raise SpecificationError(f"expected a 3D volume, got shape {arr.shape}")
    return list(np.moveaxis(arr, axis, 0))


def restack(slices: Sequence[np.ndarray], axis: int, spacing=(1.0, 1.0, 1.0)) -> Volume3D:
    """Inverse of :func:`slice_stack`."""
    axis = _check_axis(axis)
    if len(slices) == 0:
        raise SpecificationError("cannot restack an empty slice list")
    shapes = {np.shape(s) for s in slices}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise SpecificationError(f"slices must share one 2D shape, got {sorted(shapes)}")
    stacked = np.stack([np.asarray(s) for s in slices], axis=0)
    arr = np.moveaxis(stacked, 0, axis)
    cls = ComplexVolume3D if np.iscomplexobj(arr) else Volume3D
    return cls(arr, spacing)


# ---------------------------------------------------------------------------
# padding
# ---------------------------------------------------------------------------


def cube_offsets(dims) -> tuple[int, int, int]:
    edge = max(dims)
    return tuple((edge - d) // 2 for d in dims)


def pad_array_to_cube(arr: np.ndarray, fill: float = 0.0) -> np.ndarray:
    edge = max(arr.shape)
    out = np.full((edge,) * 3, fill, dtype=arr.dtype)
    ox, oy, oz = cube_offsets(arr.shape)
    nx, ny, nz = arr.shape
    out[ox:ox + nx, oy:oy + ny, oz:oz + nz] = arr
    return out


def crop_array_from_cube(cube: np.ndarray, dims) -> np.ndarray:
    ox, oy, oz = cube_offsets(dims)
    nx, ny, nz = dims
    return cube[ox:ox + nx, oy:oy + ny, oz:oz + nz]


def pad_to_cube(vol: Volume3D, fill: float = 0.0) -> Volume3D:
    """Center ``vol`` in a cube of edge ``max(dims)``; odd remainders go after."""
    arr = _values(vol)
    spacing = vol.spacing if isinstance(vol, Volume3D) else (1.0, 1.0, 1.0)
    cls = ComplexVolume3D if np.iscomplexobj(arr) else Volume3D
    return cls(pad_array_to_cube(arr, fill), spacing)


def crop_from_cube(cube: Volume3D, dims) -> Volume3D:
    arr = crop_array_from_cube(_values(cube), dims)
    cls = ComplexVolume3D if np.iscomplexobj(arr) else Volume3D
    spacing = cube.spacing if isinstance(cube, Volume3D) else (1.0, 1.0, 1.0)
    return cls(arr, spacing)
