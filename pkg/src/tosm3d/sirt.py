"""Simultaneous Iterative Reconstruction Technique.

Each sweep applies

    v <- v + relaxation * C * M^T ( R * (p - M v) )

with ``R = 1 / (row sums of M)`` and ``C = 1 / (column sums of M)``. Rays or
voxels with zero weight sum get a zero correction.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .projector import Geometry, GeometryError, Sinogram, system_matrix
from .volume import Volume3D


@dataclass(frozen=True)
class SirtConfig:
    iterations: int = 20
    relaxation: float = 1.0
    nonneg_clamp: bool = True

    def __post_init__(self):
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ValueError(f"iterations must be a non-negative integer, got {self.iterations}")
        if not 0.0 < self.relaxation <= 2.0:
            raise ValueError(f"relaxation must lie in (0, 2], got {self.relaxation}")


@lru_cache(maxsize=8)
def sirt_weights(geom: Geometry) -> tuple[np.ndarray, np.ndarray]:
    """Inverse row and column sums of the system matrix (zeros where empty)."""
    mat, mat_t = system_matrix(geom)
    row = np.asarray(mat.sum(axis=1)).ravel()
    col = np.asarray(mat_t.sum(axis=1)).ravel()
    inv_row = np.zeros_like(row)
    inv_col = np.zeros_like(col)
    np.divide(1.0, row, out=inv_row, where=row > 0)
    np.divide(1.0, col, out=inv_col, where=col > 0)
    return inv_row, inv_col


def _as_sino(sino, geom: Geometry) -> np.ndarray:
    values = sino.values if isinstance(sino, Sinogram) else np.asarray(sino, dtype=np.float64)
    if values.shape != geom.sino_shape:
        raise GeometryError(f"sinogram shape {values.shape} != geometry {geom.sino_shape}")
    return values.reshape(-1)


def _as_vol(vol, geom: Geometry) -> np.ndarray:
    arr = vol.values if isinstance(vol, Volume3D) else np.asarray(vol, dtype=np.float64)
    if arr.shape != geom.vol_shape:
        raise GeometryError(f"volume shape {arr.shape} != geometry grid {geom.vol_shape}")
    return arr


def sirt_iterate(v: np.ndarray, p: np.ndarray, geom: Geometry, cfg: SirtConfig, callback=None) -> np.ndarray:
    """Array-level SIRT loop; ``v`` has the volume shape, ``p`` is flat."""
    mat, mat_t = system_matrix(geom)
    inv_row, inv_col = sirt_weights(geom)
    x = np.array(v, dtype=np.float64).ravel(order="F")
    for it in range(cfg.iterations):
        resid = p - mat @ x
        x += cfg.relaxation * inv_col * (mat_t @ (inv_row * resid))
        if cfg.nonneg_clamp:
            np.maximum(x, 0.0, out=x)
        if callback is not None:
            callback(it, x.reshape(geom.vol_shape, order="F"))
    return x.reshape(geom.vol_shape, order="F")


def sirt_solve(sino, geom: Geometry, init=None, cfg: SirtConfig = SirtConfig(), callback=None) -> Volume3D:
    """Run ``cfg.iterations`` SIRT sweeps starting from ``init`` (zeros if None)."""
    p = _as_sino(sino, geom)
    v0 = np.zeros(geom.vol_shape) if init is None else _as_vol(init, geom)
    return Volume3D(sirt_iterate(v0, p, geom, cfg, callback), geom.voxel_size)


def sirt_dc_step(v, sino, geom: Geometry, cfg: SirtConfig = SirtConfig()) -> Volume3D:
    """Data-consistency step: SIRT warm-started from the current estimate."""
    return sirt_solve(sino, geom, init=v, cfg=cfg)


def projection_residual(v, sino, geom: Geometry) -> float:
    mat, _ = system_matrix(geom)
    x = _as_vol(v, geom).ravel(order="F")
    return float(np.linalg.norm(mat @ x - _as_sino(sino, geom)))
