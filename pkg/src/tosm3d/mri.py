"""Fourier measurement model for undersampled MRI.

Each transaxial slice (x-y plane) is transformed with a centred, unitary 2D
DFT. Sampling masks select phase-encode lines along y (array axis 1) and are
constant along the frequency-encode direction x, identically for every slice.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import atomic_write_bytes, read_sidecar, write_sidecar

MASK_KINDS = ("uniform1d", "gaussian1d", "full")
_AXES = (0, 1)


def fft2_centered(x: np.ndarray) -> np.ndarray:
    """Unitary 2D DFT over the first two axes with DC at index ``n // 2``."""
    x = np.asarray(x)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=_AXES), axes=_AXES, norm="ortho"), axes=_AXES)


def ifft2_centered(k: np.ndarray) -> np.ndarray:
    k = np.asarray(k)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=_AXES), axes=_AXES, norm="ortho"), axes=_AXES)


@dataclass(frozen=True)
class MaskSpec:
    kind: str = "uniform1d"
    acceleration: float = 2.0
    acs_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"mask kind must be one of {MASK_KINDS}, got {self.kind!r}")
        if self.acceleration < 1:
            raise ValueError(f"acceleration must be >= 1, got {self.acceleration}")
        if not 0.0 <= self.acs_fraction <= 1.0:
            raise ValueError(f"acs_fraction must lie in [0, 1], got {self.acs_fraction}")


def _ceil(x: float) -> int:
    # guards against 0.15 * 240 = 36.00000000000001
    return int(math.ceil(round(x, 9)))


def acs_band(n_lines: int, acs_fraction: float) -> np.ndarray:
    count = _ceil(acs_fraction * n_lines)
    start = n_lines // 2 - count // 2
    band = np.zeros(n_lines, dtype=bool)
    band[start:start + count] = True
    return band


def make_mask(spec: MaskSpec, n_lines: int) -> np.ndarray:
    """Boolean line mask of length ``n_lines``; always contains the ACS band."""
    if n_lines < 4:
        raise ValueError(f"n_lines must be >= 4, got {n_lines}")
    if spec.kind == "full":
        return np.ones(n_lines, dtype=bool)
    mask = acs_band(n_lines, spec.acs_fraction)
    remaining = np.flatnonzero(~mask)
    if spec.kind == "uniform1d":
        mask[remaining[:: _ceil(spec.acceleration)]] = True
        return mask
    budget = _ceil(n_lines / spec.acceleration)
    n_acs = int(mask.sum())
    if budget < n_acs:
        raise ValueError(
            f"line budget {budget} (= ceil({n_lines}/{spec.acceleration})) is smaller than the "
            f"{n_acs}-line ACS band; lower acs_fraction or acceleration"
        )
    rng = np.random.default_rng(spec.seed)
    center = n_lines // 2
    weights = np.exp(-0.5 * ((remaining - center) / (n_lines / 5.0)) ** 2)
    extra = min(budget - n_acs, remaining.size)
    if extra:
        mask[rng.choice(remaining, size=extra, replace=False, p=weights / weights.sum())] = True
    return mask


def _line_mask(mask: np.ndarray, ndim: int) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    return m[None, :, None] if ndim == 3 else m[None, :]


@dataclass(frozen=True)
class KSpaceData:
    """Measured k-space: complex values over the grid plus the y-line mask."""

    values: np.ndarray
    mask: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.complex128, copy=True)
        mask = np.array(self.mask, copy=True)
        if mask.ndim != 1 or not np.isin(mask, (0, 1)).all():
            raise ValueError("mask must be a binary 1D line mask")
        mask = mask.astype(bool)
        if vals.ndim not in (2, 3) or vals.shape[1] != mask.size:
            raise ValueError(f"mask length {mask.size} does not match k-space shape {vals.shape}")
        if np.any(vals[~np.broadcast_to(_line_mask(mask, vals.ndim), vals.shape)] != 0):
            raise ValueError("k-space values must be zero on unsampled lines")
        vals.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.values.shape


def undersample(full_k: np.ndarray, mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> KSpaceData:
    """Keep only the sampled lines of a fully sampled k-space array."""
    full_k = np.asarray(full_k)
    mask = np.asarray(mask).astype(bool)
    if full_k.ndim not in (2, 3) or full_k.shape[1] != mask.size:
        raise ValueError(f"mask length {mask.size} does not match k-space shape {full_k.shape}")
    if not mask[mask.size // 2]:
        raise ValueError("mask must sample the central (ACS/DC) line")
    return KSpaceData(full_k * _line_mask(mask, full_k.ndim), mask, spacing)


def _check_dc_inputs(v, measured: KSpaceData, gamma1: float) -> np.ndarray:
    if not 0.0 <= gamma1 <= 1.0:
        raise ValueError(f"gamma1 must lie in [0, 1], got {gamma1}")
    v = np.asarray(v)
    if v.shape != measured.shape:
        raise ValueError(f"image shape {v.shape} != k-space shape {measured.shape}")
    return v


def kspace_dc(v, measured: KSpaceData, gamma1: float = 1.0) -> np.ndarray:
    """``v + gamma1 * F^H (mask * (P - F v))`` slice-wise over the transaxial planes."""
    v = _check_dc_inputs(v, measured, gamma1)
    m = _line_mask(measured.mask, v.ndim)
    resid = m * (measured.values - fft2_centered(v))
    return v + gamma1 * ifft2_centered(resid)


def kspace_dc_literal(v, measured: KSpaceData, gamma1: float = 1.0) -> np.ndarray:
    """``(I - gamma1 F^H mask F) v + F^H P``, the un-rearranged form (agrees at gamma1 = 1)."""
    v = _check_dc_inputs(v, measured, gamma1)
    m = _line_mask(measured.mask, v.ndim)
    return v - gamma1 * ifft2_centered(m * fft2_centered(v)) + ifft2_centered(measured.values)


def zero_filled(measured: KSpaceData) -> np.ndarray:
    return ifft2_centered(measured.values)


def with_smooth_phase(magnitude: np.ndarray, max_phase: float = np.pi / 8, seed: int = 0) -> np.ndarray:
    """Complex test object: ``magnitude`` times a random linear phase ramp.

    The phase is ``a*x + b*y + c*z`` over normalized coordinates, with the
    gradient drawn so the phase stays within ``[-max_phase, max_phase]``.
    """
    mag = np.asarray(magnitude, dtype=np.float64)
    grads = np.random.default_rng(seed).dirichlet(np.ones(3)) * max_phase
    grads *= np.random.default_rng(seed + 1).choice((-1.0, 1.0), 3)
    coords = np.meshgrid(*[np.linspace(-1.0, 1.0, n) for n in mag.shape], indexing="ij")
    phase = sum(g * c for g, c in zip(grads, coords))
    return mag * np.exp(1j * phase)


def write_mask(path, mask: np.ndarray, spec: MaskSpec | None = None) -> None:
    path = Path(path)
    atomic_write_bytes(path, ("\n".join(str(int(b)) for b in mask) + "\n").encode())
    if spec is not None:
        write_sidecar(
            path.with_suffix(path.suffix + ".ini"),
            {"mask": {"kind": spec.kind, "acceleration": spec.acceleration,
                      "acs_fraction": spec.acs_fraction, "seed": spec.seed, "n_lines": len(mask)}},
        )


def read_mask(path) -> tuple[np.ndarray, MaskSpec | None]:
    path = Path(path)
    mask = np.array([int(line) for line in path.read_text().split()], dtype=bool)
    side = path.with_suffix(path.suffix + ".ini")
    spec = None
    if side.exists():
        s = read_sidecar(side)["mask"]
        spec = MaskSpec(s["kind"], float(s["acceleration"]), float(s["acs_fraction"]), int(s["seed"]))
    return mask, spec
