"""Two-and-a-half order score sampling and reconstruction.

A single 2D score model is applied to the slice stacks of all three axes; the
three restacked score fields are blended with weights ``(alpha, beta, gamma)``
summing to one to approximate the 3D score. That score drives annealed
Langevin dynamics, interleaved with a data-consistency step (SIRT for CT,
k-space replacement for MRI) for reconstruction.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .metrics import psnr
from .mri import KSpaceData, fft2_centered, kspace_dc
from .projector import Geometry, Sinogram, system_matrix
from .score import ScoreModel
from .sirt import SirtConfig, sirt_iterate
from .volume import ComplexVolume3D, SpecificationError, Volume3D, crop_array_from_cube, cube_offsets

SAMPLERS = ("langevin", "predictor_corrector")
EQUAL_WEIGHTS = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
TRANSAXIAL_ONLY = (0.0, 0.0, 1.0)


def check_weights(weights) -> tuple[float, float, float]:
    w = tuple(float(x) for x in weights)
    if len(w) != 3 or any(x < 0 for x in w):
        raise SpecificationError(f"weights must be three non-negative numbers, got {weights!r}")
    if abs(sum(w) - 1.0) > 1e-9:
        raise SpecificationError(f"weights must sum to 1, got {sum(w)!r}")
    return w


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler and reconstruction settings.

    ``noise_scale`` multiplies the injected Langevin noise; 1.0 is the sampler
    proper, 0.0 turns the update into deterministic score ascent.
    """

    weights: tuple[float, float, float] = EQUAL_WEIGHTS
    iters_per_level: int = 150
    base_step: float = 2e-5
    dc_weight: float = 0.5
    sirt_inner: int = 20
    gamma1: float = 1.0
    seed: int = 0
    sampler: str = "langevin"
    noise_scale: float = 1.0
    sirt_relaxation: float = 1.0
    nonneg_clamp: bool = True

    def __post_init__(self):
        object.__setattr__(self, "weights", check_weights(self.weights))
        if self.iters_per_level < 0 or self.sirt_inner < 0:
            raise SpecificationError("iteration counts must be non-negative")
        if self.base_step <= 0:
            raise SpecificationError("base_step must be positive")
        if not 0.0 <= self.dc_weight <= 1.0:
            raise SpecificationError("dc_weight must lie in [0, 1]")
        if not 0.0 <= self.gamma1 <= 1.0:
            raise SpecificationError("gamma1 must lie in [0, 1]")
        if self.sampler not in SAMPLERS:
            raise SpecificationError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.noise_scale < 0:
            raise SpecificationError("noise_scale must be non-negative")

    @property
    def sirt(self) -> SirtConfig:
        return SirtConfig(self.sirt_inner, self.sirt_relaxation, self.nonneg_clamp)


# ---------------------------------------------------------------------------
# scores and sampler steps
# ---------------------------------------------------------------------------


def _values(vol) -> np.ndarray:
    return vol.values if isinstance(vol, Volume3D) else np.asarray(vol)


def combined_score_array(model: ScoreModel, arr: np.ndarray, level: int, weights) -> np.ndarray:
    if arr.ndim != 3 or len(set(arr.shape)) != 1:
        raise SpecificationError(f"combined score needs a cubic volume, got shape {arr.shape}; pad_to_cube first")
    weights = check_weights(weights)
    if np.iscomplexobj(arr):
        return (combined_score_array(model, arr.real, level, weights)
                + 1j * combined_score_array(model, arr.imag, level, weights))
    out = np.zeros(arr.shape)
    for axis, w in enumerate(weights):
        if w == 0.0:
            continue
        stack = np.ascontiguousarray(np.moveaxis(arr, axis, 0))
        out += w * np.moveaxis(model(stack, level), 0, axis)
    return out


def combined_score_3d(model: ScoreModel, vol, level: int, weights=EQUAL_WEIGHTS) -> Volume3D:
    """Weighted sum of the per-axis restacked 2D score fields."""
    arr = _values(vol)
    out = combined_score_array(model, arr, level, weights)
    spacing = vol.spacing if isinstance(vol, Volume3D) else (1.0, 1.0, 1.0)
    return (ComplexVolume3D if np.iscomplexobj(out) else Volume3D)(out, spacing)


def step_size(base_step: float, sigma: float, sigma_min: float) -> float:
    return base_step * (sigma / sigma_min) ** 2


def _noise(rng: np.random.Generator, shape, complex_: bool) -> np.ndarray:
    if complex_:
        return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return rng.standard_normal(shape)


def langevin_array(v: np.ndarray, score: np.ndarray, rho: float, rng, noise_scale: float = 1.0, noise=None):
    if v.shape != score.shape:
        raise SpecificationError(f"volume {v.shape} and score {score.shape} shapes differ")
    if rho <= 0:
        raise SpecificationError("step size must be positive")
    if noise is None:
        noise = _noise(rng, v.shape, np.iscomplexobj(v) or np.iscomplexobj(score))
    return v + 0.5 * rho * score + np.sqrt(rho) * noise_scale * noise


def langevin_step(vol, score, rho: float, rng: np.random.Generator, noise=None, noise_scale: float = 1.0) -> Volume3D:
    """``v + rho/2 * score + sqrt(rho) * w`` with ``w ~ N(0, I)`` drawn from ``rng``.

    ``noise`` overrides the draw (e.g. zeros to test the drift alone).
    """
    out = langevin_array(_values(vol), _values(score), rho, rng, noise_scale, noise)
    spacing = vol.spacing if isinstance(vol, Volume3D) else (1.0, 1.0, 1.0)
    return (ComplexVolume3D if np.iscomplexobj(out) else Volume3D)(out, spacing)


def initial_volume(shape, sigma_max: float, rng: np.random.Generator, complex_: bool = False) -> np.ndarray:
    return sigma_max * _noise(rng, shape, complex_)


def anneal_sample(model: ScoreModel, vol, cfg: SamplerConfig, callback=None) -> Volume3D:
    """Unconditional annealed Langevin sampling starting from ``vol``."""
    if cfg.sampler == "predictor_corrector":
        return pc_sample(model, vol, cfg, callback)
    rng = np.random.default_rng(cfg.seed)
    v = np.array(_values(vol), dtype=np.float64)
    sched = model.schedule
    for level, sigma in enumerate(sched.levels):
        rho = step_size(cfg.base_step, sigma, sched.sigma_min)
        for it in range(cfg.iters_per_level):
            s = combined_score_array(model, v, level, cfg.weights)
            v = langevin_array(v, s, rho, rng, cfg.noise_scale)
            if callback is not None:
                callback(level, it, v)
    return Volume3D(v)


def pc_sample(model: ScoreModel, vol, cfg: SamplerConfig, callback=None) -> Volume3D:
    """Variance-exploding reverse SDE: Langevin corrector then Euler-Maruyama predictor.

    At level ``i`` the predictor moves from ``sigma_i`` to ``sigma_{i+1}``
    (zero after the last level): ``v += (s_i^2 - s_{i+1}^2) score + sqrt(s_i^2 - s_{i+1}^2) z``.
    """
    rng = np.random.default_rng(cfg.seed)
    v = np.array(_values(vol), dtype=np.float64)
    sched = model.schedule
    for level, sigma in enumerate(sched.levels):
        rho = step_size(cfg.base_step, sigma, sched.sigma_min)
        for it in range(cfg.iters_per_level):
            s = combined_score_array(model, v, level, cfg.weights)
            v = langevin_array(v, s, rho, rng, cfg.noise_scale)
            if callback is not None:
                callback(level, it, v)
        nxt = sched.levels[level + 1] if level + 1 < sched.count else 0.0
        dvar = sigma**2 - nxt**2
        s = combined_score_array(model, v, level, cfg.weights)
        v = v + dvar * s + np.sqrt(dvar) * cfg.noise_scale * rng.standard_normal(v.shape)
    return Volume3D(v)


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------


@dataclass
class Reconstruction:
    volume: Volume3D
    trace: list[dict] = field(default_factory=list)

    def trace_csv(self) -> str:
        cols = ["iteration", "level", "residual", "psnr"]
        lines = [",".join(cols)]
        for row in self.trace:
            lines.append(",".join("" if row.get(c) is None else repr(row[c]) for c in cols))
        return "\n".join(lines) + "\n"


class _Cube:
    """Sampler state lives on a cube; data steps see the cropped grid."""

    def __init__(self, dims):
        self.dims = tuple(dims)
        self.edge = max(dims)
        self.off = cube_offsets(dims)
        self.region = tuple(slice(o, o + d) for o, d in zip(self.off, self.dims))

    def crop(self, cube):
        return crop_array_from_cube(cube, self.dims)

    def embed(self, arr, like):
        out = np.zeros_like(like)
        out[self.region] = arr
        return out


def _run(model, cfg: SamplerConfig, dims, complex_: bool, data_step, residual, truth, callback):
    if model.schedule is None:
        raise SpecificationError("score model carries no noise schedule")
    sched = model.schedule
    cube = _Cube(dims)
    rng = np.random.default_rng(cfg.seed)
    v = cube.embed(cube.crop(initial_volume((cube.edge,) * 3, sched.sigma_max, rng, complex_)),
                   np.zeros((cube.edge,) * 3, dtype=complex if complex_ else float))
    truth_arr = None if truth is None else np.abs(_values(truth))
    trace = []
    step = 0
    for level, sigma in enumerate(sched.levels):
        rho = step_size(cfg.base_step, sigma, sched.sigma_min)
        for _ in range(cfg.iters_per_level):
            s = combined_score_array(model, v, level, cfg.weights)
            v_prior = langevin_array(v, s, rho, rng, cfg.noise_scale)
            inner = cube.crop(v_prior)
            dc = data_step(inner)
            blended = (1.0 - cfg.dc_weight) * inner + cfg.dc_weight * dc
            v = cube.embed(blended, v_prior)
            row = {"iteration": step, "level": level, "residual": residual(dc), "psnr": None}
            if truth_arr is not None:
                row["psnr"] = psnr(np.abs(blended), truth_arr)
            trace.append(row)
            if callback is not None:
                callback(row, v)
            step += 1
    return cube.crop(v), trace


def reconstruct_ct(sino, geom: Geometry, model: ScoreModel, cfg: SamplerConfig = SamplerConfig(),
                   truth=None, callback=None) -> Reconstruction:
    """Alternate prior (score + Langevin) and SIRT data steps over the noise schedule.

    With ``iters_per_level == 0`` the initial noise volume is returned unchanged.
    """
    values = sino.values if isinstance(sino, Sinogram) else np.asarray(sino, dtype=np.float64)
    if values.shape != geom.sino_shape:
        raise SpecificationError(f"sinogram shape {values.shape} != geometry {geom.sino_shape}")
    p = values.reshape(-1)
    mat, _ = system_matrix(geom)
    sirt_cfg = cfg.sirt

    def data_step(arr):
        return sirt_iterate(arr, p, geom, sirt_cfg)

    def residual(arr):
        return float(np.linalg.norm(mat @ arr.ravel(order="F") - p))

    out, trace = _run(model, cfg, geom.vol_shape, False, data_step, residual, truth, callback)
    return Reconstruction(Volume3D(out, geom.voxel_size), trace)


def reconstruct_mri(kdata: KSpaceData, model: ScoreModel, cfg: SamplerConfig = SamplerConfig(),
                    truth=None, callback=None) -> Reconstruction:
    """As :func:`reconstruct_ct` with k-space replacement as the data step.

    The score is applied to the real and imaginary channels independently.
    """
    if kdata.values.ndim != 3:
        raise SpecificationError(f"k-space volume must be 3D, got shape {kdata.values.shape}")
    nx, ny, _ = kdata.values.shape
    if nx != ny:
        raise SpecificationError(f"transaxial slices must be square, got {nx}x{ny}")

    def data_step(arr):
        return kspace_dc(arr, kdata, cfg.gamma1)

    def residual(arr):
        m = kdata.mask[None, :, None]
        return float(np.linalg.norm(m * (fft2_centered(arr) - kdata.values)))

    out, trace = _run(model, cfg, kdata.values.shape, True, data_step, residual, truth, callback)
    return Reconstruction(ComplexVolume3D(out, kdata.spacing), trace)


def ablation_config(cfg: SamplerConfig, axis: int = 2) -> SamplerConfig:
    """Same settings with the score taken along a single axis (a stacked 2D prior)."""
    w = [0.0, 0.0, 0.0]
    w[axis] = 1.0
    return replace(cfg, weights=tuple(w))
