"""scikit-learn style wrappers around the training and reconstruction functions.

Reconstructors are stateless transformers: ``fit`` only validates the
hyper-parameters, ``transform`` maps measurements (a sinogram or a k-space
volume) to an image volume. :class:`DSMScoreEstimator` learns a score model
from a stack of 2D slices.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .mri import KSpaceData
from .projector import Geometry, fbp_reconstruct
from .score import TrainConfig, dsm_loss, dsm_train, make_schedule, sigma_max_heuristic
from .sirt import SirtConfig, sirt_solve
from .tosm import EQUAL_WEIGHTS, SamplerConfig, reconstruct_ct, reconstruct_mri


def _as_stack(X, dtype=np.float64, allow_complex=False):
    X = np.asarray(X)
    if allow_complex and np.iscomplexobj(X):
        return X.astype(np.complex128)
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=dtype, ensure_all_finite=True)
    if X.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {X.shape}")
    return X


class DSMScoreEstimator(BaseEstimator):
    """Noise-conditioned score network trained by denoising score matching.

    ``X`` is an ``(N, H, W)`` stack of training slices. ``sigma_max=None``
    picks the largest pairwise slice distance.
    """

    def __init__(self, levels=12, sigma_min=0.01, sigma_max=None, learning_rate=1e-3, steps=10_000,
                 batch_size=16, arch="conv3", channels=32, seed=0):
        self.levels = levels
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.learning_rate = learning_rate
        self.steps = steps
        self.batch_size = batch_size
        self.arch = arch
        self.channels = channels
        self.seed = seed

    def fit(self, X, y=None):
        X = _as_stack(X)
        smax = self.sigma_max if self.sigma_max is not None else sigma_max_heuristic(X)
        self.schedule_ = make_schedule(smax, self.sigma_min, self.levels)
        cfg = TrainConfig(self.learning_rate, self.steps, self.batch_size, self.seed, self.arch, self.channels)
        self.model_ = dsm_train(X, self.schedule_, cfg)
        self.loss_history_ = np.asarray(self.model_.loss_history)
        return self

    def predict(self, X, level=-1):
        """Score field of each slice at noise level index ``level``."""
        check_is_fitted(self, "model_")
        X = _as_stack(X)
        return np.asarray(self.model_(X, level % self.schedule_.count))

    def score(self, X, y=None):
        """Negative DSM loss on ``X`` with a fixed noise draw (higher is better)."""
        check_is_fitted(self, "model_")
        X = _as_stack(X).astype(np.float32)
        rng = np.random.default_rng(self.seed)
        lv = rng.integers(0, self.schedule_.count, len(X))
        z = rng.standard_normal(X.shape, dtype=np.float32)
        sig = np.asarray(self.schedule_.levels, dtype=np.float32)
        return -float(dsm_loss(self.model_.params, X, z, lv, sig))


class _Reconstructor(TransformerMixin, BaseEstimator):
    def fit(self, X=None, y=None):
        self._config()
        self.fitted_ = True
        return self

    def _config(self):
        return None


class FBPReconstructor(_Reconstructor):
    """Filtered backprojection (FDK weighting for cone-beam geometries)."""

    def __init__(self, geometry: Geometry | None = None, filter="ramp"):
        self.geometry = geometry
        self.filter = filter

    def transform(self, X):
        check_is_fitted(self, "fitted_")
        return fbp_reconstruct(_as_stack(X), self.geometry, self.filter).values


class SIRTReconstructor(_Reconstructor):
    def __init__(self, geometry: Geometry | None = None, iterations=20, relaxation=1.0, nonneg_clamp=True):
        self.geometry = geometry
        self.iterations = iterations
        self.relaxation = relaxation
        self.nonneg_clamp = nonneg_clamp

    def _config(self):
        return SirtConfig(self.iterations, self.relaxation, self.nonneg_clamp)

    def transform(self, X):
        check_is_fitted(self, "fitted_")
        return sirt_solve(_as_stack(X), self.geometry, cfg=self._config()).values


class _TOSMReconstructor(_Reconstructor):
    def _config(self):
        return SamplerConfig(
            weights=self.weights, iters_per_level=self.iters_per_level, base_step=self.base_step,
            dc_weight=self.dc_weight, sirt_inner=self.sirt_inner, gamma1=self.gamma1, seed=self.seed,
            sampler=self.sampler,
        )

    def _model(self):
        model = self.model
        return model.model_ if isinstance(model, DSMScoreEstimator) else model


class TOSMCTReconstructor(_TOSMReconstructor):
    """Score-prior sparse-view CT reconstruction; ``X`` is the sinogram."""

    def __init__(self, geometry: Geometry | None = None, model=None, weights=EQUAL_WEIGHTS, iters_per_level=150,
                 base_step=2e-5, dc_weight=0.5, sirt_inner=20, gamma1=1.0, seed=0, sampler="langevin"):
        self.geometry = geometry
        self.model = model
        self.weights = weights
        self.iters_per_level = iters_per_level
        self.base_step = base_step
        self.dc_weight = dc_weight
        self.sirt_inner = sirt_inner
        self.gamma1 = gamma1
        self.seed = seed
        self.sampler = sampler

    def transform(self, X):
        check_is_fitted(self, "fitted_")
        rec = reconstruct_ct(_as_stack(X), self.geometry, self._model(), self._config())
        self.trace_ = rec.trace
        return rec.volume.values


class TOSMMRIReconstructor(_TOSMReconstructor):
    """Score-prior MRI reconstruction; ``X`` is the undersampled k-space volume."""

    def __init__(self, mask=None, model=None, weights=EQUAL_WEIGHTS, iters_per_level=150, base_step=2e-5,
                 dc_weight=0.5, sirt_inner=20, gamma1=1.0, seed=0, sampler="langevin"):
        self.mask = mask
        self.model = model
        self.weights = weights
        self.iters_per_level = iters_per_level
        self.base_step = base_step
        self.dc_weight = dc_weight
        self.sirt_inner = sirt_inner
        self.gamma1 = gamma1
        self.seed = seed
        self.sampler = sampler

    def transform(self, X):
        check_is_fitted(self, "fitted_")
        kdata = KSpaceData(_as_stack(X, allow_complex=True).astype(np.complex128), np.asarray(self.mask, bool))
        rec = reconstruct_mri(kdata, self._model(), self._config())
        self.trace_ = rec.trace
        return rec.volume.values
