"""Noise schedules, score models and denoising score matching.

Score models map a batch of 2D slices ``(B, H, W)`` at noise level index
``t`` to gradient fields of the same shape. Three variants exist:

* :class:`GaussianScore` -- i.i.d. per-pixel ``N(mu, sigma_d^2)`` data, so the
  perturbed score is ``-(x - mu) / (sigma_d^2 + sigma_t^2)``.
* :class:`GMMScore` -- slice-level mixture of isotropic Gaussians with scalar
  means; responsibilities couple all pixels of a slice.
* :class:`LearnedScore` -- the small noise-conditioned convolutional denoiser
  trained with :func:`dsm_train`.

The learned network predicts ``r = sigma_t * score``. With the usual
``sigma^2`` weighting the DSM objective becomes ``0.5 * mean((r + z)^2)`` for
``x_noisy = x + sigma_t * z``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp

SCORE_MAGIC = b"TSCM0001"


@dataclass(frozen=True)
class SigmaSchedule:
    levels: tuple[float, ...]

    def __post_init__(self):
        lv = tuple(float(s) for s in self.levels)
        if len(lv) < 1 or any(s <= 0 for s in lv):
            raise ValueError("noise levels must be positive")
        if any(b >= a for a, b in zip(lv, lv[1:])):
            raise ValueError("noise levels must be strictly decreasing")
        object.__setattr__(self, "levels", lv)

    @property
    def count(self) -> int:
        return len(self.levels)

    @property
    def sigma_max(self) -> float:
        return self.levels[0]

    @property
    def sigma_min(self) -> float:
        return self.levels[-1]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def make_schedule(sigma_max: float, sigma_min: float, count: int = 12) -> SigmaSchedule:
    """Geometric sequence from ``sigma_max`` down to ``sigma_min``."""
    if not sigma_max > sigma_min > 0:
        raise ValueError(f"need sigma_max > sigma_min > 0, got {sigma_max}, {sigma_min}")
    if count < 2:
        raise ValueError(f"count must be >= 2, got {count}")
    ratio = (sigma_min / sigma_max) ** (1.0 / (count - 1))
    levels = sigma_max * ratio ** np.arange(count)
    levels[0], levels[-1] = sigma_max, sigma_min
    return SigmaSchedule(tuple(levels))


def sigma_max_heuristic(slices: np.ndarray, limit: int = 512) -> float:
    """Largest pairwise Euclidean distance between (up to ``limit``) training slices."""
    flat = np.asarray(slices, dtype=np.float64).reshape(len(slices), -1)[:limit]
    sq = np.einsum("ij,ij->i", flat, flat)
    d2 = sq[:, None] + sq[None, :] - 2.0 * flat @ flat.T
    return float(np.sqrt(max(d2.max(), 0.0)))


# ---------------------------------------------------------------------------
# score models
# ---------------------------------------------------------------------------


class ScoreModel:
    variant = "abstract"
    schedule: SigmaSchedule

    def __call__(self, batch: np.ndarray, level: int) -> np.ndarray:
        raise NotImplementedError

    def descriptor(self) -> str:
        raise NotImplementedError

    def parameter_vector(self) -> np.ndarray:
        return np.zeros(0, dtype=np.float32)


@dataclass
class GaussianScore(ScoreModel):
    mu: float
    sigma_d: float
    schedule: SigmaSchedule
    variant = "analytic_gaussian"

    def __call__(self, batch, level):
        var = self.sigma_d**2 + self.schedule[level] ** 2
        return -(np.asarray(batch, dtype=np.float64) - self.mu) / var

    def descriptor(self):
        return f"analytic_gaussian mu={self.mu!r} sigma_d={self.sigma_d!r}"


@dataclass
class GMMScore(ScoreModel):
    weights: tuple[float, ...]
    means: tuple[float, ...]
    sigmas: tuple[float, ...]
    schedule: SigmaSchedule
    variant = "analytic_gmm"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        if not len(self.weights) == len(self.means) == len(self.sigmas):
            raise ValueError("weights, means and sigmas must have equal lengths")

    def _terms(self, batch, level):
        x = np.asarray(batch, dtype=np.float64)
        d = x[0].size
        var = np.asarray(self.sigmas) ** 2 + self.schedule[level] ** 2
        mu = np.asarray(self.means, dtype=np.float64)
        sq = ((x[:, None] - mu[None, :, None, None]) ** 2).sum(axis=(2, 3))
        logp = np.log(self.weights)[None] - 0.5 * d * np.log(2 * np.pi * var)[None] - sq / (2 * var)[None]
        return x, mu, var, logp

    def log_density(self, batch, level) -> np.ndarray:
        return logsumexp(self._terms(batch, level)[3], axis=1)

    def __call__(self, batch, level):
        x, mu, var, logp = self._terms(batch, level)
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        comp = -(x[:, None] - mu[None, :, None, None]) / var[None, :, None, None]
        return np.einsum("bk,bkhw->bhw", resp, comp)

    def descriptor(self):
        return (
            "analytic_gmm weights=" + ",".join(map(repr, self.weights))
            + " means=" + ",".join(map(repr, self.means))
            + " sigmas=" + ",".join(map(repr, self.sigmas))
        )


def analytic_score(model: ScoreModel, slice_: np.ndarray, level: int) -> np.ndarray:
    """Closed-form score of a single 2D slice under an analytic model."""
    if not isinstance(model, (GaussianScore, GMMScore)):
        raise TypeError(f"analytic_score needs an analytic model, got {model.variant}")
    arr = np.asarray(slice_, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("slice must be finite")
    return model(arr[None], level)[0]


def score_eval(model: ScoreModel, slice_batch, level: int) -> list[np.ndarray]:
    """Apply ``model`` to each slice of a batch at noise level index ``level``."""
    if len(slice_batch) == 0:
        return []
    shapes = {np.shape(s) for s in slice_batch}
    if len(shapes) != 1:
        raise ValueError(f"slices must share one shape, got {sorted(shapes)}")
    h, w = next(iter(shapes))
    if h != w:
        raise ValueError(f"slices must be square, got {h}x{w}")
    if not 0 <= level < model.schedule.count:
        raise ValueError(f"level {level} outside schedule of {model.schedule.count}")
    return list(model(np.stack(slice_batch), level))


# ---------------------------------------------------------------------------
# learned network
# ---------------------------------------------------------------------------

CONV3_LAYOUT = ("conv1.w", "conv1.b", "embed1", "conv2.w", "conv2.b", "embed2", "conv3.w", "conv3.b", "skip")
LINEAR_LAYOUT = ("skip", "bias")


def _pad1(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    return xp


def conv3x3(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 convolution; ``weight`` rows are tap-major ``(9 * C_in, C_out)``."""
    b, h, w, c = x.shape
    xp = _pad1(x)
    out = np.zeros((b, h, w, weight.shape[1]), dtype=np.result_type(x, weight))
    for k in range(9):
        i, j = divmod(k, 3)
        if c == 1:
            out += xp[:, i:i + h, j:j + w] * weight[k]
        else:
            out += xp[:, i:i + h, j:j + w] @ weight[k * c:(k + 1) * c]
    return out


def conv3x3_backward(x: np.ndarray, weight: np.ndarray, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, h, w, c = x.shape
    xp = _pad1(x)
    dxp = np.zeros_like(xp, dtype=np.result_type(x, dout))
    dw = np.empty(weight.shape, dtype=np.result_type(x, dout))
    flat_out = dout.reshape(-1, dout.shape[-1])
    for k in range(9):
        i, j = divmod(k, 3)
        wk = weight[k * c:(k + 1) * c]
        dw[k * c:(k + 1) * c] = xp[:, i:i + h, j:j + w].reshape(-1, c).T @ flat_out
        dxp[:, i:i + h, j:j + w] += dout @ wk.T
    return dw, dxp[:, 1:-1, 1:-1]


def _silu(a):
    sig = expit(a)
    return a * sig, sig


def init_params(arch: str, n_levels: int, channels: int = 32, seed: int = 0, dtype=np.float32) -> dict:
    rng = np.random.default_rng(seed)
    if arch == "linear":
        return {"skip": np.zeros(n_levels, dtype), "bias": np.zeros(n_levels, dtype)}
    if arch != "conv3":
        raise ValueError(f"unknown architecture {arch!r}")
    c = channels
    p = {
        "conv1.w": rng.normal(0, np.sqrt(2.0 / 9), (9, c)),
        "conv1.b": np.zeros(c),
        "embed1": np.ones((n_levels, c)),
        "conv2.w": rng.normal(0, np.sqrt(2.0 / (9 * c)), (9 * c, c)),
        "conv2.b": np.zeros(c),
        "embed2": np.ones((n_levels, c)),
        "conv3.w": rng.normal(0, 0.1 * np.sqrt(1.0 / (9 * c)), (9 * c, 1)),
        "conv3.b": np.zeros(1),
        "skip": np.zeros(n_levels),
    }
    return {k: v.astype(dtype) for k, v in p.items()}


def network_forward(params: dict, x: np.ndarray, lv: np.ndarray, cache: bool = False):
    """Network output ``r`` for slices ``x`` (B, H, W) at per-sample level indices ``lv``."""
    if "conv1.w" not in params:
        r = params["skip"][lv][:, None, None] * x + params["bias"][lv][:, None, None]
        return (r, {"x": x}) if cache else r
    x4 = x[..., None]
    z1 = conv3x3(x4, params["conv1.w"]) + params["conv1.b"]
    g1 = params["embed1"][lv][:, None, None, :]
    a1 = z1 * g1
    h1, s1 = _silu(a1)
    z2 = conv3x3(h1, params["conv2.w"]) + params["conv2.b"]
    g2 = params["embed2"][lv][:, None, None, :]
    a2 = z2 * g2
    h2, s2 = _silu(a2)
    out = conv3x3(h2, params["conv3.w"])[..., 0] + params["conv3.b"][0]
    r = out + params["skip"][lv][:, None, None] * x
    if not cache:
        return r
    return r, dict(x=x, z1=z1, g1=g1, a1=a1, s1=s1, h1=h1, z2=z2, g2=g2, a2=a2, s2=s2, h2=h2)


def _level_sum(values: np.ndarray, lv: np.ndarray, n_levels: int) -> np.ndarray:
    out = np.zeros((n_levels,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, lv, values)
    return out


def network_backward(params: dict, cache: dict, lv: np.ndarray, dr: np.ndarray) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter, given ``dL/dr``."""
    x = cache["x"]
    n_levels = params["skip"].shape[0]
    grads = {"skip": _level_sum((dr * x).sum(axis=(1, 2)), lv, n_levels)}
    if "conv1.w" not in params:
        grads["bias"] = _level_sum(dr.sum(axis=(1, 2)), lv, n_levels)
        return grads
    d3 = dr[..., None]
    grads["conv3.w"], dh2 = conv3x3_backward(cache["h2"], params["conv3.w"], d3)
    grads["conv3.b"] = np.array([dr.sum()], dtype=dr.dtype)
    s2, a2 = cache["s2"], cache["a2"]
    da2 = dh2 * (s2 * (1.0 + a2 * (1.0 - s2)))
    grads["embed2"] = _level_sum((da2 * cache["z2"]).sum(axis=(1, 2)), lv, n_levels)
    dz2 = da2 * cache["g2"]
    grads["conv2.w"], dh1 = conv3x3_backward(cache["h1"], params["conv2.w"], dz2)
    grads["conv2.b"] = dz2.sum(axis=(0, 1, 2))
    s1, a1 = cache["s1"], cache["a1"]
    da1 = dh1 * (s1 * (1.0 + a1 * (1.0 - s1)))
    grads["embed1"] = _level_sum((da1 * cache["z1"]).sum(axis=(1, 2)), lv, n_levels)
    dz1 = da1 * cache["g1"]
    grads["conv1.w"], _ = conv3x3_backward(x[..., None], params["conv1.w"], dz1)
    grads["conv1.b"] = dz1.sum(axis=(0, 1, 2))
    return grads


def dsm_loss(params: dict, x_clean: np.ndarray, z: np.ndarray, lv: np.ndarray, sigmas: np.ndarray, grad: bool = False):
    """Sigma^2-weighted DSM loss ``0.5 * mean((sigma s(x + sigma z) - sigma target)^2)``."""
    sig = sigmas[lv][:, None, None].astype(x_clean.dtype)
    noisy = x_clean + sig * z
    r, cache = network_forward(params, noisy, lv, cache=True)
    resid = r + z
    loss = 0.5 * float(np.mean(resid.astype(np.float64) ** 2))
    if not grad:
        return loss
    return loss, network_backward(params, cache, lv, resid / resid.size)


@dataclass
class LearnedScore(ScoreModel):
    arch: str
    params: dict
    schedule: SigmaSchedule
    channels: int = 32
    loss_history: list = field(default_factory=list, repr=False)
    variant = "learned"

    def __post_init__(self):
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"parameter {k} is not finite")

    @property
    def layout(self):
        return LINEAR_LAYOUT if self.arch == "linear" else CONV3_LAYOUT

    def __call__(self, batch, level, chunk: int = 64):
        x = np.asarray(batch)
        dtype = self.params["skip"].dtype
        out = np.empty(x.shape, dtype=np.float64)
        sigma = self.schedule[level]
        for s in range(0, len(x), chunk):
            xb = x[s:s + chunk].astype(dtype)
            lv = np.full(len(xb), level, dtype=np.int64)
            out[s:s + chunk] = network_forward(self.params, xb, lv) / sigma
        return out

    def descriptor(self):
        return f"learned arch={self.arch} channels={self.channels} levels={self.schedule.count}"

    def parameter_vector(self):
        return np.concatenate([self.params[k].ravel() for k in self.layout]).astype(np.float32)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 10_000
    batch_size: int = 16
    seed: int = 0
    arch: str = "conv3"
    channels: int = 32
    lr_decay: bool = True

    def __post_init__(self):
        if self.learning_rate < 0 or self.steps < 0 or self.batch_size < 1 or self.channels < 1:
            raise ValueError("training hyper-parameters must be positive")


class Adam:
    def __init__(self, params: dict, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            g = g.astype(params[k].dtype)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= (lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(params[k].dtype)


def dsm_train(slices, schedule: SigmaSchedule, cfg: TrainConfig = TrainConfig(), callback=None) -> LearnedScore:
    """Fit a noise-conditioned score network to 2D training slices."""
    data = np.asarray(slices, dtype=np.float32)
    if data.ndim != 3 or len(data) == 0:
        raise ValueError(f"expected a non-empty (N, H, W) slice stack, got shape {data.shape}")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.arch, schedule.count, cfg.channels, seed=cfg.seed)
    opt = Adam(params, cfg.learning_rate)
    sigmas = np.asarray(schedule.levels, dtype=np.float32)
    history = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(data), cfg.batch_size)
        lv = rng.integers(0, schedule.count, cfg.batch_size)
        z = rng.standard_normal((cfg.batch_size,) + data.shape[1:], dtype=np.float32)
        loss, grads = dsm_loss(params, data[idx], z, lv, sigmas, grad=True)
        lr = cfg.learning_rate
        if cfg.lr_decay:
            lr *= 0.5 * (1.0 + np.cos(np.pi * step / max(cfg.steps, 1)))
        opt.step(params, grads, lr)
        history.append(loss)
        if callback is not None:
            callback(step, loss)
    return LearnedScore(cfg.arch, params, schedule, cfg.channels, history)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<I", len(raw)) + raw


def save_model(path, model: ScoreModel) -> bytes:
    """Write a TSCM0001 checkpoint; returns the bytes written."""
    from .io import atomic_write_bytes

    levels = np.asarray(model.schedule.levels, dtype="<f4")
    params = model.parameter_vector().astype("<f4")
    blob = (
        SCORE_MAGIC
        + _pack_str(model.descriptor())
        + struct.pack("<I", levels.size) + levels.tobytes()
        + struct.pack("<I", params.size) + params.tobytes()
    )
    if path is not None:
        atomic_write_bytes(path, blob)
    return blob


def _parse_descriptor(desc: str) -> tuple[str, dict]:
    head, *rest = desc.split()
    return head, dict(item.split("=", 1) for item in rest)


def load_model(path_or_bytes) -> ScoreModel:
    blob = path_or_bytes if isinstance(path_or_bytes, bytes) else Path(path_or_bytes).read_bytes()
    if blob[:8] != SCORE_MAGIC:
        raise ValueError("not a TSCM0001 checkpoint")
    off = 8
    (n,) = struct.unpack_from("<I", blob, off)
    desc = blob[off + 4:off + 4 + n].decode()
    off += 4 + n
    (nl,) = struct.unpack_from("<I", blob, off)
    levels = np.frombuffer(blob, "<f4", nl, off + 4).astype(np.float64)
    off += 4 + 4 * nl
    (npar,) = struct.unpack_from("<I", blob, off)
    flat = np.frombuffer(blob, "<f4", npar, off + 4).astype(np.float32)
    schedule = SigmaSchedule(tuple(levels))
    head, kv = _parse_descriptor(desc)
    if head == "analytic_gaussian":
        return GaussianScore(float(kv["mu"]), float(kv["sigma_d"]), schedule)
    if head == "analytic_gmm":
        vec = lambda key: tuple(float(v) for v in kv[key].split(","))  # noqa: E731
        return GMMScore(vec("weights"), vec("means"), vec("sigmas"), schedule)
    if head != "learned":
        raise ValueError(f"unknown model descriptor {desc!r}")
    arch, channels = kv["arch"], int(kv["channels"])
    template = init_params(arch, schedule.count, channels)
    layout = LINEAR_LAYOUT if arch == "linear" else CONV3_LAYOUT
    params, pos = {}, 0
    for k in layout:
        size = template[k].size
        params[k] = flat[pos:pos + size].reshape(template[k].shape).copy()
        pos += size
    if pos != flat.size:
        raise ValueError("checkpoint parameter count does not match architecture")
    return LearnedScore(arch, params, schedule, channels)
