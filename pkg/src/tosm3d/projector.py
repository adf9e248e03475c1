"""CT forward model: Siddon ray tracing, its exact adjoint, and FBP/FDK.

The projector is materialised as a sparse system matrix (rays x voxels) whose
entries are exact ray/voxel intersection lengths, so back projection is the
matrix transpose and the dot-product identity holds to rounding error.

Coordinates: the volume is centred on the rotation axis (z). For view angle
``theta`` the source direction is ``e = (cos theta, sin theta, 0)``, the
detector ``u`` axis is ``(-sin theta, cos theta, 0)`` and ``v`` is z. In cone
beam mode the source sits at ``source_to_center * e`` and the detector plane
at ``-center_to_detector * e``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .volume import Volume3D

MODES = ("parallel3d", "conebeam")
FILTERS = ("ramp", "shepp_logan")

# desk-scale analogue of the 50 cm / 50 cm cone-beam setup with a 1024^2,
# 0.08 mm flat panel reconstructing a 512^3 grid.
REFERENCE_SOURCE_TO_CENTER = 500.0
REFERENCE_CENTER_TO_DETECTOR = 500.0
REFERENCE_DETECTOR_PITCH = 0.08
REFERENCE_DETECTOR_BINS = 1024
REFERENCE_GRID = 512


class GeometryError(ValueError):
    """Geometry is malformed or inconsistent with the volume grid."""


@dataclass(frozen=True)
class Geometry:
    """Acquisition geometry together with the reconstruction grid it images."""

    mode: str
    num_views: int
    nu: int
    nv: int
    du: float
    dv: float
    vol_shape: tuple[int, int, int]
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    source_to_center: float = REFERENCE_SOURCE_TO_CENTER
    center_to_detector: float = REFERENCE_CENTER_TO_DETECTOR
    angles: tuple[float, ...] | None = field(default=None)

    def __post_init__(self):
        if self.mode not in MODES:
            raise GeometryError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.num_views < 1 or self.nu < 1 or self.nv < 1:
            raise GeometryError("num_views, nu and nv must be positive")
        if self.du <= 0 or self.dv <= 0:
            raise GeometryError("detector pitches must be positive")
        if self.mode == "conebeam" and (self.source_to_center <= 0 or self.center_to_detector <= 0):
            raise GeometryError("cone-beam distances must be positive")
        if len(self.vol_shape) != 3 or min(self.vol_shape) < 1:
            raise GeometryError(f"bad volume shape {self.vol_shape}")
        if min(self.voxel_size) <= 0:
            raise GeometryError("voxel sizes must be positive")
        object.__setattr__(self, "vol_shape", tuple(int(d) for d in self.vol_shape))
        object.__setattr__(self, "voxel_size", tuple(float(s) for s in self.voxel_size))
        for name in ("du", "dv", "source_to_center", "center_to_detector"):
            object.__setattr__(self, name, float(getattr(self, name)))
        raw = 2.0 * np.pi * np.arange(self.num_views) / self.num_views if self.angles is None else self.angles
        angles = tuple(float(a) for a in raw)
        if len(angles) != self.num_views:
            raise GeometryError(f"num_views={self.num_views} but {len(angles)} angles given")
        object.__setattr__(self, "angles", angles)
        self._check_field_of_view()

    @property
    def magnification(self) -> float:
        if self.mode == "parallel3d":
            return 1.0
        return (self.source_to_center + self.center_to_detector) / self.source_to_center

    @property
    def sino_shape(self) -> tuple[int, int, int]:
        return (self.num_views, self.nu, self.nv)

    def _check_field_of_view(self):
        nx, ny, nz = self.vol_shape
        sx, sy, sz = self.voxel_size
        fov_u = self.nu * self.du / self.magnification
        fov_v = self.nv * self.dv / self.magnification
        tol = 1.0 - 1e-6
        if fov_u < tol * min(nx * sx, ny * sy) or fov_v < tol * nz * sz:
            raise GeometryError(
                f"detector field of view ({fov_u:.3g} x {fov_v:.3g} mm at the rotation axis) "
                f"does not cover the volume grid {self.vol_shape} x {self.voxel_size}"
            )

    @classmethod
    def parallel(cls, n: int, num_views: int, voxel: float = 1.0, angles=None) -> "Geometry":
        """Parallel beam, one detector bin per voxel column."""
        return cls("parallel3d", num_views, n, n, voxel, voxel, (n, n, n), (voxel,) * 3, angles=angles)

    @classmethod
    def conebeam_desk(cls, n: int, num_views: int = 29) -> "Geometry":
        """Cone beam with the 50/50 cm distances and 2:1 detector/grid ratio scaled to ``n``."""
        scale = REFERENCE_GRID / n
        pitch = REFERENCE_DETECTOR_PITCH * scale
        bins = REFERENCE_DETECTOR_BINS * n // REFERENCE_GRID
        mag = (REFERENCE_SOURCE_TO_CENTER + REFERENCE_CENTER_TO_DETECTOR) / REFERENCE_SOURCE_TO_CENTER
        voxel = bins * pitch / mag / n
        return cls("conebeam", num_views, bins, bins, pitch, pitch, (n, n, n), (voxel,) * 3)

    def to_sidecar(self) -> dict:
        return {
            "geometry": {
                "mode": self.mode,
                "num_views": self.num_views,
                "nu": self.nu,
                "nv": self.nv,
                "du": repr(self.du),
                "dv": repr(self.dv),
                "d_source": repr(self.source_to_center),
                "d_detector": repr(self.center_to_detector),
            },
            "volume": {
                "nx": self.vol_shape[0],
                "ny": self.vol_shape[1],
                "nz": self.vol_shape[2],
                "sx": repr(self.voxel_size[0]),
                "sy": repr(self.voxel_size[1]),
                "sz": repr(self.voxel_size[2]),
            },
            "angles": {"values": " ".join(repr(a) for a in self.angles)},
        }

    @classmethod
    def from_sidecar(cls, sections: dict) -> "Geometry":
        try:
            g, v = sections["geometry"], sections["volume"]
            angles = None
            if "angles" in sections and sections["angles"].get("values", "").strip():
                angles = tuple(float(a) for a in sections["angles"]["values"].split())
            return cls(
                mode=g["mode"],
                num_views=int(g["num_views"]),
                nu=int(g["nu"]),
                nv=int(g["nv"]),
                du=float(g["du"]),
                dv=float(g["dv"]),
                vol_shape=(int(v["nx"]), int(v["ny"]), int(v["nz"])),
                voxel_size=(float(v["sx"]), float(v["sy"]), float(v["sz"])),
                source_to_center=float(g["d_source"]),
                center_to_detector=float(g["d_detector"]),
                angles=angles,
            )
        except KeyError as exc:
            raise GeometryError(f"geometry sidecar missing key {exc}") from None


@dataclass(frozen=True)
class Sinogram:
    geometry: Geometry
    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True)
        if arr.shape != self.geometry.sino_shape:
            raise GeometryError(f"sinogram shape {arr.shape} != geometry {self.geometry.sino_shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("sinogram values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)


# ---------------------------------------------------------------------------
# ray construction and Siddon traversal
# ---------------------------------------------------------------------------


def _ray_endpoints(geom: Geometry) -> tuple[np.ndarray, np.ndarray]:
    """Start/end points of every ray, ordered (view, u, v) C-style."""
    th = np.asarray(geom.angles)
    e = np.stack([np.cos(th), np.sin(th), np.zeros_like(th)], axis=1)
    eu = np.stack([-np.sin(th), np.cos(th), np.zeros_like(th)], axis=1)
    ez = np.array([0.0, 0.0, 1.0])
    u = (np.arange(geom.nu) - (geom.nu - 1) / 2) * geom.du
    v = (np.arange(geom.nv) - (geom.nv - 1) / 2) * geom.dv
    # detector offsets (views, nu, nv, 3)
    offs = u[None, :, None, None] * eu[:, None, None, :] + v[None, None, :, None] * ez
    if geom.mode == "parallel3d":
        half = 0.5 * np.linalg.norm(np.multiply(geom.vol_shape, geom.voxel_size)) + 1.0
        start = offs + half * e[:, None, None, :]
        end = offs - half * e[:, None, None, :]
    else:
        src = geom.source_to_center * e
        start = np.broadcast_to(src[:, None, None, :], offs.shape)
        end = offs - geom.center_to_detector * e[:, None, None, :]
    return start.reshape(-1, 3), end.reshape(-1, 3)


def _siddon_chunk(p0, p1, shape, spacing):
    """Intersection lengths for a block of rays; returns (ray, voxel, length)."""
    shape = np.asarray(shape)
    spacing = np.asarray(spacing)
    lo = -0.5 * shape * spacing
    d = p1 - p0
    length = np.linalg.norm(d, axis=1)
    n_rays = p0.shape[0]

    amin = np.zeros(n_rays)
    amax = np.ones(n_rays)
    alphas = []
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(3):
            da = d[:, a]
            flat = np.abs(da) < 1e-12
            planes = lo[a] + np.arange(shape[a] + 1) * spacing[a]
            al = (planes[None, :] - p0[:, a, None]) / np.where(flat, 1.0, da)[:, None]
            a_first, a_last = al[:, 0], al[:, -1]
            amin = np.maximum(amin, np.where(flat, -np.inf, np.minimum(a_first, a_last)))
            amax = np.minimum(amax, np.where(flat, np.inf, np.maximum(a_first, a_last)))
            # a ray parallel to these planes must lie strictly inside the slab
            outside = flat & ((p0[:, a] <= lo[a]) | (p0[:, a] >= lo[a] + shape[a] * spacing[a]))
            amax = np.where(outside, -np.inf, amax)
            al[flat] = np.nan
            alphas.append(al)
    hit = amax > amin
    allal = np.concatenate([amin[:, None], amax[:, None]] + alphas, axis=1)
    inside = (allal > amin[:, None]) & (allal < amax[:, None])
    allal = np.where(inside, allal, amax[:, None])
    allal[:, 0] = amin
    allal.sort(axis=1)
    allal = allal[hit]
    if allal.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0)
    ray_ids = np.nonzero(hit)[0]
    seg = np.diff(allal, axis=1) * length[hit, None]
    mid = 0.5 * (allal[:, 1:] + allal[:, :-1])
    pos = p0[hit, None, :] + mid[..., None] * d[hit, None, :]
    idx = np.floor((pos - lo) / spacing).astype(np.int64)
    idx = np.clip(idx, 0, shape - 1)
    keep = seg > 1e-9 * length[hit, None]
    vox = idx[..., 0] + shape[0] * (idx[..., 1] + shape[1] * idx[..., 2])
    rows = np.broadcast_to(ray_ids[:, None], seg.shape)
    return rows[keep], vox[keep], seg[keep]


@lru_cache(maxsize=8)
def system_matrix(geom: Geometry) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """The ray/voxel intersection-length matrix and its transpose (both CSR)."""
    p0, p1 = _ray_endpoints(geom)
    n_rays = p0.shape[0]
    n_vox = int(np.prod(geom.vol_shape))
    chunk = max(1, 2_000_000 // (sum(geom.vol_shape) + 5))
    rows, cols, vals = [], [], []
    for s in range(0, n_rays, chunk):
        r, c, v = _siddon_chunk(p0[s:s + chunk], p1[s:s + chunk], geom.vol_shape, geom.voxel_size)
        rows.append(r + s)
        cols.append(c)
        vals.append(v)
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rays, n_vox),
    )
    mat.sum_duplicates()
    mat.sort_indices()
    mat_t = mat.T.tocsr()
    mat_t.sort_indices()
    return mat, mat_t


def _volume_array(vol, geom: Geometry) -> np.ndarray:
    arr = vol.values if isinstance(vol, Volume3D) else np.asarray(vol, dtype=np.float64)
    if arr.shape != geom.vol_shape:
        raise GeometryError(f"volume shape {arr.shape} does not match geometry grid {geom.vol_shape}")
    if isinstance(vol, Volume3D) and not np.allclose(vol.spacing, geom.voxel_size):
        raise GeometryError(f"volume spacing {vol.spacing} != geometry voxel size {geom.voxel_size}")
    return arr


def project_array(arr: np.ndarray, geom: Geometry) -> np.ndarray:
    mat, _ = system_matrix(geom)
    return (mat @ arr.ravel(order="F")).reshape(geom.sino_shape)


def backproject_array(sino: np.ndarray, geom: Geometry) -> np.ndarray:
    _, mat_t = system_matrix(geom)
    return (mat_t @ np.asarray(sino).reshape(-1)).reshape(geom.vol_shape, order="F")


def forward_project(vol, geom: Geometry) -> Sinogram:
    """Line integrals of ``vol`` along every detector ray."""
    return Sinogram(geom, project_array(_volume_array(vol, geom), geom))


def back_project(sino, geom: Geometry) -> Volume3D:
    """Exact adjoint of :func:`forward_project`."""
    values = sino.values if isinstance(sino, Sinogram) else np.asarray(sino, dtype=np.float64)
    if values.shape != geom.sino_shape:
        raise GeometryError(f"sinogram shape {values.shape} != geometry {geom.sino_shape}")
    return Volume3D(backproject_array(values, geom), geom.voxel_size)


# ---------------------------------------------------------------------------
# analytic reconstruction
# ---------------------------------------------------------------------------


def ramp_filter(n: int, pitch: float, kind: str = "ramp") -> np.ndarray:
    """Frequency response (fft order) of the ramp filter on ``n`` samples."""
    if kind not in FILTERS:
        raise ValueError(f"unsupported filter {kind!r}; expected one of {FILTERS}")
    freq = np.fft.fftfreq(n, d=pitch)
    resp = np.abs(freq)
    if kind == "shepp_logan":
        nyquist = 0.5 / pitch
        resp = resp * np.sinc(freq / (2.0 * nyquist))
    return resp


def _filter_rows(sino: np.ndarray, pitch: float, kind: str) -> np.ndarray:
    # generous zero padding: with a DC-free sampled ramp, short padding biases
    # the reconstructed level low (about 6 % at 2x, under 1 % at 8x)
    nu = sino.shape[1]
    n_pad = int(2 ** np.ceil(np.log2(8 * nu)))
    resp = ramp_filter(n_pad, pitch, kind)
    padded = np.zeros((sino.shape[0], n_pad, sino.shape[2]))
    padded[:, :nu] = sino
    out = np.fft.ifft(np.fft.fft(padded, axis=1) * resp[None, :, None], axis=1).real
    return out[:, :nu]


def _interp2(img: np.ndarray, fu: np.ndarray, fv: np.ndarray) -> np.ndarray:
    """Bilinear lookup with zero outside the detector."""
    nu, nv = img.shape
    u0 = np.floor(fu).astype(np.int64)
    v0 = np.floor(fv).astype(np.int64)
    wu = fu - u0
    wv = fv - v0
    out = np.zeros(fu.shape)
    for du_, wu_ in ((0, 1 - wu), (1, wu)):
        for dv_, wv_ in ((0, 1 - wv), (1, wv)):
            iu, iv = u0 + du_, v0 + dv_
            ok = (iu >= 0) & (iu < nu) & (iv >= 0) & (iv < nv)
            out[ok] += (wu_ * wv_)[ok] * img[iu[ok], iv[ok]]
    return out


def fbp_reconstruct(sino, geom: Geometry, filter: str = "ramp") -> Volume3D:
    """Filtered backprojection (parallel3d) or FDK (conebeam)."""
    if filter not in FILTERS:
        raise ValueError(f"unsupported filter {filter!r}; expected one of {FILTERS}")
    values = sino.values if isinstance(sino, Sinogram) else np.asarray(sino, dtype=np.float64)
    if values.shape != geom.sino_shape:
        raise GeometryError(f"sinogram shape {values.shape} != geometry {geom.sino_shape}")
    nx, ny, nz = geom.vol_shape
    sx, sy, sz = geom.voxel_size
    x = (np.arange(nx) - (nx - 1) / 2) * sx
    y = (np.arange(ny) - (ny - 1) / 2) * sy
    z = (np.arange(nz) - (nz - 1) / 2) * sz
    X, Y, Z = np.meshgrid(x, y, z, indexing="ij")
    u_det = (np.arange(geom.nu) - (geom.nu - 1) / 2) * geom.du
    v_det = (np.arange(geom.nv) - (geom.nv - 1) / 2) * geom.dv
    out = np.zeros(geom.vol_shape)
    arc = geom.num_views
    # views spread over the full circle: every line is measured twice
    weight = np.pi / arc

    if geom.mode == "parallel3d":
        q = _filter_rows(values, geom.du, filter)
        for k, th in enumerate(geom.angles):
            s = -X * np.sin(th) + Y * np.cos(th)
            fu = s / geom.du + (geom.nu - 1) / 2
            fv = Z / geom.dv + (geom.nv - 1) / 2
            out += _interp2(q[k], fu, fv)
        return Volume3D(out * weight, geom.voxel_size)

    dso = geom.source_to_center
    dsd = geom.source_to_center + geom.center_to_detector
    u_iso = u_det * dso / dsd
    v_iso = v_det * dso / dsd
    cos_w = dso / np.sqrt(dso**2 + u_iso[:, None] ** 2 + v_iso[None, :] ** 2)
    q = _filter_rows(values * cos_w[None], geom.du * dso / dsd, filter)
    for k, th in enumerate(geom.angles):
        t = X * np.cos(th) + Y * np.sin(th)
        s = -X * np.sin(th) + Y * np.cos(th)
        U = dso - t
        fu = (s * dsd / U) / geom.du + (geom.nu - 1) / 2
        fv = (Z * dsd / U) / geom.dv + (geom.nv - 1) / 2
        out += (dso / U) ** 2 * _interp2(q[k], fu, fv)
    return Volume3D(out * weight, geom.voxel_size)
