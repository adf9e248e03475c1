"""``recon`` command-line front end.

Each subcommand maps to one task, reads an INI experiment config (optional),
applies ``--seed``/``--out``/``--set`` overrides and writes its artifacts into
the output directory. Files are produced in a staging directory and renamed
into place only after the whole task succeeded, followed by ``manifest.json``
listing every artifact with its SHA-256.

Exit status: 0 success, 1 runtime failure, 2 invalid configuration.
"""
from __future__ import annotations

import argparse
import hashlib
import io as _io
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import REQUIRED, ConfigError, ExperimentConfig, default_paper_protocol, validate
from .io import atomic_write_bytes, decode_tvol, encode_tvol, read_sidecar, read_tvol
from .metrics import evaluate, nps, psnr
from .mri import KSpaceData, MaskSpec, fft2_centered, make_mask, read_mask, undersample, zero_filled
from .projector import FILTERS, MODES, Geometry, GeometryError, Sinogram, fbp_reconstruct, forward_project
from .score import TrainConfig, dsm_train, load_model, make_schedule, save_model, sigma_max_heuristic
from .sirt import SirtConfig, projection_residual, sirt_solve
from .tosm import SAMPLERS, SamplerConfig, reconstruct_ct, reconstruct_mri
from .volume import PHANTOM_KINDS, PhantomSpec, SpecificationError, Volume3D, make_phantom

COMMANDS = {
    "phantom": "phantom",
    "project": "project",
    "train": "train",
    "fbp": "recon_fbp",
    "sirt": "recon_sirt",
    "tosm-ct": "recon_tosm_ct",
    "tosm-mri": "recon_tosm_mri",
    "mask": "mask",
    "metrics": "metrics",
    "nps": "nps",
}


class Artifacts:
    """Stages output files next to ``out`` and moves them into place on commit."""

    def __init__(self, out: Path):
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=".stage-", dir=self.out))
        self.names: list[str] = []
        self.metrics: dict = {}

    def add(self, name: str, data: bytes | str) -> None:
        if isinstance(data, str):
            data = data.encode()
        with open(self.stage / name, "wb") as fh:
            fh.write(data)
        self.names.append(name)

    def commit(self, task: str) -> dict:
        entries = []
        for name in self.names:
            digest = hashlib.sha256((self.stage / name).read_bytes()).hexdigest()
            entries.append({"path": name, "sha256": digest})
        manifest = {"task": task, "artifacts": entries, "metrics": self.metrics, "version": __version__}
        self.add("manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        for name in self.names:
            os.replace(self.stage / name, self.out / name)
        self.discard()
        return manifest

    def discard(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


def _plot_png(series: dict, xlabel: str, ylabel: str, logy: bool = False) -> bytes | None:
    """Line plot as PNG bytes, or None when matplotlib is unavailable."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    for label, (x, y) in series.items():
        ax.plot(x, y, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    buf = _io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# shared loaders
# ---------------------------------------------------------------------------


def _load_volume(cfg, key, section="inputs", required=True):
    path = cfg.get_path(section, key, REQUIRED if required else None)
    if path is None:
        return None
    return read_tvol(path)


def _load_sinogram(cfg) -> tuple[Sinogram, Geometry]:
    path = cfg.get_path("inputs", "sinogram", REQUIRED)
    side = Path(str(path) + ".ini")
    if not side.exists():
        raise cfg.error(f"sinogram geometry sidecar '{side}' is missing", "inputs", "sinogram")
    geom = Geometry.from_sidecar(read_sidecar(side))
    values, _ = decode_tvol(path.read_bytes())
    return Sinogram(geom, values.astype(np.float64)), geom


def _truth_metrics(arts: Artifacts, cfg, recon: np.ndarray):
    truth = _load_volume(cfg, "truth", required=False)
    if truth is not None:
        t = np.abs(truth.values).astype(np.float64)
        # score what was written: TVOL stores float32 samples
        r = np.abs(recon.astype(np.complex64 if np.iscomplexobj(recon) else np.float32)).astype(np.float64)
        if r.shape != t.shape:
            raise cfg.error(f"truth shape {t.shape} != reconstruction shape {r.shape}", "inputs", "truth")
        arts.metrics["psnr"] = float(psnr(r, t))
    return truth


def _sampler_config(cfg, seed: int) -> SamplerConfig:
    s = "sampler"
    kw = dict(seed=seed)
    weights = cfg.get_floats(s, "weights")
    if weights is not None:
        if len(weights) != 3:
            raise cfg.error("sampler.weights needs three values", s, "weights")
        kw["weights"] = weights
    for key, getter in (("iters_per_level", cfg.get_int), ("sirt_inner", cfg.get_int),
                        ("base_step", cfg.get_float), ("dc_weight", cfg.get_float),
                        ("gamma1", cfg.get_float), ("noise_scale", cfg.get_float)):
        val = getter(s, key)
        if val is not None:
            kw[key] = val
    sampler = cfg.get_str(s, "sampler", None, choices=SAMPLERS)
    if sampler:
        kw["sampler"] = sampler
    if cfg.get_int("sirt", "iterations") is not None and "sirt_inner" not in kw:
        kw["sirt_inner"] = cfg.get_int("sirt", "iterations", minimum=0)
    kw["sirt_relaxation"] = cfg.get_float("sirt", "relaxation", 1.0)
    kw["nonneg_clamp"] = cfg.get_bool("sirt", "nonneg_clamp", True)
    try:
        return SamplerConfig(**kw)
    except SpecificationError as exc:
        raise cfg.error(str(exc), s) from None


def _trace_outputs(arts, rec):
    arts.add("trace.csv", rec.trace_csv())
    if rec.trace:
        it = [r["iteration"] for r in rec.trace]
        png = _plot_png({"residual": (it, [r["residual"] for r in rec.trace])}, "iteration", "data residual", logy=True)
        if png is not None:
            arts.add("trace.png", png)


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------


def task_phantom(cfg, arts, seed):
    kind = cfg.get_str("phantom", "kind", "shepp3d", choices=PHANTOM_KINDS)
    spec = PhantomSpec(
        kind=kind,
        n=cfg.get_int("phantom", "n", 32),
        intensity=cfg.get_float("phantom", "intensity", 1.0),
        half_width=cfg.get_float("phantom", "half_width"),
        seed=seed if seed is not None else 0,
        count=cfg.get_int("phantom", "count", 8, minimum=0),
    )
    vol = make_phantom(spec)
    arts.add("phantom.tvol", encode_tvol(vol.values, vol.spacing))


def _geometry(cfg, n) -> Geometry:
    mode = cfg.get_str("geometry", "mode", "parallel3d", choices=MODES)
    views = cfg.get_int("geometry", "num_views", 29, minimum=1)
    if mode == "parallel3d":
        return Geometry.parallel(n, views)
    geom = Geometry.conebeam_desk(n, views)
    d_src = cfg.get_float("geometry", "d_source", geom.source_to_center)
    d_det = cfg.get_float("geometry", "d_detector", geom.center_to_detector)
    if (d_src, d_det) != (geom.source_to_center, geom.center_to_detector):
        mag = (d_src + d_det) / d_src
        voxel = geom.nu * geom.du / mag / n
        geom = Geometry("conebeam", views, geom.nu, geom.nv, geom.du, geom.dv, (n,) * 3, (voxel,) * 3, d_src, d_det)
    return geom


def task_project(cfg, arts, seed):
    vol = _load_volume(cfg, "volume")
    if not vol.is_cubic:
        raise cfg.error(f"projection needs a cubic volume, got {vol.dims}", "inputs", "volume")
    geom = _geometry(cfg, vol.dims[0])
    # the volume is imaged on the geometry's voxel grid
    sino = forward_project(Volume3D(vol.values.astype(np.float64), geom.voxel_size), geom)
    values = sino.values
    noise = cfg.get_float("geometry", "noise_level", 0.0)
    if noise > 0:
        if seed is None:
            cfg.require_seed()
        rng = np.random.default_rng(seed)
        values = values + noise * np.abs(values).max() * rng.standard_normal(values.shape)
    arts.add("sinogram.tvol", encode_tvol(values, (1.0, geom.du, geom.dv)))
    arts.add("sinogram.tvol.ini", _sidecar_text(geom.to_sidecar()))


def _sidecar_text(sections: dict) -> str:
    lines = []
    for name, body in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in body.items())
        lines.append("")
    return "\n".join(lines)


def _training_slices(cfg, seed):
    axes = cfg.get_str("train", "axes", "transaxial", choices=("transaxial", "all"))
    paths = cfg.get_str("inputs", "volumes")
    if paths:
        vols = []
        for p in paths.replace(",", " ").split():
            if not Path(p).exists():
                raise cfg.error(f"training volume '{p}' does not exist", "inputs", "volumes")
            vols.append(read_tvol(p).values.astype(np.float64))
    else:
        seeds = cfg.get_ints("train", "phantom_seeds", tuple(range(100, 108)))
        n = cfg.get_int("phantom", "n", 32)
        count = cfg.get_int("phantom", "count", 8)
        vols = [make_phantom(PhantomSpec("random_ellipsoids", n, seed=s, count=count)).values for s in seeds]
    shapes = {v.shape for v in vols}
    if len(shapes) != 1 or len(set(next(iter(shapes)))) != 1:
        raise cfg.error(f"training volumes must be cubes of one size, got {sorted(shapes)}", "inputs", "volumes")
    stacks = []
    for v in vols:
        for axis in ((2,) if axes == "transaxial" else (0, 1, 2)):
            stacks.append(np.moveaxis(v, axis, 0))
    return np.concatenate(stacks)


def task_train(cfg, arts, seed):
    slices = _training_slices(cfg, seed)
    levels = cfg.get_int("train", "levels", 12, minimum=2)
    sigma_min = cfg.get_float("train", "sigma_min", 0.01)
    sigma_max = cfg.get_float("train", "sigma_max") or sigma_max_heuristic(slices)
    try:
        schedule = make_schedule(sigma_max, sigma_min, levels)
        tc = TrainConfig(
            learning_rate=cfg.get_float("train", "learning_rate", 1e-3),
            steps=cfg.get_int("train", "steps", 10_000, minimum=0),
            batch_size=cfg.get_int("train", "batch_size", 16, minimum=1),
            seed=seed,
            arch=cfg.get_str("train", "arch", "conv3", choices=("conv3", "linear")),
            channels=cfg.get_int("train", "channels", 32, minimum=1),
        )
    except ValueError as exc:
        raise cfg.error(str(exc), "train") from None
    model = dsm_train(slices, schedule, tc)
    arts.add("model.tscm", save_model(None, model))
    hist = np.asarray(model.loss_history)
    arts.add("loss.csv", "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(hist.tolist())))
    if hist.size:
        png = _plot_png({"loss": (np.arange(hist.size), hist)}, "step", "DSM loss", logy=True)
        if png is not None:
            arts.add("loss.png", png)
    arts.metrics["final_loss"] = float(hist[-max(1, hist.size // 20):].mean()) if hist.size else None


def task_fbp(cfg, arts, seed):
    sino, geom = _load_sinogram(cfg)
    recon = fbp_reconstruct(sino, geom, cfg.get_str("fbp", "filter", "ramp", choices=FILTERS))
    arts.add("recon.tvol", encode_tvol(recon.values, recon.spacing))
    _truth_metrics(arts, cfg, recon.values)


def task_sirt(cfg, arts, seed):
    sino, geom = _load_sinogram(cfg)
    try:
        sc = SirtConfig(
            iterations=cfg.get_int("sirt", "iterations", 20, minimum=0),
            relaxation=cfg.get_float("sirt", "relaxation", 1.0),
            nonneg_clamp=cfg.get_bool("sirt", "nonneg_clamp", True),
        )
    except ValueError as exc:
        raise cfg.error(str(exc), "sirt") from None
    init = _load_volume(cfg, "init", required=False)
    res = []
    recon = sirt_solve(sino, geom, init=None if init is None else init.values.astype(np.float64), cfg=sc,
                       callback=lambda it, v: res.append(projection_residual(v, sino, geom)))
    arts.add("recon.tvol", encode_tvol(recon.values, recon.spacing))
    arts.add("trace.csv", "iteration,residual\n" + "".join(f"{i},{r!r}\n" for i, r in enumerate(res)))
    _truth_metrics(arts, cfg, recon.values)


def task_tosm_ct(cfg, arts, seed):
    sino, geom = _load_sinogram(cfg)
    model = load_model(cfg.get_path("inputs", "model", REQUIRED))
    sc = _sampler_config(cfg, seed)
    truth = _load_volume(cfg, "truth", required=False)
    rec = reconstruct_ct(sino, geom, model, sc, truth=None if truth is None else truth.values)
    arts.add("recon.tvol", encode_tvol(rec.volume.values, rec.volume.spacing))
    _trace_outputs(arts, rec)
    _truth_metrics(arts, cfg, rec.volume.values)


def _load_kspace(cfg) -> KSpaceData:
    values, spacing = decode_tvol(cfg.get_path("inputs", "kspace", REQUIRED).read_bytes())
    mask, _ = read_mask(cfg.get_path("inputs", "mask", REQUIRED))
    try:
        return KSpaceData(values.astype(np.complex128), mask, spacing)
    except ValueError as exc:
        raise cfg.error(str(exc), "inputs", "kspace") from None


def task_tosm_mri(cfg, arts, seed):
    kdata = _load_kspace(cfg)
    model = load_model(cfg.get_path("inputs", "model", REQUIRED))
    sc = _sampler_config(cfg, seed)
    truth = _load_volume(cfg, "truth", required=False)
    rec = reconstruct_mri(kdata, model, sc, truth=None if truth is None else truth.values)
    arts.add("recon.tvol", encode_tvol(rec.volume.values, rec.volume.spacing))
    _trace_outputs(arts, rec)
    _truth_metrics(arts, cfg, rec.volume.values)


def task_mask(cfg, arts, seed):
    kind = cfg.get_str("mask", "kind", "uniform1d")
    try:
        spec = MaskSpec(kind, cfg.get_float("mask", "acceleration", 2.0),
                        cfg.get_float("mask", "acs_fraction", 0.15), seed if seed is not None else 0)
    except ValueError as exc:
        raise cfg.error(str(exc), "mask") from None
    vol = _load_volume(cfg, "volume", required=False)
    n_lines = vol.dims[1] if vol is not None else cfg.get_int("mask", "n_lines", REQUIRED, minimum=4)
    try:
        mask = make_mask(spec, n_lines)
    except ValueError as exc:
        raise cfg.error(str(exc), "mask") from None
    arts.add("mask.txt", "\n".join(str(int(b)) for b in mask) + "\n")
    arts.add("mask.txt.ini", _sidecar_text({"mask": {
        "kind": spec.kind, "acceleration": spec.acceleration, "acs_fraction": spec.acs_fraction,
        "seed": spec.seed, "n_lines": n_lines}}))
    if vol is not None:
        kdata = undersample(fft2_centered(vol.values.astype(np.float64)), mask, vol.spacing)
        arts.add("kspace.tvol", encode_tvol(kdata.values.astype(np.complex64), vol.spacing))
        zf = zero_filled(kdata)
        arts.add("zero_filled.tvol", encode_tvol(zf.astype(np.complex64), vol.spacing))
        arts.metrics["zero_filled_psnr"] = float(psnr(np.abs(zf), np.abs(vol.values.astype(np.float64))))


def task_metrics(cfg, arts, seed):
    recon = _load_volume(cfg, "recon")
    truth = _load_volume(cfg, "truth")
    r, t = np.abs(recon.values).astype(np.float64), np.abs(truth.values).astype(np.float64)
    if r.shape != t.shape:
        raise cfg.error(f"recon shape {r.shape} != truth shape {t.shape}", "inputs", "recon")
    dr = cfg.get_float("metrics", "data_range")
    report = evaluate(r, t, dr)
    arts.add("metrics.csv", report.to_csv())
    arts.add("metrics.txt", report.to_text())
    arts.metrics.update({f"psnr_{k}": v for k, v in report.psnr.items()})
    arts.metrics.update({f"ssim_{k}": v for k, v in report.ssim.items()})


def task_nps(cfg, arts, seed):
    recon = _load_volume(cfg, "recon")
    truth = _load_volume(cfg, "truth")
    r, t = np.abs(recon.values).astype(np.float64), np.abs(truth.values).astype(np.float64)
    roi = cfg.get_ints("nps", "roi")
    if roi is not None:
        if len(roi) != 6:
            raise cfg.error("nps.roi needs six integers x0 x1 y0 y1 z0 z1", "nps", "roi")
        roi = ((roi[0], roi[1]), (roi[2], roi[3]), (roi[4], roi[5]))
    try:
        res = nps(r, t, roi=roi, spacing=recon.spacing[:2], n_bins=cfg.get_int("nps", "bins"))
    except ValueError as exc:
        raise cfg.error(str(exc), "nps", "roi") from None
    arts.add("nps.csv", res.to_csv())
    png = _plot_png({"NPS": (res.radial_freq, res.radial_profile)}, "spatial frequency (1/mm)", "NPS")
    if png is not None:
        arts.add("nps.png", png)
    arts.metrics["nps_total_power"] = res.total_power


TASK_FUNCS = {
    "phantom": task_phantom,
    "project": task_project,
    "train": task_train,
    "recon_fbp": task_fbp,
    "recon_sirt": task_sirt,
    "recon_tosm_ct": task_tosm_ct,
    "recon_tosm_mri": task_tosm_mri,
    "mask": task_mask,
    "metrics": task_metrics,
    "nps": task_nps,
}


def run(cfg: ExperimentConfig, out: Path) -> dict:
    """Validate ``cfg``, execute its task and commit the artifacts into ``out``."""
    task = validate(cfg)
    seed = cfg.seed()
    arts = Artifacts(Path(out))
    try:
        TASK_FUNCS[task](cfg, arts, seed)
        arts.add("config.ini", cfg.to_text())
        return arts.commit(task)
    except BaseException:
        arts.discard()
        raise


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recon", description="2.5D score-based CT/MRI reconstruction toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["protocol"]:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="experiment config (INI sections)")
        p.add_argument("--seed", type=int, help="random seed; overrides [experiment] seed")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config entry (repeatable)")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "protocol":
            args.out.mkdir(parents=True, exist_ok=True)
            text = default_paper_protocol().to_text()
            atomic_write_bytes(args.out / "protocol.ini", text.encode())
            print(text, end="")
            return 0
        cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
        cfg.set("experiment", "task", COMMANDS[args.command])
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be a non-negative integer", None, "<command line>")
            cfg.set("experiment", "seed", args.seed)
        for item in args.set:
            key, sep, value = item.partition("=")
            section, dot, name = key.partition(".")
            if not sep or not dot or not name:
                raise ConfigError(f"--set expects SECTION.KEY=VALUE, got '{item}'", None, "<command line>")
            cfg.set(section.strip(), name.strip(), value.strip())
        manifest = run(cfg, args.out)
    except (ConfigError, SpecificationError, GeometryError) as exc:
        print(f"recon: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report, exit 1
        print(f"recon: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for entry in manifest["artifacts"]:
        print(f"{entry['sha256']}  {entry['path']}")
    for key, val in manifest["metrics"].items():
        print(f"{key} = {val}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
