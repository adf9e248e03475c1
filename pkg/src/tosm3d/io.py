"""Binary volume container (TVOL v1) and text sidecars.

TVOL v1 layout, all little-endian::

    8 bytes   magic b"TVOL0001"
    3 x u32   dims (d0, d1, d2)
    3 x f32   spacing
    1 x u8    channel count (1 = real, 2 = complex)
    f32 data  channel-interleaved, first dim fastest

Sidecars are ``key = value`` text grouped in ``[section]`` blocks.
"""
from __future__ import annotations

import configparser
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .volume import ComplexVolume3D, Volume3D

TVOL_MAGIC = b"TVOL0001"
_HEADER = struct.Struct("<8s3I3fB")


class FormatError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tvol(values: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> bytes:
    arr = np.asarray(values)
    if arr.ndim != 3:
        raise FormatError(f"TVOL holds 3D arrays, got shape {arr.shape}")
    channels = 2 if np.iscomplexobj(arr) else 1
    header = _HEADER.pack(TVOL_MAGIC, *arr.shape, *[float(s) for s in spacing], channels)
    flat = arr.ravel(order="F")
    if channels == 2:
        payload = np.empty(flat.size * 2, dtype="<f4")
        payload[0::2] = flat.real
        payload[1::2] = flat.imag
    else:
        payload = flat.astype("<f4")
    return header + payload.tobytes()


def decode_tvol(data: bytes) -> tuple[np.ndarray, tuple[float, float, float]]:
    if len(data) < _HEADER.size:
        raise FormatError("truncated TVOL header")
    magic, d0, d1, d2, s0, s1, s2, channels = _HEADER.unpack_from(data)
    if magic != TVOL_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if channels not in (1, 2):
        raise FormatError(f"unsupported channel count {channels}")
    count = d0 * d1 * d2 * channels
    payload = np.frombuffer(data, dtype="<f4", count=count, offset=_HEADER.size)
    if len(data) != _HEADER.size + 4 * count:
        raise FormatError("TVOL payload size does not match header dims")
    if channels == 2:
        flat = payload[0::2].astype(np.complex64) + 1j * payload[1::2].astype(np.complex64)
        flat = flat.astype(np.complex64)
    else:
        flat = payload.astype(np.float32)
    return flat.reshape((d0, d1, d2), order="F"), (s0, s1, s2)


def write_tvol(path, vol, spacing=None) -> None:
    if isinstance(vol, Volume3D):
        values, sp = vol.values, vol.spacing
    else:
        values, sp = np.asarray(vol), (1.0, 1.0, 1.0)
    atomic_write_bytes(path, encode_tvol(values, sp if spacing is None else spacing))


def read_tvol(path) -> Volume3D:
    values, spacing = decode_tvol(Path(path).read_bytes())
    if np.iscomplexobj(values):
        return ComplexVolume3D(values, spacing)
    return Volume3D(values, spacing)


def read_tvol_array(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Raw array access; used for sinograms whose spacing slot is not physical."""
    return decode_tvol(Path(path).read_bytes())


def write_sidecar(path, sections: dict[str, dict]) -> None:
    lines = []
    for name, body in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in body.items())
        lines.append("")
    atomic_write_bytes(path, "\n".join(lines).encode())


def read_sidecar(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(Path(path).read_text())
    return {s: dict(parser[s]) for s in parser.sections()}
