"""On-disk formats: channel records, B-mode images and external references.

Channel file (little endian)::

    8 bytes  magic b"USRAYCH1"
    uint32   n_events, n_elements, n_samples
    float64  fs (Hz)
    float64  steering angle per event (rad)
    float64  samples, event-major then element-major

Images are written three ways: an 8-bit PGM for viewing, the float64 pixels
as raw little-endian bytes, and a text sidecar with the dimensions and extent.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

CHANNEL_MAGIC = b"USRAYCH1"
_HEADER = struct.Struct("<8sIIId")


def write_channels(path, channels, fs_hz: float, angles) -> None:
    """Write per-event ``(n_elements, n_samples)`` arrays to ``path``."""
    data = np.stack([np.asarray(c, dtype="<f8") for c in channels])
    n_ev, ne, nt = data.shape
    angles = np.asarray(angles, dtype="<f8")
    if len(angles) != n_ev:
        raise ValueError("need one steering angle per event")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CHANNEL_MAGIC, n_ev, ne, nt, float(fs_hz)))
        f.write(angles.tobytes())
        f.write(data.tobytes())


def read_channels(path):
    """Inverse of :func:`write_channels`; returns ``(data, fs_hz, angles)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated channel file")
    magic, n_ev, ne, nt, fs = _HEADER.unpack_from(raw)
    if magic != CHANNEL_MAGIC:
        raise ValueError(f"{path}: not a channel file")
    off = _HEADER.size
    angles = np.frombuffer(raw, "<f8", n_ev, off)
    off += 8 * n_ev
    if len(raw) != off + 8 * n_ev * ne * nt:
        raise ValueError(f"{path}: size does not match its header")
    data = np.frombuffer(raw, "<f8", n_ev * ne * nt, off).reshape(n_ev, ne, nt)
    return data.copy(), fs, angles.copy()


def _extent(x, z) -> tuple[float, float, float, float]:
    return float(x[0]), float(x[-1]), float(z[0]), float(z[-1])


def write_image(stem, pixels: np.ndarray, x, z, dr: float) -> list[Path]:
    """Write ``stem.pgm``, ``stem.raw`` and ``stem.txt`` for a gray image in ``[0, 1]``.

    ``dr`` is the dynamic range the gray levels span, kept in the sidecar.
    """
    stem = Path(stem)
    pixels = np.asarray(pixels, dtype=float)
    gray = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    nz, nx = pixels.shape
    pgm = stem.with_suffix(".pgm")
    with open(pgm, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (nx, nz))
        f.write(gray.tobytes())
    raw = stem.with_suffix(".raw")
    raw.write_bytes(pixels.astype("<f8").tobytes())
    side = stem.with_suffix(".txt")
    x0, x1, z0, z1 = _extent(x, z)
    side.write_text(
        f"rows {nz}\ncols {nx}\nx_min {x0!r}\nx_max {x1!r}\nz_min {z0!r}\nz_max {z1!r}\ndynamic_range {dr!r}\n"
    )
    return [pgm, raw, side]


def read_sidecar(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if len(tok) == 2 and not tok[0].startswith("#"):
            out[tok[0]] = float(tok[1])
    return out


def read_pgm(path) -> np.ndarray:
    """Binary (P5) or ASCII (P2) graymap, scaled to ``[0, 1]``."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P2"):
        raise ValueError(f"{path}: not a PGM file")
    # header tokens, skipping comments
    tokens, i = [], 2
    while len(tokens) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        tokens.append(int(data[i:j]))
        i = j
    w, h, maxval = tokens
    if magic == b"P2":
        vals = np.array(data[i:].split(), dtype=float)
    else:
        dtype = np.uint8 if maxval < 256 else ">u2"
        n = w * h * (1 if maxval < 256 else 2)
        vals = np.frombuffer(data[i + 1 : i + 1 + n], dtype=dtype).astype(float)
    if vals.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {vals.size}")
    return vals.reshape(h, w) / maxval


def read_image(path):
    """Load a gray image in ``[0, 1]`` plus its sidecar extent.

    ``.pgm`` gray levels are scaled by their maximum value; ``.raw`` files
    hold float64 pixels with ``rows``/``cols`` in the sidecar. The sidecar
    sits next to the image with a ``.txt`` suffix.

    Returns:
        ``(pixels, x, z)`` with pixel-centre coordinates in mm.
    """
    path = Path(path)
    side = path.with_suffix(".txt")
    if not path.is_file():
        raise FileNotFoundError(f"reference image not found: {path}")
    if not side.is_file():
        raise FileNotFoundError(f"reference sidecar not found: {side}")
    meta = read_sidecar(side)
    if path.suffix == ".raw":
        rows, cols = int(meta["rows"]), int(meta["cols"])
        pix = np.fromfile(path, dtype="<f8")
        if pix.size != rows * cols:
            raise ValueError(f"{path}: expected {rows * cols} pixels, found {pix.size}")
        pix = pix.reshape(rows, cols)
    else:
        pix = read_pgm(path)
    try:
        x = np.linspace(meta["x_min"], meta["x_max"], pix.shape[1])
        z = np.linspace(meta["z_min"], meta["z_max"], pix.shape[0])
    except KeyError as exc:
        raise ValueError(f"{side}: missing {exc.args[0]}") from None
    return pix, x, z


def resample(pixels, x, z, factor: float, grid_x, grid_z, fill: float = 0.0) -> np.ndarray:
    """Scale image coordinates by ``factor`` and resample bilinearly onto a grid."""
    interp = RegularGridInterpolator(
        (np.asarray(z) * factor, np.asarray(x) * factor), pixels, method="linear", bounds_error=False, fill_value=fill
    )
    zz, xx = np.meshgrid(grid_z, grid_x, indexing="ij")
    return interp(np.stack([zz.ravel(), xx.ravel()], axis=1)).reshape(len(grid_z), len(grid_x))
