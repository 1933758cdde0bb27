"""Delay-and-sum beamforming and B-mode formation with hand-written adjoints.

Stage chain (each with a VJP)::

    channel -> [band-pass FIR] -> DAS -> [TGC] -> envelope -> log compression

The band-pass and TGC stages are identity unless configured.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

from .transducer import TransducerArray, rx_weight_from_angle

ROW_CHUNK = 32


@dataclass(frozen=True)
class BeamformGrid:
    """Pixel grid plus the geometry needed to compute delays and weights.

    Delays and apodization are evaluated on the fly in blocks of depth rows,
    so the full ``(n_z, n_x, n_elements)`` tables are never stored unless
    :meth:`delays` / :meth:`apodization` are called for the whole grid.

    Attributes:
        x: Lateral pixel coordinates, mm.
        z: Depth pixel coordinates, mm (increasing).
        array: Receive array.
        angle: Steering angle of the transmit event, rad.
        c0: Beamforming sound speed, m/s.
    """

    x: np.ndarray
    z: np.ndarray
    array: TransducerArray
    angle: float
    c0: float

    @property
    def shape(self):
        return (len(self.z), len(self.x))

    @property
    def n_pix(self) -> int:
        return len(self.z) * len(self.x)

    def _block(self, rows):
        arr = self.array
        xe = arr.centers
        x = self.x[None, :, None]
        z = self.z[rows][:, None, None]
        s, c = math.sin(self.angle), math.cos(self.angle)
        tx = x * s + z * c + (arr.n_elements - 1) / 2 * arr.pitch * abs(s)
        dist = np.sqrt((x - xe[None, None, :]) ** 2 + z * z)
        tau = (tx + dist) * (1e-3 / self.c0)
        cos_a = np.clip(z / dist, -1.0, 1.0)
        apod = rx_weight_from_angle(np.arccos(cos_a), arr.main_lobe, arr.cutoff)
        return tau, apod

    def delays(self, rows=slice(None)) -> np.ndarray:
        return self._block(rows)[0]

    def apodization(self, rows=slice(None)) -> np.ndarray:
        return self._block(rows)[1]

    def row_blocks(self, size: int = ROW_CHUNK):
        for r0 in range(0, len(self.z), size):
            yield slice(r0, min(r0 + size, len(self.z)))


def build_grids(array: TransducerArray, angles, c0: float, x_range, z_range, dx: float, dz: float) -> tuple:
    """One grid per steering angle over the same pixels."""
    return tuple(build_grid(array, a, c0, x_range, z_range, dx, dz) for a in angles)


def build_grid(array: TransducerArray, angle: float, c0: float, x_range, z_range, dx: float, dz: float) -> BeamformGrid:
    """Regular pixel grid covering ``x_range`` x ``z_range`` (mm) with steps ``dx``, ``dz``."""
    if not (dx > 0 and dz > 0):
        raise ValueError("resolution must be positive")
    if not (x_range[1] > x_range[0] and z_range[1] > z_range[0]):
        raise ValueError("extent must be positive")
    nx = int(round((x_range[1] - x_range[0]) / dx)) + 1
    nz = int(round((z_range[1] - z_range[0]) / dz)) + 1
    return BeamformGrid(np.linspace(*x_range, nx), np.linspace(*z_range, nz), array, float(angle), float(c0))


def _taps(grid: BeamformGrid, rows, fs: float, n_t: int):
    tau, apod = grid._block(rows)
    s = tau * fs
    k = np.floor(s).astype(np.int64)
    frac = s - k
    ok = (k >= 0) & (k <= n_t - 1)
    w = np.where(ok, apod, 0.0)
    k = np.where(ok, k, 0)
    e = np.arange(grid.array.n_elements)[None, None, :]
    idx = e * (n_t + 1) + k  # padded row length n_t + 1
    return idx, w * (1.0 - frac), w * frac


def das_forward(channel: np.ndarray, grid: BeamformGrid, fs: float) -> np.ndarray:
    """Delay-and-sum with two-tap linear interpolation in time.

    Args:
        channel: ``(n_elements, n_t)`` samples.
        grid: Pixel grid.
        fs: Sampling rate in Hz.

    Returns:
        RF image of shape ``grid.shape``.
    """
    ne, nt = channel.shape
    padded = np.zeros((ne, nt + 1))
    padded[:, :nt] = channel
    flat = padded.ravel()
    out = np.empty(grid.shape)
    for rows in grid.row_blocks():
        idx, w0, w1 = _taps(grid, rows, fs, nt)
        out[rows] = np.sum(w0 * flat[idx] + w1 * flat[idx + 1], axis=-1)
    return out


def das_adjoint(image_grad: np.ndarray, grid: BeamformGrid, channel_shape, fs: float) -> np.ndarray:
    """Transpose of :func:`das_forward`: scatter pixel gradients onto the taps."""
    if image_grad.shape != grid.shape:
        raise ValueError(f"image gradient shape {image_grad.shape} != grid shape {grid.shape}")
    ne, nt = channel_shape
    acc = np.zeros(ne * (nt + 1))
    for rows in grid.row_blocks():
        idx, w0, w1 = _taps(grid, rows, fs, nt)
        g = image_grad[rows][:, :, None]
        acc += np.bincount(idx.ravel(), weights=(w0 * g).ravel(), minlength=acc.size)
        acc += np.bincount((idx + 1).ravel(), weights=(w1 * g).ravel(), minlength=acc.size)
    return acc.reshape(ne, nt + 1)[:, :nt]


# ---------------------------------------------------------------------------
# Optional linear stages
# ---------------------------------------------------------------------------


def tgc_gain(z: np.ndarray, db_per_mm: float) -> np.ndarray:
    """Per-depth amplitude gain; identity for 0 dB/mm."""
    return 10.0 ** (db_per_mm * (z - z[0]) / 20.0)


def bandpass(channel: np.ndarray, taps) -> np.ndarray:
    """Zero-padded 'same' FIR filter along time (odd number of taps)."""
    if taps is None:
        return channel
    return ndimage.convolve1d(channel, np.asarray(taps, dtype=float), axis=1, mode="constant")


def bandpass_adjoint(grad: np.ndarray, taps) -> np.ndarray:
    if taps is None:
        return grad
    return ndimage.correlate1d(grad, np.asarray(taps, dtype=float), axis=1, mode="constant")


def design_bandpass(f_lo: float, f_hi: float, fs: float, n_taps: int = 31) -> np.ndarray:
    """Hamming-windowed FIR band-pass (frequencies in any common unit)."""
    if n_taps % 2 == 0:
        raise ValueError("n_taps must be odd")
    return signal.firwin(n_taps, [f_lo, f_hi], pass_zero=False, window="hamming", fs=fs)


# ---------------------------------------------------------------------------
# Envelope
# ---------------------------------------------------------------------------


def _window_sum(x: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """``y[i] = sum_{j=i+lo}^{i+hi} x[j]`` along axis 0, zero outside."""
    n = x.shape[0]
    c = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)])
    i = np.arange(n)
    a = np.clip(i + lo, 0, n)
    b = np.clip(i + hi + 1, 0, n)
    return c[b] - c[a]


def moving_average(x: np.ndarray, width: int) -> np.ndarray:
    a = width // 2
    return _window_sum(x, -a, width - 1 - a) / width


def moving_average_adjoint(g: np.ndarray, width: int) -> np.ndarray:
    a = width // 2
    return _window_sum(g, a - width + 1, a) / width


def carrier_window(z: np.ndarray, f_c: float, c0: float) -> int:
    """Samples per carrier period along depth (two-way, ``lambda/2``)."""
    dz = z[1] - z[0] if len(z) > 1 else 1.0
    period_mm = c0 / (f_c * 1e6) * 1e3 / 2.0
    return max(1, int(round(period_mm / dz)))


@dataclass
class EnvelopeTape:
    i: np.ndarray
    q: np.ndarray
    env: np.ndarray
    cos: np.ndarray
    sin: np.ndarray
    width: int


def envelope(rf: np.ndarray, z: np.ndarray, f_c: float, c0: float, fs: float | None = None, eps: float = 0.0):
    """Quadrature-demodulated envelope along depth.

    Mixes each depth column to baseband with the two-way phase
    ``2 pi f_c (2 z / c0)``, low-passes with a one-period moving average and
    returns ``sqrt(I^2 + Q^2 + eps^2)``.

    Args:
        rf: RF image ``(n_z, n_x)``.
        z: Depth coordinates in mm.
        f_c: Centre frequency, MHz.
        c0: Sound speed, m/s.
        fs: Channel sampling rate in Hz (checked against ``f_c``).
        eps: Magnitude guard.

    Returns:
        ``(env, tape)``.
    """
    if fs is not None and not f_c * 1e6 < fs / 2:
        raise ValueError("centre frequency must be below Nyquist")
    t = 2.0 * z * 1e-3 / c0
    ph = 2.0 * np.pi * f_c * 1e6 * t
    cs, sn = np.cos(ph)[:, None], np.sin(ph)[:, None]
    w = carrier_window(z, f_c, c0)
    i = 2.0 * moving_average(rf * cs, w)
    q = -2.0 * moving_average(rf * sn, w)
    env = np.sqrt(i * i + q * q + eps * eps)
    return env, EnvelopeTape(i, q, env, cs, sn, w)


def envelope_vjp(tape: EnvelopeTape, g: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        gi = np.where(tape.env > 0, g * tape.i / tape.env, 0.0)
        gq = np.where(tape.env > 0, g * tape.q / tape.env, 0.0)
    w = tape.width
    return 2.0 * moving_average_adjoint(gi, w) * tape.cos - 2.0 * moving_average_adjoint(gq, w) * tape.sin


# ---------------------------------------------------------------------------
# Log compression
# ---------------------------------------------------------------------------


@dataclass
class LogTape:
    env: np.ndarray
    raw: np.ndarray
    env_max: float
    argmax: int
    dr: float
    detach_max: bool


def log_compress(env: np.ndarray, dr: float, detach_max: bool = False):
    """Grayscale ``clip(1 + 20 log10(env / env_max) / dr, 0, 1)``.

    Args:
        env: Envelope image.
        dr: Dynamic range in dB.
        detach_max: Treat ``env_max`` as a constant in the VJP. By default
            the normalisation is differentiated (routed to the brightest
            pixel), which keeps the VJP exact for the full map.

    Returns:
        ``(image, tape)``; an all-zero envelope gives an all-zero image.
    """
    if not dr > 0:
        raise ValueError("dynamic range must be positive")
    flat = env.ravel()
    k = int(np.argmax(flat))
    m = float(flat[k])
    if m <= 0:
        z = np.zeros_like(env)
        return z, LogTape(env, z, 0.0, k, dr, detach_max)
    with np.errstate(divide="ignore"):
        raw = 1.0 + 20.0 * np.log10(env / m) / dr
    return np.clip(raw, 0.0, 1.0), LogTape(env, raw, m, k, dr, detach_max)


def log_compress_vjp(tape: LogTape, g: np.ndarray) -> np.ndarray:
    if tape.env_max <= 0:
        return np.zeros_like(g)
    interior = (tape.raw > 0) & (tape.raw < 1)
    c = 20.0 / (math.log(10.0) * tape.dr)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(interior, g * c / tape.env, 0.0)
    if not tape.detach_max:
        out.ravel()[tape.argmax] -= c / tape.env_max * np.sum(np.where(interior, g, 0.0))
    return out


# ---------------------------------------------------------------------------
# Full chain
# ---------------------------------------------------------------------------


@dataclass
class BModeImage:
    pixels: np.ndarray
    dr: float
    x: np.ndarray
    z: np.ndarray

    @property
    def n_pix(self) -> int:
        return self.pixels.size


@dataclass
class ImagingChain:
    """Channel data to B-mode, with the matching VJP.

    Several transmit events are compounded coherently: each event is
    beamformed on its own grid and the RF images are summed before envelope
    detection. All grids must share the same pixel coordinates.

    Attributes:
        grids: One beamforming grid per transmit event.
        f_c: Demodulation frequency, MHz (nominal acquisition value).
        fs: Channel sampling rate, Hz.
        dr: Dynamic range, dB.
        tgc_db_per_mm: Depth gain slope; 0 disables the stage.
        fir: Optional odd-length band-pass taps applied to channel data.
        detach_max: See :func:`log_compress`.
    """

    grids: tuple
    f_c: float
    fs: float
    dr: float = 40.0
    tgc_db_per_mm: float = 0.0
    fir: np.ndarray | None = None
    detach_max: bool = False
    gain: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if isinstance(self.grids, BeamformGrid):
            self.grids = (self.grids,)
        self.grids = tuple(self.grids)
        if not self.grids:
            raise ValueError("need at least one beamforming grid")
        g0 = self.grids[0]
        for g in self.grids[1:]:
            if not (np.array_equal(g.x, g0.x) and np.array_equal(g.z, g0.z)):
                raise ValueError("compounded grids must share pixel coordinates")
        self.gain = tgc_gain(g0.z, self.tgc_db_per_mm)[:, None]

    @property
    def grid(self) -> BeamformGrid:
        return self.grids[0]

    def _as_list(self, channels):
        if isinstance(channels, np.ndarray) and channels.ndim == 2:
            channels = [channels]
        channels = list(channels)
        if len(channels) != len(self.grids):
            raise ValueError(f"expected {len(self.grids)} channel arrays, got {len(channels)}")
        return channels

    def forward(self, channels):
        """Accepts one ``(N_e, N_t)`` array or one per grid."""
        channels = self._as_list(channels)
        sq = sum(float(np.sum(c * c)) for c in channels)
        count = sum(c.size for c in channels)
        rms = np.sqrt(sq / count) if count else 0.0
        rf = 0.0
        for ch, grid in zip(channels, self.grids):
            rf = rf + das_forward(bandpass(ch, self.fir), grid, self.fs)
        rf = rf * self.gain
        g0 = self.grid
        env, etape = envelope(rf, g0.z, self.f_c, g0.c0, self.fs, eps=1e-12 * rms)
        img, ltape = log_compress(env, self.dr, self.detach_max)
        tape = ([c.shape for c in channels], etape, ltape)
        return BModeImage(img, self.dr, g0.x, g0.z), tape

    def vjp(self, tape, image_grad: np.ndarray):
        """Channel gradients; a single array when the chain has one grid."""
        shapes, etape, ltape = tape
        g = log_compress_vjp(ltape, image_grad)
        g = envelope_vjp(etape, g) * self.gain
        out = [bandpass_adjoint(das_adjoint(g, grid, shape, self.fs), self.fir) for grid, shape in zip(self.grids, shapes)]
        return out[0] if len(out) == 1 else out


def bmode_pipeline(channel: np.ndarray, chain: ImagingChain):
    """Convenience wrapper: ``(image, vjp_fn)``."""
    img, tape = chain.forward(channel)
    return img, (lambda g: chain.vjp(tape, g))
