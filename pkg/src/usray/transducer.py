"""Linear array geometry, plane-wave transmit events and ray emission."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import dual as dl

ARRAY_NORMAL = np.array([0.0, 1.0])  # (x, z): the array looks into +z


@dataclass(frozen=True)
class TransducerArray:
    """Uniform linear array on ``z = 0``.

    Attributes:
        n_elements: Element count.
        pitch: Centre-to-centre spacing in mm (also the element width).
        main_lobe: Receive angle with full sensitivity, rad.
        cutoff: Receive angle beyond which sensitivity is zero, rad.
    """

    n_elements: int
    pitch: float
    main_lobe: float = math.radians(20.0)
    cutoff: float = math.radians(60.0)

    def __post_init__(self):
        if self.n_elements < 2:
            raise ValueError("an array needs at least two elements")
        if not self.pitch > 0:
            raise ValueError("pitch must be > 0")
        if not 0 < self.main_lobe < self.cutoff <= math.pi / 2:
            raise ValueError("need 0 < main_lobe < cutoff <= pi/2")

    @property
    def normal(self) -> np.ndarray:
        return ARRAY_NORMAL

    @property
    def aperture(self) -> float:
        return (self.n_elements - 1) * self.pitch

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_elements) - (self.n_elements - 1) / 2) * self.pitch


def element_position(e: int, array: TransducerArray) -> float:
    """Lateral centre of element ``e`` in mm."""
    if not 0 <= e < array.n_elements:
        raise IndexError(f"element {e} out of range [0, {array.n_elements})")
    return (e - (array.n_elements - 1) / 2) * array.pitch


def transmit_delay(x, pitch, n_elements: int, angle: float, c0: float):
    """Plane-wave firing time (s) of a point at lateral position ``x`` (mm).

    Shifted so that the earliest element centre fires at 0. Works on duals.
    """
    s = math.sin(angle)
    return (x * s + (n_elements - 1) / 2 * pitch * abs(s)) * (1e-3 / c0)


def steering_delays(array: TransducerArray, angle: float, c0: float) -> np.ndarray:
    """Per-element transmit delays (s) for a plane wave steered by ``angle``."""
    if not abs(angle) < math.pi / 2:
        raise ValueError("steering angle must lie in (-pi/2, pi/2)")
    return transmit_delay(array.centers, array.pitch, array.n_elements, angle, c0)


def tx_directivity(w, n):
    """Transmit weight ``max(0, n . w)``."""
    return np.maximum(0.0, np.sum(np.asarray(w) * np.asarray(n), axis=-1))


def rx_weight_from_angle(alpha, main_lobe: float, cutoff: float):
    """Piecewise-linear receive taper as a function of the arrival angle.

    Accepts duals; ``alpha`` may be signed.
    """
    a = dl.absolute(alpha)
    ramp = (cutoff - a) * (1.0 / (cutoff - main_lobe))
    av = dl.value(a)
    if isinstance(a, dl.Dual):
        return dl.where(av <= main_lobe, 1.0, dl.where(av > cutoff, 0.0, ramp))
    return np.where(av <= main_lobe, 1.0, np.where(av > cutoff, 0.0, ramp))


def rx_directivity(w_i, n, main_lobe: float, cutoff: float):
    """Receive sensitivity for a wave arriving from direction ``w_i``.

    ``w_i`` points from the element towards the source (the visible
    hemisphere), and ``alpha = arccos(n . w_i)``.
    """
    if not 0 < main_lobe < cutoff:
        raise ValueError("need 0 < main_lobe < cutoff")
    c = np.clip(np.sum(np.asarray(w_i, dtype=float) * np.asarray(n, dtype=float), axis=-1), -1.0, 1.0)
    return rx_weight_from_angle(np.arccos(c), main_lobe, cutoff)


@dataclass(frozen=True)
class TxEvent:
    angle: float
    delays: np.ndarray
    rays_per_element: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.delays)):
            raise ValueError("transmit delays must be finite")
        if self.rays_per_element < 1:
            raise ValueError("rays_per_element must be >= 1")


@dataclass(frozen=True)
class Acquisition:
    """Everything needed to fire and record a set of plane-wave events.

    Attributes:
        array: The transducer.
        angles: Steering angles in rad, one transmit event each.
        rays_per_element: Emitted rays per element and event.
        f_c: Pulse centre frequency, MHz.
        fs: Sampling rate, MHz.
        n_samples: Record length per channel.
        n_cycles: Cycles under the Gaussian pulse envelope.
    """

    array: TransducerArray
    angles: tuple[float, ...] = (0.0,)
    rays_per_element: int = 256
    f_c: float = 5.0
    fs: float = 40.0
    n_samples: int = 2048
    n_cycles: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        if not self.angles:
            raise ValueError("need at least one steering angle")
        if not (self.f_c > 0 and self.fs > 0 and self.n_samples > 0 and self.n_cycles > 0):
            raise ValueError("f_c, fs, n_samples and n_cycles must be positive")

    @property
    def n_paths(self) -> int:
        return self.array.n_elements * self.rays_per_element

    def event(self, i: int, c0: float) -> TxEvent:
        return TxEvent(self.angles[i], steering_delays(self.array, self.angles[i], c0), self.rays_per_element)

    # parameter targets "array.pitch" and "pulse.f_c"
    def targets(self) -> list[str]:
        return ["array.pitch", "pulse.f_c"]

    def get(self, target: str) -> float:
        if target == "array.pitch":
            return self.array.pitch
        if target == "pulse.f_c":
            return self.f_c
        raise KeyError(f"not an acquisition parameter: {target!r}")

    def replace(self, values: dict[str, float]) -> "Acquisition":
        acq = self
        for target, v in values.items():
            if target == "array.pitch":
                acq = dataclasses.replace(acq, array=dataclasses.replace(acq.array, pitch=float(v)))
            elif target == "pulse.f_c":
                acq = dataclasses.replace(acq, f_c=float(v))
            else:
                raise KeyError(f"not an acquisition parameter: {target!r}")
        return acq


@dataclass
class Emission:
    origin: np.ndarray  # (n, 2) mm
    direction: np.ndarray  # (n, 2)
    tau_tx: np.ndarray  # (n,) s
    weight: np.ndarray  # (n,) transmit directivity
    pdf: np.ndarray  # (n,) per mm per rad
    element: np.ndarray  # (n,)


def emission_from_draws(array: TransducerArray, angle: float, c0: float, path_index, u0, u1, rays_per_element, pitch=None):
    """Deterministic map from uniform draws to emitted rays.

    Path ``i`` belongs to element ``i // rays_per_element``; ``u0`` jitters the
    origin across the element width and ``u1`` picks the direction from the
    cosine-weighted half-plane (``sin(theta) = 2 u1 - 1``).

    Returns ``(x0, sin_theta, cos_theta, tau_tx, element)``; ``x0`` and
    ``tau_tx`` are duals when ``pitch`` is.
    """
    p = array.pitch if pitch is None else pitch
    e = np.asarray(path_index) // rays_per_element
    x0 = (e - (array.n_elements - 1) / 2 + u0 - 0.5) * p
    sin_t = 2.0 * u1 - 1.0
    cos_t = np.sqrt(1.0 - sin_t * sin_t)
    tau = transmit_delay(x0, p, array.n_elements, angle, c0)
    return x0, sin_t, cos_t, tau, e


def sample_emission(array: TransducerArray, event: TxEvent, c0: float, rng: np.random.Generator) -> Emission:
    """Draw one stratified batch of rays (``rays_per_element`` per element)."""
    n = array.n_elements * event.rays_per_element
    u = rng.random((n, 2))
    x0, s, c, tau, e = emission_from_draws(array, event.angle, c0, np.arange(n), u[:, 0], u[:, 1], event.rays_per_element)
    direction = np.stack([s, c], axis=1)
    pdf = (c / 2.0) / (array.n_elements * array.pitch)
    return Emission(
        origin=np.stack([x0, np.zeros(n)], axis=1),
        direction=direction,
        tau_tx=tau,
        weight=tx_directivity(direction, array.normal),
        pdf=pdf,
        element=e,
    )
