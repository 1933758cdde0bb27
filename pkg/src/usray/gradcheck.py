"""Finite-difference sweeps against AD gradients, and adjoint dot-product tests."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import imaging as im
from . import transport as tp

CSV_COLUMNS = ("epsilon", "g_fd", "g_ad", "abs_err", "skipped")


def default_epsilons() -> np.ndarray:
    """1e-6 to 1e-1 at four points per decade (21 points)."""
    return np.logspace(-6, -1, 21)


def fd_gradient(objective: Callable, theta, j: int, eps: float) -> float | None:
    """Central difference of ``objective`` along normalized coordinate ``j``.

    Returns ``None`` when the stencil would leave ``[0, 1]``; the clip would
    otherwise flatten one side and corrupt the estimate.
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    theta = np.array(theta, dtype=float)
    if theta[j] - eps < 0.0 or theta[j] + eps > 1.0:
        return None
    up, dn = theta.copy(), theta.copy()
    up[j] += eps
    dn[j] -= eps
    return (float(objective(up)) - float(objective(dn))) / (2.0 * eps)


@dataclass
class SweepResult:
    """FD-vs-AD comparison for one parameter over an ε grid.

    ``g_fd`` and ``abs_err`` are NaN at skipped points.
    """

    name: str
    epsilons: np.ndarray
    g_fd: np.ndarray
    g_ad: float
    skipped: np.ndarray

    def __post_init__(self):
        self.epsilons = np.asarray(self.epsilons, dtype=float)
        if np.any(np.diff(self.epsilons) <= 0):
            raise ValueError("epsilons must be strictly increasing")
        if not math.isfinite(self.g_ad):
            raise ValueError("AD gradient is not finite")

    @property
    def abs_err(self) -> np.ndarray:
        return np.abs(self.g_fd - self.g_ad)

    @property
    def rel_err(self) -> np.ndarray:
        return self.abs_err / max(abs(self.g_ad), 1e-300)

    def best(self) -> tuple[float, float]:
        """``(epsilon, relative error)`` at the best non-skipped point."""
        rel = np.where(self.skipped, np.inf, self.rel_err)
        i = int(np.argmin(rel))
        return float(self.epsilons[i]), float(rel[i])

    def is_u_shaped(self) -> bool:
        """Error at both ends of the grid exceeds the best interior error."""
        ok = ~self.skipped
        if ok.sum() < 3:
            return False
        err = self.rel_err[ok]
        i = int(np.argmin(err))
        return 0 < i < len(err) - 1 and err[0] > err[i] and err[-1] > err[i]

    def write_csv(self, path) -> int:
        """Write one row per non-skipped point; returns the row count."""
        rows = 0
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_COLUMNS)
            for e, g, a, s in zip(self.epsilons, self.g_fd, self.abs_err, self.skipped):
                if s:
                    continue
                w.writerow([repr(float(e)), repr(float(g)), repr(self.g_ad), repr(float(a)), 0])
                rows += 1
        return rows


def run_sweep(objective, theta, j: int, g_ad: float, epsilons=None, name: str = "") -> SweepResult:
    """Evaluate :func:`fd_gradient` over ``epsilons`` against a fixed AD value.

    Args:
        objective: ``theta -> loss`` with frozen randomness, e.g.
            :meth:`usray.optimize.FrozenObjective.loss`.
        theta: Normalized operating point.
        j: Coordinate index.
        g_ad: AD gradient component, computed once by the caller.
        epsilons: Strictly increasing step sizes; defaults to
            :func:`default_epsilons`.
        name: Parameter label.
    """
    eps = default_epsilons() if epsilons is None else np.asarray(epsilons, dtype=float)
    g = np.full(len(eps), np.nan)
    skipped = np.zeros(len(eps), dtype=bool)
    for i, e in enumerate(eps):
        v = fd_gradient(objective, theta, j, float(e))
        if v is None:
            skipped[i] = True
        else:
            g[i] = v
    return SweepResult(name, eps, g, float(g_ad), skipped)


def sweep_problem(problem, theta, names=None, epsilons=None) -> dict[str, SweepResult]:
    """ε sweeps for the named parameters of an optimization problem.

    All sweeps share one frozen objective, and the AD gradient comes from a
    single VJP pass at ``theta``.
    """
    available = [s.name for s in problem.specs]
    names = available if names is None else list(names)
    unknown = [n for n in names if n not in available]
    if unknown:
        raise KeyError(f"unknown parameter(s) {unknown}; available: {available}")
    obj = problem.frozen(theta)
    g_ad = obj.gradient()
    return {n: run_sweep(obj.loss, theta, available.index(n), g_ad[available.index(n)], epsilons, n) for n in names}


# ---------------------------------------------------------------------------
# Adjoint tests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearStage:
    """A linear map given by matching forward and adjoint callables."""

    name: str
    forward: Callable
    adjoint: Callable
    in_shape: tuple
    out_shape: tuple


def dot_product_test(stage: LinearStage, trials: int = 100, rng: np.random.Generator | None = None) -> float:
    """Max relative mismatch of ``<A x, y>`` and ``<x, A^T y>`` over random pairs.

    Both inner products are summed exactly (``math.fsum``), so the residual
    reflects the operators and not the final reduction. Random pairs whose
    inner product nearly cancels are otherwise dominated by summation error.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(stage.in_shape)
        y = rng.standard_normal(stage.out_shape)
        ax = np.asarray(stage.forward(x))
        aty = np.asarray(stage.adjoint(y))
        if ax.shape != tuple(stage.out_shape) or aty.shape != tuple(stage.in_shape):
            raise ValueError(f"{stage.name}: forward/adjoint shapes {ax.shape}, {aty.shape} do not match the stage")
        lhs = math.fsum((ax * y).ravel())
        rhs = math.fsum((x * aty).ravel())
        worst = max(worst, abs(lhs - rhs) / (abs(lhs) + 1e-300))
    return worst


def das_stage(grid: im.BeamformGrid, n_samples: int, fs_hz: float) -> LinearStage:
    shape = (grid.array.n_elements, n_samples)
    return LinearStage(
        "das",
        lambda ch: im.das_forward(ch, grid, fs_hz),
        lambda g: im.das_adjoint(g, grid, shape, fs_hz),
        shape,
        grid.shape,
    )


def tgc_stage(z: np.ndarray, n_x: int, db_per_mm: float) -> LinearStage:
    gain = im.tgc_gain(np.asarray(z, dtype=float), db_per_mm)[:, None]
    shape = (len(z), n_x)
    return LinearStage("tgc", lambda x: gain * x, lambda y: gain * y, shape, shape)


def bandpass_stage(taps, n_elements: int, n_samples: int) -> LinearStage:
    shape = (n_elements, n_samples)
    return LinearStage("bandpass", lambda x: im.bandpass(x, taps), lambda y: im.bandpass_adjoint(y, taps), shape, shape)


def deposition_stage(element, t0, f_c: float, n_cycles: float, n_elements: int, n_samples: int, fs_hz: float) -> LinearStage:
    """Pulse deposition viewed as a linear map from arrival amplitudes to samples."""
    element = np.asarray(element, dtype=np.int64)
    t0 = np.asarray(t0, dtype=float)

    def forward(amp):
        ch = tp.ChannelData.zeros(n_elements, n_samples, fs_hz)
        tp.deposit_arrivals(tp.Arrivals(element, t0, amp), f_c, n_cycles, ch)
        return ch.values

    def adjoint(g):
        # gather the channel adjoint through the same pulse taps
        f_hz = f_c * 1e6
        k, u, mask = tp._taps(element, t0, f_hz, n_cycles, fs_hz, n_samples)
        late = t0 * fs_hz > n_samples - 1
        kk = np.where(mask, k, 0)
        vals = np.where(mask, tp.pulse(u, f_hz, n_cycles) * g[element[:, None], kk], 0.0)
        return np.where(late, 0.0, vals.sum(axis=1))

    return LinearStage("deposition", forward, adjoint, (len(element),), (n_elements, n_samples))


def identity_stage(shape) -> LinearStage:
    return LinearStage("identity", lambda x: x.copy(), lambda y: y.copy(), tuple(shape), tuple(shape))
