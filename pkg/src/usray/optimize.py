"""Image-space inverse problem: clip/scale parameterization, loss, Adam, micro-batches.

Parameters live in a normalized space ``theta`` and map to physical values by
``lo + clip(theta, 0, 1) * (hi - lo)``. One iteration traces every micro-batch
with the run's fixed seeds, forms a single compounded image, and pulls the
loss gradient back through imaging and transport.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import transport as tp
from .imaging import ImagingChain
from .scene import Scene
from .transducer import Acquisition

GROUPS = ("material", "acquisition")


# ---------------------------------------------------------------------------
# Parameterization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSpec:
    """One optimized parameter.

    Attributes:
        name: Short label used in histories and CLI output (e.g. ``"R"``).
        target: Scene/acquisition target, e.g. ``"surface.cyl.radius"``.
        lo: Physical lower bound.
        hi: Physical upper bound.
        init: Starting value in normalized units.
        group: ``"material"`` or ``"acquisition"``; selects the learning rate.
        truth: Ground-truth physical value for self-referenced runs, if known.
    """

    name: str
    target: str
    lo: float
    hi: float
    init: float = 0.5
    group: str = "material"
    truth: float | None = None

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"{self.name}: need min < max")
        if self.group not in GROUPS:
            raise ValueError(f"{self.name}: group must be one of {GROUPS}")
        if not math.isfinite(self.init):
            raise ValueError(f"{self.name}: initial value must be finite")

    @property
    def span(self) -> float:
        return self.hi - self.lo


def to_physical(theta: float, spec: ParamSpec) -> tuple[float, float]:
    """Physical value and the backward factor ``d value / d theta``.

    The factor is zero at and beyond the clip boundaries, so saturated
    parameters receive no gradient.
    """
    t = min(max(theta, 0.0), 1.0)
    factor = spec.span if 0.0 < theta < 1.0 else 0.0
    return spec.lo + t * spec.span, factor


def to_normalized(value: float, spec: ParamSpec) -> float:
    return (value - spec.lo) / spec.span


def physical_vector(theta, specs) -> tuple[np.ndarray, np.ndarray]:
    pairs = [to_physical(float(t), s) for t, s in zip(theta, specs)]
    return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def image_loss(image: np.ndarray, reference: np.ndarray, l1: float = 1.0, l2: float = 1.0):
    """Pixel-normalized weighted L1 + L2 distance and its image gradient."""
    image = np.asarray(image, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if image.shape != reference.shape:
        raise ValueError(f"image shape {image.shape} != reference shape {reference.shape}")
    if l1 < 0 or l2 < 0 or (l1 == 0 and l2 == 0):
        raise ValueError("loss weights must be >= 0 and not both zero")
    d = image - reference
    n = d.size
    loss = (l1 * np.sum(np.abs(d)) + l2 * np.sum(d * d)) / n
    grad = (l1 * np.sign(d) + 2.0 * l2 * d) / n
    return float(loss), grad


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    lr_material: float = 5e-2
    lr_acquisition: float = 1e-2
    lr_decay: float = 1.0  # per-step multiplicative factor on the rates

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not (self.eps > 0 and self.clip_norm > 0 and self.lr_material > 0 and self.lr_acquisition > 0):
            raise ValueError("eps, clip norm and learning rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")

    def rates(self, specs) -> np.ndarray:
        return np.array([self.lr_material if s.group == "material" else self.lr_acquisition for s in specs])


@dataclass
class OptState:
    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    k: int = 0
    loss_history: list = field(default_factory=list)
    param_history: list = field(default_factory=list)
    grad_history: list = field(default_factory=list)

    @classmethod
    def start(cls, theta) -> "OptState":
        theta = np.array(theta, dtype=float)
        return cls(theta, np.zeros_like(theta), np.zeros_like(theta))


def clip_by_global_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    return grad * (max_norm / norm) if norm > max_norm else grad


def adam_step(state: OptState, grad, rates, cfg: AdamConfig = AdamConfig()) -> OptState:
    """One bias-corrected Adam update after global-norm clipping.

    Returns a new state; a non-finite gradient raises and leaves ``state``
    untouched.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.theta.shape:
        raise ValueError("gradient shape does not match the parameters")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    g = clip_by_global_norm(grad, cfg.clip_norm)
    k = state.k + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1**k)
    v_hat = v / (1.0 - cfg.beta2**k)
    lr = np.asarray(rates, dtype=float) * cfg.lr_decay**state.k
    theta = state.theta - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return dataclasses.replace(state, theta=theta, m=m, v=v, k=k)


# ---------------------------------------------------------------------------
# Micro-batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MicrobatchPlan:
    """Ordered list of ``(angle indices, (first path, end path))`` batches."""

    batches: tuple
    deterministic: bool = True

    @classmethod
    def full(cls, n_angles: int, n_paths: int) -> "MicrobatchPlan":
        return cls(((tuple(range(n_angles)), (0, n_paths)),))

    @classmethod
    def split(cls, n_angles: int, n_paths: int, n_batches: int, by: str = "rays") -> "MicrobatchPlan":
        """Exact partition into ``n_batches`` pieces along rays or angles."""
        if n_batches < 1:
            raise ValueError("need at least one batch")
        if by == "angles":
            if n_batches > n_angles:
                raise ValueError("more angle batches than angles")
            groups = np.array_split(np.arange(n_angles), n_batches)
            return cls(tuple((tuple(int(a) for a in g), (0, n_paths)) for g in groups))
        if by != "rays":
            raise ValueError("split along 'rays' or 'angles'")
        edges = np.linspace(0, n_paths, n_batches + 1).round().astype(int)
        angles = tuple(range(n_angles))
        return cls(tuple((angles, (int(a), int(b))) for a, b in zip(edges[:-1], edges[1:]) if b > a))

    def check(self, n_angles: int, n_paths: int) -> None:
        """Raise unless every (angle, path) pair is covered exactly once."""
        for a in range(n_angles):
            spans = sorted(r for angles, r in self.batches if a in angles)
            pos = 0
            for lo, hi in spans:
                if lo != pos or hi <= lo:
                    raise ValueError(f"angle {a}: batches do not tile the path range")
                pos = hi
            if pos != n_paths:
                raise ValueError(f"angle {a}: batches cover {pos} of {n_paths} paths")
        if any(not 0 <= a < n_angles for angles, _ in self.batches for a in angles):
            raise ValueError("batch refers to an unknown angle")


# ---------------------------------------------------------------------------
# Problem definition and iteration
# ---------------------------------------------------------------------------


@dataclass
class Evaluation:
    loss: float
    grad: np.ndarray  # normalized units
    grad_physical: np.ndarray
    image: object
    values: np.ndarray


@dataclass
class Problem:
    """Everything that defines the objective ``theta -> loss``.

    Attributes:
        scene: Scene at nominal values; optimized targets are overwritten.
        acq: Acquisition at nominal values.
        specs: Optimized parameters.
        chain: Imaging chain (one grid per steering angle).
        reference: Target B-mode pixels on the chain's grid.
        seed: Common-random-number seed used at every iteration.
        plan: Micro-batch plan; defaults to a single batch.
        max_bounces: Interface interactions per path.
        l1: L1 weight.
        l2: L2 weight.
        threads: Transport worker threads.
        cache_records: Keep path records between the forward and gradient
            passes instead of re-tracing them.
        branch_impedance: Optional fixed ``{medium: impedance}`` for the
            reflect/transmit branch probabilities (see
            :func:`usray.transport.trace_event`).
    """

    scene: Scene
    acq: Acquisition
    specs: tuple
    chain: ImagingChain
    reference: np.ndarray
    seed: int = 0
    plan: MicrobatchPlan | None = None
    max_bounces: int = 4
    l1: float = 1.0
    l2: float = 1.0
    threads: int = 1
    cache_records: bool = True
    branch_impedance: dict | None = None

    def __post_init__(self):
        self.specs = tuple(self.specs)
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        known = self.scene.targets() + self.acq.targets()
        for s in self.specs:
            if s.target not in known:
                raise ValueError(f"{s.name}: {s.target!r} is not differentiable; choose from {known}")
        if self.plan is None:
            self.plan = MicrobatchPlan.full(len(self.acq.angles), self.acq.n_paths)
        self.plan.check(len(self.acq.angles), self.acq.n_paths)
        if len(self.chain.grids) != len(self.acq.angles):
            raise ValueError("imaging chain needs one grid per steering angle")
        self.reference = np.asarray(self.reference, dtype=float)
        if self.reference.shape != self.chain.grid.shape:
            raise ValueError(f"reference shape {self.reference.shape} != image grid {self.chain.grid.shape}")

    @property
    def targets(self) -> tuple:
        return tuple(s.target for s in self.specs)

    def configure(self, values) -> tuple[Scene, Acquisition]:
        """Scene and acquisition with the optimized targets set to ``values``."""
        scene_vals, acq_vals = {}, {}
        for s, v in zip(self.specs, values):
            (acq_vals if s.target in self.acq.targets() else scene_vals)[s.target] = float(v)
        return self.scene.replace(scene_vals), self.acq.replace(acq_vals)

    def _channels(self, acq):
        return [tp.ChannelData.zeros(acq.array.n_elements, acq.n_samples, acq.fs * 1e6) for _ in acq.angles]

    def forward(self, scene: Scene, acq: Acquisition, keep_records: bool = False):
        """Pass one: trace every batch into per-angle channel data."""
        channels = self._channels(acq)
        records = []
        for angles, rng in self.plan.batches:
            batch = {}
            for a in angles:
                _, recs, _ = tp.simulate_event(
                    scene, acq, a, self.seed, self.max_bounces, rng, self.threads,
                    out=channels[a], keep_records=keep_records, branch_impedance=self.branch_impedance,
                )
                batch[a] = recs
            records.append(batch)
        return channels, records

    def gradient(self, scene: Scene, acq: Acquisition, adjoints, records=None) -> np.ndarray:
        """Pass two: per-batch transport VJPs summed in physical units."""
        grad = np.zeros(len(self.specs))
        for i, (angles, rng) in enumerate(self.plan.batches):
            for a in angles:
                if records is not None:
                    recs = records[i][a]
                else:
                    recs = tp.trace_event(
                        scene, acq, a, self.seed, self.max_bounces, rng,
                        threads=self.threads, branch_impedance=self.branch_impedance,
                    ).records
                grad = grad + tp.transport_vjp(scene, acq, recs, adjoints[a], self.targets, True, self.threads)
        return grad

    def image(self, channels):
        return self.chain.forward([c.values for c in channels])

    def evaluate(self, theta, with_grad: bool = True) -> Evaluation:
        values, factors = physical_vector(theta, self.specs)
        scene, acq = self.configure(values)
        channels, records = self.forward(scene, acq, keep_records=with_grad and self.cache_records)
        img, tape = self.image(channels)
        loss, g_img = image_loss(img.pixels, self.reference, self.l1, self.l2)
        if not with_grad:
            return Evaluation(loss, np.full(len(self.specs), np.nan), np.full(len(self.specs), np.nan), img, values)
        adj = self.chain.vjp(tape, g_img)
        adj = [adj] if isinstance(adj, np.ndarray) else adj
        g_phys = self.gradient(scene, acq, adj, records if self.cache_records else None)
        return Evaluation(loss, g_phys * factors, g_phys, img, values)

    def frozen(self, theta0) -> "FrozenObjective":
        """Objective with every random draw and branch frozen at ``theta0``."""
        return FrozenObjective(self, np.array(theta0, dtype=float))


class FrozenObjective:
    """``theta -> loss`` replaying paths recorded at a fixed point.

    Discrete decisions (hit sequence, reflect/transmit branches, receiver
    choices) stay as recorded; paths whose geometry no longer matches are
    dropped. This is the function whose derivative the transport VJP
    returns, so finite differences of it are directly comparable.
    """

    def __init__(self, problem: Problem, theta0: np.ndarray):
        self.problem = problem
        self.theta0 = theta0
        values, _ = physical_vector(theta0, problem.specs)
        scene, acq = problem.configure(values)
        _, self.records = problem.forward(scene, acq, keep_records=True)

    def loss(self, theta) -> float:
        pb = self.problem
        values, _ = physical_vector(theta, pb.specs)
        scene, acq = pb.configure(values)
        channels = pb._channels(acq)
        for batch in self.records:
            for a, recs in batch.items():
                tp.replay_channels(scene, acq, recs, strict=False, threads=pb.threads, out=channels[a])
        img, _ = pb.image(channels)
        return image_loss(img.pixels, pb.reference, pb.l1, pb.l2)[0]

    def gradient(self) -> np.ndarray:
        """AD gradient at ``theta0`` in normalized units."""
        pb = self.problem
        values, factors = physical_vector(self.theta0, pb.specs)
        scene, acq = pb.configure(values)
        channels = pb._channels(acq)
        for batch in self.records:
            for a, recs in batch.items():
                tp.replay_channels(scene, acq, recs, strict=True, threads=pb.threads, out=channels[a])
        img, tape = pb.image(channels)
        _, g_img = image_loss(img.pixels, pb.reference, pb.l1, pb.l2)
        adj = pb.chain.vjp(tape, g_img)
        adj = [adj] if isinstance(adj, np.ndarray) else adj
        return pb.gradient(scene, acq, adj, self.records) * factors


def run_iteration(problem: Problem, state: OptState, cfg: AdamConfig = AdamConfig()):
    """Evaluate loss and gradient at ``state.theta`` and take one Adam step.

    Returns ``(evaluation, new_state)``; histories record the pre-update
    parameters together with their loss and gradient.
    """
    ev = problem.evaluate(state.theta)
    new = adam_step(state, ev.grad, cfg.rates(problem.specs), cfg)
    new.loss_history = state.loss_history + [ev.loss]
    new.param_history = state.param_history + [ev.values]
    new.grad_history = state.grad_history + [ev.grad]
    return ev, new


@dataclass
class OptResult:
    state: OptState
    initial: object
    final: object
    final_values: np.ndarray


def run_optimization(problem: Problem, iterations: int, cfg: AdamConfig = AdamConfig(), theta0=None, callback=None) -> OptResult:
    """Run a fixed iteration budget; ``callback(k, evaluation, state)`` sees each step."""
    if iterations < 1:
        raise ValueError("need at least one iteration")
    theta0 = [s.init for s in problem.specs] if theta0 is None else theta0
    state = OptState.start(theta0)
    initial = None
    for k in range(iterations):
        ev, state = run_iteration(problem, state, cfg)
        if initial is None:
            initial = ev.image
        if callback is not None:
            callback(k, ev, state)
    last = problem.evaluate(state.theta, with_grad=False)
    return OptResult(state, initial, last.image, last.values)
