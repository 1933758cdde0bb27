"""Run configuration: one INI-style text file per run.

A run file references a scene file and sets the acquisition, imaging,
optimizer and reference sections. Optimized parameters get one section
each::

    [param R]
    target = surface.cyl.radius
    min = 3.0
    max = 7.0
    init = 5.6          ; physical units
    group = material
    truth = 5.0         ; used to simulate a self-consistent reference

Paths are resolved relative to the run file.
"""

from __future__ import annotations

import configparser
import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import files
from . import imaging as im
from . import optimize as op
from .scene import Scene, SceneError, load_scene
from .transducer import Acquisition, TransducerArray

THREADS_ENV = "USRAY_THREADS"

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {
        "seed": "1",
        "output": "out",
        "threads": "0",
        "max_bounces": "4",
    },
    "scene": {
        "file": "",
    },
    "acquisition": {
        "n_elements": "64",
        "pitch": "0.3",
        "f_c": "5.0",
        "fs": "40.0",
        "n_samples": "2048",
        "n_cycles": "2.0",
        "angles": "0 0 1",
        "rays_per_element": "256",
        "main_lobe": "20",
        "cutoff": "60",
    },
    "imaging": {
        "c0": "",
        "x_range": "-12 12",
        "z_range": "2 35",
        "dx": "0.15",
        "dz_wavelengths": "0.1",
        "dynamic_range": "40",
        "tgc_db_per_mm": "0",
        "bandpass": "",
        "zoom_x": "-6 6",
        "zoom_z": "12 20",
        "zoom_dx": "0.1",
        "zoom_dz_wavelengths": "0.1",
    },
    "optimize": {
        "iterations": "200",
        "view": "full",
        "l1": "1",
        "l2": "1",
        "beta1": "0.9",
        "beta2": "0.999",
        "eps": "1e-8",
        "clip_norm": "1.0",
        "lr_material": "0.05",
        "lr_acquisition": "0.01",
        "lr_decay": "1.0",
        "batches": "1",
        "batch_by": "rays",
        "branch_impedance": "",
    },
    "reference": {
        "source": "simulate",
        "file": "",
        "factor": "1.0",
        "seed": "",
    },
    "gradcheck": {
        "params": "",
        "at": "init",
        "eps_min": "1e-6",
        "eps_max": "1e-1",
        "points_per_decade": "4",
    },
}

PARAM_KEYS = ("target", "min", "max", "init", "group", "truth")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def dump_defaults() -> str:
    lines = []
    for sec, body in DEFAULTS.items():
        lines.append(f"[{sec}]")
        lines += [f"{k} = {v}" for k, v in body.items()]
        lines.append("")
    lines += ["; one section per optimized parameter", "[param NAME]"]
    lines += [f"; {k} = ..." for k in PARAM_KEYS]
    return "\n".join(lines) + "\n"


def _floats(sec: str, key: str, raw: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(t) for t in raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"[{sec}] {key}: cannot parse {raw!r} as numbers") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"[{sec}] {key}: expected {n} numbers, got {len(vals)}")
    return vals


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    return max(1, n)


@dataclass
class View:
    x_range: tuple[float, float]
    z_range: tuple[float, float]
    dx: float
    dz: float


@dataclass
class RunConfig:
    """Parsed run file with every default filled in."""

    path: Path | None
    text: str
    sections: dict[str, dict[str, str]]
    params: list[dict[str, str]] = field(default_factory=list)

    # -- typed accessors ------------------------------------------------------
    def get(self, sec: str, key: str) -> str:
        return self.sections[sec][key]

    def getf(self, sec: str, key: str) -> float:
        return _floats(sec, key, self.get(sec, key), 1)[0]

    def geti(self, sec: str, key: str) -> int:
        v = self.getf(sec, key)
        if v != int(v):
            raise ConfigError(f"[{sec}] {key}: expected an integer")
        return int(v)

    def resolve(self, rel: str) -> Path:
        base = self.path.parent if self.path is not None else Path(".")
        return (base / rel).resolve()

    @property
    def seed(self) -> int:
        return self.geti("run", "seed")

    @property
    def output(self) -> Path:
        return self.resolve(self.get("run", "output"))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def threads(self, override: int | None = None) -> int:
        if override is not None:
            return max(1, override)
        n = self.geti("run", "threads")
        return n if n > 0 else default_threads()

    # -- builders ---------------------------------------------------------------
    def scene(self) -> Scene:
        rel = self.get("scene", "file")
        if not rel:
            raise ConfigError("[scene] file is required")
        path = self.resolve(rel)
        if not path.is_file():
            raise ConfigError(f"scene file not found: {path}")
        try:
            return load_scene(path)
        except (SceneError, KeyError, OSError) as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def angles(self) -> tuple[float, ...]:
        start, stop, step = _floats("acquisition", "angles", self.get("acquisition", "angles"), 3)
        if step <= 0 or stop < start:
            raise ConfigError("[acquisition] angles: need start <= stop and step > 0")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(math.radians(start + i * step) for i in range(n))

    def acquisition(self) -> Acquisition:
        a = "acquisition"
        try:
            arr = TransducerArray(
                self.geti(a, "n_elements"),
                self.getf(a, "pitch"),
                math.radians(self.getf(a, "main_lobe")),
                math.radians(self.getf(a, "cutoff")),
            )
            return Acquisition(
                arr,
                self.angles(),
                self.geti(a, "rays_per_element"),
                self.getf(a, "f_c"),
                self.getf(a, "fs"),
                self.geti(a, "n_samples"),
                self.getf(a, "n_cycles"),
            )
        except ValueError as exc:
            raise ConfigError(f"[acquisition] {exc}") from None

    def c0(self, scene: Scene) -> float:
        raw = self.get("imaging", "c0")
        return float(raw) if raw else scene.media[scene.background].sound_speed

    def view(self, name: str, scene: Scene, acq: Acquisition) -> View:
        """``full`` or ``zoom`` pixel layout; depth steps are in wavelengths."""
        i = "imaging"
        lam = self.c0(scene) / (acq.f_c * 1e6) * 1e3
        if name == "full":
            keys = ("x_range", "z_range", "dx", "dz_wavelengths")
        elif name == "zoom":
            keys = ("zoom_x", "zoom_z", "zoom_dx", "zoom_dz_wavelengths")
        else:
            raise ConfigError(f"unknown view {name!r} (use full or zoom)")
        xr = tuple(_floats(i, keys[0], self.get(i, keys[0]), 2))
        zr = tuple(_floats(i, keys[1], self.get(i, keys[1]), 2))
        return View(xr, zr, self.getf(i, keys[2]), self.getf(i, keys[3]) * lam)

    def chain(self, view: View, scene: Scene, acq: Acquisition) -> im.ImagingChain:
        i = "imaging"
        fir = None
        if self.get(i, "bandpass"):
            lo, hi = _floats(i, "bandpass", self.get(i, "bandpass"), 2)
            fir = im.design_bandpass(lo, hi, acq.fs)
        try:
            grids = im.build_grids(acq.array, acq.angles, self.c0(scene), view.x_range, view.z_range, view.dx, view.dz)
            return im.ImagingChain(
                grids, acq.f_c, acq.fs * 1e6, self.getf(i, "dynamic_range"), self.getf(i, "tgc_db_per_mm"), fir
            )
        except ValueError as exc:
            raise ConfigError(f"[imaging] {exc}") from None

    def specs(self) -> list[op.ParamSpec]:
        out = []
        for p in self.params:
            name = p["name"]
            missing = [k for k in ("target", "min", "max") if not p.get(k)]
            if missing:
                raise ConfigError(f"[param {name}] missing {', '.join(missing)}")
            lo = _floats(f"param {name}", "min", p["min"], 1)[0]
            hi = _floats(f"param {name}", "max", p["max"], 1)[0]
            truth = _floats(f"param {name}", "truth", p["truth"], 1)[0] if p.get("truth") else None
            try:
                spec = op.ParamSpec(name, p["target"], lo, hi, 0.5, p.get("group") or "material", truth)
                init = _floats(f"param {name}", "init", p["init"], 1)[0] if p.get("init") else spec.lo + 0.5 * spec.span
                spec = op.ParamSpec(name, spec.target, lo, hi, op.to_normalized(init, spec), spec.group, truth)
            except ValueError as exc:
                raise ConfigError(f"[param {name}] {exc}") from None
            out.append(spec)
        return out

    def adam(self) -> op.AdamConfig:
        o = "optimize"
        try:
            return op.AdamConfig(
                *(self.getf(o, k) for k in ("beta1", "beta2", "eps", "clip_norm", "lr_material", "lr_acquisition", "lr_decay"))
            )
        except ValueError as exc:
            raise ConfigError(f"[optimize] {exc}") from None

    def branch_impedance(self) -> dict | None:
        raw = self.get("optimize", "branch_impedance").replace(",", " ").split()
        if not raw:
            return None
        if len(raw) % 2:
            raise ConfigError("[optimize] branch_impedance: expected 'medium value' pairs")
        try:
            return {raw[i]: float(raw[i + 1]) for i in range(0, len(raw), 2)}
        except ValueError:
            raise ConfigError("[optimize] branch_impedance: values must be numbers") from None

    def plan(self, acq: Acquisition) -> op.MicrobatchPlan:
        n = self.geti("optimize", "batches")
        by = self.get("optimize", "batch_by")
        try:
            if n == 1:
                return op.MicrobatchPlan.full(len(acq.angles), acq.n_paths)
            return op.MicrobatchPlan.split(len(acq.angles), acq.n_paths, n, by)
        except ValueError as exc:
            raise ConfigError(f"[optimize] {exc}") from None

    def epsilons(self) -> np.ndarray:
        g = "gradcheck"
        lo, hi, ppd = self.getf(g, "eps_min"), self.getf(g, "eps_max"), self.geti(g, "points_per_decade")
        if not (0 < lo < hi) or ppd < 1:
            raise ConfigError("[gradcheck] need 0 < eps_min < eps_max and points_per_decade >= 1")
        n = int(round(math.log10(hi / lo) * ppd)) + 1
        return np.logspace(math.log10(lo), math.log10(hi), n)

    def reference_file(self) -> Path | None:
        if self.get("reference", "source") != "file":
            return None
        rel = self.get("reference", "file")
        if not rel:
            raise ConfigError("[reference] source = file needs a file")
        path = self.resolve(rel)
        if not path.is_file():
            raise ConfigError(f"reference image not found: {path}")
        if not path.with_suffix(".txt").is_file():
            raise ConfigError(f"reference sidecar not found: {path.with_suffix('.txt')}")
        return path

    def problem(self, threads: int = 1) -> op.Problem:
        """Optimization problem with its reference image loaded or simulated."""
        scene, acq = self.scene(), self.acquisition()
        specs = self.specs()
        if not specs:
            raise ConfigError("no [param ...] sections")
        view = self.view(self.get("optimize", "view"), scene, acq)
        chain = self.chain(view, scene, acq)
        ref_path = self.reference_file()
        try:
            pb = op.Problem(
                scene, acq, specs, chain, np.zeros(chain.grid.shape), self.seed, self.plan(acq),
                self.geti("run", "max_bounces"), self.getf("optimize", "l1"), self.getf("optimize", "l2"),
                threads, True, self.branch_impedance(),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if ref_path is not None:
            pix, x, z = files.read_image(ref_path)
            g = chain.grid
            pb.reference = files.resample(pix, x, z, self.getf("reference", "factor"), g.x, g.z)
        else:
            pb.reference = simulate_reference(pb, self.reference_seed())
        return pb

    def reference_seed(self) -> int:
        raw = self.get("reference", "seed")
        return int(raw) if raw else self.seed


def simulate_reference(pb: op.Problem, seed: int) -> np.ndarray:
    """B-mode image at the parameters' ``truth`` values."""
    missing = [s.name for s in pb.specs if s.truth is None]
    if missing:
        raise ConfigError(f"simulated reference needs truth values for {missing}")
    theta = [op.to_normalized(s.truth, s) for s in pb.specs]
    own = pb.seed
    pb.seed = seed
    try:
        return pb.evaluate(theta, with_grad=False).image.pixels
    finally:
        pb.seed = own


def parse_config(text: str, path=None) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    sections = {k: dict(v) for k, v in DEFAULTS.items()}
    params = []
    for sec in cp.sections():
        head = sec.split()
        body = dict(cp[sec])
        if head[0] == "param" and len(head) == 2:
            unknown = set(body) - set(PARAM_KEYS)
            if unknown:
                raise ConfigError(f"[{sec}] unknown keys {sorted(unknown)}")
            params.append({"name": head[1], **body})
        elif sec in DEFAULTS:
            unknown = set(body) - set(DEFAULTS[sec])
            if unknown:
                raise ConfigError(f"[{sec}] unknown keys {sorted(unknown)}")
            sections[sec].update(body)
        else:
            raise ConfigError(f"unknown section [{sec}]")
    return RunConfig(Path(path) if path is not None else None, text, sections, params)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.resolve())
