"""``usray`` command line: render, optimize and gradcheck from a run file.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, files
from . import gradcheck as gc
from . import optimize as op
from . import transport as tp
from .config import THREADS_ENV, ConfigError, RunConfig, dump_defaults, load_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _log(msg: str) -> None:
    print(msg, flush=True)


def write_manifest(out: Path, cfg: RunConfig, command: str, outputs) -> Path:
    """Record what produced the directory; free of timestamps so reruns match."""
    man = {
        "command": command,
        "config": str(cfg.path) if cfg.path else None,
        "config_sha256": cfg.digest,
        "seed": cfg.seed,
        "versions": {
            "usray": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "outputs": sorted(Path(p).name for p in outputs),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(man, indent=2) + "\n")
    return path


def _prepare_output(cfg: RunConfig, override: str | None) -> Path:
    out = Path(override).resolve() if override else cfg.output
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def render_channels(cfg: RunConfig, threads: int):
    """Simulate every transmit event of the run file; returns per-event arrays."""
    scene, acq = cfg.scene(), cfg.acquisition()
    channels, dropped = [], 0
    for a in range(len(acq.angles)):
        ch, _, d = tp.simulate_event(
            scene, acq, a, cfg.seed, cfg.geti("run", "max_bounces"), threads=threads, keep_records=False
        )
        channels.append(ch.values)
        dropped += d
    return scene, acq, channels, dropped


def cmd_render(cfg: RunConfig, threads: int, out_override: str | None = None) -> Path:
    scene, acq = cfg.scene(), cfg.acquisition()
    views = {name: cfg.view(name, scene, acq) for name in ("full", "zoom")}
    chains = {name: cfg.chain(v, scene, acq) for name, v in views.items()}
    out = _prepare_output(cfg, out_override)
    _log(f"render: {len(acq.angles)} event(s), {acq.n_paths} paths each, {threads} thread(s)")
    scene, acq, channels, dropped = render_channels(cfg, threads)
    written = [out / "channels.bin"]
    files.write_channels(written[0], channels, acq.fs * 1e6, acq.angles)
    meta = [f"events {len(acq.angles)}", f"paths_per_event {acq.n_paths}", f"dropped_arrivals {dropped}"]
    for name, chain in chains.items():
        img, _ = chain.forward(channels)
        written += files.write_image(out / f"bmode_{name}", img.pixels, img.x, img.z, img.dr)
        row = int(np.argmax(img.pixels.max(axis=1)))
        meta.append(f"{name}_brightest_row_depth_mm {float(img.z[row])!r}")
    (out / "render.txt").write_text("\n".join(meta) + "\n")
    written.append(out / "render.txt")
    write_manifest(out, cfg, "render", written)
    _log("\n".join(meta))
    return out


def _write_history(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for k, row in enumerate(rows):
            w.writerow([k] + [repr(float(v)) for v in np.atleast_1d(row)])


def cmd_optimize(cfg: RunConfig, threads: int, out_override: str | None = None, iterations: int | None = None):
    pb = cfg.problem(threads)
    n_iter = cfg.geti("optimize", "iterations") if iterations is None else iterations
    if n_iter < 1:
        raise ConfigError("[optimize] iterations must be >= 1")
    adam = cfg.adam()
    out = _prepare_output(cfg, out_override)
    names = [s.name for s in pb.specs]
    _log(f"optimize: {n_iter} iterations over {', '.join(names)}")

    def progress(k, ev, state):
        if k % 10 == 0 or k == n_iter - 1:
            vals = " ".join(f"{n}={v:.4f}" for n, v in zip(names, ev.values))
            _log(f"  it {k:4d}  loss {ev.loss:.4e}  {vals}")

    res = op.run_optimization(pb, n_iter, adam, callback=progress)
    st = res.state
    written = [out / "loss_history.csv", out / "param_history.csv", out / "grad_history.csv"]
    _write_history(written[0], ["iteration", "loss"], st.loss_history)
    _write_history(written[1], ["iteration"] + names, st.param_history)
    _write_history(written[2], ["iteration"] + names, st.grad_history)
    g = pb.chain.grid
    for tag, pix in (("initial", res.initial.pixels), ("final", res.final.pixels), ("reference", pb.reference)):
        written += files.write_image(out / f"image_{tag}", pix, g.x, g.z, pb.chain.dr)
    write_manifest(out, cfg, "optimize", written)
    _log("final: " + " ".join(f"{n}={v:.4f}" for n, v in zip(names, res.final_values)))
    return out, res


def cmd_gradcheck(cfg: RunConfig, threads: int, out_override: str | None = None, params=None):
    pb = cfg.problem(threads)
    available = [s.name for s in pb.specs]
    if params is None:
        raw = cfg.get("gradcheck", "params").replace(",", " ").split()
        params = raw or available
    unknown = [p for p in params if p not in available]
    if unknown:
        raise ConfigError(f"unknown parameter(s) {unknown}; available: {available}")
    at = cfg.get("gradcheck", "at")
    if at == "init":
        theta = [s.init for s in pb.specs]
    elif at == "truth":
        if any(s.truth is None for s in pb.specs):
            raise ConfigError("[gradcheck] at = truth needs truth values for every parameter")
        theta = [op.to_normalized(s.truth, s) for s in pb.specs]
    else:
        raise ConfigError("[gradcheck] at must be init or truth")
    eps = cfg.epsilons()
    out = _prepare_output(cfg, out_override)
    sweeps = gc.sweep_problem(pb, theta, params, eps)
    written = []
    lines = []
    for name, sw in sweeps.items():
        path = out / f"gradcheck_{name}.csv"
        sw.write_csv(path)
        written.append(path)
        e, rel = sw.best()
        lines.append(f"{name}: g_ad {sw.g_ad:.6e}  best eps {e:.3g}  rel err {rel:.3e}  u-shaped {sw.is_u_shaped()}")
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    written.append(out / "gradcheck.txt")
    write_manifest(out, cfg, "gradcheck", written)
    _log("\n".join(lines))
    return out, sweeps


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="usray", description="Differentiable Monte Carlo ultrasound simulation.")
    p.add_argument("--dump-defaults", action="store_true", help="print every config key with its default and exit")
    p.add_argument("--version", action="version", version=f"usray {__version__}")
    sub = p.add_subparsers(dest="command")
    for name, desc in (
        ("render", "simulate channel data and write B-mode images"),
        ("optimize", "fit scene parameters to a reference image"),
        ("gradcheck", "compare AD gradients with finite differences"),
    ):
        s = sub.add_parser(name, help=desc)
        s.add_argument("config", help="run file; bundled names such as cylinder.cfg are found automatically")
        s.add_argument("-o", "--output", help="output directory (overrides [run] output)")
        s.add_argument("--threads", type=int, help=f"worker threads (default: [run] threads, then ${THREADS_ENV}, then 1)")
        if name == "optimize":
            s.add_argument("--iterations", type=int, help="override [optimize] iterations")
        if name == "gradcheck":
            s.add_argument("--params", nargs="+", help="parameter names (default: all)")
    return p


def bundled(name: str) -> Path:
    return Path(__file__).parent / "data" / name


def _find_config(arg: str) -> Path:
    path = Path(arg)
    if not path.exists() and bundled(arg).is_file():
        return bundled(arg)
    return path


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_defaults:
        sys.stdout.write(dump_defaults())
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(_find_config(args.config))
        threads = cfg.threads(args.threads)
        if args.command == "render":
            cmd_render(cfg, threads, args.output)
        elif args.command == "optimize":
            cmd_optimize(cfg, threads, args.output, args.iterations)
        else:
            cmd_gradcheck(cfg, threads, args.output, args.params)
    except ConfigError as exc:
        print(f"usray: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"usray: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
