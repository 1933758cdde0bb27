"""Monte Carlo acoustic path tracing into element channel data.

Every emitted ray is followed through up to ``max_bounces`` interface events.
At each event one next-event connection is made towards a randomly chosen
element centre; its arrival (element, time of flight, signed amplitude) is
later splatted into the channel record with the analytic pulse.

All random numbers come from a counter-based generator keyed by
``(seed, event)`` and indexed by the absolute path number, so a path sees the
same draws no matter how the work is chunked or threaded. The tracer writes a
:class:`PathRecord` per chunk. Replaying a record with dual-valued parameters
re-evaluates the same discrete path with frozen branch decisions and gives the
exact derivative of the frozen-sample channel data.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dual as dl
from .dual import Dual
from .scene import EPS_GEOM, Cylinder, Scene, all_crossings, hit_distance, nearest_hits, outward_normal
from .transducer import Acquisition, emission_from_draws, rx_weight_from_angle

KIND_NONE, KIND_REFLECT, KIND_TRANSMIT, KIND_TIR, KIND_KILLED = range(5)
MAX_CROSSINGS = 4
CHUNK = 4096
WINDOW_FLOOR = 1e-6  # pulse truncated where the envelope drops below this
BRANCH_FLOOR = 1e-2  # smallest reflect/transmit probability with fixed branch impedances


class StalePathError(RuntimeError):
    """Replay geometry no longer matches the recorded path."""


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass
class ChannelData:
    values: np.ndarray  # (n_elements, n_samples)
    fs: float  # Hz
    adjoint: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.adjoint is None:
            self.adjoint = np.zeros_like(self.values)

    @classmethod
    def zeros(cls, n_elements: int, n_samples: int, fs: float) -> "ChannelData":
        return cls(np.zeros((n_elements, n_samples)), fs)

    @property
    def shape(self):
        return self.values.shape


@dataclass
class Arrivals:
    """Struct-of-arrays arrival list; ``t0``/``amp`` may be duals after replay."""

    element: np.ndarray
    t0: object
    amp: object

    def __len__(self):
        return len(self.element)


@dataclass
class PathRecord:
    """Frozen realisation of one chunk of paths of one transmit event."""

    event: int
    start: int
    draws: np.ndarray  # (n, D)
    kind: np.ndarray  # (n, B) int8
    surf: np.ndarray  # (n, B) hit surface, -1 = miss
    sub: np.ndarray  # (n, B) root / segment index
    elem: np.ndarray  # (n, B) connected element
    conn: np.ndarray  # (n, B) bool, connection produced an arrival
    conn_surf: np.ndarray  # (n, B, MAX_CROSSINGS)
    conn_sub: np.ndarray
    p_reflect: np.ndarray  # (n, B) detached branch probability
    dead: np.ndarray  # (n, B) path ended after this vertex

    @property
    def n(self) -> int:
        return len(self.draws)

    @property
    def bounces(self) -> np.ndarray:
        """Number of surface interactions per path."""
        return np.sum(self.surf >= 0, axis=1)

    @classmethod
    def empty(cls, event, start, draws, n_bounces):
        n = len(draws)
        return cls(
            event=event,
            start=start,
            draws=draws,
            kind=np.zeros((n, n_bounces), dtype=np.int8),
            surf=np.full((n, n_bounces), -1, dtype=np.int32),
            sub=np.full((n, n_bounces), -1, dtype=np.int32),
            elem=np.full((n, n_bounces), -1, dtype=np.int32),
            conn=np.zeros((n, n_bounces), dtype=bool),
            conn_surf=np.full((n, n_bounces, MAX_CROSSINGS), -1, dtype=np.int32),
            conn_sub=np.full((n, n_bounces, MAX_CROSSINGS), -1, dtype=np.int32),
            p_reflect=np.zeros((n, n_bounces)),
            dead=np.zeros((n, n_bounces), dtype=bool),
        )


@dataclass
class TraceResult:
    arrivals: Arrivals
    records: list = field(default_factory=list)
    n_paths: int = 0


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class Phys:
    """Physical parameters as duals (tangent directions = differentiated targets)."""

    radius: Dual  # per surface, NaN for non-cylinders
    roughness: Dual  # per surface
    impedance: Dual  # per medium
    speed: np.ndarray  # per medium, m/s
    atten: np.ndarray  # per medium, Np/m
    pitch: Dual
    f_c: Dual  # MHz
    targets: tuple = ()


def bind_params(scene: Scene, acq: Acquisition, targets=()) -> Phys:
    """Build :class:`Phys` with unit tangents along ``targets``."""
    targets = tuple(targets)
    p = len(targets)
    eye = np.eye(p)

    def var(name, v):
        if name in targets:
            return Dual(v, eye[targets.index(name)])
        return Dual(v)

    for t in targets:
        if t not in scene.targets() + acq.targets():
            raise KeyError(f"unknown parameter {t!r}")
    radius, rough = [], []
    for s in scene.surfaces:
        if isinstance(s.shape, Cylinder):
            radius.append(var(f"surface.{s.name}.radius", s.shape.radius))
        else:
            radius.append(Dual(np.nan))
        rough.append(var(f"surface.{s.name}.roughness", s.roughness))
    imp = [var(f"medium.{m}.impedance", med.impedance) for m, med in scene.media.items()]

    def pack(items):
        d = dl.stack_scalars(items)
        if p and d.tan is None:
            d = Dual(d.val, np.zeros((p,) + d.shape))
        return d

    return Phys(
        radius=pack(radius) if radius else Dual(np.zeros(0)),
        roughness=pack(rough) if rough else Dual(np.zeros(0)),
        impedance=pack(imp),
        speed=np.array([m.sound_speed for m in scene.media.values()]),
        atten=np.array([m.attenuation for m in scene.media.values()]),
        pitch=var("array.pitch", acq.array.pitch),
        f_c=var("pulse.f_c", acq.f_c),
        targets=targets,
    )


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------


def draws_per_path(max_bounces: int) -> int:
    d = 2 + 4 * max_bounces
    return d + (-d) % 4


def path_draws(seed: int, event: int, start: int, n: int, width: int) -> np.ndarray:
    """Uniform draws for paths ``start .. start+n-1`` (rows), ``width`` per path.

    Philox yields four 64-bit words per counter step and ``width`` is a
    multiple of four, so jumping ``start*width/4`` steps lands exactly on
    row ``start`` of the full-event stream.
    """
    bg = np.random.Philox(key=np.array([seed, event], dtype=np.uint64))
    bg.advance(start * width // 4)
    return np.random.Generator(bg).random((n, width))


# ---------------------------------------------------------------------------
# Path walk (shared by trace and replay)
# ---------------------------------------------------------------------------


class _Ctx:
    def __init__(self, scene: Scene, acq: Acquisition, event: int, max_bounces: int, branch_impedance=None):
        self.scene = scene
        self.acq = acq
        self.event = event
        self.angle = acq.angles[event]
        self.c0 = scene.media[scene.background].sound_speed
        self.bg = scene.medium_index(scene.background)
        self.max_bounces = max_bounces
        self.width = draws_per_path(max_bounces)
        names = scene.medium_names
        self.inside = np.array([names.index(s.inside) for s in scene.surfaces], dtype=np.int64)
        self.outside = np.array([names.index(s.outside) for s in scene.surfaces], dtype=np.int64)
        self.branch_z = None
        if branch_impedance is not None:
            self.branch_z = np.array([branch_impedance[m] for m in names], dtype=float)


def _per_surface(scene, s, fn):
    """Evaluate ``fn(surface_index, rows)`` per surface group and scatter."""
    n = len(s)
    outs = None
    for i in np.unique(s):
        rows = np.nonzero(s == i)[0]
        res = fn(int(i), rows)
        if not isinstance(res, tuple):
            res = (res,)
        if outs is None:
            outs = [[] for _ in res]
        for o, r in zip(outs, res):
            o.append((rows, dl.broadcast(r, (len(rows),))))
    if outs is None:
        return None
    res = tuple(dl.assemble(n, o) for o in outs)
    return res if len(res) > 1 else res[0]


def _hit_geometry(ctx, ph, s, k, px, pz, dx, dz):
    scene = ctx.scene

    def dist(i, rows):
        return hit_distance(scene.surfaces[i], k[rows], px[rows], pz[rows], dx[rows], dz[rows], ph.radius[i])

    return _per_surface(scene, s, dist)


def _normals(ctx, ph, s, k, hx, hz):
    scene = ctx.scene

    def nrm(i, rows):
        return outward_normal(scene.surfaces[i], k[rows], hx[rows], hz[rows], ph.radius[i])

    return _per_surface(scene, s, nrm)


def _fresnel(ctx, ph, m1, m2, cos_i):
    """Amplitude reflection coefficient, refracted cosine and TIR mask."""
    z1 = ph.impedance[m1]
    z2 = ph.impedance[m2]
    if ctx.scene.refraction == "impedance":
        eta = z1 / z2
    else:
        eta = Dual(ph.speed[m2] / ph.speed[m1])
    sin2_t = eta * eta * (1.0 - cos_i * cos_i)
    tir = sin2_t.val > 1.0
    cos_t = dl.sqrt(dl.where(tir, 1.0, 1.0 - sin2_t))
    a = (z1 * cos_i - z2 * cos_t) / (z1 * cos_i + z2 * cos_t)
    a = dl.where(tir, 1.0, a)
    return a, eta, cos_t, tir


def _branch_reflectance(ctx, ph, m1, m2, cos_i, amp, tir):
    """Reflect probability for the branch draw.

    By default the reflected intensity fraction ``A^2`` at the current
    parameters. With fixed branch impedances the probability no longer moves
    with the optimized impedances, so branch decisions stay put between
    iterations; the path weights still use the current ``A``.
    """
    if ctx.branch_z is None:
        return np.where(tir, 1.0, amp.val**2)
    pr = _amp_value(ctx.branch_z[m1], ctx.branch_z[m2], dl.value(cos_i), ctx, ph, m1, m2) ** 2
    return np.where(tir, 1.0, np.clip(pr, BRANCH_FLOOR, 1.0 - BRANCH_FLOOR))


def _amp_value(z1, z2, cos_i, ctx, ph, m1, m2):
    eta = z1 / z2 if ctx.scene.refraction == "impedance" else ph.speed[m2] / ph.speed[m1]
    sin2_t = eta * eta * (1.0 - cos_i * cos_i)
    cos_t = np.sqrt(np.clip(1.0 - sin2_t, 0.0, None))
    return np.where(sin2_t > 1.0, 1.0, (z1 * cos_i - z2 * cos_t) / (z1 * cos_i + z2 * cos_t))


def _radii_values(ph):
    return list(ph.radius.val)


def _connect(ctx, ph, rec, b, ids, mode, hx, hz, nx, nz, dx, dz, m1, m2, tau, phi, rough, length):
    """Next-event connection from hit points to a chosen element centre.

    Returns ``(rows, element, t0, amplitude)`` for the connected rows, or
    ``None``. The reflected lobe is evaluated at the half-vector between the
    reversed incident direction and the connection direction, with the
    Fresnel split taken on that microfacet.
    """
    acq = ctx.acq
    arr = acq.array
    ne = arr.n_elements
    n = len(ids)
    if mode == "trace":
        ue = rec.draws[ids, 2 + 4 * b]
        ce = np.minimum((ue * ne).astype(np.int64), ne - 1)
        rec.elem[ids, b] = ce
    else:
        ce = rec.elem[ids, b].astype(np.int64)
    xe = (ce - (ne - 1) / 2) * ph.pitch
    vx = xe - hx
    vz = -hz
    dc = dl.sqrt(vx * vx + vz * vz)
    wx, wz = vx / dc, vz / dc
    vis = ((nx * wx + nz * wz).val > 0) & (hz.val > 0)

    radii = _radii_values(ph)
    _, cs, ck, count = all_crossings(ctx.scene, hx.val, hz.val, wx.val, wz.val, dc.val, radii, max_cross=MAX_CROSSINGS)
    ok_geom = vis & (count <= MAX_CROSSINGS)
    if mode == "trace":
        ok = ok_geom
        rec.conn_surf[ids, b] = cs
        rec.conn_sub[ids, b] = ck
    else:
        ok = rec.conn[ids, b].copy()
        stale = ok & (
            ~ok_geom | np.any(cs != rec.conn_surf[ids, b], axis=1) | np.any(ck != rec.conn_sub[ids, b], axis=1)
        )
        if stale.any():
            if mode == "strict":
                raise StalePathError(f"connection geometry changed for {int(stale.sum())} path(s) at bounce {b}")
            ok &= ~stale
        cs = rec.conn_surf[ids, b]
        ck = rec.conn_sub[ids, b]
    rows = np.nonzero(ok)[0]
    if len(rows) == 0:
        if mode == "trace":
            rec.conn[ids, b] = False
        return None

    # restrict to connected rows
    def sub(x):
        return x[rows]

    hx_, hz_, nx_, nz_, dx_, dz_ = map(sub, (hx, hz, nx, nz, dx, dz))
    wx_, wz_, dc_, tau_, phi_, length_ = map(sub, (wx, wz, dc, tau, phi, length))
    m1_, ce_, rough_ = m1[rows], ce[rows], sub(rough)
    cs_, ck_ = cs[rows], ck[rows]
    cnt = np.sum(cs_ >= 0, axis=1)

    # walk the straight connection through intermediate interfaces
    trans = Dual(np.ones(len(rows)))
    t_prev = Dual(np.zeros(len(rows)))
    time = tau_
    att_len = None
    cur = m1_.copy()
    has_att = bool(np.any(ph.atten > 0))
    for j in range(MAX_CROSSINGS):
        live = np.nonzero(cnt > j)[0]
        if len(live) == 0:
            break
        sj, kj = cs_[live, j], ck_[live, j]
        tj = _hit_geometry(ctx, ph, sj, kj, hx_[live], hz_[live], wx_[live], wz_[live])
        seg = tj - t_prev[live]
        c_cur = ph.speed[cur[live]]
        dt = seg * (1e-3 / c_cur)
        time = _add_rows(time, live, dt)
        if has_att:
            att_len = _add_rows(att_len if att_len is not None else Dual(np.zeros(len(rows))), live, seg * (ph.atten[cur[live]] * 1e-3))
        gx = hx_[live] + tj * wx_[live]
        gz = hz_[live] + tj * wz_[live]
        ngx, ngz = _normals(ctx, ph, sj, kj, gx, gz)
        from_out = (ngx * wx_[live] + ngz * wz_[live]).val < 0
        sg = np.where(from_out, 1.0, -1.0)
        cos_c = -(ngx * sg * wx_[live] + ngz * sg * wz_[live])
        a_out = np.where(from_out, ctx.outside[sj], ctx.inside[sj])
        a_in = np.where(from_out, ctx.inside[sj], ctx.outside[sj])
        a_c, _, _, tir_c = _fresnel(ctx, ph, a_out, a_in, cos_c)
        tfac = dl.where(tir_c, 0.0, 1.0 - a_c * a_c)
        trans = _mul_rows(trans, live, tfac)
        cur[live] = a_in
        t_prev = _set_rows(t_prev, live, tj)
    seg = dc_ - t_prev
    time = time + seg * (1e-3 / ph.speed[cur])
    if has_att:
        att_len = (att_len if att_len is not None else 0.0) + seg * (ph.atten[cur] * 1e-3)

    # microfacet lobe value towards the connection direction
    mx, mz = wx_ - dx_, wz_ - dz_
    mn = dl.sqrt(mx * mx + mz * mz)
    mx, mz = mx / mn, mz / mn
    cpsi = mx * nx_ + mz * nz_
    c2 = cpsi * cpsi
    tan2 = (1.0 - c2) / c2
    a2 = rough_ * rough_
    lobe = (1.0 + tan2 / a2) ** -1.5 / (2.0 * rough_) / c2 * 0.5
    amp, _, _, _ = _fresnel(ctx, ph, m1_, m2[rows], -(dx_ * mx + dz_ * mz))

    cos_rx = hz_ / dc_
    frx = rx_weight_from_angle(dl.arctan2(wx_, cos_rx), arr.main_lobe, arr.cutoff)
    a = phi_ * (amp * dl.absolute(amp)) * lobe * trans * frx * cos_rx * (ne * ph.pitch) / dc_
    if att_len is not None:
        a = a * dl.exp(-att_len)
    if ctx.scene.spreading:
        a = a / (length_ + dc_)  # total path length in mm
    if mode == "trace":
        good = frx.val > 0
        flag = np.zeros(n, dtype=bool)
        flag[rows[good]] = True
        rec.conn[ids, b] = flag
        if not good.all():
            rows, ce_, time, a = rows[good], ce_[good], time[good], a[good]
    return rows, ce_, time, a


def _add_rows(x: Dual, rows, y):
    """``x[rows] += y`` for duals (returns a new dual)."""
    n = len(x)
    add = dl.assemble(n, [(rows, y)])
    return x + add


def _mul_rows(x: Dual, rows, y):
    n = len(x)
    fac = dl.assemble(n, [(rows, y - 1.0)]) + 1.0
    return x * fac


def _set_rows(x: Dual, rows, y):
    mask = np.zeros(len(x), dtype=bool)
    mask[rows] = True
    return dl.where(mask, dl.assemble(len(x), [(rows, y)]), x)


def _walk(ctx: _Ctx, ph: Phys, rec: PathRecord, mode: str) -> Arrivals:
    """Trace (``mode='trace'``, writes ``rec``) or replay (``'strict'``/``'lenient'``)."""
    acq, arr = ctx.acq, ctx.acq.array
    ne = arr.n_elements
    draws = rec.draws
    n = rec.n
    gidx = rec.start + np.arange(n)
    x0, sin0, cos0, tau, _ = emission_from_draws(
        arr, ctx.angle, ctx.c0, gidx, draws[:, 0], draws[:, 1], acq.rays_per_element, pitch=ph.pitch
    )
    px = dl.broadcast(x0, (n,))
    pz = Dual(np.zeros(n))
    dx = Dual(sin0)
    dz = Dual(cos0)
    tau = dl.broadcast(tau, (n,))
    length = Dual(np.zeros(n))
    phi = dl.broadcast(ph.pitch * (2.0 * ne / (ne * acq.rays_per_element)), (n,))
    med = np.full(n, ctx.bg, dtype=np.int64)
    ids = np.arange(n)
    out_e, out_t, out_a = [], [], []
    radii = _radii_values(ph)
    has_att = bool(np.any(ph.atten > 0))

    for b in range(ctx.max_bounces):
        if len(ids) == 0:
            break
        t_v, s_v, k_v = nearest_hits(ctx.scene, px.val, pz.val, dx.val, dz.val, radii)
        if mode == "trace":
            hit = np.isfinite(t_v)
            rec.surf[ids, b] = np.where(hit, s_v, -1)
            rec.sub[ids, b] = np.where(hit, k_v, -1)
            s, k = s_v, k_v
        else:
            s = rec.surf[ids, b].astype(np.int64)
            k = rec.sub[ids, b].astype(np.int64)
            hit = s >= 0
            s_now = np.where(np.isfinite(t_v), s_v, -1)
            stale = (s_now != s) | (hit & (k_v != k))
            if stale.any():
                if mode == "strict":
                    raise StalePathError(f"hit sequence changed for {int(stale.sum())} path(s) at bounce {b}")
                hit &= ~stale
        keep = np.nonzero(hit)[0]
        if len(keep) == 0:
            break
        ids = ids[keep]
        s, k = s[keep], k[keep]
        px, pz, dx, dz, tau, phi, length = (v[keep] for v in (px, pz, dx, dz, tau, phi, length))

        t = _hit_geometry(ctx, ph, s, k, px, pz, dx, dz)
        hx = px + t * dx
        hz = pz + t * dz
        tau = tau + t * (1e-3 / ph.speed[med[ids]])
        length = length + t
        if has_att:
            phi = phi * dl.exp(t * (-1e-3 * ph.atten[med[ids]]))
        ngx, ngz = _normals(ctx, ph, s, k, hx, hz)
        from_out = (ngx * dx + ngz * dz).val < 0
        sg = np.where(from_out, 1.0, -1.0)
        nx, nz = ngx * sg, ngz * sg
        m1 = np.where(from_out, ctx.outside[s], ctx.inside[s])
        m2 = np.where(from_out, ctx.inside[s], ctx.outside[s])
        rough = ph.roughness[s]

        conn = _connect(ctx, ph, rec, b, ids, mode, hx, hz, nx, nz, dx, dz, m1, m2, tau, phi, rough, length)
        if conn is not None:
            rows, ce, t_arr, a = conn
            out_e.append(ce)
            out_t.append(t_arr)
            out_a.append(a)

        # frozen microfacet draw; slope is linear in roughness
        u1 = draws[ids, 4 + 4 * b]
        u2 = draws[ids, 5 + 4 * b]
        slope = rough * (np.sqrt(u1 / (1.0 - u1)) * np.cos(2.0 * np.pi * u2))
        norm = dl.sqrt(1.0 + slope * slope)
        mx = (nx + slope * nz) / norm
        mz = (nz - slope * nx) / norm
        cos_i = -(dx * mx + dz * mz)
        facing = cos_i.val > 0
        amp, eta, cos_t, tir = _fresnel(ctx, ph, m1, m2, dl.where(facing, cos_i, 1.0))

        ub = draws[ids, 3 + 4 * b]
        if mode == "trace":
            pr = _branch_reflectance(ctx, ph, m1, m2, dl.where(facing, cos_i, 1.0), amp, tir)
            refl = ~tir & (ub < pr)
            kind = np.where(tir, KIND_TIR, np.where(refl, KIND_REFLECT, KIND_TRANSMIT)).astype(np.int8)
            kind[~facing] = KIND_KILLED
            rec.p_reflect[ids, b] = pr
            rec.kind[ids, b] = kind
        else:
            kind = rec.kind[ids, b]
            pr = rec.p_reflect[ids, b]

        mirror = (kind == KIND_REFLECT) | (kind == KIND_TIR)
        through = kind == KIND_TRANSMIT
        fac_r = 2.0 * cos_i
        fac_t = eta * cos_i - cos_t
        ox = dl.where(mirror, dx + fac_r * mx, eta * dx + fac_t * mx)
        oz = dl.where(mirror, dz + fac_r * mz, eta * dz + fac_t * mz)
        safe_pr = np.where(mirror, pr, np.where(pr < 1.0, pr, 0.0))
        w_refl = amp * dl.absolute(amp) / np.where(safe_pr > 0, safe_pr, 1.0)
        w_trans = (1.0 - amp * amp) / np.where(safe_pr < 1.0, 1.0 - safe_pr, 1.0)
        weight = dl.where(kind == KIND_REFLECT, w_refl, dl.where(through, w_trans, 1.0))

        # paths whose new direction points to the wrong side of the macro surface end here
        on = (ox * nx + oz * nz).val
        dead = (kind == KIND_KILLED) | (mirror & (on <= 0)) | (through & (on >= 0))
        if mode == "trace":
            rec.dead[ids, b] = dead
        else:
            was_dead = rec.dead[ids, b]
            bad = (dead != was_dead) | (facing != (kind != KIND_KILLED))
            if bad.any():
                if mode == "strict":
                    raise StalePathError(f"scattering side changed for {int(bad.sum())} path(s) at bounce {b}")
            dead = was_dead | bad

        side = np.where(through, -1.0, 1.0)
        med_next = np.where(through, m2, m1)
        alive = np.nonzero(~dead)[0]
        off = EPS_GEOM * side
        px = (hx + nx * off)[alive]
        pz = (hz + nz * off)[alive]
        dx, dz = ox[alive], oz[alive]
        phi = (phi * weight)[alive]
        tau = tau[alive]
        length = length[alive]
        med[ids] = med_next
        ids = ids[alive]

    if not out_e:
        return Arrivals(np.zeros(0, dtype=np.int64), Dual(np.zeros(0)), Dual(np.zeros(0)))
    p = len(ph.targets)
    return Arrivals(
        np.concatenate(out_e),
        dl.concatenate(out_t, p or None),
        dl.concatenate(out_a, p or None),
    )


# ---------------------------------------------------------------------------
# Chunk scheduling
# ---------------------------------------------------------------------------


def _chunks(path_range, chunk_size):
    start, stop = path_range
    first = (start // chunk_size) * chunk_size
    out = []
    for c in range(first, stop, chunk_size):
        lo, hi = max(c, start), min(c + chunk_size, stop)
        if hi > lo:
            out.append((lo, hi))
    return out


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def trace_event(
    scene: Scene,
    acq: Acquisition,
    event: int,
    seed: int,
    max_bounces: int = 4,
    path_range=None,
    chunk_size: int = CHUNK,
    threads: int = 1,
    keep_records: bool = True,
    branch_impedance=None,
) -> TraceResult:
    """Trace the paths of one transmit event.

    Args:
        scene: Scene to trace.
        acq: Acquisition; ``acq.angles[event]`` is the steering angle.
        event: Transmit event index (part of the RNG key).
        seed: Run seed.
        max_bounces: Interface interactions per path.
        path_range: Half-open range of absolute path indices to trace;
            defaults to all ``n_elements * rays_per_element`` paths.
        chunk_size: Paths per work unit; chunks are aligned to absolute
            indices so partitions do not change the draws.
        threads: Worker threads.
        keep_records: Keep path records for replay.
        branch_impedance: Optional ``{medium: impedance}`` used only for the
            reflect/transmit branch probabilities.

    Returns:
        Arrivals concatenated in path-chunk order plus the records.
    """
    if max_bounces < 1:
        raise ValueError("max_bounces must be >= 1")
    ctx = _Ctx(scene, acq, event, max_bounces, branch_impedance)
    ph = bind_params(scene, acq)
    path_range = (0, acq.n_paths) if path_range is None else path_range

    def work(lohi):
        lo, hi = lohi
        rec = PathRecord.empty(event, lo, path_draws(seed, event, lo, hi - lo, ctx.width), max_bounces)
        arr = _walk(ctx, ph, rec, "trace")
        return Arrivals(arr.element, arr.t0.val, arr.amp.val), rec

    parts = _map(work, _chunks(path_range, chunk_size), threads)
    arrivals = Arrivals(
        np.concatenate([a.element for a, _ in parts]) if parts else np.zeros(0, dtype=np.int64),
        np.concatenate([a.t0 for a, _ in parts]) if parts else np.zeros(0),
        np.concatenate([a.amp for a, _ in parts]) if parts else np.zeros(0),
    )
    recs = [r for _, r in parts] if keep_records else []
    return TraceResult(arrivals, recs, path_range[1] - path_range[0])


def replay(scene: Scene, acq: Acquisition, record: PathRecord, targets=(), strict: bool = True) -> Arrivals:
    """Re-evaluate a recorded chunk at the current parameters.

    Tangents are taken along ``targets``; ``strict`` raises
    :class:`StalePathError` when the geometry no longer matches the record,
    otherwise diverging path tails are dropped.
    """
    max_bounces = record.kind.shape[1]
    ctx = _Ctx(scene, acq, record.event, max_bounces)
    ph = bind_params(scene, acq, targets)
    return _walk(ctx, ph, record, "strict" if strict else "lenient")


# ---------------------------------------------------------------------------
# Pulse and deposition
# ---------------------------------------------------------------------------


def pulse_sigma(f_c_hz, n_cycles: float):
    """Envelope parameter so that ``n_cycles`` carrier cycles fit inside it."""
    return (n_cycles / (2.0 * f_c_hz)) ** 2


def pulse(t, f_c_hz: float, n_cycles: float = 2.0):
    """``sin(2 pi f_c t) exp(-t^2 / sigma)``."""
    sigma = pulse_sigma(f_c_hz, n_cycles)
    t = np.asarray(t, dtype=float)
    return np.sin(2.0 * np.pi * f_c_hz * t) * np.exp(-t * t / sigma)


def pulse_halfwidth(f_c_hz: float, n_cycles: float) -> float:
    return math.sqrt(pulse_sigma(f_c_hz, n_cycles) * math.log(1.0 / WINDOW_FLOOR))


def _taps(element, t0, f_c_hz, n_cycles, fs, n_samples):
    hw = pulse_halfwidth(f_c_hz, n_cycles)
    h = int(math.ceil(hw * fs)) + 1
    k0 = np.rint(t0 * fs).astype(np.int64)
    k = k0[:, None] + np.arange(-h, h + 1)[None, :]
    u = k / fs - t0[:, None]
    mask = (np.abs(u) < hw) & (k >= 0) & (k < n_samples)
    return k, u, mask


def deposit_arrivals(arrivals: Arrivals, f_c: float, n_cycles: float, channel: ChannelData) -> int:
    """Splat arrivals into ``channel.values`` in place.

    Args:
        arrivals: Plain-valued arrivals.
        f_c: Centre frequency in MHz.
        n_cycles: Pulse length in carrier cycles.
        channel: Destination; sampling rate in Hz.

    Returns:
        Number of arrivals dropped for lying past the end of the record.
    """
    ne, nt = channel.shape
    t0 = np.asarray(dl.value(arrivals.t0), dtype=float)
    amp = np.asarray(dl.value(arrivals.amp), dtype=float)
    e = np.asarray(arrivals.element, dtype=np.int64)
    late = t0 * channel.fs > nt - 1
    keep = ~late
    if not keep.all():
        e, t0, amp = e[keep], t0[keep], amp[keep]
    if len(e) == 0:
        return int(late.sum())
    f_hz = f_c * 1e6
    k, u, mask = _taps(e, t0, f_hz, n_cycles, channel.fs, nt)
    vals = amp[:, None] * pulse(u, f_hz, n_cycles)
    flat = (e[:, None] * nt + k)[mask]
    channel.values += np.bincount(flat, weights=vals[mask], minlength=ne * nt).reshape(ne, nt)
    return int(late.sum())


def _pulse_partials(u, f_hz, n_cycles):
    """``s``, ``ds/du`` and ``ds/df`` (per Hz) at lag ``u``."""
    sigma = pulse_sigma(f_hz, n_cycles)
    w = 2.0 * np.pi * f_hz
    env = np.exp(-u * u / sigma)
    sn, cs = np.sin(w * u), np.cos(w * u)
    s = sn * env
    ds_du = (w * cs - sn * 2.0 * u / sigma) * env
    ds_df = (2.0 * np.pi * u * cs - sn * 2.0 * u * u / (sigma * f_hz)) * env
    return s, ds_du, ds_df


def arrivals_vjp(arrivals: Arrivals, f_c: Dual, n_cycles: float, adjoint: np.ndarray, fs: float, n_params: int):
    """Contract replayed (dual) arrivals with a channel adjoint."""
    grad = np.zeros(n_params)
    if len(arrivals) == 0 or n_params == 0:
        return grad
    ne, nt = adjoint.shape
    t0 = dl.lift(arrivals.t0)
    amp = dl.lift(arrivals.amp)
    keep = ~(t0.val * fs > nt - 1)
    e = np.asarray(arrivals.element)[keep]
    t0, amp = t0[keep], amp[keep]
    f_hz = float(f_c.val) * 1e6
    k, u, mask = _taps(e, t0.val, f_hz, n_cycles, fs, nt)
    s, ds_du, ds_df = _pulse_partials(u, f_hz, n_cycles)
    adj = np.where(mask, adjoint[e[:, None], np.clip(k, 0, nt - 1)], 0.0)
    g_amp = np.sum(adj * s, axis=1)
    g_t0 = -amp.val * np.sum(adj * ds_du, axis=1)
    g_f = float(np.sum(amp.val * np.sum(adj * ds_df, axis=1))) * 1e6
    if amp.tan is not None:
        grad += amp.tan @ g_amp
    if t0.tan is not None:
        grad += t0.tan @ g_t0
    if f_c.tan is not None:
        grad += f_c.tan * g_f
    return grad


# ---------------------------------------------------------------------------
# Event-level helpers
# ---------------------------------------------------------------------------


def simulate_event(
    scene: Scene,
    acq: Acquisition,
    event: int,
    seed: int,
    max_bounces: int = 4,
    path_range=None,
    threads: int = 1,
    chunk_size: int = CHUNK,
    out: ChannelData | None = None,
    keep_records: bool = True,
    branch_impedance=None,
):
    """Trace one event and deposit it into channel data.

    Each chunk is deposited into ``out`` in chunk order, so splitting the
    path range into consecutive calls accumulates bit-identically.

    Returns:
        ``(channel, records, n_dropped)``.
    """
    if out is None:
        out = ChannelData.zeros(acq.array.n_elements, acq.n_samples, acq.fs * 1e6)
    ctx = _Ctx(scene, acq, event, max_bounces, branch_impedance)
    ph = bind_params(scene, acq)
    path_range = (0, acq.n_paths) if path_range is None else path_range

    def work(lohi):
        lo, hi = lohi
        rec = PathRecord.empty(event, lo, path_draws(seed, event, lo, hi - lo, ctx.width), max_bounces)
        arr = _walk(ctx, ph, rec, "trace")
        return Arrivals(arr.element, arr.t0.val, arr.amp.val), rec

    records, dropped = [], 0
    for arr, rec in _map(work, _chunks(path_range, chunk_size), threads):
        dropped += deposit_arrivals(arr, acq.f_c, acq.n_cycles, out)
        if keep_records:
            records.append(rec)
    return out, records, dropped


def replay_channels(scene: Scene, acq: Acquisition, records, strict: bool = False, threads: int = 1, out=None):
    """Channel data of recorded paths re-evaluated at the current parameters."""
    if out is None:
        out = ChannelData.zeros(acq.array.n_elements, acq.n_samples, acq.fs * 1e6)
    parts = _map(lambda r: replay(scene, acq, r, strict=strict), list(records), threads)
    for arr in parts:
        deposit_arrivals(arr, acq.f_c, acq.n_cycles, out)
    return out


def transport_vjp(scene: Scene, acq: Acquisition, records, channel_adjoint, targets, strict: bool = True, threads: int = 1):
    """Gradient of ``<channel(theta), adjoint>`` along ``targets`` (physical units).

    Replays every record with frozen draws and branch decisions; raises
    :class:`StalePathError` (when ``strict``) if the geometry changed.
    """
    targets = tuple(targets)
    adjoint = channel_adjoint.adjoint if isinstance(channel_adjoint, ChannelData) else np.asarray(channel_adjoint)
    fs = acq.fs * 1e6
    ph = bind_params(scene, acq, targets)

    def work(rec):
        arr = replay(scene, acq, rec, targets, strict)
        return arrivals_vjp(arr, ph.f_c, acq.n_cycles, adjoint, fs, len(targets))

    grad = np.zeros(len(targets))
    for g in _map(work, list(records), threads):
        grad = grad + g
    return grad
