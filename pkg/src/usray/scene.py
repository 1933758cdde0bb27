"""Scene geometry, acoustic media and the local interface scattering model.

Scenes live in the imaging plane. Points and directions are ``(x, z)`` pairs
in millimetres with ``z`` the depth axis; the transducer sits on ``z = 0``
looking towards ``+z``. Triangle meshes are 3-D and are sliced with the
``y = 0`` imaging plane when loaded.

The scattering helpers are written against plain arithmetic so that they
accept floats, arrays, or :class:`usray.dual.Dual` values alike.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dual as dl

EPS_GEOM = 1e-6  # mm; self-intersection guard


class SceneError(ValueError):
    """Malformed scene description."""


# ---------------------------------------------------------------------------
# Media and shapes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Medium:
    """Homogeneous acoustic medium.

    Attributes:
        name: Identifier used by surfaces.
        impedance: Acoustic impedance in MRayl.
        sound_speed: Speed of sound in m/s.
        attenuation: Amplitude attenuation in Np/m.
    """

    name: str
    impedance: float
    sound_speed: float = 1480.0
    attenuation: float = 0.0

    def __post_init__(self):
        if not self.impedance > 0:
            raise SceneError(f"medium {self.name}: impedance must be > 0")
        if not self.sound_speed > 0:
            raise SceneError(f"medium {self.name}: sound speed must be > 0")
        if not self.attenuation >= 0:
            raise SceneError(f"medium {self.name}: attenuation must be >= 0")


@dataclass(frozen=True)
class Cylinder:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise SceneError("cylinder radius must be > 0")


@dataclass(frozen=True)
class Plane:
    point: tuple[float, float]
    normal: tuple[float, float]

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = float(np.hypot(*n))
        if norm == 0:
            raise SceneError("plane normal must be nonzero")
        object.__setattr__(self, "normal", (n[0] / norm, n[1] / norm))


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Triangle mesh in 3-D (x, y, z) millimetres.

    Only its intersection with the ``y = 0`` plane takes part in transport;
    that cross-section is cached as 2-D segments with unit normals that point
    to the side the face winding calls "outside".
    """

    vertices: np.ndarray
    faces: np.ndarray
    segments: np.ndarray = field(init=False, repr=False)
    seg_normals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise SceneError("mesh face references a missing vertex")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        segs, normals = _slice_mesh(v, f)
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "seg_normals", normals)


def _slice_mesh(v, f):
    segs, normals = [], []
    for tri in v[f]:
        y = tri[:, 1]
        pts = []
        for i in range(3):
            a, b = tri[i], tri[(i + 1) % 3]
            ya, yb = a[1], b[1]
            if (ya < 0) != (yb < 0):
                s = ya / (ya - yb)
                p = a + s * (b - a)
                pts.append((p[0], p[2]))
        if len(pts) != 2 or np.all(y == 0):
            continue
        (x0, z0), (x1, z1) = pts
        ex, ez = x1 - x0, z1 - z0
        length = math.hypot(ex, ez)
        if length == 0:
            continue
        fn = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        nx, nz = ez / length, -ex / length
        if nx * fn[0] + nz * fn[2] < 0:
            nx, nz = -nx, -nz
        segs.append(((x0, z0), (x1, z1)))
        normals.append((nx, nz))
    return np.asarray(segs, dtype=float).reshape(-1, 2, 2), np.asarray(normals, dtype=float).reshape(-1, 2)


@dataclass(frozen=True)
class Surface:
    """Interface between two media.

    ``outside`` is the medium on the side the geometric normal points to
    (outward for a cylinder, along ``normal`` for a plane).
    """

    name: str
    shape: Cylinder | Plane | TriangleMesh
    roughness: float
    inside: str
    outside: str

    def __post_init__(self):
        if not 0 < self.roughness <= 1:
            raise SceneError(f"surface {self.name}: roughness must lie in (0, 1]")

    @property
    def kind(self) -> str:
        return {Cylinder: "cylinder", Plane: "plane", TriangleMesh: "mesh"}[type(self.shape)]


@dataclass(frozen=True)
class Interaction:
    position: np.ndarray
    normal: np.ndarray
    incident: np.ndarray
    surface: int
    eta: float
    distance: float
    from_outside: bool


@dataclass(frozen=True)
class Scene:
    media: dict[str, Medium]
    surfaces: tuple[Surface, ...] = ()
    background: str = "water"
    refraction: str = "impedance"  # or "speed"
    spreading: bool = False  # 1/r amplitude decay along the whole path

    def __post_init__(self):
        if self.background not in self.media:
            raise SceneError(f"unknown background medium {self.background!r}")
        for s in self.surfaces:
            for m in (s.inside, s.outside):
                if m not in self.media:
                    raise SceneError(f"surface {s.name}: unknown medium {m!r}")
        if self.refraction not in ("impedance", "speed"):
            raise SceneError("refraction must be 'impedance' or 'speed'")

    @property
    def medium_names(self) -> list[str]:
        return list(self.media)

    def medium_index(self, name: str) -> int:
        return self.medium_names.index(name)

    def surface_index(self, name: str) -> int:
        for i, s in enumerate(self.surfaces):
            if s.name == name:
                return i
        raise KeyError(name)

    # parameter targets: "medium.<name>.impedance", "surface.<name>.radius",
    # "surface.<name>.roughness"
    def targets(self) -> list[str]:
        out = [f"medium.{m}.impedance" for m in self.media]
        for s in self.surfaces:
            out.append(f"surface.{s.name}.roughness")
            if s.kind == "cylinder":
                out.append(f"surface.{s.name}.radius")
        return out

    def get(self, target: str) -> float:
        kind, name, attr = _split_target(target)
        if kind == "medium":
            return float(getattr(self.media[name], attr))
        s = self.surfaces[self.surface_index(name)]
        if attr == "radius":
            return float(s.shape.radius)
        return float(getattr(s, attr))

    def replace(self, values: dict[str, float]) -> "Scene":
        media = dict(self.media)
        surfaces = list(self.surfaces)
        for target, v in values.items():
            kind, name, attr = _split_target(target)
            if kind == "medium":
                media[name] = dataclasses.replace(media[name], **{attr: float(v)})
            else:
                i = self.surface_index(name)
                s = surfaces[i]
                if attr == "radius":
                    s = dataclasses.replace(s, shape=dataclasses.replace(s.shape, radius=float(v)))
                else:
                    s = dataclasses.replace(s, **{attr: float(v)})
                surfaces[i] = s
        return dataclasses.replace(self, media=media, surfaces=tuple(surfaces))


def _split_target(target: str):
    parts = target.split(".")
    if len(parts) != 3 or parts[0] not in ("medium", "surface"):
        raise KeyError(f"not a scene parameter: {target!r}")
    kind, name, attr = parts
    allowed = {"medium": ("impedance", "sound_speed", "attenuation"), "surface": ("radius", "roughness")}
    if attr not in allowed[kind]:
        raise KeyError(f"not a scene parameter: {target!r}")
    return kind, name, attr


# ---------------------------------------------------------------------------
# Local scattering model
# ---------------------------------------------------------------------------


def fresnel_reflectance(z1, z2, theta_r, theta_t):
    """Acoustic amplitude reflection coefficient.

    ``A_r = (Z1 cos(theta_r) - Z2 cos(theta_t)) / (Z1 cos(theta_r) + Z2 cos(theta_t))``.
    Its square is the reflected fraction of intensity.
    """
    if not (np.all(np.isfinite(theta_r)) and np.all(np.isfinite(theta_t))):
        raise ValueError("angles must be finite")
    return fresnel_from_cosines(z1, z2, np.cos(theta_r), np.cos(theta_t))


def fresnel_from_cosines(z1, z2, cos_r, cos_t):
    a = z1 * cos_r
    b = z2 * cos_t
    return (a - b) / (a + b)


def specular_reflect(w, n):
    """Mirror ``w`` about the plane with unit normal ``n`` (last axis = vector)."""
    w = np.asarray(w, dtype=float)
    n = np.asarray(n, dtype=float)
    return w + 2.0 * np.sum(n * -w, axis=-1, keepdims=True) * n


def refracted_cosine(cos_i, eta):
    """Cosine of the transmission angle, or NaN under total internal reflection.

    Works on duals: the caller masks the TIR rows.
    """
    sin2_t = eta * eta * (1.0 - cos_i * cos_i)
    if isinstance(sin2_t, dl.Dual):
        return dl.sqrt(1.0 - sin2_t)
    with np.errstate(invalid="ignore"):
        return np.sqrt(1.0 - sin2_t)


def snell_refract(w, n, eta):
    """Refract unit direction ``w`` through an interface.

    ``n`` is the unit normal facing the incident side (``n . w < 0``) and
    ``eta`` the ratio applied to the sine, ``sin(theta_t) = eta sin(theta_i)``.
    Returns ``None`` on total internal reflection.
    """
    w = np.asarray(w, dtype=float)
    n = np.asarray(n, dtype=float)
    cos_i = -float(np.dot(w, n))
    sin2_t = eta * eta * max(0.0, 1.0 - cos_i * cos_i)
    if sin2_t > 1.0:
        return None
    cos_t = math.sqrt(1.0 - sin2_t)
    return eta * w + (eta * cos_i - cos_t) * n


def ggx_density(h, n, alpha):
    """GGX normal distribution ``D(h)`` in 1/sr for unit vectors ``h`` and ``n``."""
    c = np.sum(np.asarray(h, dtype=float) * np.asarray(n, dtype=float), axis=-1)
    a2 = alpha * alpha
    k = c * c * (a2 - 1.0) + 1.0
    return a2 / (np.pi * k * k)


def _frame(n):
    n = np.asarray(n, dtype=float)
    ey = np.array([0.0, 1.0, 0.0])
    t1 = np.cross(ey, n)
    norm = np.linalg.norm(t1, axis=-1, keepdims=True)
    fallback = np.broadcast_to(np.array([1.0, 0.0, 0.0]), t1.shape)
    t1 = np.where(norm > 1e-12, t1 / np.where(norm > 0, norm, 1.0), fallback)
    t2 = np.cross(n, t1)
    return t1, t2


def ggx_sample_normal(n, alpha, u1, u2):
    """Draw a microfacet normal around unit ``n`` (3-D) by CDF inversion.

    ``cos(theta_h) = sqrt((1 - u1) / (u1 (alpha^2 - 1) + 1))``, ``phi = 2 pi u2``;
    the azimuth is measured from the in-plane tangent ``e_y x n`` so that the
    in-plane slope of the sample equals :func:`ggx_sample_slope`.
    The sample density over solid angle is ``D(h) (n . h)``.
    """
    n = np.asarray(n, dtype=float)
    u1 = np.asarray(u1, dtype=float)[..., None]
    u2 = np.asarray(u2, dtype=float)[..., None]
    cos_t = np.sqrt((1.0 - u1) / (u1 * (alpha * alpha - 1.0) + 1.0))
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    phi = 2.0 * np.pi * u2
    t1, t2 = _frame(n)
    return sin_t * np.cos(phi) * t1 + sin_t * np.sin(phi) * t2 + cos_t * n


def ggx_sample_slope(alpha, u1, u2):
    """In-plane slope ``tan(psi)`` of a GGX normal drawn from ``(u1, u2)``.

    Same draw as :func:`ggx_sample_normal` projected onto the imaging plane;
    linear in ``alpha`` so a frozen draw has a clean roughness derivative.
    """
    return alpha * (np.sqrt(u1 / (1.0 - u1)) * np.cos(2.0 * np.pi * u2))


def ggx_slope_pdf(slope, alpha):
    """Marginal density of one slope component of an isotropic GGX surface."""
    r = slope / alpha
    return (1.0 + r * r) ** -1.5 / (2.0 * alpha)


def ggx_inplane_pdf(tan_psi, cos_psi, alpha):
    """Density (per radian) of the in-plane microfacet angle ``psi``."""
    return ggx_slope_pdf(tan_psi, alpha) / (cos_psi * cos_psi)


# ---------------------------------------------------------------------------
# Intersection
# ---------------------------------------------------------------------------


def _cylinder_roots(cx, cz, r, ox, oz, dx, dz):
    px, pz = ox - cx, oz - cz
    b = dx * px + dz * pz
    c = px * px + pz * pz - r * r
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        s = np.sqrt(disc)
    return -b - s, -b + s


def _segment_hits(segs, ox, oz, dx, dz):
    """Ray/segment distances, shape (n_rays, n_segments); inf for misses."""
    ax, az = segs[:, 0, 0], segs[:, 0, 1]
    ex, ez = segs[:, 1, 0] - ax, segs[:, 1, 1] - az
    ox, oz, dx, dz = (np.asarray(v, dtype=float)[:, None] for v in (ox, oz, dx, dz))
    denom = dx * ez - dz * ex
    qx, qz = ax - ox, az - oz
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qx * ez - qz * ex) / denom
        s = (qx * dz - qz * dx) / denom
    ok = (denom != 0) & (s >= 0) & (s <= 1)
    return np.where(ok, t, np.inf)


def surface_candidates(surface: Surface, ox, oz, dx, dz, radius=None):
    """Candidate hit distances of rays against one surface (values only).

    Returns an array of shape (n_rays, k) where column j is sub-element j
    (cylinder: near/far root; plane: the plane; mesh: segment j).
    """
    shp = surface.shape
    if isinstance(shp, Cylinder):
        r = shp.radius if radius is None else radius
        t0, t1 = _cylinder_roots(shp.center[0], shp.center[1], r, ox, oz, dx, dz)
        return np.stack([np.where(np.isnan(t0), np.inf, t0), np.where(np.isnan(t1), np.inf, t1)], axis=1)
    if isinstance(shp, Plane):
        nx, nz = shp.normal
        denom = dx * nx + dz * nz
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((shp.point[0] - ox) * nx + (shp.point[1] - oz) * nz) / denom
        return np.where(denom != 0, t, np.inf)[:, None]
    if len(shp.segments) == 0:
        return np.full((len(ox), 0), np.inf)
    return _segment_hits(shp.segments, ox, oz, dx, dz)


def nearest_hits(scene: Scene, ox, oz, dx, dz, radii=None, eps=EPS_GEOM):
    """Nearest hit per ray: (t, surface index, sub-element index); t = inf on miss."""
    ox, oz, dx, dz = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (ox, oz, dx, dz))
    n = len(ox)
    best_t = np.full(n, np.inf)
    best_s = np.full(n, -1, dtype=np.int64)
    best_k = np.full(n, -1, dtype=np.int64)
    for i, surf in enumerate(scene.surfaces):
        r = None if radii is None else radii[i]
        cand = surface_candidates(surf, ox, oz, dx, dz, r)
        if cand.shape[1] == 0:
            continue
        cand = np.where(cand > eps, cand, np.inf)
        k = np.argmin(cand, axis=1)
        t = cand[np.arange(n), k]
        better = t < best_t
        best_t = np.where(better, t, best_t)
        best_s = np.where(better, i, best_s)
        best_k = np.where(better, k, best_k)
    return best_t, best_s, best_k


def all_crossings(scene: Scene, ox, oz, dx, dz, t_max, radii=None, eps=EPS_GEOM, max_cross=4):
    """Every surface crossing on the open segments ``(eps, t_max - eps)``.

    Returns ``(t, surf, sub, count)`` with the first three shaped
    (n_rays, max_cross) sorted by distance and padded with inf / -1, and
    ``count`` the true number of crossings (may exceed ``max_cross``).
    """
    ox, oz, dx, dz, t_max = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (ox, oz, dx, dz, t_max))
    n = len(ox)
    ts, ss, ks = [], [], []
    for i, surf in enumerate(scene.surfaces):
        r = None if radii is None else radii[i]
        cand = surface_candidates(surf, ox, oz, dx, dz, r)
        if cand.shape[1] == 0:
            continue
        ok = (cand > eps) & (cand < t_max[:, None] - eps)
        ts.append(np.where(ok, cand, np.inf))
        ss.append(np.full(cand.shape, i, dtype=np.int64))
        ks.append(np.broadcast_to(np.arange(cand.shape[1]), cand.shape))
    if not ts:
        empty = np.full((n, max_cross), np.inf)
        return empty, np.full((n, max_cross), -1), np.full((n, max_cross), -1), np.zeros(n, dtype=np.int64)
    t = np.concatenate(ts, axis=1)
    s = np.concatenate(ss, axis=1)
    k = np.concatenate(ks, axis=1)
    count = np.sum(np.isfinite(t), axis=1)
    if t.shape[1] < max_cross:
        pad = max_cross - t.shape[1]
        t = np.pad(t, ((0, 0), (0, pad)), constant_values=np.inf)
        s = np.pad(s, ((0, 0), (0, pad)), constant_values=-1)
        k = np.pad(k, ((0, 0), (0, pad)), constant_values=-1)
    order = np.argsort(t, axis=1, kind="stable")[:, :max_cross]
    t = np.take_along_axis(t, order, axis=1)
    s = np.where(np.isfinite(t), np.take_along_axis(s, order, axis=1), -1)
    k = np.where(np.isfinite(t), np.take_along_axis(k, order, axis=1), -1)
    return t, s, k, count


def hit_distance(surface: Surface, sub, ox, oz, dx, dz, radius):
    """Differentiable distance to a known sub-element of ``surface``.

    Arguments may be duals; ``sub`` is an integer array (cylinder root or
    mesh segment index).
    """
    shp = surface.shape
    if isinstance(shp, Cylinder):
        cx, cz = shp.center
        px, pz = ox - cx, oz - cz
        b = dx * px + dz * pz
        c = px * px + pz * pz - radius * radius
        s = dl.sqrt(b * b - c)
        sign = np.where(np.asarray(sub) == 0, -1.0, 1.0)
        return -b + sign * s
    if isinstance(shp, Plane):
        nx, nz = shp.normal
        return ((shp.point[0] - ox) * nx + (shp.point[1] - oz) * nz) / (dx * nx + dz * nz)
    seg = shp.segments[np.asarray(sub)]
    ax, az = seg[:, 0, 0], seg[:, 0, 1]
    ex, ez = seg[:, 1, 0] - ax, seg[:, 1, 1] - az
    return ((ax - ox) * ez - (az - oz) * ex) / (dx * ez - dz * ex)


def outward_normal(surface: Surface, sub, hx, hz, radius):
    """Geometric (outside-facing) unit normal at a hit point."""
    shp = surface.shape
    if isinstance(shp, Cylinder):
        return (hx - shp.center[0]) / radius, (hz - shp.center[1]) / radius
    if isinstance(shp, Plane):
        n = np.ones(np.shape(dl.value(hx)))
        return shp.normal[0] * n, shp.normal[1] * n
    nrm = shp.seg_normals[np.asarray(sub)]
    return nrm[:, 0], nrm[:, 1]


def intersect(origin, direction, scene: Scene) -> Interaction | None:
    """Nearest interaction of a single ray with the scene, or ``None``."""
    ox, oz = (float(v) for v in origin)
    dx, dz = (float(v) for v in direction)
    t, s, k = nearest_hits(scene, [ox], [oz], [dx], [dz])
    if not np.isfinite(t[0]):
        return None
    surf = scene.surfaces[int(s[0])]
    radius = surf.shape.radius if surf.kind == "cylinder" else None
    hx, hz = ox + t[0] * dx, oz + t[0] * dz
    nx, nz = outward_normal(surf, k, np.array([hx]), np.array([hz]), radius)
    nx, nz = float(np.asarray(nx)[0]), float(np.asarray(nz)[0])
    from_outside = nx * dx + nz * dz < 0
    if not from_outside:
        nx, nz = -nx, -nz
    m1, m2 = (surf.outside, surf.inside) if from_outside else (surf.inside, surf.outside)
    eta = scene.media[m1].impedance / scene.media[m2].impedance
    return Interaction(
        position=np.array([hx, hz]),
        normal=np.array([nx, nz]),
        incident=np.array([dx, dz]),
        surface=int(s[0]),
        eta=eta,
        distance=float(t[0]),
        from_outside=bool(from_outside),
    )


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

_UNITS = {
    "impedance": "MRayl",
    "sound_speed": "m/s",
    "attenuation": "Np/m",
    "center": "mm",
    "radius": "mm",
    "point": "mm",
    "scale": "mm",
    "offset": "mm",
}


def _parse_numbers(key: str, raw: str) -> list[float]:
    text = raw.strip()
    unit = _UNITS.get(key)
    if unit and text.endswith(unit):
        text = text[: -len(unit)].strip()
    try:
        return [float(tok) for tok in text.replace(",", " ").split()]
    except ValueError:
        raise SceneError(f"{key}: cannot parse {raw!r} (expected numbers{' in ' + unit if unit else ''})") from None


def load_obj(path) -> TriangleMesh:
    """Read the ``v``/``f`` records of an ASCII OBJ file (polygons are fanned)."""
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "f":
            idx = [int(t.split("/")[0]) for t in tok[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for j in range(1, len(idx) - 1):
                faces.append([idx[0], idx[j], idx[j + 1]])
    return TriangleMesh(np.asarray(verts, dtype=float), np.asarray(faces, dtype=np.int64))


def parse_scene(text: str, base_dir=".") -> Scene:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    cp.read_string(text)
    media, surfaces = {}, []
    background, refraction, spreading = None, "impedance", False
    for sec in cp.sections():
        body = cp[sec]
        head = sec.split()
        if head[0] == "background":
            background = body.get("medium", "water")
            refraction = body.get("refraction", "impedance")
            try:
                spreading = body.getboolean("spreading", False)
            except ValueError:
                raise SceneError(f"[{sec}] spreading must be on or off") from None
        elif head[0] == "medium" and len(head) == 2:
            kw = {k: _parse_numbers(k, body[k])[0] for k in ("impedance", "sound_speed", "attenuation") if k in body}
            if "impedance" not in kw:
                raise SceneError(f"[{sec}] needs an impedance")
            media[head[1]] = Medium(head[1], **kw)
        elif head[0] == "surface" and len(head) == 2:
            shape = body.get("shape")
            if shape == "cylinder":
                shp = Cylinder(tuple(_parse_numbers("center", body["center"])[:2]), _parse_numbers("radius", body["radius"])[0])
            elif shape == "plane":
                shp = Plane(tuple(_parse_numbers("point", body["point"])[:2]), tuple(_parse_numbers("normal", body["normal"])[:2]))
            elif shape == "mesh":
                mesh = load_obj(Path(base_dir) / body["file"])
                scale = _parse_numbers("scale", body.get("scale", "1"))[0]
                off = _parse_numbers("offset", body.get("offset", "0 0 0"))
                mesh = TriangleMesh(mesh.vertices * scale + np.asarray(off + [0.0] * (3 - len(off))), mesh.faces)
                shp = mesh
            else:
                raise SceneError(f"[{sec}] unknown shape {shape!r}")
            surfaces.append(
                Surface(
                    head[1],
                    shp,
                    float(body.get("roughness", "0.1")),
                    body.get("inside", "tissue"),
                    body.get("outside", "water"),
                )
            )
        else:
            raise SceneError(f"unknown section [{sec}]")
    if background is None:
        background = "water" if "water" in media else next(iter(media), "water")
    try:
        return Scene(media, tuple(surfaces), background, refraction, spreading)
    except (KeyError, TypeError) as exc:
        raise SceneError(str(exc)) from None


def load_scene(path) -> Scene:
    path = Path(path)
    return parse_scene(path.read_text(), base_dir=path.parent)
