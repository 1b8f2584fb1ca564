"""Mesh and trajectory data model, synthetic tube+bulge cases and binary formats.

Units are fixed throughout the package: millimetres, seconds, mm/s and Pa.

The synthetic ground truth is analytic rather than CFD: a Poiseuille profile in
the parent tube plus a divergence-free recirculation cell inside the spherical
bulge, both scaled by the instantaneous flow rate ``Q(t)``.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, cKDTree

INTERIOR, WALL, INLET, OUTLET = 0, 1, 2, 3
NODE_TYPE_NAMES = {INTERIOR: "interior", WALL: "wall", INLET: "inlet", OUTLET: "outlet"}

MESH_MAGIC = b"HSM1"
TRAJ_MAGIC = b"HST1"

DEFAULT_DT = 0.01


class FormatError(ValueError):
    """Malformed binary or text payload.

    ``offset`` is the byte offset (or line number for text files) at which the
    problem was detected.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        where = f" at byte offset {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")


class GeometryError(ValueError):
    """Rejected geometry specification or invalid mesh."""


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Mesh:
    positions: np.ndarray  # (N, 3) float64, mm
    tets: np.ndarray  # (M, 4) int64
    node_type: np.ndarray  # (N,) uint8
    inlet_distance: np.ndarray  # (N,) float64, mm
    wall_normals: np.ndarray  # (N, 3) float64, zeros on interior nodes
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    @property
    def n_nodes(self) -> int:
        return int(self.positions.shape[0])

    @property
    def n_tets(self) -> int:
        return int(self.tets.shape[0])

    def nodes_of_type(self, code: int) -> np.ndarray:
        return np.flatnonzero(self.node_type == code)

    def validate(self) -> None:
        n = self.n_nodes
        if self.positions.shape != (n, 3):
            raise GeometryError("positions must be N x 3")
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise GeometryError("tets must be M x 4")
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= n):
            raise GeometryError("tet index out of range")
        if self.tets.size:
            s = np.sort(self.tets, axis=1)
            if np.any(s[:, 1:] == s[:, :-1]):
                raise GeometryError("tet with repeated vertices")
            if np.any(tet_volumes(self.positions, self.tets) <= 0):
                raise GeometryError("tet with non-positive signed volume")
        if self.node_type.shape != (n,) or np.any(self.node_type > OUTLET):
            raise GeometryError("invalid node_type codes")
        if np.any(self.inlet_distance < 0):
            raise GeometryError("inlet_distance must be non-negative")
        inlet = self.node_type == INLET
        if np.any(self.inlet_distance[inlet] != 0):
            raise GeometryError("inlet_distance must vanish on inlet nodes")
        if np.any(np.linalg.norm(self.wall_normals[inlet], axis=1) == 0):
            raise GeometryError("inlet node without a normal")

    def content_hash(self) -> bytes:
        """SHA-256 of the serialized HSMESH payload."""
        return hashlib.sha256(mesh_to_bytes(self)).digest()


@dataclass(eq=False)
class Waveform:
    """Periodic, piecewise-linear inflow rate ``Q(t)`` in mm^3/s."""

    period: float
    times: np.ndarray
    flow: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.flow = np.asarray(self.flow, dtype=np.float64)
        if self.period <= 0:
            raise ValueError("waveform period must be positive")
        if self.times.ndim != 1 or self.times.shape != self.flow.shape or self.times.size == 0:
            raise ValueError("waveform needs matching 1-D time and flow samples")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("waveform times must be strictly increasing")
        if self.times[0] < 0 or self.times[-1] >= self.period:
            raise ValueError("waveform times must lie in [0, period)")
        if np.any(self.flow <= 0):
            raise ValueError("waveform flow rate must be positive")

    def __call__(self, t) -> np.ndarray | float:
        tt = np.mod(np.asarray(t, dtype=np.float64), self.period)
        xp = np.concatenate([self.times, [self.times[0] + self.period]])
        fp = np.concatenate([self.flow, [self.flow[0]]])
        # samples before times[0] wrap onto the last segment
        tt = np.where(tt < self.times[0], tt + self.period, tt)
        out = np.interp(tt, xp, fp)
        return float(out) if np.ndim(out) == 0 else out

    def peak_time(self) -> float:
        return float(self.times[np.argmax(self.flow)])


@dataclass(eq=False)
class Trajectory:
    mesh_hash: bytes
    dt: float
    velocity: np.ndarray  # (T, N, 3) float32, mm/s

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=np.float32)
        if self.velocity.ndim != 3 or self.velocity.shape[2] != 3:
            raise ValueError("velocity must be T x N x 3")
        if len(self.mesh_hash) != 32:
            raise ValueError("mesh hash must be 32 bytes")

    @property
    def n_steps(self) -> int:
        return int(self.velocity.shape[0])


@dataclass(eq=False)
class SyntheticCase:
    mesh: Mesh
    waveform: Waveform
    trajectory: Trajectory
    bulge_nodes: np.ndarray
    geom: dict = field(default_factory=dict)
    flow: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def tet_volumes(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = positions[tets]
    d = p[:, 1:] - p[:, :1]
    return np.linalg.det(d) / 6.0


def boundary_faces(tets: np.ndarray, positions: np.ndarray | None = None) -> np.ndarray:
    """Faces that belong to exactly one tet.

    When ``positions`` is given the faces are oriented with outward normals.
    """
    if tets.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    local = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
    faces = tets[:, local].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    n = int(tets.max()) + 1
    key = (key[:, 0] * n + key[:, 1]) * n + key[:, 2]
    _, inv, counts = np.unique(key, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    faces = faces[counts[inv] == 1]
    if positions is not None:
        # local ordering above is outward for positively oriented tets
        owner = np.repeat(np.arange(tets.shape[0]), 4)[counts[inv] == 1]
        c = positions[tets[owner]].mean(axis=1)
        n = _face_normals(positions, faces)
        fc = positions[faces].mean(axis=1)
        flip = np.einsum("ij,ij->i", n, fc - c) < 0
        faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def _face_normals(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted (unnormalised, |n| = 2 * area) face normals."""
    p = positions[faces]
    return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])


def classify_boundary(positions, tets, inlet_test, outlet_test):
    """Tag nodes from boundary faces; inlet > outlet > wall precedence.

    Returns ``(node_type, normals, faces, face_kind)``.
    """
    n = positions.shape[0]
    faces = boundary_faces(tets, positions)
    fc = positions[faces]
    on_in = np.all(inlet_test(fc.reshape(-1, 3)).reshape(-1, 3), axis=1)
    on_out = np.all(outlet_test(fc.reshape(-1, 3)).reshape(-1, 3), axis=1)
    kind = np.full(faces.shape[0], WALL, dtype=np.uint8)
    kind[on_out] = OUTLET
    kind[on_in] = INLET
    node_type = np.zeros(n, dtype=np.uint8)
    for code in (WALL, OUTLET, INLET):
        node_type[faces[kind == code].ravel()] = code
    area_n = _face_normals(positions, faces)
    normals = np.zeros((n, 3))
    for code in (WALL, OUTLET, INLET):
        sel = kind == code
        acc = np.zeros((n, 3))
        for k in range(3):
            np.add.at(acc, faces[sel, k], area_n[sel])
        mine = node_type == code
        normals[mine] = acc[mine]
    norm = np.linalg.norm(normals, axis=1)
    ok = norm > 0
    normals[ok] /= norm[ok, None]
    return node_type, normals, faces, kind


def inlet_faces(mesh: Mesh) -> np.ndarray:
    if "inlet_faces" not in mesh._cache:
        faces = boundary_faces(mesh.tets, mesh.positions)
        mesh._cache["inlet_faces"] = faces[np.all(mesh.node_type[faces] == INLET, axis=1)]
    return mesh._cache["inlet_faces"]


def inlet_area_weights(mesh: Mesh) -> np.ndarray:
    """Lumped (one third of incident face area) quadrature weights on the inlet."""
    faces = inlet_faces(mesh)
    area = 0.5 * np.linalg.norm(_face_normals(mesh.positions, faces), axis=1)
    w = np.zeros(mesh.n_nodes)
    for k in range(3):
        np.add.at(w, faces[:, k], area / 3.0)
    return w


def inlet_geometry(mesh: Mesh, tol: float = 1e-6):
    """Centre, outward unit normal and radius of the planar inlet disk."""
    key = ("inlet_geometry", tol)
    if key not in mesh._cache:
        mesh._cache[key] = _inlet_geometry(mesh, tol)
    return mesh._cache[key]


def _inlet_geometry(mesh: Mesh, tol: float):
    idx = mesh.nodes_of_type(INLET)
    if idx.size == 0:
        raise GeometryError("mesh has no inlet nodes")
    n = mesh.wall_normals[idx].mean(axis=0)
    n /= np.linalg.norm(n)
    faces = inlet_faces(mesh)
    if faces.shape[0]:
        p = mesh.positions[faces]
        a = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
        center = (p.mean(axis=1) * a[:, None]).sum(axis=0) / a.sum()
    else:
        center = mesh.positions[idx].mean(axis=0)
    rel = mesh.positions[idx] - center
    off = rel @ n
    radial = rel - off[:, None] * n
    radius = float(np.linalg.norm(radial, axis=1).max())
    if np.abs(off).max() > tol * max(radius, 1.0):
        raise GeometryError(
            f"inlet is not planar: max out-of-plane offset {np.abs(off).max():.3g} mm"
        )
    return center, n, radius


def inlet_profile(mesh: Mesh, waveform: Waveform, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Parabolic inflow at time ``t``.

    Returns ``(node_ids, velocities)`` for the inlet nodes. The profile is
    ``v_max * (1 - r^2 / R^2)`` along the inward normal with
    ``v_max = 2 Q(t) / (pi R^2)``.
    """
    center, n, radius = inlet_geometry(mesh)
    idx = mesh.nodes_of_type(INLET)
    rel = mesh.positions[idx] - center
    radial = rel - (rel @ n)[:, None] * n
    r2 = np.einsum("ij,ij->i", radial, radial)
    q = waveform(t)
    vmax = 2.0 * q / (math.pi * radius**2)
    speed = vmax * np.clip(1.0 - r2 / radius**2, 0.0, None)
    return idx, speed[:, None] * (-n)[None, :]


def inflow_stats(mesh: Mesh, waveform: Waveform, t: float) -> np.ndarray:
    """(mean, min, max) inlet speed at time ``t``."""
    _, v = inlet_profile(mesh, waveform, t)
    s = np.linalg.norm(v, axis=1)
    return np.array([s.mean(), s.min(), s.max()])


# ---------------------------------------------------------------------------
# Synthetic cases
# ---------------------------------------------------------------------------

DEFAULT_GEOM = {
    "tube_radius": 2.0,
    "tube_length": 16.0,
    "bulge_radius": 2.5,
    "bulge_offset": 3.2,
    "target_edge_length": 0.55,
}

DEFAULT_FLOW = {
    "waveform_params": {
        "period": 0.8,
        "q_mean": 2500.0,
        "pulsatility": 1.6,
        "systole": 0.18,
        "n_samples": 40,
    },
    "viscosity_params": {"hct": 40.0, "m": 100.0},
    "recirculation": 0.3,
    "dt": DEFAULT_DT,
}

NODE_BOUNDS = (2000, 5000)
CREASE_CLEARANCE = 0.9


def synthetic_waveform(period=0.8, q_mean=2500.0, pulsatility=1.6, systole=0.18,
                       n_samples=40, q_floor=1e-6) -> Waveform:
    """Smooth systolic peak plus dicrotic bump, rescaled to mean ``q_mean``.

    ``pulsatility`` is (max - min) / mean of the continuous shape.
    """
    s = np.arange(n_samples) / n_samples
    def bump(c, w):
        d = (s - c + 0.5) % 1.0 - 0.5
        return np.exp(-0.5 * (d / w) ** 2)
    shape = bump(systole, 0.07) + 0.35 * bump(systole + 0.3, 0.08)
    shape = (shape - shape.mean()) / max(shape.max() - shape.min(), 1e-12)
    q = q_mean * (1.0 + pulsatility * shape)
    q = np.maximum(q, q_floor)
    return Waveform(period=float(period), times=s * period, flow=q)


def _validate_geom(g: dict) -> None:
    R, L, rb, off, h = (g[k] for k in ("tube_radius", "tube_length", "bulge_radius",
                                        "bulge_offset", "target_edge_length"))
    if h <= 0:
        raise GeometryError("target_edge_length must be positive")
    if R <= 0 or L <= 0 or rb <= 0:
        raise GeometryError("radii and length must be positive")
    if rb >= L / 2:
        raise GeometryError("bulge_radius must be smaller than tube_length / 2")
    if off + rb <= R:
        raise GeometryError(
            f"bulge swallowed by tube: offset {off} + radius {rb} <= tube radius {R}")
    if off - rb >= R:
        raise GeometryError(
            f"bulge detached from tube: offset {off} - radius {rb} >= tube radius {R}")


class _Domain:
    def __init__(self, R, L, rb, off):
        self.R, self.L, self.rb = R, L, rb
        self.c = np.array([L / 2.0, off, 0.0])

    def in_tube(self, p, tol=0.0):
        r2 = p[:, 1] ** 2 + p[:, 2] ** 2
        return (r2 <= (self.R + tol) ** 2) & (p[:, 0] >= -tol) & (p[:, 0] <= self.L + tol)

    def in_sphere(self, p, tol=0.0):
        return np.linalg.norm(p - self.c, axis=1) <= self.rb + tol

    def inside(self, p, tol=0.0):
        return self.in_tube(p, tol) | self.in_sphere(p, tol)

    def depth(self, p):
        r = np.hypot(p[:, 1], p[:, 2])
        d_tube = np.minimum.reduce([self.R - r, p[:, 0], self.L - p[:, 0]])
        d_sph = self.rb - np.linalg.norm(p - self.c, axis=1)
        return np.maximum(d_tube, d_sph)


def _disk(x, R, h, phase):
    nr = max(2, int(round(R / h)))
    pts = [[x, 0.0, 0.0]]
    for k in range(1, nr + 1):
        r = R * k / nr
        m = max(6, int(round(2 * math.pi * r / h)))
        th = 2 * math.pi * (np.arange(m) + 0.5 * (k % 2)) / m + phase
        pts += [[x, r * math.cos(a), r * math.sin(a)] for a in th]
    return np.array(pts)


def _build_points(dom: _Domain, h: float, rng: np.random.Generator) -> np.ndarray:
    R, L, rb, c = dom.R, dom.L, dom.rb, dom.c
    h_disk = 0.5 * h
    n_rim = max(12, int(round(2 * math.pi * R / h_disk)))
    pts = [_disk(0.0, R, h_disk, 0.0), _disk(L, R, h_disk, 0.1)]

    # tube wall rings, rim count matched to the end disks
    nx = max(2, int(round(L / h)))
    xs = np.linspace(0.0, L, nx + 1)[1:-1]
    th = 2 * math.pi * np.arange(n_rim) / n_rim
    for j, x in enumerate(xs):
        a = th + (math.pi / n_rim) * (j % 2)
        ring = np.column_stack([np.full(n_rim, x), R * np.cos(a), R * np.sin(a)])
        pts.append(ring[~dom.in_sphere(ring, tol=0.35 * h)])

    # sphere surface (Fibonacci lattice) outside the tube
    n_sph = int(4 * math.pi * rb**2 / (0.75 * h * h))
    k = np.arange(n_sph) + 0.5
    phi = np.arccos(1 - 2 * k / n_sph)
    theta = math.pi * (1 + 5**0.5) * k
    sph = c + rb * np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi),
                                    np.cos(phi)])
    r_sph = np.hypot(sph[:, 1], sph[:, 2])
    pts.append(sph[r_sph > R + 0.35 * h])

    # intersection curve of sphere and cylinder
    n_c = max(24, int(round(2 * math.pi * R / (0.6 * h))))
    a = 2 * math.pi * np.arange(n_c) / n_c
    y, z = R * np.cos(a), R * np.sin(a)
    rad = rb**2 - (y - c[1]) ** 2 - z**2
    ok = rad > 0
    crease = []
    for sgn in (-1.0, 1.0):
        xq = c[0] + sgn * np.sqrt(rad[ok])
        crease.append(np.column_stack([xq, y[ok], z[ok]]))
    crease = np.concatenate(crease)
    pts.append(crease)

    # jittered interior lattice
    lo = np.array([0.0, -R, -max(R, rb)])
    hi = np.array([L, c[1] + rb, max(R, rb)])
    grids = [np.arange(lo[i] + 0.5 * h, hi[i], h) for i in range(3)]
    g = np.stack(np.meshgrid(*grids, indexing="ij"), axis=-1).reshape(-1, 3)
    g = g + rng.uniform(-0.15 * h, 0.15 * h, size=g.shape)
    g = g[dom.depth(g) > 0.45 * h]
    # the re-entrant crease needs extra clearance or carving exposes lattice points
    near = cKDTree(crease).query(g)[0] if crease.size else np.full(len(g), np.inf)
    pts.append(g[near > CREASE_CLEARANCE * h])
    return np.concatenate(pts, axis=0)


def generate_mesh(geom: dict, seed: int = 0) -> tuple[Mesh, _Domain]:
    g = {**DEFAULT_GEOM, **geom}
    _validate_geom(g)
    R, L, rb, off, h = (g[k] for k in ("tube_radius", "tube_length", "bulge_radius",
                                        "bulge_offset", "target_edge_length"))
    dom = _Domain(R, L, rb, off)
    rng = np.random.default_rng(seed)
    pts = _build_points(dom, h, rng)
    pts = np.unique(np.round(pts, 12), axis=0)

    tets = Delaunay(pts, qhull_options="Qbb Qc Qz Q12").simplices.astype(np.int64)
    p = pts[tets]
    keep = dom.inside(p.mean(axis=1), tol=1e-9)
    for i, j in ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)):
        keep &= dom.inside(0.5 * (p[:, i] + p[:, j]), tol=0.05 * h)
    # re-admit carved tets that leave notches around points well inside the domain
    depth = dom.depth(pts)
    for _ in range(6):
        faces = boundary_faces(tets[keep])
        exposed = np.zeros(pts.shape[0], dtype=bool)
        exposed[faces.ravel()] = True
        exposed &= depth > 0.3 * h
        if not exposed.any():
            break
        readd = ~keep & exposed[tets].any(axis=1) & dom.inside(p.mean(axis=1), tol=0.3 * h)
        if not readd.any():
            break
        keep |= readd
    tets = tets[keep]
    vol = tet_volumes(pts, tets)
    tets = tets[np.abs(vol) > 1e-10 * h**3]
    vol = tet_volumes(pts, tets)
    flip = vol < 0
    tets[flip] = tets[flip][:, [0, 2, 1, 3]]

    used = np.unique(tets)
    remap = np.full(pts.shape[0], -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    pts = pts[used]
    tets = remap[tets]

    eps = 1e-9
    node_type, normals, _, _ = classify_boundary(
        pts, tets, lambda q: np.abs(q[:, 0]) < eps, lambda q: np.abs(q[:, 0] - L) < eps)
    inlet_distance = np.abs(pts[:, 0])
    inlet_distance[node_type == INLET] = 0.0
    mesh = Mesh(pts, tets, node_type, inlet_distance, normals)
    mesh.validate()
    return mesh, dom


def analytic_shape(positions: np.ndarray, dom: _Domain, recirculation: float) -> np.ndarray:
    """Velocity per unit flow rate, ``u(x, t) = Q(t) * shape(x)``.

    Poiseuille flow along +x in the tube plus the curl of the stream function
    ``psi = k * (1 - s^2)^2`` (``s`` = distance to bulge centre / bulge radius)
    about the z axis, which vanishes with zero velocity on the bulge sphere.
    """
    R, rb, c = dom.R, dom.rb, dom.c
    vc = 2.0 / (math.pi * R * R)
    y, z = positions[:, 1], positions[:, 2]
    out = np.zeros_like(positions)
    out[:, 0] = vc * np.clip(1.0 - (y * y + z * z) / (R * R), 0.0, None)
    rel = positions - c
    s2 = np.einsum("ij,ij->i", rel, rel) / (rb * rb)
    inside = s2 < 1.0
    amp = np.where(inside, -4.0 * recirculation * vc * (1.0 - s2) / rb, 0.0)
    out[:, 0] += amp * rel[:, 1]
    out[:, 1] -= amp * rel[:, 0]
    return out


def bulge_node_mask(mesh: Mesh, dom: _Domain) -> np.ndarray:
    p = mesh.positions
    return dom.in_sphere(p, tol=1e-9) & (np.hypot(p[:, 1], p[:, 2]) > dom.R)


def generate_synthetic_case(geom_spec: dict | None = None, flow_spec: dict | None = None,
                            seed: int = 0) -> SyntheticCase:
    """Mesh, waveform and analytic trajectory over exactly one period.

    The trajectory holds ``round(period / dt) + 1`` frames at ``t = k * dt``;
    the last frame coincides with the first by periodicity. Wall nodes are
    zero, inlet nodes carry :func:`inlet_profile`.
    """
    geom = {**DEFAULT_GEOM, **(geom_spec or {})}
    flow = {**DEFAULT_FLOW, **(flow_spec or {})}
    flow["waveform_params"] = {**DEFAULT_FLOW["waveform_params"],
                               **(flow_spec or {}).get("waveform_params", {})}
    mesh, dom = generate_mesh(geom, seed)
    wf = synthetic_waveform(**flow["waveform_params"])
    dt = float(flow["dt"])
    n_steps = int(round(wf.period / dt)) + 1
    shape = analytic_shape(mesh.positions, dom, float(flow["recirculation"]))
    wall = mesh.node_type == WALL
    vel = np.empty((n_steps, mesh.n_nodes, 3), dtype=np.float32)
    for k in range(n_steps):
        t = k * dt
        u = wf(t) * shape
        u[wall] = 0.0
        idx, v_in = inlet_profile(mesh, wf, t)
        u[idx] = v_in
        vel[k] = u
    traj = Trajectory(mesh.content_hash(), dt, vel)
    return SyntheticCase(mesh, wf, traj, np.flatnonzero(bulge_node_mask(mesh, dom)), geom, flow)


def steady_poiseuille(mesh: Mesh, radius: float, q: float) -> np.ndarray:
    """Reference axial velocity for a straight tube at constant flow rate."""
    p = mesh.positions
    return 2 * q / (math.pi * radius**2) * np.clip(1 - (p[:, 1] ** 2 + p[:, 2] ** 2) / radius**2,
                                                  0, None)


# ---------------------------------------------------------------------------
# Binary / text formats
# ---------------------------------------------------------------------------


def mesh_to_bytes(mesh: Mesh) -> bytes:
    n, m = mesh.n_nodes, mesh.n_tets
    buf = io.BytesIO()
    buf.write(MESH_MAGIC)
    buf.write(struct.pack("<QQ", n, m))
    buf.write(np.ascontiguousarray(mesh.positions, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(mesh.tets, dtype="<u8").tobytes())
    buf.write(np.ascontiguousarray(mesh.node_type, dtype="u1").tobytes())
    buf.write(np.ascontiguousarray(mesh.inlet_distance, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(mesh.wall_normals, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, nbytes: int, what: str) -> bytes:
        if self.pos + nbytes > len(self.data):
            raise FormatError(f"truncated payload reading {what} "
                              f"(need {nbytes} bytes, have {len(self.data) - self.pos})",
                              self.pos)
        out = self.data[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return out

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count, what), dtype=dtype).copy()

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", 0)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes", self.pos)


def mesh_from_bytes(data: bytes) -> Mesh:
    r = _Reader(data)
    r.magic(MESH_MAGIC)
    n, m = struct.unpack("<QQ", r.take(16, "header"))
    pos = r.array("<f8", 3 * n, "positions").reshape(n, 3)
    tets_off = r.pos
    tets = r.array("<u8", 4 * m, "tets").reshape(m, 4)
    if m and tets.max() >= n:
        bad = int(np.argmax(tets.ravel() >= n))
        raise FormatError(f"tet index {int(tets.ravel()[bad])} out of range for {n} nodes",
                          tets_off + 8 * bad)
    types_off = r.pos
    node_type = r.array("u1", n, "node_type")
    if n and node_type.max() > OUTLET:
        bad = int(np.argmax(node_type > OUTLET))
        raise FormatError(f"invalid node type code {int(node_type[bad])}", types_off + bad)
    dist = r.array("<f8", n, "inlet_distance")
    normals = r.array("<f8", 3 * n, "wall_normals").reshape(n, 3)
    r.done()
    return Mesh(pos.astype(np.float64), tets.astype(np.int64), node_type.astype(np.uint8),
                dist.astype(np.float64), normals.astype(np.float64))


def save_mesh(mesh: Mesh, path) -> None:
    Path(path).write_bytes(mesh_to_bytes(mesh))


def load_mesh(path) -> Mesh:
    return mesh_from_bytes(Path(path).read_bytes())


def trajectory_to_bytes(traj: Trajectory) -> bytes:
    t = traj.n_steps
    return (TRAJ_MAGIC + traj.mesh_hash + struct.pack("<dQ", traj.dt, t)
            + np.ascontiguousarray(traj.velocity, dtype="<f4").tobytes())


def trajectory_from_bytes(data: bytes, n_nodes: int | None = None,
                          mesh_hash: bytes | None = None) -> Trajectory:
    """Decode an HSTRAJ payload.

    The format does not store the node count; it is taken from ``n_nodes`` or
    inferred from the payload size.
    """
    r = _Reader(data)
    r.magic(TRAJ_MAGIC)
    h = r.take(32, "mesh hash")
    if mesh_hash is not None and h != mesh_hash:
        raise FormatError("trajectory was written for a different mesh", 4)
    dt, t = struct.unpack("<dQ", r.take(16, "header"))
    remaining = len(data) - r.pos
    if n_nodes is None:
        if t == 0:
            n_nodes = 0
        elif remaining % (12 * t):
            raise FormatError("payload size is not a multiple of T x 3 x 4 bytes", r.pos)
        else:
            n_nodes = remaining // (12 * t)
    vel = r.array("<f4", t * n_nodes * 3, "velocities").reshape(t, n_nodes, 3)
    r.done()
    return Trajectory(h, dt, vel.astype(np.float32))


def save_trajectory(traj: Trajectory, path) -> None:
    Path(path).write_bytes(trajectory_to_bytes(traj))


def load_trajectory(path, mesh: Mesh | None = None) -> Trajectory:
    data = Path(path).read_bytes()
    if mesh is None:
        return trajectory_from_bytes(data)
    return trajectory_from_bytes(data, mesh.n_nodes, mesh.content_hash())


def waveform_to_text(wf: Waveform) -> str:
    lines = [f"period {wf.period!r}"]
    lines += [f"{t!r} {q!r}" for t, q in zip(wf.times.tolist(), wf.flow.tolist())]
    return "\n".join(lines) + "\n"


def waveform_from_text(text: str) -> Waveform:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise FormatError("empty waveform file", 0)
    head = lines[0].split()
    if len(head) != 2 or head[0] != "period":
        raise FormatError("waveform must start with 'period <seconds>'", 1)
    try:
        period = float(head[1])
        pairs = [tuple(float(v) for v in ln.split()) for ln in lines[1:]]
    except ValueError as exc:
        raise FormatError(f"non-numeric waveform entry: {exc}") from None
    if any(len(p) != 2 for p in pairs):
        raise FormatError("each waveform line must hold 't q'")
    try:
        return Waveform(period, [p[0] for p in pairs], [p[1] for p in pairs])
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def save_waveform(wf: Waveform, path) -> None:
    Path(path).write_text(waveform_to_text(wf))


def load_waveform(path) -> Waveform:
    return waveform_from_text(Path(path).read_text())
