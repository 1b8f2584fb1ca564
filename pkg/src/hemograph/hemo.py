"""Hemodynamic indicators and rule-based rupture-risk scoring.

Units: velocities in mm/s and positions in mm give gradients in 1/s;
viscosities in Pa.s give stresses in Pa.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .meshio import WALL, Mesh, Trajectory, Waveform, tet_volumes

BANDS = ("Low", "Moderate", "High")

# (lower-inclusive) thresholds of the four sub-scores
THRESHOLDS = {
    "tawss_low": 1.5, "tawss_high": 6.7,
    "peak_wss": (4.0, 6.0),
    "osi": (0.15, 0.30),
    "velocity_low": 20.0, "velocity": (50.0, 80.0),
}


class HemoError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Rheology
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CassonParams:
    hct: float = 40.0  # percent
    m: float = 100.0

    def __post_init__(self):
        if self.hct <= 23.753 / 0.888:
            raise HemoError(f"hematocrit {self.hct}% gives a non-positive yield stress")
        if self.m <= 0:
            raise HemoError("Casson regularization constant must be positive")

    @property
    def tau0(self) -> float:
        """Yield stress, Pa."""
        return (0.888 * self.hct - 23.753) * 1e-3

    @property
    def mu0(self) -> float:
        """Asymptotic viscosity, Pa.s."""
        return (0.073 * self.hct + 0.599) * 1e-3


def casson_viscosity(shear_rate, params: CassonParams = CassonParams()):
    """Regularized Casson viscosity (Pa.s); ``shear_rate`` in 1/s, ``>= 0``.

    ``(sqrt(tau0 (1 - exp(-m g)) / g) + sqrt(mu0))^2``, with the ``g -> 0``
    limit ``(sqrt(tau0 m) + sqrt(mu0))^2``.
    """
    g = np.asarray(shear_rate, dtype=np.float64)
    if np.any(g < 0):
        raise HemoError("negative shear rate")
    safe = np.where(g > 0, g, 1.0)
    ratio = np.where(g > 0, -np.expm1(-params.m * safe) / safe, params.m)
    mu = (np.sqrt(params.tau0 * ratio) + math.sqrt(params.mu0)) ** 2
    return float(mu) if mu.ndim == 0 else mu


# ---------------------------------------------------------------------------
# Gradients and wall shear stress
# ---------------------------------------------------------------------------


def velocity_gradient(mesh: Mesh, velocity: np.ndarray) -> np.ndarray:
    """Constant ``grad u`` per linear tet, (M, 3, 3) with ``[a, b] = du_a/dx_b``."""
    p = mesh.positions[mesh.tets]  # (M, 4, 3)
    u = np.asarray(velocity, dtype=np.float64)[mesh.tets]
    edges = p[:, 1:] - p[:, :1]
    du = u[:, 1:] - u[:, :1]
    # du_i = G (x_i - x_0)  =>  edges @ G^T = du
    return np.swapaxes(np.linalg.solve(edges, du), 1, 2)


def _incidence(mesh: Mesh):
    vol = np.abs(tet_volumes(mesh.positions, mesh.tets))
    weight = np.zeros(mesh.n_nodes)
    np.add.at(weight, mesh.tets.reshape(-1), np.repeat(vol, 4))
    return vol, weight


def nodal_strain_rate(mesh: Mesh, velocity: np.ndarray, nodes=None) -> np.ndarray:
    """Volume-weighted average of the per-tet strain-rate tensor at ``nodes``."""
    grad = velocity_gradient(mesh, velocity)
    eps = 0.5 * (grad + np.swapaxes(grad, 1, 2))
    vol, weight = _incidence(mesh)
    acc = np.zeros((mesh.n_nodes, 3, 3))
    contrib = np.repeat(eps * vol[:, None, None], 4, axis=0)
    np.add.at(acc, mesh.tets.reshape(-1), contrib)
    nodes = np.arange(mesh.n_nodes) if nodes is None else np.asarray(nodes)
    if np.any(weight[nodes] == 0):
        bad = int(nodes[np.flatnonzero(weight[nodes] == 0)[0]])
        raise HemoError(f"node {bad} has no adjacent tetrahedra")
    return acc[nodes] / weight[nodes, None, None]


def shear_rate(strain: np.ndarray) -> np.ndarray:
    """``sqrt(2 eps:eps)``."""
    return np.sqrt(2.0 * np.einsum("...ij,...ij->...", strain, strain))


def wss_from_strain(strain: np.ndarray, normals: np.ndarray,
                    params: CassonParams = CassonParams()) -> np.ndarray:
    mu = casson_viscosity(shear_rate(strain), params)
    t = 2.0 * np.asarray(mu)[..., None] * np.einsum("...ij,...j->...i", strain, normals)
    tn = np.einsum("...i,...i->...", t, normals)
    return t - tn[..., None] * normals


def wall_nodes(mesh: Mesh) -> np.ndarray:
    return np.flatnonzero(mesh.node_type == WALL)


def wss_vector(mesh: Mesh, velocity: np.ndarray, params: CassonParams = CassonParams(),
               nodes=None) -> np.ndarray:
    """Wall shear stress (Pa) at ``nodes`` (default: all wall nodes).

    Viscous traction ``2 mu eps n`` projected onto the tangent plane; the
    pressure part of the traction is normal and drops out of the projection.
    """
    nodes = wall_nodes(mesh) if nodes is None else np.asarray(nodes)
    strain = nodal_strain_rate(mesh, velocity, nodes)
    return wss_from_strain(strain, mesh.wall_normals[nodes], params)


# ---------------------------------------------------------------------------
# Time integrals
# ---------------------------------------------------------------------------


def _weights(n: int, dt: float | None, times) -> tuple[np.ndarray, float]:
    """Trapezoidal weights and the integration period."""
    if times is None:
        if dt is None:
            raise HemoError("give either dt or times")
        times = np.arange(n) * float(dt)
    times = np.asarray(times, dtype=np.float64)
    if times.shape != (n,) or np.any(np.diff(times) < 0):
        raise HemoError("times must be non-decreasing, one per sample")
    w = np.zeros(n)
    if n >= 2:
        h = np.diff(times)
        w[:-1] += 0.5 * h
        w[1:] += 0.5 * h
    return w, float(times[-1] - times[0]) if n else 0.0


def tawss(series: np.ndarray, dt: float | None = None, times=None) -> np.ndarray:
    """Time average of ``||tau||`` over the sampled period; ``series`` is (T, W, 3).

    A single sample is its own average.
    """
    series = np.asarray(series, dtype=np.float64)
    mag = np.linalg.norm(series, axis=-1)
    if series.shape[0] == 1:
        return mag[0]
    w, period = _weights(series.shape[0], dt, times)
    if period <= 0:
        raise HemoError("zero-length integration period")
    return np.tensordot(w, mag, axes=1) / period


def osi(series: np.ndarray, dt: float | None = None, times=None) -> np.ndarray:
    """``0.5 (1 - ||int tau|| / int ||tau||)``; 0 where the shear vanishes."""
    series = np.asarray(series, dtype=np.float64)
    if series.shape[0] == 1:
        return np.zeros(series.shape[1:-1])
    w, _ = _weights(series.shape[0], dt, times)
    mag = np.tensordot(w, np.linalg.norm(series, axis=-1), axes=1)
    vec = np.linalg.norm(np.tensordot(w, series, axes=1), axis=-1)
    out = np.zeros_like(mag)
    ok = mag > 0
    out[ok] = 0.5 * (1.0 - vec[ok] / mag[ok])
    return np.clip(out, 0.0, 0.5)


@dataclass(eq=False)
class WallField:
    nodes: np.ndarray  # mesh node ids
    wss: np.ndarray  # (T, W, 3) Pa
    dt: float
    tawss: np.ndarray = field(init=False)
    osi: np.ndarray = field(init=False)

    def __post_init__(self):
        self.tawss = tawss(self.wss, self.dt)
        self.osi = osi(self.wss, self.dt)

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.wss, axis=-1)

    def as_trajectory(self, mesh_hash: bytes) -> Trajectory:
        return Trajectory(mesh_hash, self.dt, self.wss.astype(np.float32))


def wall_field(mesh: Mesh, traj: Trajectory, params: CassonParams = CassonParams(),
               nodes=None) -> WallField:
    """WSS series over every stored frame of ``traj``."""
    nodes = wall_nodes(mesh) if nodes is None else np.asarray(nodes)
    vel = traj.velocity
    out = np.stack([wss_vector(mesh, vel[k], params, nodes) for k in range(vel.shape[0])])
    return WallField(nodes, out, traj.dt)


# ---------------------------------------------------------------------------
# Risk scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RiskReport:
    subscores: tuple  # (tawss, peak_wss, osi, velocity)
    average: float
    band: str
    metrics: dict

    def to_dict(self, flags: dict | None = None) -> dict:
        names = ("tawss", "peak_wss", "osi", "systolic_velocity")
        return {"metrics": self.metrics, "subscores": dict(zip(names, self.subscores)),
                "average": self.average, "band": self.band, "thresholds": THRESHOLDS,
                "flags": flags or {}}


def risk_subscores(tawss_mean: float, peak_wss: float, osi_max: float,
                   systolic_velocity: float, tawss_high_score: int = 1) -> tuple:
    """Four sub-scores in {0, 1, 2}, thresholds inclusive at the lower bound.

    ``tawss_high_score`` is the score of TAWSS >= 6.7 Pa (1 by default, 2 for
    the alternative rule).
    """
    vals = (tawss_mean, peak_wss, osi_max, systolic_velocity)
    if any(not math.isfinite(v) or v < 0 for v in vals):
        raise HemoError(f"metrics must be finite and non-negative: {vals}")
    if tawss_high_score not in (1, 2):
        raise HemoError("tawss_high_score must be 1 or 2")
    th = THRESHOLDS
    s_tawss = 1 if tawss_mean <= th["tawss_low"] else (
        tawss_high_score if tawss_mean >= th["tawss_high"] else 0)
    s_wss = 2 if peak_wss >= th["peak_wss"][1] else 1 if peak_wss >= th["peak_wss"][0] else 0
    s_osi = 2 if osi_max >= th["osi"][1] else 1 if osi_max >= th["osi"][0] else 0
    v_lo, v_hi = th["velocity"]
    s_vel = 2 if systolic_velocity >= v_hi else 1 if systolic_velocity >= v_lo else (
        1 if systolic_velocity <= th["velocity_low"] else 0)
    return (s_tawss, s_wss, s_osi, s_vel)


def risk_band(average: float) -> str:
    if average < 1.0:
        return "Low"
    return "Moderate" if average < 2.0 else "High"


def aggregate_risk(subscores, metrics: dict | None = None) -> RiskReport:
    scores = tuple(int(s) for s in subscores)
    if len(scores) != 4 or any(s not in (0, 1, 2) for s in scores):
        raise HemoError(f"expected four sub-scores in {{0, 1, 2}}, got {subscores}")
    avg = sum(scores) / 4.0
    return RiskReport(scores, avg, risk_band(avg), dict(metrics or {}))


def hemo_metrics(mesh: Mesh, traj: Trajectory, waveform: Waveform, bulge_nodes,
                 params: CassonParams = CassonParams(), percentile: float | None = 99.0,
                 region: str = "bulge", normalize_velocity: bool = False,
                 field_: WallField | None = None) -> dict:
    """Metric values feeding :func:`risk_subscores`.

    ``region`` selects the wall nodes for the WSS-based metrics ("bulge": wall
    nodes of the bulge set, "wall": every wall node). ``percentile=None`` uses
    raw maxima for the peak metrics. The systolic velocity is the mean bulge
    speed at the stored step closest to peak inflow (optionally divided by the
    mean inlet velocity at that time).
    """
    bulge_nodes = np.asarray(bulge_nodes, dtype=np.int64)
    if region == "bulge":
        sel = bulge_nodes[mesh.node_type[bulge_nodes] == WALL]
    elif region == "wall":
        sel = wall_nodes(mesh)
    else:
        raise HemoError(f"unknown region {region!r}")
    if sel.size == 0:
        raise HemoError("no wall nodes in the selected region")
    wf = field_ if field_ is not None else wall_field(mesh, traj, params, sel)
    if field_ is not None:
        pos = np.searchsorted(wf.nodes, sel)
        if np.any(wf.nodes[np.minimum(pos, wf.nodes.size - 1)] != sel):
            raise HemoError("wall field does not cover the selected region")
        wss, t_avg, o = wf.wss[:, pos], wf.tawss[pos], wf.osi[pos]
    else:
        wss, t_avg, o = wf.wss, wf.tawss, wf.osi
    n_t = traj.velocity.shape[0]
    times = np.arange(n_t) * traj.dt
    peak_step = int(np.argmax([waveform(t) for t in times]))
    peak_mag = np.linalg.norm(wss[peak_step], axis=-1)

    def top(x):
        return float(np.max(x)) if percentile is None else float(np.percentile(x, percentile))

    speed = np.linalg.norm(traj.velocity[peak_step, bulge_nodes].astype(np.float64), axis=-1)
    vel = float(speed.mean())
    if normalize_velocity:
        from .meshio import inlet_area_weights
        area = float(inlet_area_weights(mesh).sum())
        vel /= waveform(times[peak_step]) / area
    return {"tawss_mean": float(t_avg.mean()), "peak_wss": top(peak_mag),
            "osi_max": top(o), "systolic_velocity": vel, "peak_step": peak_step,
            "n_wall_nodes": int(sel.size)}


def assess(metrics: dict, tawss_high_score: int = 1) -> RiskReport:
    scores = risk_subscores(metrics["tawss_mean"], metrics["peak_wss"], metrics["osi_max"],
                            metrics["systolic_velocity"], tawss_high_score)
    return aggregate_risk(scores, metrics)
