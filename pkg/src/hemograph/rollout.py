"""Autoregressive rollout and trajectory error metrics.

A *model* here is anything with ``predict_acceleration(mesh, frame, step, aug)``
returning the physical velocity increment for one step; :class:`model.Surrogate`
is the trained network, :class:`Persistence` and :class:`OracleModel` are the
reference predictors.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .meshio import Mesh, Trajectory, Waveform


class RolloutError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class Persistence:
    """``u_{t+1} = u_t`` (before boundary enforcement)."""

    def predict_acceleration(self, mesh, frame, step, aug=None):
        return np.zeros((frame.shape[0], 3))


@dataclass(eq=False)
class OracleModel:
    """Returns the exact increment to the stored ground truth (plumbing check)."""
    truth: Trajectory
    offset: np.ndarray | float = 0.0

    def predict_acceleration(self, mesh, frame, step, aug=None):
        nxt = self.truth.velocity[step + 1].astype(np.float64)
        return nxt - np.asarray(frame[:, M.VEL], dtype=np.float64) + self.offset


@dataclass(eq=False)
class RolloutResult:
    trajectory: Trajectory  # frames 0..steps, frame 0 is the initial state
    step_seconds: np.ndarray
    boundary_violation: np.ndarray  # per predicted step, 0.0 when enforced exactly
    step_errors: np.ndarray | None = None  # per-step mean squared error vs truth


def cycle_steps(period: float, dt: float) -> int:
    return int(math.ceil(period / dt - 1e-9))


def initial_frame(mesh: Mesh, waveform: Waveform, truth: Trajectory) -> np.ndarray:
    """Frame at ``t = 0`` from a periodic ground truth (``u_{-1} = u_{T-2}``)."""
    vel = truth.velocity.astype(np.float64)
    prev = vel[-2] if vel.shape[0] >= 2 else vel[0]
    return M.frame_at(mesh, waveform, vel[0], prev, 0.0, truth.dt)


def rollout(model, mesh: Mesh, waveform: Waveform, frame0: np.ndarray, steps: int,
            dt: float, aug=None, t0: float = 0.0, truth: Trajectory | None = None,
            check_boundaries: bool = True) -> RolloutResult:
    """Compose ``steps`` one-step predictions starting from ``frame0``.

    After every step the frame is rebuilt (acceleration from the last two
    velocities, speed, inflow statistics at the next time) and the boundary
    conditions are asserted.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    n = mesh.n_nodes
    out = np.empty((steps + 1, n, 3), dtype=np.float32)
    u = np.asarray(frame0[:, M.VEL], dtype=np.float64)
    out[0] = u
    secs = np.empty(steps)
    viol = np.zeros(steps)
    frame = frame0
    u_prev = u
    for k in range(steps):
        t = t0 + k * dt
        start = time.perf_counter()
        if k > 0:
            frame = M.frame_at(mesh, waveform, u, u_prev, t, dt)
        u_next = M.forward_step(model, mesh, frame, waveform, t, dt, step=k, aug=aug)
        secs[k] = time.perf_counter() - start
        if not np.all(np.isfinite(u_next)):
            raise RolloutError(f"non-finite velocity at rollout step {k}", k)
        if check_boundaries:
            viol[k] = M.boundary_violation(mesh, u_next, waveform, t + dt)
            if viol[k] != 0.0:
                raise RolloutError(f"boundary conditions violated at step {k}", k)
        u_prev, u = u, u_next
        out[k + 1] = u
    step_err = None
    if truth is not None:
        m = min(steps + 1, truth.velocity.shape[0])
        step_err = per_step_mse(out[1:m], truth.velocity[1:m])
    return RolloutResult(Trajectory(mesh.content_hash(), dt, out), secs, viol, step_err)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def per_step_mse(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """``(1/N) sum_i ||G_t,i - P_t,i||^2`` for each step ``t``."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    return np.einsum("tnc,tnc->t", diff, diff) / max(diff.shape[1], 1)


def trajectory_mse(pred: np.ndarray, truth: np.ndarray) -> float:
    """``(1/(T N)) sum_t sum_i ||G_t,i - P_t,i||^2`` over (T, N, 3) arrays."""
    s = per_step_mse(pred, truth)
    return float(s.mean()) if s.size else 0.0


@dataclass
class ErrorReport:
    mse: float
    per_step: np.ndarray = field(repr=False)

    @property
    def rmse(self) -> float:
        return math.sqrt(self.mse)

    def to_dict(self) -> dict:
        return {"mse": self.mse, "rmse": self.rmse, "per_step": [float(v) for v in self.per_step]}


def one_step_error(model, mesh: Mesh, waveform: Waveform, truth: Trajectory,
                   aug=None) -> ErrorReport:
    """Each stored frame ``t >= 1`` predicted from the true frame ``t - 1``."""
    vel = truth.velocity.astype(np.float64)
    n_t = vel.shape[0]
    preds = np.empty((n_t - 1,) + vel.shape[1:], dtype=np.float32)
    for t in range(1, n_t):
        prev = vel[t - 2] if t >= 2 else vel[-2] if n_t > 2 else vel[0]
        frame = M.frame_at(mesh, waveform, vel[t - 1], prev, (t - 1) * truth.dt, truth.dt)
        preds[t - 1] = M.forward_step(model, mesh, frame, waveform, (t - 1) * truth.dt,
                                      truth.dt, step=t - 1, aug=aug)
    s = per_step_mse(preds, truth.velocity[1:])
    return ErrorReport(float(s.mean()) if s.size else 0.0, s)


def all_rollout_error(model, mesh: Mesh, waveform: Waveform, truth: Trajectory,
                      aug=None, result: RolloutResult | None = None) -> ErrorReport:
    """Frames ``t >= 1`` predicted by composing the model ``t`` times from ``G_0``."""
    if result is None:
        result = rollout(model, mesh, waveform, initial_frame(mesh, waveform, truth),
                         truth.velocity.shape[0] - 1, truth.dt, aug=aug)
    s = per_step_mse(result.trajectory.velocity[1:], truth.velocity[1:])
    return ErrorReport(float(s.mean()) if s.size else 0.0, s)


def delta_metric(gnn_value: float, cfd_value: float) -> float | None:
    """Relative change in percent; ``None`` when the reference is zero."""
    if cfd_value == 0:
        return None
    return 100.0 * (gnn_value - cfd_value) / cfd_value


def bulge_l2_error(pred: np.ndarray, truth: np.ndarray, nodes=None) -> float:
    """Mean over steps and selected nodes of the Euclidean velocity error (mm/s)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if nodes is not None:
        pred = pred[:, nodes]
        truth = truth[:, nodes]
    return float(np.linalg.norm(pred - truth, axis=-1).mean())


def mean_speed(velocity: np.ndarray, nodes=None) -> float:
    v = np.asarray(velocity, dtype=np.float64)
    if nodes is not None:
        v = v[:, nodes]
    return float(np.linalg.norm(v, axis=-1).mean())


def evaluation_report(model, mesh: Mesh, waveform: Waveform, truth: Trajectory,
                      bulge_nodes=None, aug=None) -> tuple[dict, RolloutResult]:
    """Metrics of one model on one case, plus the rollout it was computed from."""
    res = rollout(model, mesh, waveform, initial_frame(mesh, waveform, truth),
                  truth.velocity.shape[0] - 1, truth.dt, aug=aug, truth=truth)
    one = one_step_error(model, mesh, waveform, truth, aug=aug)
    allr = all_rollout_error(model, mesh, waveform, truth, result=res)
    report = {"one_step": one.to_dict(), "all_rollout": allr.to_dict(),
              "steps": int(truth.velocity.shape[0] - 1),
              "max_boundary_violation": float(res.boundary_violation.max(initial=0.0))}
    if bulge_nodes is not None:
        pers = rollout(Persistence(), mesh, waveform, initial_frame(mesh, waveform, truth),
                       truth.velocity.shape[0] - 1, truth.dt)
        gt = truth.velocity[1:]
        report["bulge"] = {
            "n_nodes": int(len(bulge_nodes)),
            "l2_error": bulge_l2_error(res.trajectory.velocity[1:], gt, bulge_nodes),
            "persistence_l2_error": bulge_l2_error(pers.trajectory.velocity[1:], gt,
                                                   bulge_nodes),
            "mean_speed": mean_speed(gt, bulge_nodes),
        }
    return report, res
