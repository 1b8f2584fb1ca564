"""Training: normalization, noise, AdamW, cosine schedules, the phased
curriculum, sub-mesh stepping and the scaling-law harness.

Training works in normalized space. Each sample is the frame at step ``k``
(velocity noised, acceleration noised) and the target is the normalized
``u_{k+1} - u_k'`` where ``u_k'`` is the noised velocity, so the network is
asked to undo its input noise as well as advance the flow.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import graph as G
from . import model as M
from . import tensor as T
from .meshio import Mesh, SyntheticCase, Trajectory, Waveform, generate_synthetic_case

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient; ``snapshot`` holds the offending step's context."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class NormStats:
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    def apply_inputs(self, x):
        return (x - self.in_mean) / self.in_std

    def invert_inputs(self, x):
        return x * self.in_std + self.in_mean

    def apply_outputs(self, y):
        return (y - self.out_mean) / self.out_std

    def invert_outputs(self, y):
        return y * self.out_std + self.out_mean

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in
                ("in_mean", "in_std", "out_mean", "out_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in
                     ("in_mean", "in_std", "out_mean", "out_std")))

    @classmethod
    def identity(cls, p_in: int = M.N_FEATURES, p_out: int = M.N_OUTPUTS) -> "NormStats":
        return cls(np.zeros(p_in), np.ones(p_in), np.zeros(p_out), np.ones(p_out))


def _moments(blocks) -> tuple[np.ndarray, np.ndarray]:
    count, total, sq = 0, 0.0, 0.0
    for b in blocks:
        b = np.asarray(b, dtype=np.float64).reshape(-1, np.shape(b)[-1])
        count += b.shape[0]
        total = total + b.sum(axis=0)
    mean = total / max(count, 1)
    for b in blocks:
        b = np.asarray(b, dtype=np.float64).reshape(-1, np.shape(b)[-1])
        sq = sq + ((b - mean) ** 2).sum(axis=0)
    std = np.sqrt(sq / max(count, 1))
    return mean, np.maximum(std, STD_FLOOR)


def fit_norm_stats(inputs, outputs) -> NormStats:
    """Per-feature mean and (population) std over row blocks; std floored at 1e-8.

    ``inputs``/``outputs`` are arrays or iterables of arrays whose last axis is
    the feature axis.
    """
    if isinstance(inputs, np.ndarray):
        inputs = [inputs]
    if isinstance(outputs, np.ndarray):
        outputs = [outputs]
    return NormStats(*_moments(list(inputs)), *_moments(list(outputs)))


def with_noise(norm: NormStats, sigma) -> NormStats:
    """Stats of the noised distribution: independent noise adds ``sigma^2`` to
    the variance of velocity, acceleration and target (the target carries the
    negated velocity noise). Means are unchanged."""
    var = np.asarray(sigma, dtype=np.float64) ** 2
    in_std = norm.in_std.copy()
    for sl in (M.VEL, M.ACC):
        in_std[sl] = np.sqrt(np.where(in_std[sl] > STD_FLOOR, in_std[sl] ** 2, 0.0) + var)
    out_std = np.sqrt(np.where(norm.out_std > STD_FLOOR, norm.out_std**2, 0.0) + var)
    return NormStats(norm.in_mean.copy(), np.maximum(in_std, STD_FLOOR), norm.out_mean.copy(),
                     np.maximum(out_std, STD_FLOOR))


# ---------------------------------------------------------------------------
# Noise, optimizer, schedule
# ---------------------------------------------------------------------------


def add_noise(frame: np.ndarray, sigma, seed_or_rng) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian noise with per-axis ``sigma`` (mm/s) on velocity and acceleration.

    Returns the noised frame and the velocity noise (needed for the target).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (3,) or np.any(sigma < 0):
        raise ValueError("sigma must be three non-negative values")
    rng = np.random.default_rng(seed_or_rng)
    n = frame.shape[0]
    nv = rng.standard_normal((n, 3)) * sigma
    na = rng.standard_normal((n, 3)) * sigma
    out = frame.copy()
    out[:, M.VEL] += nv.astype(frame.dtype)
    out[:, M.ACC] += na.astype(frame.dtype)
    return out, nv


@dataclass(eq=False)
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
               beta2: float = 0.95, weight_decay: float = 1e-4, eps: float = 1e-8) -> None:
    """In-place AdamW with bias correction and decoupled weight decay."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            p -= (lr * weight_decay) * p
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    s = min(max(step, 0), total_steps)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * s / max(total_steps, 1)))


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseSpec:
    name: str
    steps: int
    lr_max: float
    lr_min: float
    dataset: str = "pretrain"  # corpus key: "pretrain" or "finetune"
    resolution: str = "fine"  # "coarse" or "fine"
    masked: bool = False
    batch_size: int = 2
    noise_sigma: tuple = (10.0, 10.0, 1.0)
    mask_ratio: float = 0.5
    submesh: dict | None = None  # {"parts": k} or {"edges": budget}

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError(f"phase {self.name}: steps must be positive")
        if not (self.lr_max >= self.lr_min > 0):
            raise ValueError(f"phase {self.name}: need lr_max >= lr_min > 0")
        if self.batch_size < 1:
            raise ValueError(f"phase {self.name}: batch_size must be positive")
        if self.resolution not in ("coarse", "fine"):
            raise ValueError(f"phase {self.name}: unknown resolution {self.resolution!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseSpec":
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise ValueError(f"unknown phase keys: {sorted(extra)}")
        d = dict(d)
        if "noise_sigma" in d:
            d["noise_sigma"] = tuple(float(s) for s in d["noise_sigma"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_sigma"] = list(self.noise_sigma)
        return d


# steps and learning rates of the full-scale curriculum
FULL_PHASES = (
    PhaseSpec("pretrain-coarse-masked", 150_000, 1e-4, 1e-7, "pretrain", "coarse", masked=True),
    PhaseSpec("pretrain-coarse", 150_000, 1e-4, 1e-7, "pretrain", "coarse"),
    PhaseSpec("pretrain-fine", 45_000, 1e-4, 1e-7, "pretrain", "fine"),
    PhaseSpec("finetune-coarse", 20_000, 1e-5, 1e-8, "finetune", "coarse"),
    PhaseSpec("finetune-fine", 20_000, 1e-5, 1e-8, "finetune", "fine"),
)


def scaled_schedule(scale: float, lr_factor: float = 1.0, **overrides) -> list[PhaseSpec]:
    """The five-phase curriculum with every step count divided by ``scale``
    (rounded, at least 1) and every learning rate multiplied by ``lr_factor``."""
    out = []
    for ph in FULL_PHASES:
        out.append(replace(ph, steps=max(1, int(round(ph.steps / scale))),
                           lr_max=ph.lr_max * lr_factor, lr_min=ph.lr_min * lr_factor,
                           **overrides))
    return out


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class TrainCase:
    """One trajectory prepared for training: clean frames and targets."""
    mesh: Mesh
    waveform: Waveform
    trajectory: Trajectory
    aug: G.AugmentedAdjacency
    frames: np.ndarray  # (K, N, 15) frames at k = 0..K-1
    targets: np.ndarray  # (K, N, 3) u_{k+1} - u_k

    @property
    def n_samples(self) -> int:
        return self.frames.shape[0]


def trajectory_frames(mesh: Mesh, waveform: Waveform, traj: Trajectory) -> np.ndarray:
    """Frames for every transition of a one-period trajectory.

    The acceleration at ``k = 0`` uses the frame before the period end
    (``u_{-1} = u_{T-2}``) since the stored trajectory is periodic.
    """
    vel = traj.velocity.astype(np.float64)
    n_t = vel.shape[0]
    frames = np.empty((n_t - 1, mesh.n_nodes, M.N_FEATURES))
    for k in range(n_t - 1):
        prev = vel[k - 1] if k > 0 else vel[n_t - 2]
        frames[k] = M.frame_at(mesh, waveform, vel[k], prev, k * traj.dt, traj.dt)
    return frames


def prepare_case(case: SyntheticCase, config: M.ModelConfig, aug_seed: int = 0) -> TrainCase:
    mesh, traj = case.mesh, case.trajectory
    aug = G.assemble(G.build_adjacency(mesh), mesh, config.augment_config(aug_seed))
    vel = traj.velocity.astype(np.float64)
    return TrainCase(mesh, case.waveform, traj, aug, trajectory_frames(mesh, case.waveform, traj),
                     vel[1:] - vel[:-1])


@dataclass(eq=False)
class Corpus:
    """Prepared cases keyed by ``(dataset, resolution)``."""
    cases: dict[tuple[str, str], list[TrainCase]]

    def select(self, dataset: str, resolution: str) -> list[TrainCase]:
        try:
            out = self.cases[(dataset, resolution)]
        except KeyError:
            raise ValueError(f"corpus has no {dataset}/{resolution} cases") from None
        if not out:
            raise ValueError(f"corpus has no {dataset}/{resolution} cases")
        return out

    def all_cases(self) -> list[TrainCase]:
        return [c for group in self.cases.values() for c in group]

    def fit_norm(self, noise_sigma=None) -> NormStats:
        """Statistics of the clean frames/targets; with ``noise_sigma`` the
        variances of velocity, acceleration and target include the training
        noise, so noised inputs are unit-variance too."""
        cases = self.all_cases()
        norm = fit_norm_stats([c.frames for c in cases], [c.targets for c in cases])
        if noise_sigma is not None:
            norm = with_noise(norm, noise_sigma)
        return norm


def build_corpus(specs: dict[tuple[str, str], list[dict]], config: M.ModelConfig,
                 aug_seed: int = 0) -> Corpus:
    """``specs`` maps ``(dataset, resolution)`` to a list of
    ``{"geom": ..., "flow": ..., "seed": ...}`` synthetic-case specs."""
    cases = {}
    for key, items in specs.items():
        cases[tuple(key)] = [
            prepare_case(generate_synthetic_case(it.get("geom"), it.get("flow"), it.get("seed", 0)),
                         config, aug_seed)
            for it in items]
    return Corpus(cases)


# ---------------------------------------------------------------------------
# Desk-scale preset
# ---------------------------------------------------------------------------

# pre-training sees waveform variants of other meshes; fine-tuning sees the
# evaluation case itself (coarse and fine)
_TOY_WAVEFORMS = (
    {"q_mean": 2200.0, "pulsatility": 1.4, "systole": 0.16},
    {"q_mean": 2800.0, "pulsatility": 1.8, "systole": 0.20},
    {"q_mean": 2500.0, "pulsatility": 1.2, "systole": 0.22},
)
TOY_COARSE_EDGE = 0.8
TOY_SCALE = 500.0
TOY_LR_FACTOR = 10.0
TOY_NOISE = (10.0, 10.0, 10.0)


def toy_model_config() -> M.ModelConfig:
    return M.ModelConfig(n_layers=4, d=64, heads=8, dilated_layers=1)


def toy_corpus_specs(case_seed: int = 0) -> dict[tuple[str, str], list[dict]]:
    coarse = {"target_edge_length": TOY_COARSE_EDGE}
    return {
        ("pretrain", "coarse"): [{"geom": coarse, "flow": {"waveform_params": w}, "seed": i + 1}
                                 for i, w in enumerate(_TOY_WAVEFORMS)],
        ("pretrain", "fine"): [{"flow": {"waveform_params": w}, "seed": i + 1}
                               for i, w in enumerate(_TOY_WAVEFORMS)],
        ("finetune", "coarse"): [{"geom": coarse, "seed": case_seed}],
        ("finetune", "fine"): [{"seed": case_seed}],
    }


def toy_schedule() -> list[PhaseSpec]:
    return scaled_schedule(TOY_SCALE, TOY_LR_FACTOR, noise_sigma=TOY_NOISE)


# ---------------------------------------------------------------------------
# Loss / gradient on one sample
# ---------------------------------------------------------------------------


def _sample(case: TrainCase, k: int, norm: NormStats, sigma, rng, dtype):
    frame, nv = add_noise(case.frames[k], sigma, rng)
    target = case.targets[k] - nv
    return (norm.apply_inputs(frame).astype(dtype), norm.apply_outputs(target).astype(dtype))


def sample_loss_and_grad(params, config: M.ModelConfig, x, y, aug, masked: bool = False,
                         mask_ratio: float = 0.5, mask_seed: int = 0):
    if masked:
        pred, tape = M.mae_forward(params, config, x, aug, mask_ratio, mask_seed)
        loss, dy = T.mse_loss(pred, y)
        return loss, M.mae_backward(params, config, dy, tape)
    pred, tape = M.forward(params, config, x, aug)
    loss, dy = T.mse_loss(pred, y)
    return loss, M.backward(params, config, dy, tape)


def _accumulate(total: dict | None, grads: dict, weight: float) -> dict:
    if total is None:
        return {k: g * weight for k, g in grads.items()}
    for k, g in grads.items():
        total[k] += g * weight
    return total


def _check_finite(loss: float, grads: dict, context: dict) -> None:
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if not math.isfinite(loss) or bad:
        raise TrainingDiverged(f"non-finite loss/gradient at step {context.get('step')}"
                               f" (loss={loss}, blocks={bad[:5]})", {**context, "loss": loss,
                                                                    "bad_blocks": bad})


# ---------------------------------------------------------------------------
# Sub-mesh stepping
# ---------------------------------------------------------------------------


def submesh_groups(adj: G.Adjacency, strategy: dict, seed: int = 0) -> list[np.ndarray]:
    """Node groups for one macro-step: ``{"parts": k}`` partitions the graph,
    ``{"edges": budget}`` samples one random-edge subgraph."""
    if "parts" in strategy:
        return G.partition(adj, int(strategy["parts"]))
    if "edges" in strategy:
        _, nodes = G.sample_neighbor_subgraph(adj, int(strategy["edges"]), seed)
        return [nodes]
    raise ValueError(f"unknown sub-mesh strategy {strategy!r}")


def submesh_gradient_step(params: dict, opt: AdamState, groups: list[np.ndarray],
                          loss_and_grad, lr: float, **adam_kw) -> list[float]:
    """One optimizer step per node group, in the given order.

    ``loss_and_grad(nodes)`` returns ``(loss, grads)`` for the restricted
    problem; the losses are returned in order.
    """
    losses = []
    for nodes in groups:
        loss, grads = loss_and_grad(np.asarray(nodes))
        adamw_step(params, grads, opt, lr, **adam_kw)
        losses.append(loss)
    return losses


# ---------------------------------------------------------------------------
# Training state and phases
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class LossRecord:
    step: int
    phase: str
    lr: float
    loss: float


@dataclass(eq=False)
class TrainState:
    config: M.ModelConfig
    params: dict
    norm: NormStats
    opt: AdamState = field(default_factory=AdamState)
    step: int = 0  # completed macro-steps over the whole schedule
    seed: int = 0
    aug_seed: int = 0
    log: list = field(default_factory=list)
    nodes_processed: int = 0

    def surrogate(self) -> M.Surrogate:
        return M.Surrogate(self.config, self.params, self.norm, self.aug_seed)


def new_state(config: M.ModelConfig, norm: NormStats, seed: int = 0, aug_seed: int = 0,
              mae: bool = True) -> TrainState:
    params = M.init_params(config, seed=seed, mae=mae and config.masked_token)
    return TrainState(config, params, norm, seed=seed, aug_seed=aug_seed)


def _drop_pretraining_blocks(state: TrainState) -> None:
    for name in [k for k in state.params if k.startswith("mae")]:
        del state.params[name]
        state.opt.m.pop(name, None)
        state.opt.v.pop(name, None)


def train_step(state: TrainState, phase: PhaseSpec, cases: list[TrainCase], phase_step: int,
               dtype=np.float32) -> float:
    """One macro-step of ``phase``: a batch (or one step per sub-mesh)."""
    rng = np.random.default_rng([state.seed, state.step])
    lr = cosine_lr(phase_step, phase.steps, phase.lr_max, phase.lr_min)
    picks = [(int(rng.integers(len(cases))), None) for _ in range(phase.batch_size)]
    picks = [(c, int(rng.integers(cases[c].n_samples))) for c, _ in picks]
    mask_seeds = rng.integers(2**31, size=phase.batch_size)
    context = {"step": state.step, "phase": phase.name, "lr": lr, "picks": picks}

    if phase.submesh:
        c, k = picks[0]
        case = cases[c]
        x, y = _sample(case, k, state.norm, phase.noise_sigma, rng, dtype)
        groups = submesh_groups(case.aug.base, phase.submesh, int(mask_seeds[0]))

        def loss_and_grad(nodes):
            sub = case.aug.restrict(nodes)
            loss, grads = sample_loss_and_grad(state.params, state.config, x[nodes], y[nodes],
                                               sub)
            _check_finite(loss, grads, context)
            state.nodes_processed += nodes.size
            return loss, grads

        losses = submesh_gradient_step(state.params, state.opt, groups, loss_and_grad, lr)
        loss = float(np.mean(losses))
    else:
        total, loss = None, 0.0
        for (c, k), ms in zip(picks, mask_seeds):
            case = cases[c]
            x, y = _sample(case, k, state.norm, phase.noise_sigma, rng, dtype)
            li, grads = sample_loss_and_grad(state.params, state.config, x, y, case.aug,
                                             phase.masked, phase.mask_ratio, int(ms))
            _check_finite(li, grads, context)
            total = _accumulate(total, grads, 1.0 / phase.batch_size)
            loss += li / phase.batch_size
            state.nodes_processed += case.mesh.n_nodes
        adamw_step(state.params, total, state.opt, lr)
    state.step += 1
    state.log.append(LossRecord(state.step, phase.name, lr, loss))
    return loss


def run_phase(state: TrainState, phase: PhaseSpec, corpus: Corpus, start: int = 0,
              callback=None) -> TrainState:
    """Run ``phase`` from its step ``start`` to the end."""
    cases = corpus.select(phase.dataset, phase.resolution)
    if not phase.masked:
        _drop_pretraining_blocks(state)
    elif not any(k.startswith("mae") for k in state.params):
        raise ValueError(f"phase {phase.name} is masked but the model has no pre-training blocks")
    for s in range(start, phase.steps):
        loss = train_step(state, phase, cases, s)
        if callback is not None:
            callback(state, phase, s, loss)
    return state


def run_schedule(state: TrainState, phases: list[PhaseSpec], corpus: Corpus,
                 callback=None) -> TrainState:
    """Run the phases in order, resuming after ``state.step`` completed steps."""
    done = 0
    for phase in phases:
        if state.step < done + phase.steps:
            run_phase(state, phase, corpus, start=state.step - done, callback=callback)
        done += phase.steps
    return state


def schedule_position(phases: list[PhaseSpec], step: int) -> tuple[int, int]:
    """(phase index, step within phase) of global ``step``."""
    done = 0
    for i, ph in enumerate(phases):
        if step < done + ph.steps:
            return i, step - done
        done += ph.steps
    return len(phases), 0


def write_loss_log(records: list[LossRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "phase", "lr", "loss"])
        for r in records:
            w.writerow([r.step, r.phase, repr(float(r.lr)), repr(float(r.loss))])


def read_loss_log(path) -> list[LossRecord]:
    with open(path, newline="") as f:
        return [LossRecord(int(r["step"]), r["phase"], float(r["lr"]), float(r["loss"]))
                for r in csv.DictReader(f)]


# ---------------------------------------------------------------------------
# Checkpoints of training state
# ---------------------------------------------------------------------------


def state_to_checkpoint(state: TrainState, extra: dict | None = None) -> tuple[dict, dict]:
    meta = {"model": state.config.to_dict(), "norm": state.norm.to_dict(),
            "seed": state.seed, "aug_seed": state.aug_seed, "step": state.step,
            "adam_step": state.opt.step, "nodes_processed": state.nodes_processed}
    if extra:
        meta.update(extra)
    arrays = dict(state.params)
    for name in state.params:
        if name in state.opt.m:
            arrays[f"adam.m.{name}"] = state.opt.m[name]
            arrays[f"adam.v.{name}"] = state.opt.v[name]
    return meta, arrays


def state_from_checkpoint(meta: dict, arrays: dict) -> TrainState:
    config = M.ModelConfig.from_dict(meta["model"])
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    opt = AdamState(int(meta.get("adam_step", 0)))
    for k in params:
        if f"adam.m.{k}" in arrays:
            opt.m[k] = arrays[f"adam.m.{k}"]
            opt.v[k] = arrays[f"adam.v.{k}"]
    return TrainState(config, params, NormStats.from_dict(meta["norm"]), opt,
                      int(meta.get("step", 0)), int(meta.get("seed", 0)),
                      int(meta.get("aug_seed", 0)), [], int(meta.get("nodes_processed", 0)))


def surrogate_from_checkpoint(meta: dict, arrays: dict) -> M.Surrogate:
    return state_from_checkpoint(meta, arrays).surrogate()


# ---------------------------------------------------------------------------
# Compute accounting and scaling laws
# ---------------------------------------------------------------------------


def flops_estimate(config: M.ModelConfig, nodes_processed: float) -> float:
    """Training compute ``C = 6 P D`` with ``D`` the number of node-steps."""
    return 6.0 * M.param_count(config) * float(nodes_processed)


@dataclass(frozen=True)
class ScalingFit:
    a: float
    b: float
    r2: float

    def predict(self, c):
        return self.b * np.asarray(c, dtype=np.float64) ** self.a


def fit_scaling_law(compute, params) -> ScalingFit:
    """Least squares of ``log P = a log C + log b``."""
    x = np.log(np.asarray(compute, dtype=np.float64))
    y = np.log(np.asarray(params, dtype=np.float64))
    if x.size < 2 or np.ptp(x) == 0:
        raise ValueError("need at least two distinct compute budgets")
    a, logb = np.polyfit(x, y, 1)
    resid = y - (a * x + logb)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return ScalingFit(float(a), float(math.exp(logb)), float(r2))


@dataclass
class SweepRecord:
    budget: float
    config: dict
    params: int
    steps: int
    error: float
    seconds: float
    best: bool = False


def isoflops_sweep(budgets, model_grid: list[M.ModelConfig], corpus: Corpus,
                   dataset: str = "pretrain", resolution: str = "coarse",
                   lr_max: float = 3e-3, lr_min: float = 3e-6, batch_size: int = 1,
                   noise_sigma=(1.0, 1.0, 1.0), seed: int = 0, horizon: int | None = None,
                   evaluate=None) -> list[SweepRecord]:
    """Train every grid model for ``C / (6 P batch_nodes)`` steps per budget and
    record its All-Rollout error; the per-budget minimum is flagged ``best``.

    ``evaluate(surrogate, case)`` overrides the default error (All-Rollout on
    the first case of the selection, over ``horizon`` steps).
    """
    from .rollout import all_rollout_error

    cases = corpus.select(dataset, resolution)
    batch_nodes = batch_size * float(np.mean([c.mesh.n_nodes for c in cases]))
    norm = corpus.fit_norm(noise_sigma)
    records: list[SweepRecord] = []
    for budget in budgets:
        group = []
        for cfg in model_grid:
            p = M.param_count(cfg)
            steps = int(budget // (6.0 * p * batch_nodes))
            if steps < 1:
                log.warning("budget %.3g too small for %d-parameter model; skipped", budget, p)
                continue
            t0 = time.perf_counter()
            local = [TrainCase(c.mesh, c.waveform, c.trajectory,
                               G.assemble(G.build_adjacency(c.mesh), c.mesh, cfg.augment_config(0)),
                               c.frames, c.targets) for c in cases]
            state = new_state(cfg, norm, seed=seed, mae=False)
            phase = PhaseSpec("sweep", steps, lr_max, lr_min, dataset, resolution,
                              batch_size=batch_size, noise_sigma=tuple(noise_sigma))
            run_phase(state, phase, Corpus({(dataset, resolution): local}))
            sur = state.surrogate()
            case = local[0]
            if evaluate is not None:
                err = float(evaluate(sur, case))
            else:
                traj = case.trajectory
                if horizon is not None:
                    traj = Trajectory(traj.mesh_hash, traj.dt, traj.velocity[:horizon + 1])
                err = all_rollout_error(sur, case.mesh, case.waveform, traj, aug=case.aug).mse
            rec = SweepRecord(float(budget), cfg.to_dict(), p, steps, err,
                              time.perf_counter() - t0)
            group.append(rec)
        if group:
            min(group, key=lambda r: r.error).best = True
        records.extend(group)
    return records
