"""``hemograph`` command-line interface.

Every command takes ``--config <json>`` (with a ``version`` field; unknown
keys are rejected), ``--seed``, ``--out <dir>`` and ``--threads``. Outputs are
data files plus ``manifest.json``; JSON outputs also embed the manifest.
Wall-clock times go to ``timing.json`` so that all other outputs are
bitwise-reproducible at ``--threads 1``.

Exit codes: 0 success, 2 usage/config error, 3 data-format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import hemo as H
from . import meshio as io
from . import model as M
from . import rollout as R
from . import train as TR

log = logging.getLogger("hemograph")

CONFIG_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# Config, manifests and file helpers
# ---------------------------------------------------------------------------


def load_config(path, allowed: set[str], defaults: dict | None = None) -> dict:
    """Read a JSON config, check its version and reject unknown keys."""
    cfg = dict(defaults or {})
    if path is None:
        return cfg
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    version = data.pop("version", None)
    if version != CONFIG_VERSION:
        raise UsageError(f"config version must be {CONFIG_VERSION}, got {version!r}")
    extra = set(data) - allowed
    if extra:
        raise UsageError(f"unknown config keys: {sorted(extra)}")
    cfg.update(data)
    return cfg


def _check_keys(d, allowed, what: str) -> None:
    if not isinstance(d, dict):
        raise UsageError(f"{what} must be a JSON object")
    extra = set(d) - set(allowed)
    if extra:
        raise UsageError(f"unknown {what} keys: {sorted(extra)}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def make_manifest(command: str, config: dict, inputs: dict, seed: int) -> dict:
    return {
        "command": command,
        "config_sha256": hashlib.sha256(canonical_json(config).encode()).hexdigest(),
        "inputs": {k: sha256_file(v) for k, v in sorted(inputs.items()) if v is not None},
        "seed": int(seed),
        "tool_version": __version__,
    }


def write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")


def finish(out: Path, manifest: dict, outputs: list[str], seconds: float,
           extra_timing: dict | None = None) -> None:
    """Write ``manifest.json`` (with output hashes) and the timing sidecar."""
    m = dict(manifest)
    m["outputs"] = {name: sha256_file(out / name) for name in outputs}
    write_json(out / "manifest.json", m)
    write_json(out / "timing.json", {"wall_clock_seconds": seconds, **(extra_timing or {})})


def save_bulge(path, nodes: np.ndarray, n_nodes: int) -> None:
    write_json(path, {"n_nodes": int(n_nodes), "nodes": [int(i) for i in nodes]})


def load_bulge(path, mesh: io.Mesh | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    try:
        data = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise io.FormatError(f"bulge mask is not JSON: {e}", getattr(e, "pos", 0)) from None
    if not isinstance(data, dict) or set(data) != {"n_nodes", "nodes"}:
        raise io.FormatError("bulge mask needs exactly the keys n_nodes and nodes", 0)
    nodes = np.asarray(data["nodes"])
    n = data["n_nodes"]
    if nodes.ndim != 1 or (nodes.size and nodes.dtype.kind != "i") or not isinstance(n, int):
        raise io.FormatError("bulge mask nodes must be a list of integers", 0)
    nodes = nodes.astype(np.int64)
    if nodes.size and (nodes.min() < 0 or nodes.max() >= n):
        raise io.FormatError("bulge mask node index out of range", 0)
    if mesh is not None and n != mesh.n_nodes:
        raise io.FormatError(f"bulge mask is for {n} nodes, mesh has {mesh.n_nodes}", 0)
    return nodes


def _need(path, flag: str):
    if path is None:
        raise UsageError(f"{flag} is required")
    if not Path(path).is_file():
        raise UsageError(f"{flag}: file not found: {path}")
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> dict:
    cfg = load_config(args.config, {"geom", "flow"}, {"geom": {}, "flow": {}})
    _check_keys(cfg["geom"], io.DEFAULT_GEOM, "geom")
    _check_keys(cfg["flow"], io.DEFAULT_FLOW, "flow")
    _check_keys(cfg["flow"].get("waveform_params", {}), io.DEFAULT_FLOW["waveform_params"],
                "waveform_params")
    case = io.generate_synthetic_case(cfg["geom"], cfg["flow"], seed=args.seed)
    out = args.out
    io.save_mesh(case.mesh, out / "mesh.hsm")
    io.save_waveform(case.waveform, out / "waveform.txt")
    io.save_trajectory(case.trajectory, out / "trajectory.hst")
    save_bulge(out / "bulge.json", case.bulge_nodes, case.mesh.n_nodes)
    return {"manifest": make_manifest("synth", cfg, {}, args.seed),
            "outputs": ["mesh.hsm", "waveform.txt", "trajectory.hst", "bulge.json"]}


_TRAIN_KEYS = {"preset", "model", "corpus", "schedule", "phases", "aug_seed", "max_steps"}
_SCHEDULE_KEYS = {"scale", "lr_factor", "noise_sigma", "batch_size", "mask_ratio", "submesh"}


def _corpus_specs(entries) -> dict:
    if not isinstance(entries, list):
        raise UsageError("corpus must be a list of {dataset, resolution, cases}")
    specs = {}
    for e in entries:
        _check_keys(e, {"dataset", "resolution", "cases"}, "corpus entry")
        for c in e.get("cases", []):
            _check_keys(c, {"geom", "flow", "seed"}, "corpus case")
        specs.setdefault((e["dataset"], e["resolution"]), []).extend(e.get("cases", []))
    return specs


def train_setup(cfg: dict):
    """Model config, phases and corpus specs of a training config."""
    preset = cfg.get("preset")
    if preset not in (None, "toy"):
        raise UsageError(f"unknown preset {preset!r}")
    model = (TR.toy_model_config() if preset == "toy" else M.ModelConfig()).to_dict()
    model.update(cfg.get("model", {}))
    try:
        config = M.ModelConfig.from_dict(model)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    if "phases" in cfg and "schedule" in cfg:
        raise UsageError("give either phases or schedule, not both")
    try:
        if "phases" in cfg:
            phases = [TR.PhaseSpec.from_dict(p) for p in cfg["phases"]]
        else:
            sched = dict(cfg.get("schedule", {}))
            _check_keys(sched, _SCHEDULE_KEYS, "schedule")
            if preset == "toy":
                sched.setdefault("scale", TR.TOY_SCALE)
                sched.setdefault("lr_factor", TR.TOY_LR_FACTOR)
                sched.setdefault("noise_sigma", list(TR.TOY_NOISE))
            scale = float(sched.pop("scale", 1.0))
            lr_factor = float(sched.pop("lr_factor", 1.0))
            if "noise_sigma" in sched:
                sched["noise_sigma"] = tuple(float(s) for s in sched["noise_sigma"])
            phases = TR.scaled_schedule(scale, lr_factor, **sched)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid schedule: {e}") from None
    if "corpus" in cfg:
        specs = _corpus_specs(cfg["corpus"])
    elif preset == "toy":
        specs = TR.toy_corpus_specs()
    else:
        raise UsageError("a corpus is required unless preset is 'toy'")
    return config, phases, specs


def _identity(cfg: dict) -> str:
    """What a resumed run must share with its checkpoint (``max_steps`` may differ)."""
    return canonical_json({k: v for k, v in cfg.items() if k != "max_steps"})


def cmd_train(args) -> dict:
    cfg = load_config(args.config, _TRAIN_KEYS)
    config, phases, specs = train_setup(cfg)
    aug_seed = int(cfg.get("aug_seed", 0))
    corpus = TR.build_corpus(specs, config, aug_seed)
    total = sum(p.steps for p in phases)
    max_steps = cfg.get("max_steps")
    inputs = {}
    if args.resume is not None:
        _need(args.resume, "--resume")
        inputs["resume"] = args.resume
        meta, arrays = M.load_checkpoint(args.resume)
        if meta.get("train_config") != _identity(cfg):
            raise UsageError("checkpoint was written with a different training config")
        state = TR.state_from_checkpoint(meta, arrays)
        prev_log = Path(args.resume).with_name("loss.csv")
        if prev_log.is_file():
            state.log = [r for r in TR.read_loss_log(prev_log) if r.step <= state.step]
    else:
        sigma = phases[0].noise_sigma
        state = TR.new_state(config, corpus.fit_norm(sigma), seed=args.seed, aug_seed=aug_seed,
                             mae=any(p.masked for p in phases))
    stop = total if max_steps is None else min(total, int(max_steps))
    start = state.step
    t0 = time.perf_counter()

    class _Stop(Exception):
        pass

    def callback(st, phase, s, loss):
        if st.step % 50 == 0:
            log.info("step %d/%d %s loss %.4g", st.step, total, phase.name, loss)
        if st.step >= stop:
            raise _Stop

    if state.step < stop:
        try:
            TR.run_schedule(state, phases, corpus, callback=callback)
        except _Stop:
            pass
    meta, arrays = TR.state_to_checkpoint(state, {"train_config": _identity(cfg),
                                                  "total_steps": total})
    out = args.out
    M.save_checkpoint(out / "checkpoint.hsc", meta, arrays)
    TR.write_loss_log(state.log, out / "loss.csv")
    return {"manifest": make_manifest("train", cfg, inputs, state.seed),
            "outputs": ["checkpoint.hsc", "loss.csv"],
            "timing": {"train_seconds": time.perf_counter() - t0, "steps_run": state.step - start}}


def _load_case_inputs(args, need_traj: bool):
    mesh = io.load_mesh(_need(args.mesh, "--mesh"))
    wf = io.load_waveform(_need(args.waveform, "--waveform"))
    traj = None
    if need_traj or args.trajectory is not None:
        traj = io.load_trajectory(_need(args.trajectory, "--trajectory"), mesh)
    bulge = load_bulge(args.bulge, mesh) if args.bulge is not None else None
    return mesh, wf, traj, bulge


def cmd_rollout(args) -> dict:
    cfg = load_config(args.config, {"steps", "t0"}, {"steps": None, "t0": 0.0})
    meta, arrays = M.load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    model = TR.surrogate_from_checkpoint(meta, arrays)
    mesh, wf, truth, bulge = _load_case_inputs(args, need_traj=False)
    steps = args.steps if args.steps is not None else cfg["steps"]
    t0 = float(cfg["t0"])
    if truth is not None:
        dt = truth.dt
        frame0 = R.initial_frame(mesh, wf, truth)
        if steps is None:
            steps = truth.n_steps - 1
    else:
        dt = io.DEFAULT_DT
        u0 = M.enforce_boundaries(mesh, np.zeros((mesh.n_nodes, 3)), wf, t0)
        frame0 = M.frame_at(mesh, wf, u0, u0, t0, dt)
        if steps is None:
            steps = R.cycle_steps(wf.period, dt)
    steps = int(steps)
    if steps < 1:
        raise UsageError("steps must be positive")
    inputs = {"checkpoint": args.checkpoint, "mesh": args.mesh, "waveform": args.waveform,
              "trajectory": args.trajectory, "bulge": args.bulge}
    res = R.rollout(model, mesh, wf, frame0, steps, dt, t0=t0, truth=truth)
    report = {"steps": steps, "dt": dt, "n_nodes": mesh.n_nodes,
              "max_boundary_violation": float(res.boundary_violation.max(initial=0.0))}
    if truth is not None:
        m = min(steps + 1, truth.n_steps)
        gt = truth.velocity[1:m]
        pred = res.trajectory.velocity[1:m]
        err = R.per_step_mse(pred, gt)
        report["all_rollout"] = R.ErrorReport(float(err.mean()) if err.size else 0.0,
                                              err).to_dict()
        if bulge is not None:
            pers = R.rollout(R.Persistence(), mesh, wf, frame0, m - 1, dt, t0=t0)
            report["bulge"] = {
                "n_nodes": int(bulge.size),
                "l2_error": R.bulge_l2_error(pred, gt, bulge),
                "persistence_l2_error": R.bulge_l2_error(pers.trajectory.velocity[1:], gt,
                                                         bulge),
                "mean_speed": R.mean_speed(gt, bulge),
            }
    elif bulge is not None:
        report["bulge"] = {"n_nodes": int(bulge.size),
                           "mean_speed": R.mean_speed(res.trajectory.velocity[1:], bulge)}
    out = args.out
    io.save_trajectory(res.trajectory, out / "predicted.hst")
    manifest = make_manifest("rollout", cfg, inputs, args.seed)
    write_json(out / "report.json", {**report, "manifest": manifest})
    secs = res.step_seconds
    return {"manifest": manifest, "outputs": ["predicted.hst", "report.json"],
            "timing": {"rollout_seconds": float(secs.sum()),
                       "step_seconds_mean": float(secs.mean())}}


def _casson(cfg) -> H.CassonParams:
    c = cfg.get("casson", {})
    _check_keys(c, {"hct", "m"}, "casson")
    return H.CassonParams(**c)


_HEMO_KEYS = {"casson", "percentile", "region", "normalize_velocity", "tawss_high_score"}
_HEMO_DEFAULTS = {"casson": {}, "percentile": 99.0, "region": "bulge",
                  "normalize_velocity": False, "tawss_high_score": 1}


def _hemo(mesh, traj, wf, bulge, cfg):
    return H.hemo_metrics(mesh, traj, wf, bulge, _casson(cfg), cfg["percentile"], cfg["region"],
                          cfg["normalize_velocity"])


def cmd_metrics(args) -> dict:
    cfg = load_config(args.config, {"hemo"} | _HEMO_KEYS, {"hemo": False, **_HEMO_DEFAULTS})
    pred_path = _need(args.pred, "--pred")
    truth_path = _need(args.truth, "--truth")
    mesh = io.load_mesh(args.mesh) if args.mesh is not None else None
    pred = io.load_trajectory(pred_path, mesh)
    truth = io.load_trajectory(truth_path, mesh)
    if pred.mesh_hash != truth.mesh_hash:
        raise io.FormatError("trajectories belong to different meshes", 4)
    m = min(pred.n_steps, truth.n_steps)
    if m < 2:
        raise UsageError("trajectories need at least two frames")
    bulge = load_bulge(args.bulge, mesh) if args.bulge is not None else None
    err = R.per_step_mse(pred.velocity[1:m], truth.velocity[1:m])
    report = {"steps": m - 1,
              "all_rollout": R.ErrorReport(float(err.mean()), err).to_dict()}
    if bulge is not None:
        report["bulge"] = {"n_nodes": int(bulge.size),
                           "l2_error": R.bulge_l2_error(pred.velocity[1:m], truth.velocity[1:m],
                                                        bulge),
                           "mean_speed": R.mean_speed(truth.velocity[1:m], bulge)}
    inputs = {"pred": args.pred, "truth": args.truth, "mesh": args.mesh, "bulge": args.bulge}
    if cfg["hemo"]:
        if mesh is None or bulge is None or args.waveform is None:
            raise UsageError("hemodynamic deltas need --mesh, --waveform and --bulge")
        wf = io.load_waveform(_need(args.waveform, "--waveform"))
        inputs["waveform"] = args.waveform
        hp = _hemo(mesh, pred, wf, bulge, cfg)
        ht = _hemo(mesh, truth, wf, bulge, cfg)
        keys = ("tawss_mean", "peak_wss", "osi_max", "systolic_velocity")
        report["hemo"] = {"pred": hp, "truth": ht,
                          "delta_percent": {k: R.delta_metric(hp[k], ht[k]) for k in keys}}
    manifest = make_manifest("metrics", cfg, inputs, args.seed)
    write_json(args.out / "metrics.json", {**report, "manifest": manifest})
    return {"manifest": manifest, "outputs": ["metrics.json"]}


def cmd_hemo(args) -> dict:
    cfg = load_config(args.config, _HEMO_KEYS, dict(_HEMO_DEFAULTS))
    mesh, wf, traj, bulge = _load_case_inputs(args, need_traj=True)
    if bulge is None:
        if cfg["region"] == "bulge":
            raise UsageError("--bulge is required for region 'bulge'")
        bulge = np.arange(mesh.n_nodes)
    params = _casson(cfg)
    field_ = H.wall_field(mesh, traj, params)
    metrics = H.hemo_metrics(mesh, traj, wf, bulge, params, cfg["percentile"], cfg["region"],
                             cfg["normalize_velocity"], field_=field_)
    risk = H.assess(metrics, int(cfg["tawss_high_score"]))
    inputs = {"mesh": args.mesh, "waveform": args.waveform, "trajectory": args.trajectory,
              "bulge": args.bulge}
    manifest = make_manifest("hemo", cfg, inputs, args.seed)
    out = args.out
    io.save_trajectory(field_.as_trajectory(mesh.content_hash()), out / "wss.hst")
    write_json(out / "hemo.json", {"metrics": metrics, "risk": risk.to_dict(),
                                   "wall_nodes": [int(i) for i in field_.nodes],
                                   "tawss": [float(v) for v in field_.tawss],
                                   "osi": [float(v) for v in field_.osi],
                                   "manifest": manifest})
    return {"manifest": manifest, "outputs": ["wss.hst", "hemo.json"]}


def cmd_risk(args) -> dict:
    cfg = load_config(args.config, {"cases", "tawss_high_score"},
                      {"cases": [], "tawss_high_score": 1})
    cases = list(cfg["cases"])
    inputs = {}
    for i, path in enumerate(args.metrics or []):
        inputs[f"metrics{i}"] = _need(path, "--metrics")
        try:
            data = json.loads(Path(path).read_text())
            metrics = data["metrics"] if "metrics" in data else data
        except (json.JSONDecodeError, TypeError, KeyError) as e:
            raise io.FormatError(f"{path}: not a metrics file ({e})", 0) from None
        cases.append({"name": Path(path).stem, "metrics": metrics})
    if not cases:
        raise UsageError("no cases: give config cases or --metrics files")
    keys = ("tawss_mean", "peak_wss", "osi_max", "systolic_velocity")
    rows = []
    for i, c in enumerate(cases):
        _check_keys(c, {"name", "metrics", "subscores"}, "risk case")
        if ("metrics" in c) == ("subscores" in c):
            raise UsageError(f"risk case {i}: give exactly one of metrics or subscores")
        if "metrics" in c:
            try:
                vals = {k: float(c["metrics"][k]) for k in keys}
            except (KeyError, TypeError, ValueError) as e:
                raise UsageError(f"risk case {i}: bad metrics ({e})") from None
            rep = H.assess(vals, int(cfg["tawss_high_score"]))
        else:
            rep = H.aggregate_risk(c["subscores"])
        rows.append({"name": c.get("name", f"case{i}"), **rep.to_dict()})
    manifest = make_manifest("risk", cfg, inputs, args.seed)
    write_json(args.out / "risk.json", {"cases": rows, "manifest": manifest})
    return {"manifest": manifest, "outputs": ["risk.json"]}


_SWEEP_KEYS = {"budgets", "models", "corpus", "dataset", "resolution", "lr_max", "lr_min",
               "batch_size", "noise_sigma", "horizon"}


def cmd_scaling(args) -> dict:
    cfg = load_config(args.config, {"runs", "sweep"})
    if ("runs" in cfg) == ("sweep" in cfg):
        raise UsageError("scaling config needs exactly one of runs or sweep")
    timing = {}
    if "runs" in cfg:
        runs = cfg["runs"]
        for r in runs:
            _check_keys(r, {"compute", "params"}, "run")
        records = [dict(r) for r in runs]
        compute = [r["compute"] for r in runs]
        params = [r["params"] for r in runs]
    else:
        sw = dict(cfg["sweep"])
        _check_keys(sw, _SWEEP_KEYS, "sweep")
        try:
            grid = [M.ModelConfig.from_dict(m) for m in sw.pop("models")]
            budgets = sw.pop("budgets")
        except (KeyError, TypeError, ValueError) as e:
            raise UsageError(f"invalid sweep: {e}") from None
        specs = _corpus_specs(sw.pop("corpus", []))
        corpus = TR.build_corpus(specs, grid[0], 0)
        if "noise_sigma" in sw:
            sw["noise_sigma"] = tuple(sw["noise_sigma"])
        recs = TR.isoflops_sweep(budgets, grid, corpus, seed=args.seed, **sw)
        records = []
        for r in recs:
            d = {k: v for k, v in vars(r).items() if k != "seconds"}
            records.append(d)
        timing["run_seconds"] = [r.seconds for r in recs]
        best = [r for r in recs if r.best]
        compute = [r.budget for r in best]
        params = [r.params for r in best]
    try:
        fit = TR.fit_scaling_law(compute, params)
        fit_d = {"a": fit.a, "b": fit.b, "r2": fit.r2}
    except ValueError as e:
        log.warning("no scaling fit: %s", e)
        fit_d = None
    manifest = make_manifest("scaling", cfg, {}, args.seed)
    write_json(args.out / "scaling.json", {"fit": fit_d, "records": records,
                                           "manifest": manifest})
    return {"manifest": manifest, "outputs": ["scaling.json"], "timing": timing}


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "rollout": cmd_rollout,
            "metrics": cmd_metrics, "hemo": cmd_hemo, "risk": cmd_risk, "scaling": cmd_scaling}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hemograph", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"hemograph {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="JSON config with a version field")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", type=Path, required=True, help="output directory")
        s.add_argument("--threads", type=int, default=1,
                       help="kernel threads (results are reproducible only with 1)")
        s.add_argument("-v", "--verbose", action="store_true")
        return s

    add("synth", "generate a synthetic tube+bulge case")
    s = add("train", "train a surrogate through the phased schedule")
    s.add_argument("--resume", type=Path, help="checkpoint to continue from")
    for name, h in (("rollout", "autoregressive rollout of a checkpoint"),
                    ("hemo", "wall shear stress, TAWSS, OSI and risk of a trajectory")):
        s = add(name, h)
        if name == "rollout":
            s.add_argument("--checkpoint", type=Path)
            s.add_argument("--steps", type=int)
        s.add_argument("--mesh", type=Path)
        s.add_argument("--waveform", type=Path)
        s.add_argument("--trajectory", type=Path,
                       help="ground truth (initial condition and reference)")
        s.add_argument("--bulge", type=Path, help="bulge node mask (JSON)")
    s = add("metrics", "error metrics between a predicted and a reference trajectory")
    s.add_argument("--pred", type=Path)
    s.add_argument("--truth", type=Path)
    s.add_argument("--mesh", type=Path)
    s.add_argument("--waveform", type=Path)
    s.add_argument("--bulge", type=Path)
    s = add("risk", "rule-based rupture-risk score")
    s.add_argument("--metrics", type=Path, action="append",
                   help="hemo.json or metrics JSON (repeatable)")
    add("scaling", "isoFLOPs sweep and power-law fit")
    return p


def _run(args) -> int:
    from threadpoolctl import threadpool_limits

    from ._kernels import set_threads

    if args.threads < 1:
        raise UsageError("--threads must be at least 1")
    set_threads(args.threads)
    args.out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with threadpool_limits(limits=args.threads):
        result = COMMANDS[args.command](args)
    finish(args.out, result["manifest"], result["outputs"], time.perf_counter() - t0,
           result.get("timing"))
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"hemograph: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except UsageError as e:
        msg, code = str(e), EXIT_USAGE
    except (io.FormatError,) as e:
        msg, code = f"data format: {e}", EXIT_FORMAT
    except (TR.TrainingDiverged, R.RolloutError, FloatingPointError) as e:
        msg, code = f"numerical failure: {e}", EXIT_NUMERIC
        snap = getattr(e, "snapshot", None)
        if snap is not None:
            try:
                (args.out / "diverged.json").write_text(json.dumps(snap, default=str, indent=2))
            except OSError:
                pass
    except (io.GeometryError, H.HemoError, ValueError, TypeError, KeyError) as e:
        msg, code = f"invalid input: {e}", EXIT_USAGE
    except OSError as e:
        msg, code = f"{e}", EXIT_USAGE
    print(f"hemograph {args.command}: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
