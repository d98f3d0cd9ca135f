"""Run orchestration: build problems from configs, execute replicas, write outputs.

Exit codes are shared by every command: 0 success, 1 configuration error,
2 divergence, 3 I/O failure.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import AUTO, SWEEP_AXES, RunConfig, needs_schedule, parse_config
from .diagnostics import descent_violations, equal_energy_start, replica_mean
from .engine import AlgoConfig, ClientControls, RoundReport, ServerState, Variant, run_experiment
from .errors import ConfigError, DivergenceError
from .problems import (
    FederatedProblem,
    ProblemError,
    _dec,
    _enc,
    initial_constants,
    make_logistic_suite,
    make_quadratic_suite,
    problem_to_json,
)
from .rng import StreamSource
from .schedules import Schedule, ScheduleError, ScheduleInput, schedule_for

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3

CSV_HEADER = ("round", "loss", "grad_norm_sq", "est_err", "client_drift", "control_residual", "wall_ms")
METRICS = CSV_HEADER[1:6]
CHECKPOINT_VERSION = 1


def worker_count() -> int:
    """Worker cap from ``FEDMOM_THREADS``; 0 or unset means serial."""
    raw = os.environ.get("FEDMOM_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("FEDMOM_THREADS", f"expected a non-negative integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("FEDMOM_THREADS", "must be >= 0")
    return n


# ---------------------------------------------------------------------------
# config -> problem, start point, algorithm
# ---------------------------------------------------------------------------


def build_problem(cfg: RunConfig) -> FederatedProblem:
    p = cfg.problem
    seed = cfg.run["seed"] if p["seed"] == AUTO else p["seed"]
    try:
        if p["kind"] == "quadratic":
            return make_quadratic_suite(p["clients"], p["dim"], p["hetero"], p["l_target"],
                                        p["mu_min"], p["sigma"], seed, p["shared_basis"])
        return make_logistic_suite(p["clients"], p["dim"], p["rows_per_client"],
                                   p["skew_alpha"], p["reg"], seed)
    except ProblemError as exc:
        raise ConfigError("problem", str(exc)) from None


def start_point(cfg: RunConfig, problem: FederatedProblem) -> np.ndarray:
    if cfg.run["x0"] == "equal_energy":
        return equal_energy_start(problem, 1.0)
    return np.zeros(problem.dim)


def problem_digest(problem: FederatedProblem) -> str:
    return hashlib.sha256(problem_to_json(problem).encode()).hexdigest()


def resolve_algo(cfg: RunConfig, problem: FederatedProblem, x0: np.ndarray) -> tuple[AlgoConfig, Schedule | None]:
    """Fill ``auto`` hyperparameters from the matching schedule.

    Schedules are stated in the direct parameterization; with
    ``reparameterized`` the scheduled ``eta`` and ``gamma`` are scaled by beta.
    Explicit values are taken in whichever parameterization is selected.
    """
    a = cfg.algo
    variant = Variant(a["variant"])
    n = problem.n_clients
    cohort = None if a["cohort"] == "all" else a["cohort"]
    schedule = None
    values = {k: a[k] for k in ("beta", "eta", "gamma", "init_batches")}
    if needs_schedule(cfg):
        consts = {"g0_energy": _g0_energy(problem, x0)}
        if a["delta"] != AUTO:
            consts["delta"] = a["delta"]
        else:
            try:
                consts["delta"] = initial_constants(problem, x0)["delta"]
            except ProblemError as exc:
                raise ConfigError("algo.delta", str(exc)) from None
        try:
            inp = ScheduleInput(
                n_clients=n, local_steps=a["local_steps"], rounds=cfg.run["rounds"],
                smoothness=problem.smoothness, delta=consts["delta"], sigma=problem.sigma,
                g0_energy=consts["g0_energy"], cohort_size=cohort,
                momentum_cap=a["momentum_cap"], safety=a["safety"],
            )
            fixed_beta = None if a["beta"] == AUTO else a["beta"]
            schedule = schedule_for(variant, inp, beta=fixed_beta, alt=a["alt_schedule"])
        except ScheduleError as exc:
            raise ConfigError("algo", f"schedule: {exc}") from None
        for w in schedule.warnings:
            log.warning("%s", w)
        scale = schedule.beta if a["reparameterized"] else 1.0
        auto_values = {
            "beta": schedule.beta,
            "eta": schedule.eta * scale,
            "gamma": schedule.gamma * scale,
            "init_batches": max(1, schedule.init_batches),
        }
        values = {k: auto_values[k] if v == AUTO else v for k, v in values.items()}
    algo = AlgoConfig(
        variant=variant,
        eta=values["eta"],
        gamma=values["gamma"],
        beta=values["beta"],
        local_steps=a["local_steps"],
        cohort_size=cohort,
        init_batches=values["init_batches"],
        reparameterized=a["reparameterized"],
    )
    return algo, schedule


def _g0_energy(problem: FederatedProblem, x0: np.ndarray) -> float:
    total = 0.0
    for c in problem.clients:
        g = c.gradient(x0)
        total += float(g @ g)
    return total / problem.n_clients


def algo_to_dict(algo: AlgoConfig) -> dict:
    return {
        "variant": algo.variant.value,
        "eta": algo.eta,
        "gamma": algo.gamma,
        "beta": algo.beta,
        "local_steps": algo.local_steps,
        "cohort_size": algo.cohort_size,
        "init_batches": algo.init_batches,
        "reparameterized": algo.reparameterized,
    }


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


@dataclass
class ReplicaResult:
    replica: int
    reports: list
    state: ServerState | None = None
    controls: ClientControls | None = None
    divergence: DivergenceError | None = None


@dataclass
class RunResult:
    cfg: RunConfig
    problem: FederatedProblem
    algo: AlgoConfig
    schedule: Schedule | None
    replicas: list = field(default_factory=list)

    @property
    def diverged(self) -> list:
        return [r for r in self.replicas if r.divergence is not None]


def _run_replica(problem, algo, x0, rounds, streams, executor=None, start=None) -> ReplicaResult:
    reports: list[RoundReport] = []

    def sink(rep: RoundReport):
        reports.append(rep)

    result = ReplicaResult(streams.replica, reports)
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            traj = run_experiment(problem, algo, x0, rounds, streams, sink=sink, executor=executor, start=start)
        except DivergenceError as exc:
            result.divergence = exc
            return result
    result.state, result.controls = traj.state, traj.controls
    return result


def execute(cfg: RunConfig) -> RunResult:
    """Run every replica of ``cfg`` in memory; no files are touched."""
    problem = build_problem(cfg)
    x0 = start_point(cfg, problem)
    algo, schedule = resolve_algo(cfg, problem, x0)
    seed, rounds, n_rep = cfg.run["seed"], cfg.run["rounds"], cfg.run["replicas"]
    threads = worker_count()
    result = RunResult(cfg, problem, algo, schedule)
    pool = ThreadPoolExecutor(threads) if threads > 0 else None
    try:
        if n_rep == 1:
            result.replicas = [_run_replica(problem, algo, x0, rounds, StreamSource(seed, 0),
                                            executor=pool)]
        else:
            def one(rep: int) -> ReplicaResult:
                return _run_replica(problem, algo, x0, rounds, StreamSource(seed, rep))
            reps = range(n_rep)
            result.replicas = list(pool.map(one, reps)) if pool else [one(r) for r in reps]
    finally:
        if pool is not None:
            pool.shutdown()
    return result


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def report_row(rep: RoundReport, record_timing: bool = False) -> list[str]:
    return [
        str(rep.round), _fmt(rep.loss), _fmt(rep.grad_norm_sq), _fmt(rep.est_err),
        _fmt(rep.client_drift), _fmt(rep.control_residual),
        _fmt(rep.wall_ms) if record_timing else "",
    ]


def csv_text(reports, record_timing: bool = False, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(CSV_HEADER)
    for rep in reports:
        w.writerow(report_row(rep, record_timing))
    return buf.getvalue()


def mean_rows(replicas: list) -> list[dict]:
    """Per-round replica means and standard errors over rounds every replica completed."""
    n_rounds = min(len(r.reports) for r in replicas)
    if n_rounds == 0:
        return []
    has_residual = replicas[0].reports[0].control_residual is not None
    rows = []
    for k in range(n_rounds):
        row = {"round": replicas[0].reports[k].round}
        for m in METRICS:
            if m == "control_residual" and not has_residual:
                row[m] = row[m + "_se"] = None
                continue
            mean, se = replica_mean(np.array([getattr(r.reports[k], m) for r in replicas]))
            row[m], row[m + "_se"] = float(mean), float(se)
        rows.append(row)
    return rows


def mean_csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    se_cols = [m + "_se" for m in METRICS]
    w.writerow(list(CSV_HEADER) + se_cols)
    for row in rows:
        w.writerow([str(row["round"])] + [_fmt(row[m]) for m in METRICS] + [""]
                   + [_fmt(row[c]) for c in se_cols])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# summary
# ---------------------------------------------------------------------------


def _invariants(result: RunResult, rep: ReplicaResult) -> dict:
    out = {}
    finite = all(
        all(getattr(r, m) is None or (np.isfinite(getattr(r, m)) and getattr(r, m) >= 0)
            for m in ("grad_norm_sq", "est_err", "client_drift", "control_residual"))
        for r in rep.reports
    )
    out["metrics_finite_nonnegative"] = "pass" if finite else "fail"
    L = result.problem.smoothness
    gamma = result.algo.direct_gamma
    if gamma * L <= (1 / 24) * (1 + 1e-12):
        bad = descent_violations(rep.reports, gamma, L)
        out["descent"] = "pass" if not bad else f"fail ({len(bad)} rounds)"
    else:
        out["descent"] = "not applicable (gamma*L > 1/24)"
    if result.algo.variant.is_scaffold and rep.state is not None:
        c_i = rep.controls.c_i
        gap = float(np.linalg.norm(rep.state.c - rep.controls.mean()))
        tol = 1e-12 * (1 + float(np.linalg.norm(c_i, axis=1).max()))
        out["control_mean"] = "pass" if gap <= tol else f"fail (gap {gap:g})"
    return out


def summarize(result: RunResult, extra: dict | None = None) -> dict:
    cfg = result.cfg
    if len(result.replicas) == 1:
        series = {m: [getattr(r, m) for r in result.replicas[0].reports] for m in METRICS}
    else:
        rows = mean_rows(result.replicas)
        series = {m: [row[m] for row in rows] for m in METRICS}
    gns = np.array(series["grad_norm_sq"], dtype=float)
    metrics = {
        "rounds_completed": int(gns.size),
        "mean_grad_norm_sq": float(gns.mean()) if gns.size else None,
        "min_grad_norm_sq": float(gns.min()) if gns.size else None,
        "final_grad_norm_sq": float(gns[-1]) if gns.size else None,
        "final_loss": float(series["loss"][-1]) if gns.size else None,
    }
    if len(result.replicas) > 1:
        metrics["replica_final_grad_norm_sq"] = [
            r.reports[-1].grad_norm_sq if r.reports else None for r in result.replicas
        ]
    divergence = [
        {"replica": r.replica, "round": r.divergence.round, "client": r.divergence.client,
         "step": r.divergence.step}
        for r in result.diverged
    ]
    doc = {
        "fedmom_version": __version__,
        "numpy_version": np.__version__,
        "seeds": {"run": cfg.run["seed"], "problem": cfg.problem["seed"],
                  "replicas": list(range(cfg.run["replicas"]))},
        "config": cfg.to_dict(),
        "problem": {"kind": result.problem.kind, "smoothness": result.problem.smoothness,
                    "sigma": result.problem.sigma, "f_star": result.problem.f_star,
                    "digest": problem_digest(result.problem)},
        "algo": algo_to_dict(result.algo),
        "schedule": None if result.schedule is None else result.schedule.to_dict(),
        "outside_theory": result.algo.outside_theory(result.problem.n_clients),
        "metrics": metrics,
        "invariants": {f"replica_{r.replica}": _invariants(result, r) for r in result.replicas},
        "divergence": divergence or None,
    }
    if extra:
        doc.update(extra)
    return doc


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_doc(cfg, problem, algo, state, controls, streams) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "round": state.round,
        "x": _enc(state.x),
        "g": _enc(state.g),
        "c": None if state.c is None else _enc(state.c),
        "c_i": None if controls is None else _enc(controls.c_i),
        "prev_x": _enc(state.prev_x),
        "rng_state": streams.state(),
        "algo": {k: (_enc(v) if isinstance(v, float) else v) for k, v in algo_to_dict(algo).items()},
        "config": cfg.to_dict(),
        "problem_digest": problem_digest(problem),
    }


def load_checkpoint(doc: dict) -> tuple[RunConfig, AlgoConfig, ServerState, ClientControls | None, StreamSource]:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError("checkpoint.version", f"unsupported checkpoint version {doc.get('version')!r}")
    cfg = RunConfig.from_dict(doc["config"])
    a = {k: (_dec(v) if isinstance(v, str) and k in ("eta", "gamma", "beta") else v)
         for k, v in doc["algo"].items()}
    algo = AlgoConfig(**a)
    c = None if doc["c"] is None else _dec(doc["c"])
    state = ServerState(_dec(doc["x"]), _dec(doc["g"]), _dec(doc["prev_x"]), c, int(doc["round"]))
    controls = None if doc["c_i"] is None else ClientControls(_dec(doc["c_i"]))
    return cfg, algo, state, controls, StreamSource.from_state(doc["rng_state"])


def checkpoint_path(template: str, round: int) -> Path:
    return Path(template.replace("{round}", str(round)))


def _write_json(path: Path, doc: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1) + "\n")
    tmp.replace(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def write_outputs(result: RunResult, extra: dict | None = None) -> None:
    out = result.cfg.output
    timing = out["record_timing"]
    Path(out["csv_path"]).write_text(csv_text(result.replicas[0].reports, timing))
    if len(result.replicas) > 1:
        Path(out["csv_path"] + ".mean").write_text(mean_csv_text(mean_rows(result.replicas)))
    _write_json(Path(out["summary_path"]), summarize(result, extra))


def run_config(cfg: RunConfig) -> tuple[int, RunResult | None]:
    """Execute ``cfg`` and write its outputs. Returns ``(exit_code, result)``."""
    t0 = time.perf_counter()
    try:
        result = _execute_with_checkpoints(cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG, None
    try:
        write_outputs(result)
        _final_checkpoint(result)
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO, result
    for r in result.diverged:
        log.error("replica %d diverged: %s", r.replica, r.divergence)
    log.info("run finished in %.2fs", time.perf_counter() - t0)
    return (EXIT_DIVERGED if result.diverged else EXIT_OK), result


def _execute_with_checkpoints(cfg: RunConfig) -> RunResult:
    template, every = cfg.output["checkpoint_path"], cfg.output["checkpoint_every"]
    if template is None or every == 0:
        return execute(cfg)
    # periodic checkpoints need the live state, so drive rounds in segments
    problem = build_problem(cfg)
    x0 = start_point(cfg, problem)
    algo, schedule = resolve_algo(cfg, problem, x0)
    streams = StreamSource(cfg.run["seed"], 0)
    threads = worker_count()
    pool = ThreadPoolExecutor(threads) if threads > 0 else None
    reports: list = []
    start = None
    rep = ReplicaResult(0, reports)
    try:
        target = 0
        while target < cfg.run["rounds"]:
            target = min(target + every, cfg.run["rounds"])
            seg = _run_replica(problem, algo, x0, target, streams, executor=pool, start=start)
            reports.extend(seg.reports)
            if seg.divergence is not None:
                rep.divergence = seg.divergence
                break
            start = (seg.state, seg.controls)
            rep.state, rep.controls = seg.state, seg.controls
            if target < cfg.run["rounds"]:
                doc = checkpoint_doc(cfg, problem, algo, seg.state, seg.controls, streams)
                try:
                    _write_json(checkpoint_path(template, target), doc)
                except OSError as exc:
                    raise _IOFailure(exc) from None
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(cfg, problem, algo, schedule, [rep])


class _IOFailure(Exception):
    pass


def _final_checkpoint(result: RunResult) -> None:
    template = result.cfg.output["checkpoint_path"]
    rep = result.replicas[0]
    if template is None or rep.state is None:
        return
    doc = checkpoint_doc(result.cfg, result.problem, result.algo, rep.state, rep.controls,
                         StreamSource(result.cfg.run["seed"], 0))
    _write_json(checkpoint_path(template, rep.state.round), doc)


def cmd_run(path: str | Path) -> int:
    try:
        cfg = load_config(path)
    except OSError as exc:
        log.error("cannot read config: %s", exc)
        return EXIT_IO
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    try:
        code, _ = run_config(cfg)
    except _IOFailure as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    return code


def sweep_output(path: str, axis: str, value: str) -> str:
    p = Path(path)
    return str(p.with_name(f"{p.stem}.{axis}={value}{p.suffix}"))


def cmd_sweep(path: str | Path, axis: str, values: list[str]) -> int:
    """One sub-run per value; combined long-format CSV at the base ``csv_path``."""
    try:
        base = load_config(path)
    except OSError as exc:
        log.error("cannot read config: %s", exc)
        return EXIT_IO
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    if axis not in SWEEP_AXES:
        log.error("config error: --axis must be one of %s", ", ".join(SWEEP_AXES))
        return EXIT_CONFIG
    if not values:
        log.error("config error: --values is empty")
        return EXIT_CONFIG
    section, key = SWEEP_AXES[axis]
    combined = io.StringIO()
    w = csv.writer(combined, lineterminator="\n")
    w.writerow(("axis_value",) + CSV_HEADER)
    runs = []
    worst = EXIT_OK
    for value in values:
        value = value.strip()
        entry = {"axis_value": value}
        try:
            cfg = base.with_value(f"{section}.{key}", value)
            cfg.output["csv_path"] = sweep_output(base.output["csv_path"], axis, value)
            cfg.output["summary_path"] = sweep_output(base.output["summary_path"], axis, value)
            cfg.output["checkpoint_path"] = None
            code, result = run_config(cfg)
        except ConfigError as exc:
            log.error("config error for %s=%s: %s", axis, value, exc)
            code, result = EXIT_CONFIG, None
        except _IOFailure as exc:
            log.error("I/O error for %s=%s: %s", axis, value, exc)
            code, result = EXIT_IO, None
        entry["exit_code"] = code
        if result is not None:
            timing = cfg.output["record_timing"]
            if len(result.replicas) == 1:
                for rep in result.replicas[0].reports:
                    w.writerow([value] + report_row(rep, timing))
            else:
                for row in mean_rows(result.replicas):
                    w.writerow([value, str(row["round"])] + [_fmt(row[m]) for m in METRICS] + [""])
            entry["metrics"] = summarize(result)["metrics"]
            entry["csv_path"] = cfg.output["csv_path"]
        runs.append(entry)
        worst = max(worst, code)
    try:
        Path(base.output["csv_path"]).write_text(combined.getvalue())
        _write_json(Path(base.output["summary_path"]),
                    {"fedmom_version": __version__, "axis": axis, "key": f"{section}.{key}",
                     "config": base.to_dict(), "runs": runs})
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    return worst


def _truncate_csv(path: Path, upto_round: int) -> str:
    """Header plus rows with ``round < upto_round`` from an existing CSV, if any."""
    if not path.exists():
        return ",".join(CSV_HEADER) + "\n"
    lines = path.read_text().splitlines(keepends=True)
    if not lines or lines[0].rstrip("\n") != ",".join(CSV_HEADER):
        raise ConfigError("output.csv_path", f"{path} does not carry the run CSV header")
    kept = [lines[0]]
    for line in lines[1:]:
        if int(line.split(",", 1)[0]) < upto_round:
            kept.append(line)
    return "".join(kept)


def cmd_resume(path: str | Path, rounds: int | None = None) -> int:
    """Continue from a checkpoint to ``rounds`` (default: the run's configured total).

    The CSV is cut back to the checkpoint round and the continuation appended,
    so the result matches an uninterrupted run byte for byte.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        log.error("cannot read checkpoint: %s", exc)
        return EXIT_IO
    try:
        cfg, algo, state, controls, streams = load_checkpoint(doc)
        if rounds is not None:
            if rounds < 1:
                raise ConfigError("rounds", "must be >= 1")
            cfg.run["rounds"] = rounds
        problem = build_problem(cfg)
        if problem_digest(problem) != doc["problem_digest"]:
            raise ConfigError("checkpoint.problem_digest", "regenerated problem does not match the checkpoint")
        csv_file = Path(cfg.output["csv_path"])
        head = _truncate_csv(csv_file, state.round)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (KeyError, TypeError, ValueError) as exc:
        log.error("malformed checkpoint: %s", exc)
        return EXIT_IO
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO

    threads = worker_count()
    pool = ThreadPoolExecutor(threads) if threads > 0 else None
    try:
        rep = _run_replica(problem, algo, None, cfg.run["rounds"], streams,
                           executor=pool, start=(state, controls))
    finally:
        if pool is not None:
            pool.shutdown()
    result = RunResult(cfg, problem, algo, None, [rep])
    try:
        csv_file.write_text(head + csv_text(rep.reports, cfg.output["record_timing"], header=False))
        _write_json(Path(cfg.output["summary_path"]),
                    summarize(result, {"resumed_from": {"checkpoint": str(path), "round": state.round}}))
        _final_checkpoint(result)
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    if rep.divergence is not None:
        log.error("diverged: %s", rep.divergence)
        return EXIT_DIVERGED
    return EXIT_OK
