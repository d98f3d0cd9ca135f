"""Round-based execution of FedAvg / SCAFFOLD with (variance-reduced) momentum.

All six variants share one loop. A round broadcasts the server state, runs
``K`` local steps on every cohort member, aggregates the model displacement
into the new server estimate ``g``, and takes the global step
``x <- x - gamma * g``. SCAFFOLD variants additionally refresh the control
variates of sampled clients.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigError, DivergenceError
from .problems import FederatedProblem, _draw, _grad, batch_mean_gradient
from .rng import StreamSource
from .sampling import Cohort, sample_cohort


class Variant(str, enum.Enum):
    FEDAVG = "fedavg"
    FEDAVG_M = "fedavg_m"
    FEDAVG_MVR = "fedavg_mvr"
    SCAFFOLD = "scaffold"
    SCAFFOLD_M = "scaffold_m"
    SCAFFOLD_MVR = "scaffold_mvr"

    @property
    def is_scaffold(self) -> bool:
        return self in (Variant.SCAFFOLD, Variant.SCAFFOLD_M, Variant.SCAFFOLD_MVR)

    @property
    def is_vr(self) -> bool:
        return self in (Variant.FEDAVG_MVR, Variant.SCAFFOLD_MVR)

    @property
    def pins_beta(self) -> bool:
        return self in (Variant.FEDAVG, Variant.SCAFFOLD)

    @property
    def needs_init_batches(self) -> bool:
        return self.is_vr or self.is_scaffold


@dataclass(frozen=True)
class AlgoConfig:
    variant: Variant
    eta: float
    gamma: float
    beta: float = 1.0
    local_steps: int = 16
    cohort_size: int | None = None  # None means every client
    init_batches: int = 1
    reparameterized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        v = self.variant
        if v.pins_beta and self.beta != 1.0:
            raise ConfigError("algo.beta", f"{v.value} pins beta=1")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("algo.beta", "beta must lie in (0, 1]")
        if self.beta == 0.0 and v not in (Variant.FEDAVG_M, Variant.SCAFFOLD_M):
            raise ConfigError("algo.beta", "beta=0 is only allowed for fedavg_m and scaffold_m")
        if not self.eta > 0:
            raise ConfigError("algo.eta", "eta must be > 0")
        if not self.gamma > 0:
            raise ConfigError("algo.gamma", "gamma must be > 0")
        if self.local_steps < 1:
            raise ConfigError("algo.local_steps", "local_steps must be >= 1")
        if self.cohort_size is not None and self.cohort_size < 1:
            raise ConfigError("algo.cohort", "cohort must be >= 1")
        if v.needs_init_batches and self.init_batches < 1:
            raise ConfigError("algo.init_batches", f"{v.value} needs init_batches >= 1")
        if self.reparameterized and v not in (Variant.FEDAVG_M, Variant.SCAFFOLD_M):
            raise ConfigError("algo.reparameterized", "only fedavg_m and scaffold_m can be reparameterized")
        if self.reparameterized and self.beta == 0.0:
            raise ConfigError("algo.reparameterized", "reparameterization needs beta > 0")

    @property
    def direct_gamma(self) -> float:
        """Global step in the un-hatted parameterization."""
        return self.gamma / self.beta if self.reparameterized else self.gamma

    def outside_theory(self, n_clients: int) -> list[str]:
        flags = []
        if self.beta == 0.0:
            flags.append("beta=0")
        s = self.cohort_size or n_clients
        if not self.variant.is_scaffold and s < n_clients:
            flags.append("partial participation for a FedAvg variant")
        return flags


def reparameterize(config: AlgoConfig) -> AlgoConfig:
    """Toggle between direct and hatted hyperparameters (eta^ = beta eta, gamma^ = beta gamma)."""
    if config.variant not in (Variant.FEDAVG_M, Variant.SCAFFOLD_M):
        raise ConfigError("algo.reparameterized", f"{config.variant.value} has no reparameterized form")
    b = config.beta
    if config.reparameterized:
        return replace(config, eta=config.eta / b, gamma=config.gamma / b, reparameterized=False)
    return replace(config, eta=config.eta * b, gamma=config.gamma * b, reparameterized=True)


@dataclass
class ServerState:
    x: np.ndarray
    g: np.ndarray
    prev_x: np.ndarray
    c: np.ndarray | None = None
    round: int = 0


@dataclass
class ClientControls:
    c_i: np.ndarray  # shape (N, d)

    def mean(self) -> np.ndarray:
        total = np.zeros(self.c_i.shape[1])
        for row in self.c_i:
            total += row
        return total / self.c_i.shape[0]


@dataclass(frozen=True)
class RoundReport:
    round: int
    cohort: Cohort
    loss: float
    grad_norm_sq: float
    est_err: float
    client_drift: float
    control_residual: float | None
    wall_ms: float
    next_loss: float = field(default=float("nan"), compare=False)


@dataclass
class ClientResult:
    x_end: np.ndarray
    new_c_i: np.ndarray | None
    drift_sq_sum: float
    local_path: list | None = None


def init_state(
    problem: FederatedProblem,
    config: AlgoConfig,
    x0: np.ndarray,
    streams: StreamSource,
) -> tuple[ServerState, ClientControls | None]:
    """Initial server state and client controls for ``config.variant``."""
    x0 = np.array(x0, dtype=float)
    if x0.shape != (problem.dim,):
        raise ConfigError("x0", f"dimension {x0.shape} does not match problem dim {problem.dim}")
    if not np.all(np.isfinite(x0)):
        raise ConfigError("x0", "x0 must be finite")
    v = config.variant
    n, d = problem.n_clients, problem.dim
    g = np.zeros(d)
    controls = None
    c = None
    if v.needs_init_batches:
        if config.init_batches < 1:
            raise ConfigError("algo.init_batches", "init_batches must be >= 1")
        means = np.empty((n, d))
        for i in range(n):
            means[i] = batch_mean_gradient(problem, i, x0, config.init_batches, streams.stream(0, i, "init"))
        avg = np.zeros(d)
        for row in means:
            avg += row
        avg /= n
        if v.is_scaffold:
            controls = ClientControls(means)
            c = avg.copy()
        if v.is_vr:
            g = avg.copy()
    return ServerState(x0.copy(), g, x0.copy(), c, 0), controls


def local_direction(
    variant: Variant,
    beta: float,
    grad_fresh: np.ndarray,
    grad_anchor: np.ndarray | None,
    g_server: np.ndarray,
    c_i: np.ndarray | None,
    c: np.ndarray | None,
    reparameterized: bool = False,
) -> np.ndarray:
    """Local update direction for one step of ``variant``."""
    if variant in (Variant.FEDAVG, Variant.FEDAVG_M):
        if reparameterized:
            return grad_fresh + (1 - beta) * g_server
        return beta * grad_fresh + (1 - beta) * g_server
    if variant is Variant.FEDAVG_MVR:
        return grad_fresh + (1 - beta) * (g_server - grad_anchor)
    if variant in (Variant.SCAFFOLD, Variant.SCAFFOLD_M):
        if reparameterized:
            return (grad_fresh - c_i + c) + (1 - beta) * g_server
        return beta * (grad_fresh - c_i + c) + (1 - beta) * g_server
    return grad_fresh - beta * (c_i - c) + (1 - beta) * (g_server - grad_anchor)


def run_client(
    problem: FederatedProblem,
    client: int,
    x_start: np.ndarray,
    g_server: np.ndarray,
    c_i: np.ndarray | None,
    c: np.ndarray | None,
    config: AlgoConfig,
    rng: np.random.Generator,
    prev_x: np.ndarray | None = None,
    record_path: bool = False,
) -> ClientResult:
    """Run ``K`` local steps from ``x_start`` on one client."""
    v = config.variant
    if v.is_vr and prev_x is None:
        raise ValueError("variance-reduced variants need prev_x")
    obj = problem.clients[client]
    eta, beta, K = config.eta, config.beta, config.local_steps
    x = x_start.copy()
    drift = 0.0
    grad_sum = np.zeros(problem.dim) if v.is_scaffold else None
    path = [x.copy()] if record_path else None
    for k in range(K):
        if k:
            diff = x - x_start
            drift += float(diff @ diff)
        sample = _draw(obj, client, rng)
        fresh = _grad(obj, sample, x)
        anchor = _grad(obj, sample, prev_x) if v.is_vr else None
        if grad_sum is not None:
            grad_sum += fresh
        x = x - eta * local_direction(v, beta, fresh, anchor, g_server, c_i, c, config.reparameterized)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(client=client, step=k)
        if path is not None:
            path.append(x.copy())
    new_c_i = grad_sum / K if grad_sum is not None else None
    return ClientResult(x, new_c_i, drift, path)


def _aggregation_count(cohort_size: int, n_clients: int) -> int:
    return cohort_size


def run_round(
    state: ServerState,
    controls: ClientControls | None,
    problem: FederatedProblem,
    config: AlgoConfig,
    streams: StreamSource,
    executor=None,
) -> tuple[ServerState, ClientControls | None, RoundReport]:
    """Advance one communication round; inputs are left untouched."""
    t0 = time.perf_counter()
    v = config.variant
    n = problem.n_clients
    r = state.round
    s = config.cohort_size or n
    if s > n:
        raise ConfigError("algo.cohort", f"cohort {s} larger than the {n} clients")
    cohort = sample_cohort(n, s, streams.stream(r, 0, "cohort"), round=r)
    x = state.x

    def work(i: int) -> ClientResult:
        c_i = controls.c_i[i] if controls is not None else None
        return run_client(problem, i, x, state.g, c_i, state.c, config,
                          streams.stream(r, i, "local"), prev_x=state.prev_x)

    try:
        if executor is None:
            results = [work(i) for i in cohort.members]
        else:
            results = list(executor.map(work, cohort.members))
    except DivergenceError as exc:
        raise exc.at_round(r) from None

    K = config.local_steps
    displacement = np.zeros(problem.dim)
    drift = 0.0
    for res in results:
        displacement += x - res.x_end
        drift += res.drift_sq_sum
    g_new = displacement / (config.eta * _aggregation_count(len(cohort), n) * K)
    x_new = x - config.gamma * g_new
    if not np.all(np.isfinite(x_new)) or not np.all(np.isfinite(g_new)):
        raise DivergenceError(round=r)

    new_controls = controls
    c_new = state.c
    residual = None
    if v.is_scaffold:
        residual = 0.0
        for i in range(n):
            diff = controls.c_i[i] - problem.clients[i].gradient(state.prev_x)
            residual += float(diff @ diff)
        residual /= n
        c_i = controls.c_i.copy()
        delta = np.zeros(problem.dim)
        for i, res in zip(cohort.members, results):
            delta += res.new_c_i - controls.c_i[i]
            c_i[i] = res.new_c_i
        c_new = state.c + delta / n
        new_controls = ClientControls(c_i)

    grad = _global_gradient(problem, x)
    g_direct = config.beta * g_new if config.reparameterized else g_new
    err = grad - g_direct
    report = RoundReport(
        round=r,
        cohort=cohort,
        loss=_global_loss(problem, x),
        grad_norm_sq=float(grad @ grad),
        est_err=float(err @ err),
        client_drift=drift / (len(cohort) * K),
        control_residual=residual,
        wall_ms=(time.perf_counter() - t0) * 1e3,
        next_loss=_global_loss(problem, x_new),
    )
    if not all(math.isfinite(v) for v in (report.loss, report.grad_norm_sq, report.est_err,
                                             report.client_drift, report.next_loss)):
        raise DivergenceError(round=r)
    new_state = ServerState(x_new, g_new, x.copy(), c_new, r + 1)
    return new_state, new_controls, report


def _global_gradient(problem: FederatedProblem, x: np.ndarray) -> np.ndarray:
    total = np.zeros(problem.dim)
    for c in problem.clients:
        total += c.gradient(x)
    return total / problem.n_clients


def _global_loss(problem: FederatedProblem, x: np.ndarray) -> float:
    total = 0.0
    for c in problem.clients:
        total += c.loss(x)
    return total / problem.n_clients


def run_experiment(
    problem: FederatedProblem,
    config: AlgoConfig,
    x0: np.ndarray | None,
    rounds: int,
    streams: StreamSource,
    sink: Callable[[RoundReport], None] | None = None,
    executor=None,
    start: tuple[ServerState, ClientControls | None] | None = None,
) -> list[RoundReport]:
    """Run rounds until ``rounds`` total have completed.

    ``start`` resumes from a saved ``(state, controls)`` pair instead of
    initializing at ``x0``. The final state is available as the ``state``
    attribute of the returned list.
    """
    if rounds < 1:
        raise ConfigError("run.rounds", "rounds must be >= 1")
    if start is None:
        state, controls = init_state(problem, config, x0, streams)
    else:
        state, controls = start
    reports = Trajectory()
    while state.round < rounds:
        state, controls, report = run_round(state, controls, problem, config, streams, executor)
        reports.append(report)
        if sink is not None:
            sink(report)
    reports.state = state
    reports.controls = controls
    return reports


class Trajectory(list):
    """List of reports that also carries the final server state."""

    state: ServerState | None = None
    controls: ClientControls | None = None
