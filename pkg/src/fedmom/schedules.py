"""Hyperparameter schedules (beta, gamma, eta, B) prescribed by the convergence theorems.

The local learning rate bounds hold up to unspecified absolute constants; we
evaluate the closed-form ``min{...}`` expression literally and multiply it by
``safety``. Divisions by zero inside a ``min`` (``sigma = 0`` or ``G0 = 0``)
are treated as ``+inf``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from .engine import Variant

INF = math.inf


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleInput:
    n_clients: int
    local_steps: int
    rounds: int
    smoothness: float
    delta: float
    sigma: float
    g0_energy: float
    cohort_size: int | None = None
    momentum_cap: float = 0.9
    safety: float = 0.1

    def __post_init__(self):
        for name in ("n_clients", "local_steps", "rounds", "smoothness", "delta"):
            value = getattr(self, name)
            if not value > 0 or not math.isfinite(value):
                raise ScheduleError(f"{name} must be positive and finite, got {value!r}")
        if self.sigma < 0 or self.g0_energy < 0:
            raise ScheduleError("sigma and g0_energy must be >= 0")
        if not 0 < self.momentum_cap <= 1:
            raise ScheduleError("momentum_cap must lie in (0, 1]")
        if not 0 < self.safety <= 1:
            raise ScheduleError("safety must lie in (0, 1]")
        s = self.cohort
        if not 1 <= s <= self.n_clients:
            raise ScheduleError(f"cohort_size {s} must lie in [1, {self.n_clients}]")

    @property
    def cohort(self) -> int:
        return self.n_clients if self.cohort_size is None else self.cohort_size


@dataclass(frozen=True)
class Schedule:
    beta: float
    gamma: float
    eta: float
    init_batches: int
    notes: dict = field(default_factory=dict)
    warnings: tuple = ()

    def to_dict(self) -> dict:
        return asdict(self)


def _div(num: float, den: float) -> float:
    if den == 0:
        return INF if num > 0 else 0.0
    return num / den


def _argmin(candidates: dict) -> tuple[float, str]:
    name = min(candidates, key=candidates.get)
    return candidates[name], name


def _ceil(value: float) -> int:
    # absorb representation error so an exact integer is not bumped up by one ulp
    return max(1, math.ceil(value * (1 - 1e-12)))


def _check(s: Schedule, L: float, needs_batches: bool) -> Schedule:
    if not 0 < s.beta <= 1:
        raise ScheduleError(f"beta={s.beta} outside (0, 1]")
    if s.gamma * L > 1 / 24 + 1e-15:
        raise ScheduleError(f"gamma*L={s.gamma * L} exceeds 1/24")
    if not s.eta > 0:
        raise ScheduleError("eta must be positive")
    if needs_batches and s.init_batches < 1:
        raise ScheduleError("init_batches must be >= 1")
    return s


def schedule_fedavg_m(inp: ScheduleInput, beta: float | None = None) -> Schedule:
    N, K, R, L = inp.n_clients, inp.local_steps, inp.rounds, inp.smoothness
    D, sig2, G0 = inp.delta, inp.sigma ** 2, inp.g0_energy
    notes = {}
    if beta is None:
        beta, notes["beta"] = _argmin({
            "momentum_cap": inp.momentum_cap,
            "sqrt(NKL*delta/(sigma^2 R))": math.sqrt(_div(N * K * L * D, sig2 * R)),
        })
    else:
        notes["beta"] = "fixed"
    gamma, notes["gamma"] = _argmin({"1/(24L)": 1 / (24 * L), "beta/(6L)": beta / (6 * L)})
    bound, notes["eta"] = _argmin({
        "1": 1.0,
        "1/(beta gamma L R)": _div(1.0, beta * gamma * L * R),
        "sqrt(L delta/(G0 beta^3 R))": math.sqrt(_div(L * D, G0 * beta ** 3 * R)),
        "1/sqrt(beta N)": _div(1.0, math.sqrt(beta * N)),
        "(beta^3 N K)^(-1/4)": _div(1.0, (beta ** 3 * N * K) ** 0.25),
    })
    eta = inp.safety * bound / (K * L)
    if gamma * L > beta / 6 + 1e-15:
        raise ScheduleError("gamma*L must not exceed beta/6")
    return _check(Schedule(beta, gamma, eta, 0, notes), L, needs_batches=False)


def schedule_fedavg_mvr(inp: ScheduleInput, beta: float | None = None, alt: bool = False) -> Schedule:
    N, K, R, L = inp.n_clients, inp.local_steps, inp.rounds, inp.smoothness
    D, sig4, G0 = inp.delta, inp.sigma ** 4, inp.g0_energy
    notes = {}
    noise_branch = _div(N * K * L ** 2 * D ** 2, sig4 * R ** 2) ** (1 / 3)
    if beta is None:
        first = ("1/R", 1 / R) if alt else ("momentum_cap", inp.momentum_cap)
        beta, notes["beta"] = _argmin({first[0]: first[1], "(NKL^2 delta^2/(sigma^4 R^2))^(1/3)": noise_branch})
    else:
        notes["beta"] = "fixed"
    gamma, notes["gamma"] = _argmin({
        "1/(24L)": 1 / (24 * L),
        "sqrt(beta N K/(54 L^2))": math.sqrt(beta * N * K / (54 * L ** 2)),
    })
    bound, notes["eta"] = _argmin({
        "sqrt(L delta/(G0 gamma L R))": math.sqrt(_div(L * D, G0 * gamma * L * R)),
        "sqrt(beta/N)": math.sqrt(beta / N),
        "(beta/(NK))^(1/4)": (beta / (N * K)) ** 0.25,
    })
    eta = inp.safety * bound / (K * L)
    if alt:
        batches = K * R
        notes["init_batches"] = "K*R"
    else:
        batches = fedavg_mvr_batches(K, R, beta)
        notes["init_batches"] = "ceil(K/(R beta^2))"
    return _check(Schedule(beta, gamma, eta, batches, notes), L, needs_batches=True)


def fedavg_mvr_batches(local_steps: int, rounds: int, beta: float) -> int:
    return _ceil(local_steps / (rounds * beta ** 2))


def schedule_scaffold_m(inp: ScheduleInput, beta: float | None = None) -> Schedule:
    N, K, R, L, S = inp.n_clients, inp.local_steps, inp.rounds, inp.smoothness, inp.cohort
    D, sig2, G0 = inp.delta, inp.sigma ** 2, inp.g0_energy
    notes = {}
    if beta is None:
        beta, notes["beta"] = _argmin({
            "momentum_cap": inp.momentum_cap,
            "S/N^(2/3)": S / N ** (2 / 3),
            "sqrt(L delta S K/(sigma^2 R))": math.sqrt(_div(L * D * S * K, sig2 * R)),
            "sqrt(L delta S^2/(G0 N))": math.sqrt(_div(L * D * S ** 2, G0 * N)),
        })
    else:
        notes["beta"] = "fixed"
    gamma, notes["gamma"] = beta / L, "beta/L"
    if gamma > 1 / (24 * L):
        gamma, notes["gamma"] = 1 / (24 * L), "clamped to 1/(24L)"
    bound, notes["eta"] = _argmin({
        "1/sqrt(S)": 1 / math.sqrt(S),
        "1/(beta K^(1/4))": _div(1.0, beta * K ** 0.25),
        "sqrt(S)/N": math.sqrt(S) / N,
    })
    eta = inp.safety * bound / (K * L)
    batches = scaffold_m_batches(N, K, S, R)
    notes["init_batches"] = "ceil(NK/(SR))"
    return _check(Schedule(beta, gamma, eta, batches, notes), L, needs_batches=True)


def scaffold_m_batches(n_clients: int, local_steps: int, cohort_size: int, rounds: int) -> int:
    return _ceil(n_clients * local_steps / (cohort_size * rounds))


def schedule_scaffold_mvr(inp: ScheduleInput, beta: float | None = None, alt: bool = False) -> Schedule:
    N, K, R, L, S = inp.n_clients, inp.local_steps, inp.rounds, inp.smoothness, inp.cohort
    D, sig2 = inp.delta, inp.sigma ** 2
    notes = {}
    warnings = []
    noise_branch = _div(K * L * D, sig2 * R) ** (2 / 3) * S ** (1 / 3)
    if beta is None:
        first = ("1/R", 1 / R) if alt else ("S/N", S / N)
        beta, notes["beta"] = _argmin({first[0]: first[1], "(KL delta/(sigma^2 R))^(2/3) S^(1/3)": noise_branch})
    else:
        notes["beta"] = "fixed"
    gamma, notes["gamma"] = _argmin({"1/L": 1 / L, "sqrt(beta S)/L": math.sqrt(beta * S) / L})
    if gamma > 1 / (24 * L):
        gamma, notes["gamma"] = 1 / (24 * L), "clamped to 1/(24L)"
    bound, notes["eta"] = _argmin({
        "sqrt(beta/S)": math.sqrt(beta / S),
        "(beta/(SK))^(1/4)": (beta / (S * K)) ** 0.25,
    })
    eta = inp.safety * bound / (K * L)
    if alt:
        batches = _ceil(S * K * R / N)
        notes["init_batches"] = "ceil(SKR/N)"
        if R < N / S:
            warnings.append(f"alternate branch expects R >~ N/S = {N / S:g}, got R = {R}")
    else:
        batches = scaffold_mvr_batches(N, K, S, R, beta)
        notes["init_batches"] = "ceil(max{SK/(NR beta^2), NK/(SR)})"
    return _check(Schedule(beta, gamma, eta, batches, notes, tuple(warnings)), L, needs_batches=True)


def scaffold_mvr_batches(n_clients: int, local_steps: int, cohort_size: int, rounds: int, beta: float) -> int:
    N, K, S, R = n_clients, local_steps, cohort_size, rounds
    return _ceil(max(S * K / (N * R * beta ** 2), N * K / (S * R)))


def schedule_for(variant: Variant | str, inp: ScheduleInput, beta: float | None = None, alt: bool = False) -> Schedule:
    """Dispatch to the schedule matching ``variant``; plain FedAvg/SCAFFOLD use beta=1."""
    v = Variant(variant)
    if v.pins_beta:
        beta = 1.0
    if v in (Variant.FEDAVG, Variant.FEDAVG_M):
        return schedule_fedavg_m(inp, beta)
    if v is Variant.FEDAVG_MVR:
        return schedule_fedavg_mvr(inp, beta, alt)
    if v in (Variant.SCAFFOLD, Variant.SCAFFOLD_M):
        return schedule_scaffold_m(inp, beta)
    return schedule_scaffold_mvr(inp, beta, alt)
