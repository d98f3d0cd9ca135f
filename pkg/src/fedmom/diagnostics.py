"""Exact-oracle measurements and numerical verification helpers."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .engine import AlgoConfig, RoundReport, Variant, run_experiment
from .problems import FederatedProblem, QuadraticClient, client_loss, global_gradient
from .rng import StreamSource


@dataclass(frozen=True)
class TrajectoryStats:
    loss: np.ndarray
    grad_norm_sq: np.ndarray
    est_err: np.ndarray
    client_drift: np.ndarray
    control_residual: np.ndarray | None

    @classmethod
    def from_reports(cls, reports: Sequence[RoundReport]) -> "TrajectoryStats":
        residual = None
        if reports and reports[0].control_residual is not None:
            residual = np.array([r.control_residual for r in reports])
        return cls(
            loss=np.array([r.loss for r in reports]),
            grad_norm_sq=np.array([r.grad_norm_sq for r in reports]),
            est_err=np.array([r.est_err for r in reports]),
            client_drift=np.array([r.client_drift for r in reports]),
            control_residual=residual,
        )

    @property
    def rounds(self) -> int:
        return len(self.loss)

    @property
    def mean_grad_norm_sq(self) -> float:
        return float(self.grad_norm_sq.mean())

    @property
    def min_grad_norm_sq(self) -> float:
        return float(self.grad_norm_sq.min())

    def rounds_to_threshold(self, tau: float) -> int | None:
        hits = np.nonzero(self.grad_norm_sq <= tau)[0]
        return int(hits[0]) if hits.size else None


def finite_difference_gradient(
    problem: FederatedProblem, client: int, x: np.ndarray, h: float | None = None
) -> np.ndarray:
    """Central-difference gradient of one client's local objective."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = 1e-5 * (1 + float(np.linalg.norm(x)))
    if not h > 0:
        raise ValueError("step h must be positive")
    out = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (client_loss(problem, client, x + e) - client_loss(problem, client, x - e)) / (2 * h)
    return out


def descent_check(
    f_prev: float, f_next: float, grad_norm_sq: float, est_err: float, gamma: float, L: float
) -> bool:
    """One-round sufficient-decrease inequality for a global step with ``gamma L <= 1/24``."""
    if gamma * L > 1 / 24 * (1 + 1e-12):
        warnings.warn(f"gamma*L = {gamma * L:g} > 1/24; descent inequality not applicable", stacklevel=2)
        return True
    tol = 1e-12 * (1 + abs(f_prev))
    return f_next <= f_prev - (11 * gamma / 24) * grad_norm_sq + (13 * gamma / 24) * est_err + tol


def descent_violations(reports: Sequence[RoundReport], gamma: float, L: float) -> list[int]:
    """Rounds whose ``next_loss`` breaks the descent inequality."""
    return [
        r.round for r in reports
        if not descent_check(r.loss, r.next_loss, r.grad_norm_sq, r.est_err, gamma, L)
    ]


def estimator_error(problem: FederatedProblem, x_r: np.ndarray, g_next: np.ndarray) -> float:
    diff = global_gradient(problem, x_r) - np.asarray(g_next, dtype=float)
    return float(diff @ diff)


def rate_fit(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size < 3 or xs.size != ys.size:
        raise ValueError("need at least 3 paired points")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("rate_fit needs positive values")
    lx, ly = np.log(xs), np.log(ys)
    lx_c = lx - lx.mean()
    return float((lx_c @ (ly - ly.mean())) / (lx_c @ lx_c))


def heterogeneity_floor(
    problem: FederatedProblem,
    config: AlgoConfig,
    rounds: int,
    x0: np.ndarray | None = None,
    seed: int = 0,
) -> float:
    """Terminal ``||grad f||^2`` of deterministic FedAvg with a constant local rate."""
    if problem.sigma != 0:
        raise ValueError("heterogeneity_floor needs a noiseless problem (sigma = 0)")
    if config.variant is not Variant.FEDAVG:
        raise ValueError("heterogeneity_floor runs plain FedAvg")
    if config.local_steps < 2:
        raise ValueError("client drift needs local_steps >= 2")
    if x0 is None:
        x0 = np.zeros(problem.dim)
    traj = run_experiment(problem, config, x0, rounds, StreamSource(seed))
    g = global_gradient(problem, traj.state.x)
    return float(g @ g)


def equal_energy_start(problem: FederatedProblem, energy: float = 1.0) -> np.ndarray:
    """Start point whose suboptimality is spread evenly over the Hessian eigenvectors.

    Each eigen-direction ``u_j`` of the (quadratic) global Hessian carries
    ``energy`` of initial suboptimality; this is the regime in which
    deterministic first-order methods decay like ``1/R`` on the gradient norm
    over a wide window of round counts.
    """
    if problem.minimizer is None or not isinstance(problem.clients[0], QuadraticClient):
        raise ValueError("equal_energy_start needs a quadratic problem")
    hess = sum(c.matrix for c in problem.clients) / problem.n_clients
    lam, vecs = np.linalg.eigh(hess)
    if lam[0] <= 0:
        raise ValueError("global Hessian must be positive definite")
    coeff = np.sqrt(2 * energy / lam)
    return problem.minimizer + vecs @ coeff


def replica_mean(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error across axis 0 (replicas)."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    mean = values.mean(axis=0)
    if n < 2:
        return mean, np.zeros_like(mean)
    return mean, values.std(axis=0, ddof=1) / math.sqrt(n)
