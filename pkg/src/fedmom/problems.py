"""Synthetic heterogeneous federated objectives with exact and stochastic oracles.

Two families are provided:

* quadratic clients ``f_i(x) = 1/2 (x - b_i)^T A_i (x - b_i)`` with additive
  Gaussian gradient noise, ``F(x; xi) = f_i(x) + xi^T x``;
* l2-regularized logistic regression clients whose stochastic gradient is a
  single uniformly drawn data row.

A :class:`SampleRef` freezes one draw of ``xi`` so the same sample can be
evaluated at several points, which the variance-reduced directions need.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .rng import rng_stream

PROBLEM_VERSION = 1


class ProblemError(ValueError):
    """Invalid problem construction or oracle call."""


@dataclass(frozen=True, eq=False)
class QuadraticClient:
    matrix: np.ndarray
    offset: np.ndarray
    noise_sigma: float

    @property
    def dim(self) -> int:
        return self.offset.shape[0]

    def loss(self, x: np.ndarray) -> float:
        r = x - self.offset
        return 0.5 * float(r @ (self.matrix @ r))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ (x - self.offset)

    def smoothness(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[-1])


@dataclass(frozen=True, eq=False)
class LogisticClient:
    features: np.ndarray
    labels: np.ndarray
    reg: float

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def loss(self, x: np.ndarray) -> float:
        z = self.features @ x
        # log(1 + e^z) - y z, computed stably
        per_row = np.logaddexp(0.0, z) - self.labels * z
        return float(per_row.mean()) + 0.5 * self.reg * float(x @ x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        z = self.features @ x
        resid = _sigmoid(z) - self.labels
        return (self.features.T @ resid) / len(self.labels) + self.reg * x

    def row_gradient(self, row: int, x: np.ndarray) -> np.ndarray:
        a = self.features[row]
        return (_sigmoid_scalar(float(a @ x)) - self.labels[row]) * a + self.reg * x

    def smoothness(self) -> float:
        row_sq = np.einsum("ij,ij->i", self.features, self.features)
        return 0.25 * float(row_sq.max()) + self.reg


Client = Union[QuadraticClient, LogisticClient]


@dataclass(frozen=True, eq=False)
class SampleRef:
    """One drawn sample: a noise vector (quadratic) or a row index (logistic)."""

    client: int
    noise: np.ndarray | None = None
    row: int | None = None


@dataclass(frozen=True, eq=False)
class FederatedProblem:
    clients: tuple
    dim: int
    smoothness: float
    sigma: float
    minimizer: np.ndarray | None = None
    f_star: float | None = None

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    @property
    def kind(self) -> str:
        return "quadratic" if isinstance(self.clients[0], QuadraticClient) else "logistic"


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _sigmoid_scalar(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def _check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise ProblemError(f"{name} must be finite")


def _check_point(problem: FederatedProblem, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.dim,):
        raise ProblemError(f"point has shape {x.shape}, expected ({problem.dim},)")
    _check_finite("x", x)
    return x


def _check_client(problem: FederatedProblem, client: int) -> None:
    if not 0 <= client < problem.n_clients:
        raise ProblemError(f"client index {client} out of range [0, {problem.n_clients})")


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def quadratic_problem(
    matrices: Sequence[np.ndarray],
    offsets: Sequence[np.ndarray],
    sigma: float = 0.0,
) -> FederatedProblem:
    """Build a quadratic problem from explicit curvatures and offsets."""
    if len(matrices) == 0 or len(matrices) != len(offsets):
        raise ProblemError("need the same non-zero number of matrices and offsets")
    if not math.isfinite(sigma) or sigma < 0:
        raise ProblemError("sigma must be finite and >= 0")
    clients = []
    dim = None
    for A, b in zip(matrices, offsets):
        A = np.array(A, dtype=float)
        b = np.array(b, dtype=float)
        if dim is None:
            dim = b.shape[0]
        if dim == 0 or A.shape != (dim, dim) or b.shape != (dim,):
            raise ProblemError("inconsistent client dimensions")
        _check_finite("matrix", A)
        _check_finite("offset", b)
        if not np.allclose(A, A.T, rtol=0, atol=1e-12 * (1 + np.abs(A).max())):
            raise ProblemError("client matrix must be symmetric")
        A = 0.5 * (A + A.T)
        A.setflags(write=False)
        b.setflags(write=False)
        clients.append(QuadraticClient(A, b, float(sigma)))

    n = len(clients)
    total = sum(c.matrix for c in clients)
    rhs = sum(c.matrix @ c.offset for c in clients)
    x_star = np.linalg.lstsq(total, rhs, rcond=None)[0]
    # one refinement step against the residual tightens the stationarity gap
    resid = rhs - total @ x_star
    x_star = x_star + np.linalg.lstsq(total, resid, rcond=None)[0]
    x_star.setflags(write=False)
    L = max(c.smoothness() for c in clients)
    problem = FederatedProblem(tuple(clients), dim, L, float(sigma), x_star, None)
    f_star = global_loss(problem, x_star)
    return FederatedProblem(tuple(clients), dim, L, float(sigma), x_star, f_star)


def _random_orthogonal(rng: np.random.Generator, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def make_quadratic_suite(
    n_clients: int,
    dim: int,
    hetero_scale: float,
    l_target: float,
    mu_min: float,
    sigma: float,
    seed: int,
    shared_basis: bool = False,
) -> FederatedProblem:
    """Random quadratic clients with spectra in ``[mu_min, l_target]``.

    Offsets are ``b_i = m + hetero_scale * z_i`` with ``m, z_i ~ N(0, I)``, so
    ``hetero_scale = 0`` gives identical offsets. Client 0 has its top
    eigenvalue pinned at ``l_target``. With ``shared_basis`` every client gets
    the same curvature matrix and only the offsets differ.
    """
    for name, value in (("hetero_scale", hetero_scale), ("l_target", l_target),
                        ("mu_min", mu_min), ("sigma", sigma)):
        if not math.isfinite(value):
            raise ProblemError(f"{name} must be finite")
    if dim < 1:
        raise ProblemError("dim must be >= 1")
    if n_clients < 1:
        raise ProblemError("n_clients must be >= 1")
    if hetero_scale < 0 or sigma < 0 or mu_min < 0:
        raise ProblemError("hetero_scale, sigma and mu_min must be >= 0")
    if l_target <= 0 or mu_min > l_target:
        raise ProblemError("need 0 < l_target and mu_min <= l_target")

    rng = rng_stream(seed, 0, 0, "problem")

    def spectrum(pin_top: bool) -> np.ndarray:
        if mu_min > 0:
            eig = np.exp(rng.uniform(math.log(mu_min), math.log(l_target), dim))
        else:
            eig = rng.uniform(0.0, l_target, dim)
        if pin_top:
            eig[np.argmax(eig)] = l_target
        return eig

    matrices = []
    if shared_basis:
        q = _random_orthogonal(rng, dim)
        shared = (q * spectrum(True)) @ q.T
        matrices = [shared] * n_clients
    else:
        for i in range(n_clients):
            q = _random_orthogonal(rng, dim)
            matrices.append((q * spectrum(i == 0)) @ q.T)
    center = rng.standard_normal(dim)
    offsets = [center + hetero_scale * rng.standard_normal(dim) for _ in range(n_clients)]
    return quadratic_problem(matrices, offsets, sigma)


def make_logistic_suite(
    n_clients: int,
    dim: int,
    rows_per_client: int,
    skew_alpha: float,
    reg: float,
    seed: int,
) -> FederatedProblem:
    """Two-cluster Gaussian logistic regression with Dirichlet label skew.

    Client ``i`` receives a positive-label fraction ``p_i ~ Beta(alpha/2,
    alpha/2)`` (a two-class Dirichlet around the balanced global ratio), so
    small ``skew_alpha`` gives severely skewed clients.
    """
    if not (math.isfinite(skew_alpha) and skew_alpha > 0):
        raise ProblemError("skew_alpha must be finite and > 0")
    if rows_per_client < 1:
        raise ProblemError("rows_per_client must be >= 1")
    if dim < 1 or n_clients < 1:
        raise ProblemError("dim and n_clients must be >= 1")
    if not math.isfinite(reg) or reg < 0:
        raise ProblemError("reg must be finite and >= 0")

    rng = rng_stream(seed, 0, 0, "problem")
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    noise_scale = 1.0 / math.sqrt(dim)
    clients = []
    for _ in range(n_clients):
        p = rng.beta(skew_alpha / 2, skew_alpha / 2)
        n_pos = int(round(p * rows_per_client))
        labels = np.zeros(rows_per_client)
        labels[:n_pos] = 1.0
        rng.shuffle(labels)
        signs = 2.0 * labels - 1.0
        feats = signs[:, None] * direction + noise_scale * rng.standard_normal((rows_per_client, dim))
        feats.setflags(write=False)
        labels.setflags(write=False)
        clients.append(LogisticClient(feats, labels, float(reg)))
    L = max(c.smoothness() for c in clients)
    # per-row gradient deviation is bounded by the largest row norm
    sigma = max(float(np.sqrt(np.einsum("ij,ij->i", c.features, c.features).max())) for c in clients)
    return FederatedProblem(tuple(clients), dim, L, sigma, None, None)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def client_loss(problem: FederatedProblem, client: int, x: np.ndarray) -> float:
    _check_client(problem, client)
    return problem.clients[client].loss(_check_point(problem, x))


def full_gradient(problem: FederatedProblem, client: int, x: np.ndarray) -> np.ndarray:
    """Exact gradient of client ``client``'s local objective."""
    _check_client(problem, client)
    return problem.clients[client].gradient(_check_point(problem, x))


def draw_sample(problem: FederatedProblem, client: int, rng: np.random.Generator) -> SampleRef:
    _check_client(problem, client)
    return _draw(problem.clients[client], client, rng)


def _draw(c: Client, client: int, rng: np.random.Generator) -> SampleRef:
    if isinstance(c, QuadraticClient):
        if c.noise_sigma == 0.0:
            return SampleRef(client, noise=np.zeros(c.dim))
        return SampleRef(client, noise=rng.standard_normal(c.dim) * (c.noise_sigma / math.sqrt(c.dim)))
    n = len(c.labels)
    return SampleRef(client, row=0 if n == 1 else int(rng.integers(n)))


def grad_at(problem: FederatedProblem, client: int, sample: SampleRef, x: np.ndarray) -> np.ndarray:
    """Stochastic gradient for a fixed sample; deterministic in its arguments."""
    _check_client(problem, client)
    if sample.client != client:
        raise ProblemError(f"sample drawn for client {sample.client}, used for client {client}")
    return _grad(problem.clients[client], sample, _check_point(problem, x))


def _grad(c: Client, sample: SampleRef, x: np.ndarray) -> np.ndarray:
    if isinstance(c, QuadraticClient):
        return c.matrix @ (x - c.offset) + sample.noise
    return c.row_gradient(sample.row, x)


def batch_mean_gradient(
    problem: FederatedProblem, client: int, x: np.ndarray, batches: int, rng: np.random.Generator
) -> np.ndarray:
    """Average of ``batches`` independent stochastic gradients at ``x``."""
    _check_client(problem, client)
    if batches < 1:
        raise ProblemError("batches must be >= 1")
    x = _check_point(problem, x)
    c = problem.clients[client]
    if isinstance(c, QuadraticClient):
        grad = c.gradient(x)
        if c.noise_sigma == 0.0:
            return grad
        noise = rng.standard_normal((batches, c.dim)) * (c.noise_sigma / math.sqrt(c.dim))
        return grad + noise.mean(axis=0)
    n = len(c.labels)
    rows = np.zeros(batches, dtype=int) if n == 1 else rng.integers(n, size=batches)
    feats = c.features[rows]
    resid = _sigmoid(feats @ x) - c.labels[rows]
    return (feats.T @ resid) / batches + c.reg * x


def global_gradient(problem: FederatedProblem, x: np.ndarray) -> np.ndarray:
    x = _check_point(problem, x)
    total = np.zeros(problem.dim)
    for c in problem.clients:
        total += c.gradient(x)
    return total / problem.n_clients


def global_loss(problem: FederatedProblem, x: np.ndarray) -> float:
    x = _check_point(problem, x)
    total = 0.0
    for c in problem.clients:
        total += c.loss(x)
    return total / problem.n_clients


def measure_heterogeneity(problem: FederatedProblem, x: np.ndarray) -> float:
    """Mean squared deviation of client gradients from the global gradient."""
    x = _check_point(problem, x)
    grads = [c.gradient(x) for c in problem.clients]
    mean = np.zeros(problem.dim)
    for g in grads:
        mean += g
    mean /= len(grads)
    total = 0.0
    for g in grads:
        diff = g - mean
        total += float(diff @ diff)
    return total / len(grads)


def initial_constants(problem: FederatedProblem, x0: np.ndarray, f_star: float | None = None) -> dict:
    """Initial suboptimality ``delta`` and mean squared client gradient ``g0_energy``."""
    x0 = _check_point(problem, x0)
    if f_star is None:
        f_star = problem.f_star
    if f_star is None:
        raise ProblemError("f* is unknown for this problem; supply an estimate")
    g0 = 0.0
    for c in problem.clients:
        g = c.gradient(x0)
        g0 += float(g @ g)
    return {"delta": global_loss(problem, x0) - f_star, "g0_energy": g0 / problem.n_clients}


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _enc(a) -> list | str:
    if np.ndim(a) == 0:
        return repr(float(a))
    return [_enc(v) for v in a]


def _dec(v) -> np.ndarray | float:
    if isinstance(v, str):
        return float(v)
    return np.array([_dec(u) for u in v], dtype=float)


def problem_to_json(problem: FederatedProblem) -> str:
    """Lossless JSON document; floats are written as round-trip decimal strings."""
    if problem.kind == "quadratic":
        clients = [{"matrix": _enc(c.matrix), "offset": _enc(c.offset)} for c in problem.clients]
    else:
        clients = [
            {"features": _enc(c.features), "labels": _enc(c.labels), "reg": _enc(c.reg)}
            for c in problem.clients
        ]
    doc = {
        "problem_version": PROBLEM_VERSION,
        "kind": problem.kind,
        "dim": problem.dim,
        "smoothness": _enc(problem.smoothness),
        "sigma": _enc(problem.sigma),
        "minimizer": None if problem.minimizer is None else _enc(problem.minimizer),
        "f_star": None if problem.f_star is None else _enc(problem.f_star),
        "clients": clients,
    }
    return json.dumps(doc, indent=1)


def problem_from_json(text: str) -> FederatedProblem:
    doc = json.loads(text)
    if doc.get("problem_version") != PROBLEM_VERSION:
        raise ProblemError(f"unsupported problem_version {doc.get('problem_version')!r}")
    sigma = _dec(doc["sigma"])
    clients = []
    for entry in doc["clients"]:
        if doc["kind"] == "quadratic":
            A, b = _dec(entry["matrix"]), _dec(entry["offset"])
            A.setflags(write=False)
            b.setflags(write=False)
            clients.append(QuadraticClient(A, b, sigma))
        elif doc["kind"] == "logistic":
            F, y = _dec(entry["features"]), _dec(entry["labels"])
            F.setflags(write=False)
            y.setflags(write=False)
            clients.append(LogisticClient(F, y, _dec(entry["reg"])))
        else:
            raise ProblemError(f"unknown problem kind {doc['kind']!r}")
    minimizer = None if doc["minimizer"] is None else _dec(doc["minimizer"])
    f_star = None if doc["f_star"] is None else _dec(doc["f_star"])
    return FederatedProblem(tuple(clients), int(doc["dim"]), _dec(doc["smoothness"]), sigma, minimizer, f_star)
