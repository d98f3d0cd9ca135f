"""Invariant suites behind ``fedmom validate``.

Each check is a plain function returning ``(ok, detail)``; keyword arguments
set the problem size so tests can run the same check at larger scale.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .diagnostics import descent_violations, finite_difference_gradient, heterogeneity_floor, rate_fit
from .engine import AlgoConfig, Variant, init_state, reparameterize, run_experiment, run_round
from .problems import (
    full_gradient,
    global_gradient,
    initial_constants,
    make_logistic_suite,
    make_quadratic_suite,
    problem_from_json,
    problem_to_json,
)
from .rng import StreamSource, rng_stream
from .sampling import exhaustive_subset_second_moment, subset_mean_second_moment
from .schedules import ScheduleInput, schedule_for

SCOPES = ("problems", "sampling", "engine", "schedules", "diagnostics", "harness")


@dataclass(frozen=True)
class CheckResult:
    scope: str
    name: str
    ok: bool
    detail: str
    seconds: float


def _quad(n=10, dim=10, hetero=1.0, sigma=1.0, seed=0, mu_min=0.1):
    return make_quadratic_suite(n, dim, hetero, 1.0, mu_min, sigma, seed)


# ---------------------------------------------------------------------------
# problems
# ---------------------------------------------------------------------------


def check_finite_differences(kind: str = "quadratic", pairs: int = 100, seed: int = 0, tol: float = 1e-6):
    """Central differences against analytic client gradients on random points."""
    if kind == "quadratic":
        problem = _quad(n=5, dim=8, seed=seed)
    else:
        problem = make_logistic_suite(5, 8, 20, 0.5, 1e-3, seed)
    rng = rng_stream(seed, 0, 0, "init", replica=7)
    worst = 0.0
    for _ in range(pairs):
        i = int(rng.integers(problem.n_clients))
        x = rng.standard_normal(problem.dim)
        g = full_gradient(problem, i, x)
        fd = finite_difference_gradient(problem, i, x)
        worst = max(worst, float(np.linalg.norm(fd - g) / np.linalg.norm(g)))
    return worst <= tol, f"max relative error {worst:.2e} over {pairs} pairs"


def check_problem_roundtrip():
    ok = True
    for problem in (_quad(n=3, dim=4), make_logistic_suite(3, 4, 6, 0.5, 1e-3, 0)):
        text = problem_to_json(problem)
        ok &= problem_to_json(problem_from_json(text)) == text
    return ok, "quadratic and logistic documents survive a JSON round trip unchanged"


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def check_subset_enumeration(max_clients: int = 6, sets: int = 50, dim: int = 3, seed: int = 0, tol: float = 1e-12):
    """Closed-form subset-mean second moment against exhaustive enumeration."""
    rng = rng_stream(seed, 0, 0, "init", replica=11)
    worst = 0.0
    cases = 0
    for n in range(1, max_clients + 1):
        for s in range(1, n + 1):
            for _ in range(sets):
                vecs = rng.standard_normal((n, dim)) * rng.uniform(0.1, 10)
                exact = exhaustive_subset_second_moment(vecs, s)
                closed = subset_mean_second_moment(vecs, s)
                worst = max(worst, abs(closed - exact) / max(abs(exact), 1e-300))
                cases += 1
    return worst <= tol, f"max relative gap {worst:.2e} over {cases} cases"


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------


def _csv_of(reports) -> str:
    from .harness import csv_text
    return csv_text(reports)


def check_reduction(rounds: int = 200, n: int = 10, local_steps: int = 16, seed: int = 0):
    """beta=1 momentum variants reproduce their base algorithms byte for byte."""
    problem = _quad(n=n, seed=seed)
    x0 = np.zeros(problem.dim)
    pairs = ((Variant.FEDAVG_M, Variant.FEDAVG, None), (Variant.SCAFFOLD_M, Variant.SCAFFOLD, n // 2))
    details = []
    ok = True
    for mom, base, cohort in pairs:
        texts = []
        for v in (mom, base):
            cfg = AlgoConfig(v, eta=0.01, gamma=1 / 24, beta=1.0, local_steps=local_steps,
                             cohort_size=cohort, init_batches=2)
            texts.append(_csv_of(run_experiment(problem, cfg, x0, rounds, StreamSource(seed))))
        same = texts[0] == texts[1]
        ok &= same
        details.append(f"{mom.value}={base.value}: {'identical' if same else 'DIFFER'}")
    return ok, "; ".join(details)


def check_control_mean(n: int = 20, cohort: int = 4, rounds: int = 300, seeds: int = 5, local_steps: int = 4):
    """Server control stays the mean of the client controls."""
    worst = 0.0
    for variant in (Variant.SCAFFOLD_M, Variant.SCAFFOLD_MVR):
        for seed in range(seeds):
            problem = _quad(n=n, dim=5, seed=seed)
            cfg = AlgoConfig(variant, eta=0.02, gamma=1 / 24, beta=0.3, local_steps=local_steps,
                             cohort_size=cohort, init_batches=2)
            streams = StreamSource(seed)
            state, controls = init_state(problem, cfg, np.zeros(problem.dim), streams)
            for _ in range(rounds):
                state, controls, _ = run_round(state, controls, problem, cfg, streams)
                gap = float(np.linalg.norm(state.c - controls.mean()))
                scale = 1 + float(np.linalg.norm(controls.c_i, axis=1).max())
                worst = max(worst, gap / scale)
    return worst <= 1e-12, f"max ||c - mean c_i|| / (1 + max ||c_i||) = {worst:.2e}"


def check_reparameterization(rounds: int = 100, seed: int = 0, beta: float = 0.3, tol: float = 1e-9):
    """Direct and hatted parameterizations produce the same iterates."""
    problem = _quad(seed=seed)
    x0 = np.zeros(problem.dim)
    worst = 0.0
    for variant, cohort in ((Variant.FEDAVG_M, None), (Variant.SCAFFOLD_M, 5)):
        direct = AlgoConfig(variant, eta=0.01, gamma=1 / 24, beta=beta, local_steps=8,
                            cohort_size=cohort, init_batches=2)
        hatted = reparameterize(direct)
        xs = []
        for cfg in (direct, hatted):
            streams = StreamSource(seed)
            state, controls = init_state(problem, cfg, x0, streams)
            path = []
            for _ in range(rounds):
                state, controls, _ = run_round(state, controls, problem, cfg, streams)
                path.append(state.x)
            xs.append(path)
        for a, b in zip(*xs):
            worst = max(worst, float(np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-300)))
    return worst <= tol, f"max relative iterate gap {worst:.2e}"


def check_vr_telescoping(rounds: int = 100, seed: int = 0):
    """Noiseless single-step FedAvg-M-VR tracks the exact gradient."""
    problem = _quad(sigma=0.0, seed=seed)
    cfg = AlgoConfig(Variant.FEDAVG_MVR, eta=0.05, gamma=1 / 24, beta=0.3, local_steps=1, init_batches=1)
    reports = run_experiment(problem, cfg, np.ones(problem.dim), rounds, StreamSource(seed))
    worst = max(r.est_err for r in reports[1:])
    return worst <= 1e-20, f"max est_err after round 1 = {worst:.2e}"


def check_scaffold_fixed_point(rounds: int = 50, seed: int = 0):
    """Noiseless SCAFFOLD with exact controls stays at the minimizer."""
    problem = _quad(sigma=0.0, seed=seed)
    cfg = AlgoConfig(Variant.SCAFFOLD, eta=0.05, gamma=1 / 24, local_steps=8, cohort_size=5, init_batches=1)
    x_star = np.array(problem.minimizer)
    traj = run_experiment(problem, cfg, x_star, rounds, StreamSource(seed))
    gap = float(np.linalg.norm(traj.state.x - x_star))
    return gap <= 1e-10 * (1 + float(np.linalg.norm(x_star))), f"||x^R - x*|| = {gap:.2e}"


def check_cohort_unbiasedness(n: int = 5, cohort: int = 2, seed: int = 0):
    """Noiseless one-step SCAFFOLD: the aggregate over every equally likely cohort averages to grad f.

    Cohorts come from the engine's own sampler; seeds are scanned until each of
    the C(n, cohort) subsets has been seen once.
    """
    problem = _quad(n=n, sigma=0.0, seed=seed)
    cfg = AlgoConfig(Variant.SCAFFOLD, eta=0.05, gamma=1 / 24, local_steps=1, cohort_size=cohort, init_batches=1)
    x0 = np.full(problem.dim, 0.5)
    state, controls = init_state(problem, cfg, x0, StreamSource(seed))
    # perturb controls so c_i differ from the local gradients while c stays their mean
    rng = rng_stream(seed, 0, 0, "init", replica=13)
    c_i = controls.c_i + rng.standard_normal(controls.c_i.shape)
    controls = replace(controls, c_i=c_i)
    state = replace(state, c=controls.mean())
    wanted = math.comb(n, cohort)
    seen = {}
    for s in range(50 * wanted):
        new_state, _, rep = run_round(state, controls, problem, cfg, StreamSource(s))
        seen.setdefault(rep.cohort.members, new_state.g)
        if len(seen) == wanted:
            break
    if len(seen) < wanted:
        return False, f"only {len(seen)} of {wanted} cohorts observed"
    mean_g = sum(seen[k] for k in sorted(seen)) / wanted
    grad = global_gradient(problem, x0)
    gap = float(np.linalg.norm(mean_g - grad))
    return gap <= 1e-10 * (1 + float(np.linalg.norm(grad))), f"||E_S g - grad f|| = {gap:.2e} over {wanted} cohorts"


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


def check_schedule_preconditions():
    """Every produced schedule meets its own preconditions; beta never grows with sigma."""
    bad = []
    count = 0
    for variant in Variant:
        for n, k, r, s in itertools.product((4, 20), (1, 16), (10, 1000), (1, 4)):
            betas = []
            for sigma in (0.0, 0.1, 1.0, 10.0):
                inp = ScheduleInput(n, k, r, 2.0, 3.0, sigma, 5.0, cohort_size=min(s, n))
                for alt in (False, True):
                    sch = schedule_for(variant, inp, alt=alt)
                    count += 1
                    L = inp.smoothness
                    if not (0 < sch.beta <= 1 and sch.gamma * L <= 1 / 24 + 1e-15 and sch.eta > 0):
                        bad.append((variant.value, n, k, r, s, sigma, alt))
                    if variant in (Variant.FEDAVG, Variant.FEDAVG_M) and sch.gamma * L > sch.beta / 6 + 1e-15:
                        bad.append((variant.value, n, k, r, s, sigma, alt))
                    if (variant.is_vr or variant.is_scaffold) and sch.init_batches < 1:
                        bad.append((variant.value, n, k, r, s, sigma, alt))
                betas.append(schedule_for(variant, inp).beta)
            if any(b2 > b1 for b1, b2 in zip(betas, betas[1:])):
                bad.append((variant.value, n, k, r, s, "beta increases with sigma"))
    return not bad, f"{count} schedules checked, {len(bad)} violations" + (f": {bad[:3]}" if bad else "")


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def scheduled_config(variant: Variant, problem, x0, rounds: int, local_steps: int = 8, cohort: int | None = None):
    consts = initial_constants(problem, x0)
    inp = ScheduleInput(problem.n_clients, local_steps, rounds, problem.smoothness, consts["delta"],
                        problem.sigma, consts["g0_energy"], cohort_size=cohort)
    sch = schedule_for(variant, inp)
    return AlgoConfig(variant, eta=sch.eta, gamma=sch.gamma, beta=sch.beta, local_steps=local_steps,
                      cohort_size=cohort if variant.is_scaffold else None,
                      init_batches=max(1, sch.init_batches))


def check_descent(seeds: int = 2, rounds: int = 100, n: int = 10, local_steps: int = 8):
    """One-round descent inequality on every round of every variant."""
    total = 0
    violations = 0
    for variant in Variant:
        for seed in range(seeds):
            problem = _quad(n=n, seed=seed)
            x0 = np.ones(problem.dim)
            cfg = scheduled_config(variant, problem, x0, rounds, local_steps, cohort=n // 2)
            reports = run_experiment(problem, cfg, x0, rounds, StreamSource(seed))
            violations += len(descent_violations(reports, cfg.gamma, problem.smoothness))
            total += len(reports)
    return violations == 0, f"{violations} violations in {total} rounds"


def check_rate_fit():
    xs = np.array([64.0, 128.0, 256.0, 512.0])
    worst = max(abs(rate_fit(xs, 3.7 * xs ** p) - p) for p in (-2.0, -1.0, -0.5, 0.25))
    return worst <= 1e-10, f"max exponent error {worst:.2e}"


def check_homogeneous_floor():
    problem = make_quadratic_suite(6, 8, 0.0, 1.0, 0.1, 0.0, 0)
    cfg = AlgoConfig(Variant.FEDAVG, eta=0.05, gamma=0.5, local_steps=8)
    floor = heterogeneity_floor(problem, cfg, 400)
    return floor <= 1e-16, f"terminal ||grad f||^2 = {floor:.2e} with identical clients"


# ---------------------------------------------------------------------------
# harness
# ---------------------------------------------------------------------------


def check_parallel_determinism(rounds: int = 30, seed: int = 0):
    """Client-level thread parallelism leaves the trajectory unchanged."""
    problem = _quad(seed=seed)
    cfg = AlgoConfig(Variant.SCAFFOLD_MVR, eta=0.01, gamma=1 / 24, beta=0.3, local_steps=4,
                     cohort_size=5, init_batches=2)
    x0 = np.zeros(problem.dim)
    serial = _csv_of(run_experiment(problem, cfg, x0, rounds, StreamSource(seed)))
    with ThreadPoolExecutor(4) as pool:
        threaded = _csv_of(run_experiment(problem, cfg, x0, rounds, StreamSource(seed), executor=pool))
    return serial == threaded, "serial and 4-thread CSV " + ("identical" if serial == threaded else "DIFFER")


def check_checkpoint_resume(rounds: int = 40, split: int = 17, seed: int = 0):
    """A JSON checkpoint round trip continues the exact trajectory."""
    from .config import RunConfig
    from .harness import checkpoint_doc, load_checkpoint

    problem = _quad(seed=seed)
    x0 = np.zeros(problem.dim)
    ok = True
    for variant in (Variant.FEDAVG_MVR, Variant.SCAFFOLD_M):
        cfg = AlgoConfig(variant, eta=0.01, gamma=1 / 24, beta=0.3, local_steps=4, cohort_size=5 if
                         variant.is_scaffold else None, init_batches=2)
        streams = StreamSource(seed)
        full = run_experiment(problem, cfg, x0, rounds, streams)
        head = run_experiment(problem, cfg, x0, split, streams)
        doc = json.loads(json.dumps(checkpoint_doc(RunConfig.from_dict({}), problem, cfg, head.state,
                                                   head.controls, streams)))
        _, algo, state, controls, streams2 = load_checkpoint(doc)
        tail = run_experiment(problem, algo, None, rounds, streams2, start=(state, controls))
        ok &= _csv_of(list(head) + list(tail)) == _csv_of(full)
        ok &= bool(np.array_equal(tail.state.x, full.state.x))
    return ok, "resumed trajectories " + ("match" if ok else "DIFFER from") + " uninterrupted runs bit for bit"


def check_rng_moments(streams: int = 64, total: int = 1_000_000):
    """Uniform draws pooled over many streams have the right mean and variance."""
    per = total // streams
    draws = np.concatenate([rng_stream(0, r, i, "local").random(per)
                            for r, i in itertools.product(range(8), range(streams // 8))])
    n = draws.size
    mean_gap = abs(draws.mean() - 0.5)
    var_gap = abs(draws.var() - 1 / 12)
    # variance of a single (u - 1/2)^2 term is 1/180
    ok = mean_gap <= 3 * math.sqrt(1 / 12 / n) and var_gap <= 3 * math.sqrt(1 / 180 / n)
    same = np.array_equal(rng_stream(5, 1, 2, "local").random(4), rng_stream(5, 1, 2, "local").random(4))
    split = not np.array_equal(rng_stream(5, 1, 2, "local").random(4), rng_stream(5, 1, 2, "init").random(4))
    return ok and same and split, f"|mean-1/2|={mean_gap:.1e}, |var-1/12|={var_gap:.1e}, n={n}"


CHECKS: dict[str, list[tuple[str, Callable[[], tuple[bool, str]]]]] = {
    "problems": [
        ("finite differences (quadratic)", lambda: check_finite_differences("quadratic")),
        ("finite differences (logistic)", lambda: check_finite_differences("logistic")),
        ("problem JSON round trip", check_problem_roundtrip),
    ],
    "sampling": [
        ("subset second moment vs enumeration", check_subset_enumeration),
    ],
    "engine": [
        ("beta=1 reductions", check_reduction),
        ("control-mean identity", lambda: check_control_mean(rounds=100, seeds=2)),
        ("reparameterization equivalence", check_reparameterization),
        ("VR telescoping", check_vr_telescoping),
        ("SCAFFOLD fixed point", check_scaffold_fixed_point),
        ("SCAFFOLD cohort unbiasedness", check_cohort_unbiasedness),
    ],
    "schedules": [
        ("schedule preconditions", check_schedule_preconditions),
    ],
    "diagnostics": [
        ("descent inequality", check_descent),
        ("rate_fit exact power laws", check_rate_fit),
        ("homogeneous drift floor", check_homogeneous_floor),
    ],
    "harness": [
        ("thread-count determinism", check_parallel_determinism),
        ("checkpoint resume", check_checkpoint_resume),
        ("rng stream moments", check_rng_moments),
    ],
}


def run_checks(scope: str = "all") -> list[CheckResult]:
    if scope != "all" and scope not in CHECKS:
        raise ValueError(f"unknown scope {scope!r}; choose all or one of {', '.join(SCOPES)}")
    scopes = SCOPES if scope == "all" else (scope,)
    results = []
    for sc in scopes:
        for name, fn in CHECKS[sc]:
            t0 = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing check is a failing check
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(CheckResult(sc, name, bool(ok), detail, time.perf_counter() - t0))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max((len(r.name) for r in results), default=4)
    lines = [f"{'scope':<12} {'check':<{width}}  result  time    detail"]
    for r in results:
        lines.append(f"{r.scope:<12} {r.name:<{width}}  {'PASS' if r.ok else 'FAIL':<6}  "
                     f"{r.seconds:5.1f}s  {r.detail}")
    passed = sum(r.ok for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines)
