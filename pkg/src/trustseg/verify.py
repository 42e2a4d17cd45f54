"""Oracle and invariant suites behind ``trustseg verify``.

Each suite returns a :class:`SuiteResult`; nothing here raises on a failed
check, so a caller can report every suite before deciding on an exit code.
"""

from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .crf import (
    GridCRF,
    alpha_expansion,
    brute_force_minimizer,
    grid_pairs,
    potts_energy,
    stage_a_solve,
)
from .diffcore import Tape, Tensor
from .losses import (
    UNLABELED,
    NoiseModel,
    bilinear_potts_grid,
    ce,
    forward_corrected_ce,
    mixed_robust_kl,
    pce,
    robust_ce,
    uniform_transition,
)
from .maxflow import FlowGraph, brute_force_min_cut
from .metrics import miou
from .pixmap import read_pnm, write_pgm, write_ppm
from .trainer import micro_net_fn, verify_chainrule_decomposition

__all__ = [
    "SuiteResult",
    "random_flow_graph",
    "maxflow_suite",
    "random_potts_instance",
    "expansion_suite",
    "fd_relative_error",
    "GRADIENT_CASES",
    "gradcheck_suite",
    "chainrule_suite",
    "robust_loss_suite",
    "invariant_suite",
    "SUITES",
    "run_all",
]


@dataclass
class SuiteResult:
    name: str
    passed: bool
    checks: int
    detail: str = ""
    seconds: float = 0.0
    stats: dict = field(default_factory=dict)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: {self.checks} checks, {self.seconds:.2f}s {self.detail}".rstrip()


def _timed(name: str, fn: Callable[[], tuple[bool, int, str, dict]]) -> SuiteResult:
    t0 = time.perf_counter()
    ok, n, detail, stats = fn()
    return SuiteResult(name, ok, n, detail, time.perf_counter() - t0, stats)


# -- max-flow --------------------------------------------------------------------


def random_flow_graph(rng: np.random.Generator, max_nodes: int = 12, max_arcs: int = 40, max_cap: int = 10) -> FlowGraph:
    """Random s-t graph with integer capacities; terminal arcs count towards ``max_arcs``."""
    n = int(rng.integers(1, max_nodes + 1))
    g = FlowGraph()
    g.add_node(n)
    n_arcs = int(rng.integers(1, max_arcs + 1))
    for _ in range(n_arcs):
        kind = rng.random()
        cap = float(rng.integers(0, max_cap + 1))
        u = int(rng.integers(n))
        if kind < 0.2:
            g.add_tweights(u, cap, 0.0)
        elif kind < 0.4:
            g.add_tweights(u, 0.0, cap)
        elif n > 1:
            v = int(rng.integers(n - 1))
            v += v >= u
            g.add_edge(u, v, cap, 0.0)
    return g


def maxflow_suite(n_graphs: int = 1000, seed: int = 0) -> SuiteResult:
    """Solver value vs exhaustive min cut; cut certificate; BK vs Edmonds-Karp."""

    def run():
        rng = np.random.default_rng(seed)
        bad = []
        for t in range(n_graphs):
            g = random_flow_graph(rng)
            ek = g.copy()
            ek.algorithm = "ek"
            flow = g.solve()
            ref, _ = brute_force_min_cut(g)
            checks = (
                flow == ref,
                g.cut_capacity() == flow,
                ek.solve() == flow,
                g.conservation_violation() < 1e-9,
                g.capacity_violation() < 1e-9,
            )
            if not all(checks):
                bad.append(t)
        return not bad, n_graphs, f"mismatches={len(bad)}", {"failed": bad}

    return _timed("maxflow-brute-force", run)


# -- alpha-expansion ----------------------------------------------------------------


def random_potts_instance(rng: np.random.Generator, k: int, h: int = 3, w: int = 3) -> GridCRF:
    """8-connected Potts CRF with small integer unaries and weights (exact float energies)."""
    ei, ej = grid_pairs(h, w)
    weights = rng.integers(0, 6, size=len(ei)).astype(np.float64)
    unary = rng.integers(0, 11, size=(h * w, k)).astype(np.float64)
    return GridCRF(h, w, k, ei, ej, weights, unary=unary)


def expansion_suite(n_binary: int = 500, n_ternary: int = 500, seed: int = 0) -> SuiteResult:
    """K=2: exact optimum; K=3: within factor 2 always, exact on >= 90%."""

    def run():
        rng = np.random.default_rng(seed)
        bad2, bad3, exact3 = 0, 0, 0
        for k, n in ((2, n_binary), (3, n_ternary)):
            for _ in range(n):
                crf = random_potts_instance(rng, k)
                init = rng.integers(0, k, size=crf.n_pixels)
                log: list[float] = []
                s = alpha_expansion(crf, init, max_sweeps=50, energy_log=log)
                e = potts_energy(crf, s)
                opt, _ = brute_force_minimizer(crf)
                monotone = all(b <= a for a, b in zip(log, log[1:]))
                if k == 2:
                    bad2 += not (e == opt and monotone)
                else:
                    bad3 += not (e <= 2.0 * opt and monotone)
                    exact3 += e == opt
        frac = exact3 / max(n_ternary, 1)
        ok = bad2 == 0 and bad3 == 0 and frac >= 0.9
        detail = f"K=2 failures={bad2}, K=3 bound failures={bad3}, K=3 exact={frac:.3f}"
        return ok, n_binary + n_ternary, detail, {"k3_exact_fraction": frac}

    return _timed("alpha-expansion-brute-force", run)


# -- gradient checks ---------------------------------------------------------------


def fd_relative_error(fn: Callable[..., Tensor], arrays: list[np.ndarray], h: float = 1e-5) -> float:
    """Worst norm-wise relative error between reverse-mode and central differences."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape():
        out = fn(*leaves)
    dc.backward(out)
    worst = 0.0
    for idx, a in enumerate(arrays):
        num = np.zeros_like(a)
        for pos in np.ndindex(a.shape):
            vals = []
            for sign in (1.0, -1.0):
                args = [x.copy() for x in arrays]
                args[idx][pos] += sign * h
                vals.append(fn(*[Tensor(x) for x in args]).item())
            num[pos] = (vals[0] - vals[1]) / (2 * h)
        ad = leaves[idx].grad if leaves[idx].grad is not None else np.zeros_like(a)
        denom = max(np.linalg.norm(ad), np.linalg.norm(num), 1e-8)
        worst = max(worst, float(np.linalg.norm(ad - num) / denom))
    return worst


def _project(out: Tensor, rng_weights: np.ndarray) -> Tensor:
    """Random linear functional of a tensor output, to get a scalar."""
    return dc.tsum(dc.mul(out, rng_weights))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _case_unary(op):
    def make(rng):
        x = _away_from_zero(rng, (3, 4))
        r = rng.normal(size=(3, 4))
        return (lambda a: _project(op(a), r)), [x]

    return make


def _case_binary(op):
    def make(rng):
        x, y, r = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        return (lambda a, b: _project(op(a, b), r)), [x, y]

    return make


def _case_broadcast_add(rng):
    x, y, r = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(3, 4))
    return (lambda a, b: _project(dc.add(a, b), r)), [x, y]


def _case_log(rng):
    x, r = rng.uniform(0.2, 2.0, size=(3, 4)), rng.normal(size=(3, 4))
    return (lambda a: _project(dc.log(a), r)), [x]


def _case_clamp(rng):
    x = _away_from_zero(rng, (3, 4)) + 0.3
    r = rng.normal(size=(3, 4))
    return (lambda a: _project(dc.clamp_min(a, 0.3), r)), [x]


def _case_matmul(rng):
    x, y, r = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    return (lambda a, b: _project(dc.matmul(a, b), r)), [x, y]


def _case_sum_axis(rng):
    x, r = rng.normal(size=(3, 4)), rng.normal(size=3)
    return (lambda a: _project(dc.tsum(a, axis=1), r)), [x]


def _case_reshape_rows(rng):
    x, r = rng.normal(size=(3, 4)), rng.normal(size=(5, 2))
    idx = rng.integers(0, 6, size=5)
    return (lambda a: _project(dc.take_rows(dc.reshape(a, (6, 2)), idx), r)), [x]


def _case_pick(rng):
    x, lab = rng.normal(size=(2, 3, 4)), rng.integers(0, 4, size=(2, 3))
    mask = rng.random((2, 3)) < 0.7
    mask[0, 0] = True
    r = rng.normal(size=int(mask.sum()))
    return (lambda a: _project(dc.pick(a, lab, mask), r)), [x]


def _case_softmax(rng):
    x, r = rng.normal(size=(2, 3, 4)) * 2, rng.normal(size=(2, 3, 4))
    return (lambda a: _project(dc.softmax(a), r)), [x]


def _case_log_softmax(rng):
    x, r = rng.normal(size=(2, 3, 4)) * 2, rng.normal(size=(2, 3, 4))
    return (lambda a: _project(dc.log_softmax(a), r)), [x]


def _case_conv(rng):
    k = int(rng.choice([1, 3]))
    x, wt, b = rng.normal(size=(4, 5, 2)), rng.normal(size=(k, k, 2, 3)), rng.normal(size=3)
    r = rng.normal(size=(4, 5, 3))
    return (lambda a, w, c: _project(dc.conv2d(a, w, c), r)), [x, wt, b]


def _q_from(logits: Tensor) -> Tensor:
    return dc.softmax(logits)


def _labels(rng, shape, k):
    return rng.integers(0, k, size=shape)


def _seeds(rng, shape, k, frac=0.4):
    s = np.where(rng.random(shape) < frac, _labels(rng, shape, k), UNLABELED)
    s.flat[0] = rng.integers(k)
    return s


def _case_ce(rng):
    x, y = rng.normal(size=(3, 3, 4)), _labels(rng, (3, 3), 4)
    return (lambda a: ce(_q_from(a), y)), [x]


def _case_pce(rng):
    x, s = rng.normal(size=(3, 3, 4)), _seeds(rng, (3, 3), 4)
    return (lambda a: pce(_q_from(a), s)), [x]


def _case_robust(rng):
    eps = float(rng.uniform(0.05, 0.6))
    x, y = rng.normal(size=(3, 3, 4)), _labels(rng, (3, 3), 4)
    noise = NoiseModel(eps, 4)
    return (lambda a: robust_ce(_q_from(a), y, noise)), [x]


def _case_forward(rng):
    x, y = rng.normal(size=(3, 3, 4)), _labels(rng, (3, 3), 4)
    T = rng.dirichlet(np.ones(4) * 3, size=4)
    return (lambda a: forward_corrected_ce(_q_from(a), y, T)), [x]


def _case_mixed(rng):
    x, y, s = rng.normal(size=(3, 3, 4)), _labels(rng, (3, 3), 4), _seeds(rng, (3, 3), 4)
    noise = NoiseModel(float(rng.uniform(0.0, 0.5)), 4)
    return (lambda a: mixed_robust_kl(_q_from(a), y, s, noise)), [x]


def _case_potts(rng):
    ei, ej = grid_pairs(3, 3)
    crf = GridCRF(3, 3, 4, ei, ej, rng.uniform(0, 2, size=len(ei)))
    x = rng.normal(size=(3, 3, 4))
    return (lambda a: bilinear_potts_grid(_q_from(a), crf)), [x]


def _case_micronet(rng):
    params = dc.init_params(in_channels=2, n_classes=3, hidden=2, depth=1, seed=int(rng.integers(1 << 30)))
    image = rng.uniform(size=(3, 3, 2))
    seeds = _seeds(rng, (3, 3), 3)
    names = list(params.tensors)
    arrays = [params.tensors[n].data.copy() for n in names]

    def fn(*leaves):
        p = params.clone()
        for n, t in zip(names, leaves):
            p.tensors[n] = t
        return pce(dc.softmax(dc.forward(p, image)), seeds)

    return fn, arrays


GRADIENT_CASES: dict[str, Callable] = {
    "add": _case_binary(dc.add),
    "add-broadcast": _case_broadcast_add,
    "sub": _case_binary(dc.sub),
    "mul": _case_binary(dc.mul),
    "neg": _case_unary(dc.neg),
    "scale": _case_unary(lambda a: dc.scale(a, -1.7)),
    "sum": _case_sum_axis,
    "square": _case_unary(dc.square),
    "relu": _case_unary(dc.relu),
    "exp": _case_unary(dc.exp),
    "log": _case_log,
    "clamp_min": _case_clamp,
    "matmul": _case_matmul,
    "reshape+take_rows": _case_reshape_rows,
    "pick": _case_pick,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "conv2d": _case_conv,
    "ce": _case_ce,
    "pce": _case_pce,
    "robust_ce": _case_robust,
    "forward_corrected_ce": _case_forward,
    "mixed_robust_kl": _case_mixed,
    "bilinear_potts": _case_potts,
    "micro-net+pce": _case_micronet,
}


def gradcheck_suite(instances: int = 20, seed: int = 0, tol: float = 1e-4, h: float = 1e-5) -> SuiteResult:
    """Central finite differences for every op and loss, ``instances`` random draws each."""

    def run():
        rng = np.random.default_rng(seed)
        worst: dict[str, float] = {}
        for name, make in GRADIENT_CASES.items():
            errs = [fd_relative_error(*make(rng), h=h) for _ in range(instances)]
            worst[name] = max(errs)
        failing = sorted(n for n, e in worst.items() if not e < tol)
        detail = f"worst={max(worst.values()):.2e}" + (f" failing={failing}" if failing else "")
        return not failing, instances * len(worst), detail, {"worst": worst}

    return _timed("gradient-checks", run)


# -- chain rule ------------------------------------------------------------------


def chainrule_suite(seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    """Direct step vs two-step vs least-squares step, on a micro-net and a linear model."""

    def run():
        rng = np.random.default_rng(seed)
        reports = {}
        template = dc.init_params(in_channels=3, n_classes=2, hidden=2, depth=1, seed=seed)
        image = rng.uniform(size=(3, 3, 3))
        labels = rng.integers(0, 2, size=9)
        f = micro_net_fn(template, image)

        def ce_flat(s: Tensor) -> Tensor:
            return dc.neg(dc.tsum(dc.log(dc.pick(dc.reshape(s, (9, 2)), labels))))

        theta0 = template.flat()
        reports["micro-net"] = verify_chainrule_decomposition(f, theta0, ce_flat, alpha=0.1)

        A = rng.normal(size=(6, 4))
        target = rng.normal(size=6)
        lin = lambda th: dc.matmul(dc.reshape(th, (1, 4)), A.T)
        quad = lambda s: dc.tsum(dc.square(dc.sub(s, target)))
        reports["linear"] = verify_chainrule_decomposition(lin, rng.normal(size=4), quad, alpha=0.3)
        zero = verify_chainrule_decomposition(f, theta0, ce_flat, alpha=0.0)

        ok = (
            reports["micro-net"].ok(tol)
            and reports["linear"].ok(1e-12)
            and zero.delta_theta_norm == 0.0
            and zero.direct_vs_two_step == 0.0
        )
        worst = max(max(r.direct_vs_two_step, r.least_squares_vs_two_step) for r in reports.values())
        return ok, 3, f"max residual={worst:.2e}, params={reports['micro-net'].n_params}", {"reports": reports}

    return _timed("chain-rule-decomposition", run)


# -- robust loss reductions -----------------------------------------------------------


def robust_loss_suite(instances: int = 50, seed: int = 0) -> SuiteResult:
    """robust(0) == CE, robust(eps) == forward correction with uniform T, flat tail."""

    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(instances):
            k = int(rng.integers(2, 6))
            x = rng.normal(size=(4, 4, k)) * 3
            y = rng.integers(0, k, size=(4, 4))
            q = dc.softmax(Tensor(x))
            eps = float(rng.uniform(0, (k - 1) / k * 0.99))
            worst = max(
                worst,
                abs(robust_ce(q, y, NoiseModel(0.0, k)).item() - ce(q, y).item()),
                abs(
                    robust_ce(q, y, NoiseModel(eps, k)).item()
                    - forward_corrected_ce(q, y, uniform_transition(eps, k)).item()
                ),
            )
        # gradient through a logit of -30 on the labelled class, eps = 0.2, K = 2
        logits = Tensor(np.array([[-30.0, 0.0]]), requires_grad=True)
        with Tape():
            loss = robust_ce(dc.softmax(logits), np.array([0]), NoiseModel(0.2, 2))
        dc.backward(loss)
        tail = float(np.abs(logits.grad).max())
        ok = worst <= 1e-12 and tail < 1e-10
        return ok, 2 * instances + 1, f"max diff={worst:.1e}, tail grad={tail:.1e}", {"tail": tail}

    return _timed("robust-loss-reductions", run)


# -- invariants -----------------------------------------------------------------------


def _random_stage_a(rng, h=6, w=6, k=3):
    ei, ej = grid_pairs(h, w)
    crf = GridCRF(h, w, k, ei, ej, rng.uniform(0, 1.0, size=len(ei)))
    q = rng.dirichlet(np.ones(k), size=(h, w))
    seeds = np.full((h, w), UNLABELED)
    for lab in range(k):
        seeds[rng.integers(h), rng.integers(w)] = lab
    return crf, q, seeds


def invariant_suite(instances: int = 30, seed: int = 0) -> SuiteResult:
    """Stage A seeds/monotonicity/lambda limits, pixmap round trips, mIoU cases."""

    def run():
        rng = np.random.default_rng(seed)
        fails: list[str] = []
        n = 0
        for _ in range(instances):
            crf, q, seeds = _random_stage_a(rng)
            log: list[float] = []
            s = stage_a_solve(crf, q, seeds, lam=1.0, energy_log=log)
            sm = seeds != UNLABELED
            n += 2
            if np.any(s[sm] != seeds[sm]):
                fails.append("seeds")
            if any(b > a for a, b in zip(log, log[1:])):
                fails.append("monotone")
            # lambda = 0: the proposal ignores q entirely
            q2 = rng.dirichlet(np.ones(crf.n_labels), size=q.shape[:2])
            n += 1
            if not np.array_equal(stage_a_solve(crf, q, seeds, 0.0), stage_a_solve(crf, q2, seeds, 0.0)):
                fails.append("lambda0")
            # lambda -> infinity: argmax of q (seeds imposed)
            big = stage_a_solve(crf, q, seeds, 1e6, allowed=tuple(range(crf.n_labels)))
            n += 1
            if not np.array_equal(big, np.where(sm, seeds, np.argmax(q, axis=-1))):
                fails.append("lambda-inf")
            # pixmap round trips
            img = rng.integers(0, 256, size=(int(rng.integers(1, 9)), int(rng.integers(1, 9)), 3)).astype(np.uint8)
            lab = rng.integers(0, 256, size=img.shape[:2]).astype(np.uint8)
            n += 2
            if not np.array_equal(_roundtrip(write_ppm, img), img):
                fails.append("ppm")
            if not np.array_equal(_roundtrip(write_pgm, lab), lab):
                fails.append("pgm")
        gt = rng.integers(0, 4, size=(8, 8))
        n += 3
        if miou(gt, gt, n_classes=4) != 1.0:
            fails.append("miou-identity")
        if miou((gt + 1) % 4, gt, n_classes=4) != 0.0:
            fails.append("miou-disjoint")
        if miou(np.zeros((2, 2), int), np.array([[0, 0], [1, 1]]), n_classes=2) != 0.25:
            fails.append("miou-half")
        detail = f"failures={sorted(set(fails))}" if fails else ""
        return not fails, n, detail, {"failures": fails}

    return _timed("invariants", run)


def _roundtrip(writer, arr) -> np.ndarray:
    fd, path = tempfile.mkstemp(suffix=".pnm")
    os.close(fd)
    try:
        writer(path, arr)
        with open(path, "rb") as fh:
            return read_pnm(fh)
    finally:
        os.unlink(path)


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "maxflow": maxflow_suite,
    "expansion": expansion_suite,
    "gradients": gradcheck_suite,
    "chainrule": chainrule_suite,
    "robust": robust_loss_suite,
    "invariants": invariant_suite,
}


def run_all(names=None) -> list[SuiteResult]:
    return [SUITES[n]() for n in (names or SUITES)]
