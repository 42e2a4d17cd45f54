"""Acceptance criteria 1-9; each test reports one PASS/FAIL line.

The benchmark runs (criteria 6-8) are marked ``slow``. They still run under a
plain ``pytest``.
"""

import time
from dataclasses import replace

import pytest

from trustseg.cli import main as cli_main
from trustseg.data import with_scribbles
from trustseg.experiments import BenchmarkSpec, make_benchmark, noisy_cls_sweep, run_variants
from trustseg.trainer import TrainConfig
from trustseg.verify import (
    chainrule_suite,
    expansion_suite,
    gradcheck_suite,
    invariant_suite,
    maxflow_suite,
    robust_loss_suite,
)

RATIOS = (0.0, 0.5, 1.0)
SCRIBBLE_SEED = 0
LAMBDA_RATIO = 1.0
EPSILONS = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]


def test_criterion_1_maxflow_exact(acceptance_report):
    r = maxflow_suite(1000)
    ok = r.passed and r.seconds < 10.0
    acceptance_report(1, "max-flow equals brute-force min cut (1000 graphs, <10 s)", ok, f"{r.detail}, {r.seconds:.2f}s")
    assert ok, r.line()


def test_criterion_2_expansion_optimality(acceptance_report):
    r = expansion_suite(500, 500)
    ok = r.passed and r.seconds < 60.0
    acceptance_report(2, "alpha-expansion vs brute force (500 K=2 exact, 500 K=3 <=2x, >=90% exact, <60 s)", ok, f"{r.detail}, {r.seconds:.2f}s")
    assert ok, r.line()


def test_criterion_3_chain_rule(acceptance_report):
    r = chainrule_suite(tol=1e-10)
    acceptance_report(3, "direct vs two-step vs least-squares gradient step (<1e-10)", r.passed, r.detail)
    assert r.passed, r.line()


def test_criterion_4_gradient_checks(acceptance_report):
    r = gradcheck_suite(instances=20, tol=1e-4, h=1e-5)
    acceptance_report(4, "finite differences h=1e-5, rel err <1e-4, 20 instances per op/loss", r.passed, f"{r.checks} checks, {r.detail}")
    assert r.passed, r.line()


def test_criterion_5_robust_reductions(acceptance_report):
    r = robust_loss_suite()
    acceptance_report(5, "robust CE reductions (1e-12) and flat tail (<1e-10)", r.passed, r.detail)
    assert r.passed, r.line()


@pytest.mark.slow
def test_criterion_6_noisy_classification(acceptance_report):
    t0 = time.perf_counter()
    rows = noisy_cls_sweep(EPSILONS, corruption=0.5, seed=0)
    seconds = time.perf_counter() - t0
    acc = dict(rows)
    best = max(rows, key=lambda r: r[1])[0]
    gain = acc[0.4] - acc[0.0]
    ok = gain >= 0.05 and 0.3 <= best <= 0.5 and seconds < 300
    curve = ", ".join(f"{e:g}:{a:.3f}" for e, a in rows)
    acceptance_report(6, "50% noise: acc(0.4)-acc(0)>=0.05, argmax eps in [0.3,0.5], <5 min", ok,
                      f"gain={gain:.3f}, argmax={best:g}, {seconds:.0f}s [{curve}]")
    assert ok


@pytest.fixture(scope="module")
def benchmark_runs():
    """Per ratio: one shared PCE-pretrained model, then every method (and the lambda variants)."""
    config = TrainConfig()
    train0, val = make_benchmark(BenchmarkSpec())
    out, t0 = {}, time.perf_counter()
    for ratio in RATIOS:
        train = with_scribbles(train0, ratio, seed=SCRIBBLE_SEED)
        variants = {m: replace(config, method=m) for m in ("pce-gd", "grid-gd", "grid-tr")}
        if ratio == LAMBDA_RATIO:
            variants["lambda=0"] = replace(config, method="grid-tr", lam=0.0)
            variants["lambda=1e6*"] = replace(config, method="grid-tr", lam=config.lam * 1e6)
        out[ratio] = {k: v["miou"] for k, v in run_variants(train, val, 4, config, variants).items()}
    return out, time.perf_counter() - t0, config


@pytest.mark.slow
def test_criterion_7_method_ordering(benchmark_runs, acceptance_report):
    runs, seconds, _ = benchmark_runs
    ok, parts = seconds < 1800, []
    for ratio in RATIOS:
        m = runs[ratio]
        good = m["grid-tr"] > m["grid-gd"] >= m["pce-gd"] and m["grid-tr"] - m["pce-gd"] >= 0.03
        ok &= good
        parts.append(f"r={ratio:g}: tr {m['grid-tr']:.3f} / gd {m['grid-gd']:.3f} / pce {m['pce-gd']:.3f}")
    acceptance_report(7, "grid-tr > grid-gd >= pce-gd and tr-pce >= 0.03 at every ratio, <30 min", ok,
                      "; ".join(parts) + f"; {seconds:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_8_lambda_sweep(benchmark_runs, acceptance_report):
    runs, _, config = benchmark_runs
    m = runs[LAMBDA_RATIO]
    mid, lo, hi = m["grid-tr"], m["lambda=0"], m["lambda=1e6*"]
    ok = mid > lo and mid > hi
    acceptance_report(8, f"lambda sweep at ratio {LAMBDA_RATIO:g}: mIoU(lambda*) beats lambda=0 and 1e6*lambda*", ok,
                      f"0: {lo:.4f}, {config.lam:g}: {mid:.4f}, {config.lam * 1e6:g}: {hi:.4f}")
    assert ok


def test_criterion_9_invariants(acceptance_report, capsys):
    r = invariant_suite()
    code = cli_main(["verify", "--suite", "invariants"])
    ok = r.passed and code == 0
    capsys.readouterr()
    acceptance_report(9, "invariant suites pass under verify", ok, f"{r.checks} checks {r.detail}".rstrip())
    assert ok, r.line()

