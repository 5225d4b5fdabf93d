"""End-to-end acceptance checks; each records a one-line verdict for the summary."""

import json

import pytest
import torch

from advlab import verify
from advlab.pipeline import parse_report_csv

from conftest import ACCEPTANCE

POINT = 0.01


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


def load_report(run_dir, sub="report"):
    rows = parse_report_csv((run_dir / sub / "report.csv").read_text())
    meta = json.loads((run_dir / sub / "report.json").read_text())["metadata"]
    return {(r.attack, r.epsilon_255, r.box, r.mode): r.accuracy for r in rows}, rows, meta


def test_criterion_1_hull_closure():
    r = verify.hull_closure_suite(trials=1000, seed=0)
    record(1, r.ok and r.total == 1000 and r.seconds < 10, f"{r.passed}/{r.total} in {r.seconds:.1f}s")


def test_criterion_2_budget_fuzz():
    r = verify.budget_fuzz_suite(cases=10_000, seed=0, tol=1e-6)
    record(2, r.ok and r.total == 10_000 and r.seconds < 120, f"{r.passed}/{r.total} in {r.seconds:.1f}s")


def test_criterion_3_gradient_checks():
    r32 = verify.gradient_suite(seed=0, dtype=torch.float32, n_params=100)
    r64 = verify.gradient_suite(seed=0, dtype=torch.float64, n_params=100)
    seconds = r32.seconds + r64.seconds
    # 100 parameters for each of the two losses
    ok = r32.ok and r64.ok and r32.total == 200 and seconds < 60
    record(3, ok, f"float32 {r32.passed}/{r32.total}, float64 {r64.passed}/{r64.total} in {seconds:.1f}s")


@pytest.mark.slow
def test_criterion_4_mnist_trend(mnist_run):
    run_dir, seconds = mnist_run
    acc, rows, meta = load_report(run_dir)
    target = json.loads((run_dir / "manifest.json").read_text())
    clean = acc[("clean", 0.0, "clean", "none")]
    fgsm_none = acc[("fgsm", 51.0, "white", "none")]
    fgsm_id = acc[("fgsm", 51.0, "white", "id_only")]
    cells = {(r.attack, r.epsilon_255, r.box) for r in rows}
    worst = min(acc[(*c, "id_fr")] - acc[(*c, "id_only")] for c in cells)
    attacked = [s for s in meta["p2_subset"] if s["box"] != "clean"]
    n_p2 = sum(s["n_p2"] for s in attacked)
    fr_p2 = sum(s["id_fr_correct_p2"] for s in attacked)
    id_p2 = sum(s["id_only_correct_p2"] for s in attacked)
    checks = [
        clean >= 0.97,
        fgsm_none < 0.40,
        fgsm_id >= 0.80,
        worst >= -POINT,
        n_p2 > 0 and fr_p2 > id_p2,
        seconds <= 30 * 60,
    ]
    detail = (f"clean {clean:.3f}, fgsm none {fgsm_none:.3f}, id_only {fgsm_id:.3f}, "
              f"worst id_fr-id_only {worst * 100:+.1f} pts, p2 id_fr {fr_p2}/{n_p2} vs id_only {id_p2}, "
              f"{seconds / 60:.1f} min, stages {sorted(target['stages'])}")
    record(4, all(checks), detail)


@pytest.mark.slow
def test_criterion_5_clean_retention(mnist_run, cifar_run):
    gaps = {}
    for name, (run_dir, _) in (("mnist", mnist_run), ("cifar10", cifar_run)):
        acc, _, _ = load_report(run_dir)
        gaps[name] = acc[("clean", 0.0, "clean", "none")] - acc[("clean", 0.0, "clean", "id_fr")]
    record(5, all(g <= 5 * POINT for g in gaps.values()),
           ", ".join(f"{k} gap {v * 100:.1f} pts" for k, v in gaps.items()))


@pytest.mark.slow
def test_criterion_6_monotone_menace(cifar_run):
    acc, rows, _ = load_report(cifar_run[0])
    violations, checked = [], 0
    for attack, box in sorted({(r.attack, r.box) for r in rows if r.box != "clean"}):
        series = [acc[(attack, e, box, "none")] for e in (4.0, 8.0, 16.0)]
        checked += 1
        for lo, hi in zip(series, series[1:]):
            if hi > lo + 2 * POINT:
                violations.append(f"{attack}/{box} {series}")
    record(6, checked > 0 and not violations, f"{checked} series, violations: {violations or 'none'}")


@pytest.mark.slow
def test_criterion_7_black_box_transfer(cifar_run):
    acc, rows, _ = load_report(cifar_run[0])
    clean = acc[("clean", 0.0, "clean", "none")]
    drops = {r.attack: clean - acc[(r.attack, 16.0, "black", "none")]
             for r in rows if r.box == "black" and r.epsilon_255 == 16.0}
    record(7, drops and all(d >= 10 * POINT for d in drops.values()),
           ", ".join(f"{k} drop {v * 100:.1f} pts" for k, v in sorted(drops.items())))


@pytest.mark.slow
def test_criterion_8_determinism(smoke_runs):
    a, b = ((d / "report" / "report.csv").read_bytes() for d in smoke_runs)
    record(8, a == b, f"report.csv {len(a)} bytes, identical={a == b}")
