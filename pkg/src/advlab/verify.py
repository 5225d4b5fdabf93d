"""Self-contained property suites: hull closure, attack budget fuzz, gradient checks.

All inputs are synthetic, so these run without any dataset on disk.
"""

import copy
import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from advlab.attacks import METHODS, AttackConfig, run_attack
from advlab.core.config import DatasetDescriptor
from advlab.core.rng import rng_stream, torch_seeded
from advlab.fr_training import fr_loss, verify_hull_closure
from advlab.id_training import id_loss
from advlab.nets import Denoiser, Restorer, TargetModel

HULL_TRIALS = 1000
HULL_DIMS = (8, 64, 512)
FUZZ_CASES = 10_000
BUDGET_TOL = 1e-6
GRAD_PARAMS = 100
GRAD_TOL = {torch.float32: 1e-3, torch.float64: 1e-5}


@dataclass
class SuiteResult:
    name: str
    total: int
    passed: int
    seconds: float = 0.0
    failure: dict = field(default=None)
    note: str = ""

    @property
    def ok(self):
        return self.passed == self.total and self.failure is None

    def line(self):
        status = "PASS" if self.ok else "FAIL"
        note = f" [{self.note}]" if self.note else ""
        return f"{self.name}: {status} {self.passed}/{self.total} ({self.seconds:.1f}s){note}"


def hull_closure_suite(trials=HULL_TRIALS, seed=0, tol=1e-5):
    """Random k-point simplex combinations, k in [2, 8], d in {8, 64, 512}."""
    rng = rng_stream(seed, "verify:hull")
    t0 = time.perf_counter()
    passed, failure = 0, None
    for trial in range(trials):
        k = int(rng.integers(2, 9))
        d = int(HULL_DIMS[trial % len(HULL_DIMS)])
        points = rng.normal(scale=rng.choice([1e-3, 1.0, 1e3]), size=(k, d))
        w = rng.dirichlet(np.full(k, rng.choice([0.1, 1.0, 10.0])))
        if trial % 10 == 0:
            # exercise the degenerate peel where all weight sits on the last point
            w = np.zeros(k)
            w[-1] = 1.0
        # relative tolerance for large-scale points
        scale = max(1.0, float(np.abs(points).max()))
        if verify_hull_closure(points, w, tol * scale):
            passed += 1
        elif failure is None:
            failure = {"trial": trial, "k": k, "d": d, "weights": w.tolist(), "points_head": points[:, :4].tolist()}
    return SuiteResult("hull_closure", trials, passed, time.perf_counter() - t0, failure)


def _toy_target(shape, num_classes=3, hidden=16, seed=0, dtype=torch.float32):
    c, h, w = shape
    desc = DatasetDescriptor("toy", num_classes, shape, (1, 1, 1))
    with torch_seeded(seed, "verify:toy-target"):
        enc = nn.Sequential(nn.Flatten(), nn.Linear(c * h * w, hidden), nn.ReLU())
        cls = nn.Linear(hidden, num_classes)
    model = TargetModel(enc, cls, hidden, "toy", desc).to(dtype)
    return model.freeze(True)


def budget_fuzz_suite(cases=FUZZ_CASES, seed=0, tol=BUDGET_TOL, group=50):
    """Every AE from random (method, eps, image) draws stays inside the eps-ball and [0, 1]."""
    rng = rng_stream(seed, "verify:fuzz")
    t0 = time.perf_counter()
    shapes = [(1, 8, 8), (3, 6, 6)]
    targets = {s: _toy_target(s, seed=seed) for s in shapes}
    passed = done = 0
    failure = None
    while done < cases:
        n = min(group, cases - done)
        shape = shapes[int(rng.integers(len(shapes)))]
        method = METHODS[int(rng.integers(len(METHODS)))]
        cfg = AttackConfig(
            method,
            float(rng.uniform(0.25, 64.0)),
            1 if method == "fgsm" else int(rng.integers(1, 21)),
            float(rng.uniform(1e-3, 0.1)),
            float(rng.choice([0.0, 0.5])),
        )
        kind = rng.integers(3)
        if kind == 0:
            x = rng.random((n, *shape))
        elif kind == 1:
            # saturated pixels probe the clamp
            x = rng.integers(0, 2, (n, *shape)).astype(np.float64)
        else:
            x = np.clip(rng.normal(0.5, 0.4, (n, *shape)), 0, 1)
        x = torch.from_numpy(x.astype(np.float32))
        y = torch.from_numpy(rng.integers(0, 3, n))
        adv = run_attack(targets[shape], x, y, cfg)
        dist = (adv - x).abs().flatten(1).amax(1)
        ok = (dist <= cfg.epsilon + tol) & (adv.flatten(1).amin(1) >= 0) & (adv.flatten(1).amax(1) <= 1)
        passed += int(ok.sum())
        if failure is None and not bool(ok.all()):
            i = int((~ok).nonzero()[0, 0])
            failure = {
                "case": done + i,
                "method": method,
                "epsilon_255": cfg.epsilon_255,
                "iterations": cfg.iterations,
                "step_size": cfg.step_size,
                "linf": float(dist[i]),
                "bound": cfg.epsilon + tol,
                "pixel_range": [float(adv[i].min()), float(adv[i].max())],
            }
        done += n
    return SuiteResult("budget_fuzz", cases, passed, time.perf_counter() - t0, failure)


def _flat_params(module):
    return [p for p in module.parameters() if p.requires_grad]


def _stencil(f, h):
    # fourth-order central difference
    return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)


def gradient_check(loss_of, module, n_params=GRAD_PARAMS, dtype=torch.float32, seed=0, h=1e-5, floor=1e-5):
    """Compare autograd parameter gradients at ``dtype`` with float64 finite differences.

    ``loss_of(module, dtype)`` must return a scalar loss. Coordinates are drawn
    at random; one whose estimates at steps ``h`` and ``h/2`` disagree sits on
    a ReLU/max-pool/clamp kink, has no derivative there, and is redrawn.
    Returns ``(rows, n_kinks)`` with rows of (parameter number, analytic,
    numeric, relative error), relative error ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = rng_stream(seed, "verify:gradcheck")
    mod = copy.deepcopy(module).to(dtype)
    mod.zero_grad()
    loss_of(mod, dtype).backward()
    analytic = torch.cat([p.grad.reshape(-1).double() for p in _flat_params(mod)])

    ref = copy.deepcopy(module).double()
    params = _flat_params(ref)
    offsets = np.cumsum([0] + [p.numel() for p in params])
    order = rng.permutation(int(offsets[-1]))
    rows, kinks = [], 0
    with torch.no_grad():
        for flat in order:
            if len(rows) == n_params:
                break
            j = int(np.searchsorted(offsets, flat, side="right") - 1)
            view = params[j].view(-1)
            k = int(flat - offsets[j])
            orig = view[k].item()

            def f(step):
                view[k] = orig + step
                return loss_of(ref, torch.float64).item()

            num, half = _stencil(f, h), _stencil(f, h / 2)
            view[k] = orig
            if abs(num - half) > 1e-9 + 1e-7 * abs(num):
                kinks += 1
                continue
            a = analytic[flat].item()
            rows.append((int(flat), a, num, abs(a - num) / max(abs(a), abs(num), floor)))
    return rows, kinks


def _id_problem(seed):
    """Toy denoiser feeding a frozen toy target; inputs held fixed across dtypes."""
    shape = (1, 8, 8)
    g = rng_stream(seed, "verify:id-data")
    x = torch.from_numpy(g.random((6, *shape)))
    y = torch.from_numpy(g.integers(0, 3, 6))
    target = _toy_target(shape, seed=seed, dtype=torch.float64)
    with torch_seeded(seed, "verify:id-denoiser"):
        den = Denoiser(1, width=1 / 8)
    den.train()

    def loss_of(mod, dtype):
        return id_loss(mod, target.to(dtype), x.to(dtype), y)

    return den, loss_of


def _fr_problem(seed, dim=32):
    g = rng_stream(seed, "verify:fr-data")
    mixed = torch.from_numpy(np.abs(g.normal(size=(16, dim))))
    y = torch.from_numpy(g.integers(0, 4, 16))
    with torch_seeded(seed, "verify:fr-nets"):
        res = Restorer(dim)
        cls = nn.Linear(dim, 4).double()
    cls.requires_grad_(False)

    def loss_of(mod, dtype):
        return fr_loss(mod, cls.to(dtype), mixed.to(dtype), y)

    return res, loss_of


def gradient_suite(seed=0, dtype=torch.float32, n_params=GRAD_PARAMS):
    """Gradient checks of the denoiser and restorer losses on toy networks."""
    t0 = time.perf_counter()
    tol = GRAD_TOL[dtype]
    total = passed = skipped = 0
    failure = None
    for name, (module, loss_of) in (("id_loss", _id_problem(seed)), ("fr_loss", _fr_problem(seed))):
        rows, kinks = gradient_check(loss_of, module, n_params, dtype, seed)
        skipped += kinks
        for flat, a, num, rel in rows:
            total += 1
            if rel < tol:
                passed += 1
            elif failure is None:
                failure = {"loss": name, "dtype": str(dtype), "param": flat, "analytic": a, "numeric": num, "rel_err": rel}
    name = f"gradient_check[{str(dtype).split('.')[-1]}]"
    return SuiteResult(name, total, passed, time.perf_counter() - t0, failure, f"{skipped} kink coordinates redrawn")


def run_all(seed=0, budget_tol=BUDGET_TOL, hull_trials=HULL_TRIALS, fuzz_cases=FUZZ_CASES):
    with torch.random.fork_rng():
        return [
            hull_closure_suite(hull_trials, seed),
            budget_fuzz_suite(fuzz_cases, seed, tol=budget_tol),
            gradient_suite(seed, torch.float32),
            gradient_suite(seed, torch.float64),
        ]


def failure_line(result):
    return json.dumps({"suite": result.name, "failure": result.failure}, sort_keys=True)
