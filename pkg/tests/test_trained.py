"""Checks on the trained desk pipelines (shared with the acceptance runs)."""

import csv

import numpy as np
import pytest
import torch

from advlab.attacks import AttackConfig, run_attack
from advlab.core.checkpoint import load_checkpoint
from advlab.pipeline import MODES, parse_report_csv
from advlab.runconfig import RunConfig
from advlab.workflow import eval_examples, load_model, load_splits

from conftest import CONFIG_DIR

pytestmark = pytest.mark.slow


def report(run_dir):
    rows = parse_report_csv((run_dir / "report" / "report.csv").read_text())
    return rows, {(r.attack, r.epsilon_255, r.box, r.mode): r.accuracy for r in rows}


def test_mnist_target_accuracy(mnist_run):
    ckpt = load_checkpoint(mnist_run[0] / "target.advckpt")
    assert ckpt.config_snapshot["train"]["epochs_target"] == 5
    assert ckpt.metrics["test_accuracy"] >= 0.97


def test_cifar_target_accuracy(cifar_run):
    ckpt = load_checkpoint(cifar_run[0] / "target.advckpt")
    assert ckpt.config_snapshot["train"]["epochs_target"] == 30
    assert ckpt.metrics["test_accuracy"] >= 0.70


def test_mnist_fgsm_and_denoiser(mnist_run):
    _, acc = report(mnist_run[0])
    assert acc[("fgsm", 51.0, "white", "none")] < 0.40
    assert acc[("fgsm", 51.0, "white", "id_only")] >= 0.80
    clean = acc[("clean", 0.0, "clean", "none")]
    assert abs(acc[("clean", 0.0, "clean", "id_only")] - clean) <= 0.03


def test_mnist_cw_at_least_fgsm(mnist_run):
    run_dir = mnist_run[0]
    cfg = RunConfig.load(CONFIG_DIR / "mnist_desk.json", [("out_dir", str(run_dir))])
    examples = eval_examples(cfg, load_splits(cfg)).take(np.arange(500))
    target = load_model(run_dir / "target.advckpt", "target")
    x, y = torch.from_numpy(np.array(examples.pixels)), torch.from_numpy(np.array(examples.labels))
    success = {}
    for method in ("fgsm", "cw"):
        adv = run_attack(target, x, y, AttackConfig(method, 51.0, 1 if method == "fgsm" else 20))
        with torch.no_grad():
            success[method] = (target(adv).argmax(1) != y).float().mean().item()
    assert success["cw"] >= success["fgsm"]


def test_mnist_p2_fraction_small(mnist_run):
    import json

    meta = json.loads((mnist_run[0] / "report" / "report.json").read_text())["metadata"]
    cell = next(s for s in meta["p2_subset"] if s["attack"] == "fgsm")
    assert cell["n_p2"] / (cell["n_p1"] + cell["n_p2"]) < 0.2


def test_mnist_restorer_training_metrics(mnist_run):
    rows = list(csv.DictReader((mnist_run[0] / "metrics" / "fr.csv").open()))
    last = rows[-1]
    assert float(last["p2_recovery"]) > 0
    # p1 is correct before the restorer by definition
    assert float(last["p1_retention"]) >= 0.99


def test_mnist_denoiser_history_logged(mnist_run):
    rows = list(csv.DictReader((mnist_run[0] / "metrics" / "id.csv").open()))
    assert len(rows) == 4
    assert all(float(r["val_denoised_accuracy"]) > 0.5 for r in rows)


@pytest.mark.parametrize("name", ["mnist", "cifar"])
def test_defense_rows(name, mnist_run, cifar_run):
    rows, acc = report((mnist_run if name == "mnist" else cifar_run)[0])
    cells = {(r.attack, r.epsilon_255, r.box) for r in rows}
    for cell in cells:
        assert {m for m in MODES if (*cell, m) in acc} == set(MODES)
        if cell[0] == "clean":
            continue
        assert acc[(*cell, "id_only")] > acc[(*cell, "none")], cell
        assert acc[(*cell, "id_fr")] >= acc[(*cell, "id_only")] - 0.01, cell
