import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from advlab.attacks import (
    AttackConfig,
    bim,
    cw_linf,
    fgsm,
    generate_attack_set,
    load_attack_set,
    margin_loss,
    normalize_epsilon,
    parse_attack_spec,
    run_attack,
    save_attack_set,
)
from advlab.core.errors import AttackError, ConfigError

from conftest import random_examples, toy_target


@pytest.mark.parametrize("e255,expected", [(8, 0.031373), (255, 1.0), (4, 0.015686)])
def test_normalize_epsilon(e255, expected):
    assert normalize_epsilon(e255) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("bad", [0, -1])
def test_normalize_epsilon_rejects(bad):
    with pytest.raises(ConfigError):
        normalize_epsilon(bad)


def test_config_defaults_and_names():
    assert AttackConfig("fgsm", 8).iterations == 1
    cw = AttackConfig("cw_linf", 8)
    assert (cw.method, cw.iterations, cw.step_size, cw.report_name) == ("cw", 20, 0.03, "cw_linf")
    with pytest.raises(ConfigError):
        AttackConfig("pgd", 8)
    assert [c.epsilon_255 for c in parse_attack_spec("bim:4,8,16")] == [4, 8, 16]
    with pytest.raises(ConfigError):
        parse_attack_spec("bim")


class Logistic(nn.Module):
    """Two-logit model equivalent to binary logistic regression with weights w."""

    def __init__(self, w, b=0.0):
        super().__init__()
        self.w = torch.as_tensor(w, dtype=torch.float32)
        self.b = b

    def forward(self, x):
        z = x.flatten(1) @ self.w + self.b
        return torch.stack([torch.zeros_like(z), z], dim=1)


def test_fgsm_logistic_closed_form():
    # CE gradient wrt x is (p - y) w, so the step is eps * sign(w) * sign(p - y)
    rng = np.random.default_rng(0)
    w = rng.normal(size=16).astype(np.float32)
    model = Logistic(w)
    x = torch.from_numpy(rng.uniform(0.3, 0.7, (10, 1, 4, 4)).astype(np.float32))
    y = torch.from_numpy(rng.integers(0, 2, 10))
    eps = 0.05
    adv = fgsm(model, x, y, eps)
    p = torch.sigmoid(x.flatten(1) @ model.w)
    expected = eps * np.sign(w)[None, :] * np.sign((p - y.float()).numpy())[:, None]
    assert np.allclose((adv - x).flatten(1).numpy(), expected, atol=1e-6)


def test_zero_gradient_coordinates_untouched():
    w = np.zeros(16, dtype=np.float32)
    w[:4] = 1.0
    x = torch.full((3, 1, 4, 4), 0.5)
    adv = fgsm(Logistic(w), x, torch.tensor([0, 1, 0]), 0.1)
    assert torch.equal(adv.flatten(1)[:, 4:], x.flatten(1)[:, 4:])


@pytest.mark.parametrize("method", ["fgsm", "bim", "cw"])
def test_zero_budget_is_identity(method):
    model = toy_target()
    x = torch.rand(5, 1, 8, 8)
    y = torch.randint(0, 3, (5,))
    fn = {"fgsm": lambda: fgsm(model, x, y, 0.0), "bim": lambda: bim(model, x, y, 0.0),
          "cw": lambda: cw_linf(model, x, y, 0.0)}[method]
    assert torch.equal(fn(), x)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.001, 0.3), st.floats(0.0, 0.2), st.integers(0, 10_000))
def test_bim_single_step_equals_fgsm(eps, extra, seed):
    g = torch.Generator().manual_seed(seed)
    model = toy_target(seed=seed % 7)
    x = torch.rand(6, 1, 8, 8, generator=g)
    y = torch.randint(0, 3, (6,), generator=g)
    assert torch.equal(bim(model, x, y, eps, iterations=1, step=eps + extra), fgsm(model, x, y, eps))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["fgsm", "bim", "cw"]), st.floats(0.5, 64), st.integers(1, 8), st.floats(0.001, 0.2),
       st.integers(0, 10_000))
def test_budget_and_pixel_range(method, e255, iters, step, seed):
    g = torch.Generator().manual_seed(seed)
    x = (torch.rand(8, 1, 8, 8, generator=g) > 0.5).float() if seed % 2 else torch.rand(8, 1, 8, 8, generator=g)
    y = torch.randint(0, 3, (8,), generator=g)
    cfg = AttackConfig(method, e255, 1 if method == "fgsm" else iters, step)
    adv = run_attack(toy_target(seed=seed % 5), x, y, cfg)
    assert (adv - x).abs().max() <= cfg.epsilon + 1e-6
    assert adv.min() >= 0 and adv.max() <= 1


def test_margin_loss_value():
    logits = torch.tensor([[1.0, 6.0, 0.5]])
    assert margin_loss(logits, torch.tensor([1])).item() == pytest.approx(5.0)
    # misclassified, floored at -margin
    assert margin_loss(logits, torch.tensor([0]), margin=2.0).item() == pytest.approx(-2.0)


def test_cw_never_worse_than_start():
    model = toy_target()
    x = torch.rand(20, 1, 8, 8)
    y = torch.randint(0, 3, (20,))
    adv = cw_linf(model, x, y, 8 / 255)
    with torch.no_grad():
        assert (margin_loss(model(adv), y) <= margin_loss(model(x), y) + 1e-6).all()


def test_non_finite_gradient_raises():
    class Bad(nn.Module):
        def forward(self, x):
            z = x.flatten(1).sum(1, keepdim=True)
            return torch.cat([z, z * float("nan")], dim=1)

    with pytest.raises(AttackError):
        fgsm(Bad(), torch.rand(2, 1, 2, 2), torch.tensor([0, 1]), 0.1)


def test_generate_attack_set_contract(tmp_path):
    examples = random_examples(30)
    model = toy_target()
    aset = generate_attack_set(model, examples, AttackConfig("bim", 16), batch_size=7)
    assert len(aset) == len(examples)
    assert np.array_equal(aset.labels, examples.labels)
    assert np.all(aset.linf_distance() <= 16 / 255 + 1e-6)
    assert aset[3].source.label == aset[3].label
    save_attack_set(aset, tmp_path / "a.advset")
    back = load_attack_set(tmp_path / "a.advset", source=examples)
    assert np.array_equal(back.pixels, aset.pixels) and back.method == "bim" and back.epsilon_255 == 16
    with pytest.raises(ValueError):
        load_attack_set(tmp_path / "a.advset", source=random_examples(30, seed=1))


def test_attacks_reduce_toy_accuracy():
    examples = random_examples(200)
    model = toy_target()
    with torch.no_grad():
        y_pred = model(torch.from_numpy(np.array(examples.pixels))).argmax(1).numpy()
    # label each image with the model's own prediction so clean accuracy is 1
    from advlab.core.datasets import ExampleSet

    own = ExampleSet(examples.pixels, y_pred, examples.descriptor)
    for method in ("fgsm", "bim", "cw"):
        aset = generate_attack_set(model, own, AttackConfig(method, 32))
        with torch.no_grad():
            acc = (model(torch.from_numpy(aset.pixels)).argmax(1).numpy() == y_pred).mean()
        assert acc < 1.0
