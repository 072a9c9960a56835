import inspect

import numpy as np
import pytest
import torch

from segattack.adapters import load_model
from segattack.attacker import (
    AttackConfig,
    fgsm,
    fspgd,
    get_attack,
    pgd,
    project_linf,
    random_init,
)
from segattack.errors import ConfigError, ShapeError

from .conftest import ConstantModel


@pytest.fixture(scope="module")
def toy():
    return load_model("toy-cnn-a")


@pytest.fixture
def image():
    g = torch.Generator().manual_seed(3)
    return torch.rand(16, 16, 3, generator=g)


@pytest.fixture
def labels():
    y = torch.zeros(16, 16, dtype=torch.long)
    y[4:10, 4:10] = 1
    return y


# --- random_init / project_linf ------------------------------------------------------


def test_random_init_zero_eps_is_identity(image):
    assert torch.equal(random_init(image, 0.0, seed=1), image)


def test_random_init_deterministic_and_bounded(image):
    a, b = random_init(image, 8 / 255, seed=5), random_init(image, 8 / 255, seed=5)
    assert torch.equal(a, b)
    assert float((a - image).abs().max()) <= 8 / 255 + 1e-7
    assert float(a.min()) >= 0 and float(a.max()) <= 1
    assert not torch.equal(a, random_init(image, 8 / 255, seed=6))


def test_project_inside_ball_unchanged(image):
    x_adv = (image + 0.01).clamp(0, 1)
    assert torch.equal(project_linf(x_adv, image, 0.02), x_adv)


def test_project_hard_clip():
    x = torch.full((2, 2, 3), 0.5)
    out = project_linf(x + 2 * 0.03, x, 0.03)
    assert torch.allclose(out, x + 0.03)


def test_project_range_clamp_dominates():
    x = torch.ones(2, 2, 3)
    eps = 8 / 255
    assert torch.equal(project_linf(x + eps / 2, x, eps, pixel_clamp=True), x)
    assert torch.allclose(project_linf(x + eps / 2, x, eps, pixel_clamp=False), x + eps / 2)


def test_project_idempotent(image):
    g = torch.Generator().manual_seed(0)
    x_adv = image + torch.randn(image.shape, generator=g) * 0.1
    once = project_linf(x_adv, image, 0.05)
    assert torch.equal(project_linf(once, image, 0.05), once)


def test_project_shape_mismatch():
    with pytest.raises(ShapeError):
        project_linf(torch.zeros(2, 2, 3), torch.zeros(2, 3, 3), 0.1)


# --- config --------------------------------------------------------------------------------


def test_config_defaults():
    cfg = AttackConfig()
    assert cfg.epsilon == 8 / 255 and cfg.alpha == 2 / 255
    assert cfg.iterations == 20 and cfg.tau == pytest.approx(0.5)


@pytest.mark.parametrize(
    "kwargs",
    [dict(alpha=0.1, epsilon=0.01), dict(tau=1.0), dict(loss_mode="nope"), dict(iterations=-1)],
)
def test_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        AttackConfig(**kwargs).validate()


def test_config_unknown_key():
    with pytest.raises(ConfigError):
        AttackConfig.from_dict({"epsilon": 0.1, "bogus": 1})


# --- fgsm ----------------------------------------------------------------------------------


def test_fgsm_zero_eps(toy, image, labels):
    assert torch.equal(fgsm(toy, image, labels, 0.0), image)


def test_fgsm_zero_gradient_leaves_image(image, labels):
    out = fgsm(ConstantModel(), image, labels, 8 / 255)
    assert torch.equal(out, image)


def test_fgsm_moves_by_eps(toy, image, labels):
    out = fgsm(toy, image, labels, 4 / 255)
    assert float((out - image).abs().max()) <= 4 / 255 + 1e-7
    assert float((out - image).abs().max()) > 0


# --- pgd -----------------------------------------------------------------------------------


def test_pgd_zero_iterations_returns_init(toy, image, labels):
    cfg = AttackConfig(iterations=0, seed=4)
    tr = pgd(toy, image, labels, cfg)
    assert len(tr) == 0
    assert torch.equal(tr.x_adv, project_linf(random_init(image, cfg.epsilon, 4), image, cfg.epsilon))


def test_pgd_ball_invariant(toy, image, labels):
    cfg = AttackConfig(iterations=5, seed=1)
    tr = pgd(toy, image, labels, cfg)
    assert len(tr) == 5
    assert all(r["linf"] <= cfg.epsilon + 1e-6 for r in tr.records)
    assert float(tr.x_adv.min()) >= 0 and float(tr.x_adv.max()) <= 1


# --- fspgd ---------------------------------------------------------------------------------


def test_fspgd_is_label_free():
    assert list(inspect.signature(fspgd).parameters) == ["model", "x", "cfg"]


def test_fspgd_schedule_and_ball(toy, image):
    cfg = AttackConfig(iterations=8, seed=2, layer_id="enc3")
    tr = fspgd(toy, image, cfg)
    assert [r["lambda_t"] for r in tr.records] == [t / 8 for t in range(8)]
    assert all(r["linf"] <= cfg.epsilon + 1e-6 for r in tr.records)
    assert float(tr.x_adv.min()) >= 0 and float(tr.x_adv.max()) <= 1
    first = tr.records[0]
    assert first["combined"] == first["l_in"]


def test_fspgd_seed_determinism(toy, image):
    cfg = AttackConfig(iterations=4, seed=9, layer_id="enc2")
    a, b = fspgd(toy, image, cfg), fspgd(toy, image, cfg)
    assert torch.equal(a.x_adv, b.x_adv)
    assert a.records == b.records


def test_fspgd_descends_similarity(toy, image):
    cfg = AttackConfig(iterations=10, seed=0, layer_id="enc3", loss_mode="ex_only")
    tr = fspgd(toy, image, cfg)
    assert tr.records[-1]["l_ex"] < tr.records[0]["l_ex"]


def test_fspgd_in_only_mode_records(toy, image):
    cfg = AttackConfig(iterations=3, seed=0, layer_id="enc3", loss_mode="in_only")
    tr = fspgd(toy, image, cfg)
    assert len(tr) == 3


def test_fspgd_unknown_layer(toy, image):
    from segattack.errors import AdapterError

    with pytest.raises(AdapterError):
        fspgd(toy, image, AttackConfig(iterations=1, layer_id="nope"))


def test_fspgd_empty_mask_recorded(image):
    model = ConstantModel(features_zero=True)
    tr = fspgd(model, image, AttackConfig(iterations=2, layer_id="feat"))
    assert tr.warnings and "empty" in tr.warnings[0]
    assert all(r["l_in"] == 0.0 for r in tr.records)


def test_smaller_budget_iterates_feasible_for_larger(toy, image, labels):
    small = pgd(toy, image, labels, AttackConfig(epsilon=4 / 255, alpha=1 / 255, iterations=4, seed=3))
    assert float((small.x_adv - image).abs().max()) <= 8 / 255


def test_registry():
    for name in ("fgsm", "pgd", "fspgd"):
        assert callable(get_attack(name))
    with pytest.raises(ConfigError):
        get_attack("segpgd")
