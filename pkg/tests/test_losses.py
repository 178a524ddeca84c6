import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from srstar.degradation import Domain, ShapeError
from srstar.losses import (
    BackboneUnavailableError, G_PARTS, LossWeights, TrainingDivergenceError, adversarial_d,
    adversarial_g, cls_loss, cycle_loss, fixed_random_backbone, l1_loss, load_backbone,
    perceptual_loss, pretrained_backbone, total_d, total_g, tv_loss,
)

from oracles import central_difference, cross_entropy_loop, l1_loop


def rel_error(analytic, numeric):
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)


@pytest.fixture(scope="module")
def backbone64():
    return fixed_random_backbone(seed=0).double()


def test_l1_examples():
    a = torch.rand(3, 8, 8)
    assert l1_loss(a, a).item() == 0
    assert l1_loss(torch.zeros(3, 4, 4), torch.ones(3, 4, 4)).item() == 1
    rng = np.random.default_rng(0)
    x, y = rng.random((3, 8, 8)), rng.random((3, 8, 8))
    assert abs(l1_loss(torch.from_numpy(x), torch.from_numpy(y)).item() - l1_loop(x, y)) < 1e-7
    with pytest.raises(ShapeError):
        l1_loss(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))


def test_cycle_matches_l1_contract():
    rng = np.random.default_rng(1)
    x, y = rng.random((2, 3, 8, 8)), rng.random((2, 3, 8, 8))
    assert cycle_loss(torch.from_numpy(x), torch.from_numpy(x)).item() == 0
    assert cycle_loss(torch.zeros(4), torch.ones(4)).item() == 1
    assert abs(cycle_loss(torch.from_numpy(x), torch.from_numpy(y)).item() - l1_loop(x, y)) < 1e-7
    with pytest.raises(ShapeError):
        cycle_loss(torch.zeros(2, 3), torch.zeros(3, 2))


def test_tv_examples():
    assert tv_loss(torch.full((3, 8, 8), 0.3)).item() == 0
    delta = 0.05
    ramp = (torch.arange(10, dtype=torch.float64) * delta).expand(3, 6, 10)
    # 9 horizontal pairs per row, all |delta|; vertical diffs vanish
    assert abs(tv_loss(ramp).item() - delta) < 1e-12
    img = torch.rand(3, 8, 8, dtype=torch.float64)
    assert abs(tv_loss(img).item() - tv_loss(img + 0.7).item()) < 1e-12
    with pytest.raises(ShapeError):
        tv_loss(torch.zeros(3, 1, 8))


def test_adversarial_closed_forms():
    assert abs(adversarial_g(torch.zeros(4, 1, 2, 2)).item() - math.log(2)) < 1e-7
    assert abs(adversarial_d(torch.zeros(4, 1, 2, 2), torch.zeros(4, 1, 2, 2)).item() - 2 * math.log(2)) < 1e-7
    perfect = adversarial_d(torch.full((4, 1, 2, 2), 50.0), torch.full((4, 1, 2, 2), -50.0))
    assert perfect.item() < 1e-20


def test_cls_examples():
    assert abs(cls_loss(torch.zeros(5), Domain.HR).item() - math.log(5)) < 1e-6
    logits = torch.zeros(2, 5, dtype=torch.float64)
    logits[0, 4] = 1e6
    logits[1, 1] = 1e6
    assert cls_loss(logits, [Domain.HR, Domain.BILINEAR_LR]).item() < 1e-9
    rng = np.random.default_rng(2)
    for _ in range(10):
        z = rng.normal(size=5) * 3
        t = int(rng.integers(0, 5))
        got = cls_loss(torch.from_numpy(z), t).item()
        assert abs(got - cross_entropy_loop(z, t)) < 1e-7


def test_perceptual_examples(backbone64):
    a = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    b = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    assert perceptual_loss(a, a, backbone64).item() == 0
    assert perceptual_loss(a, b, backbone64).item() >= 0
    assert abs(perceptual_loss(a, b, backbone64).item() - perceptual_loss(b, a, backbone64).item()) < 1e-15
    with pytest.raises(BackboneUnavailableError):
        perceptual_loss(a, b, None)


def test_backbone_frozen_and_deterministic():
    bb = fixed_random_backbone(seed=0)
    assert all(not p.requires_grad for p in bb.parameters())
    bb.train()
    assert not bb.training
    x = torch.rand(1, 3, 16, 16)
    other = fixed_random_backbone(seed=0)
    for fa, fb in zip(bb(x), other(x)):
        assert torch.equal(fa, fb)
    assert bb.provenance == "fixed-random"


def test_pretrained_backbone_missing_weights(tmp_path):
    with pytest.raises(BackboneUnavailableError):
        pretrained_backbone("vgg19", tmp_path / "nope.pth")
    with pytest.raises(BackboneUnavailableError):
        load_backbone("resnet-imaginary")


def _grad_check(loss_fn, *arrays, wrt=0):
    tensors = [torch.from_numpy(a.copy()).requires_grad_(i == wrt) for i, a in enumerate(arrays)]
    loss_fn(*tensors).backward()
    analytic = tensors[wrt].grad.numpy()

    def scalar(x):
        args = [torch.from_numpy(x) if i == wrt else torch.from_numpy(a) for i, a in enumerate(arrays)]
        with torch.no_grad():
            return loss_fn(*args).item()

    return rel_error(analytic, central_difference(scalar, arrays[wrt]))


def test_gradients_match_finite_differences(backbone64):
    rng = np.random.default_rng(3)
    a, b = rng.random((1, 3, 8, 8)), rng.random((1, 3, 8, 8))
    assert _grad_check(l1_loss, a, b) < 1e-3
    assert _grad_check(cycle_loss, a, b) < 1e-3
    assert _grad_check(tv_loss, a) < 1e-3
    assert _grad_check(lambda x, y: perceptual_loss(x, y, backbone64), a, b) < 1e-3
    maps_r, maps_f = rng.normal(size=(4, 1, 8, 8)), rng.normal(size=(4, 1, 8, 8))
    assert _grad_check(adversarial_g, maps_f) < 1e-3
    assert _grad_check(adversarial_d, maps_r, maps_f, wrt=0) < 1e-3
    assert _grad_check(adversarial_d, maps_r, maps_f, wrt=1) < 1e-3
    logits = rng.normal(size=(8, 5))
    labels = [Domain(int(i)) for i in rng.integers(0, 5, 8)]
    assert _grad_check(lambda z: cls_loss(z, labels), logits) < 1e-3


def test_loss_weights_defaults():
    w = LossWeights()
    assert w.generator() == {"per": 1, "gan": 1, "tv": 1, "cls": 1, "l1": 10, "cyc": 10}
    assert w.discriminator() == {"gan": 1, "cls": 1}
    with pytest.raises(ValueError):
        LossWeights(w_l1=-1)


def test_total_examples():
    ones = {k: 1.0 for k in G_PARTS}
    assert total_g(ones) == 24
    assert total_g({k: 0.0 for k in G_PARTS}) == 0
    assert total_d({"gan": 0.5, "cls": 0.25}) == 0.75


def test_total_rejects_non_finite():
    parts = {k: 1.0 for k in G_PARTS}
    parts["cyc"] = float("nan")
    with pytest.raises(TrainingDivergenceError, match="cyc"):
        total_g(parts, iteration=7)
    with pytest.raises(TrainingDivergenceError, match="gan"):
        total_d({"gan": torch.tensor(float("inf")), "cls": 0.0})


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(G_PARTS), st.floats(-5, 5),
       st.lists(st.floats(0, 3), min_size=6, max_size=6))
def test_total_g_linear_in_each_part(name, delta, values):
    parts = dict(zip(G_PARTS, values))
    w = LossWeights()
    base = total_g(parts, w)
    parts[name] += delta
    assert abs(total_g(parts, w) - base - w.generator()[name] * delta) < 1e-9


def test_losses_nonnegative():
    rng = np.random.default_rng(4)
    bb = fixed_random_backbone()
    for _ in range(20):
        a, b = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
        maps = torch.from_numpy(rng.normal(size=(2, 1, 2, 2)) * 10)
        assert l1_loss(a, b) >= 0 and tv_loss(a) >= 0 and perceptual_loss(a, b, bb) >= 0
        assert adversarial_g(maps) >= 0 and adversarial_d(maps, -maps) >= 0
        assert cls_loss(torch.from_numpy(rng.normal(size=5)), 2) >= 0
