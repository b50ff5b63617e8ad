import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gradient_rel_error, loop_l1
from sggan.data import LabelGrouping
from sggan.errors import ConfigError, NumericError, ShapeError
from sggan.losses import (
    LOGIT_CLAMP,
    TERMS,
    LossWeights,
    adversarial_d_loss,
    adversarial_g_loss,
    composite_loss,
    feature_loss,
    parsed_semantic_loss,
    pixel_loss,
    pyramid_l1,
    semantic_loss,
    weighted_total,
)
from sggan.networks import (
    FeaturePyramid,
    PatchDiscriminator,
    build_feature_network,
    build_parsing_network,
)

LN2 = math.log(2.0)


# ---------------------------------------------------------------------------
# adversarial


def test_perfect_discriminator_has_zero_loss():
    real = torch.full((1, 1, 30, 30), 60.0, dtype=torch.float64)
    fake = torch.full((1, 1, 30, 30), -60.0, dtype=torch.float64)
    assert abs(float(adversarial_d_loss(real, fake))) <= 1e-9
    assert abs(float(adversarial_g_loss(-fake))) <= 1e-9


def test_chance_discriminator_values():
    zero = torch.zeros(2, 1, 6, 6, dtype=torch.float64)
    assert abs(float(adversarial_d_loss(zero, zero)) - 2 * LN2) <= 1e-9
    assert abs(float(adversarial_g_loss(zero)) - LN2) <= 1e-9
    # at equilibrium each half of the D objective corresponds to D's output probability 0.5
    assert abs(float(adversarial_d_loss(zero, torch.full_like(zero, -1e3))) - LN2) <= 1e-9


def test_logit_clamp_bounds_probability():
    p = torch.sigmoid(torch.tensor(LOGIT_CLAMP, dtype=torch.float64))
    assert abs(float(p) - (1 - 1e-7)) < 1e-15
    # a confidently wrong discriminator gets a large but finite loss
    loss = adversarial_d_loss(torch.tensor([-1e6]), torch.tensor([1e6]))
    assert math.isfinite(float(loss)) and float(loss) == pytest.approx(2 * LOGIT_CLAMP, rel=1e-5)


def test_adversarial_errors_on_non_finite():
    with pytest.raises(NumericError):
        adversarial_d_loss(torch.tensor([float("nan")]), torch.zeros(1))
    with pytest.raises(NumericError):
        adversarial_g_loss(torch.tensor([float("inf")]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_adversarial_permutation_symmetry_and_monotonicity(seed):
    g = torch.Generator().manual_seed(seed)
    real = torch.randn(36, generator=g, dtype=torch.float64) * 3
    fake = torch.randn(36, generator=g, dtype=torch.float64) * 3
    perm = torch.randperm(36, generator=g)
    assert float(adversarial_d_loss(real, fake)) == pytest.approx(
        float(adversarial_d_loss(real[perm], fake[perm])), abs=1e-12)
    assert float(adversarial_d_loss(real, fake)) >= 0
    raised = fake.clone()
    raised[int(perm[0])] += 0.5
    assert float(adversarial_g_loss(raised)) < float(adversarial_g_loss(fake))


# ---------------------------------------------------------------------------
# pixel


def test_pixel_loss_fixed_points_and_oracle(rng):
    a = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 9, 7)))
    b = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 9, 7)))
    assert float(pixel_loss(a, a)) == 0.0
    assert float(pixel_loss(torch.ones(1, 3, 4, 4), -torch.ones(1, 3, 4, 4))) == 2.0
    assert float(pixel_loss(a, b)) == pytest.approx(loop_l1(a.numpy(), b.numpy()), abs=1e-12)
    with pytest.raises(ShapeError):
        pixel_loss(a, b[:, :, :8])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_pixel_loss_triangle_inequality(seed):
    r = np.random.default_rng(seed)
    a, b, c = (torch.from_numpy(r.uniform(-1, 1, (1, 3, 5, 5))) for _ in range(3))
    assert float(pixel_loss(a, c)) <= float(pixel_loss(a, b)) + float(pixel_loss(b, c)) + 1e-12


# ---------------------------------------------------------------------------
# pyramid / semantic


def _pyramid(seed, weights=None):
    g = torch.Generator().manual_seed(seed)
    stages = [torch.randn(2, 4, s, s, generator=g, dtype=torch.float64) for s in (16, 8, 4, 2, 1)]
    return FeaturePyramid(stages) if weights is None else FeaturePyramid(stages, weights)


def test_pyramid_l1_fixed_points():
    p = _pyramid(0)
    assert float(pyramid_l1(p, p)) == 0.0
    shifted = FeaturePyramid([s + 1 for s in p.stages])
    assert float(pyramid_l1(shifted, p)) == pytest.approx(1.46875, abs=1e-12)


def test_pyramid_zero_weight_stage_is_ignored():
    w = (1 / 32, 1 / 16, 0.0, 1 / 4, 1.0)
    a, b = _pyramid(1, w), _pyramid(2, w)
    c = FeaturePyramid(list(b.stages), w)
    c.stages[2] = torch.randn_like(c.stages[2]) * 100
    assert float(pyramid_l1(a, b)) == float(pyramid_l1(a, c))


def test_pyramid_mismatch_errors():
    p = _pyramid(0)
    with pytest.raises(ShapeError):
        pyramid_l1(p, FeaturePyramid(p.stages[:4], p.weights[:4]))
    q = FeaturePyramid([s[:, :2] for s in p.stages])
    with pytest.raises(ShapeError):
        pyramid_l1(p, q)


def test_semantic_loss_fixed_points():
    m = torch.softmax(torch.randn(1, 2, 6, 6, dtype=torch.float64), 1)
    assert float(semantic_loss(m, m)) == 0.0
    one = torch.zeros(1, 2, 6, 6, dtype=torch.float64)
    one[:, 0] = 1
    other = 1 - one
    assert float(semantic_loss(one, other)) == 1.0
    with pytest.raises(ConfigError):
        semantic_loss(m, torch.zeros(1, 3, 6, 6, dtype=torch.float64))


def test_semantic_loss_spatial_permutation_invariance():
    g = torch.Generator().manual_seed(3)
    a = torch.softmax(torch.randn(1, 4, 5, 5, generator=g), 1)
    b = torch.softmax(torch.randn(1, 4, 5, 5, generator=g), 1)
    perm = torch.randperm(25, generator=g)
    pa = a.flatten(2)[..., perm].view_as(a)
    pb = b.flatten(2)[..., perm].view_as(b)
    assert float(semantic_loss(a, b)) == pytest.approx(float(semantic_loss(pa, pb)), abs=1e-7)


# ---------------------------------------------------------------------------
# composite


def test_composite_examples():
    zero = {t: 0.0 for t in TERMS}
    assert composite_loss({**zero, "pixel": 1.0}, LossWeights()).total == 100.0
    w = LossWeights(1.0, 0.0, 0.0, 0.0, 0.0)
    assert composite_loss({**zero, "gan_g": 0.37, "pixel": 5.0}, w).total == 0.37
    assert composite_loss({**zero, "semantic": 1.0}, LossWeights.arl()).total == 20.0


def test_weights_validation_and_restriction():
    with pytest.raises(ConfigError):
        LossWeights(lambda_r=-1.0)
    with pytest.raises(ConfigError):
        LossWeights(0, 0, 0, 0, 0)
    w = LossWeights().restricted({"GAN", "R"})
    assert (w.lambda_p, w.lambda_i, w.lambda_s) == (0.0, 0.0, 0.0)
    assert (w.lambda_g, w.lambda_r) == (1.0, 100.0)
    with pytest.raises(ConfigError):
        LossWeights().restricted({"GAN", "X"})


_term_values = st.fixed_dictionaries({t: st.floats(0, 10, allow_nan=False) for t in TERMS})


@settings(max_examples=100, deadline=None)
@given(terms=_term_values, which=st.sampled_from(TERMS), arl=st.booleans())
def test_composite_total_and_linearity(terms, which, arl):
    w = LossWeights.arl() if arl else LossWeights()
    report = composite_loss(terms, w)
    expected = sum(w.for_term(t) * terms[t] for t in TERMS)
    assert abs(report.total - expected) <= 1e-6
    field = {"gan_g": "lambda_g", "pixel": "lambda_r", "perceptual": "lambda_p",
             "identity": "lambda_i", "semantic": "lambda_s"}[which]
    doubled = LossWeights(**{**w.__dict__, field: 2 * getattr(w, field)})
    delta = composite_loss(terms, doubled).total - report.total
    assert abs(delta - w.for_term(which) * terms[which]) <= 1e-6


def test_composite_rejects_non_finite_and_unknown():
    with pytest.raises(NumericError):
        composite_loss({"pixel": float("nan")}, LossWeights())
    with pytest.raises(ConfigError):
        composite_loss({"bogus": 1.0}, LossWeights())


# ---------------------------------------------------------------------------
# gradients (float64, 8x8x3, central differences)


@pytest.fixture(scope="module")
def grad_setup():
    torch.manual_seed(0)
    target = torch.rand(1, 3, 8, 8, dtype=torch.float64) * 2 - 1
    fake = torch.rand(1, 3, 8, 8, dtype=torch.float64) * 2 - 1
    feat = build_feature_network(1, channels=(4, 6, 8, 8, 8)).double().eval()
    parser = build_parsing_network(2, width=4).double().eval()
    disc = PatchDiscriminator(ndf=4, n_layers=1).double().eval()  # 8x8 -> 2x2 logits
    return fake, target, feat, parser, disc


def _loss_fns(target, feat, parser, disc):
    cond = torch.zeros_like(target)
    two = LabelGrouping.two_class()
    return {
        "L_R": lambda f: pixel_loss(f, target),
        "L_P": lambda f: feature_loss(feat, f, target),
        "L_I": lambda f: feature_loss(feat, f, target),
        "L_S": lambda f: parsed_semantic_loss(parser, f, target, two),
        "L_G": lambda f: adversarial_g_loss(disc(cond, f)),
    }


@pytest.mark.parametrize("name", ["L_R", "L_P", "L_I", "L_S", "L_G"])
def test_gradients_match_finite_differences(grad_setup, name):
    fake, target, feat, parser, disc = grad_setup
    fn = _loss_fns(target, feat, parser, disc)[name]
    assert gradient_rel_error(fn, fake) <= 1e-3


def test_gradcheck_cross_validation(grad_setup):
    fake, target, feat, parser, _ = grad_setup
    x = fake.clone().requires_grad_(True)
    assert torch.autograd.gradcheck(lambda f: feature_loss(feat, f, target), (x,), eps=1e-6, atol=1e-7, rtol=1e-3)
    assert torch.autograd.gradcheck(lambda f: parsed_semantic_loss(parser, f, target, LabelGrouping.identity()),
                                    (x,), eps=1e-6, atol=1e-7, rtol=1e-3)


def test_weighted_total_accepts_tensors():
    t = {"pixel": torch.tensor(0.5, requires_grad=True), "semantic": torch.tensor(2.0)}
    total = weighted_total(t, LossWeights())
    total.backward()
    assert float(total.detach()) == 52.0 and float(t["pixel"].grad) == 100.0
