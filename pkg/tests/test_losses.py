"""Refinement losses: zero cases, hand values, scalar-loop oracles, reports."""
import numpy as np
import pytest

import querytune.autodiff as ad
from querytune.backbone import Model, ModelConfig
from querytune.backbone.text import CONCEPT_WORD
from querytune.errors import EmptyMatchError, InvalidArgument, NumericalFailure
from querytune.features import AppearanceFeatures, CrossAttnMaps
from querytune.losses import (combine, combined_objective, draw_ldm_batch,
                              loss_ca, loss_ldm, loss_sa)
from querytune.matching import MatchSet

SMALL = ModelConfig(vae="identity", image_hw=16, image_channels=3,
                    latent_hw=16, latent_channels=3)


def feats(arrs, t=0):
    return AppearanceFeatures(per_layer={k: np.asarray(v, dtype=np.float64)
                                         for k, v in arrs.items()},
                              source_t=t)


def maps(arrs, t=0):
    return CrossAttnMaps(per_layer={k: np.asarray(v, dtype=np.float64)
                                    for k, v in arrs.items()}, source_t=t)


def identity_matches(h, w):
    pairs = [((r, c), (r, c)) for r in range(h) for c in range(w)]
    return MatchSet(pairs=pairs, scores=[1.0] * len(pairs),
                    resolution=(h, w), n_requested=len(pairs))


# ---------------------------------------------------------------------------
# appearance loss


def test_sa_zero_on_identical_features():
    g = np.random.default_rng(0).standard_normal((4, 4, 6))
    ms = identity_matches(4, 4)
    out = loss_sa(feats({"sa": g}), feats({"sa": g.copy()}), ms)
    assert float(ad.value(out)) == 0.0


def test_sa_unit_vector_pair_value():
    # single pair (1,0) vs (0,1): squared distance 1 + 1 = 2
    ref = np.zeros((1, 1, 2))
    ref[0, 0] = [1.0, 0.0]
    gen = np.zeros((1, 1, 2))
    gen[0, 0] = [0.0, 1.0]
    ms = identity_matches(1, 1)
    out = loss_sa(feats({"sa": ref}), feats({"sa": gen}), ms)
    assert float(ad.value(out)) == pytest.approx(2.0, abs=1e-15)


def test_sa_scalar_loop_oracle():
    rng = np.random.default_rng(1)
    ref = rng.standard_normal((5, 5, 7))
    gen = rng.standard_normal((5, 5, 7))
    pairs = [((r, c), ((r + 1) % 5, (c + 2) % 5))
             for r in range(5) for c in range(3)]
    ms = MatchSet(pairs=pairs, scores=[0.0] * len(pairs), resolution=(5, 5),
                  n_requested=len(pairs))
    out = float(ad.value(loss_sa(feats({"sa": ref}), feats({"sa": gen}), ms)))

    acc = 0.0
    for (r, c), (gr, gc) in pairs:
        d = gen[gr, gc] - ref[r, c]
        acc += float(np.sum(d * d))
    assert out == pytest.approx(acc / len(pairs), rel=1e-12)


def test_sa_averages_over_layers():
    rng = np.random.default_rng(2)
    a_ref, a_gen = rng.standard_normal((3, 3, 4)), rng.standard_normal((3, 3, 4))
    b_ref, b_gen = rng.standard_normal((3, 3, 4)), rng.standard_normal((3, 3, 4))
    ms = identity_matches(3, 3)
    both = float(ad.value(loss_sa(feats({"a": a_ref, "b": b_ref}),
                                  feats({"a": a_gen, "b": b_gen}), ms)))
    la = float(ad.value(loss_sa(feats({"a": a_ref}), feats({"a": a_gen}), ms)))
    lb = float(ad.value(loss_sa(feats({"b": b_ref}), feats({"b": b_gen}), ms)))
    assert both == pytest.approx((la + lb) / 2.0, rel=1e-12)


def test_sa_layer_set_mismatch_and_empty():
    g = np.zeros((2, 2, 3))
    ms = identity_matches(2, 2)
    with pytest.raises(InvalidArgument):
        loss_sa(feats({"a": g}), feats({"b": g}), ms)
    empty = MatchSet(pairs=[], scores=[], resolution=(2, 2), n_requested=4)
    with pytest.raises(EmptyMatchError):
        loss_sa(feats({"a": g}), feats({"a": g}), empty)


def test_sa_cross_resolution_uses_sampling():
    # gen grid at half resolution: coords rescale and interpolate
    ref = np.zeros((4, 4, 1))
    ref[0, 0, 0] = 1.0
    gen = np.full((2, 2, 1), 0.25)
    pairs = [((0, 0), (0, 0))]
    ms = MatchSet(pairs=pairs, scores=[1.0], resolution=(4, 4), n_requested=1)
    out = float(ad.value(loss_sa(feats({"sa": ref}), feats({"sa": gen}), ms)))
    # constant gen grid samples to 0.25 anywhere: (0.25 - 1)^2
    assert out == pytest.approx(0.5625, abs=1e-12)


# ---------------------------------------------------------------------------
# cross-attention loss


def test_ca_zero_and_hand_value():
    m = np.random.default_rng(3).random((4, 4))
    ms = identity_matches(4, 4)
    assert float(ad.value(loss_ca(maps({"ca": m}), maps({"ca": m.copy()}),
                                  ms))) == 0.0

    a = np.full((1, 1), 0.8)
    b = np.full((1, 1), 0.3)
    one = MatchSet(pairs=[((0, 0), (0, 0))], scores=[1.0], resolution=(1, 1),
                   n_requested=1)
    out = loss_ca(maps({"ca": a}), maps({"ca": b}), one)
    assert float(ad.value(out)) == pytest.approx(0.25, abs=1e-15)


def test_ca_scalar_loop_oracle():
    rng = np.random.default_rng(4)
    ref = rng.random((6, 6))
    gen = rng.random((6, 6))
    pairs = [((r, c), ((r + 3) % 6, c)) for r in range(6) for c in range(6)]
    ms = MatchSet(pairs=pairs, scores=[0.0] * len(pairs), resolution=(6, 6),
                  n_requested=len(pairs))
    out = float(ad.value(loss_ca(maps({"ca": ref}), maps({"ca": gen}), ms)))
    acc = 0.0
    for (r, c), (gr, gc) in pairs:
        acc += float((gen[gr, gc] - ref[r, c]) ** 2)
    assert out == pytest.approx(acc / len(pairs), rel=1e-12)


# ---------------------------------------------------------------------------
# denoising loss


@pytest.fixture(scope="module")
def model():
    return Model.init(SMALL, seed=0)


@pytest.fixture(scope="module")
def prompt(model):
    return model.vocab.encode(f"a photo of {CONCEPT_WORD}")


def test_ldm_perfect_prediction_is_zero(model, prompt):
    x = np.random.default_rng(5).random((16, 16, 3))
    _, eps = draw_ldm_batch(model.schedule, (16, 16, 3), rng_seed=7)
    out = loss_ldm(model, x, prompt, rng_seed=7,
                   eps_fn=lambda zt, t, p, a: eps)
    assert float(ad.value(out)) == 0.0


def test_ldm_constant_offset_is_squared(model, prompt):
    x = np.random.default_rng(6).random((16, 16, 3))
    _, eps = draw_ldm_batch(model.schedule, (16, 16, 3), rng_seed=3)
    out = loss_ldm(model, x, prompt, rng_seed=3,
                   eps_fn=lambda zt, t, p, a: eps + 0.5)
    assert float(ad.value(out)) == pytest.approx(0.25, rel=1e-12)


def test_ldm_seeded_draw_reproducible(model, prompt):
    x = np.random.default_rng(7).random((16, 16, 3))
    a = float(ad.value(loss_ldm(model, x, prompt, rng_seed=11)))
    b = float(ad.value(loss_ldm(model, x, prompt, rng_seed=11)))
    c = float(ad.value(loss_ldm(model, x, prompt, rng_seed=12)))
    assert a == b
    assert a != c


def test_draw_ldm_batch_contents(model):
    t, eps = draw_ldm_batch(model.schedule, (2, 2, 1), rng_seed=0)
    assert 0 <= t < model.schedule.num_train_steps
    assert eps.shape == (2, 2, 1)
    t2, eps2 = draw_ldm_batch(model.schedule, (2, 2, 1), rng_seed=0)
    assert t == t2
    np.testing.assert_array_equal(eps, eps2)


# ---------------------------------------------------------------------------
# combination


def test_combine_weighted_sum():
    rep = combine(2.0, 3.0, 5.0, lambdas=(1.0, 0.5, 0.1))
    assert rep.combined == 1.0 * 2.0 + 0.5 * 3.0 + 0.1 * 5.0
    assert rep.l_sa == 2.0 and rep.l_ca == 3.0 and rep.l_ldm == 5.0
    assert rep.lambdas == (1.0, 0.5, 0.1)


def test_combine_zero_lambdas_zero():
    rep = combine(123.0, 456.0, 789.0, lambdas=(0.0, 0.0, 0.0))
    assert rep.combined == 0.0


def test_combine_rejects_non_finite():
    with pytest.raises(NumericalFailure):
        combine(np.nan, 0.0, 0.0)
    with pytest.raises(NumericalFailure):
        combine(0.0, np.inf, 0.0)


def test_combined_objective_matches_combine_bitwise():
    rng = np.random.default_rng(8)
    for _ in range(10):
        v = rng.standard_normal(3)
        lam = tuple(rng.random(3))
        rep = combine(v[0], v[1], v[2], lambdas=lam)
        var = combined_objective(ad.Var(np.array(v[0])), ad.Var(np.array(v[1])),
                                 ad.Var(np.array(v[2])), lambdas=lam)
        assert float(ad.value(var)) == rep.combined


def test_report_json_dict():
    rep = combine(1.0, 2.0, 3.0, metadata={"note": "x"})
    j = rep.to_json_dict()
    assert j["combined"] == rep.combined
    assert j["metadata"]["note"] == "x"
    assert tuple(j["lambdas"]) == rep.lambdas
