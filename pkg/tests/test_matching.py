"""Correspondence: descriptor fields, nearest-neighbor matching, oracles."""
import numpy as np
import pytest

from querytune.backbone import Model, ModelConfig
from querytune.backbone.text import CONCEPT_WORD
from querytune.errors import EmptyMaskError, InvalidArgument
from querytune.matching import (MatchConfig, MatchSet, dift_descriptors,
                                match, resize_mask)

SMALL = ModelConfig(vae="identity", image_hw=16, image_channels=3,
                    latent_hw=16, latent_channels=3)


def brute_force(desc_ref, desc_gen, mask_ref, config):
    """Independent exhaustive scan with explicit loops and raw cosines."""
    h, w, d = desc_ref.shape
    gh, gw, _ = desc_gen.shape
    coords = [(r, c) for r in range(h) for c in range(w)
              if mask_ref[r, c] > 0.5]
    if config.sampling == "all_masked":
        sel = coords[:config.n]
    else:
        rng = np.random.default_rng(config.sample_seed)
        if len(coords) <= config.n:
            sel = coords
        else:
            idx = sorted(rng.choice(len(coords), size=config.n,
                                    replace=False))
            sel = [coords[i] for i in idx]

    def unit(v):
        n = np.linalg.norm(v)
        return v / n if n > 0 else np.eye(len(v))[0] * 0.0

    pairs, scores = [], []
    for (r, c) in sel:
        a = unit(desc_ref[r, c])
        best, best_s = None, -np.inf
        for gr in range(gh):
            for gc in range(gw):
                s = float(np.dot(a, unit(desc_gen[gr, gc])))
                if s > best_s:  # strict: first occurrence keeps ties
                    best, best_s = (gr, gc), s
        pairs.append(((r, c), best))
        scores.append(best_s)
    return pairs, scores


# ---------------------------------------------------------------------------
# fixtures and identities


def test_identity_matches():
    rng = np.random.default_rng(0)
    d = rng.standard_normal((6, 6, 8))
    ms = match(d, d, np.ones((6, 6)), MatchConfig(n=36))
    for (ref, gen) in ms.pairs:
        assert ref == gen
    np.testing.assert_allclose(ms.scores, 1.0, atol=1e-12)


def test_wraparound_shift_fixture():
    rng = np.random.default_rng(1)
    d = rng.standard_normal((8, 8, 6))
    shifted = np.roll(d, shift=(2, 3), axis=(0, 1))
    ms = match(d, shifted, np.ones((8, 8)), MatchConfig(n=64))
    for (r, c), (gr, gc) in ms.pairs:
        assert (gr - r) % 8 == 2
        assert (gc - c) % 8 == 3


def test_brute_force_oracle_equivalence():
    rng = np.random.default_rng(2)
    for trial in range(20):
        h = int(rng.integers(3, 12))
        w = int(rng.integers(3, 12))
        d = int(rng.integers(2, 10))
        ref = rng.standard_normal((h, w, d))
        gen = rng.standard_normal((h, w, d))
        mask = (rng.random((h, w)) > 0.4).astype(np.float64)
        if mask.sum() == 0:
            mask[0, 0] = 1.0
        sampling = "all_masked" if trial % 2 == 0 else "uniform_masked"
        cfg = MatchConfig(n=int(rng.integers(1, h * w + 1)),
                          sampling=sampling, sample_seed=trial)
        got = match(ref, gen, mask, cfg)
        pairs, scores = brute_force(ref, gen, mask, cfg)
        assert got.pairs == pairs
        np.testing.assert_allclose(got.scores, scores, atol=1e-12)


def test_tie_breaks_to_smallest_row_major_index():
    # every gen cell identical: the argmax must stay at (0, 0)
    ref = np.random.default_rng(3).standard_normal((4, 4, 5))
    gen = np.tile(np.array([1.0, 2.0, 0.5, -1.0, 0.0]), (4, 4, 1))
    ms = match(ref, gen, np.ones((4, 4)), MatchConfig(n=16))
    for _, gcoord in ms.pairs:
        assert gcoord == (0, 0)


# ---------------------------------------------------------------------------
# invariances and bookkeeping


def test_rescaling_invariance():
    rng = np.random.default_rng(4)
    ref = rng.standard_normal((7, 7, 6))
    gen = rng.standard_normal((7, 7, 6))
    mask = np.ones((7, 7))
    a = match(ref, gen, mask, MatchConfig(n=49))
    b = match(3.7 * ref, 0.2 * gen, mask, MatchConfig(n=49))
    assert a.pairs == b.pairs
    np.testing.assert_allclose(a.scores, b.scores, atol=1e-12)


def test_scores_recomputable_as_cosines():
    rng = np.random.default_rng(5)
    ref = rng.standard_normal((5, 5, 4))
    gen = rng.standard_normal((5, 5, 4))
    ms = match(ref, gen, np.ones((5, 5)), MatchConfig(n=25))
    for ((r, c), (gr, gc)), s in zip(ms.pairs, ms.scores):
        a, b = ref[r, c], gen[gr, gc]
        cos = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
        assert s == pytest.approx(cos, abs=1e-12)


def test_n_requested_and_capping():
    rng = np.random.default_rng(6)
    ref = rng.standard_normal((4, 4, 3))
    gen = rng.standard_normal((4, 4, 3))
    mask = np.zeros((4, 4))
    mask[1, 1] = mask[2, 3] = 1.0
    ms = match(ref, gen, mask, MatchConfig(n=10))
    assert ms.n_requested == 10
    assert len(ms) == 2
    assert {p[0] for p in ms.pairs} == {(1, 1), (2, 3)}


def test_uniform_sampling_seeded():
    rng = np.random.default_rng(7)
    ref = rng.standard_normal((8, 8, 4))
    gen = rng.standard_normal((8, 8, 4))
    mask = np.ones((8, 8))
    cfg = MatchConfig(n=10, sampling="uniform_masked", sample_seed=9)
    a = match(ref, gen, mask, cfg)
    b = match(ref, gen, mask, cfg)
    assert a.pairs == b.pairs
    c = match(ref, gen, mask,
              MatchConfig(n=10, sampling="uniform_masked", sample_seed=10))
    assert len(c) == 10
    assert a.pairs != c.pairs  # overwhelmingly likely with 64 choose 10


def test_empty_mask_raises():
    d = np.zeros((4, 4, 3))
    with pytest.raises(EmptyMaskError):
        match(d, d, np.zeros((4, 4)), MatchConfig(n=4))


def test_descriptor_dim_mismatch_rejected():
    with pytest.raises(InvalidArgument):
        match(np.zeros((4, 4, 3)), np.zeros((4, 4, 5)), np.ones((4, 4)))


def test_mask_resizes_to_descriptor_grid():
    rng = np.random.default_rng(8)
    ref = rng.standard_normal((4, 4, 3))
    gen = rng.standard_normal((4, 4, 3))
    mask = np.zeros((8, 8))
    mask[0:2, 0:2] = 1.0  # maps to the single coarse cell (0, 0)
    ms = match(ref, gen, mask, MatchConfig(n=16))
    assert {p[0] for p in ms.pairs} == {(0, 0)}


def test_resize_mask_nearest():
    m = np.array([[1.0, 0.0], [0.0, 1.0]])
    up = resize_mask(m, 4, 4)
    np.testing.assert_array_equal(up[:2, :2], 1.0)
    np.testing.assert_array_equal(up[2:, 2:], 1.0)
    np.testing.assert_array_equal(up[:2, 2:], 0.0)


def test_cycle_consistency_filters_pairs():
    rng = np.random.default_rng(9)
    ref = rng.standard_normal((6, 6, 5))
    gen = rng.standard_normal((6, 6, 5))
    mask = np.ones((6, 6))
    plain = match(ref, gen, mask, MatchConfig(n=36))
    cyc = match(ref, gen, mask, MatchConfig(n=36, cycle_consistent=True))
    assert set(cyc.pairs) <= set(plain.pairs)

    # oracle: keep (p, q) only when q's best reference cell is p
    def best(field, v):
        flat = field.reshape(-1, field.shape[-1])
        un = flat / np.linalg.norm(flat, axis=1, keepdims=True)
        u = v / np.linalg.norm(v)
        return int(np.argmax(un @ u))

    keep = [((r, c), (gr, gc)) for ((r, c), (gr, gc)) in plain.pairs
            if best(ref, gen[gr, gc]) == r * 6 + c]
    assert cyc.pairs == keep


def test_matchset_json_roundtrip():
    rng = np.random.default_rng(10)
    d = rng.standard_normal((4, 4, 3))
    ms = match(d, d, np.ones((4, 4)), MatchConfig(n=5))
    j = ms.to_json_dict()
    assert j["n_requested"] == 5
    assert len(j["pairs"]) == len(ms)
    assert tuple(j["resolution"]) == ms.resolution


# ---------------------------------------------------------------------------
# descriptors from the backbone


def test_descriptors_deterministic_and_sized():
    model = Model.init(SMALL, seed=0)
    prompt = model.vocab.encode(f"a photo of {CONCEPT_WORD}")
    z = np.random.default_rng(11).standard_normal((16, 16, 3))
    a = dift_descriptors(model, z, prompt)
    b = dift_descriptors(model, z, prompt)
    np.testing.assert_array_equal(a, b)
    side = model.config.layer_hw(model.config.deepest_sa_layer)
    assert a.shape[:2] == (side, side)

    z2 = np.random.default_rng(12).standard_normal((16, 16, 3))
    c = dift_descriptors(model, z2, prompt)
    flat_a = a.reshape(-1, a.shape[-1])
    flat_c = c.reshape(-1, c.shape[-1])
    ua = flat_a / np.linalg.norm(flat_a, axis=1, keepdims=True)
    uc = flat_c / np.linalg.norm(flat_c, axis=1, keepdims=True)
    assert float(np.mean(np.sum(ua * uc, axis=1))) < 0.99
