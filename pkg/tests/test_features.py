"""Feature extraction, resampling helpers, and object masks."""
import numpy as np
import pytest

from querytune.backbone import LATENT, Latent, Model, ModelConfig
from querytune.backbone.text import CONCEPT_WORD
from querytune.errors import InvalidArgument
from querytune.features import (CrossAttnMaps, ExtractionConfig,
                                bilinear_resize, bilinear_sample, extract,
                                extract_reference, object_mask, scale_coords)

SMALL = ModelConfig(vae="identity", image_hw=16, image_channels=3,
                    latent_hw=16, latent_channels=3)


@pytest.fixture(scope="module")
def model():
    return Model.init(SMALL, seed=0)


@pytest.fixture(scope="module")
def prompt(model):
    return model.vocab.encode(f"a photo of {CONCEPT_WORD}")


@pytest.fixture()
def z():
    return np.random.default_rng(0).standard_normal((16, 16, 3))


# ---------------------------------------------------------------------------
# extraction


def test_extract_deterministic(model, prompt, z):
    f1, c1 = extract(model, z, prompt)
    f2, c2 = extract(model, z, prompt)
    for k in f1.per_layer:
        np.testing.assert_array_equal(f1.per_layer[k], f2.per_layer[k])
    for k in c1.per_layer:
        np.testing.assert_array_equal(c1.per_layer[k], c2.per_layer[k])


def test_extract_defaults(model, prompt, z):
    f, c = extract(model, z, prompt)
    # deepest self-attention layer only; every cross-attention layer
    assert set(f.per_layer) == {model.config.deepest_sa_layer}
    assert set(c.per_layer) == set(model.config.ca_layer_ids)
    assert f.source_t == model.schedule.num_train_steps - 1
    for lid, grid in c.per_layer.items():
        assert grid.shape == (model.config.layer_hw(lid),) * 2


def test_ca_map_matches_direct_recomputation(model, prompt, z):
    # independent path: raw captured softmax weights -> concept column
    t = 350
    f, c = extract(model, z, prompt, config=ExtractionConfig(t=t))
    out = model.predict_noise(Latent(z), t, prompt, capture=True)
    ci = prompt.concept_index
    for lid, grid in c.per_layer.items():
        w = out.captured.ca_weights[lid]  # (heads, N, L) after batch squeeze
        assert w.ndim == 3
        np.testing.assert_allclose(np.sum(w, axis=-1), 1.0, atol=1e-5)
        side = model.config.layer_hw(lid)
        expected = np.mean(w[:, :, ci], axis=0).reshape(side, side)
        np.testing.assert_allclose(grid, expected, atol=1e-12)
        assert grid.min() >= 0.0 and grid.max() <= 1.0


def test_empty_sa_selection_still_yields_ca(model, prompt, z):
    f, c = extract(model, z, prompt, config=ExtractionConfig(sa_layers=()))
    assert f.per_layer == {}
    assert set(c.per_layer) == set(model.config.ca_layer_ids)


def test_extract_does_not_mutate_input(model, prompt):
    z = np.random.default_rng(3).standard_normal((16, 16, 3))
    before = z.copy()
    extract(model, z, prompt)
    np.testing.assert_array_equal(z, before)


def test_extract_requires_concept_for_ca(model, z):
    plain = model.vocab.encode("a photo of red circle")
    with pytest.raises(InvalidArgument):
        extract(model, z, plain)
    # fine when no cross-attention map is requested
    f, c = extract(model, z, plain, config=ExtractionConfig(ca_layers=()))
    assert c.per_layer == {}


def test_extract_reference_equals_extract_on_pixels(model, prompt):
    img = np.random.default_rng(5).random((16, 16, 3))
    f1, c1 = extract_reference(model, img, prompt)
    f2, c2 = extract(model, img, prompt)  # identity codec
    for k in f1.per_layer:
        np.testing.assert_array_equal(f1.per_layer[k], f2.per_layer[k])
    for k in c1.per_layer:
        np.testing.assert_array_equal(c1.per_layer[k], c2.per_layer[k])


def test_noised_extraction_is_seeded(model, prompt, z):
    cfg_a = ExtractionConfig(t=500, add_noise=True, noise_seed=1)
    f1, _ = extract(model, z, prompt, config=cfg_a)
    f2, _ = extract(model, z, prompt, config=cfg_a)
    f3, _ = extract(model, z, prompt,
                    config=ExtractionConfig(t=500, add_noise=True,
                                            noise_seed=2))
    k = next(iter(f1.per_layer))
    np.testing.assert_array_equal(f1.per_layer[k], f2.per_layer[k])
    assert np.linalg.norm(f1.per_layer[k] - f3.per_layer[k]) > 0.0


# ---------------------------------------------------------------------------
# resampling helpers


def test_bilinear_resize_constant_and_identity():
    const = np.full((5, 5), 2.5)
    np.testing.assert_allclose(bilinear_resize(const, 9, 9), 2.5, atol=1e-12)
    g = np.random.default_rng(0).random((6, 6))
    np.testing.assert_array_equal(bilinear_resize(g, 6, 6), g)


def test_bilinear_resize_pixel_center_values():
    # doubling a 2-tall column: centers land at -0.25, 0.25, 0.75, 1.25
    col = np.array([[0.0], [1.0]])
    out = bilinear_resize(col, 4, 1)
    np.testing.assert_allclose(out.ravel(), [0.0, 0.25, 0.75, 1.0],
                               atol=1e-12)


def test_bilinear_sample_integer_and_midpoint():
    g = np.arange(16, dtype=np.float64).reshape(4, 4)
    at = bilinear_sample(g, np.array([[2.0, 3.0]]))
    assert float(np.asarray(at)[0]) == g[2, 3]
    mid = bilinear_sample(g, np.array([[1.5, 1.5]]))
    expected = np.mean([g[1, 1], g[1, 2], g[2, 1], g[2, 2]])
    assert float(np.asarray(mid)[0]) == pytest.approx(expected, abs=1e-12)


def test_scale_coords_identity_and_centers():
    c = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(scale_coords(c, (8, 8), (8, 8)), c)
    # center of a 2-cell axis maps to the center of a 4-cell axis
    out = scale_coords(np.array([[0.5, 0.5]]), (2, 2), (4, 4))
    np.testing.assert_allclose(out, [[1.5, 1.5]], atol=1e-12)


# ---------------------------------------------------------------------------
# object masks


def _maps(grid):
    return CrossAttnMaps(per_layer={"ca": np.asarray(grid, dtype=np.float64)},
                         source_t=0)


def test_mask_constant_map_degenerates():
    m = object_mask(_maps(np.full((4, 4), 0.3)), 0.6)
    assert m.degenerate
    np.testing.assert_array_equal(m.mask, np.ones((4, 4)))


def test_mask_half_quantile_covers_half():
    g = np.arange(16, dtype=np.float64).reshape(4, 4)
    m = object_mask(_maps(g), 0.5)
    assert not m.degenerate
    assert int(m.mask.sum()) == 8  # ceil(0.5 * 16)
    assert np.all(g[m.mask.astype(bool)] >= 8)


def test_mask_odd_count_rounds_up():
    g = np.arange(9, dtype=np.float64).reshape(3, 3)
    m = object_mask(_maps(g), 0.5)
    assert int(m.mask.sum()) == 5  # ceil(0.5 * 9)


def test_mask_ties_resolve_row_major():
    # two equal top values straddle the cut; the earlier row-major one wins
    g = np.zeros((2, 2))
    g[0, 1] = 1.0
    g[1, 0] = 1.0
    m = object_mask(_maps(g), 0.75)  # k = ceil(0.25 * 4) = 1
    assert int(m.mask.sum()) == 1
    assert m.mask[0, 1] == 1.0 and m.mask[1, 0] == 0.0


def test_mask_bright_square_fixture():
    g = np.zeros((8, 8))
    g[2:5, 3:6] = 1.0  # 9 bright cells
    m = object_mask(_maps(g), 1.0 - 9 / 64)  # k = 9 exactly
    want = (g > 0).astype(np.float64)
    np.testing.assert_array_equal(m.mask, want)


def test_mask_area_monotone_in_quantile():
    g = np.random.default_rng(0).random((8, 8))
    areas = [object_mask(_maps(g), q).mask.sum()
             for q in (0.2, 0.4, 0.6, 0.8)]
    assert areas == sorted(areas, reverse=True)


def test_mask_layers_average_after_resize():
    # one coarse and one fine layer; coarse map upsamples before averaging
    fine = np.zeros((4, 4))
    fine[0, 0] = 1.0
    coarse = np.zeros((2, 2))
    coarse[1, 1] = 1.0
    maps = CrossAttnMaps(per_layer={"a": fine, "b": coarse}, source_t=0)
    m = object_mask(maps, 0.9)  # k = ceil(0.1 * 16) = 2
    acc = (fine + bilinear_resize(coarse, 4, 4)) / 2.0
    order = np.argsort(-acc.ravel(), kind="stable")[:2]
    want = np.zeros(16)
    want[order] = 1.0
    np.testing.assert_array_equal(m.mask.ravel(), want)


def test_mask_quantile_bounds():
    with pytest.raises(InvalidArgument):
        object_mask(_maps(np.ones((2, 2))), 0.0)
    with pytest.raises(InvalidArgument):
        object_mask(_maps(np.ones((2, 2))), 1.0)
