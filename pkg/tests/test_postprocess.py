import warnings

import numpy as np
import pytest

from multiatlas.metrics import dice
from multiatlas.postprocess import (
    CollisionWarning,
    LevelSetParams,
    PostprocessParams,
    fill_holes,
    level_set_refine,
    postprocess_chain,
    remove_islands,
    resolve_collisions,
    signed_distance,
    train_perceptron,
)
from multiatlas.volume import Volume

from conftest import ball, make_mask


def test_remove_islands_drops_small_component():
    data = np.zeros((20, 20, 20), bool)
    data[2:7, 2:7, 2:6] = True  # 100 voxels
    data[15:18, 15, 15] = True  # 3 voxels
    out = remove_islands(make_mask(data))
    assert out.data.sum() == 100
    assert not out.data[15:18, 15, 15].any()


def test_remove_islands_single_and_empty():
    data = ball((9, 9, 9), (4, 4, 4), 3)
    m = make_mask(data)
    np.testing.assert_array_equal(remove_islands(m).data, m.data)
    empty = make_mask(np.zeros((4, 4, 4)))
    assert not remove_islands(empty).data.any()


def test_remove_islands_diagonal_neighbours_connect():
    data = np.zeros((5, 5, 5), bool)
    data[1, 1, 1] = data[2, 2, 2] = data[3, 3, 3] = True
    data[0, 4, 4] = True
    assert remove_islands(make_mask(data)).data.sum() == 3


def test_remove_islands_tie_keeps_first_in_storage_order():
    data = np.zeros((8, 8, 8), bool)
    data[5, 1, 1] = True
    data[1, 1, 5] = True
    out = remove_islands(make_mask(data)).data
    # x-fastest order: (5,1,1) -> 5 + 8*(1 + 8*1); (1,1,5) -> 1 + 8*(1 + 8*5)
    assert out[5, 1, 1] and not out[1, 1, 5]


def test_fill_holes_hollow_cube():
    data = np.zeros((11, 11, 11), bool)
    data[2:9, 2:9, 2:9] = True
    data[3:8, 3:8, 3:8] = False
    out = fill_holes(make_mask(data)).data != 0
    solid = np.zeros_like(data)
    solid[2:9, 2:9, 2:9] = True
    np.testing.assert_array_equal(out, solid)


def test_fill_holes_leaves_open_concavity():
    data = np.zeros((14, 14, 6), bool)
    data[2:12, 2:12, 1:5] = True
    data[4:10, 4:14, 1:5] = False  # 6-wide slot open to the border
    out = fill_holes(make_mask(data)).data != 0
    np.testing.assert_array_equal(out, data)


def test_fill_holes_solid_cube_unchanged():
    data = np.zeros((8, 8, 8), bool)
    data[2:6, 2:6, 2:6] = True
    np.testing.assert_array_equal(fill_holes(make_mask(data)).data != 0, data)


def test_morphology_idempotent_on_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(10):
        data = rng.random((12, 11, 10)) < rng.uniform(0.2, 0.7)
        m = make_mask(data)
        once = remove_islands(m)
        np.testing.assert_array_equal(remove_islands(once).data, once.data)
        once = fill_holes(m)
        np.testing.assert_array_equal(fill_holes(once).data, once.data)


def test_perceptron_hand_iteration():
    # z = (3, 1, -1, -3) / sqrt(5); the first and third examples trigger updates
    model = train_perceptron([[3.0], [1.0], [-1.0], [-3.0]], [1, 1, -1, -1])
    np.testing.assert_allclose(model.weights, [4 / np.sqrt(5)], rtol=1e-15)
    assert model.bias == 0.0
    assert model.errors == [2, 0]


def test_perceptron_separable_and_degenerate():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(2, 0.5, (30, 4)), rng.normal(-2, 0.5, (30, 4))])
    y = np.array([1] * 30 + [-1] * 30)
    model = train_perceptron(x, y)
    assert model.errors[-1] == 0
    np.testing.assert_array_equal(model.predict(x), y)
    with pytest.raises(ValueError):
        train_perceptron(x, np.ones(60, int))


def _target(shape, value=100.0):
    return Volume(np.full(shape, value))


def test_collisions_no_overlap_unchanged():
    shape = (20, 12, 12)
    a = make_mask(ball(shape, (5, 6, 6), 3))
    b = make_mask(ball(shape, (14, 6, 6), 3))
    res = resolve_collisions([a, b], _target(shape))
    np.testing.assert_array_equal(res.masks[0].data, a.data)
    np.testing.assert_array_equal(res.masks[1].data, b.data)
    assert res.contested == 0


def test_collisions_seam_goes_to_nearer_blob():
    shape = (24, 14, 14)
    a = ball(shape, (8, 7, 7), 4)
    b = ball(shape, (15, 7, 7), 4)
    seam = a & b
    assert seam.any()
    res = resolve_collisions([make_mask(a), make_mask(b)], _target(shape))
    out_a, out_b = (m.data != 0 for m in res.masks)
    ca = np.argwhere(a & ~b).mean(axis=0)
    cb = np.argwhere(b & ~a).mean(axis=0)
    for idx in np.argwhere(seam):
        da, db = np.linalg.norm(idx - ca), np.linalg.norm(idx - cb)
        assert out_a[tuple(idx)] == (da < db)
        assert out_b[tuple(idx)] == (db < da)


def test_collisions_three_way_disjoint_and_conserving():
    shape = (20, 20, 12)
    centres = [(7, 7, 6), (12, 7, 6), (9, 12, 6)]
    balls = [ball(shape, c, 4.5) for c in centres]
    assert np.any(balls[0] & balls[1] & balls[2])
    rng = np.random.default_rng(2)
    target = Volume(100.0 + rng.normal(size=shape))
    res = resolve_collisions([make_mask(b) for b in balls], target)
    out = np.stack([m.data != 0 for m in res.masks])
    assert out.sum(axis=0).max() == 1
    np.testing.assert_array_equal(out.any(axis=0), np.any(balls, axis=0))


def test_collisions_fallback_when_fully_contested():
    shape = (10, 10, 10)
    a = ball(shape, (5, 5, 5), 2)
    b = ball(shape, (5, 5, 5), 4)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = resolve_collisions([make_mask(a), make_mask(b)], _target(shape))
    assert res.fallbacks == [(0, 1)]
    assert any(issubclass(w.category, CollisionWarning) for w in caught)
    out = np.stack([m.data != 0 for m in res.masks])
    assert out.sum(axis=0).max() == 1


def _sharp_sphere(shape=(32, 32, 32), radius=9.0):
    inside = ball(shape, tuple((n - 1) / 2 for n in shape), radius)
    return inside, Volume(np.where(inside, 400.0, 40.0))


def test_level_set_keeps_clean_edge():
    inside, target = _sharp_sphere()
    out = level_set_refine(make_mask(inside), target)
    assert dice(make_mask(inside), out) > 98.0


def test_level_set_repairs_dents():
    inside, target = _sharp_sphere()
    rng = np.random.default_rng(3)
    surf = np.argwhere(inside & ~np.roll(inside, 1, axis=0))
    dented = inside.copy()
    for idx in surf[rng.choice(len(surf), size=20, replace=False)]:
        dented[tuple(idx)] = False
    out = level_set_refine(make_mask(dented), target)
    gt = make_mask(inside)
    assert dice(gt, out) > dice(gt, make_mask(dented))


def test_level_set_zero_iterations_and_band():
    inside, target = _sharp_sphere()
    shifted = np.roll(inside, 3, axis=0)
    m = make_mask(shifted)
    assert level_set_refine(m, target, LevelSetParams(iterations=0)) is m
    params = LevelSetParams(band=2.0)
    out = level_set_refine(m, target, params).data != 0
    band = np.abs(signed_distance(shifted, (1, 1, 1))) <= params.band
    np.testing.assert_array_equal(out[~band], shifted[~band])


def test_level_set_barrier_and_errors():
    inside, target = _sharp_sphere()
    barrier = np.zeros_like(inside)
    barrier[:, :, 20:] = True
    out = level_set_refine(make_mask(inside), target, barrier=barrier).data != 0
    assert not (out & barrier).any()
    with pytest.raises(ValueError):
        level_set_refine(make_mask(np.zeros((4, 4, 4))), Volume(np.zeros((4, 4, 4))))
    with pytest.raises(ValueError):
        LevelSetParams(time_step=1.0, edge_weight=1.0)


def test_signed_distance_sign_convention():
    data = np.zeros((7, 7, 7), bool)
    data[2:5, 2:5, 2:5] = True
    phi = signed_distance(data, (1, 1, 1))
    assert phi[3, 3, 3] == 1.5
    assert phi[2, 3, 3] == 0.5
    assert phi[1, 3, 3] == -0.5


def test_chain_near_identity_on_clean_pair():
    shape = (34, 20, 20)
    a = ball(shape, (9, 10, 10), 6)
    b = ball(shape, (24, 10, 10), 6)
    target = Volume(np.where(a | b, 400.0, 40.0))
    res = postprocess_chain([make_mask(a), make_mask(b)], target, trace=True)
    for before, after in zip((a, b), res.masks):
        assert dice(make_mask(before), after) > 98.0
    assert [list(s) for s in res.trace] == [["islands", "holes", "collisions", "levelset"]] * 2
    assert postprocess_chain([], target).masks == []


def test_postprocess_params_roundtrip():
    p = PostprocessParams(levelset=LevelSetParams(iterations=5), perceptron_epochs=7)
    assert PostprocessParams.from_dict(p.to_dict()) == p
