import numpy as np
import pytest

from multiatlas.volume import (
    AffineTransform,
    BSplineGrid,
    GeometryError,
    Grid,
    LabelMap,
    Volume,
    sample_trilinear,
    voxel_to_world,
    warp_labels,
    warp_volume,
)


def test_grid_rejects_bad_geometry():
    with pytest.raises(GeometryError):
        Grid((4, 4), (1, 1, 1))
    with pytest.raises(GeometryError):
        Grid((4, 4, 0))
    with pytest.raises(GeometryError):
        Grid((4, 4, 4), (1.0, 0.0, 1.0))


def test_voxel_to_world_and_bounds():
    g = Grid((4, 5, 6), (0.5, 1.0, 2.0), (10.0, 0.0, -3.0))
    np.testing.assert_array_equal(voxel_to_world(g, np.array([1, 2, 3])), [10.5, 2.0, 3.0])
    with pytest.raises(IndexError):
        voxel_to_world(g, np.array([4, 0, 0]))
    with pytest.raises(IndexError):
        voxel_to_world(g, np.array([0.5, 0, 0]))


def test_world_to_voxel_inverts_index_map():
    g = Grid((3, 4, 5), (0.7, 1.3, 2.0), (1.0, 2.0, 3.0))
    pts = g.world_points()
    idx = np.indices(g.dims).reshape(3, -1).T
    np.testing.assert_allclose(g.world_to_voxel(pts), idx, atol=1e-12)


def test_volume_is_read_only_and_finite():
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        Volume(np.full((2, 2, 2), np.nan))


def test_labelmap_requires_legend_entries():
    with pytest.raises(ValueError):
        LabelMap(np.array([[[0, 3]]]), legend={0: "background", 1: "a"})
    lab = LabelMap(np.array([[[0, 1]]]), legend={0: "background", 1: "a"})
    assert lab.label_id("a") == 1


def test_affine_compose_and_inverse():
    a = AffineTransform.translation([1.0, 2.0, 3.0])
    m = np.eye(4)
    m[:3, :3] = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]
    b = AffineTransform(m)
    p = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, -1.0]])
    np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)))
    np.testing.assert_allclose(b.inverse().apply(b.apply(p)), p, atol=1e-12)


def test_affine_rejects_singular():
    m = np.eye(4)
    m[2, 2] = 0.0
    with pytest.raises(ValueError):
        AffineTransform(m)


def test_identity_warp_returns_same_data(small_volume):
    out = warp_volume(small_volume, AffineTransform.identity(), small_volume.grid)
    np.testing.assert_array_equal(out.data, small_volume.data)


def test_integer_translation_is_a_shift():
    data = np.arange(5 * 4 * 3, dtype=float).reshape(5, 4, 3)
    v = Volume(data, (2.0, 1.0, 1.0))
    out = warp_volume(v, AffineTransform.translation([2.0, 0.0, 0.0]), v.grid, padding=-1.0)
    np.testing.assert_array_equal(out.data[:-1], data[1:])
    np.testing.assert_array_equal(out.data[-1], -1.0)


def test_trilinear_matches_hand_value():
    data = np.zeros((2, 2, 2))
    data[1, 1, 1] = 8.0
    val = sample_trilinear(data, np.array([[0.5, 0.5, 0.5], [2.5, 0.0, 0.0]]), padding=-7.0)
    np.testing.assert_allclose(val, [1.0, -7.0])


def test_warp_labels_nearest_and_outside_is_background():
    data = np.zeros((4, 1, 1), dtype=np.int32)
    data[2] = 1
    lab = LabelMap(data, legend={0: "background", 1: "a"})
    out = warp_labels(lab, AffineTransform.translation([1.4, 0.0, 0.0]), lab.grid)
    np.testing.assert_array_equal(out.data.ravel(), [0, 1, 0, 0])
    assert out.legend == lab.legend


def test_warp_rejects_mismatched_output_grid(small_volume):
    other = Grid((2, 2, 2))
    with pytest.raises(GeometryError):
        warp_volume(small_volume, AffineTransform.identity(), small_volume.grid, output_grid=other)


def test_bspline_zero_displacement_is_affine():
    g = Grid((9, 8, 7), (1.0, 1.0, 2.0))
    t = AffineTransform.translation([0.3, -0.2, 0.1])
    b = BSplineGrid.for_domain(g, 4.0, affine=t)
    np.testing.assert_allclose(b.apply_on_grid(g), t.apply(g.world_points()), atol=1e-12)


def test_bspline_constant_coefficients_give_constant_field():
    g = Grid((9, 8, 7))
    b = BSplineGrid.for_domain(g, 3.0)
    disp = np.broadcast_to(np.array([0.5, -1.0, 2.0]), b.dims + (3,))
    field = b.with_displacements(disp).displacement_field(g)
    np.testing.assert_allclose(field, np.broadcast_to([0.5, -1.0, 2.0], field.shape), atol=1e-12)


def test_separable_field_matches_pointwise_oracle(rng):
    g = Grid((11, 9, 6), (1.0, 1.5, 2.0), (-3.0, 0.0, 4.0))
    b = BSplineGrid.for_domain(g, (4.0, 4.5, 5.0))
    b = b.with_displacements(rng.normal(size=b.dims + (3,)))
    dense = b.displacement_field(g).reshape(-1, 3)
    np.testing.assert_allclose(dense, b.displacement_at(g.world_points()), atol=1e-12)


def test_bspline_control_spacing_floor():
    with pytest.raises(GeometryError):
        BSplineGrid.for_domain(Grid((10, 10, 10), (2.0, 2.0, 2.0)), 3.0)


def test_bspline_lattice_must_cover_domain():
    g = Grid((10, 10, 10))
    b = BSplineGrid((4, 4, 4), (3.0, 3.0, 3.0), (-3.0, -3.0, -3.0))
    with pytest.raises(GeometryError):
        b.displacement_field(g)
