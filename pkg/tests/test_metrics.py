import numpy as np
import pytest

from multiatlas import metrics

from conftest import make_mask


def _brute(src, dst):
    return np.array([min(np.sqrt(((p - q) ** 2).sum()) for q in dst) for p in src])


def test_dice_examples():
    gt = np.zeros((10, 10, 10), bool)
    seg = np.zeros_like(gt)
    gt.flat[:100] = True
    seg.flat[20:120] = True
    assert metrics.dice(make_mask(gt), make_mask(seg)) == 80.0
    assert metrics.dice(make_mask(gt), make_mask(gt)) == 100.0
    assert metrics.dice(make_mask(gt), make_mask(~gt)) == 0.0
    empty = make_mask(np.zeros((3, 3, 3)))
    assert metrics.dice(empty, empty) == 100.0


def test_dice_grid_mismatch():
    with pytest.raises(ValueError):
        metrics.dice(make_mask(np.ones((2, 2, 2))), make_mask(np.ones((2, 2, 2)), spacing=(2, 1, 1)))


def test_surface_voxels_cube_and_single():
    cube = np.zeros((5, 5, 5), bool)
    cube[1:4, 1:4, 1:4] = True
    assert len(metrics.surface_voxels(make_mask(cube))) == 26
    one = np.zeros((4, 4, 4), bool)
    one[1, 2, 3] = True
    s = metrics.surface_voxels(make_mask(one, spacing=(2, 1, 0.5), origin=(1, 0, 0)))
    np.testing.assert_array_equal(s.points, [[3.0, 2.0, 1.5]])
    assert len(metrics.surface_voxels(make_mask(np.zeros((3, 3, 3))))) == 0


def test_border_counts_as_background():
    full = np.ones((3, 3, 3), bool)
    assert len(metrics.surface_voxels(make_mask(full))) == 26


def _planes(gap_mm, spacing=1.0):
    shape = (12, 8, 8)
    a = np.zeros(shape, bool)
    b = np.zeros(shape, bool)
    a[3] = True
    b[3 + int(round(gap_mm / spacing))] = True
    sp = (spacing, 1.0, 1.0)
    return make_mask(a, sp), make_mask(b, sp)


def test_parallel_planes():
    a, b = _planes(2.0)
    sa, sb = metrics.surface_voxels(a), metrics.surface_voxels(b)
    assert metrics.asd(sa, sb) == 2.0
    assert metrics.asd_max(sa, sb) == 2.0
    a, b = _planes(2.0, spacing=0.5)
    assert metrics.asd(metrics.surface_voxels(a), metrics.surface_voxels(b)) == 2.0


def test_outlier_drives_max_only():
    gt = np.zeros((30, 20, 20), bool)
    gt[5:15, 5:15, 5:15] = True
    seg = gt.copy()
    seg[24, 10, 10] = True  # 10 mm beyond the face at x = 14
    s, g = metrics.surface_voxels(make_mask(seg)), metrics.surface_voxels(make_mask(gt))
    assert metrics.asd_max(s, g) == 10.0
    assert metrics.asd(s, g) < 1.0


def test_asd_is_one_sided():
    gt = np.zeros((20, 20, 20), bool)
    gt[5:15, 5:15, 5:15] = True
    seg = np.zeros_like(gt)
    seg[8:12, 8:12, 8:12] = True
    s, g = metrics.surface_voxels(make_mask(seg)), metrics.surface_voxels(make_mask(gt))
    assert metrics.asd(s, g) != metrics.asd(g, s)
    both = metrics.asd(s, g, symmetric=True)
    d1, d2 = _brute(s.points, g.points), _brute(g.points, s.points)
    assert both == pytest.approx((d1.sum() + d2.sum()) / (len(d1) + len(d2)), rel=1e-12)


def test_kdtree_equals_brute_force_exactly():
    rng = np.random.default_rng(0)
    for _ in range(10):
        shape = tuple(rng.integers(3, 11, size=3))
        spacing = tuple(rng.uniform(0.5, 2.0, size=3))
        a = make_mask(rng.random(shape) < 0.3, spacing)
        b = make_mask(rng.random(shape) < 0.3, spacing)
        sa, sb = metrics.surface_voxels(a), metrics.surface_voxels(b)
        if not len(sa) or not len(sb):
            continue
        np.testing.assert_array_equal(metrics.surface_distances(sa, sb), _brute(sa.points, sb.points))


def test_empty_surface_is_undefined():
    a = metrics.surface_voxels(make_mask(np.zeros((3, 3, 3))))
    b = metrics.surface_voxels(make_mask(np.ones((3, 3, 3))))
    with pytest.raises(metrics.UndefinedMetricError):
        metrics.asd(a, b)


def test_distances_scale_with_spacing():
    rng = np.random.default_rng(1)
    a, b = rng.random((9, 9, 9)) < 0.3, rng.random((9, 9, 9)) < 0.3
    r1 = metrics.score_pair(make_mask(a), make_mask(b))
    r2 = metrics.score_pair(make_mask(a, (2, 2, 2)), make_mask(b, (2, 2, 2)))
    assert r2.asd == pytest.approx(2 * r1.asd, rel=1e-12)
    assert r2.asd_max == pytest.approx(2 * r1.asd_max, rel=1e-12)
    assert r1.asd_max >= r1.asd


def test_evaluate_with_substructures():
    gt = np.zeros((10, 10, 10), bool)
    gt[2:8, 2:8, 2:8] = True
    left = np.zeros_like(gt)
    left[:5] = True
    report = metrics.evaluate(make_mask(gt), make_mask(gt), {"L": make_mask(left), "R": make_mask(~left)})
    assert list(report.regions) == ["WV", "L", "R"]
    for r in report.regions.values():
        assert (r.dc, r.asd, r.asd_max) == (100.0, 0.0, 0.0)


def test_score_pair_empty_cases():
    empty = make_mask(np.zeros((4, 4, 4)))
    full = make_mask(np.ones((4, 4, 4)))
    assert metrics.score_pair(empty, empty) == metrics.RegionScore(100.0, 0.0, 0.0)
    r = metrics.score_pair(empty, full)
    assert r.dc == 0.0 and np.isnan(r.asd)


def test_aggregate_hand_arithmetic():
    r1 = metrics.EvalReport({"WV": metrics.RegionScore(90.0, 1.0, 4.0)})
    r2 = metrics.EvalReport({"WV": metrics.RegionScore(80.0, 2.0, 8.0)})
    agg = metrics.aggregate([r1, r2])
    assert agg.regions["WV"] == metrics.RegionScore(85.0, 1.5, 6.0)
    # sample std of two values is |a - b| / sqrt(2)
    assert agg.std["WV"].dc == pytest.approx(10 / np.sqrt(2), rel=1e-15)
    assert agg.std["WV"].asd_max == pytest.approx(4 / np.sqrt(2), rel=1e-15)
    single = metrics.aggregate([r1])
    assert single.std["WV"] == metrics.RegionScore(0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        metrics.aggregate([])


def test_table_layout():
    r = metrics.EvalReport({"WV": metrics.RegionScore(90.0, 1.0, 4.0), "TP": metrics.RegionScore(80.0, 2.0, 8.0)})
    header, rows = metrics.table_rows({"PEF-V": [r, r]})
    assert header == ["group", "N", "DC-WV", "DC-TP", "ASD-WV", "ASD-TP", "ASD_max-WV", "ASD_max-TP"]
    assert rows == [["PEF-V", "2", "90.0 (0.0)", "80.0 (0.0)", "1.00 (0.00)", "2.00 (0.00)",
                     "4.00 (0.00)", "8.00 (0.00)"]]
    md = metrics.to_markdown(header, rows)
    assert md.splitlines()[1] == "|" + "---|" * 8
    assert metrics.to_csv(header, rows).splitlines()[0] == ",".join(header)
