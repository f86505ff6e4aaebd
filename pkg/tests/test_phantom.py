import json

import numpy as np
import pytest
from scipy import ndimage

from multiatlas import nifti, phantom
from multiatlas.phantom import PhantomSpec, SuiteConfig


def _six_adjacent(a, b):
    grown = ndimage.binary_dilation(a, structure=ndimage.generate_binary_structure(3, 1))
    return bool(np.any(grown & b))


def test_same_seed_same_bytes():
    spec = PhantomSpec(seed=4, warp_magnitude=1.0, warp_seed=2)
    a, la = phantom.make_phantom(spec)
    b, lb = phantom.make_phantom(spec)
    assert a.data.tobytes() == b.data.tobytes()
    assert la.data.tobytes() == lb.data.tobytes()
    c, _ = phantom.make_phantom(PhantomSpec(seed=5, warp_magnitude=1.0, warp_seed=2))
    assert c.data.tobytes() != a.data.tobytes()


def test_noise_free_phantom_matches_analytic_body():
    spec = PhantomSpec(noise=0.0)
    img, lab = phantom.make_phantom(spec)
    assert lab.legend == {0: "background", 1: "vertebra", 2: "rib"}
    # independent scan of the body ellipsoid on voxel centres
    g = spec.grid
    for i in range(g.dims[0]):
        for j in range(g.dims[1]):
            for k in range(g.dims[2]):
                x = np.array(g.origin) + np.array([i, j, k]) * np.array(g.spacing)
                q = (x - np.array(spec.body_center)) / np.array(spec.body_radii)
                if q @ q <= 1.0:
                    assert lab.data[i, j, k] == 1
    # thresholded intensity reproduces the labels up to one voxel
    bone = img.data > 0.5 * (spec.bone + spec.tissue)
    fg = lab.data > 0
    assert not np.any(bone & ~ndimage.binary_dilation(fg))
    assert not np.any(fg & ~ndimage.binary_dilation(bone))


def test_rib_gap_adjacency():
    _, touching = phantom.make_phantom(PhantomSpec(rib_gap=0.0, noise=0.0))
    assert _six_adjacent(touching.data == 1, touching.data == 2)
    _, apart = phantom.make_phantom(PhantomSpec(rib_gap=2.0, noise=0.0))
    assert not _six_adjacent(apart.data == 1, apart.data == 2)


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(rib_gap=-1.0)
    with pytest.raises(ValueError):
        PhantomSpec(bone=10.0, tissue=40.0)
    with pytest.raises(ValueError, match="beyond the grid"):
        PhantomSpec(dims=(30, 44, 28))


def test_spec_json_roundtrip(tmp_path):
    spec = PhantomSpec(rib_gap=1.0, warp_magnitude=0.5, lamina=((0.0, 1.0, 0.0), (0.0, -3.0, 0.0)))
    spec.save(tmp_path / "s.json")
    assert PhantomSpec.load(tmp_path / "s.json") == spec
    with pytest.raises(ValueError):
        PhantomSpec.from_dict({"bogus": 1})


def test_family_members():
    base = PhantomSpec()
    fam = phantom.make_atlas_family(base, 5, 1.5, seed=3)
    assert len(fam) == 5
    keys = {m.labels.data.tobytes() for m in fam}
    assert len(keys) == 5
    for m in fam:
        assert {1, 2} <= set(np.unique(m.labels.data).tolist())
        expected = np.where(m.labels.data == 2, 0, m.labels.data)
        np.testing.assert_array_equal(m.vertebra_only.data, expected)
        assert m.vertebra_only.legend == {0: "background", 1: "vertebra"}
    ref_img, ref_lab = phantom.make_phantom(base)
    for m in phantom.make_atlas_family(base, 3, 0.0, seed=3):
        np.testing.assert_array_equal(m.image.data, ref_img.data)
        np.testing.assert_array_equal(m.labels.data, ref_lab.data)
    with pytest.raises(ValueError):
        phantom.make_atlas_family(base, 0, 1.0, 0)


def test_substructure_regions_partition_grid():
    spec = PhantomSpec(warp_magnitude=1.0)
    regions = phantom.substructure_regions(spec)
    total = sum(r.astype(int) for r in regions.values())
    assert np.all(total == 1)
    _, lab = phantom.make_phantom(spec)
    vert = lab.data == 1
    for name in phantom.SUBSTRUCTURES:
        assert np.any(vert & regions[name])


def test_adjacent_bodies():
    spec = PhantomSpec(dims=(60, 44, 60), adjacent=True)
    _, lab = phantom.make_phantom(spec)
    assert set(np.unique(lab.data).tolist()) == {0, 1, 2, 3, 4}


def test_suite_config_validates_overrides():
    with pytest.raises(ValueError):
        SuiteConfig.from_dict({"target_overrides": {"rib_gap": -2}})
    cfg = SuiteConfig.from_dict({"n_targets": 2, "target_overrides": {"rib_gap": 1.0}})
    assert SuiteConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_write_suite(tmp_path):
    cfg = SuiteConfig(n_targets=2, n_atlases=2, target_overrides={"rib_gap": 1.0}, seed=1)
    path = phantom.write_suite(tmp_path, cfg)
    m = nifti.load_manifest(path)
    assert [a.id for a in m.atlases] == ["atlas_00", "atlas_01"]
    assert [t.id for t in m.targets] == ["case_00", "case_01"]
    assert sorted(m.targets[0].substructures) == ["SP", "TP", "VB"]
    gt = nifti.read_labels(m.targets[0].ground_truth)
    assert gt.legend == phantom.LEGEND
    img = nifti.read_volume(m.targets[1].image)
    assert img.dims == cfg.base.dims
