"""Phantom geometry, dataset manifests, and deterministic realisation."""

import numpy as np
import pytest

from qmap.phantom import (
    DEFAULT_TISSUES,
    MIN_FOREGROUND_FRACTION,
    SPHERE_T1_SECONDS,
    Dataset,
    DatasetManifest,
    QuantMap,
    TissueSpec,
    WeightedSeries,
    make_brain_phantom,
    make_sphere_phantom,
    realise_dataset,
)
from qmap.signal import Protocol, series_from_maps


def test_quantmap_validation():
    ones = np.ones((4, 4))
    mask = np.ones((4, 4), dtype=bool)
    QuantMap(ones, ones, 1.9 * ones, mask).validate()
    with pytest.raises(ValueError):
        QuantMap(ones, ones, ones, np.ones((3, 4), dtype=bool))
    bad = QuantMap(ones, ones, 2.5 * ones, mask)
    with pytest.raises(ValueError):
        bad.validate()
    # nonzero values outside the mask violate the background convention
    bad2 = QuantMap(ones, ones, ones, np.zeros((4, 4), dtype=bool))
    with pytest.raises(ValueError):
        bad2.validate()


def test_quantmap_stack_order():
    q = QuantMap(np.full((2, 2), 1.0), np.full((2, 2), 2.0), np.full((2, 2), 1.5),
                 np.ones((2, 2), dtype=bool))
    s = q.stack()
    assert s.shape == (3, 2, 2)
    assert s[0, 0, 0] == 1.0 and s[1, 0, 0] == 2.0 and s[2, 0, 0] == 1.5


def test_weighted_series_validation():
    proto = Protocol()
    WeightedSeries(np.zeros((7, 4, 4)), proto)
    with pytest.raises(ValueError):
        WeightedSeries(np.zeros((6, 4, 4)), proto)  # channel mismatch
    with pytest.raises(ValueError):
        WeightedSeries(-np.ones((7, 4, 4)), proto)
    with pytest.raises(ValueError):
        WeightedSeries(np.zeros((7, 4)), proto)


def test_sphere_phantom_ladder_values():
    # ladder head is the calibrated 1.884 s sphere
    assert SPHERE_T1_SECONDS[0] == 1.884
    qmap, labels = make_sphere_phantom((64, 64))
    assert qmap.shape == (64, 64)
    for k, t1 in enumerate(SPHERE_T1_SECONDS):
        sel = labels == k
        assert sel.any(), f"sphere {k} missing"
        assert (qmap.t1_map[sel] == t1).all()
    # background convention
    bg = labels == -1
    assert (qmap.t1_map[bg] == 0).all()
    assert (qmap.pd_map[bg] == 0).all()
    assert (qmap.b_map[bg] == 0).all()
    assert not qmap.mask[bg].any()
    qmap.validate()


def test_sphere_phantom_constant_pd_b_inside():
    qmap, labels = make_sphere_phantom((64, 64), pd=1.1, b=1.85)
    m = qmap.mask
    assert (qmap.pd_map[m] == 1.1).all()
    assert (qmap.b_map[m] == 1.85).all()


def test_sphere_phantom_rejects_overlap():
    with pytest.raises(ValueError):
        make_sphere_phantom((32, 32), sphere_t1_list=(1.0, 0.5),
                            centers=[(16, 14), (16, 18)], radius=5)


def test_sphere_phantom_rejects_out_of_bounds():
    with pytest.raises(ValueError):
        make_sphere_phantom((32, 32), sphere_t1_list=(1.0,),
                            centers=[(2, 2)], radius=6)


def test_sphere_phantom_seeded_jitter_is_deterministic():
    a, la = make_sphere_phantom((64, 64), seed=5)
    b, lb = make_sphere_phantom((64, 64), seed=5)
    c, _ = make_sphere_phantom((64, 64), seed=6)
    np.testing.assert_array_equal(la, lb)
    np.testing.assert_array_equal(a.t1_map, b.t1_map)
    assert (la != make_sphere_phantom((64, 64), seed=6)[1]).any() or \
        np.abs(a.t1_map - c.t1_map).max() > 0


def test_brain_phantom_basic():
    qmap, labels = make_brain_phantom((48, 48), seed=3)
    qmap.validate()
    assert qmap.mask.mean() >= MIN_FOREGROUND_FRACTION
    # one draw per tissue: each region is constant
    for k, tissue in enumerate(DEFAULT_TISSUES):
        sel = labels == k
        assert sel.any()
        t1v = np.unique(qmap.t1_map[sel])
        assert t1v.size == 1
        lo, hi = tissue.t1_range
        assert lo <= t1v[0] <= hi
        pdv = np.unique(qmap.pd_map[sel])
        assert tissue.pd_range[0] <= pdv[0] <= tissue.pd_range[1]


def test_brain_phantom_constant_b_across_tissues():
    qmap, _ = make_brain_phantom((48, 48), seed=3)
    assert np.unique(qmap.b_map[qmap.mask]).size == 1


def test_brain_phantom_param_seed_splits_geometry_from_draws():
    a, la = make_brain_phantom((48, 48), seed=3, param_seed=1)
    b, lb = make_brain_phantom((48, 48), seed=3, param_seed=2)
    np.testing.assert_array_equal(la, lb)  # same geometry
    assert np.abs(a.t1_map - b.t1_map).max() > 0  # different draws


def test_brain_phantom_draws_stay_in_range():
    lo, hi = DEFAULT_TISSUES[2].t1_range  # wm
    for seed in range(60):
        qmap, labels = make_brain_phantom((32, 32), seed=seed)
        sel = labels == 2
        if sel.any():
            v = qmap.t1_map[sel][0]
            assert lo <= v <= hi


def test_tissue_spec_validation():
    with pytest.raises(ValueError):
        TissueSpec("x", (1.0, 0.5), (0.5, 1.0))
    with pytest.raises(ValueError):
        TissueSpec("x", (0.0, 0.5), (0.5, 1.0))
    with pytest.raises(ValueError):
        TissueSpec("x", (0.5, 1.0), (0.5, 1.0), b_range=(1.5, 2.2))


# ---------------------------------------------------------------------------
# manifests / dataset realisation


def test_manifest_pair_count_paper_scale():
    m = DatasetManifest(slices=994, realisations=4)
    assert m.pair_count() == 3976
    assert len(m.plan()) == 3976


def test_manifest_desk_scale_count():
    m = DatasetManifest(slices=200, realisations=4)
    assert m.pair_count() == 800


def test_manifest_split_by_slice_never_by_realisation():
    m = DatasetManifest(slices=10, realisations=3, split_fractions=(0.8, 0.1, 0.1))
    plan = m.plan()
    by_slice = {}
    for rec in plan:
        by_slice.setdefault(rec["slice"], set()).add(rec["split"])
    for splits in by_slice.values():
        assert len(splits) == 1  # all realisations of a slice share the split
    assert {r["split"] for r in plan} == {"train", "val", "test"}


def test_manifest_roundtrip_dict():
    m = DatasetManifest(kind="brain", slices=7, realisations=2, shape=(32, 32), seed=9)
    m2 = DatasetManifest.from_dict(m.to_dict())
    assert m2 == m


def test_manifest_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown manifest keys"):
        DatasetManifest.from_dict({"slices": 2, "realizations": 4})


def test_manifest_validation():
    with pytest.raises(ValueError):
        DatasetManifest(slices=0)
    with pytest.raises(ValueError):
        DatasetManifest(kind="cube")
    with pytest.raises(ValueError):
        DatasetManifest(split_fractions=(0.5, 0.4, 0.2))


def _tiny_manifest(**kw):
    base = dict(kind="spheres", slices=3, realisations=2, shape=(32, 32), seed=11,
                sphere_t1_values=(1.0, 0.5, 0.25, 0.12), snr=50.0)
    base.update(kw)
    return DatasetManifest(**base)


def test_realise_dataset_writes_expected_pairs(tmp_path):
    m = _tiny_manifest()
    index = realise_dataset(m, tmp_path)
    assert len(index["pairs"]) == 6
    ds = Dataset.open(tmp_path)
    assert len(ds.records) == 6
    qmap, series, labels, meta = ds.load_pair(ds.records[0])
    assert series.images.shape == (7, 32, 32)
    assert qmap.shape == (32, 32)
    assert meta["split"] == "train"
    assert qmap.mask.mean() >= MIN_FOREGROUND_FRACTION
    qmap.validate()


def test_realise_dataset_deterministic_and_parallel_identical(tmp_path):
    m = _tiny_manifest()
    d1, d2, d4 = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    realise_dataset(m, d1, workers=1)
    realise_dataset(m, d2, workers=1)
    realise_dataset(m, d4, workers=4)
    for rec in m.plan():
        b1 = (d1 / rec["file"]).read_bytes()
        assert b1 == (d2 / rec["file"]).read_bytes()
        assert b1 == (d4 / rec["file"]).read_bytes()


def test_realisations_of_one_slice_share_geometry_not_params(tmp_path):
    m = _tiny_manifest()
    realise_dataset(m, tmp_path)
    ds = Dataset.open(tmp_path)
    recs = [r for r in ds.records if r["slice"] == 0]
    q0, _, l0, _ = ds.load_pair(recs[0])
    q1, _, l1, _ = ds.load_pair(recs[1])
    np.testing.assert_array_equal(l0, l1)
    assert np.abs(q0.pd_map - q1.pd_map).max() > 0  # fresh parameter draw


def test_noiseless_series_matches_forward_model(tmp_path):
    m = _tiny_manifest(noise_sigma=0.0)
    realise_dataset(m, tmp_path)
    ds = Dataset.open(tmp_path)
    qmap, series, _, _ = ds.load_pair(ds.records[0])
    clean = series_from_maps(qmap.t1_map, qmap.pd_map, qmap.b_map, ds.protocol)
    # maps are quantized to f32 before the forward model, so the stored f32
    # series must equal the model of the stored maps exactly
    np.testing.assert_array_equal(series.images,
                                  clean.astype(np.float32).astype(np.float64))


def test_dataset_select_split(tmp_path):
    m = _tiny_manifest(slices=10, realisations=1,
                       split_fractions=(0.8, 0.1, 0.1))
    realise_dataset(m, tmp_path)
    ds = Dataset.open(tmp_path)
    assert len(ds.select("train")) == 8
    assert len(ds.select("val")) == 1
    assert len(ds.select("test")) == 1
    assert len(ds.select(None)) == 10


def test_noise_meta_records_sigma(tmp_path):
    m = _tiny_manifest()
    realise_dataset(m, tmp_path)
    ds = Dataset.open(tmp_path)
    _, _, _, meta = ds.load_pair(ds.records[0])
    assert meta["noise"]["kind"] == "rician"
    assert meta["noise"]["sigma"] > 0
    assert len(meta["regions"]) == 4
