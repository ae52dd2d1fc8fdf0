import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msme.data import (Dataset, SampleRecord, channel_statistics, generate_synthetic, preset_config,
                       read_dataset, resample, standardize, write_dataset)
from msme.errors import ContractError, CorruptionError, DegenerateChannelError, GeometryError
from msme.models import Geometry, ModelConfig, geometry_for
from msme.tiling import decompose, make_grid, output_tiles, stitch, tile_origins

GEO = geometry_for(ModelConfig(depth=2), (92, 92))     # 92 -> 52, margin 20


def _identity_net(patch, margin):
    return patch[:, margin:patch.shape[1] - margin, margin:patch.shape[2] - margin]


def _round_trip(volume, geometry):
    patches, grid = decompose(volume, geometry)
    outs = [_identity_net(p, grid.margin) for p in patches]
    return stitch(outs, grid), grid


def _sample(rng, K, Z, H, W):
    ch = rng.gamma(2.0, 1.0, (K, Z, H, W)).astype(np.float32)
    tissue = (rng.random((Z, H, W)) < 0.8).astype(np.uint8)
    labels = (rng.random((2, Z, H, W)) < 0.1).astype(np.uint8)
    return SampleRecord("x", ch, tuple(range(1, K + 1)), 1.0, labels, tissue)


@pytest.mark.parametrize("H,W", [(52, 52), (53, 52), (52, 53), (77, 104), (130, 61), (200, 157)])
def test_identity_round_trip(H, W):
    rng = np.random.default_rng(H * 1000 + W)
    sample = standardize(_sample(rng, 3, 2, H, W))
    out, grid = _round_trip(sample.channels, GEO)
    avg = grid.averaged_mask()
    ref = sample.channels
    assert out.shape == ref.shape
    assert np.array_equal(out[:, :, ~avg], ref[:, :, ~avg])
    if avg.any():
        assert np.abs(out[:, :, avg] - ref[:, :, avg]).max() <= 1e-6
    assert (grid.coverage() >= 1).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(52, 170), st.integers(52, 170))
def test_output_tiles_are_disjoint_except_tail_bands(H, W):
    grid = make_grid((1, H, W), GEO)
    cov = grid.coverage()
    avg = grid.averaged_mask()
    assert (cov[~avg] == 1).all()
    assert (cov[avg] >= 2).all()
    # stride tiles (all but the shifted tail) never overlap one another
    ys, xs = tile_origins(H, 52), tile_origins(W, 52)
    for origins in (ys, xs):
        body = origins[:-1] if len(origins) > 1 and origins[-1] % 52 else origins
        assert all(b - a == 52 for a, b in zip(body, body[1:]))


def test_too_small_rejected():
    with pytest.raises(GeometryError):
        make_grid((1, 51, 60), GEO)


def test_stitch_accepts_mapping_and_rejects_gaps():
    vol = np.random.default_rng(0).standard_normal((1, 1, 60, 60)).astype(np.float32)
    patches, grid = decompose(vol, GEO)
    outs = {o: _identity_net(p, grid.margin) for o, p in zip(grid.origins, patches)}
    keys = list(reversed(grid.origins))
    shuffled = {k: outs[k] for k in keys}
    np.testing.assert_array_equal(stitch(shuffled, grid), stitch([outs[o] for o in grid.origins], grid))
    del shuffled[keys[0]]
    with pytest.raises(ContractError):
        stitch(shuffled, grid)


def test_output_tiles_crop_labels():
    lab = np.arange(2 * 60 * 70).reshape(2, 1, 60, 70)
    grid = make_grid((1, 60, 70), GEO)
    tiles = output_tiles(lab, grid)
    for (z, y, x), t in zip(grid.origins, tiles):
        np.testing.assert_array_equal(t, lab[:, z, y:y + 52, x:x + 52])


def test_hemis_geometry_round_trip():
    geo = Geometry((20, 20), (12, 12))
    vol = np.random.default_rng(1).standard_normal((2, 1, 31, 25)).astype(np.float32)
    out, grid = _round_trip(vol, geo)
    keep = ~grid.averaged_mask()
    assert np.array_equal(out[:, :, keep], vol[:, :, keep])


# ---------------------------------------------------------------------------
# container, resampling, standardization
# ---------------------------------------------------------------------------


def test_container_round_trip(tmp_path):
    ds = generate_synthetic(preset_config(K=3, n_samples=2, size=40, seed=3))
    write_dataset(ds, tmp_path / "d")
    back = read_dataset(tmp_path / "d")
    assert back.num_markers == 3 and back.classes == ds.classes
    for a, b in zip(ds.samples, back.samples):
        assert a.id == b.id and a.available_markers == b.available_markers
        np.testing.assert_array_equal(a.channels, b.channels)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.tissue, b.tissue)


def test_container_truncation_detected(tmp_path):
    ds = generate_synthetic(preset_config(K=3, n_samples=1, size=30))
    root = write_dataset(ds, tmp_path / "d")
    f = root / "s01_labels.bin"
    f.write_bytes(f.read_bytes()[:-1])
    with pytest.raises(CorruptionError):
        read_dataset(root)
    with pytest.raises(CorruptionError):
        read_dataset(tmp_path / "missing")
    manifest = json.loads((root / "manifest.json").read_text())
    manifest["version"] = 7
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CorruptionError):
        read_dataset(root)


def test_absent_markers_zeroed_on_read(tmp_path):
    ds = generate_synthetic(preset_config(K=3, n_samples=2, size=30), available={1: (1, 3)})
    s = ds.samples[1]
    assert s.available_markers == (1, 3) and not s.channels[1].any()
    back = read_dataset(write_dataset(ds, tmp_path / "d"))
    assert back.samples[1].available_markers == (1, 3)


def test_standardize_over_tissue():
    rng = np.random.default_rng(4)
    s = _sample(rng, 2, 1, 30, 30)
    st_ = standardize(s)
    region = s.tissue.astype(bool)
    for k in range(2):
        v = st_.channels[k][region].astype(np.float64)
        assert abs(v.mean()) < 1e-6 and abs(v.std() - 1) < 1e-5
    assert set(st_.meta["standardization"]) == {1, 2}


def test_standardize_skips_absent_and_rejects_flat():
    rng = np.random.default_rng(5)
    s = _sample(rng, 3, 1, 20, 20)
    s.channels[1] = 0
    s.available_markers = (1, 3)
    out = standardize(s)
    assert not out.channels[1].any()
    s.channels[2] = 4.0
    with pytest.raises(DegenerateChannelError):
        channel_statistics(s)


def test_resample_shapes_and_binary_labels():
    rng = np.random.default_rng(6)
    s = _sample(rng, 2, 1, 40, 30)
    s.resolution_um = 0.5
    r = resample(s, 1.0)
    assert r.shape == (1, 20, 15) and r.resolution_um == 1.0
    assert set(np.unique(r.labels)) <= {0, 1}
    same = resample(s, 0.5)
    np.testing.assert_array_equal(same.channels, s.channels)
    const = SampleRecord("c", np.full((1, 1, 8, 8), 3.0, np.float32), (1,), 1.0)
    np.testing.assert_allclose(resample(const, 0.5).channels, 3.0)
    with pytest.raises(ContractError):
        resample(s, 0.0)


def test_generator_is_deterministic_and_calibrated():
    cfg = preset_config(K=3, n_samples=3, size=104, seed=11)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    for x, y in zip(a.samples, b.samples):
        np.testing.assert_array_equal(x.channels, y.channels)
        np.testing.assert_array_equal(x.labels, y.labels)
    c = generate_synthetic(preset_config(K=3, n_samples=3, size=104, seed=12))
    assert not np.array_equal(a.samples[0].channels, c.samples[0].channels)
    frac = generate_synthetic(preset_config(K=3, n_samples=8, size=104, seed=0)).class_fractions().mean(axis=0)
    assert 0.05 < frac[0] < 0.2 and frac[1] < 0.03
    assert isinstance(a, Dataset) and a.samples[0].channels.dtype == np.float32
