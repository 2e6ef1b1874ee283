import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lkdnet.haze import (
    DepthField,
    HazeParams,
    apply_haze,
    invert_haze,
    linear_ramp_depth,
    load_dataset,
    make_clean_image,
    make_dataset,
    noise_depth,
    radial_depth,
    random_depth,
    transmission,
    write_dataset,
)
from lkdnet import precision
from lkdnet.imageio import read_ppm, write_ppm
from lkdnet.tensor import ShapeError, Tensor


def _clean(size=32, seed=0):
    return make_clean_image(size, np.random.default_rng(seed))


def _params(size, airlight=(0.9, 0.9, 0.9), beta=1.0, seed=0):
    depth = random_depth(size, size, np.random.default_rng(seed))
    return HazeParams(np.asarray(airlight), beta, depth)


class TestDepthFields:
    @pytest.mark.parametrize(
        "make",
        [
            lambda r: linear_ramp_depth(24, 24, (1.0, 0.5)),
            lambda r: radial_depth(24, 24, (10.0, 12.0)),
            lambda r: noise_depth(24, 24, 5, r),
            lambda r: random_depth(24, 24, r),
        ],
    )
    def test_range_and_shape(self, make):
        d = make(np.random.default_rng(1))
        assert d.values.shape == (1, 1, 24, 24)
        assert float(d.values.data.min()) >= 0.0
        assert float(d.values.data.max()) <= 1.0 + 1e-6

    def test_rectangular_grids(self):
        d = linear_ramp_depth(8, 12, (0.0, 1.0))
        assert d.values.shape == (1, 1, 8, 12)
        # Pure-x ramp: rows identical, columns increasing.
        v = d.values.data[0, 0]
        np.testing.assert_allclose(v[0], v[-1], atol=1e-12)
        assert np.all(np.diff(v[0]) >= 0)

    def test_zero_direction_rejected(self):
        with pytest.raises(ValueError):
            linear_ramp_depth(8, 8, (0.0, 0.0))

    def test_bad_length_scale_rejected(self):
        with pytest.raises(ValueError):
            noise_depth(8, 8, 0, np.random.default_rng(2))

    def test_negative_depth_rejected(self):
        with pytest.raises(ValueError):
            DepthField("ramp", Tensor(-np.ones((1, 1, 4, 4), dtype=np.float32)))

    def test_rank_checked(self):
        with pytest.raises(ShapeError):
            DepthField("ramp", Tensor.ones((1, 2, 4, 4)))


class TestScatteringModel:
    def test_zero_beta_is_identity(self):
        params = _params(16, beta=0.0, seed=3)
        t = transmission(params.depth, 0.0)
        np.testing.assert_array_equal(t.data, 1.0)
        img = _clean(16, 3)
        hazy = apply_haze(img, params)
        np.testing.assert_array_equal(hazy.data, img.data)

    def test_transmission_monotone_in_beta(self):
        d = radial_depth(16, 16, (8.0, 8.0))
        t1 = transmission(d, 0.5).data
        t2 = transmission(d, 1.5).data
        assert np.all(t2 <= t1 + 1e-7)

    def test_negative_beta_rejected(self):
        d = radial_depth(8, 8, (4.0, 4.0))
        with pytest.raises(ValueError):
            transmission(d, -0.1)

    def test_clean_equals_airlight_is_fixed_point(self):
        # J = A makes I = A regardless of transmission. At 64-bit the
        # residual is a few rounding ulps; rtol is pinned to zero so the
        # default relative tolerance cannot mask a real error.
        with precision.use_dtype(np.float64):
            A = (0.8, 0.7, 0.6)
            img = Tensor(
                np.broadcast_to(
                    np.array(A).reshape(1, 3, 1, 1), (1, 3, 16, 16)
                ).astype(np.float64)
            )
            params = _params(16, airlight=A, beta=1.0, seed=5)
            hazy = apply_haze(img, params)
        np.testing.assert_allclose(hazy.data, img.data, rtol=0.0, atol=1e-12)

    def test_roundtrip(self):
        img = _clean(32, 6)
        params = _params(32, (0.85, 0.9, 0.95), 1.2, seed=7)
        t = transmission(params.depth, params.beta)
        hazy = apply_haze(img, params)
        back = invert_haze(hazy, params.airlight, t)
        assert float(np.max(np.abs(back.data - img.data))) < 1e-6

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_roundtrip_property(self, seed):
        r = np.random.default_rng(seed)
        img = make_clean_image(16, r)
        depth = random_depth(16, 16, r)
        beta = float(r.uniform(0.0, 2.5))
        A = r.uniform(0.6, 1.0, 3)
        params = HazeParams(A, beta, depth)
        t = transmission(depth, beta)
        hazy = apply_haze(img, params)
        back = invert_haze(hazy, A, t)
        assert float(np.max(np.abs(back.data - img.data))) < 1e-6

    def test_channel_count_checked(self):
        with pytest.raises(ShapeError):
            apply_haze(Tensor.ones((1, 1, 8, 8)), _params(8, seed=8))

    def test_grid_mismatch_checked(self):
        with pytest.raises(ShapeError):
            apply_haze(Tensor.ones((1, 3, 16, 16)), _params(8, seed=9))

    def test_params_validated(self):
        depth = radial_depth(8, 8, (4.0, 4.0))
        with pytest.raises(ValueError):
            HazeParams(np.array([1.2, 0.9, 0.9]), 1.0, depth)
        with pytest.raises(ValueError):
            HazeParams(np.array([0.9, 0.9, 0.9]), -0.5, depth)

    def test_invert_requires_positive_floor(self):
        t = Tensor.ones((1, 1, 8, 8))
        with pytest.raises(ValueError):
            invert_haze(Tensor.ones((1, 3, 8, 8)), (0.9,) * 3, t, t_min=0.0)

    def test_floor_engages_at_dense_haze(self):
        # At t below the floor the division uses t_min, keeping values finite.
        img = _clean(8, 10)
        t = Tensor(np.full((1, 1, 8, 8), 1e-9))
        hazy = Tensor(np.full((1, 3, 8, 8), 0.9))
        back = invert_haze(hazy, (0.9,) * 3, t, t_min=1e-3)
        assert np.all(np.isfinite(back.data))


class TestCleanImages:
    def test_range_and_variety(self):
        img = _clean(48, 11)
        assert img.shape == (1, 3, 48, 48)
        assert float(img.data.min()) >= 0.0 and float(img.data.max()) <= 1.0
        # Procedural scenes must carry structure, not a flat field.
        assert float(img.data.std()) > 0.02

    def test_deterministic_under_seed(self):
        a = make_clean_image(24, np.random.default_rng(12))
        b = make_clean_image(24, np.random.default_rng(12))
        np.testing.assert_array_equal(a.data, b.data)


class TestDatasets:
    def test_determinism_bitwise(self):
        a = make_dataset(3, 24, seed=42)
        b = make_dataset(3, 24, seed=42)
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa.hazy.data, pb.hazy.data)
            np.testing.assert_array_equal(pa.clean.data, pb.clean.data)
            np.testing.assert_array_equal(pa.airlight, pb.airlight)
            assert pa.beta == pb.beta

    def test_different_seed_differs(self):
        a = make_dataset(2, 24, seed=1)
        b = make_dataset(2, 24, seed=2)
        assert not np.array_equal(a[0].hazy.data, b[0].hazy.data)

    def test_items_independent_of_count(self):
        # Item k depends only on (seed, k), not on how many pairs were made.
        a = make_dataset(5, 24, seed=9)
        b = make_dataset(2, 24, seed=9)
        np.testing.assert_array_equal(a[1].hazy.data, b[1].hazy.data)

    def test_pair_consistency(self):
        for p in make_dataset(4, 24, seed=3):
            assert p.hazy.shape == p.clean.shape == (1, 3, 24, 24)
            assert 0.7 <= float(p.airlight.min()) and float(p.airlight.max()) <= 1.0
            assert 0.4 <= p.beta <= 2.0

    def test_size_validated(self):
        with pytest.raises(ValueError):
            make_dataset(1, 18, seed=0)
        with pytest.raises(ValueError):
            make_dataset(0, 16, seed=0)

    def test_write_load_roundtrip(self, tmp_path):
        pairs = make_dataset(3, 16, seed=5)
        write_dataset(pairs, tmp_path)
        assert (tmp_path / "manifest.txt").exists()
        back = load_dataset(tmp_path)
        assert len(back) == 3
        for p, q in zip(pairs, back):
            # PPM quantizes to 8 bits; half-step bound plus float slack.
            assert float(np.max(np.abs(p.hazy.data - q.hazy.data))) <= 0.5 / 255 + 1e-6
            np.testing.assert_array_equal(p.airlight, q.airlight)
            assert p.beta == q.beta

    def test_load_missing_manifest(self, tmp_path):
        with pytest.raises(ValueError):
            load_dataset(tmp_path)

    def test_corrupt_manifest_rejected(self, tmp_path):
        pairs = make_dataset(1, 16, seed=6)
        write_dataset(pairs, tmp_path)
        mpath = tmp_path / "manifest.txt"
        mpath.write_text("hazy_0000.ppm clean_0000.ppm 0.9 0.9\n")
        with pytest.raises(ValueError):
            load_dataset(mpath.parent)

    def test_directory_source(self, tmp_path):
        for i in range(2):
            img = _clean(40, 20 + i)
            write_ppm(tmp_path / f"src_{i}.ppm", img)
        pairs = make_dataset(4, 24, seed=7, clean_source="directory", source_dir=tmp_path)
        assert len(pairs) == 4
        for p in pairs:
            assert p.clean.shape == (1, 3, 24, 24)

    def test_directory_source_requires_dir(self):
        with pytest.raises(ValueError):
            make_dataset(2, 16, seed=8, clean_source="directory", source_dir=None)

    def test_source_too_small_rejected(self, tmp_path):
        write_ppm(tmp_path / "small.ppm", _clean(8, 21))
        with pytest.raises(ShapeError):
            make_dataset(1, 16, seed=9, clean_source="directory", source_dir=tmp_path)


class TestPpm:
    def test_roundtrip_bitwise_bytes(self, tmp_path):
        img = _clean(20, 30)
        p = tmp_path / "x.ppm"
        write_ppm(p, img)
        q = read_ppm(p)
        write_ppm(tmp_path / "y.ppm", q)
        assert (tmp_path / "x.ppm").read_bytes() == (tmp_path / "y.ppm").read_bytes()

    def test_quantization_bound(self, tmp_path):
        img = _clean(20, 31)
        p = tmp_path / "x.ppm"
        write_ppm(p, img)
        q = read_ppm(p)
        assert float(np.max(np.abs(q.data - img.data))) <= 0.5 / 255 + 1e-6

    def test_comment_and_whitespace_tolerant(self, tmp_path):
        p = tmp_path / "c.ppm"
        payload = bytes([255, 0, 0, 0, 255, 0])
        p.write_bytes(b"P6 # header comment\n# another\n 2 1\n255\n" + payload)
        img = read_ppm(p)
        assert img.shape == (1, 3, 1, 2)
        np.testing.assert_allclose(img.data[0, 0, 0], [1.0, 0.0], atol=1e-6)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "b.ppm"
        p.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(ValueError):
            read_ppm(p)

    def test_truncated_rejected(self, tmp_path):
        p = tmp_path / "t.ppm"
        p.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(ValueError):
            read_ppm(p)
