"""Unit tests for cube I/O, PCA, patch extraction, splitting, synthesis."""

import json

import numpy as np
import pytest

from hsidiff import data as D
from hsidiff.errors import (
    BadMagicError,
    ConfigError,
    DataError,
    FormatError,
    HeaderMismatchError,
    TruncatedFileError,
)
from hsidiff.tensor import make_rng


def _tiny_cube():
    return D.HsiCube(
        raster=np.array([[[7.0]]], dtype=np.float32),
        labels=np.array([[1]], dtype=np.uint16),
    )


def _random_cube(seed, bands=5, height=6, width=7, labeled=True):
    rng = make_rng(seed)
    raster = rng.normal(size=(bands, height, width)).astype(np.float32)
    if labeled:
        labels = rng.integers(1, 4, size=(height, width)).astype(np.uint16)
    else:
        labels = np.zeros((height, width), dtype=np.uint16)
    return D.HsiCube(raster=raster, labels=labels)


class TestCubeFormat:
    def test_single_pixel_round_trip_bytes(self, tmp_path):
        first = tmp_path / "a.hsicube"
        second = tmp_path / "b.hsicube"
        D.save_cube(_tiny_cube(), first)
        D.save_cube(D.load_cube(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_round_trip_values_and_names(self, tmp_path):
        cube = _random_cube(1)
        cube.class_names = ["water", "soil", "crop"]
        path = tmp_path / "c.hsicube"
        D.save_cube(cube, path)
        loaded = D.load_cube(path)
        np.testing.assert_array_equal(loaded.raster, cube.raster)
        np.testing.assert_array_equal(loaded.labels, cube.labels)
        assert loaded.class_names == cube.class_names

    def test_synth_round_trip_dimensions(self, tmp_path):
        cube = D.synth_cube(classes=3, width=32, height=32, bands=20, noise_sigma=0.1, seed=5)
        path = tmp_path / "synth.hsicube"
        D.save_cube(cube, path)
        loaded = D.load_cube(path)
        assert (loaded.width, loaded.height, loaded.bands) == (32, 32, 20)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.hsicube"
        path.write_bytes(b"NOTACUBE" + b"\x00" * 32)
        with pytest.raises(BadMagicError):
            D.load_cube(path)

    def test_payload_shorter_than_header_promises(self, tmp_path):
        # Header says 2x2x3 (12 floats) but only 11 are present before
        # the label section.
        header = json.dumps(
            {"bands": 3, "dtype": "f32", "height": 2, "interleave": "bsq", "width": 2},
            sort_keys=True,
            separators=(",", ":"),
        ).encode()
        blob = (
            D.CUBE_MAGIC
            + np.uint32(len(header)).tobytes()
            + header
            + np.zeros(11, dtype="<f4").tobytes()
            + D.LABEL_MAGIC
            + np.zeros(4, dtype="<u2").tobytes()
        )
        path = tmp_path / "short.hsicube"
        path.write_bytes(blob)
        with pytest.raises(HeaderMismatchError, match="11"):
            D.load_cube(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "t.hsicube"
        D.save_cube(_random_cube(2), path)
        whole = path.read_bytes()
        path.write_bytes(whole[: len(whole) - 9])
        with pytest.raises(TruncatedFileError):
            D.load_cube(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "g.hsicube"
        D.save_cube(_random_cube(3), path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(HeaderMismatchError):
            D.load_cube(path)

    def test_header_not_json(self, tmp_path):
        path = tmp_path / "j.hsicube"
        path.write_bytes(D.CUBE_MAGIC + np.uint32(4).tobytes() + b"oops")
        with pytest.raises(FormatError):
            D.load_cube(path)

    def test_labels_shape_validated(self):
        with pytest.raises(DataError):
            D.HsiCube(
                raster=np.zeros((2, 3, 3), dtype=np.float32),
                labels=np.zeros((3, 4), dtype=np.uint16),
            )


class TestFitPca:
    def test_diagonal_covariance(self):
        # Four 2-band pixels chosen so the sample covariance (divisor
        # N-1) is exactly diag(3, 1) and the mean is zero.
        a = np.sqrt(4.5)
        b = np.sqrt(1.5)
        spectra = np.array([[a, 0.0], [-a, 0.0], [0.0, b], [0.0, -b]])
        cube = D.HsiCube(
            raster=spectra.T.reshape(2, 1, 4).astype(np.float32),
            labels=np.zeros((1, 4), dtype=np.uint16),
        )
        model = D.fit_pca(cube, 2)
        np.testing.assert_allclose(model.mean, [0.0, 0.0], atol=1e-7)
        np.testing.assert_allclose(model.explained_variance, [3.0, 1.0], atol=1e-5)
        np.testing.assert_allclose(model.components[0], [1.0, 0.0], atol=1e-6)

    def test_full_basis_is_isometry(self):
        cube = _random_cube(4, bands=6, height=5, width=6)
        model = D.fit_pca(cube, 6)
        x = cube.raster.reshape(6, -1).T.astype(np.float64)
        projected = (x - model.mean) @ model.components.T
        d_orig = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2)
        d_proj = np.linalg.norm(projected[:, None, :] - projected[None, :, :], axis=2)
        np.testing.assert_allclose(d_proj, d_orig, atol=1e-6)

    def test_constant_band_carries_no_weight(self):
        rng = make_rng(5)
        varying = rng.normal(size=(3, 40))
        constant = np.full((1, 40), 2.5)
        raster = np.concatenate([varying, constant]).reshape(4, 4, 10).astype(np.float32)
        cube = D.HsiCube(raster=raster, labels=np.zeros((4, 10), dtype=np.uint16))
        model = D.fit_pca(cube, 4)
        assert abs(model.components[0][3]) < 1e-8
        assert model.explained_variance[-1] < 1e-8

    def test_orthonormal_components(self):
        cube = _random_cube(6, bands=8)
        model = D.fit_pca(cube, 5)
        gram = model.components @ model.components.T
        np.testing.assert_allclose(gram, np.eye(5), atol=1e-6)

    def test_variance_nonincreasing(self):
        model = D.fit_pca(_random_cube(7, bands=9), 9)
        diffs = np.diff(model.explained_variance)
        assert np.all(diffs <= 1e-12)

    def test_reconstruction_error_nonincreasing_in_components(self):
        cube = _random_cube(8, bands=7)
        x = cube.raster.reshape(7, -1).T.astype(np.float64)
        errors = []
        for c in range(1, 8):
            model = D.fit_pca(cube, c)
            proj = (x - model.mean) @ model.components.T
            recon = proj @ model.components + model.mean
            errors.append(np.linalg.norm(recon - x))
        assert all(b <= a + 1e-9 for a, b in zip(errors, errors[1:]))
        assert errors[-1] < 1e-6

    def test_too_many_components(self):
        with pytest.raises(ConfigError):
            D.fit_pca(_random_cube(9, bands=4), 5)

    def test_too_few_pixels(self):
        cube = D.HsiCube(
            raster=np.zeros((3, 1, 2), dtype=np.float32),
            labels=np.zeros((1, 2), dtype=np.uint16),
        )
        with pytest.raises(DataError):
            D.fit_pca(cube, 3)

    def test_deterministic_signs(self):
        cube = _random_cube(10, bands=6)
        first = D.fit_pca(cube, 4)
        second = D.fit_pca(cube, 4)
        np.testing.assert_array_equal(first.components, second.components)
        for row in first.components:
            assert row[np.argmax(np.abs(row))] > 0


class TestApplyPca:
    def test_identity_model(self):
        cube = _random_cube(11, bands=3)
        model = D.PcaModel(
            mean=np.zeros(3), components=np.eye(3), explained_variance=np.ones(3)
        )
        out = D.apply_pca(cube, model)
        np.testing.assert_allclose(out.raster, cube.raster, atol=1e-7)
        np.testing.assert_array_equal(out.labels, cube.labels)

    def test_constant_data_minus_mean_is_zero(self):
        cube = D.HsiCube(
            raster=np.full((2, 3, 3), 4.0, dtype=np.float32),
            labels=np.zeros((3, 3), dtype=np.uint16),
        )
        model = D.PcaModel(
            mean=np.array([4.0, 4.0]), components=np.eye(2), explained_variance=np.ones(2)
        )
        out = D.apply_pca(cube, model)
        assert not out.raster.any()

    def test_hand_computed_projection(self):
        # Three pixels, mean (1,2), rotation-like components; projections
        # worked out by hand: (0,0), (2.2,0.4), (-2.2,-0.4).
        spectra = np.array([[1.0, 2.0], [2.0, 4.0], [0.0, 0.0]])
        cube = D.HsiCube(
            raster=spectra.T.reshape(2, 1, 3).astype(np.float32),
            labels=np.zeros((1, 3), dtype=np.uint16),
        )
        model = D.PcaModel(
            mean=np.array([1.0, 2.0]),
            components=np.array([[0.6, 0.8], [-0.8, 0.6]]),
            explained_variance=np.array([1.0, 1.0]),
        )
        out = D.apply_pca(cube, model)
        expected = np.array([[0.0, 0.0], [2.2, 0.4], [-2.2, -0.4]])
        np.testing.assert_allclose(out.raster.reshape(2, 3).T, expected, atol=1e-6)

    def test_band_mismatch(self):
        cube = _random_cube(12, bands=4)
        model = D.PcaModel(
            mean=np.zeros(3), components=np.eye(3), explained_variance=np.ones(3)
        )
        with pytest.raises(DataError):
            D.apply_pca(cube, model)


class TestExtractPatches:
    def test_patch_size_one_is_spectrum(self):
        cube = _random_cube(13, bands=4, height=3, width=3)
        samples = D.extract_patches(cube, 1)
        assert len(samples) == 9
        for s in samples:
            np.testing.assert_array_equal(
                s.patch.reshape(4), cube.raster[:, s.pixel[0], s.pixel[1]]
            )

    def test_unlabeled_cube_gives_no_samples(self):
        cube = _random_cube(14, labeled=False)
        assert D.extract_patches(cube, 3) == []

    def test_corner_mirror_window(self):
        # raster value = 10*row + col; the P=3 window at (0,0) mirrors
        # the first row and column: indices (0,0,1) each axis.
        values = np.arange(4)[None, :] + 10 * np.arange(4)[:, None]
        cube = D.HsiCube(
            raster=values[None].astype(np.float32),
            labels=np.eye(4, dtype=np.uint16),
        )
        sample = D.extract_patches(cube, 3)[0]
        assert sample.pixel == (0, 0)
        expected = np.array([[0, 0, 1], [0, 0, 1], [10, 10, 11]], dtype=np.float32)
        np.testing.assert_array_equal(sample.patch[:, :, 0], expected)

    def test_interior_patch_is_raw_window(self):
        cube = _random_cube(15, bands=2, height=6, width=6)
        samples = {s.pixel: s for s in D.extract_patches(cube, 3)}
        window = cube.raster[:, 1:4, 2:5].transpose(1, 2, 0)
        np.testing.assert_array_equal(samples[(2, 3)].patch, window)

    def test_even_patch_center_convention(self):
        # For P=4 the pixel sits at window index 1 (top-left of the
        # central 2x2 block), so one pad row above and two below.
        cube = _random_cube(16, bands=1, height=4, width=4)
        samples = {s.pixel: s for s in D.extract_patches(cube, 4)}
        np.testing.assert_array_equal(
            samples[(1, 1)].patch[:, :, 0], cube.raster[0]
        )
        assert samples[(1, 1)].patch[1, 1, 0] == cube.raster[0, 1, 1]

    def test_sample_count_and_order(self):
        cube = _random_cube(17)
        samples = D.extract_patches(cube, 3)
        assert len(samples) == int(np.count_nonzero(cube.labels))
        pixels = [s.pixel for s in samples]
        assert pixels == sorted(pixels)

    def test_unknown_padding_mode(self):
        with pytest.raises(ConfigError):
            D.extract_patches(_random_cube(18), 3, padding="zero")


def _fake_samples(counts):
    """counts: dict label -> n. Patch content is irrelevant for splitting."""
    patch = np.zeros((1, 1, 1), dtype=np.float32)
    samples = []
    i = 0
    for label, n in counts.items():
        for _ in range(n):
            samples.append(D.PatchSample(patch=patch, label=label, pixel=(0, i)))
            i += 1
    return samples


class TestStratifiedSplit:
    def test_exact_fractions(self):
        samples = _fake_samples({1: 100})
        spec = D.SplitSpec(0.25, 0.25, 0.50, seed=1)
        train, val, test = D.stratified_split(samples, spec)
        assert (len(train), len(val), len(test)) == (25, 25, 50)

    def test_largest_remainder_rounding(self):
        # 10 samples at 25/25/50: floors (2,2,5), one leftover goes to
        # train by the tie-break order.
        samples = _fake_samples({1: 10, 2: 10, 3: 10})
        train, val, test = D.stratified_split(samples, D.SplitSpec(0.25, 0.25, 0.50, seed=2))
        for label in (1, 2, 3):
            split_sizes = (
                sum(s.label == label for s in train),
                sum(s.label == label for s in val),
                sum(s.label == label for s in test),
            )
            assert split_sizes == (3, 2, 5)

    def test_partition_property(self):
        samples = _fake_samples({1: 17, 2: 9, 3: 31})
        train, val, test = D.stratified_split(samples, D.SplitSpec(0.25, 0.25, 0.50, seed=3))
        ids = [id(s) for part in (train, val, test) for s in part]
        assert len(ids) == len(samples)
        assert set(ids) == {id(s) for s in samples}

    def test_fractions_within_one_sample(self):
        samples = _fake_samples({1: 13, 2: 29})
        train, val, test = D.stratified_split(samples, D.SplitSpec(0.25, 0.25, 0.50, seed=4))
        for label, n in ((1, 13), (2, 29)):
            for part, frac in ((train, 0.25), (val, 0.25), (test, 0.50)):
                got = sum(s.label == label for s in part)
                assert abs(got - frac * n) <= 1.0

    def test_deterministic_per_seed(self):
        samples = _fake_samples({1: 20, 2: 20})
        spec = D.SplitSpec(0.25, 0.25, 0.50, seed=5)
        first = D.stratified_split(samples, spec)
        second = D.stratified_split(samples, spec)
        for a, b in zip(first, second):
            assert [s.pixel for s in a] == [s.pixel for s in b]

    def test_small_class_rejected_by_name(self):
        samples = _fake_samples({1: 10, 2: 2})
        with pytest.raises(DataError, match="class 2"):
            D.stratified_split(samples, D.SplitSpec(0.25, 0.25, 0.50, seed=6))

    def test_train_never_empty(self):
        samples = _fake_samples({1: 3})
        train, _, _ = D.stratified_split(samples, D.SplitSpec(0.05, 0.05, 0.90, seed=7))
        assert len(train) >= 1

    def test_bad_fractions_rejected(self):
        with pytest.raises(ConfigError):
            D.SplitSpec(0.5, 0.5, 0.1)
        with pytest.raises(ConfigError):
            D.SplitSpec(1.0, 0.0, 0.0)


class TestSynthCube:
    def test_zero_noise_constant_within_class(self):
        cube = D.synth_cube(classes=3, width=12, height=5, bands=8, noise_sigma=0.0, seed=8)
        for label in (1, 2, 3):
            rows, cols = np.nonzero(cube.labels == label)
            spectra = cube.raster[:, rows, cols]
            np.testing.assert_array_equal(spectra, spectra[:, :1].repeat(len(rows), axis=1))

    def test_vertical_strips(self):
        cube = D.synth_cube(classes=4, width=16, height=3, bands=4, noise_sigma=0.0, seed=9)
        assert np.array_equal(cube.labels, np.tile(cube.labels[:1], (3, 1)))
        np.testing.assert_array_equal(np.unique(cube.labels), [1, 2, 3, 4])
        for label in (1, 2, 3, 4):
            assert (cube.labels[0] == label).sum() == 4

    def test_fully_labeled(self):
        cube = D.synth_cube(classes=2, width=10, height=4, bands=3, noise_sigma=0.5, seed=10)
        assert cube.labels.min() >= 1

    def test_single_component_separates_two_classes(self):
        cube = D.synth_cube(classes=2, width=10, height=4, bands=12, noise_sigma=0.0, seed=11)
        model = D.fit_pca(cube, 1)
        x = cube.raster.reshape(12, -1).T.astype(np.float64)
        projected = ((x - model.mean) @ model.components.T)[:, 0]
        mean_1 = projected[(cube.labels == 1).reshape(-1)].mean()
        mean_2 = projected[(cube.labels == 2).reshape(-1)].mean()
        assert abs(mean_1 - mean_2) > 0.1

    def test_unit_peak_signatures(self):
        sig = D.class_signatures(3, 64)
        peaks = np.abs(sig).max(axis=1)
        np.testing.assert_allclose(peaks, np.ones(3), atol=1e-2)

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.hsicube", tmp_path / "b.hsicube"
        D.save_cube(D.synth_cube(3, 20, 20, 10, 0.2, seed=12), a)
        D.save_cube(D.synth_cube(3, 20, 20, 10, 0.2, seed=12), b)
        assert a.read_bytes() == b.read_bytes()

    def test_too_few_classes(self):
        with pytest.raises(ConfigError):
            D.synth_cube(1, 10, 10, 5, 0.1, seed=13)

    def test_width_must_hold_strips(self):
        with pytest.raises(ConfigError):
            D.synth_cube(5, 4, 10, 5, 0.1, seed=14)
