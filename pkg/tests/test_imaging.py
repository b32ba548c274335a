import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cfwd.errors import (
    CorruptData,
    EmptyDataset,
    ImageTooSmall,
    InvalidImage,
    MissingFile,
    PatchTooLarge,
    ShapeMismatch,
    UnsupportedFormat,
)
from cfwd.imaging import (
    PairedSample,
    SyntheticPairs,
    load_dataset,
    load_image,
    psnr,
    sample_patch_pair,
    save_image,
    ssim,
)


def _write_png(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)


class TestLoadSave:
    def test_white_png_is_all_ones(self, tmp_path):
        _write_png(tmp_path / "w.png", np.full((2, 2, 3), 255))
        img = load_image(tmp_path / "w.png")
        assert img.shape == (2, 2, 3)
        assert np.all(img == 1.0)

    def test_gray_128(self, tmp_path):
        _write_png(tmp_path / "g.png", np.full((1, 1), 128))
        img = load_image(tmp_path / "g.png")
        assert img.shape == (1, 1, 1)
        assert img[0, 0, 0] == pytest.approx(128 / 255, abs=1e-7)
        assert img[0, 0, 0] == pytest.approx(0.50196, abs=1e-5)

    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(17, 23, 3), dtype=np.uint8)
        _write_png(tmp_path / "a.png", pixels)
        img = load_image(tmp_path / "a.png")
        save_image(img, tmp_path / "b.png")
        back = np.asarray(Image.open(tmp_path / "b.png"))
        assert np.array_equal(back, pixels)

    def test_save_all_ones_gives_255(self, tmp_path):
        save_image(np.ones((3, 4, 3), dtype=np.float32), tmp_path / "o.png")
        assert np.all(np.asarray(Image.open(tmp_path / "o.png")) == 255)

    def test_half_rounds_up(self, tmp_path):
        save_image(np.full((2, 2, 1), 0.5, dtype=np.float32), tmp_path / "h.png")
        assert np.all(np.asarray(Image.open(tmp_path / "h.png")) == 128)

    def test_out_of_range_rejected_without_writing(self, tmp_path):
        with pytest.raises(InvalidImage):
            save_image(np.full((2, 2, 3), 1.2, dtype=np.float32), tmp_path / "bad.png")
        assert not (tmp_path / "bad.png").exists()

    def test_jpeg_loads(self, tmp_path):
        Image.fromarray(np.full((8, 8, 3), 200, dtype=np.uint8)).save(tmp_path / "j.jpg", quality=100)
        img = load_image(tmp_path / "j.jpg")
        assert img.shape == (8, 8, 3)
        assert abs(float(img.mean()) - 200 / 255) < 2 / 255

    def test_errors(self, tmp_path):
        with pytest.raises(MissingFile):
            load_image(tmp_path / "nope.png")
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(tmp_path / "x.bmp")
        with pytest.raises(UnsupportedFormat):
            load_image(tmp_path / "x.bmp")
        (tmp_path / "c.png").write_bytes(b"\x89PNG\r\n\x1a\nnot really a png")
        with pytest.raises(CorruptData):
            load_image(tmp_path / "c.png")


class TestDataset:
    def test_pairs_by_filename(self, tmp_path):
        SyntheticPairs(count=3, size=16).write(tmp_path)
        _write_png(tmp_path / "low" / "orphan.png", np.zeros((16, 16, 3)))
        data = load_dataset(tmp_path)
        assert [s.identifier for s in data] == ["pair000", "pair001", "pair002"]
        assert data[0].low.shape == data[0].high.shape == (16, 16, 3)

    def test_empty(self, tmp_path):
        (tmp_path / "low").mkdir()
        (tmp_path / "high").mkdir()
        with pytest.raises(EmptyDataset):
            load_dataset(tmp_path)

    def test_pair_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            PairedSample(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), "x")


class TestPatches:
    @pytest.fixture
    def pair(self):
        rng = np.random.default_rng(1)
        low = rng.random((32, 48, 3)).astype(np.float32)
        return PairedSample(low, low * 0.5, "p")

    def test_full_size_is_identity(self, pair):
        sq = PairedSample(pair.low[:32, :32], pair.high[:32, :32], "sq")
        out = sample_patch_pair(sq, 32, np.random.default_rng(0))
        assert np.array_equal(out.low, sq.low) and np.array_equal(out.high, sq.high)

    def test_same_window_on_both(self, pair):
        out = sample_patch_pair(pair, 16, np.random.default_rng(3))
        assert np.array_equal(out.high, out.low * 0.5)

    def test_seed_determinism(self, pair):
        a = sample_patch_pair(pair, 16, np.random.default_rng(7))
        b = sample_patch_pair(pair, 16, np.random.default_rng(7))
        assert np.array_equal(a.low, b.low)

    def test_too_large(self, pair):
        with pytest.raises(PatchTooLarge):
            sample_patch_pair(pair, 64, np.random.default_rng(0))

    def test_indivisible(self, pair):
        with pytest.raises(ValueError):
            sample_patch_pair(pair, 14, np.random.default_rng(0), levels=2)

    def test_offsets_uniform(self):
        # 1e4 crops of 256 from 512: offsets take 257 values per axis. Bin the
        # 257x257 grid into 8x8 blocks and chi-square against the exact expectation.
        rows = np.arange(512, dtype=np.float32)[:, None, None] * np.ones((1, 512, 1), np.float32)
        cols = np.arange(512, dtype=np.float32)[None, :, None] * np.ones((512, 1, 1), np.float32)
        pair = PairedSample(rows, cols, "grid")
        rng = np.random.default_rng(2024)
        ys, xs = [], []
        for _ in range(10_000):
            p = sample_patch_pair(pair, 256, rng)
            ys.append(int(p.low[0, 0, 0]))
            xs.append(int(p.high[0, 0, 0]))
        edges = np.linspace(0, 257, 9)
        counts, _, _ = np.histogram2d(ys, xs, bins=[edges, edges])
        widths = np.histogram(np.arange(257), bins=edges)[0]
        expected = 10_000 * np.outer(widths, widths) / 257**2
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        dof = counts.size - 1
        assert abs(chi2 - dof) < 3 * math.sqrt(2 * dof)

    @given(st.integers(1, 40), st.integers(1, 40), st.data())
    @settings(max_examples=60, deadline=None)
    def test_never_reads_out_of_bounds(self, h, w, data):
        size = data.draw(st.integers(1, min(h, w)))
        img = np.arange(h * w, dtype=np.float32).reshape(h, w, 1)
        out = sample_patch_pair(PairedSample(img, img, "f"), size, np.random.default_rng(data.draw(st.integers(0, 99))), levels=0)
        assert out.low.shape == (size, size, 1)
        y, x = divmod(int(out.low[0, 0, 0]), w)
        assert 0 <= y <= h - size and 0 <= x <= w - size
        assert np.array_equal(out.low, img[y : y + size, x : x + size])


class TestPSNR:
    def test_identity_is_inf(self):
        x = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(x, x) == math.inf

    def test_zero_vs_one(self):
        assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == pytest.approx(0.0, abs=1e-12)

    def test_half(self):
        assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(10 * math.log10(4), abs=1e-9)
        assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(6.0206, abs=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((6, 6, 3)), rng.random((6, 6, 3))
        assert psnr(a, b) == psnr(b, a)


class TestSSIM:
    def test_identity_exact(self):
        x = np.random.default_rng(0).random((32, 32, 3))
        assert ssim(x, x) == 1.0

    def test_constant(self):
        c = np.full((16, 16, 3), 0.5)
        assert ssim(c, c) == 1.0

    def test_shift_between_zero_and_one(self):
        x = np.random.default_rng(5).random((64, 64)) * 0.9
        v = ssim(x, x + 0.1)
        assert 0.0 < v < 1.0

    def test_matches_reference_windowed_formula(self):
        from skimage.metrics import structural_similarity

        rng = np.random.default_rng(9)
        a = rng.random((40, 36, 3))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        ref = structural_similarity(
            a, b, channel_axis=2, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, data_range=1.0,
        )
        assert ssim(a, b) == pytest.approx(ref, abs=1e-6)

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            ssim(np.zeros((10, 20)), np.zeros((10, 20)))

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_symmetric_and_reflexive(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((12, 14, 3)), rng.random((12, 14, 3))
        assert ssim(a, b) == ssim(b, a)
        assert ssim(a, a) == 1.0
