import math

import numpy as np
import pytest
import torch

from cfwd.diffusion import make_schedule
from cfwd.errors import CheckpointMismatch, ConfigError, CorruptData, EmptyDataset, MissingFile, NonFiniteLoss
from cfwd.hfpm import init_hfpm
from cfwd.imaging import Dataset, PairedSample, SyntheticPairs, load_image, psnr, ssim, ssim_torch
from cfwd.pipeline import (
    Checkpoint,
    Enhancer,
    TrainConfig,
    content_loss,
    diffusion_loss,
    enhance,
    evaluate,
    load_checkpoint,
    load_config,
    save_checkpoint,
    smoke_config,
    total_loss,
    train,
)
from cfwd.pipeline.checkpoint import from_bytes, to_bytes
from cfwd.pipeline.cli import main
from cfwd.pipeline.config import format_config, parse_config_text
from cfwd.pipeline.inference import image_seed
from cfwd.pipeline.losses import diffusion_terms, from_latent, to_latent
from cfwd.pipeline.train import build_models
from cfwd.vlg import PromptPair, StubEmbedder, guided_vlg_loss, to_image_range
from cfwd.wavelet import approximations, decompose


def micro_config(**overrides):
    base = dict(
        batch_size=2, patch_size=16, iterations=6, learning_rate=1e-3, checkpoint_every=3, log_every=1,
        timesteps=20, sampling_steps=4, base_channels=4, unet_levels=1, hfpm_width=4,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def pairs():
    return SyntheticPairs(count=3, size=16, seed=3).build()


def exact_noise_denoiser(x0, s):
    """Returns the noise that produced x_t from the known clean latent."""

    def eps(x_t, cond, t):
        ab = torch.as_tensor(s.alpha_bar[t.numpy()], dtype=x_t.dtype).reshape(-1, 1, 1, 1)
        return (x_t - ab.sqrt() * x0) / (1 - ab).sqrt()

    return eps


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.batch_size, cfg.patch_size, cfg.iterations) == (1e-4, 16, 256, 200_000)
        assert cfg.layer_weights == (0.2,) * 5

    def test_text_round_trip(self, tmp_path):
        cfg = smoke_config(seed=4, layer_weights=(0.1, 0.2, 0.3, 0.4, 0.5), prompt_positive="a bright photo")
        (tmp_path / "c.txt").write_text(format_config(cfg))
        back = load_config(tmp_path / "c.txt")
        assert back == cfg
        assert back.fingerprint() == cfg.fingerprint()

    def test_parse(self):
        cfg = parse_config_text("# comment\nlevels = 1\nuse_vlg = false\niterations = 5e3\n\nprompt_positive = 'bright'\n")
        assert cfg.levels == 1 and cfg.use_vlg is False and cfg.iterations == 5000
        assert cfg.prompt_positive == "bright"

    def test_unknown_and_malformed(self):
        with pytest.raises(ConfigError, match="unknown"):
            parse_config_text("learning_rat = 1e-3\n")
        with pytest.raises(ConfigError):
            parse_config_text("levels 2\n")
        with pytest.raises(ConfigError):
            parse_config_text("use_vlg = maybe\n")
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"levels": 2, "extra": 1})

    @pytest.mark.parametrize(
        "bad",
        [
            dict(levels=0), dict(guidance_scale=4), dict(patch_size=100), dict(layer_weights=(0.2,) * 4),
            dict(layer_weights=(-1, 0, 0, 0, 0)), dict(vlg_mode="x"), dict(sampling_steps=500),
            dict(hfpm_version="v9"), dict(batch_size=0), dict(learning_rate=0.0),
            dict(lr_schedule="step"),
        ],
    )
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_fingerprint_changes(self):
        assert TrainConfig().fingerprint() != TrainConfig(seed=1).fingerprint()


class TestDiffusionLoss:
    def test_exact_noise_gives_zero(self):
        s = make_schedule(50)
        g = torch.Generator().manual_seed(0)
        x0 = torch.randn(4, 3, 8, 8, generator=g, dtype=torch.float64)
        cond = torch.randn_like(x0)
        loss = diffusion_loss(x0, cond, exact_noise_denoiser(x0, s), s, torch.Generator().manual_seed(1))
        assert loss.item() <= 1e-6

    def test_zero_prediction_moment(self):
        s = make_schedule(200)
        x0 = torch.zeros(10_000, 1, 1, 1, dtype=torch.float64)
        terms = diffusion_terms(x0, x0, lambda x, c, t: torch.zeros_like(x), s, torch.Generator().manual_seed(2))
        # mean of 1e4 squared unit normals: sd = sqrt(2 / 1e4)
        assert abs(terms.noise.item() - 1.0) < 3 * math.sqrt(2 / 10_000)

    def test_nonnegative(self):
        s = make_schedule(20)
        model = build_models(micro_config())[0]
        x0 = torch.rand(2, 3, 8, 8)
        assert diffusion_loss(x0, x0 * 0.2, model, s).item() >= 0


class TestContentLoss:
    def test_identity(self):
        x = torch.rand(2, 3, 32, 32)
        assert content_loss(x, x, StubEmbedder(), (0.2,) * 5).item() == 0.0

    def test_zero_weights_leave_ssim(self):
        g = torch.Generator().manual_seed(0)
        a, b = torch.rand(1, 3, 32, 32, generator=g), torch.rand(1, 3, 32, 32, generator=g)
        value = content_loss(a, b, StubEmbedder(), (0.0,) * 5).item()
        assert value == pytest.approx(1 - ssim_torch(a, b).item(), abs=1e-7)

    def test_doubling_weights(self):
        g = torch.Generator().manual_seed(1)
        a, b = torch.rand(1, 3, 32, 32, generator=g, dtype=torch.float64), torch.rand(1, 3, 32, 32, generator=g, dtype=torch.float64)
        stub = StubEmbedder()
        gamma = (0.1, 0.3, 0.2, 0.5, 0.4)
        ssim_term = content_loss(a, b, stub, (0.0,) * 5).item()
        one = content_loss(a, b, stub, gamma).item() - ssim_term
        two = content_loss(a, b, stub, tuple(2 * x for x in gamma)).item() - ssim_term
        assert one > 0
        assert two == pytest.approx(2 * one, rel=1e-10)


class TestLatentRange:
    def test_constants_map_to_unit_interval(self):
        for K in (1, 2, 3):
            for value, expected in ((0.0, -1.0), (0.5, 0.0), (1.0, 1.0)):
                approx = decompose(torch.full((1, 3, 16, 16), value, dtype=torch.float64), K).approx
                assert torch.allclose(to_latent(approx, K), torch.full_like(approx, expected), atol=1e-12)

    def test_round_trip(self):
        z = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        for K in (1, 2, 3):
            assert torch.allclose(to_latent(from_latent(z, K), K), z, atol=1e-12)


class TestTotalLoss:
    def _batch(self, seed=0):
        g = torch.Generator().manual_seed(seed)
        high = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64) * 0.8 + 0.1
        return high * 0.3, high

    def test_diffusion_only(self):
        low, high = self._batch()
        cfg = micro_config(use_vlg=False, use_hfpm=False, use_content=False)
        den, hf = build_models(cfg)
        den, hf = den.double(), hf.double()
        s = make_schedule(cfg.timesteps)
        total, parts = total_loss(low, high, den, hf, cfg, StubEmbedder(), s, generator=torch.Generator().manual_seed(5))
        x0 = to_latent(decompose(high, cfg.levels).approx, cfg.levels)
        cond = to_latent(decompose(low, cfg.levels).approx, cfg.levels)
        expected = diffusion_loss(x0, cond, den, s, torch.Generator().manual_seed(5))
        assert total.item() == pytest.approx(expected.item(), rel=1e-12)
        assert parts["vlg"] == parts["spectral"] == parts["content"] == 0.0

    def test_native_latent_range(self):
        low, high = self._batch()
        cfg = micro_config(use_vlg=False, use_hfpm=False, use_content=False, normalize_latent=False)
        den, hf = build_models(cfg)
        den, hf = den.double(), hf.double()
        s = make_schedule(cfg.timesteps)
        total, _ = total_loss(low, high, den, hf, cfg, StubEmbedder(), s, generator=torch.Generator().manual_seed(5))
        expected = diffusion_loss(
            decompose(high, cfg.levels).approx, decompose(low, cfg.levels).approx, den, s, torch.Generator().manual_seed(5)
        )
        assert total.item() == pytest.approx(expected.item(), rel=1e-12)

    def test_degenerate_pair_leaves_guidance_only(self):
        _, high = self._batch(1)
        cfg = micro_config()
        s = make_schedule(cfg.timesteps)
        x0 = to_latent(decompose(high, cfg.levels).approx, cfg.levels)
        hfpm = init_hfpm(0, 3, 4).double()
        stub = StubEmbedder()
        total, parts = total_loss(high, high, exact_noise_denoiser(x0, s), hfpm, cfg, stub, s,
                                  generator=torch.Generator().manual_seed(2))
        ref_approx = [to_image_range(a, k) for k, a in enumerate(approximations(decompose(high, cfg.levels)), 1)]
        vlg_ref = guided_vlg_loss(ref_approx, high, PromptPair(), stub, cfg.guidance_scale, cfg.vlg_mode).item()
        assert parts["vlg"] > 0
        assert abs(total.item() - vlg_ref) <= 1e-4

    def test_breakdown_sums(self):
        low, high = self._batch(2)
        cfg = micro_config()
        den, hf = build_models(cfg)
        total, parts = total_loss(low.float(), high.float(), den, hf, cfg, StubEmbedder(),
                                  make_schedule(cfg.timesteps), generator=torch.Generator().manual_seed(0))
        assert total.dtype == torch.float64
        assert abs(total.item() - sum(parts.values())) <= 1e-9
        assert all(v >= 0 for v in parts.values())


class TestTraining:
    def test_same_seed_same_log(self, pairs, tmp_path):
        cfg = micro_config()
        train(cfg, pairs, StubEmbedder(), out_dir=tmp_path / "a")
        train(cfg, pairs, StubEmbedder(), out_dir=tmp_path / "b")
        a = (tmp_path / "a" / "loss_log.csv").read_bytes()
        assert a == (tmp_path / "b" / "loss_log.csv").read_bytes()
        assert len(a.splitlines()) == cfg.iterations + 1
        assert sorted(p.name for p in (tmp_path / "a").iterdir()) == [
            "ckpt_0000003.bin", "ckpt_0000006.bin", "config.txt", "final.bin", "loss_log.csv",
        ]
        assert load_config(tmp_path / "a" / "config.txt") == cfg

    def test_trail(self, pairs):
        trail, rows = train(micro_config(iterations=5, checkpoint_every=2), pairs, StubEmbedder())
        assert [c.iteration for c in trail] == [2, 4, 5]
        assert [r["iteration"] for r in rows] == [1, 2, 3, 4, 5]

    def test_nan_parameter_aborts(self, pairs, tmp_path):
        cfg = micro_config()
        den, hf = build_models(cfg)
        with torch.no_grad():
            den.stem.weight[0, 0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteLoss) as info:
            train(cfg, pairs, StubEmbedder(), out_dir=tmp_path, models=(den, hf))
        assert info.value.state["iteration"] == 1
        assert "stem.weight" in info.value.state["nonfinite_parameters"]
        assert (tmp_path / "nonfinite_dump.json").exists()

    def test_empty_dataset(self):
        with pytest.raises(EmptyDataset):
            train(micro_config(), Dataset([]), StubEmbedder())

    def test_cosine_lr_changes_updates(self, pairs):
        _, const = train(micro_config(iterations=4), pairs, StubEmbedder())
        _, cos = train(micro_config(iterations=4, lr_schedule="cosine"), pairs, StubEmbedder())
        assert const[0]["total"] == cos[0]["total"]
        assert const[-1]["total"] != cos[-1]["total"]

    def test_smoke_loss_decreases(self):
        data = SyntheticPairs(count=4, size=64).build()
        cfg = smoke_config(iterations=300)
        _, rows = train(cfg, data, StubEmbedder())
        totals = [r["total"] for r in rows]
        assert np.mean(totals[-50:]) < np.mean(totals[:50])


@pytest.fixture(scope="module")
def micro_checkpoint(pairs):
    trail, _ = train(micro_config(iterations=2), pairs, StubEmbedder())
    return trail[-1]


class TestCheckpoint:
    def test_round_trip(self, micro_checkpoint, tmp_path):
        path = save_checkpoint(micro_checkpoint, tmp_path / "c.bin")
        back = load_checkpoint(path)
        assert back.config == micro_checkpoint.config
        assert back.iteration == micro_checkpoint.iteration
        for k, v in micro_checkpoint.denoiser.items():
            assert np.array_equal(back.denoiser[k], v)
        assert to_bytes(back) == to_bytes(micro_checkpoint)

    def test_layout(self, micro_checkpoint):
        data = to_bytes(micro_checkpoint)
        assert data[:8] == b"CFWDCKPT"
        assert int.from_bytes(data[8:12], "little") == 1
        n = int.from_bytes(data[12:20], "little")
        n_params = sum(v.size for v in micro_checkpoint.denoiser.values()) + sum(v.size for v in micro_checkpoint.hfpm.values())
        assert len(data) == 20 + n + 4 * n_params

    def test_evaluate_report_survives_round_trip(self, micro_checkpoint, pairs, tmp_path):
        back = from_bytes(to_bytes(micro_checkpoint))
        a = evaluate(pairs, micro_checkpoint, seed=3).write_csv(tmp_path / "a.csv").read_bytes()
        b = evaluate(pairs, back, seed=3).write_csv(tmp_path / "b.csv").read_bytes()
        assert a == b

    def test_corruption(self, micro_checkpoint, tmp_path):
        data = to_bytes(micro_checkpoint)
        with pytest.raises(CorruptData):
            from_bytes(b"NOTACKPT" + data[8:])
        with pytest.raises(CheckpointMismatch):
            from_bytes(data[:8] + (2).to_bytes(4, "little") + data[12:])
        with pytest.raises(CorruptData):
            from_bytes(data[:-4])
        with pytest.raises(CorruptData):
            from_bytes(data[:14])
        with pytest.raises(MissingFile):
            load_checkpoint(tmp_path / "none.bin")

    def test_fingerprint_mismatch(self, micro_checkpoint):
        bad = from_bytes(to_bytes(micro_checkpoint))
        bad.config = bad.config.replace(base_channels=8)
        with pytest.raises(CheckpointMismatch):
            bad.build_models()


class TestEnhance:
    def test_shape_range_determinism(self, micro_checkpoint):
        img = np.random.default_rng(0).random((20, 27, 3)).astype(np.float32) * 0.2
        a = enhance(img, micro_checkpoint, seed=1)
        b = enhance(img, micro_checkpoint, seed=1)
        assert a.shape == img.shape and a.dtype == np.float32
        assert a.min() >= 0 and a.max() <= 1
        assert np.array_equal(a, b)

    def test_random_checkpoints_stay_finite(self, micro_checkpoint):
        rng = np.random.default_rng(0)
        img = rng.random((16, 16, 3)).astype(np.float32)
        for i in range(100):
            ckpt = from_bytes(to_bytes(micro_checkpoint))
            for params in (ckpt.denoiser, ckpt.hfpm):
                for k in params:
                    params[k] = (rng.standard_normal(params[k].shape) * rng.uniform(0.1, 3)).astype(np.float32)
            out = enhance(img, ckpt, seed=i)
            assert np.isfinite(out).all() and out.min() >= 0 and out.max() <= 1

    def test_image_seed(self):
        assert image_seed(0, 1) == image_seed(0, 1)
        assert len({image_seed(0, i) for i in range(50)}) == 50


class TestEvaluate:
    def _oracle_enhancer(self, levels=2):
        # with low = high the clean latent is the condition itself
        s = make_schedule(20)

        def denoiser(x_t, cond, t):
            ab = torch.as_tensor(s.alpha_bar[t.numpy()], dtype=x_t.dtype).reshape(-1, 1, 1, 1)
            return (x_t - ab.sqrt() * cond) / (1 - ab).sqrt()

        return Enhancer(denoiser, lambda t: t, s, levels, 5, multiple=4, config_fingerprint="oracle")

    def test_identity_pairs_score_one(self):
        rng = np.random.default_rng(4)
        imgs = [rng.random((16, 16, 3)).astype(np.float32) for _ in range(3)]
        data = Dataset([PairedSample(x, x, f"i{i}") for i, x in enumerate(imgs)])
        report = evaluate(data, self._oracle_enhancer(), timestamp="fixed")
        assert report.mean_ssim == pytest.approx(1.0, abs=1e-6)
        assert len(report.rows) == 3
        assert report.mean_psnr > 60

    def test_means_and_text(self, micro_checkpoint, pairs, tmp_path):
        report = evaluate(pairs, micro_checkpoint, timestamp="2026-01-01T00:00:00+00:00")
        assert len(report.rows) == len(pairs)
        assert report.mean_psnr == pytest.approx(np.mean([r["psnr"] for r in report.rows]))
        assert report.mean_ssim == pytest.approx(np.mean([r["ssim"] for r in report.rows]))
        text = report.to_text()
        assert "2026-01-01" in text and micro_checkpoint.config.fingerprint() in text
        csv_lines = report.write_csv(tmp_path / "r.csv").read_text().splitlines()
        assert csv_lines[0] == "image,psnr,ssim" and csv_lines[-1].startswith("mean,")
        assert len(csv_lines) == len(pairs) + 2


class TestCLI:
    def test_train_enhance_evaluate(self, tmp_path):
        SyntheticPairs(count=2, size=16).write(tmp_path / "data")
        (tmp_path / "cfg.txt").write_text(format_config(micro_config(iterations=2)))
        assert main(["train", "--config", str(tmp_path / "cfg.txt"), "--data", str(tmp_path / "data"),
                     "--out", str(tmp_path / "run")]) == 0
        ckpt = tmp_path / "run" / "final.bin"
        assert main(["enhance", "--ckpt", str(ckpt), "--input", str(tmp_path / "data" / "low"),
                     "--out", str(tmp_path / "enh")]) == 0
        outs = sorted((tmp_path / "enh").iterdir())
        assert [p.name for p in outs] == ["pair000.png", "pair001.png"]
        assert load_image(outs[0]).shape == (16, 16, 3)
        assert main(["evaluate", "--ckpt", str(ckpt), "--data", str(tmp_path / "data"),
                     "--out", str(tmp_path / "rep.csv")]) == 0
        assert (tmp_path / "rep.csv").exists() and (tmp_path / "rep.txt").exists()

    def test_decompose(self, tmp_path):
        SyntheticPairs(count=1, size=16).write(tmp_path / "data")
        src = tmp_path / "data" / "high" / "pair000.png"
        assert main(["decompose", "--input", str(src), "--levels", "2", "--out", str(tmp_path / "bands")]) == 0
        names = sorted(p.name for p in (tmp_path / "bands").iterdir())
        assert names == ["A2.png", "D1.png", "D2.png", "H1.png", "H2.png", "V1.png", "V2.png", "mapping.txt"]
        assert load_image(tmp_path / "bands" / "V1.png").shape == (8, 8, 3)

    def test_errors_exit_2(self, tmp_path, capsys):
        assert main(["enhance", "--ckpt", str(tmp_path / "none.bin"), "--input", "x", "--out", "y"]) == 2
        assert "error" in capsys.readouterr().err
        assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"),
                     "--embedder", "pretrained", "--embedder-path", str(tmp_path / "clip")]) == 2
