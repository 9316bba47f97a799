import numpy as np
import pytest

from gtem import ops
from gtem import trainer as tr
from gtem.model import VideoCodec
from gtem.oracles import gradcheck
from gtem.tensor import Parameter, Tensor
from gtem.transform_codec import CodecConfig

SMALL = CodecConfig(base_channels=4, latent_channels=10, hyper_channels=4, slice_hidden=4,
                    motion_channels=4, cgn_channels=4, cgn_pairs=1, state_dim=2)


class TestLosses:
    def test_rd_hand_example(self):
        x = np.zeros((2, 3, 4, 4))
        x_hat = Tensor(x + 0.1)
        half = lambda *s: Tensor(np.full(s, 0.5))  # noqa: E731
        y_liks = [[half(1, 2, 1, 1)] * 5, [half(1, 2, 1, 1)] * 5]  # 10 bits per frame
        z_liks = [half(1, 4, 1, 1), half(1, 4, 1, 1)]  # 4 bits per frame
        terms = tr.rd_loss(x, x_hat, y_liks, z_liks, lam=256.0)
        assert terms.rate_y == pytest.approx(20 / 16)
        assert terms.rate_z == pytest.approx(8 / 16)
        assert terms.distortion == pytest.approx(2 * 256 * 0.01)
        assert terms.total.item() == pytest.approx(20 / 16 + 8 / 16 + 5.12)

    def test_rd_validation(self):
        with pytest.raises(ValueError):
            tr.rd_loss(np.zeros((1, 3, 4, 4)), Tensor(np.zeros((1, 3, 4, 5))), [[]], [Tensor(np.ones(1))], 1.0)
        with pytest.raises(ValueError):
            tr.rd_loss(np.zeros((2, 3, 4, 4)), Tensor(np.zeros((2, 3, 4, 4))), [[]], [Tensor(np.ones(1))], 1.0)

    def test_rd_gradient(self, rng):
        x = rng.uniform(0, 1, (2, 3, 4, 4))

        def f(x_hat, py, pz):
            ys = [[ops.take(py, 0, t, t + 1)] for t in range(2)]
            zs = [ops.take(pz, 0, t, t + 1) for t in range(2)]
            return tr.rd_loss(x, x_hat, ys, zs, 64.0).total

        ins = [rng.uniform(0, 1, x.shape), rng.uniform(0.1, 0.9, (2, 5)), rng.uniform(0.1, 0.9, (2, 3))]
        assert gradcheck(f, ins, probes=50) < 1e-4

    def test_rd_matches_recomputation(self, rng):
        model = VideoCodec(SMALL, seed=0)
        x = rng.uniform(0, 1, (2, 3, 16, 16))
        out = model.forward_train(x, np.random.default_rng(1))
        terms = tr.rd_loss(x, out.x_hat, out.y_likelihoods, out.z_likelihoods, 256.0)
        bits_y = -sum(np.log2(p.data).sum() for frame in out.y_likelihoods for p in frame)
        bits_z = -sum(np.log2(p.data).sum() for p in out.z_likelihoods)
        mse = [np.mean((out.x_hat.data[t] - x[t]) ** 2) for t in range(2)]
        expect = (bits_y + bits_z) / 256 + 256.0 * sum(mse)
        assert abs(terms.total.item() - expect) <= 1e-10 * expect
        assert min(terms.rate_y, terms.rate_z, terms.distortion) >= 0

    def test_rd_uniform_half_is_one_bit(self):
        x = np.zeros((1, 3, 4, 4))
        terms = tr.rd_loss(x, Tensor(x), [[Tensor(np.full((1, 16), 0.5))]], [Tensor(np.ones(1))], 256.0)
        assert terms.rate_y == pytest.approx(1.0) and terms.distortion == 0

    def test_gram_of_constant(self):
        g = tr.gram(Tensor(np.ones((1, 3, 4, 5)))).data
        assert np.allclose(g, np.ones((1, 3, 3)), rtol=0, atol=1e-15)

    def test_gram_symmetric(self, rng):
        g = tr.gram(Tensor(rng.standard_normal((2, 4, 3, 3)))).data
        assert np.allclose(g, g.transpose(0, 2, 1))

    def test_perceptual_zero_on_identity(self, rng):
        x = rng.uniform(0, 1, (2, 3, 8, 8))
        terms = tr.perceptual_style_loss(x, Tensor(x), tr.FeatureExtractor(), tr.LossWeights())
        assert terms.perceptual == 0 and terms.style == 0

    def test_perceptual_style_gradient(self, rng):
        x = rng.uniform(0, 1, (1, 3, 8, 8))
        fe = tr.FeatureExtractor()
        w = tr.LossWeights(lam_per=1.0, lam_sty=0.15)
        f = lambda xh: tr.perceptual_style_loss(x, xh, fe, w).total  # noqa: E731
        # small step: the style term is an L1 norm with kinks at equal Gram entries
        assert gradcheck(f, [x + rng.normal(0, 0.1, x.shape)], probes=50, eps=1e-6) < 1e-4

    def test_feature_extractor_frozen_and_seeded(self):
        fe = tr.FeatureExtractor()
        assert all(not p.trainable for p in fe.parameters())
        a = [p.data for p in tr.FeatureExtractor().parameters()]
        assert all(np.array_equal(p.data, q) for p, q in zip(fe.parameters(), a))
        feats = fe(Tensor(np.zeros((1, 3, 16, 16))))
        assert [f.shape for f in feats] == [(1, 8, 16, 16), (1, 16, 8, 8), (1, 32, 4, 4)]

    def test_stage2_with_zero_weights_equals_stage1(self, rng):
        model = VideoCodec(SMALL, seed=0)
        x = rng.uniform(0, 1, (2, 3, 16, 16))
        out = model.forward_train(x, np.random.default_rng(1))
        a = tr.total_loss(out, x, tr.STAGE1_WEIGHTS)
        b = tr.total_loss(out, x, tr.LossWeights(256.0, 0.0, 0.0), tr.FeatureExtractor())
        assert a.total.item() == b.total.item()

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            tr.LossWeights(lam_sty=-1)

    def test_stage2_defaults(self):
        w = tr.LossWeights()
        assert (w.lam_per, w.lam_sty) == (1.0, 0.15)


class TestData:
    def test_constant_velocity(self):
        specs = tr.random_specs(9, seed=4, length=5, size=32)
        for clip in tr.make_synthetic_dataset(specs, seed=4):
            dx, dy = clip.velocity
            f = clip.frames
            assert f.shape == (5, 3, 32, 32)
            assert f.min() >= 0 and f.max() <= 1
            for t in range(1, 5):
                assert np.array_equal(f[t], np.roll(f[t - 1], (dy, dx), axis=(-2, -1)))

    def test_static_clip(self):
        clip = tr.render_clip(tr.SyntheticClipSpec("noise", (0, 0), length=4, height=16, width=16),
                              np.random.default_rng(0))
        assert all(np.array_equal(f, clip.frames[0]) for f in clip.frames)

    def test_dataset_deterministic(self):
        specs = tr.random_specs(3, seed=1)
        a = tr.make_synthetic_dataset(specs, seed=2)
        b = tr.make_synthetic_dataset(specs, seed=2)
        assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a, b))
        assert {s.pattern for s in specs} == set(tr.PATTERNS)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            tr.SyntheticClipSpec("stripes", (0, 0))
        with pytest.raises(ValueError):
            tr.SyntheticClipSpec("noise", (0, 0), length=0)


class TestOptimization:
    def test_adam_minimizes_quadratic(self):
        p = Parameter(np.array([3.0, -2.0]))
        opt = tr.Adam([p], lr=0.1)
        for _ in range(300):
            p.grad = 2 * p.data
            opt.step()
        assert np.max(np.abs(p.data)) < 0.05

    def test_clip_grad_norm(self):
        p, q = Parameter(np.zeros(1)), Parameter(np.zeros(1))
        p.grad, q.grad = np.array([3.0]), np.array([4.0])
        assert tr.clip_grad_norm([p, q], 1.0) == pytest.approx(5.0)
        assert np.hypot(p.grad[0], q.grad[0]) == pytest.approx(1.0)
        p.grad = np.array([np.inf])
        with pytest.raises(tr.TrainingDiverged):
            tr.clip_grad_norm([p], 1.0)

    def test_stage2_schedule(self):
        assert [tr.stage2_lr_factor(s, 100) for s in (0, 89, 90, 95, 96, 99)] == [1, 1, 0.5, 0.5, 0.25, 0.25]

    def test_smooth(self):
        assert np.allclose(tr.smooth(np.arange(100.0), 50), np.arange(51) + 24.5)
        with pytest.raises(ValueError):
            tr.smooth([1.0], 50)


@pytest.fixture(scope="module")
def clips():
    return tr.make_synthetic_dataset(tr.random_specs(2, seed=0, length=3, size=16), seed=0)


class TestTrainLoop:
    def test_zero_steps_keeps_init(self, clips):
        model = VideoCodec(SMALL, seed=0)
        before = model.model_hash()
        res = tr.train_stage1(model, clips, steps=0, gop=2)
        assert res.history == [] and model.model_hash() == before

    def test_deterministic(self, clips, tmp_path):
        hashes, hist = [], []
        for i in range(2):
            model = VideoCodec(SMALL, seed=0)
            res = tr.train(model, clips, tr.STAGE1_WEIGHTS, steps=2, seed=7, gop=2, log_path=tmp_path / f"{i}.log")
            hashes.append(model.model_hash())
            hist.append(res.series())
        assert hashes[0] == hashes[1] and np.array_equal(*hist)
        assert (tmp_path / "0.log").read_text().count("step=") == 2
        assert hashes[0] != VideoCodec(SMALL, seed=0).model_hash()

    def test_stage2_runs(self, clips):
        model = VideoCodec(SMALL, seed=0)
        res = tr.train_stage2(model, clips, steps=1, gop=2)
        rec = res.history[0]
        assert rec["perceptual"] > 0 and rec["style"] > 0

    def test_short_clips_rejected(self, clips):
        with pytest.raises(ValueError):
            tr.train(VideoCodec(SMALL), clips, tr.STAGE1_WEIGHTS, steps=1, gop=5)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self, clips):
        model = VideoCodec(SMALL, seed=0)
        for p in model.g_a.parameters():
            p.data = p.data * np.inf
        with pytest.raises(tr.TrainingDiverged):
            tr.train(model, clips, tr.STAGE1_WEIGHTS, steps=1, gop=2)

    def test_evaluate(self, clips):
        rep = tr.evaluate(VideoCodec(SMALL, seed=0), clips)
        assert rep.bpp > 0 and 0 < rep.psnr < 99
