"""The ten release criteria at their stated tolerances and time budgets.

Criterion 9 trains the tiny preset for 5000 steps and takes hours on one core.
"""
import time

import numpy as np
import pytest

from gtem import bitstream as bs
from gtem import ops
from gtem.cli import build_parser, main
from gtem.entropy_model import ConditionNetwork, MotionEstimator, likelihood, warp
from gtem.geom_scan import CMM, GTMB, ScanOrder, apply_transform, inverse_transform, scan_sequence
from gtem.geom_scan import selective_scan, selective_scan_chunked
from gtem.locality import HCB, LRFFN, DiffConvKind, diff_conv
from gtem.model import LAMBDAS, VideoCodec
from gtem.nn import Conv2d, DepthwiseConv2d, LayerNorm, Linear
from gtem.oracles import discretized_gaussian, gradcheck, module_gradcheck, naive_scan, scan_order
from gtem.tensor import Tensor
from gtem.trainer import (FeatureExtractor, LossWeights, evaluate, make_synthetic_dataset, perceptual_style_loss,
                          random_specs, rd_loss, smooth, train_stage1)
from gtem.video_io import write_video

TRAIN_STEPS = 5000
TRAIN_LAMBDA = 256.0


def _rel(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


class _Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def test_criterion_01_transform_reversibility(acceptance):
    rng = np.random.default_rng(1)
    bad = []
    with _Timer() as tm:
        for _ in range(200):
            shape = tuple(int(v) for v in rng.integers(1, 7, size=4))
            x = Tensor(rng.standard_normal(shape))
            for order in ScanOrder:
                if not np.array_equal(inverse_transform(apply_transform(x, order), order).data, x.data):
                    bad.append((shape, order.name))
    ok = not bad and tm.seconds < 10
    acceptance(1, "transform reversibility", ok, f"200 shapes x 4 orders, {len(bad)} mismatches, {tm.seconds:.2f}s")


def test_criterion_02_scan_order_oracle(acceptance):
    with _Timer() as tm:
        fwd = {o: scan_sequence(3, 2, 2, o) for o in ScanOrder}
        ok = (fwd[ScanOrder.FST] == scan_order(3, 2, 2, ScanOrder.FST)
              and fwd[ScanOrder.FTS] == scan_order(3, 2, 2, ScanOrder.FTS)
              and fwd[ScanOrder.BST] == fwd[ScanOrder.FST][::-1]
              and fwd[ScanOrder.BTS] == fwd[ScanOrder.FTS][::-1]
              and fwd[ScanOrder.FST] == [(t, r, c) for t in range(3) for r in range(2) for c in range(2)]
              and fwd[ScanOrder.FTS] == [(t, r, c) for r in range(2) for c in range(2) for t in range(3)])
    ok = ok and tm.seconds < 1
    acceptance(2, "scan-order oracle", ok, f"(T,H,W)=(3,2,2) all four orders, {tm.seconds:.3f}s")


def test_criterion_03_selective_scan_equivalence(acceptance):
    rng = np.random.default_rng(3)
    worst = 0.0
    with _Timer() as tm:
        for _ in range(100):
            L, E, N = int(rng.integers(1, 257)), int(rng.integers(1, 5)), int(rng.integers(1, 9))
            u = rng.standard_normal((L, E))
            delta = rng.uniform(1e-3, 1.0, (L, E))
            A = -rng.uniform(0.05, 3.0, (E, N))
            B = rng.standard_normal((L, N))
            C = rng.standard_normal((L, N))
            D = rng.standard_normal(E)
            ref = naive_scan(u, delta, A, B, C, D)
            blocked = selective_scan_chunked(u, delta, A, B, C, D, block=int(rng.integers(1, 65)))
            sequential = selective_scan(*(Tensor(a) for a in (u, delta, A, B, C, D))).data
            worst = max(worst, _rel(blocked, ref), _rel(sequential, ref))
    ok = worst < 1e-10 and tm.seconds < 30
    acceptance(3, "selective-scan equivalence", ok, f"100 instances L<=256, max rel err {worst:.2e}, {tm.seconds:.1f}s")


def test_criterion_04_difference_convolution_algebra(acceptance):
    rng = np.random.default_rng(4)
    worst_const, worst_merge = 0.0, 0.0
    with _Timer() as tm:
        for kind in (DiffConvKind.CENTRAL, DiffConvKind.VERTICAL, DiffConvKind.HORIZONTAL, DiffConvKind.ANGULAR):
            for _ in range(25):
                c = int(rng.integers(1, 5))
                x = np.full((2, c, 7, 6), rng.uniform(-50, 50))
                out = diff_conv(Tensor(x), Tensor(rng.standard_normal((c, 1, 3, 3))), kind).data
                # the zero-padded border is not a constant neighbourhood
                worst_const = max(worst_const, float(np.max(np.abs(out[..., 1:-1, 1:-1]))))
        for _ in range(100):
            c = int(rng.integers(1, 6))
            hcb = HCB(rng, c)
            x = Tensor(rng.standard_normal((int(rng.integers(1, 3)), c, int(rng.integers(3, 9)), int(rng.integers(3, 9)))))
            merged = ops.conv2d(x, Tensor(hcb.merged_kernel()), 1, 1, depthwise=True).data
            worst_merge = max(worst_merge, _rel(merged, hcb.branch_sum(x).data))
    ok = worst_const < 1e-12 and worst_merge < 1e-10 and tm.seconds < 10
    acceptance(4, "difference-convolution algebra", ok,
               f"constant max |out| {worst_const:.1e}, merge max rel err {worst_merge:.1e} (100 trials), {tm.seconds:.1f}s")


def _gradient_cases(rng):
    lin = Linear(rng, 5, 4)
    conv = Conv2d(rng, 3, 4, 3)
    conv_s2 = Conv2d(rng, 3, 4, 3, stride=2)
    dw = DepthwiseConv2d(rng, 3)
    ln = LayerNorm(4)
    ln.gamma.data = rng.uniform(0.5, 1.5, 4)
    ln.beta.data = rng.normal(0, 0.5, 4)
    gtmb = GTMB(rng, 4, ScanOrder.BTS, state_dim=3)
    cmm = CMM(rng, 4, state_dim=3)
    ffn = LRFFN(rng, 4)
    cgn = ConditionNetwork(rng, 4, 4, 2, pairs=1)
    motion = MotionEstimator(rng, 4, 4)
    motion.tail.weight.data = rng.normal(0, 0.2, motion.tail.weight.shape)
    motion.alpha.data = rng.uniform(0.5, 1.5, 2)
    motion.beta.data = rng.normal(0, 0.3, 2)
    fe = FeatureExtractor()
    x_img = rng.uniform(0, 1, (2, 3, 8, 8))
    vid = lambda: rng.standard_normal((2, 4, 3, 3))  # noqa: E731
    mu, sigma = rng.normal(0, 1, 24), rng.uniform(0.3, 3, 24)
    x_loss = rng.uniform(0, 1, (2, 3, 4, 4))

    def rd(x_hat, py, pz):
        ys = [[ops.take(py, 0, t, t + 1)] for t in range(2)]
        zs = [ops.take(pz, 0, t, t + 1) for t in range(2)]
        return rd_loss(x_loss, x_hat, ys, zs, TRAIN_LAMBDA).total

    def aligned(a, b):
        return warp(b, motion(a, b))

    modules = [
        ("linear", lin, lambda x: lin(x), [rng.standard_normal((6, 5))]),
        ("conv", conv, lambda x: conv(x), [rng.standard_normal((2, 3, 5, 6))]),
        ("conv stride 2", conv_s2, lambda x: conv_s2(x), [rng.standard_normal((1, 3, 7, 6))]),
        ("depthwise conv", dw, lambda x: dw(x), [rng.standard_normal((2, 3, 5, 5))]),
        ("layernorm", ln, lambda x: ln(x, axis=1), [rng.standard_normal((2, 4, 3, 3))]),
        ("GTMB", gtmb, lambda x: gtmb(x), [vid()]),
        ("CMM", cmm, lambda x: cmm(x), [vid()]),
        ("LRFFN", ffn, lambda x: ffn(x), [rng.standard_normal((1, 4, 5, 5))]),
        ("CGN", cgn, lambda a, b, c: cgn(a, b, c), [rng.standard_normal((1, 4, 3, 5)) for _ in range(3)]),
        ("motion alignment", motion, aligned, [rng.standard_normal((1, 4, 4, 4)) for _ in range(2)]),
    ]
    functions = [(f"activation {name}", lambda x, fn=fn: fn(x), [rng.normal(0, 2, (4, 5))])
                 for name, fn in (("gelu", ops.gelu), ("silu", ops.silu), ("softplus", ops.softplus),
                                  ("tanh", ops.tanh), ("sigmoid", ops.sigmoid), ("exp", ops.exp))]
    flow = rng.uniform(0.1, 0.9, (1, 2, 5, 5)) + rng.integers(-2, 3, (1, 2, 5, 5))
    functions += [
        ("warp", warp, [rng.standard_normal((1, 3, 5, 5)), flow]),
        ("likelihood", lambda y, m, s: likelihood(y, m, s), [mu + sigma * rng.uniform(-3, 3, 24), mu, sigma]),
        ("rate-distortion loss", rd,
         [rng.uniform(0, 1, x_loss.shape), rng.uniform(0.1, 0.9, (2, 6)), rng.uniform(0.1, 0.9, (2, 3))]),
        ("perceptual and style loss",
         lambda xh: perceptual_style_loss(x_img, xh, fe, LossWeights()).total, [x_img + rng.normal(0, 0.1, x_img.shape)]),
    ]
    return modules, functions


def test_criterion_05_gradient_verification(acceptance):
    rng = np.random.default_rng(5)
    errors = {}
    with _Timer() as tm:
        modules, functions = _gradient_cases(rng)
        for name, mod, fn, ins in modules:
            errors[name] = module_gradcheck(mod, fn, ins, probes=50)
        for name, fn, ins in functions:
            # the style term is an L1 norm; a small step keeps probes off its kinks
            eps = 1e-6 if name.startswith("perceptual") else 1e-5
            errors[name] = gradcheck(fn, ins, probes=50, eps=eps)
    worst = max(errors, key=errors.get)
    failing = [k for k, v in errors.items() if not v < 1e-4]
    ok = not failing and tm.seconds < 300
    acceptance(5, "gradient verification", ok,
               f"{len(errors)} layers/losses x 50 probes, worst {worst} {errors[worst]:.1e}, "
               f"failing {failing or 'none'}, {tm.seconds:.1f}s")


@pytest.fixture(scope="session")
def trained():
    """Tiny preset trained on synthetic clips, plus its initialization, evaluated on held-out clips."""
    t0 = time.perf_counter()
    train_clips = make_synthetic_dataset(random_specs(32, seed=0), seed=0)
    held_out = make_synthetic_dataset(random_specs(6, seed=99), seed=99)
    init = VideoCodec("tiny", seed=0)
    init_report = evaluate(init, held_out)
    model = VideoCodec("tiny", seed=0)
    result = train_stage1(model, train_clips, TRAIN_LAMBDA, steps=TRAIN_STEPS, seed=0)
    return {
        "init": init,
        "model": model,
        "held_out": held_out,
        "result": result,
        "init_report": init_report,
        "report": evaluate(model, held_out),
        "report_no_condition": evaluate(model, held_out, use_condition=False),
        "seconds": time.perf_counter() - t0,
    }


@pytest.mark.slow
def test_criterion_06_entropy_coding(acceptance, trained):
    rng = np.random.default_rng(6)
    with _Timer() as tm:
        n = 100_000
        mu = rng.normal(0, 8, n)
        sigma = np.exp(rng.uniform(np.log(0.04), np.log(60), n))
        vals = np.round(mu + sigma * rng.standard_normal(n)).astype(np.int64)
        vals[::500] += rng.integers(-3000, 3000, vals[::500].size)
        tables = bs.build_cdfs(mu, sigma)
        data = bs.range_encode(vals, tables)
        round_trip = np.array_equal(bs.range_decode(data, tables), vals)

        gaps = []
        for model in (trained["init"], trained["model"]):
            for clip in trained["held_out"]:
                enc = model.encode_gop(clip.frames)
                actual = 8 * enc.payload.payload_bytes()
                gaps.append((actual - enc.estimated_bits) / (0.01 * enc.estimated_bits + 256))
        rate_ok = max(np.abs(gaps)) <= 1.0

        p = likelihood(Tensor(np.zeros(1)), Tensor(np.zeros(1)), Tensor(np.ones(1))).data[0]
        oracle = discretized_gaussian(0.0, 0.0, 1.0)
        lik_ok = abs(p - 0.382925) <= 1e-6 and abs(oracle - 0.382925) <= 1e-6 and abs(p - oracle) <= 1e-12
    ok = round_trip and rate_ok and lik_ok and tm.seconds < 60
    acceptance(6, "entropy-coding correctness", ok,
               f"1e5 round-trip {'exact' if round_trip else 'MISMATCH'} ({len(data)} bytes); "
               f"rate gap/allowance max {max(np.abs(gaps)):.2f} over {len(gaps)} GOPs; "
               f"P(0;0,1)={p:.7f} oracle {oracle:.7f}; {tm.seconds:.1f}s")


def test_criterion_07_decoder_sufficiency(acceptance):
    rng = np.random.default_rng(7)
    models = [VideoCodec("tiny", seed=s) for s in range(2)]
    mismatches = 0
    with _Timer() as tm:
        for i in range(20):
            t = int(rng.integers(1, 9))
            h, w = (16 * int(v) for v in rng.integers(1, 4, size=2))
            clip = make_synthetic_dataset(random_specs(1, seed=1000 + i, length=t, size=64), seed=1000 + i)[0]
            x = clip.frames[:, :, :h, :w]
            use_condition = bool(i % 4)
            model = models[i % 2]
            enc = model.encode_gop(x, use_condition)
            x_dec, y_dec = model.decode_gop(enc.payload, h, w, use_condition)
            if not (np.array_equal(y_dec, enc.y_bar) and np.array_equal(x_dec, enc.x_hat)):
                mismatches += 1
    ok = mismatches == 0 and tm.seconds < 120
    acceptance(7, "decoder sufficiency", ok, f"20 random GOPs, {mismatches} mismatches, {tm.seconds:.1f}s")


def test_criterion_08_motion_prior(acceptance):
    rng = np.random.default_rng(8)
    failures = 0
    checked = 0
    with _Timer() as tm:
        motion = MotionEstimator(rng, 40, 8)
        for _ in range(20):
            vx, vy = (int(v) for v in rng.integers(-3, 4, size=2))
            h, w = (int(v) for v in rng.integers(6, 13, size=2))
            y0 = rng.normal(0, 3, (1, 40, h, w))
            seq = [np.roll(y0, (t * vy, t * vx), axis=(-2, -1)) for t in range(4)]
            for t in range(2, 4):
                # backward flow observed between t-2 and t-1: y_{t-1}(p) = y_{t-2}(p - v)
                raw = np.zeros((1, 2, h, w))
                raw[:, 0], raw[:, 1] = -vx, -vy
                flow = motion.rectify(Tensor(raw))
                pred = warp(Tensor(seq[t - 1]), flow).data
                rows = slice(max(vy, 0), h + min(vy, 0))
                cols = slice(max(vx, 0), w + min(vx, 0))
                checked += 1
                if not np.array_equal(pred[..., rows, cols], seq[t][..., rows, cols]):
                    failures += 1
    ok = failures == 0 and tm.seconds < 30
    acceptance(8, "motion-prior property", ok, f"{checked} warps, {failures} inexact, {tm.seconds:.2f}s")


@pytest.mark.slow
def test_criterion_09_training_signal(acceptance, trained):
    rd = smooth(trained["result"].series("rd"), 50)
    init, final, ablated = trained["init_report"], trained["report"], trained["report_no_condition"]
    a = rd[-1] < rd[0]
    b = final.bpp < init.bpp and final.psnr >= init.psnr
    c = final.bpp < ablated.bpp
    ok = a and b and c and trained["seconds"] <= 4 * 3600
    acceptance(9, "end-to-end training signal", ok,
               f"(a) smoothed rd {rd[0]:.3f} -> {rd[-1]:.3f} {'ok' if a else 'FAIL'}; "
               f"(b) bpp {init.bpp:.4f} -> {final.bpp:.4f}, psnr {init.psnr:.2f} -> {final.psnr:.2f} dB "
               f"{'ok' if b else 'FAIL'}; (c) conditioned {final.bpp:.4f} vs zeroed {ablated.bpp:.4f} bpp "
               f"{'ok' if c else 'FAIL'}; {trained['seconds'] / 3600:.2f}h")


def test_criterion_10_protocol_conformance(acceptance, tmp_path):
    with _Timer() as tm:
        base = np.random.default_rng(10).uniform(0, 1, (3, 16, 16))
        src, out = tmp_path / "in.rgb", tmp_path / "out.gtem"
        write_video(src, np.stack([np.roll(base, t, axis=-1) for t in range(96)]))
        code = main(["encode", str(src), str(out), "--gop", "8"])
        header, gops = bs.unpack_stream(out.read_bytes())
        n_gops = len(gops)
        train_args = build_parser().parse_args(["train", "ckpt"])
        w = LossWeights()
    ok = (code == 0 and n_gops == 12 and header.gop_size == 8
          and set(LAMBDAS) == {128.0, 256.0, 512.0}
          and (w.lam_per, w.lam_sty) == (1.0, 0.15)
          and (train_args.lambda_per, train_args.lambda_sty) == (1.0, 0.15)
          and tm.seconds < 60)
    acceptance(10, "protocol conformance", ok,
               f"96 frames --gop 8 -> {n_gops} GOPs; lambdas {sorted(LAMBDAS)}; "
               f"stage-2 weights ({w.lam_per}, {w.lam_sty}); {tm.seconds:.1f}s")
