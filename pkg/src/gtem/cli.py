"""``gtem`` command line: encode, decode, train, metrics, selftest.

Exit codes: 0 ok, 1 usage error, 2 data error (unreadable input, corrupt or
mismatched bitstream, verification failure).
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import bitstream as bs
from . import checkpoint
from .metrics import video_ms_ssim, video_psnr
from .model import LAMBDAS, VideoCodec, decode_video, encode_video, preset_from_flags
from .tensor import ShapeError
from .transform_codec import PRESETS
from .video_io import VideoFormatError, read_video, write_video

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def load_codec(preset: str, ckpt: str | None, seed: int) -> VideoCodec:
    codec = VideoCodec(preset, seed=seed)
    if ckpt:
        codec.load_state_dict(checkpoint.load(ckpt))
    return codec


def _report(lines: list[str]) -> None:
    for line in lines:
        print(line)


def cmd_encode(args) -> int:
    frames = read_video(args.input)
    codec = load_codec(args.preset, args.checkpoint, args.seed)
    t0 = time.perf_counter()
    data, encoded = encode_video(codec, frames, gop=args.gop, lambda_index=args.lambda_index,
                                 use_condition=not args.no_condition, threads=args.threads)
    t_enc = time.perf_counter() - t0
    Path(args.output).write_bytes(data)
    n, _, h, w = frames.shape
    recon = np.concatenate([e.x_hat for e in encoded])[:, :, :h, :w]
    lines = [
        f"frames={n} size={w}x{h} gops={len(encoded)} bytes={len(data)}",
        f"bpp={8 * len(data) / (n * h * w):.6f}",
        f"psnr={np.mean(video_psnr(frames, recon)):.4f}",
        f"encode_seconds={t_enc:.3f}",
    ]
    if args.verify:
        t1 = time.perf_counter()
        header, gops = bs.unpack_stream(data, expected_hash=codec.model_hash())
        pad_h, pad_w = encoded[0].x_hat.shape[-2:]
        for i, (g, e) in enumerate(zip(gops, encoded)):
            x_dec, y_dec = codec.decode_gop(g, pad_h, pad_w, not args.no_condition)
            if not (np.array_equal(y_dec, e.y_bar) and np.array_equal(x_dec, e.x_hat)):
                print(f"verification failed in GOP {i}", file=sys.stderr)
                return EXIT_DATA
        lines.append(f"verify=ok decode_seconds={time.perf_counter() - t1:.3f}")
    _report(lines)
    return EXIT_OK


def cmd_decode(args) -> int:
    data = Path(args.input).read_bytes()
    header, _ = bs.read_header(data)
    preset = args.preset or preset_from_flags(header.flags)
    codec = load_codec(preset, args.checkpoint, args.seed)
    t0 = time.perf_counter()
    header, frames = decode_video(codec, data, threads=args.threads)
    write_video(args.output, frames)
    _report([
        f"frames={frames.shape[0]} size={header.width}x{header.height}",
        f"decode_seconds={time.perf_counter() - t0:.3f}",
    ])
    return EXIT_OK


def cmd_metrics(args) -> int:
    ref = read_video(args.reference)
    rec = read_video(args.reconstruction)
    if ref.shape != rec.shape:
        raise ShapeError(f"dimension mismatch: {ref.shape} vs {rec.shape}")
    psnrs = video_psnr(ref, rec)
    msssim = video_ms_ssim(ref, rec)
    n, _, h, w = ref.shape
    lines = [f"frame={i} psnr={p:.4f} ms_ssim={m:.6f}" for i, (p, m) in enumerate(zip(psnrs, msssim))]
    lines.append(f"mean psnr={np.mean(psnrs):.4f} ms_ssim={np.mean(msssim):.6f}")
    if args.bitstream:
        size = Path(args.bitstream).stat().st_size
        lines.append(f"bytes={size} bpp={8 * size / (n * h * w):.6f}")
    _report(lines)
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import (FeatureExtractor, LossWeights, format_record, make_synthetic_dataset, random_specs,
                          train_stage1, train_stage2)

    codec = load_codec(args.preset, args.checkpoint, args.seed)
    clips = make_synthetic_dataset(random_specs(args.clips, seed=args.seed, size=args.size), seed=args.seed)
    lam = LAMBDAS[args.lambda_index]

    def progress(rec):
        if rec["step"] % args.log_every == 0:
            print(format_record(rec), flush=True)

    if args.steps:
        train_stage1(codec, clips, lam, args.steps, seed=args.seed, log_path=args.log, progress=progress)
    if args.stage2_steps:
        w = LossWeights(lam, args.lambda_per, args.lambda_sty)
        log2 = f"{args.log}.stage2" if args.log else None
        train_stage2(codec, clips, w, args.stage2_steps, seed=args.seed + 1, fe=FeatureExtractor(),
                     log_path=log2, progress=progress)
    checkpoint.save(args.output, codec.state_dict())
    print(f"checkpoint={args.output} model_hash={codec.model_hash():016x}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(seed=args.seed, echo=print)
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_DATA


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gtem", description="Learned video codec with state-space transforms.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, preset_default="tiny"):
        sp.add_argument("--preset", choices=sorted(PRESETS), default=preset_default)
        sp.add_argument("--checkpoint", help="parameter file; default is the seeded initialization")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1, help="GOPs coded in parallel")

    e = sub.add_parser("encode", help="video -> bitstream")
    e.add_argument("input")
    e.add_argument("output")
    common(e)
    e.add_argument("--gop", type=int, default=8)
    e.add_argument("--lambda-index", type=int, choices=range(len(LAMBDAS)), default=1)
    e.add_argument("--verify", action="store_true", help="decode in-process and compare")
    e.add_argument("--no-condition", action="store_true", help="zero the temporal condition (ablation)")
    e.set_defaults(fn=cmd_encode)

    d = sub.add_parser("decode", help="bitstream -> video")
    d.add_argument("input")
    d.add_argument("output")
    common(d, preset_default=None)
    d.set_defaults(fn=cmd_decode)

    t = sub.add_parser("train", help="train on synthetic clips")
    t.add_argument("output", help="checkpoint to write")
    common(t)
    t.add_argument("--lambda-index", type=int, choices=range(len(LAMBDAS)), default=1)
    t.add_argument("--steps", type=int, default=5000)
    t.add_argument("--stage2-steps", type=int, default=0)
    t.add_argument("--lambda-per", type=float, default=1.0)
    t.add_argument("--lambda-sty", type=float, default=0.15)
    t.add_argument("--clips", type=int, default=32)
    t.add_argument("--size", type=int, default=64)
    t.add_argument("--log", help="training log file")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(fn=cmd_train)

    m = sub.add_parser("metrics", help="PSNR / MS-SSIM between two videos")
    m.add_argument("reference")
    m.add_argument("reconstruction")
    m.add_argument("--bitstream", help="also report bpp of this file")
    m.set_defaults(fn=cmd_metrics)

    s = sub.add_parser("selftest", help="run the invariant suite")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"gtem: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as err:  # --help
        return EXIT_OK if not err.code else EXIT_USAGE
    try:
        return args.fn(args)
    except (bs.BitstreamError, VideoFormatError, checkpoint.CheckpointError, ShapeError,
            KeyError, OSError) as err:
        print(f"gtem: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
