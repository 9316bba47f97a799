"""The full codec: transforms, entropy model and GOP-level coding."""
from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import bitstream as bs
from . import checkpoint, ops
from .entropy_model import ConditionalEntropyModel, likelihood, likelihood_array, quantize
from .nn import Module
from .tensor import ShapeError, Tensor, no_grad
from .transform_codec import N_SLICES, PRESETS, AnalysisTransform, CodecConfig, SynthesisTransform

LAMBDAS = (128.0, 256.0, 512.0)


@dataclasses.dataclass
class TrainOutputs:
    x_hat: Tensor  # unclamped reconstruction
    y_likelihoods: list  # per frame, list of per-slice likelihood Tensors
    z_likelihoods: list  # per frame likelihood Tensor
    y_bar: Tensor


@dataclasses.dataclass
class EncodedGop:
    payload: bs.GopPayload
    y_hat: np.ndarray
    z_hat: np.ndarray
    y_bar: np.ndarray
    x_hat: np.ndarray
    estimated_bits: float  # -sum log2 P under the floored model likelihoods


def _latent_size(h: int, w: int, factor: int) -> tuple[int, int]:
    if h % factor or w % factor:
        raise ShapeError(f"frame size {(h, w)} not divisible by {factor}")
    return h // factor, w // factor


def _hyper_size(h: int, w: int) -> tuple[int, int]:
    for _ in range(2):
        h, w = -(-h // 2), -(-w // 2)
    return h, w


class VideoCodec(Module):
    def __init__(self, cfg: CodecConfig | str = "tiny", seed: int = 0):
        cfg = PRESETS[cfg] if isinstance(cfg, str) else cfg
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.g_a = AnalysisTransform(rng, cfg)
        self.g_s = SynthesisTransform(rng, cfg)
        self.entropy = ConditionalEntropyModel(rng, cfg)
        self.assign_names()

    def model_hash(self) -> int:
        return checkpoint.state_hash(self.state_dict())

    # -- training

    def forward_train(self, x: np.ndarray, rng: np.random.Generator, use_condition: bool = True) -> TrainOutputs:
        """Noise-quantized rate path, straight-through distortion path."""
        x = Tensor(np.asarray(x, dtype=np.float64))
        y = self.g_a(x)
        t_len, _, h, w = y.shape
        em = self.entropy
        z = em.hyper_encode(y)
        z_noisy, z_ste = quantize(z, "train", rng)
        z_mu, z_sigma = em.z_prior.params(z.shape)
        z_lik = likelihood(z_noisy, z_mu, z_sigma)
        f_mu, f_sigma = em.hyper_decode(z_ste, h, w)

        y_noisy, y_ste = quantize(y, "train", rng)
        noisy = [ops.split_channels(ops.take(y_noisy, 0, t, t + 1), N_SLICES) for t in range(t_len)]
        rounded = [ops.split_channels(ops.take(y_ste, 0, t, t + 1), N_SLICES) for t in range(t_len)]
        y_liks = [[] for _ in range(t_len)]

        def source(t, j, mu, sigma):
            y_liks[t].append(likelihood(noisy[t][j], mu, sigma))
            return rounded[t][j]

        y_bar = em.run_frames(f_mu, f_sigma, source, use_condition)
        x_hat = self.g_s(y_bar, clamp=False)
        z_liks = [ops.take(z_lik, 0, t, t + 1) for t in range(t_len)]
        return TrainOutputs(x_hat, y_liks, z_liks, y_bar)

    # -- GOP coding

    def _z_tables(self, shape: tuple) -> list:
        mu_c, sigma_c = self.entropy.z_prior.channel_params()
        mu = np.broadcast_to(mu_c[None, :, None, None], shape)
        sigma = np.broadcast_to(sigma_c[None, :, None, None], shape)
        return bs.build_cdfs(mu, sigma), mu, sigma

    def encode_gop(self, x: np.ndarray, use_condition: bool = True) -> EncodedGop:
        """``x``: (T, 3, H, W) in [0, 1], H and W multiples of 16."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (T, 3, H, W), got {x.shape}")
        h, w = _latent_size(x.shape[2], x.shape[3], self.cfg.factor)
        em = self.entropy
        s = self.cfg.slice_channels
        with no_grad():
            y = self.g_a(Tensor(x))
            z_hat = ops.round_half_away(em.hyper_encode(y).data)
            tables, z_mu, z_sigma = self._z_tables(z_hat.shape)
            z_bytes = bs.range_encode(z_hat.astype(np.int64).ravel(), tables)
            est = float(-np.log2(likelihood_array(z_hat, z_mu, z_sigma)).sum())
            f_mu, f_sigma = em.hyper_decode(Tensor(z_hat), h, w)
            y_hat = ops.round_half_away(y.data)
            segments = [[b""] * N_SLICES for _ in range(x.shape[0])]

            def source(t, j, mu, sigma):
                nonlocal est
                q = y_hat[t:t + 1, j * s:(j + 1) * s]
                segments[t][j] = bs.range_encode(q.astype(np.int64).ravel(), bs.build_cdfs(mu.data, sigma.data))
                est += float(-np.log2(likelihood_array(q, mu.data, sigma.data)).sum())
                return Tensor(q.copy())

            y_bar = em.run_frames(f_mu, f_sigma, source, use_condition)
            x_hat = self.g_s(y_bar, clamp=True)
        return EncodedGop(bs.GopPayload(z_bytes, segments), y_hat, z_hat, y_bar.data, x_hat.data, est)

    def decode_gop(self, payload: bs.GopPayload, height: int, width: int,
                   use_condition: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Reconstruction (T, 3, height, width) and refined latent from a GOP payload."""
        h, w = _latent_size(height, width, self.cfg.factor)
        t_len = len(payload.frames)
        em = self.entropy
        s = self.cfg.slice_channels
        zh, zw = _hyper_size(h, w)
        with no_grad():
            tables, _, _ = self._z_tables((t_len, self.cfg.hyper_channels, zh, zw))
            z_hat = bs.range_decode(payload.z, tables).astype(np.float64).reshape(t_len, -1, zh, zw)
            f_mu, f_sigma = em.hyper_decode(Tensor(z_hat), h, w)

            def source(t, j, mu, sigma):
                vals = bs.range_decode(payload.frames[t][j], bs.build_cdfs(mu.data, sigma.data))
                return Tensor(vals.astype(np.float64).reshape(1, s, h, w))

            y_bar = em.run_frames(f_mu, f_sigma, source, use_condition)
            x_hat = self.g_s(y_bar, clamp=True)
        return x_hat.data, y_bar.data


# ----------------------------------------------------------------------------
# whole-video coding


def pad_frames(frames: np.ndarray, factor: int = 16) -> np.ndarray:
    """Replicate-pad (N, 3, H, W) so H and W are multiples of ``factor``."""
    _, _, h, w = frames.shape
    ph, pw = (-h) % factor, (-w) % factor
    if not (ph or pw):
        return frames
    return np.pad(frames, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def encode_video(codec: VideoCodec, frames: np.ndarray, gop: int = 8, lambda_index: int = 1,
                 use_condition: bool = True, threads: int = 1) -> tuple[bytes, list[EncodedGop]]:
    """Code (N, 3, H, W) frames in [0, 1] into a container stream."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[1] != 3 or frames.shape[0] < 1:
        raise ShapeError(f"expected (N, 3, H, W) frames, got {frames.shape}")
    if not 1 <= gop <= 255:
        raise ValueError("gop size must be in [1, 255]")
    n, _, height, width = frames.shape
    flags = (0 if use_condition else bs.FLAG_NO_CONDITION) | (bs.FLAG_FULL_PRESET if codec.cfg == PRESETS["full"] else 0)
    header = bs.StreamHeader(width, height, n, gop, lambda_index, codec.model_hash(), flags)
    padded = pad_frames(frames, codec.cfg.factor)
    starts = list(range(0, n, gop))
    encoded = _map(lambda s: codec.encode_gop(padded[s:s + gop], use_condition), starts, threads)
    return bs.pack_stream(header, [e.payload for e in encoded]), encoded


def decode_video(codec: VideoCodec, data: bytes, threads: int = 1) -> tuple[bs.StreamHeader, np.ndarray]:
    """Parse, verify and decode a stream; frames are cropped to the original size."""
    header, gops = bs.unpack_stream(data, expected_hash=codec.model_hash())
    f = codec.cfg.factor
    ph, pw = -(-header.height // f) * f, -(-header.width // f) * f
    use_condition = not header.flags & bs.FLAG_NO_CONDITION
    outs = _map(lambda g: codec.decode_gop(g, ph, pw, use_condition)[0], gops, threads)
    frames = np.concatenate(outs, axis=0)[:, :, :header.height, :header.width]
    return header, frames


def preset_from_flags(flags: int) -> str:
    return "full" if flags & bs.FLAG_FULL_PRESET else "tiny"
