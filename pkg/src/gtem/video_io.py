"""YUV4MPEG2 (4:2:0) and raw RGB24 video files as (N, 3, H, W) unit-interval arrays."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class VideoFormatError(ValueError):
    pass


# BT.601 full-range
_RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCBCR_TO_RGB = np.array([
    [1.0, 0.0, 1.402],
    [1.0, -0.344136, -0.714136],
    [1.0, 1.772, 0.0],
])


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """(..., 3, H, W) RGB in [0, 1] -> YCbCr in [0, 255], chroma centred on 128."""
    out = np.einsum("ij,...jhw->...ihw", _RGB_TO_YCBCR, rgb) * 255.0
    out[..., 1:, :, :] += 128.0
    return out


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    ycc = np.array(ycc, dtype=np.float64)
    ycc[..., 1:, :, :] -= 128.0
    return np.clip(np.einsum("ij,...jhw->...ihw", _YCBCR_TO_RGB, ycc) / 255.0, 0.0, 1.0)


def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(a + 0.5), 0, 255).astype(np.uint8)


# ----------------------------------------------------------------------------
# y4m


def _parse_y4m_header(line: bytes) -> dict:
    tokens = line.decode("ascii", errors="replace").split()
    if not tokens or tokens[0] != "YUV4MPEG2":
        raise VideoFormatError("not a YUV4MPEG2 stream")
    info = {"colorspace": "420", "fps": (25, 1)}
    for tok in tokens[1:]:
        key, val = tok[0], tok[1:]
        if key == "W":
            info["width"] = int(val)
        elif key == "H":
            info["height"] = int(val)
        elif key == "C":
            info["colorspace"] = val
        elif key == "F":
            num, den = val.split(":")
            info["fps"] = (int(num), int(den))
    if "width" not in info or "height" not in info:
        raise VideoFormatError("y4m header lacks W or H")
    if not info["colorspace"].startswith("420"):
        raise VideoFormatError(f"unsupported chroma format C{info['colorspace']} (4:2:0 only)")
    return info


def read_y4m(path: str | Path) -> tuple[np.ndarray, dict]:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise VideoFormatError("truncated y4m header")
    info = _parse_y4m_header(data[:nl])
    w, h = info["width"], info["height"]
    cw, ch = (w + 1) // 2, (h + 1) // 2
    frame_bytes = w * h + 2 * cw * ch
    pos = nl + 1
    frames = []
    while pos < len(data):
        end = data.find(b"\n", pos)
        if end < 0 or not data.startswith(b"FRAME", pos):
            raise VideoFormatError(f"missing FRAME marker at byte {pos}")
        pos = end + 1
        if pos + frame_bytes > len(data):
            raise VideoFormatError("truncated y4m frame")
        raw = np.frombuffer(data, dtype=np.uint8, count=frame_bytes, offset=pos).astype(np.float64)
        pos += frame_bytes
        y = raw[: w * h].reshape(h, w)
        cb = raw[w * h: w * h + cw * ch].reshape(ch, cw)
        cr = raw[w * h + cw * ch:].reshape(ch, cw)
        up = lambda c: np.repeat(np.repeat(c, 2, axis=0), 2, axis=1)[:h, :w]  # noqa: E731
        frames.append(ycbcr_to_rgb(np.stack([y, up(cb), up(cr)])))
    if not frames:
        raise VideoFormatError("y4m stream has no frames")
    return np.stack(frames), info


def write_y4m(path: str | Path, frames: np.ndarray, fps: tuple = (25, 1)) -> None:
    frames = np.asarray(frames, dtype=np.float64)
    n, _, h, w = frames.shape
    parts = [f"YUV4MPEG2 W{w} H{h} F{fps[0]}:{fps[1]} Ip A1:1 C420jpeg\n".encode("ascii")]
    ycc = rgb_to_ycbcr(frames)
    ph, pw = h % 2, w % 2
    for f in ycc:
        chroma = np.pad(f[1:], ((0, 0), (0, ph), (0, pw)), mode="edge")
        chroma = 0.25 * (chroma[:, 0::2, 0::2] + chroma[:, 1::2, 0::2] + chroma[:, 0::2, 1::2] + chroma[:, 1::2, 1::2])
        parts += [b"FRAME\n", _to_u8(f[0]).tobytes(), _to_u8(chroma[0]).tobytes(), _to_u8(chroma[1]).tobytes()]
    Path(path).write_bytes(b"".join(parts))


# ----------------------------------------------------------------------------
# raw RGB24 with a JSON sidecar {"width": W, "height": H}


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def read_raw_rgb(path: str | Path, width: int | None = None, height: int | None = None) -> np.ndarray:
    if width is None or height is None:
        side = sidecar_path(path)
        if not side.exists():
            raise VideoFormatError(f"raw RGB input needs dimensions or a sidecar {side.name}")
        meta = json.loads(side.read_text())
        width, height = int(meta["width"]), int(meta["height"])
    data = Path(path).read_bytes()
    frame_bytes = width * height * 3
    if frame_bytes == 0 or len(data) % frame_bytes or not data:
        raise VideoFormatError(f"raw file size {len(data)} is not a multiple of {frame_bytes}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(-1, height, width, 3)
    return arr.transpose(0, 3, 1, 2).astype(np.float64) / 255.0


def write_raw_rgb(path: str | Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype=np.float64)
    _, _, h, w = frames.shape
    Path(path).write_bytes(_to_u8(frames.transpose(0, 2, 3, 1) * 255.0).tobytes())
    sidecar_path(path).write_text(json.dumps({"width": w, "height": h}))


def read_video(path: str | Path) -> np.ndarray:
    if str(path).lower().endswith(".y4m"):
        return read_y4m(path)[0]
    return read_raw_rgb(path)


def write_video(path: str | Path, frames: np.ndarray) -> None:
    if str(path).lower().endswith(".y4m"):
        write_y4m(path, frames)
    else:
        write_raw_rgb(path, frames)
