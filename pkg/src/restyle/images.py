"""Bit-exact PPM image I/O and pyramid resampling.

Images are numpy arrays of shape (H, W, 3), float32, values in [0, 1].
The only wire format is binary PPM (P6, maxval 255).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, PpmParseError


def _validate(img, op):
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"{op}: expected an (H, W, 3) array")


def clamp01(img):
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def load_ppm(data: bytes) -> np.ndarray:
    """Parse binary P6 PPM bytes into an (H, W, 3) float image in [0,1]."""
    pos = 0

    def skip_ws():
        nonlocal pos
        while pos < len(data):
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
            else:
                break

    def read_int(what):
        nonlocal pos
        skip_ws()
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise PpmParseError(f"expected {what}", start)
        return int(data[start:pos])

    if data[:2] != b"P6":
        raise PpmParseError(f"bad magic {data[:2]!r}, expected b'P6'", 0)
    pos = 2
    width = read_int("width")
    height = read_int("height")
    maxval = read_int("maxval")
    if maxval != 255:
        raise PpmParseError(f"maxval {maxval} unsupported, expected 255", pos)
    if width < 1 or height < 1:
        raise PpmParseError(f"bad dimensions {width}x{height}", 2)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PpmParseError("expected single whitespace after maxval", pos)
    pos += 1
    need = width * height * 3
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise PpmParseError(f"truncated payload, need {need} bytes, have {len(payload)}",
                            pos + len(payload))
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float32) / 255.0
    return clamp01(pixels.reshape(height, width, 3))


def save_ppm(img: np.ndarray) -> bytes:
    """Encode an (H, W, 3) float image as binary P6 bytes (values clamped)."""
    _validate(img, "save_ppm")
    h, w, _ = img.shape
    quantized = np.rint(clamp01(img) * 255.0).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + quantized.tobytes()


def downsample(img: np.ndarray) -> np.ndarray:
    """Half-size image by 2x2 average pooling per channel."""
    _validate(img, "downsample")
    h, w, c = img.shape
    if h % 2 or w % 2:
        raise ContractError(f"downsample: dimensions must be even, got {h}x{w}")
    # contiguity normalizes the reduction order, keeping the op bit-stable
    # under channel permutation of its input
    img = np.ascontiguousarray(img)
    return img.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3), dtype=np.float32)


def upsample(img: np.ndarray) -> np.ndarray:
    """Double-size image by nearest-neighbor duplication."""
    _validate(img, "upsample")
    return np.repeat(np.repeat(img, 2, axis=0), 2, axis=1)


def build_level_inputs(content, style, levels=3):
    """Per-level (content, style) pairs, coarsest (level `levels`) first.

    Level k is the input downsampled (k-1) times; level 1 is full resolution.
    """
    _validate(content, "build_level_inputs")
    _validate(style, "build_level_inputs")
    if content.shape != style.shape:
        raise ContractError(f"build_level_inputs: content {content.shape} vs style {style.shape}")
    if levels < 1:
        raise ContractError(f"build_level_inputs: levels must be >= 1, got {levels}")
    h, w, _ = content.shape
    div = 2 ** (levels - 1)
    if h % div or w % div:
        raise ContractError(f"build_level_inputs: {h}x{w} not divisible by {div}")
    pairs = [(content, style)]
    for _ in range(levels - 1):
        c, s = pairs[-1]
        pairs.append((downsample(c), downsample(s)))
    pairs.reverse()
    return pairs


def to_chw(img: np.ndarray) -> np.ndarray:
    """(H, W, 3) image -> (3, H, W) float32 feature layout."""
    _validate(img, "to_chw")
    return np.ascontiguousarray(img.transpose(2, 0, 1).astype(np.float32))


def from_chw(chw: np.ndarray) -> np.ndarray:
    """(3, H, W) -> (H, W, 3) float32 image layout."""
    if chw.ndim != 3 or chw.shape[0] != 3:
        raise ContractError(f"from_chw: expected (3, H, W), got {chw.shape}")
    return np.ascontiguousarray(chw.transpose(1, 2, 0).astype(np.float32))
