"""Fixed multi-scale feature extractor, error computation, and error fusion.

One shared four-stage convolutional encoder plays every feature-space role:
it extracts the features of the image being refined, defines the errors that
drive the refinement, and measures the perceptual losses. Its weights are
drawn once from a seeded orthogonal initialization and never trained, so the
error space and the loss space coincide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ConvParams, Tensor
from .errors import ContractError
from .images import to_chw

DEFAULT_CHANNELS = (16, 32, 64, 128)
NUM_STAGES = 4
RELU_GAIN = float(np.sqrt(2.0))


@dataclass
class Encoder:
    """Four fixed stages; stage i outputs channels[i-1] maps at scale 1/2^(i-1)."""

    stages: list[list[ConvParams]]
    channels: tuple[int, ...]

    def named_tensors(self):
        out = {}
        for i, stage in enumerate(self.stages, start=1):
            for j, conv in enumerate(stage, start=1):
                out[f"encoder.stage{i}.conv{j}.weight"] = conv.weight
        return out

    def astype(self, dtype):
        """Dtype-shadow copy (used for float64 finite-difference checks)."""
        stages = [[ConvParams(weight=Tensor(c.weight.data.astype(dtype)),
                              stride=c.stride, padding=c.padding)
                   for c in stage] for stage in self.stages]
        return Encoder(stages=stages, channels=self.channels)


def load_encoder_state(enc: Encoder, state):
    """Copy named weight arrays into an encoder, validating names and shapes."""
    named = enc.named_tensors()
    missing = set(named) - set(state)
    extra = set(state) - set(named)
    if missing or extra:
        raise ContractError(f"load_encoder_state: missing={sorted(missing)} extra={sorted(extra)}")
    for name, t in named.items():
        arr = state[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise ContractError(f"load_encoder_state: {name} shape {arr.shape}, want {t.shape}")
        t.data = np.ascontiguousarray(arr.astype(np.float32))
    return enc


def _box3(img):
    """3x3 box blur with edge padding, used only for calibration inputs."""
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    acc = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return acc / 9.0


def _calibration_images(rng, size=32, count=8):
    """Mixed smooth/textured probe images for variance calibration."""
    imgs = []
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    for i in range(count):
        if i % 4 == 3:
            cell = 4
            mask = (((yy // cell) + (xx // cell)) % 2).astype(bool)
            c0, c1 = rng.random(3).astype(np.float32), rng.random(3).astype(np.float32)
            imgs.append(np.where(mask[:, :, None], c0, c1).astype(np.float32))
        else:
            img = rng.random((size, size, 3)).astype(np.float32)
            for _ in range(i % 4):
                img = _box3(img)
            imgs.append(img.astype(np.float32))
    return imgs


def _stage_forward(x, stage, pool):
    if pool:
        x = ad.avgpool2x(x)
    for conv in stage:
        x = ad.relu(ad.conv2d(x, conv))
    return x


PASSTHROUGH = 3  # feature channels per stage that carry (pooled) RGB


def _reserve_passthrough(weight, c_in_passthrough):
    """Rewire the first channels of a conv to copy its first inputs.

    Deep features then retain pooled color planes the way a pretrained
    perceptual network does, which anchors feature matching to pixels;
    purely random features admit far-off metamers.
    """
    w = weight.data
    k = w.shape[2]
    w[:c_in_passthrough] = 0.0
    for c in range(c_in_passthrough):
        w[c, c, k // 2, k // 2] = 1.0


def make_encoder(seed, channels=DEFAULT_CHANNELS):
    """Seeded fixed encoder.

    Each stage keeps a few RGB passthrough channels (see above) and is
    rescaled so its features have unit RMS on a deterministic probe set,
    keeping error and loss magnitudes comparable across stages and widths.
    """
    if len(channels) != NUM_STAGES:
        raise ContractError(f"make_encoder: need {NUM_STAGES} channel widths, got {channels}")
    rng = np.random.default_rng(seed)
    # the passthrough chain must be unbroken, so it is all stages or none
    use_passthrough = min(channels) > 2 * PASSTHROUGH
    stages = []
    c_prev = 3
    for c in channels:
        stage = [
            ConvParams(weight=ad.conv_weight(rng, c, c_prev, 3, gain=RELU_GAIN), padding=1),
            ConvParams(weight=ad.conv_weight(rng, c, c, 3, gain=RELU_GAIN), padding=1),
        ]
        if use_passthrough:
            for conv in stage:
                _reserve_passthrough(conv.weight, PASSTHROUGH)
        stages.append(stage)
        c_prev = c
    # variance calibration: relu is positively homogeneous, so scaling the
    # second conv of a stage scales the whole stage output linearly
    probes = [Tensor(to_chw(img)) for img in _calibration_images(rng)]
    for i, stage in enumerate(stages):
        probes = [_stage_forward(x, stage, pool=i > 0) for x in probes]
        rms = float(np.sqrt(np.mean([np.mean(x.data.astype(np.float64) ** 2)
                                     for x in probes])))
        factor = 1.0 / max(rms, 1e-8)
        stage[1].weight.data *= np.float32(factor)
        probes = [Tensor(x.data * np.float32(factor)) for x in probes]
    return Encoder(stages=stages, channels=tuple(channels))


@dataclass
class FeatureStack:
    """Per-scale feature maps, stages[i] at spatial scale 1/2^i of the input."""

    stages: tuple[Tensor, ...]

    def __getitem__(self, i):
        return self.stages[i]


@dataclass
class ErrorBundle:
    """Content feature delta at the deepest stage plus per-stage Gram deltas."""

    content: Tensor
    style: tuple[Tensor, ...]


def _as_image_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(to_chw(x))


def encode(img, enc: Encoder) -> FeatureStack:
    """Run the fixed encoder; accepts an (H,W,3) array or a (3,H,W) Tensor."""
    x = _as_image_tensor(img)
    if x.data.ndim != 3 or x.shape[0] != 3:
        raise ContractError(f"encode: expected 3-channel input, got {x.shape}")
    h, w = x.shape[1], x.shape[2]
    if h % 8 or w % 8:
        raise ContractError(f"encode: dimensions {h}x{w} must be divisible by 8")
    feats = []
    for i, stage in enumerate(enc.stages):
        if i > 0:
            x = ad.avgpool2x(x)
        for conv in stage:
            x = ad.relu(ad.conv2d(x, conv))
        feats.append(x)
    return FeatureStack(stages=tuple(feats))


def gram_stack(stack: FeatureStack):
    return tuple(ad.gram(f) for f in stack.stages)


def errors_between(target_content_feat, target_style_grams, current: FeatureStack) -> ErrorBundle:
    """Error bundle of a current stack against precomputed targets."""
    content = ad.sub(target_content_feat, current.stages[-1])
    style = tuple(ad.sub(tg, ad.gram(f)) for tg, f in zip(target_style_grams, current.stages))
    return ErrorBundle(content=content, style=style)


def compute_errors(target_c, target_s, current, enc: Encoder) -> ErrorBundle:
    """Content error at the deepest stage and style Gram deltas at every stage.

    content = F4(target_c) - F4(current); style[i] = G_i(target_s) - G_i(current).
    """
    tc = _as_image_tensor(target_c)
    ts = _as_image_tensor(target_s)
    cur = _as_image_tensor(current)
    if tc.shape != ts.shape or tc.shape != cur.shape:
        raise ContractError(
            f"compute_errors: image shapes differ: {tc.shape}, {ts.shape}, {cur.shape}")
    current_stack = encode(cur, enc)
    target_feat4 = encode(tc, enc).stages[-1]
    target_grams = gram_stack(encode(ts, enc))
    return errors_between(target_feat4, target_grams, current_stack)


def fuse(content_err: Tensor, w: Tensor, style_err: Tensor) -> Tensor:
    """Bilinear fusion of a content error map with a style Gram delta.

    Pixels become rows; each row is multiplied by the learnable matrix `w`
    and then by the style delta, and the result is folded back to (C, H, W).
    """
    if content_err.data.ndim != 3:
        raise ContractError(f"fuse: content error must be (C,H,W), got {content_err.shape}")
    c, h, wid = content_err.shape
    if w.shape != (c, c) or style_err.shape != (c, c):
        raise ContractError(
            f"fuse: channel mismatch: content C={c}, w {w.shape}, style {style_err.shape}")
    flat = ad.flatten_pixels(content_err)
    mixed = ad.matmul(ad.matmul(flat, w), style_err)
    return ad.unflatten_pixels(mixed, h, wid)
