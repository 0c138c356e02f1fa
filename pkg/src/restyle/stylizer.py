"""Coarse-to-fine stylization over an image pyramid, plus runtime knobs.

The pyramid starts from an all-zero estimate at the coarsest level. Each
level's transition network predicts a signed residual which is added to the
running estimate and clamped back to [0,1]; the result is upsampled and
handed to the next finer level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import Encoder, ErrorBundle, encode, errors_between, gram_stack
from .errors import ContractError
from .images import build_level_inputs, from_chw, upsample
from .transition import LevelParams, etnet_forward


@dataclass
class PyramidModel:
    """Shared fixed encoder plus one transition network per pyramid level."""

    encoder: Encoder
    levels: list[LevelParams]  # levels[k-1] refines at scale 1/2^(k-1)

    @property
    def depth(self):
        return len(self.levels)


@dataclass
class StylizeResult:
    final: np.ndarray
    intermediates: list[np.ndarray]  # per-level outputs, coarsest first


def refine_level(icing, content, style, params: LevelParams, enc: Encoder,
                 bundle: ErrorBundle | None = None) -> np.ndarray:
    """One refinement: clamp(estimate + residual) at a single level."""
    if icing.shape != content.shape or icing.shape != style.shape:
        raise ContractError(f"refine_level: resolution mismatch {icing.shape} vs "
                            f"{content.shape} vs {style.shape}")
    residual = etnet_forward(content, style, icing, params, enc, bundle=bundle)
    return np.clip(icing + from_chw(residual.data), 0.0, 1.0).astype(np.float32)


def mix_bundles(a: ErrorBundle, b: ErrorBundle, alpha: float) -> ErrorBundle:
    """Per-component linear interpolation: alpha*a + (1-alpha)*b."""

    def mix(x, y):
        return ad.add(ad.scale(x, alpha), ad.scale(y, 1.0 - alpha))

    return ErrorBundle(content=mix(a.content, b.content),
                       style=tuple(mix(x, y) for x, y in zip(a.style, b.style)))


def _level_bundle(content, style, icing, enc, alpha):
    """Mixed error bundle for the style-strength trade-off at one level."""
    f_in = encode(icing, enc)
    c_stack = encode(content, enc)
    toward_style = errors_between(c_stack.stages[-1], gram_stack(encode(style, enc)), f_in)
    toward_content = errors_between(c_stack.stages[-1], gram_stack(c_stack), f_in)
    return mix_bundles(toward_style, toward_content, alpha)


def stylize(content, style, model: PyramidModel, alpha: float | None = None) -> StylizeResult:
    """Full pyramid pass; returns the final image and per-level intermediates."""
    k = model.depth
    h, w = content.shape[0], content.shape[1]
    need = 8 * 2 ** (k - 1)
    if h % need or w % need:
        raise ContractError(f"stylize: dimensions {h}x{w} must be divisible by {need}")
    pairs = build_level_inputs(content, style, levels=k)
    icing = np.zeros_like(pairs[0][0])
    intermediates = []
    for idx, (c_k, s_k) in enumerate(pairs):
        bundle = None
        if alpha is not None:
            bundle = _level_bundle(c_k, s_k, icing, model.encoder, alpha)
        level_no = k - idx
        out = refine_level(icing, c_k, s_k, model.levels[level_no - 1], model.encoder,
                           bundle=bundle)
        intermediates.append(out)
        if idx + 1 < len(pairs):
            icing = upsample(out)
    return StylizeResult(final=intermediates[-1], intermediates=intermediates)


def stylize_alpha(content, style, model: PyramidModel, alpha: float) -> StylizeResult:
    """Stylization with adjustable strength; alpha=1 is plain stylize."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"stylize_alpha: alpha {alpha} outside [0, 1]")
    return stylize(content, style, model, alpha=alpha)


def refine_external(external, content, style, model: PyramidModel, level: int) -> StylizeResult:
    """Adopt an externally produced stylization at `level` and finish the pyramid."""
    k = model.depth
    if not 1 <= level <= k:
        raise ContractError(f"refine_external: level {level} outside 1..{k}")
    pairs = build_level_inputs(content, style, levels=k)
    want = pairs[k - level][0].shape
    if external.shape != want:
        raise ContractError(f"refine_external: input shape {external.shape}, "
                            f"level {level} needs {want}")
    icing = external
    intermediates = []
    for idx in range(k - level, k):
        c_k, s_k = pairs[idx]
        level_no = k - idx
        out = refine_level(icing, c_k, s_k, model.levels[level_no - 1], model.encoder)
        intermediates.append(out)
        if idx + 1 < len(pairs):
            icing = upsample(out)
    return StylizeResult(final=intermediates[-1], intermediates=intermediates)
