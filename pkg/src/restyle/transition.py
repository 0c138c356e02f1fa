"""Residual-image decoder: non-local error diffusion and cascaded propagation.

Per pyramid level the decoder holds: one fusion matrix combining the deepest
content and style errors, three 1x1 convolutions forming the non-local block
at the deepest scale, one propagation block per scale transition (4->3,
3->2, 2->1), and a linear head emitting the 3-channel residual.

Every convolution here is bias-free. The error-side path is therefore
exactly zero when the error bundle is zero; the feature branch of each
propagation block still contributes, which training suppresses with the
zero-pair regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ConvParams, Tensor
from .encoder import (Encoder, ErrorBundle, FeatureStack, encode, errors_between, fuse,
                      gram_stack)
from .errors import ContractError


@dataclass
class NonLocalParams:
    """1x1 bias-free convolutions: value (h), query (u), and key (g) maps."""

    psi_h: ConvParams
    psi_u: ConvParams
    psi_g: ConvParams


@dataclass
class PropagationBlockParams:
    """One scale transition i -> i-1.

    phi_t: 1x1, C_i -> C_{i-1}, feeds the fusion with the finer style delta
    psi:   learnable (C_{i-1}, C_{i-1}) fusion matrix
    phi_u: 3x3, refines the fused error
    phi_v: 1x1, C_i -> C_{i-1}, adapts the incoming residual feature
    phi_w: 3x3, merges (residual branch, encoder feature, fused error)
    """

    phi_t: ConvParams
    psi: Tensor
    phi_u: ConvParams
    phi_v: ConvParams
    phi_w: ConvParams


@dataclass
class LevelParams:
    """All trainable tensors of one pyramid level's transition network."""

    fuse_w: Tensor
    nonlocal_: NonLocalParams
    blocks: list[PropagationBlockParams]
    head: ConvParams
    channels: tuple[int, ...]

    def named_tensors(self):
        out = {"fuse.w": self.fuse_w}
        nl = self.nonlocal_
        out["nonlocal.psi_h.weight"] = nl.psi_h.weight
        out["nonlocal.psi_u.weight"] = nl.psi_u.weight
        out["nonlocal.psi_g.weight"] = nl.psi_g.weight
        for block, i in zip(self.blocks, range(len(self.channels), 1, -1)):
            out[f"block{i}.phi_t.weight"] = block.phi_t.weight
            out[f"block{i}.psi"] = block.psi
            out[f"block{i}.phi_u.weight"] = block.phi_u.weight
            out[f"block{i}.phi_v.weight"] = block.phi_v.weight
            out[f"block{i}.phi_w.weight"] = block.phi_w.weight
        out["head.weight"] = self.head.weight
        return out

    def tensors(self):
        return list(self.named_tensors().values())

    def set_trainable(self, flag):
        for t in self.tensors():
            t.requires_grad = bool(flag)
        return self

    def astype(self, dtype):
        """Dtype-shadow copy (used for float64 finite-difference checks)."""

        def conv(p):
            return ConvParams(weight=Tensor(p.weight.data.astype(dtype),
                                            requires_grad=p.weight.requires_grad),
                              stride=p.stride, padding=p.padding)

        def mat(t):
            return Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)

        return LevelParams(
            fuse_w=mat(self.fuse_w),
            nonlocal_=NonLocalParams(psi_h=conv(self.nonlocal_.psi_h),
                                     psi_u=conv(self.nonlocal_.psi_u),
                                     psi_g=conv(self.nonlocal_.psi_g)),
            blocks=[PropagationBlockParams(phi_t=conv(b.phi_t), psi=mat(b.psi),
                                           phi_u=conv(b.phi_u), phi_v=conv(b.phi_v),
                                           phi_w=conv(b.phi_w))
                    for b in self.blocks],
            head=conv(self.head),
            channels=self.channels,
        )


HEAD_GAIN = 0.1


def make_level_params(seed, channels=(16, 32, 64, 128), trainable=True):
    """Seeded initialization of one level's transition network."""
    rng = np.random.default_rng(seed)
    relu_gain = float(np.sqrt(2.0))
    c4 = channels[-1]

    def conv1x1(c_in, c_out, gain=1.0):
        return ConvParams(weight=ad.conv_weight(rng, c_out, c_in, 1, gain=gain))

    def conv3x3(c_in, c_out, gain):
        return ConvParams(weight=ad.conv_weight(rng, c_out, c_in, 3, gain=gain), padding=1)

    nonlocal_ = NonLocalParams(psi_h=conv1x1(c4, c4), psi_u=conv1x1(c4, c4),
                               psi_g=conv1x1(c4, c4))
    fuse_w = Tensor(np.eye(c4, dtype=np.float32))
    blocks = []
    for i in range(len(channels) - 1, 0, -1):
        c_i, c_prev = channels[i], channels[i - 1]
        blocks.append(PropagationBlockParams(
            phi_t=conv1x1(c_i, c_prev),
            psi=Tensor(np.eye(c_prev, dtype=np.float32)),
            phi_u=conv3x3(c_prev, c_prev, gain=relu_gain),
            phi_v=conv1x1(c_i, c_prev),
            phi_w=conv3x3(3 * c_prev, c_prev, gain=relu_gain),
        ))
    head = conv3x3(channels[0], 3, gain=HEAD_GAIN)
    params = LevelParams(fuse_w=fuse_w, nonlocal_=nonlocal_, blocks=blocks,
                         head=head, channels=tuple(channels))
    return params.set_trainable(trainable)


def load_state(params: LevelParams, state):
    """Copy named arrays into an existing parameter set, validating shapes."""
    named = params.named_tensors()
    missing = set(named) - set(state)
    extra = set(state) - set(named)
    if missing or extra:
        raise ContractError(f"load_state: missing={sorted(missing)} extra={sorted(extra)}")
    for name, t in named.items():
        arr = state[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise ContractError(f"load_state: {name} has shape {arr.shape}, want {t.shape}")
        t.data = np.ascontiguousarray(arr.astype(np.float32))
    return params


def nonlocal_block(err4: Tensor, f_in4: Tensor, p: NonLocalParams) -> Tensor:
    """Diffuse the deepest error map across all positions by affinity.

    Affinity row e is a softmax over positions of the current stylization,
    scored by <query(err at e), key(f_in at p)> / sqrt(C). Each output pixel
    then gathers value-mapped error from every location weighted by the
    affinity into it.
    """
    if err4.shape != f_in4.shape:
        raise ContractError(f"nonlocal_block: {err4.shape} vs {f_in4.shape}")
    c, h, w = err4.shape
    q = ad.flatten_pixels(ad.conv2d(err4, p.psi_u))     # (N, C)
    k = ad.flatten_pixels(ad.conv2d(f_in4, p.psi_g))    # (N, C)
    v = ad.flatten_pixels(ad.conv2d(err4, p.psi_h))     # (N, C)
    logits = ad.scale(ad.matmul(q, ad.transpose2d(k)), 1.0 / np.sqrt(c))
    affinity = ad.softmax_rows(logits)                  # (N_err, N_pos)
    out = ad.matmul(ad.transpose2d(affinity), v)        # (N_pos, C)
    return ad.unflatten_pixels(out, h, w)


def propagation_block(err_i, d_i, f_in_finer, style_delta_finer, p: PropagationBlockParams):
    """One scale transition: returns (refined error, refined residual) at 2x size."""
    if err_i.shape != d_i.shape:
        raise ContractError(f"propagation_block: {err_i.shape} vs {d_i.shape}")
    err_up = ad.upsample_nearest2x(err_i)
    d_up = ad.upsample_nearest2x(d_i)
    if err_up.shape[1:] != f_in_finer.shape[1:]:
        raise ContractError(
            f"propagation_block: upsampled {err_up.shape} vs feature {f_in_finer.shape}")
    fused = fuse(ad.conv2d(err_up, p.phi_t), p.psi, style_delta_finer)
    err_out = ad.relu(ad.conv2d(fused, p.phi_u))
    merged = ad.concat_channels([ad.conv2d(d_up, p.phi_v), f_in_finer, fused])
    d_out = ad.relu(ad.conv2d(merged, p.phi_w))
    return err_out, d_out


def run_decoder(bundle: ErrorBundle, f_in: FeatureStack, params: LevelParams):
    """Decode an error bundle plus current-stylization features to a residual.

    Returns (residual, internals); internals expose the fused deep error,
    the per-scale error maps, and the per-scale residual features.
    """
    err = fuse(bundle.content, params.fuse_w, bundle.style[-1])
    d = nonlocal_block(err, f_in.stages[-1], params.nonlocal_)
    internals = {"err": [err], "d": [d]}
    n = len(params.channels)
    for idx, block in enumerate(params.blocks):
        finer = n - 2 - idx  # 0-based stage index of the finer scale
        err, d = propagation_block(err, d, f_in.stages[finer], bundle.style[finer], block)
        internals["err"].append(err)
        internals["d"].append(d)
    residual = ad.conv2d(d, params.head)
    return residual, internals


def etnet_forward(content_img, style_img, current_img, params: LevelParams,
                  enc: Encoder, bundle: ErrorBundle | None = None) -> Tensor:
    """Full transition network: images in, signed (3, H, W) residual out.

    The current stylization is encoded once; its features serve both the
    error computation and the decoder input. An explicit `bundle` overrides
    the internally computed errors (used for runtime style interpolation).
    """
    f_in = encode(current_img, enc)
    if bundle is None:
        target_feat4 = encode(content_img, enc).stages[-1]
        target_grams = gram_stack(encode(style_img, enc))
        bundle = errors_between(target_feat4, target_grams, f_in)
    residual, _ = run_decoder(bundle, f_in, params)
    return residual
