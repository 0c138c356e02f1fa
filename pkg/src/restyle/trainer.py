"""Losses, per-level training loops, evaluation, and model persistence.

Levels are trained independently, coarsest first: the frozen coarser levels
supply each sample's starting estimate, and gradients flow only into the
level under training. All loss norms are mean-squared so the weight schedule
transfers across resolutions. A zero-pair regularizer drives the decoder to
emit a zero residual when content, style, and estimate coincide, which the
feature branch of the architecture does not guarantee by itself.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .config import RunConfig, format_config, load_config
from .corpus import CorpusSpec, make_corpus
from .encoder import Encoder, ErrorBundle, FeatureStack, encode, errors_between, gram_stack, \
    load_encoder_state, make_encoder
from .errors import ConfigError, ContractError, TrainingDiverged
from .images import downsample, to_chw, upsample
from .stylizer import PyramidModel, refine_level, stylize
from .transition import LevelParams, load_state, make_level_params, run_decoder


# ---------------------------------------------------------------------------
# losses

@dataclass(frozen=True)
class LossWeights:
    content: float = 1.0
    style_per_level: tuple[float, ...] = (1.0, 5.0, 8.0)  # level 1 = full resolution
    tv: float = 1e-6
    zero_pair: float = 0.1

    @staticmethod
    def from_config(cfg: RunConfig):
        return LossWeights(content=cfg.lambda_pc, style_per_level=tuple(cfg.lambda_ps),
                           tv=cfg.lambda_tv, zero_pair=cfg.zero_pair_weight)


def _msq(a, b):
    d = ad.sub(a, b)
    return ad.mean_all(ad.mul(d, d))


def _stack_chain(img_t, count, enc):
    """Encoder stacks of img and its successive half-resolution versions."""
    stacks = []
    cur = img_t
    for i in range(count):
        if i > 0:
            cur = ad.avgpool2x(cur)
        stacks.append(encode(cur, enc))
    return stacks


def _content_terms(stacks, targets):
    return [_msq(stack.stages[-1], tgt) for stack, tgt in zip(stacks, targets)]


def _style_terms(stacks, gram_targets, deep_targets):
    terms = [_msq(ad.gram(f), tg) for f, tg in zip(stacks[0].stages, gram_targets)]
    for stack, tg in zip(stacks[1:], deep_targets):
        terms.append(_msq(ad.gram(stack.stages[-1]), tg))
    return terms


def _sum(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def _as_tensor(img):
    return img if isinstance(img, Tensor) else Tensor(to_chw(img))


def content_loss(stylized, content, level, depth, enc: Encoder):
    """Deep-feature distance at this level plus all coarser-level terms.

    Both images are at level-`level` resolution; for each coarser level j the
    pair is downsampled j-level more times and compared again.
    """
    cs = _as_tensor(stylized)
    c = _as_tensor(content)
    if cs.shape != c.shape:
        raise ContractError(f"content_loss: {cs.shape} vs {c.shape}")
    count = depth - level + 1
    stacks = _stack_chain(cs, count, enc)
    targets = [s.stages[-1] for s in _stack_chain(c, count, enc)]
    return _sum(_content_terms(stacks, targets))


def style_loss(stylized, style, level, depth, enc: Encoder):
    """Gram distances at every stage, plus deepest-stage terms after each
    further downsampling to coarser levels."""
    cs = _as_tensor(stylized)
    s = _as_tensor(style)
    if cs.shape != s.shape:
        raise ContractError(f"style_loss: {cs.shape} vs {s.shape}")
    count = depth - level + 1
    stacks = _stack_chain(cs, count, enc)
    target_stacks = _stack_chain(s, count, enc)
    gram_targets = gram_stack(target_stacks[0])
    deep_targets = [ad.gram(st.stages[-1]) for st in target_stacks[1:]]
    return _sum(_style_terms(stacks, gram_targets, deep_targets))


def tv_loss(img):
    """Mean of squared forward differences, horizontal and vertical."""
    t = _as_tensor(img)
    x = t.data
    if x.ndim != 3 or (x.shape[1] < 2 and x.shape[2] < 2):
        raise ContractError(f"tv_loss: need a (C, H, W) map with H or W >= 2, got {x.shape}")
    dh = x[:, :, 1:] - x[:, :, :-1]
    dv = x[:, 1:, :] - x[:, :-1, :]
    count = dh.size + dv.size
    val = (np.sum(dh * dh, dtype=x.dtype) + np.sum(dv * dv, dtype=x.dtype)) / x.dtype.type(count)

    def bw(g):
        if t.requires_grad:
            gx = np.zeros_like(x)
            coeff = g * 2.0 / count
            gx[:, :, 1:] += coeff * dh
            gx[:, :, :-1] -= coeff * dh
            gx[:, 1:, :] += coeff * dv
            gx[:, :-1, :] -= coeff * dv
            ad.accumulate(t, gx)

    return ad.record(np.asarray(val, dtype=x.dtype), (t,), bw)


def combine_losses(l_pc, l_ps, l_tv, level, weights: LossWeights, zero_sq=None):
    """Weighted total for one level; `zero_sq` is the zero-pair residual power."""
    total = ad.add(ad.add(ad.scale(l_pc, weights.content),
                          ad.scale(l_ps, weights.style_per_level[level - 1])),
                   ad.scale(l_tv, weights.tv))
    if zero_sq is not None:
        total = ad.add(total, ad.scale(zero_sq, weights.zero_pair))
    return total


def total_loss(stylized, content, style, level, depth, enc, weights: LossWeights,
               zero_residual=None):
    """Full training objective for one stylized output at one level."""
    l_pc = content_loss(stylized, content, level, depth, enc)
    l_ps = style_loss(stylized, style, level, depth, enc)
    l_tv = tv_loss(stylized)
    zero_sq = None
    if zero_residual is not None:
        zero_sq = ad.mean_all(ad.mul(zero_residual, zero_residual))
    return combine_losses(l_pc, l_ps, l_tv, level, weights, zero_sq=zero_sq)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    def __init__(self, tensors, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for tensor, m, v in zip(self.tensors, self.m, self.v):
            g = tensor.grad
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            tensor.data = tensor.data - np.float32(lr) * update

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None


def cosine_lr(base, step, total):
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


# ---------------------------------------------------------------------------
# cached encoder targets

class TargetCache:
    """Lazy per-(image, level) encoder stacks and Gram tables (untracked)."""

    def __init__(self, enc: Encoder, depth: int):
        self.enc = enc
        self.depth = depth
        self._images = {}
        self._feats = {}

    def level_images(self, role, idx, img):
        key = (role, idx)
        if key not in self._images:
            chain = [img]
            for _ in range(self.depth - 1):
                chain.append(downsample(chain[-1]))
            self._images[key] = chain  # index j-1 = level j image
        return self._images[key]

    def features(self, role, idx, img, level):
        """(stack Tensors, gram Tensors) of the level-`level` version of img."""
        key = (role, idx, level)
        if key not in self._feats:
            level_img = self.level_images(role, idx, img)[level - 1]
            stack = encode(level_img, self.enc)
            grams = gram_stack(stack)
            self._feats[key] = (stack, grams)
        return self._feats[key]


def _zero_bundle(stack: FeatureStack):
    """Errors of an image against itself are exactly zero."""
    c4 = stack.stages[-1]
    content = Tensor(np.zeros_like(c4.data))
    style = tuple(Tensor(np.zeros((f.shape[0], f.shape[0]), dtype=np.float32))
                  for f in stack.stages)
    return ErrorBundle(content=content, style=style)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    params: LevelParams
    log_lines: list[str]


# every 3rd sample is an identity pair, alternating (content, content) and
# (style, style): these teach faithful reconstruction, which underwrites the
# fixed-point behavior and adds target diversity in both roles
IDENTITY_PAIR_PERIOD = 3
RESIDUAL_INIT_RMS = 0.1


def _rms_of(tensors):
    return float(np.sqrt(np.mean([np.mean(t.data.astype(np.float64) ** 2) for t in tensors])))


def _rescale(param_tensor, outputs, target=1.0):
    """Scale a parameter so the op outputs it controls have `target` RMS."""
    factor = target / max(_rms_of(outputs), 1e-8)
    param_tensor.data = param_tensor.data * np.float32(factor)
    return [Tensor(o.data * np.float32(factor)) for o in outputs]


def _calibrate_level(params: LevelParams, cfg: RunConfig, level: int, enc: Encoder,
                     contents, styles):
    """Unit-RMS calibration of every fusion/conv site on probe pairs.

    The bilinear fusions contract magnitudes by roughly the Gram scale; the
    learnable matrices absorb a compensating constant at construction so the
    cascade starts well-conditioned. Deterministic given corpus and seed.
    """
    from .encoder import fuse
    from .transition import nonlocal_block

    cases = []
    for i in range(4):
        c, s = contents[i % len(contents)], styles[(i + 1) % len(styles)]
        for _ in range(level - 1):
            c, s = downsample(c), downsample(s)
        if level == cfg.levels:
            icing = np.zeros_like(c)  # the coarsest level starts from zero
        else:
            icing = ((c + s) / 2).astype(np.float32)
        f_in = encode(icing, enc)
        target4 = encode(c, enc).stages[-1]
        grams = gram_stack(encode(s, enc))
        cases.append((errors_between(target4, grams, f_in), f_in))

    errs = _rescale(params.fuse_w,
                    [fuse(b.content, params.fuse_w, b.style[-1]) for b, _ in cases])
    ds = _rescale(params.nonlocal_.psi_h.weight,
                  [nonlocal_block(e, fi.stages[-1], params.nonlocal_)
                   for e, (_, fi) in zip(errs, cases)])
    n = len(params.channels)
    for idx, block in enumerate(params.blocks):
        finer = n - 2 - idx
        fused = _rescale(block.psi,
                         [fuse(ad.conv2d(ad.upsample_nearest2x(e), block.phi_t), block.psi,
                               b.style[finer])
                          for e, (b, _) in zip(errs, cases)])
        errs = _rescale(block.phi_u.weight,
                        [ad.relu(ad.conv2d(x, block.phi_u)) for x in fused])
        merged = [ad.concat_channels([ad.conv2d(ad.upsample_nearest2x(d), block.phi_v),
                                      fi.stages[finer], x])
                  for d, (_, fi), x in zip(ds, cases, fused)]
        ds = _rescale(block.phi_w.weight,
                      [ad.relu(ad.conv2d(m, block.phi_w)) for m in merged])
    _rescale(params.head.weight, [ad.conv2d(d, params.head) for d in ds],
             target=RESIDUAL_INIT_RMS)


def init_level_params(cfg: RunConfig, level: int, enc: Encoder | None = None,
                      contents=None, styles=None) -> LevelParams:
    """Seeded level initialization, magnitude-calibrated when probes are given."""
    params = make_level_params([cfg.seed, 50 + level], channels=cfg.channels, trainable=False)
    if enc is not None and contents and styles:
        _calibrate_level(params, cfg, level, enc, contents, styles)
    return params.set_trainable(True)


def train_level(cfg: RunConfig, level: int, enc: Encoder, frozen: dict[int, LevelParams],
                contents=None, styles=None) -> TrainResult:
    """Train one level against frozen coarser levels.

    `frozen` maps level number -> trained params for every level above
    `level`. Sampling, initialization, and accumulation order are fixed by
    cfg.seed, so identical configs produce identical results.
    """
    depth = cfg.levels
    if not 1 <= level <= depth:
        raise ConfigError(f"level {level} outside 1..{depth}")
    for j in range(level + 1, depth + 1):
        if j not in frozen:
            raise ConfigError(f"missing trained checkpoint for coarser level {j}")
    if contents is None or styles is None:
        contents, styles = make_corpus(CorpusSpec(seed=cfg.seed, size=cfg.image_size,
                                                  content_count=cfg.content_count,
                                                  style_count=cfg.style_count))
    weights = LossWeights.from_config(cfg)
    params = init_level_params(cfg, level, enc, contents, styles)
    for j, p in frozen.items():
        p.set_trainable(False)
    opt = Adam(params.tensors())
    cache = TargetCache(enc, depth)
    rng = np.random.default_rng([cfg.seed, 100 + level])
    log_lines = []
    sample_counter = 0

    images = {"c": contents, "s": styles}
    for step in range(cfg.steps):
        opt.zero_grad()
        sums = np.zeros(4)
        for _ in range(cfg.batch):
            ci = int(rng.integers(len(contents)))
            si = int(rng.integers(len(styles)))
            if sample_counter % IDENTITY_PAIR_PERIOD == IDENTITY_PAIR_PERIOD - 1:
                if (sample_counter // IDENTITY_PAIR_PERIOD) % 2 == 0:
                    roles = ("c", ci, "c", ci)
                else:
                    roles = ("s", si, "s", si)
            else:
                roles = ("c", ci, "s", si)
            sample_counter += 1
            values = _train_sample(cfg, level, enc, frozen, params, cache, weights,
                                   images, *roles)
            sums += values
        means = sums / cfg.batch
        if not np.all(np.isfinite(means)):
            raise TrainingDiverged(f"level {level} step {step}: non-finite loss {means}")
        for t in params.tensors():
            if t.grad is not None:
                t.grad /= cfg.batch
        opt.step(cosine_lr(cfg.lr, step, cfg.steps))
        cells = "\t".join(repr(float(v)) for v in means)
        log_lines.append(f"{step}\t{cells}")
    return TrainResult(params=params, log_lines=log_lines)


def _train_sample(cfg, level, enc, frozen, params, cache, weights, images,
                  c_role, c_idx, s_role, s_idx):
    """One forward/backward pass; returns (l_pc, l_ps, l_tv, total) floats."""
    depth = cfg.levels
    c_img = images[c_role][c_idx]
    s_img = images[s_role][s_idx]
    c_chain = cache.level_images(c_role, c_idx, c_img)
    s_chain = cache.level_images(s_role, s_idx, s_img)

    # frozen coarse-to-fine prefix supplies this level's starting estimate
    icing = np.zeros_like(c_chain[depth - 1])
    for j in range(depth, level, -1):
        icing = refine_level(icing, c_chain[j - 1], s_chain[j - 1], frozen[j], enc)
        icing = upsample(icing)

    icing_t = Tensor(to_chw(icing))
    f_in = encode(icing_t, enc)
    c_stack_k, _ = cache.features(c_role, c_idx, c_img, level)
    s_grams_k = cache.features(s_role, s_idx, s_img, level)[1]
    bundle = errors_between(c_stack_k.stages[-1], s_grams_k, f_in)
    residual, _ = run_decoder(bundle, f_in, params)
    stylized = ad.clamp01(ad.add(icing_t, residual))

    # loss terms at this level and all coarser levels
    stacks = _stack_chain(stylized, depth - level + 1, enc)
    content_targets = [cache.features(c_role, c_idx, c_img, j)[0].stages[-1]
                       for j in range(level, depth + 1)]
    deep_style_targets = [cache.features(s_role, s_idx, s_img, j)[1][-1]
                          for j in range(level + 1, depth + 1)]
    l_pc = _sum(_content_terms(stacks, content_targets))
    l_ps = _sum(_style_terms(stacks, s_grams_k, deep_style_targets))
    l_tv = tv_loss(stylized)

    zero_res, _ = run_decoder(_zero_bundle(c_stack_k), c_stack_k, params)
    zero_sq = ad.mean_all(ad.mul(zero_res, zero_res))
    total = combine_losses(l_pc, l_ps, l_tv, level, weights, zero_sq=zero_sq)
    ad.backward(total)
    return np.array([l_pc.item(), l_ps.item(), l_tv.item(), total.item()])


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalResult:
    content: np.ndarray          # (depth,) mean content loss per refinement count
    style: np.ndarray            # (depth,)
    per_pair_content: np.ndarray  # (pairs, depth)
    per_pair_style: np.ndarray


def full_resolution_losses(img, content, style, enc):
    """Plain (no pyramid terms) content and style loss at full resolution."""
    l_c = content_loss(img, content, level=1, depth=1, enc=enc)
    l_s = style_loss(img, style, level=1, depth=1, enc=enc)
    return l_c.item(), l_s.item()


def evaluate(model: PyramidModel, pairs) -> EvalResult:
    """Loss table after 1..K refinements, each inspected at full resolution.

    Intermediate outputs are nearest-upsampled to full size, so the table
    shows how much each extra refinement tightens the style statistics.
    """
    depth = model.depth
    pc = np.zeros((len(pairs), depth))
    ps = np.zeros((len(pairs), depth))
    for row, (content, style) in enumerate(pairs):
        result = stylize(content, style, model)
        for j, img in enumerate(result.intermediates):
            refinements = j + 1
            for _ in range(depth - refinements):
                img = upsample(img)
            l_c, l_s = full_resolution_losses(img, content, style, model.encoder)
            pc[row, j] = l_c
            ps[row, j] = l_s
    return EvalResult(content=pc.mean(axis=0), style=ps.mean(axis=0),
                      per_pair_content=pc, per_pair_style=ps)


# ---------------------------------------------------------------------------
# model persistence

CONFIG_SNAPSHOT = "config.txt"
ENCODER_FILE = "encoder.ckpt"


def level_file(level):
    return f"level{level}.ckpt"


def save_level_checkpoint(path, params: LevelParams):
    checkpoint.write(path, {k: t.data for k, t in params.named_tensors().items()})


def load_level_checkpoint(path, channels) -> LevelParams:
    params = make_level_params(0, channels=channels, trainable=False)
    load_state(params, checkpoint.read(path))
    return params


def init_model_dir(model_dir, cfg: RunConfig, enc: Encoder):
    """Write (or verify) the config snapshot and encoder checkpoint."""
    os.makedirs(model_dir, exist_ok=True)
    snap_path = os.path.join(model_dir, CONFIG_SNAPSHOT)
    snapshot = format_config(cfg)
    if os.path.exists(snap_path):
        with open(snap_path, "r", encoding="utf-8") as fh:
            if fh.read() != snapshot:
                raise ConfigError(f"{snap_path} exists with a different configuration")
    else:
        with open(snap_path, "w", encoding="utf-8") as fh:
            fh.write(snapshot)
    enc_path = os.path.join(model_dir, ENCODER_FILE)
    state = {k: t.data for k, t in enc.named_tensors().items()}
    if os.path.exists(enc_path):
        existing = checkpoint.read(enc_path)
        same = set(existing) == set(state) and all(
            np.array_equal(existing[k], state[k]) for k in state)
        if not same:
            raise ConfigError(f"{enc_path} does not match the configured encoder")
    else:
        checkpoint.write(enc_path, state)


def make_model_encoder(cfg: RunConfig) -> Encoder:
    return make_encoder([cfg.seed, 17], channels=cfg.channels)


def load_frozen_levels(model_dir, cfg: RunConfig, above_level) -> dict[int, LevelParams]:
    frozen = {}
    for j in range(above_level + 1, cfg.levels + 1):
        path = os.path.join(model_dir, level_file(j))
        if not os.path.exists(path):
            raise ConfigError(f"missing checkpoint for level {j}: {path}")
        frozen[j] = load_level_checkpoint(path, cfg.channels)
    return frozen


def load_model_dir(model_dir):
    """Rebuild a PyramidModel (and its config) from a model directory."""
    snap_path = os.path.join(model_dir, CONFIG_SNAPSHOT)
    if not os.path.exists(snap_path):
        raise ConfigError(f"missing config snapshot: {snap_path}")
    cfg = load_config(snap_path)
    enc = make_model_encoder(cfg)
    enc_path = os.path.join(model_dir, ENCODER_FILE)
    if not os.path.exists(enc_path):
        raise ConfigError(f"missing encoder checkpoint: {enc_path}")
    load_encoder_state(enc, checkpoint.read(enc_path))
    levels = []
    for k in range(1, cfg.levels + 1):
        path = os.path.join(model_dir, level_file(k))
        if not os.path.exists(path):
            raise ConfigError(f"missing checkpoint for level {k}: {path}")
        levels.append(load_level_checkpoint(path, cfg.channels))
    return PyramidModel(encoder=enc, levels=levels), cfg
