"""Loss oracles, weighting conformance, optimizer, and smoke training."""

import numpy as np
import pytest

from restyle import autodiff as ad
from restyle import gradcheck
from restyle.autodiff import Tensor
from restyle.config import RunConfig
from restyle.corpus import CorpusSpec, make_corpus
from restyle.encoder import encode, gram_stack, make_encoder
from restyle.errors import ConfigError, ContractError
from restyle.images import downsample, to_chw
from restyle.trainer import (Adam, LossWeights, TrainResult, combine_losses, content_loss,
                             cosine_lr, evaluate, init_level_params, style_loss, total_loss,
                             train_level, tv_loss)

CHANNELS = (4, 6, 8, 10)


@pytest.fixture(scope="module")
def enc():
    return make_encoder(seed=2, channels=CHANNELS)


def rand_img(seed, size):
    return np.random.default_rng(seed).random((size, size, 3)).astype(np.float32)


def msq(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def stage4(img, enc):
    return encode(img, enc).stages[-1].data


def grams(img, enc):
    return [g.data for g in gram_stack(encode(img, enc))]


class TestContentLoss:
    def test_zero_on_identity_at_coarsest(self, enc):
        img = rand_img(0, 16)
        assert content_loss(img, img, level=3, depth=3, enc=enc).item() == 0.0

    def test_coarsest_level_has_single_term(self, enc):
        cs, c = rand_img(1, 16), rand_img(2, 16)
        got = content_loss(cs, c, level=3, depth=3, enc=enc).item()
        want = msq(stage4(cs, enc), stage4(c, enc))
        assert got == pytest.approx(want, abs=1e-5)

    def test_full_pyramid_matches_term_oracle(self, enc):
        cs, c = rand_img(3, 32), rand_img(4, 32)
        got = content_loss(cs, c, level=1, depth=3, enc=enc).item()
        want = 0.0
        cs_j, c_j = cs, c
        for _ in range(3):
            want += msq(stage4(cs_j, enc), stage4(c_j, enc))
            cs_j, c_j = downsample(cs_j), downsample(c_j)
        assert got == pytest.approx(want, rel=1e-5)

    def test_size_mismatch_raises(self, enc):
        with pytest.raises(ContractError):
            content_loss(rand_img(5, 16), rand_img(6, 32), level=1, depth=1, enc=enc)


class TestStyleLoss:
    def test_zero_on_identity_at_coarsest(self, enc):
        img = rand_img(7, 16)
        assert style_loss(img, img, level=3, depth=3, enc=enc).item() == 0.0

    def test_scaling_changes_loss(self, enc):
        img = rand_img(8, 16)
        scaled = np.clip(img * 0.5, 0, 1).astype(np.float32)
        assert style_loss(scaled, img, level=3, depth=3, enc=enc).item() > 0.0

    def test_matches_term_oracle(self, enc):
        cs, s = rand_img(9, 32), rand_img(10, 32)
        got = style_loss(cs, s, level=2, depth=3, enc=enc).item()
        want = sum(msq(a, b) for a, b in zip(grams(cs, enc), grams(s, enc)))
        want += msq(grams(downsample(cs), enc)[-1], grams(downsample(s), enc)[-1])
        assert got == pytest.approx(want, rel=1e-5)


class TestTvLoss:
    def test_constant_zero(self):
        assert tv_loss(np.full((4, 4, 3), 0.5, dtype=np.float32)).item() == 0.0

    def test_single_difference(self):
        img = Tensor(np.array([[[0.0, 1.0]]], dtype=np.float32))  # (1,1,2)
        assert tv_loss(img).item() == pytest.approx(1.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.random((3, 5, 6)).astype(np.float32)
        total, count = 0.0, 0
        for c in range(3):
            for y in range(5):
                for xx in range(6):
                    if xx + 1 < 6:
                        total += (x[c, y, xx + 1] - x[c, y, xx]) ** 2
                        count += 1
                    if y + 1 < 5:
                        total += (x[c, y + 1, xx] - x[c, y, xx]) ** 2
                        count += 1
        got = tv_loss(Tensor(x)).item()
        assert got == pytest.approx(total / count, rel=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        def build(rng):
            x = Tensor(rng.random((2, 4, 5)), requires_grad=True, dtype=np.float64)

            def forward():
                return tv_loss(x)

            return [x], forward
        assert gradcheck.check_gradients(build, seed) < 1e-4


class TestTotalLoss:
    def test_all_zero_components(self, enc):
        img = rand_img(12, 16)
        weights = LossWeights(style_per_level=(1.0, 5.0, 8.0))
        constant = np.full((16, 16, 3), 0.25, dtype=np.float32)
        loss = total_loss(constant, constant, constant, level=3, depth=3, enc=enc,
                          weights=weights)
        assert loss.item() == 0.0

    def test_linear_in_style_component(self):
        weights = LossWeights(style_per_level=(1.0, 5.0, 8.0))
        l_pc = Tensor(np.float32(0.3))
        l_tv = Tensor(np.float32(0.01))
        for level, lam in ((1, 1.0), (2, 5.0), (3, 8.0)):
            base = combine_losses(l_pc, Tensor(np.float32(0.2)), l_tv, level, weights)
            bumped = combine_losses(l_pc, Tensor(np.float32(1.2)), l_tv, level, weights)
            assert bumped.item() - base.item() == pytest.approx(lam, rel=1e-5)

    def test_default_schedule(self):
        weights = LossWeights.from_config(RunConfig())
        assert weights.content == 1.0
        assert weights.tv == 1e-6
        assert weights.style_per_level == (1.0, 5.0, 8.0)

    def test_zero_pair_term_weighted(self):
        weights = LossWeights(style_per_level=(1.0,), zero_pair=0.1)
        zero = Tensor(np.float32(0.0))
        quarter = Tensor(np.float32(0.25))
        base = combine_losses(zero, zero, zero, 1, weights, zero_sq=zero)
        bumped = combine_losses(zero, zero, zero, 1, weights, zero_sq=quarter)
        assert bumped.item() - base.item() == pytest.approx(0.025, rel=1e-5)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients_through_losses(self, seed, enc):
        enc64 = enc.astype(np.float64)
        weights = LossWeights(style_per_level=(1.0, 5.0, 8.0))

        def build(rng):
            cs = Tensor(rng.random((3, 16, 16)), requires_grad=True, dtype=np.float64)
            c = Tensor(rng.random((3, 16, 16)), dtype=np.float64)
            s = Tensor(rng.random((3, 16, 16)), dtype=np.float64)

            def forward():
                return total_loss(cs, c, s, level=2, depth=3, enc=enc64, weights=weights)

            return [cs], forward
        assert gradcheck.check_gradients(build, seed, max_coords=40) < 1e-4


class TestAdam:
    def test_minimizes_quadratic(self):
        target = np.array([1.0, -2.0, 3.0], dtype=np.float32)
        x = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        opt = Adam([x])
        for step in range(400):
            x.zero_grad()
            d = ad.sub(x, Tensor(target))
            ad.backward(ad.mean_all(ad.mul(d, d)))
            opt.step(0.05)
        np.testing.assert_allclose(x.data, target, atol=1e-2)

    def test_cosine_schedule_endpoints(self):
        assert cosine_lr(1e-3, 0, 100) == pytest.approx(1e-3)
        assert cosine_lr(1e-3, 100, 100) == pytest.approx(0.0, abs=1e-12)


def tiny_config(**overrides):
    base = dict(seed=5, image_size=32, channels=CHANNELS, levels=2, lr=1e-3,
                steps=4, batch=2, lambda_ps=(1.0, 5.0), content_count=4, style_count=2)
    base.update(overrides)
    return RunConfig(**base).validate()


class TestTrainLevel:
    def test_zero_steps_keeps_initialization(self, enc):
        cfg = tiny_config(steps=0)
        result = train_level(cfg, 2, enc, frozen={})
        contents, styles = make_corpus(CorpusSpec(seed=cfg.seed, size=cfg.image_size,
                                                  content_count=cfg.content_count,
                                                  style_count=cfg.style_count))
        init = init_level_params(cfg, 2, enc, contents, styles)
        for (na, ta), (nb, tb) in zip(result.params.named_tensors().items(),
                                      init.named_tensors().items()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)
        assert result.log_lines == []

    def test_missing_coarser_level_rejected(self, enc):
        cfg = tiny_config()
        with pytest.raises(ConfigError, match="level 2"):
            train_level(cfg, 1, enc, frozen={})

    def test_deterministic_runs(self, enc):
        cfg = tiny_config(steps=3)
        a = train_level(cfg, 2, enc, frozen={})
        b = train_level(cfg, 2, enc, frozen={})
        assert a.log_lines == b.log_lines
        for ta, tb in zip(a.params.tensors(), b.params.tensors()):
            assert ta.data.tobytes() == tb.data.tobytes()

    def test_loss_decreases_on_smoke_run(self, enc):
        cfg = tiny_config(steps=60, batch=2, content_count=4, style_count=2, image_size=32)
        result = train_level(cfg, 2, enc, frozen={})
        first = float(result.log_lines[0].split("\t")[4])
        last = float(result.log_lines[-1].split("\t")[4])
        assert last < first

    def test_log_format(self, enc):
        cfg = tiny_config(steps=2)
        result = train_level(cfg, 2, enc, frozen={})
        for i, line in enumerate(result.log_lines):
            parts = line.split("\t")
            assert int(parts[0]) == i
            assert len(parts) == 5
            for p in parts[1:]:
                float(p)
