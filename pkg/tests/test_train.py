import csv
import math

import numpy as np
import pytest

from sivit import datasynth as ds
from sivit import heads as hd
from sivit import train as tr
from sivit.model import SIViT


def tiny_cfg(**kw):
    base = dict(epochs=1, batch_size=4, patch_size=4, embed_dim=8, depth=1, heads=2, mlp_ratio=2,
                normalize_labels=True, seed=5)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    cfg = ds.GenConfig(image_size=16, normal_cells=(1, 2), cancer_cells=(1, 1), normal_radius=(1.5, 2.0),
                       cancer_radius=(2.0, 2.5), impurities=(0, 1), seed=11)
    return ds.generate_dataset(cfg, 6, 6)


def make_batch(data, n=4, seed=0):
    images, masks, labels = tr.stack(data[:n // 2] + data[-(n - n // 2):])
    return tr.Batch(images, masks, labels)


class TestCosine:
    def test_endpoints(self):
        assert tr.cosine_lr(0, 100, 3e-4) == 3e-4
        assert tr.cosine_lr(100, 100, 3e-4) == pytest.approx(3e-4 / 20, rel=1e-15)

    def test_midpoint(self):
        assert tr.cosine_lr(50, 100, 1.0) == pytest.approx((1 + 1 / 20) / 2, rel=1e-15)

    def test_monotone(self):
        lrs = [tr.cosine_lr(s, 37, 1e-3) for s in range(38)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            tr.cosine_lr(11, 10, 1.0)


def adam_oracle(p, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat, vhat = m / (1 - b1 ** t), v / (1 - b2 ** t)
        p = p - lr * wd * p - lr * mhat / (math.sqrt(vhat) + eps)
    return p


class TestAdam:
    def params(self, value):
        return {"w": tr.T.Tensor(np.array([value]), requires_grad=True)}

    def test_zero_everything_is_identity(self):
        ps = self.params(1.5)
        tr.adam_update(ps, {"w": np.zeros(1)}, tr.AdamState(), 1e-2, 0.0)
        assert ps["w"].data[0] == 1.5

    def test_first_step_closed_form(self):
        g, lr = -0.37, 1e-2
        ps = self.params(0.2)
        tr.adam_update(ps, {"w": np.array([g])}, tr.AdamState(), lr, 0.0)
        assert ps["w"].data[0] == pytest.approx(0.2 - lr * g / (abs(g) + 1e-8), rel=1e-12)

    def test_decay_only(self):
        ps = self.params(2.0)
        tr.adam_update(ps, {"w": None}, tr.AdamState(), 0.1, 0.05)
        assert ps["w"].data[0] == pytest.approx(2.0 - 0.1 * 0.05 * 2.0, rel=1e-15)

    def test_matches_scalar_loop(self):
        grads = [0.3, -1.2, 0.05, 2.0]
        ps, state = self.params(0.7), tr.AdamState()
        for g in grads:
            tr.adam_update(ps, {"w": np.array([g])}, state, 1e-3, 0.05)
        assert state.t == 4
        assert ps["w"].data[0] == pytest.approx(adam_oracle(0.7, grads, 1e-3, 0.05), rel=1e-12)


class TestMixing:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.images = rng.uniform(size=(4, 64, 64, 3))
        self.labels = np.array([1, 0, 0, 1])
        self.partner = np.array([1, 0, 3, 2])

    def test_mixup_lam_one(self):
        out, y = tr.mixup(self.images, self.labels, np.random.default_rng(1), lam=1.0, partner=self.partner)
        np.testing.assert_array_equal(out, self.images)
        np.testing.assert_array_equal(y, tr.one_hot(self.labels))

    def test_mixup_weights(self):
        out, y = tr.mixup(self.images, self.labels, np.random.default_rng(1), lam=0.3, partner=self.partner)
        np.testing.assert_allclose(out[0], 0.3 * self.images[0] + 0.7 * self.images[1])
        np.testing.assert_allclose(y[0], [0.7, 0.3])

    def test_cutmix_zero_area(self):
        out, y = tr.cutmix(self.images, self.labels, np.random.default_rng(1), box=(5, 5, 0, 64),
                           partner=self.partner)
        np.testing.assert_array_equal(out, self.images)
        np.testing.assert_array_equal(y, tr.one_hot(self.labels))

    def test_cutmix_quarter(self):
        out, y = tr.cutmix(self.images, self.labels, np.random.default_rng(1), box=(10, 42, 20, 52),
                           partner=self.partner)
        changed = np.any(out[0] != self.images[0], axis=-1).sum()
        assert changed == 32 * 32
        frac = changed / (64 * 64)
        np.testing.assert_allclose(y[0], (1 - frac) * np.array([0, 1]) + frac * np.array([1, 0]))

    def test_cutmix_random_weight_is_area(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            imgs = np.stack([np.zeros((64, 64, 3)), np.ones((64, 64, 3))])
            out, y = tr.cutmix(imgs, np.array([0, 1]), rng, partner=np.array([1, 0]))
            pasted = (out[0, ..., 0] == 1).sum() / 64 ** 2
            assert y[0, 1] == pytest.approx(pasted, abs=1e-15)

    def test_cutout_keeps_labels(self):
        out, y = tr.cutout(self.images, self.labels, np.random.default_rng(2), 0.25)
        np.testing.assert_array_equal(y, tr.one_hot(self.labels))
        zeroed = np.all(out == 0, axis=-1).sum(axis=(1, 2))
        assert np.all(zeroed > 0) and np.all(zeroed <= 16 * 16)

    def test_mixing_needs_two(self):
        with pytest.raises(tr.TrainConfigError):
            tr.mixup(self.images[:1], self.labels[:1], np.random.default_rng(0))


class TestAugment:
    def test_identity_affine(self):
        rng = np.random.default_rng(0)
        img, mask = rng.uniform(size=(16, 16, 3)), rng.integers(0, 3, size=(16, 16)).astype(np.uint8)
        out, m = tr._affine(img, mask, 0.0, 1.0)
        np.testing.assert_allclose(out, img, atol=1e-12)
        np.testing.assert_array_equal(m, mask)

    def test_zero_jitter_is_identity(self):
        img = np.random.default_rng(1).uniform(size=(2, 8, 8, 3))
        cfg = tr.AugmentConfig(brightness=0, contrast=0, saturation=0, hue=0)
        np.testing.assert_allclose(tr.color_jitter(img, np.random.default_rng(0), cfg), img, atol=1e-12)

    def test_augment_ranges(self, tiny_data):
        images, masks, _ = tr.stack(tiny_data)
        out, m = tr.augment_batch(images, masks, np.random.default_rng(3), tr.AugmentConfig())
        assert out.shape == images.shape and m.shape == masks.shape
        assert out.min() >= 0 and out.max() <= 1
        assert set(np.unique(m)) <= set(np.unique(masks))

    def test_eval_deterministic(self, tiny_data):
        images, masks, _ = tr.stack(tiny_data)
        a = tr.eval_transform(images, masks, tr.AugmentConfig())
        b = tr.eval_transform(images, masks, tr.AugmentConfig())
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_rotation_fills_with_background(self):
        img = np.full((16, 16, 3), 0.9)
        img[6:10, 6:10] = 0.1
        out, _ = tr._affine(img, np.zeros((16, 16), np.uint8), math.pi / 4, 1.0)
        assert out[0, 0, 0] == pytest.approx(0.9)


class TestConfig:
    def test_bad_strategy(self):
        with pytest.raises(tr.TrainConfigError):
            tiny_cfg(strategy="shuffle").validate()

    def test_bad_epochs(self):
        with pytest.raises(tr.TrainConfigError):
            tiny_cfg(epochs=0).validate()

    def test_baseline_without_cls(self):
        with pytest.raises(tr.TrainConfigError):
            tiny_cfg(strategy="naive", head_weights=hd.HeadWeights(0, 1, 1)).validate()

    def test_patch_divisibility(self):
        with pytest.raises(tr.TrainConfigError):
            tiny_cfg(patch_size=5).vit_config(16)

    def test_effective_weights(self):
        assert tr.effective_weights(tiny_cfg(strategy="naive")).as_tuple() == (1, 0, 0)
        assert tr.effective_weights(tiny_cfg(strategy="usf_only")).as_tuple() == (1, 1, 0)
        assert tr.effective_weights(tiny_cfg(strategy="si")).as_tuple() == (1, 1, 1)


def run_steps(cfg, data, n_steps):
    model = tr.build_model(cfg, 16, 2)
    state, rng = tr.AdamState(), np.random.default_rng(cfg.seed)
    out = []
    for s in range(n_steps):
        out.append(tr.train_step(model, make_batch(data), cfg, state, rng, 1e-3, s))
    return model, state, out


class TestTrainStep:
    def test_naive_is_cls_only(self, tiny_data):
        _, state, (br,) = run_steps(tiny_cfg(strategy="naive"), tiny_data, 1)
        assert br.l_reg_sf == 0.0 and br.l_reg_usf == 0.0 and br.total == br.l_cls
        assert state.t == 1

    def test_usf_only(self, tiny_data):
        _, _, (br,) = run_steps(tiny_cfg(strategy="usf_only"), tiny_data, 1)
        assert br.l_reg_sf == 0.0 and br.l_reg_usf > 0

    def test_si_all_terms_one_update(self, tiny_data):
        _, state, (br,) = run_steps(tiny_cfg(), tiny_data, 1)
        assert min(br.l_reg_sf, br.l_reg_usf, br.l_cls) > 0
        assert br.total == pytest.approx(br.l_reg_sf + br.l_reg_usf + br.l_cls, abs=1e-12)
        assert state.t == 1

    def test_two_updates(self, tiny_data):
        _, state, (br,) = run_steps(tiny_cfg(two_updates=True), tiny_data, 1)
        assert state.t == 2
        assert br.total == pytest.approx(br.l_reg_sf + br.l_reg_usf + br.l_cls, abs=1e-12)

    def test_deterministic_trajectory(self, tiny_data):
        a, _, la = run_steps(tiny_cfg(), tiny_data, 5)
        b, _, lb = run_steps(tiny_cfg(), tiny_data, 5)
        assert la == lb
        for k in a.params:
            assert a.params[k].data.tobytes() == b.params[k].data.tobytes()

    def test_zero_reg_weights_match_naive(self, tiny_data):
        a, _, la = run_steps(tiny_cfg(head_weights=hd.HeadWeights(1, 0, 0)), tiny_data, 3)
        b, _, lb = run_steps(tiny_cfg(strategy="naive"), tiny_data, 3)
        assert la == lb
        for k in a.params:
            assert a.params[k].data.tobytes() == b.params[k].data.tobytes()

    def test_nan_loss_reports_step(self, tiny_data):
        cfg = tiny_cfg(strategy="naive")
        model = tr.build_model(cfg, 16, 2)
        model.params["cls.b"].data[:] = np.nan
        with pytest.raises(tr.TrainingError, match="step 7") as info:
            tr.train_step(model, make_batch(tiny_data), cfg, tr.AdamState(), np.random.default_rng(0), 1e-3, 7)
        assert info.value.step == 7

    def test_divergence(self, tiny_data):
        cfg = tiny_cfg(strategy="naive")
        model = tr.build_model(cfg, 16, 2)
        model.params["cls.b"].data[:] = [-1e8, 1e8]
        with pytest.raises(tr.TrainingError, match="diverged"):
            tr.train_step(model, make_batch(tiny_data), cfg, tr.AdamState(), np.random.default_rng(0), 1e-3, 0)

    @pytest.mark.parametrize("strategy", ["cutout", "mixup", "cutmix"])
    def test_mixing_strategies_train(self, tiny_data, strategy, tmp_path):
        cfg = tiny_cfg(strategy=strategy)
        model = tr.build_model(cfg, 16, 2)
        res = tr.fit(model, tiny_data, tiny_data[:4], cfg, tmp_path)
        assert res.steps == 3
        assert all(math.isfinite(r.train_loss) for r in res.history)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestFit:
    def test_outputs(self, tiny_data, tmp_path):
        cfg = tiny_cfg(epochs=2)
        model = tr.build_model(cfg, 16, 2)
        res = tr.fit(model, tiny_data, tiny_data[:4], cfg, tmp_path)
        rows = read_rows(tmp_path / "metrics.csv")
        assert [r["epoch"] for r in rows] == ["1", "2"]
        assert list(rows[0]) == list(tr.METRICS_HEADER)
        steps = read_rows(tmp_path / "steps.csv")
        assert len(steps) == res.steps == 6
        for s in steps:
            parts = [float(s[k]) for k in ("l_cls", "l_reg_usf", "l_reg_sf")]
            assert abs(float(s["total"]) - sum(parts)) <= 1e-9
        loaded = SIViT.load(tmp_path / "best.ckpt")
        for k, v in model.params.items():
            np.testing.assert_array_equal(loaded.params[k].data, v.data)

    def test_naive_csv_reg_columns_zero(self, tiny_data, tmp_path):
        cfg = tiny_cfg(strategy="naive")
        tr.fit(tr.build_model(cfg, 16, 2), tiny_data, tiny_data[:4], cfg, tmp_path)
        for r in read_rows(tmp_path / "metrics.csv"):
            assert float(r["l_reg_usf"]) == 0.0 and float(r["l_reg_sf"]) == 0.0

    def test_same_seed_same_bytes(self, tiny_data, tmp_path):
        cfg = tiny_cfg()
        for name in ("a", "b"):
            tr.fit(tr.build_model(cfg, 16, 2), tiny_data, tiny_data[:4], cfg, tmp_path / name)
        for f in ("metrics.csv", "steps.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_keeps_best_epoch(self, tiny_data):
        cfg = tiny_cfg(epochs=3, lr=3e-3)
        model = tr.build_model(cfg, 16, 2)
        res = tr.fit(model, tiny_data, tiny_data[:6], cfg)
        best = max(r.val_acc for r in res.history)
        assert res.best_val_acc == best
        assert res.history[res.best_epoch - 1].val_acc == best
        assert tr.accuracy(tr.evaluate(model, tiny_data[:6])) == best

    def test_without_validation(self, tiny_data):
        cfg = tiny_cfg()
        res = tr.fit(tr.build_model(cfg, 16, 2), tiny_data, [], cfg)
        assert res.best_epoch == 1 and math.isnan(res.history[0].val_acc)
