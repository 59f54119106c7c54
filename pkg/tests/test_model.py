import numpy as np
import pytest

from sivit import backbone as bb
from sivit import gradcheck
from sivit import heads as hd
from sivit import tensor as T
from sivit.model import SIViT
from sivit.tensor import Tensor


@pytest.fixture
def small_cfg():
    return bb.ViTConfig(image_size=16, patch_size=4, embed_dim=16, depth=2, heads=4, mlp_ratio=2, seed=3)


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            bb.ViTConfig(embed_dim=10, heads=4)

    def test_n_patches(self):
        assert bb.ViTConfig(image_size=384, patch_size=32).n_patches == 144


class TestEmbed:
    def test_zero_image_zero_params(self, small_cfg):
        params = bb.init_params(small_cfg)
        params["pos_embed"].data[:] = 0
        tokens = bb.embed(np.zeros((16, 16, 3)), params, small_cfg)
        assert tokens.shape == (17, 16)
        np.testing.assert_array_equal(tokens.data[1:], 0)

    def test_order_only_permutes_rows(self, small_cfg):
        params = bb.init_params(small_cfg)
        rng = np.random.default_rng(0)
        patches = rng.uniform(size=(16, 48))
        perm = rng.permutation(16)
        params["pos_embed"].data[:] = 0
        a = bb.embed_patches(patches, params).data[1:]
        b = bb.embed_patches(patches[perm], params).data[1:]
        assert sorted(map(bytes, a)) == sorted(map(bytes, b))
        np.testing.assert_array_equal(a[perm], b)

    def test_single_patch_dot_product_oracle(self):
        cfg = bb.ViTConfig(image_size=4, patch_size=4, embed_dim=4, depth=0, heads=1)
        params = bb.init_params(cfg, np.random.default_rng(1))
        img = np.random.default_rng(2).uniform(size=(4, 4, 3))
        tokens = bb.embed(img, params, cfg).data
        flat = img.reshape(-1)  # a single patch is the whole image, row-major
        w, b, pos = params["patch_embed.w"].data, params["patch_embed.b"].data, params["pos_embed"].data
        expected = [sum(flat[i] * w[i, j] for i in range(48)) + b[j] + pos[1, j] for j in range(4)]
        np.testing.assert_allclose(tokens[1], expected, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(tokens[0], params["cls_token"].data + pos[0])

    def test_shape_mismatch(self, small_cfg):
        with pytest.raises(T.ShapeError):
            bb.embed(np.zeros((8, 8, 3)), bb.init_params(small_cfg), small_cfg)

    def test_batched_equals_single(self, small_cfg):
        params = bb.init_params(small_cfg)
        imgs = np.random.default_rng(3).uniform(size=(3, 16, 16, 3))
        batched = bb.embed(imgs, params, small_cfg).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], bb.embed(imgs[i], params, small_cfg).data, atol=1e-15)


class TestForward:
    def test_depth_zero_identity(self):
        cfg = bb.ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=0, heads=2)
        tokens = Tensor(np.random.default_rng(0).normal(size=(5, 8)))
        seq = bb.forward(tokens, bb.init_params(cfg), cfg)
        np.testing.assert_array_equal(seq.cls.data, tokens.data[0])
        np.testing.assert_array_equal(seq.patch_tokens.data, tokens.data[1:])

    def test_single_token_attention_weight_is_one(self):
        x = Tensor(np.random.default_rng(1).normal(size=(1, 1, 8)))
        cfg = bb.ViTConfig(image_size=4, patch_size=4, embed_dim=8, depth=1, heads=1)
        params = bb.init_params(cfg)
        q = x @ params["blocks.0.attn.qkv.w"]
        scores = T.softmax(T.reshape(q, (1, 1, 1, 24))[..., :1], axis=-1)
        assert scores.data.item() == 1.0
        # and the block output is then x + proj(v) + mlp(...), finite
        assert np.all(np.isfinite(bb.block(x, params, 0, cfg).data))

    def test_output_shape(self, small_cfg):
        params = bb.init_params(small_cfg)
        seq = bb.forward(bb.embed(np.zeros((2, 16, 16, 3)), params, small_cfg), params, small_cfg)
        assert seq.cls.shape == (2, 16) and seq.patch_tokens.shape == (2, 16, 16)

    def test_permutation_equivariance_without_positions(self, small_cfg):
        params = bb.init_params(small_cfg, np.random.default_rng(5))
        for t in params.values():
            t.data = t.data * 20  # larger weights so the check is not trivially near-zero
        params["pos_embed"].data[:] = 0
        rng = np.random.default_rng(6)
        patches = rng.uniform(size=(16, 48))
        perm = rng.permutation(16)
        a = bb.forward(bb.embed_patches(patches, params), params, small_cfg)
        b = bb.forward(bb.embed_patches(patches[perm], params), params, small_cfg)
        np.testing.assert_allclose(a.patch_tokens.data[perm], b.patch_tokens.data, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(a.cls.data, b.cls.data, rtol=1e-10, atol=1e-12)

    def test_nan_names_block(self, small_cfg):
        params = bb.init_params(small_cfg)
        params["blocks.1.mlp.fc2.b"].data[:] = np.nan
        with pytest.raises(T.NumericalError, match="block 1"):
            bb.forward(bb.embed(np.zeros((16, 16, 3)), params, small_cfg), params, small_cfg)

    def test_capture_final_block_input(self, small_cfg):
        params = bb.init_params(small_cfg)
        cap = {}
        bb.forward(bb.embed(np.zeros((16, 16, 3)), params, small_cfg), params, small_cfg, capture=cap)
        assert cap["final_block_input"].shape == (1, 17, 16)

    def test_end_to_end_grad_check(self):
        for seed in range(5):
            result = gradcheck.check_case("full", gradcheck.sivit_loss_case, seed)
            assert result.max_error < 1e-4

    def test_no_dead_parameters(self):
        rng = np.random.default_rng(7)
        model = SIViT(bb.ViTConfig(image_size=16, patch_size=4, embed_dim=16, depth=2, heads=2, seed=1),
                      normalize_labels=True)
        patches = rng.uniform(size=(4, 16, 48))
        pred = model.predict(patches)
        pred_sf = model.predict(patches[::-1].copy(), with_cls=False)
        total, _ = hd.composite_loss(pred_sf, pred, rng.uniform(size=(4, 3)), rng.uniform(size=(4, 3)),
                                     np.array([0, 1, 0, 1]), hd.HeadWeights())
        T.backward(total)
        for name, p in model.params.items():
            assert p.grad is not None and np.any(p.grad != 0), name


class TestHeads:
    def _params(self, d=6, k=2, seed=0):
        return hd.init_head_params(d, k, np.random.default_rng(seed), std=0.5)

    def test_zero_reg(self):
        params = {k: Tensor(np.zeros_like(v.data)) for k, v in self._params().items()}
        out = hd.reg_head(Tensor(np.zeros((4, 6))), params)
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_single_patch_equals_per_patch(self):
        params = self._params()
        tok = Tensor(np.random.default_rng(1).normal(size=(1, 6)))
        np.testing.assert_array_equal(hd.reg_head(tok, params).data, hd.reg_head_per_patch(tok, params).data[0])

    def test_three_token_oracle(self):
        params = self._params(seed=2)
        toks = np.random.default_rng(3).normal(size=(3, 6))
        from scipy.special import erf

        def mlp(x):
            h = x @ params["reg.fc1.w"].data + params["reg.fc1.b"].data
            h = 0.5 * h * (1 + erf(h / np.sqrt(2)))
            return h @ params["reg.fc2.w"].data + params["reg.fc2.b"].data

        expected = sum(mlp(toks[i]) for i in range(3))
        np.testing.assert_allclose(hd.reg_head(Tensor(toks), params).data, expected, rtol=1e-12)
        np.testing.assert_allclose(hd.reg_head(Tensor(toks), params, normalize=True).data, expected / 3, rtol=1e-12)

    def test_bag_prediction_permutation_invariant(self):
        params = self._params(seed=4)
        toks = np.random.default_rng(5).normal(size=(7, 6))
        perm = np.random.default_rng(6).permutation(7)
        a = hd.reg_head(Tensor(toks), params).data
        b = hd.reg_head(Tensor(toks[perm]), params).data
        np.testing.assert_allclose(a, b, rtol=1e-13)

    def test_pool_mode_shape(self):
        params = self._params()
        out = hd.reg_head(Tensor(np.ones((2, 5, 6))), params, mode="pool")
        assert out.shape == (2, 3)

    def test_zero_cls(self):
        params = {k: Tensor(np.zeros_like(v.data)) for k, v in self._params().items()}
        params["cls.w"] = Tensor(np.random.default_rng(7).normal(size=(6, 2)))
        np.testing.assert_array_equal(hd.cls_head(Tensor(np.zeros(6)), params).data, [0.0, 0.0])

    def test_cls_dot_product_oracle(self):
        params = self._params(seed=8)
        tok = np.random.default_rng(9).normal(size=6)
        w, b = params["cls.w"].data, params["cls.b"].data
        expected = [sum(tok[i] * w[i, j] for i in range(6)) + b[j] for j in range(2)]
        np.testing.assert_allclose(hd.cls_head(Tensor(tok), params).data, expected, rtol=0, atol=1e-12)

    def test_argmax_shift_invariant(self):
        logits = np.random.default_rng(10).normal(size=(5, 2))
        np.testing.assert_array_equal(np.argmax(logits, -1), np.argmax(logits + 3.7, -1))
        np.testing.assert_allclose(T.softmax(Tensor(logits)).data, T.softmax(Tensor(logits + 3.7)).data)


class TestCompositeLoss:
    def _preds(self, rng, b=3, k1=3):
        soft = Tensor(rng.uniform(size=(b, k1)), requires_grad=True)
        logits = Tensor(rng.normal(size=(b, 2)), requires_grad=True)
        return soft, logits

    def test_perfect(self):
        target = np.array([[0.2, 0.1, 0.1]])
        logits = Tensor(np.array([[-1e3, 1e3]]))
        p = hd.Predictions(Tensor(target.copy()), logits)
        total, br = hd.composite_loss(p, p, target, target, [1], hd.HeadWeights())
        assert br.l_reg_sf == 0 and br.l_reg_usf == 0 and br.l_cls == 0 and br.total == 0

    def test_cls_only_weights(self):
        rng = np.random.default_rng(0)
        soft, logits = self._preds(rng)
        p = hd.Predictions(soft, logits)
        t = rng.uniform(size=(3, 3))
        _, br = hd.composite_loss(p, p, t, t, [0, 1, 1], hd.HeadWeights(1, 0, 0))
        assert br.total == br.l_cls and br.l_reg_usf == 0.0 and br.l_reg_sf == 0.0

    def test_weighted_sum_by_hand(self):
        rng = np.random.default_rng(1)
        soft_sf, _ = self._preds(rng)
        soft_usf, logits = self._preds(rng)
        t_sf, t_usf = rng.uniform(size=(3, 3)), rng.uniform(size=(3, 3))
        y = np.array([1, 0, 1])
        w = hd.HeadWeights(1.0, 1.5, 0.5)
        total, br = hd.composite_loss(hd.Predictions(soft_sf, None), hd.Predictions(soft_usf, logits),
                                      t_sf, t_usf, y, w)
        mse_sf = np.mean((soft_sf.data - t_sf) ** 2)
        mse_usf = np.mean((soft_usf.data - t_usf) ** 2)
        z = logits.data
        ce = np.mean([np.log(np.exp(z[i]).sum()) - z[i, y[i]] for i in range(3)])
        assert abs(br.l_reg_sf - mse_sf) < 1e-12 and abs(br.l_reg_usf - mse_usf) < 1e-12
        assert abs(br.l_cls - ce) < 1e-12
        assert abs(br.total - (ce + 1.5 * mse_usf + 0.5 * mse_sf)) < 1e-9
        br.check(w)

    def test_negative_weight(self):
        with pytest.raises(hd.HeadConfigError):
            hd.HeadWeights(1, -1, 1)

    def test_all_zero_weights(self):
        with pytest.raises(hd.HeadConfigError):
            hd.HeadWeights(0, 0, 0)

    def test_parse(self):
        assert hd.HeadWeights.parse("1:0.5:2").as_tuple() == (1.0, 0.5, 2.0)
        with pytest.raises(hd.HeadConfigError):
            hd.HeadWeights.parse("1:1")

    def test_head_gradients(self):
        rng = np.random.default_rng(2)
        params = hd.init_head_params(6, 2, rng, std=0.5)
        toks = Tensor(rng.normal(size=(2, 4, 6)))
        cls_tok = Tensor(rng.normal(size=(2, 6)))
        t = rng.uniform(size=(2, 3))
        for name, p in params.items():
            def f(x, name=name):
                local = {**params, name: x}
                pred = hd.Predictions(hd.reg_head(toks, local), hd.cls_head(cls_tok, local))
                return hd.composite_loss(pred, pred, t, t, [0, 1], hd.HeadWeights())[0]
            assert T.grad_check(f, p) < 1e-4, name


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, small_cfg):
        model = SIViT(small_cfg, n_categories=3, normalize_labels=True)
        model.save(tmp_path / "m.ckpt", extra={"epoch": 4})
        back = SIViT.load(tmp_path / "m.ckpt")
        assert back.cfg == small_cfg and back.n_categories == 3 and back.normalize_labels
        assert list(back.params) == list(model.params)
        for k in model.params:
            assert back.params[k].data.tobytes() == model.params[k].data.tobytes()

    def test_header_layout(self, tmp_path):
        params = {"a": Tensor(np.arange(6.0).reshape(2, 3)), "b": Tensor(np.array([1.5]))}
        bb.save_checkpoint(tmp_path / "c.bin", params)
        blob = (tmp_path / "c.bin").read_bytes()
        header, data = blob.split(b"\n", 1)
        import json

        h = json.loads(header)
        assert h["tensors"] == [{"name": "a", "shape": [2, 3], "offset": 0},
                                {"name": "b", "shape": [1], "offset": 48}]
        assert data == np.array([0, 1, 2, 3, 4, 5, 1.5], dtype="<f8").tobytes()

    def test_corrupt(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"not json\n1234")
        with pytest.raises(IOError):
            bb.load_checkpoint(tmp_path / "x.bin")
