import numpy as np
import pytest

from travkit import vismodel as vm
from travkit.autodiff import Tensor, finite_difference_check
from travkit.synthworld import PatchFeatureImage

TINY = vm.DecoderHyper(in_dim=6, hidden_dim=6, out_dim=6, pixels_per_patch=2)


def make_image(features, gt=None, t=0.0):
    h, w = features.shape[:2]
    if gt is None:
        gt = np.zeros((h, w), dtype=int)
    return PatchFeatureImage(features=features, terrain_gt=gt,
                             origin_xy=(0.0, 0.0), patch_size_m=1.0, t=t)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


class TestExtract:
    def test_identity_decoder_constant_input(self):
        params = vm.init_decoder_params(TINY, seed=0)
        params.w1.data = np.eye(6)
        params.w2.data = np.eye(6)
        img = make_image(np.tile(unit(np.arange(1.0, 7.0)), (3, 3, 1)))
        fmap = vm.extract(img, params)
        first = fmap.values[0, 0]
        np.testing.assert_allclose(fmap.values, np.broadcast_to(first, fmap.values.shape))

    def test_eval_mode_deterministic(self):
        params = vm.init_decoder_params(TINY, seed=1)
        rng = np.random.default_rng(0)
        img = make_image(rng.normal(size=(4, 4, 6)))
        a = vm.extract(img, params)
        b = vm.extract(img, params)
        np.testing.assert_array_equal(a.values, b.values)

    @pytest.mark.parametrize("hw", [(2, 3), (4, 4), (5, 2)])
    def test_output_shape(self, hw):
        params = vm.init_decoder_params(TINY, seed=2)
        rng = np.random.default_rng(1)
        img = make_image(rng.normal(size=(*hw, 6)))
        fmap = vm.extract(img, params)
        assert fmap.values.shape == (hw[0] * 2, hw[1] * 2, 6)

    def test_extract_independent_of_other_images(self):
        # eval-mode uses running stats, so decoding is per-image pure
        params = vm.init_decoder_params(TINY, seed=3)
        rng = np.random.default_rng(2)
        img = make_image(rng.normal(size=(3, 3, 6)))
        before = vm.extract(img, params).values
        other = make_image(rng.normal(size=(6, 6, 6)))
        vm.extract(other, params)
        np.testing.assert_array_equal(vm.extract(img, params).values, before)

    def test_interp_matrix_is_bilinear_partition(self):
        m = vm._interp_matrix(3, 4, 2)
        np.testing.assert_allclose(m.sum(axis=1), 1.0)
        assert m.shape == (6 * 8, 12)


class TestComputeReference:
    def test_identical_features_mean(self):
        params = vm.init_decoder_params(TINY, seed=4)
        img = make_image(np.tile(unit([1, 0, 0, 1, 0, 0]), (3, 3, 1)))
        ref = vm.compute_reference([img], params, seed=0, reference_terrain=0)
        fmap = vm.extract(img, params)
        np.testing.assert_allclose(ref.mean_feature, fmap.values[0, 0], atol=1e-12)

    def test_seeded_determinism(self):
        params = vm.init_decoder_params(TINY, seed=5)
        rng = np.random.default_rng(3)
        imgs = [make_image(rng.normal(size=(4, 4, 6))) for _ in range(3)]
        a = vm.compute_reference(imgs, params, seed=7, reference_terrain=0)
        b = vm.compute_reference(imgs, params, seed=7, reference_terrain=0)
        np.testing.assert_array_equal(a.mean_feature, b.mean_feature)

    def test_subsample_close_to_full_mean(self):
        params = vm.init_decoder_params(TINY, seed=6)
        rng = np.random.default_rng(4)
        imgs = [make_image(rng.normal(size=(8, 8, 6))) for _ in range(4)]
        ref = vm.compute_reference(imgs, params, seed=1, reference_terrain=0)
        pool = np.concatenate([vm.extract(i, params).values.reshape(-1, 6)
                               for i in imgs])
        full_mean = pool.mean(axis=0)
        sigma = pool.std(axis=0, ddof=1)
        assert np.all(np.abs(ref.mean_feature - full_mean) <= 3.0 * sigma / 10.0 + 1e-12)

    def test_few_pixels_warns(self):
        params = vm.init_decoder_params(TINY, seed=7)
        img = make_image(np.random.default_rng(5).normal(size=(2, 2, 6)))
        with pytest.warns(UserWarning):
            vm.compute_reference([img], params, seed=0, reference_terrain=0)


class TestPredict:
    def _ref(self):
        return vm.ReferenceFeatures(mean_feature=unit([1, 2, 3, 0, 0, 1]), n_images=1)

    def test_equal_gives_one(self):
        ref = self._ref()
        fmap = vm.FeatureMap(values=np.tile(ref.mean_feature * 2.0, (2, 2, 1)))
        assert vm.predict(fmap, ref).values[0, 0] == pytest.approx(1.0)

    def test_opposite_gives_zero(self):
        ref = self._ref()
        fmap = vm.FeatureMap(values=np.tile(-ref.mean_feature, (2, 2, 1)))
        assert vm.predict(fmap, ref).values[0, 0] == pytest.approx(0.0)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(6)
        ref = self._ref()
        fmap = vm.FeatureMap(values=rng.normal(size=(3, 3, 6)))
        pred = vm.predict(fmap, ref)
        for r in range(3):
            for c in range(3):
                v = fmap.values[r, c]
                cos = float(v @ ref.mean_feature
                            / (np.linalg.norm(v) * np.linalg.norm(ref.mean_feature)))
                assert pred.raw_cos[r, c] == pytest.approx(cos, abs=1e-10)

    def test_degenerate_pixel_neutral(self):
        ref = self._ref()
        values = np.tile(ref.mean_feature, (2, 2, 1))
        values[1, 1] = 0.0
        pred = vm.predict(vm.FeatureMap(values=values), ref)
        assert pred.values[1, 1] == pytest.approx(0.5)
        assert pred.degenerate[1, 1]

    def test_positive_rescale_invariance(self):
        rng = np.random.default_rng(7)
        ref = self._ref()
        values = rng.normal(size=(3, 3, 6))
        scales = rng.uniform(0.2, 9.0, size=(3, 3, 1))
        a = vm.predict(vm.FeatureMap(values=values), ref)
        b = vm.predict(vm.FeatureMap(values=values * scales), ref)
        np.testing.assert_allclose(a.values, b.values, atol=1e-12)


class TestLossAlign:
    def test_exact_match_zero(self):
        rng = np.random.default_rng(8)
        cos = rng.uniform(-1, 1, size=(3, 3))
        pred = vm.PredictionMap(values=(cos + 1) / 2, raw_cos=cos,
                                degenerate=np.zeros((3, 3), bool))
        sup = (cos + 1) / 2
        assert vm.loss_align(pred, sup, np.ones((3, 3), bool)) == 0.0

    def test_constant_offset(self):
        cos = np.zeros((2, 2))
        pred = vm.PredictionMap(values=(cos + 1) / 2, raw_cos=cos,
                                degenerate=np.zeros((2, 2), bool))
        sup = (cos + 1) / 2 + 0.1
        assert vm.loss_align(pred, sup, np.ones((2, 2), bool)) == pytest.approx(0.01)

    def test_masked_mse_oracle(self):
        rng = np.random.default_rng(9)
        cos = rng.uniform(-1, 1, size=(4, 4))
        sup = rng.uniform(size=(4, 4))
        valid = rng.random(size=(4, 4)) > 0.4
        pred = vm.PredictionMap(values=(cos + 1) / 2, raw_cos=cos,
                                degenerate=np.zeros((4, 4), bool))
        expected = np.mean((((cos + 1) / 2 - sup)[valid]) ** 2)
        assert vm.loss_align(pred, sup, valid) == pytest.approx(expected, rel=1e-12)

    def test_no_valid_pixels_zero(self):
        pred = vm.PredictionMap(values=np.zeros((2, 2)), raw_cos=np.zeros((2, 2)),
                                degenerate=np.zeros((2, 2), bool))
        assert vm.loss_align(pred, np.zeros((2, 2)), np.zeros((2, 2), bool)) == 0.0

    def test_gradients_match_finite_differences(self):
        from travkit.autodiff import trace_kink_margins

        checked = 0
        seed = 0
        while checked < 3:
            seed += 1
            rng = np.random.default_rng(100 + seed)
            params = vm.init_decoder_params(TINY, seed=seed)
            feats = rng.normal(size=(3, 3, 6))
            sup_vals = rng.uniform(size=(6, 6))
            sup_valid = rng.random(size=(6, 6)) > 0.3
            ref = rng.normal(size=6)

            def loss():
                dec = vm.decode_patches(Tensor(feats.reshape(-1, 6)), params,
                                        training=True)
                pix = vm.interp_tensor(dec, 3, 3, 2)
                return vm._align_loss_t(pix, ref, sup_vals, sup_valid)

            with trace_kink_margins() as trace:
                loss()
            if trace.min_margin < 5e-3:  # finite differences invalid near a kink
                continue
            assert finite_difference_check(loss, params.parameters()[:6], eps=1e-4) < 1e-4
            checked += 1


class TestTrainStep:
    def _samples(self, rng, proto_a, proto_b, n=2, noise=0.1):
        out = []
        for _ in range(n):
            feats = np.empty((4, 4, 6))
            feats[:, :2] = proto_a
            feats[:, 2:] = proto_b
            feats += rng.normal(size=feats.shape) * (noise / np.sqrt(6))
            vals = np.zeros((4, 4))
            vals[:, :2] = 0.9
            vals[:, 2:] = 0.3
            out.append(vm.TrainSample(features=feats, sup_values=vals,
                                      sup_valid=np.ones((4, 4), bool)))
        return out

    def test_zero_gradient_weight_decay_only(self):
        params = vm.init_decoder_params(TINY, seed=10)
        before = {n: p.data.copy() for n, p in params.named_parameters().items()}
        sample = vm.TrainSample(features=np.zeros((2, 2, 6)),
                                sup_values=np.zeros((2, 2)),
                                sup_valid=np.zeros((2, 2), bool))
        ref = vm.ReferenceFeatures(mean_feature=unit(np.ones(6)), n_images=1)
        vm.visual_train_step([sample], params, ref, vm.SgdState(),
                             np.random.default_rng(0), lr=0.1, weight_decay=1e-4,
                             flip_prob=0.0)
        for n, p in params.named_parameters().items():
            np.testing.assert_allclose(p.data, before[n] * (1 - 0.1 * 1e-4), rtol=1e-12)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(11)
        proto_a, proto_b = unit(rng.normal(size=6)), unit(rng.normal(size=6))
        samples = self._samples(rng, proto_a, proto_b)
        ref = vm.ReferenceFeatures(mean_feature=proto_a, n_images=1)
        results = []
        for _ in range(2):
            params = vm.init_decoder_params(TINY, seed=12)
            state = vm.SgdState()
            step_rng = np.random.default_rng(99)
            for _ in range(5):
                vm.visual_train_step(samples, params, ref, state, step_rng,
                                     lr=1e-3, feat_noise=0.05)
            results.append({n: p.data.copy()
                            for n, p in params.named_parameters().items()})
        for n in results[0]:
            np.testing.assert_array_equal(results[0][n], results[1][n])

    def test_loss_halves_after_training(self):
        rng = np.random.default_rng(13)
        proto_a, proto_b = unit(rng.normal(size=6)), unit(rng.normal(size=6))
        params = vm.init_decoder_params(TINY, seed=14)
        ref_feats = np.tile(proto_a, (4, 4, 1)) \
            + rng.normal(size=(4, 4, 6)) * (0.1 / np.sqrt(6))
        with pytest.warns(UserWarning):  # fewer than 100 reference pixels
            ref = vm.compute_reference([make_image(ref_feats)], params, seed=0,
                                       reference_terrain=0)
        state = vm.SgdState()
        step_rng = np.random.default_rng(15)
        losses = []
        for _ in range(200):
            samples = self._samples(rng, proto_a, proto_b)
            losses.append(vm.visual_train_step(samples, params, ref, state, step_rng,
                                               lr=5e-3, flip_prob=0.0))
        early = np.mean(losses[:10])
        late = np.mean(losses[-10:])
        assert late <= 0.5 * early

    def test_regression_head_trains(self):
        hyper = vm.DecoderHyper(in_dim=6, hidden_dim=6, out_dim=6,
                                pixels_per_patch=2, head="regression")
        rng = np.random.default_rng(16)
        params = vm.init_decoder_params(hyper, seed=17)
        proto_a, proto_b = unit(rng.normal(size=6)), unit(rng.normal(size=6))
        ref = vm.ReferenceFeatures(mean_feature=proto_a, n_images=1)
        state = vm.SgdState()
        step_rng = np.random.default_rng(18)
        losses = []
        for _ in range(200):
            samples = self._samples(rng, proto_a, proto_b)
            losses.append(vm.visual_train_step(samples, params, ref, state, step_rng,
                                               lr=5e-3, flip_prob=0.0))
        assert np.mean(losses[-10:]) < np.mean(losses[:10])
        fmap = vm.extract(make_image(np.tile(proto_a, (3, 3, 1))), params)
        pred = vm.predict_regression(fmap, params)
        assert np.all(pred.values >= 0.0) and np.all(pred.values <= 1.0)


def test_checkpoint_roundtrip(tmp_path):
    params = vm.init_decoder_params(TINY, seed=19)
    params.rm1[:] = 0.25
    ref = vm.ReferenceFeatures(mean_feature=np.arange(6.0), n_images=2)
    vm.save_decoder(tmp_path / "vis.ckpt", params, ref)
    loaded, loaded_ref = vm.load_decoder(tmp_path / "vis.ckpt")
    assert loaded.hyper == params.hyper
    for a, b in zip(params.parameters(), loaded.parameters()):
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)
    np.testing.assert_allclose(loaded.rm1, 0.25, atol=1e-7)
    np.testing.assert_allclose(loaded_ref.mean_feature, np.arange(6.0), atol=1e-5)
