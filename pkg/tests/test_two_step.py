import numpy as np
import pytest

from autodiff_core import EVAL, TRAIN, Graph, Tensor, grad_check
from config import RunConfig
from datagen import SampleSet, gen_synth1
from errors import FrozenParameterError, InsufficientDataError, NonFiniteError
from nets import ModelDims, Optimizer, OptimizerSettings, build, build_bundle, fit_scaler, synth_specs
from two_step import (
    STAGE1_COLUMNS, STAGE2_COLUMNS, BatchSampler, TrainConfig, TrainHistory, adversary_update, codes,
    composite_check, encdec_loss, encdec_update, encode, label_entropy, settle_batchnorm, train_stage1,
    train_stage2, train_two_step,
)


def toy_data(rng, n=48, d=12, k=3):
    Y = np.arange(n) % k
    X = rng.standard_normal((n, d)) + Y[:, None]
    return SampleSet(X, Y, k)


class TestHistory:
    """Training history bookkeeping"""

    def test_refuses_non_finite(self):
        with pytest.raises(NonFiniteError):
            TrainHistory().record(0, "encdec", l_rec=float("nan"))

    def test_frames(self):
        h = TrainHistory()
        h.record(0, "stage1", loss=1.0, s_acc=0.5)
        h.record(0, "encdec", l_rec=0.1, l_adv=1.1, adv_acc=0.3)
        h.record(0, "adversary", l_adv=1.0, adv_acc=0.4)
        assert list(h.to_frame(stage=1).columns) == STAGE1_COLUMNS
        assert list(h.to_frame(stage=2).columns) == STAGE2_COLUMNS
        assert len(h.to_frame(stage=2)) == 2
        assert h.count("adversary") == 1
        assert h.last("encdec").l_rec == 0.1

    def test_iteration_and_step_columns(self, rng, small_dims):
        cfg = TrainConfig(stage1_epochs=2, stage2_iterations=2, batch_size=16, log_every=1000)
        _, history = train_two_step(toy_data(rng), synth_specs(small_dims), cfg)
        stage1 = history.to_frame(stage=1)
        # 48 samples in batches of 16 give 3 updates per epoch
        assert list(stage1["iter"]) == list(range(6))
        assert list(stage1["epoch"]) == [0, 0, 0, 1, 1, 1]
        stage2 = history.to_frame(stage=2)
        assert list(stage2["iter"]) == [0, 0, 0, 0, 1, 1, 1, 1]
        assert list(stage2["phase"][:4]) == ["encdec", "adversary", "adversary", "adversary"]
        assert list(stage2["step"]) == list(range(6, 14))


class TestBatchSampler:
    """Mini-batch sampling"""

    def test_epoch_is_a_partition(self):
        sampler = BatchSampler(10, 3, np.random.default_rng(0))
        batches = sampler.epoch()
        assert len(batches) == 3
        flat = np.concatenate(batches)
        assert len(np.unique(flat)) == 9

    def test_needs_two_samples(self):
        with pytest.raises(InsufficientDataError):
            BatchSampler(1, 4, np.random.default_rng(0))


class TestStage1:
    """Classification training of the S encoder"""

    def test_same_seed_same_parameters(self, rng, small_dims, quick_train):
        data = toy_data(rng)
        specs = synth_specs(small_dims)
        a, _, _ = train_stage1(data, specs, quick_train)
        b, _, _ = train_stage1(data, specs, quick_train)
        assert a.digest() == b.digest()

    def test_empty_class_is_rejected(self, rng, quick_train):
        data = toy_data(rng, k=2)
        specs = synth_specs(ModelDims(12, 3, 4, 3))
        with pytest.raises(InsufficientDataError, match="class 2"):
            train_stage1(SampleSet(data.X, data.Y, 3), specs, quick_train)

    def test_single_class_loss_vanishes(self, rng):
        X = rng.standard_normal((32, 12))
        data = SampleSet(X, np.zeros(32, dtype=int), 1)
        cfg = TrainConfig(stage1_epochs=20, batch_size=16, stage1_optimizer=OptimizerSettings(lr=0.01))
        _, _, history = train_stage1(data, synth_specs(ModelDims(12, 3, 4, 1)), cfg)
        # a one-class softmax has zero loss from the start
        assert history.last("stage1").loss < 1e-12


class TestUpdates:
    """Enc-dec and adversary updates"""

    def test_encdec_requires_frozen_encoder(self, small_bundle, rng, quick_train):
        opt = Optimizer.for_networks([small_bundle.enc_z, small_bundle.decoder], OptimizerSettings())
        X = rng.standard_normal((8, 12))
        with pytest.raises(FrozenParameterError):
            encdec_update(small_bundle, X, np.arange(8) % 3, quick_train, opt)

    def test_encdec_leaves_encoder_and_adversary_alone(self, small_bundle, rng, quick_train):
        small_bundle.enc_s.freeze()
        before = (small_bundle.enc_s.digest(), small_bundle.adversary.digest())
        buffers = {k: v.copy() for k, v in small_bundle.adversary.buffers().items()}
        opt = Optimizer.for_networks([small_bundle.enc_z, small_bundle.decoder], OptimizerSettings())
        z_before = small_bundle.enc_z.digest()
        res = encdec_update(small_bundle, rng.standard_normal((8, 12)), np.arange(8) % 3, quick_train, opt)
        assert not res.aborted
        assert (small_bundle.enc_s.digest(), small_bundle.adversary.digest()) == before
        for k, v in small_bundle.adversary.buffers().items():
            np.testing.assert_array_equal(v, buffers[k])
        assert small_bundle.enc_z.digest() != z_before

    def test_lambda_zero_is_plain_autoencoder_step(self, small_dims, rng):
        X = rng.standard_normal((8, 12))
        Y = np.arange(8) % 3
        settings = OptimizerSettings(lr=0.01)
        cfg = TrainConfig(lam=0.0)

        a = build_bundle(synth_specs(small_dims), seed=2)
        a.enc_s.freeze()
        encdec_update(a, X, Y, cfg, Optimizer.for_networks([a.enc_z, a.decoder], settings))

        b = build_bundle(synth_specs(small_dims), seed=2)
        b.enc_s.freeze()
        opt = Optimizer.for_networks([b.enc_z, b.decoder], settings)
        g = Graph()
        s = b.enc_s.forward(X, EVAL, g)
        z = b.enc_z.forward(X, TRAIN, g)
        rec = b.decoder.forward(g.concat(s, z), TRAIN, g)
        opt.step(g.backward(g.mse(rec, Tensor(X))))

        assert a.enc_z.digest() == b.enc_z.digest()
        assert a.decoder.digest() == b.decoder.digest()

    def test_combined_gradient_matches_finite_differences(self, rng):
        dims = ModelDims(10, 3, 4, 2)
        bundle = build_bundle(synth_specs(dims), seed=4)
        bundle.enc_s.freeze()
        X = rng.standard_normal((6, 10))
        Y = np.array([0, 1, 0, 1, 0, 1])
        params = list(bundle.enc_z.parameters().values()) + list(bundle.decoder.parameters().values())
        err = grad_check(lambda g: encdec_loss(bundle, X, Y, 0.7, g)[0], params, sample=8)
        assert err <= 1e-4

    def test_cap_above_the_loss_changes_nothing(self, rng):
        bundle = build_bundle(synth_specs(ModelDims(10, 3, 4, 2)), seed=4)
        bundle.enc_s.freeze()
        X = rng.standard_normal((6, 10))
        Y = np.array([0, 1, 0, 1, 0, 1])
        params = list(bundle.enc_z.parameters().values()) + list(bundle.decoder.parameters().values())
        g_plain, g_capped = Graph(), Graph()
        plain = encdec_loss(bundle, X, Y, 0.7, g_plain)[0]
        capped = encdec_loss(bundle, X, Y, 0.7, g_capped, cap=1e6)[0]
        assert capped.item() == plain.item()
        grads_plain, grads_capped = g_plain.backward(plain), g_capped.backward(capped)
        for p in params:
            np.testing.assert_array_equal(grads_capped[p], grads_plain[p])

    def test_cap_below_the_loss_leaves_reconstruction_only(self, rng):
        bundle = build_bundle(synth_specs(ModelDims(10, 3, 4, 2)), seed=4)
        bundle.enc_s.freeze()
        X = rng.standard_normal((6, 10))
        Y = np.array([0, 1, 0, 1, 0, 1])
        g = Graph()
        total, l_rec, l_adv, _ = encdec_loss(bundle, X, Y, 0.7, g, cap=0.0)
        assert total.item() == pytest.approx(l_rec.item())
        assert l_adv.item() > 0.0
        grads = g.backward(total)
        g_rec = Graph()
        rec_only = encdec_loss(bundle, X, Y, 0.0, g_rec)[0]
        grads_rec = g_rec.backward(rec_only)
        for p in bundle.enc_z.parameters().values():
            np.testing.assert_allclose(grads[p], grads_rec[p], atol=1e-12)

    def test_label_entropy(self):
        assert label_entropy(np.arange(40) % 4, 4) == pytest.approx(np.log(4))
        assert label_entropy(np.zeros(5, dtype=int), 3) == 0.0

    def test_stock_composite(self):
        assert composite_check(seed=0, points=5) <= 1e-4

    def test_adversary_learns_separable_codes(self):
        dims = ModelDims(4, 2, 2, 2)
        bundle = build_bundle(synth_specs(dims), seed=0)
        X = np.concatenate([np.full((16, 4), -2.0), np.full((16, 4), 2.0)])
        X = X + 0.1 * np.random.default_rng(0).standard_normal(X.shape)
        Y = np.repeat([0, 1], 16)
        z = encode(bundle.enc_z, X)
        assert not np.allclose(z[:16].mean(axis=0), z[16:].mean(axis=0))
        opt = Optimizer.for_networks([bundle.adversary], OptimizerSettings(kind="adam", lr=0.01))
        cfg = TrainConfig()
        for _ in range(300):
            res = adversary_update(bundle, X, Y, cfg, opt)
        assert res.accuracy == 1.0

    def test_adversary_zero_lr(self, small_bundle, rng):
        opt = Optimizer.for_networks([small_bundle.adversary], OptimizerSettings(kind="sgd", lr=0.0))
        before = small_bundle.adversary.digest()
        adversary_update(small_bundle, rng.standard_normal((8, 12)), np.arange(8) % 3, TrainConfig(), opt)
        assert small_bundle.adversary.digest() == before


class TestTwoStep:
    """Both stages end to end"""

    def test_stage2_needs_frozen_encoder(self, rng, small_dims, quick_train):
        specs = synth_specs(small_dims)
        enc_s = build(specs.enc_s, 0)
        with pytest.raises(FrozenParameterError):
            train_stage2(toy_data(rng), enc_s, specs, quick_train)

    def test_short_run(self, rng, small_dims, quick_train):
        data = toy_data(rng)
        bundle, history = train_two_step(data, synth_specs(small_dims), quick_train)
        assert bundle.enc_s.frozen
        assert history.count("encdec") == 3
        assert history.count("adversary") == 3 * quick_train.adversary_batches_per_iter
        assert {"s_train_acc", "final_l_rec", "final_adv_acc"} <= set(history.summary)
        assert history.summary["aborted_iterations"] == 0.0

    def test_bundle_carries_the_scaler(self, rng, small_dims, quick_train):
        data = toy_data(rng)
        data = SampleSet(1e-3 * data.X + 5.0, data.Y, data.n_classes)
        bundle, _ = train_two_step(data, synth_specs(small_dims), quick_train)
        np.testing.assert_allclose(bundle.scaler.mean_, data.X.mean(axis=0))
        S, Z = codes(bundle, data.X)
        np.testing.assert_array_equal(Z, encode(bundle.enc_z, bundle.scaler.transform(data.X)))
        np.testing.assert_array_equal(S, encode(bundle.enc_s, bundle.scaler.transform(data.X)))
        np.testing.assert_allclose(bundle.to_data_space(bundle.to_model_space(data.X)), data.X, rtol=1e-12)

    def test_unscaled_training(self, rng, small_dims, quick_train):
        data = toy_data(rng)
        cfg = quick_train.model_copy(update={"standardize": False})
        bundle, _ = train_two_step(data, synth_specs(small_dims), cfg)
        assert bundle.scaler is None
        np.testing.assert_array_equal(codes(bundle, data.X)[1], encode(bundle.enc_z, data.X))

    def test_settle_refreshes_statistics_only(self, rng, small_dims):
        net = build(synth_specs(small_dims).s_classifier, 0)
        before = net.digest()
        buffers = {k: v.copy() for k, v in net.buffers().items()}
        settle_batchnorm([net], 3.0 + rng.standard_normal((64, small_dims.s_dim)), 16, 2, 0)
        assert net.digest() == before
        assert any(not np.array_equal(v, buffers[k]) for k, v in net.buffers().items())

    def test_deterministic(self, rng, small_dims, quick_train):
        data = toy_data(rng)
        a, ha = train_two_step(data, synth_specs(small_dims), quick_train)
        b, hb = train_two_step(data, synth_specs(small_dims), quick_train)
        for role in ("enc_s", "enc_z", "decoder", "adversary"):
            assert a.networks()[role].digest() == b.networks()[role].digest()
        assert ha.to_frame().equals(hb.to_frame())

    @pytest.mark.slow
    def test_synth1_stage1_is_perfect(self):
        catalog = gen_synth1(32, seed=0)
        data = catalog.draw(2000, [0, 1])
        data = SampleSet(fit_scaler(data.X).transform(data.X), data.Y, data.n_classes)
        cfg = RunConfig(kind="synth1").train
        _, _, history = train_stage1(data, synth_specs(ModelDims(1024, 4, 4, 10)), cfg)
        assert history.summary["s_train_acc"] == 1.0

    @pytest.mark.slow
    def test_huge_lambda_hurts_reconstruction(self):
        catalog = gen_synth1(32, seed=0)
        data = catalog.draw(1000, [0, 1])
        specs = synth_specs(ModelDims(1024, 4, 4, 10))
        base = TrainConfig(stage1_epochs=5, stage2_iterations=300)
        _, plain = train_two_step(data, specs, base.model_copy(update={"lam": 0.0}))
        _, heavy = train_two_step(data, specs, base.model_copy(update={"lam": 1e6}))
        assert heavy.summary["final_l_rec"] > plain.summary["final_l_rec"]

    @pytest.mark.slow
    def test_full_run_keeps_s_frozen_and_schedule(self, shipped_run):
        run = shipped_run("synth1", 0)
        history, bundle, ds = run.history, run.context.bundle, run.context.ds
        assert history.aborted == []
        assert history.count("encdec") == run.cfg.train.stage2_iterations
        assert history.count("adversary") == 3 * history.count("encdec")
        data = SampleSet(bundle.scaler.transform(ds.samples.X), ds.samples.Y, ds.samples.n_classes)
        enc_s, _, _ = train_stage1(data, synth_specs(bundle.dims), run.cfg.train.model_copy(update={"seed": 0}))
        assert enc_s.digest() == bundle.enc_s.digest()
