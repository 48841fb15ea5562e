"""Initialization, optimizers, losses, and the training loop, checked
against hand arithmetic and independent plain-Python recurrences."""

import math

import numpy as np
import pytest

from satgate.data import SegSample, SyntheticSpec, generate_synthetic
from satgate.networks import build_model, reference_spec
from satgate.tensor import NotFiniteError, ShapeError, Tensor
from satgate.training import (
    Adadelta,
    AdadeltaState,
    SGDMomentum,
    TrainConfig,
    TrainHistory,
    adadelta_step,
    bce_loss,
    dice_loss,
    evaluate,
    glorot_uniform,
    make_optimizer,
    stack_batch,
    train,
)


class TestGlorotUniform:
    def test_fan_3_3_bounded_by_one(self):
        t = glorot_uniform(3, 3, (100000,), np.random.default_rng(0))
        assert np.all(np.abs(t.data) <= 1.0)
        # and actually fills the interval rather than collapsing
        assert t.data.max() > 0.99 and t.data.min() < -0.99

    def test_fan_6_6_bound_is_sqrt_half(self):
        limit = math.sqrt(6.0 / 12.0)
        t = glorot_uniform(6, 6, (100000,), np.random.default_rng(1))
        assert np.all(np.abs(t.data) <= limit)
        assert t.data.max() > limit * 0.999

    def test_same_seed_identical_stream(self):
        a = glorot_uniform(4, 9, (3, 3), np.random.default_rng(7))
        b = glorot_uniform(4, 9, (3, 3), np.random.default_rng(7))
        assert a.data.tobytes() == b.data.tobytes()

    def test_shape_and_dtype(self):
        t = glorot_uniform(2, 2, (2, 5), np.random.default_rng(0))
        assert t.shape == (2, 5) and t.data.dtype == np.float64

    def test_rejects_bad_fans(self):
        with pytest.raises(ValueError):
            glorot_uniform(0, 3, (2,), np.random.default_rng(0))


class TestAdadeltaStep:
    def test_first_step_hand_value(self):
        # from zero accumulators with g=1: E[g2]=0.05,
        # dx = -sqrt(1e-8)/sqrt(0.05+1e-8)
        state = AdadeltaState.create((1,))
        param = np.zeros(1)
        adadelta_step(param, np.ones(1), state)
        expected = -math.sqrt(1e-8) / math.sqrt(0.05 + 1e-8)
        assert abs(param[0] - expected) < 1e-12
        assert abs(state.avg_sq_grad[0] - 0.05) < 1e-15

    def test_first_step_magnitude_formula_any_gradient(self):
        # |dx| = lr*sqrt(eps)*|g|/sqrt((1-rho)*g^2+eps) from a zero state
        for g in (0.3, -2.0, 17.5, 1e-3):
            state = AdadeltaState.create((1,))
            param = np.zeros(1)
            adadelta_step(param, np.array([g]), state)
            expected = math.sqrt(1e-8) * abs(g) / math.sqrt(0.05 * g * g + 1e-8)
            assert abs(abs(param[0]) - expected) < 1e-12
            assert np.sign(param[0]) == -np.sign(g)

    def test_zero_gradient_leaves_param_and_decays_accumulators(self):
        state = AdadeltaState.create((2,))
        state.avg_sq_grad[:] = 1.0
        state.avg_sq_update[:] = 0.5
        param = np.array([3.0, -1.0])
        adadelta_step(param, np.zeros(2), state)
        assert np.array_equal(param, [3.0, -1.0])
        assert np.allclose(state.avg_sq_grad, 0.95)
        assert np.allclose(state.avg_sq_update, 0.475)

    def test_identical_gradients_identical_updates(self):
        state = AdadeltaState.create((4,))
        param = np.zeros(4)
        adadelta_step(param, np.full(4, 0.7), state)
        assert np.all(param == param[0])

    def test_multi_step_matches_plain_python_recurrence(self):
        # independent scalar re-evaluation of the update rule, including a
        # nonzero learning-rate decay schedule lr/(1+decay*steps)
        rho, eps, lr, decay = 0.95, 1e-8, 0.5, 0.1
        state = AdadeltaState.create((1,), rho=rho, epsilon=eps, lr=lr,
                                     decay=decay)
        param = np.array([2.0])
        grads = [1.0, -0.3, 0.8, 0.0, 2.5, -1.1, 0.05]
        p, eg, eu = 2.0, 0.0, 0.0
        for step, g in enumerate(grads):
            adadelta_step(param, np.array([g]), state)
            eg = rho * eg + (1 - rho) * g * g
            dx = -math.sqrt(eu + eps) / math.sqrt(eg + eps) * g
            eu = rho * eu + (1 - rho) * dx * dx
            p += lr / (1 + decay * step) * dx
            assert abs(param[0] - p) < 1e-12
        assert state.steps == len(grads)

    def test_accumulators_stay_nonnegative(self):
        state = AdadeltaState.create((3,))
        param = np.zeros(3)
        rng = np.random.default_rng(0)
        for _ in range(100):
            adadelta_step(param, rng.normal(size=3), state)
        assert np.all(state.avg_sq_grad >= 0)
        assert np.all(state.avg_sq_update >= 0)

    def test_non_finite_gradient_rejected(self):
        state = AdadeltaState.create((1,))
        with pytest.raises(NotFiniteError):
            adadelta_step(np.zeros(1), np.array([np.nan]), state)
        with pytest.raises(NotFiniteError):
            adadelta_step(np.zeros(1), np.array([np.inf]), state)

    def test_shape_mismatch_rejected(self):
        state = AdadeltaState.create((2,))
        with pytest.raises(ShapeError):
            adadelta_step(np.zeros(2), np.zeros(3), state)


class TestSGDMomentum:
    def test_hand_recurrence(self):
        # v <- mu*v + g ; p <- p - lr*v, three steps with constant g=1,
        # mu=0.9, lr=0.1: v = 1, 1.9, 2.71; p = 1-0.1*(1+1.9+2.71)
        from satgate.tensor import Parameter

        p = Parameter("w", Tensor(np.ones(1), requires_grad=True))
        opt = SGDMomentum([p], lr=0.1, momentum=0.9)
        for _ in range(3):
            p.tensor.grad = np.ones(1)
            opt.step()
        assert abs(p.data[0] - (1.0 - 0.1 * (1 + 1.9 + 2.71))) < 1e-12

    def test_velocity_buffer_registered_per_parameter(self):
        from satgate.tensor import Parameter

        p = Parameter("layer.w", Tensor(np.zeros(3), requires_grad=True))
        opt = SGDMomentum([p])
        names = [name for name, _ in opt.buffers()]
        assert names == ["layer.w.velocity"]


class TestMakeOptimizer:
    def test_kinds(self):
        model = build_model(reference_spec("unet", "sat"), 0)
        params = model.parameters()
        assert make_optimizer(TrainConfig(optimizer="adadelta"), params).kind \
            == "adadelta"
        assert make_optimizer(TrainConfig(optimizer="sgd"), params).kind \
            == "sgd_momentum"

    def test_only_trainable_parameters_tracked(self):
        model = build_model(reference_spec("unet", "sat"), 0)
        opt = make_optimizer(TrainConfig(), model.parameters())
        tracked = {p.name for p in opt.parameters}
        assert not any(name.endswith("running_mean") for name in tracked)

    def test_scalars_roundtrip(self):
        model = build_model(reference_spec("unet", "org"), 0)
        opt = make_optimizer(TrainConfig(optimizer="sgd"), model.parameters())
        clone = make_optimizer(TrainConfig(optimizer="sgd"), model.parameters())
        clone.set_scalars(opt.scalars())
        assert clone.scalars() == opt.scalars()


class TestDiceLoss:
    def test_hand_value_one_third(self):
        # sigmoid(0)=0.5 at both positions, target (1,0):
        # 1 - (2*0.5+1)/(1+1+1) = 1/3
        loss = dice_loss(Tensor(np.zeros(2), requires_grad=True),
                         Tensor(np.array([1.0, 0.0])))
        assert abs(loss.item() - 1.0 / 3.0) < 1e-12

    def test_perfect_match_below_percent(self):
        t = np.zeros(25)
        t[:12] = 1.0
        logits = np.where(t == 1.0, 15.0, -15.0)
        loss = dice_loss(Tensor(logits), Tensor(t))
        assert loss.item() < 0.01

    def test_empty_mask_strong_negatives_near_zero(self):
        loss = dice_loss(Tensor(np.full(30, -20.0)), Tensor(np.zeros(30)))
        assert loss.item() < 0.01

    def test_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            z = rng.normal(scale=5.0, size=40)
            t = (rng.random(40) > 0.5).astype(float)
            v = dice_loss(Tensor(z), Tensor(t)).item()
            assert 0.0 <= v <= 1.0

    def test_gradient_matches_finite_differences(self):
        from satgate.tensor import finite_diff_grad

        rng = np.random.default_rng(3)
        z = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        t = Tensor((rng.random((4, 3)) > 0.5).astype(float))
        loss = dice_loss(z, t)
        loss.backward()
        num = finite_diff_grad(lambda x: dice_loss(x, t), z)
        assert np.allclose(z.grad, num.data, rtol=1e-6, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestBceLoss:
    def test_logit_zero_gives_ln2_both_targets(self):
        for target in (0.0, 1.0):
            loss = bce_loss(Tensor(np.zeros(5)), Tensor(np.full(5, target)))
            assert abs(loss.item() - math.log(2.0)) < 1e-12

    def test_saturated_correct_logits_near_zero(self):
        t = np.array([1.0, 0.0, 1.0, 0.0])
        z = np.where(t == 1.0, 20.0, -20.0)
        assert bce_loss(Tensor(z), Tensor(t)).item() < 1e-6

    def test_extreme_logits_stay_finite(self):
        v = bce_loss(Tensor(np.array([800.0, -800.0])),
                     Tensor(np.array([0.0, 1.0]))).item()
        assert np.isfinite(v) and v > 100

    def test_gradient_matches_finite_differences(self):
        from satgate.tensor import finite_diff_grad

        rng = np.random.default_rng(5)
        z = Tensor(rng.normal(size=7), requires_grad=True)
        t = Tensor((rng.random(7) > 0.5).astype(float))
        loss = bce_loss(z, t)
        loss.backward()
        num = finite_diff_grad(lambda x: bce_loss(x, t), z)
        assert np.allclose(z.grad, num.data, rtol=1e-6, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bce_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros(4)))


class TestTrainConfig:
    def test_sgd_alias_canonicalized(self):
        assert TrainConfig(optimizer="sgd").optimizer == "sgd_momentum"

    def test_rejects_unknown_optimizer_and_loss(self):
        with pytest.raises(ValueError):
            TrainConfig(optimizer="adam")
        with pytest.raises(ValueError):
            TrainConfig(loss="hinge")

    def test_rejects_nonpositive_epochs(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)


def _tiny_dataset(n, extent=16, seed=0, sigma=0.2):
    return generate_synthetic(SyntheticSpec(
        spatial_rank=2, extent=extent, n_samples=n, shapes=("blobs",),
        noise_sigma=sigma, seed=seed))


class TestEvaluate:
    def test_means_match_per_sample_average(self):
        model = build_model(reference_spec("unet", "sat"), 0)
        samples = _tiny_dataset(5)
        per, means = evaluate(model, samples)
        assert len(per) == 5
        for key in ("dice", "fpr", "fnr"):
            assert means[key] == pytest.approx(
                np.mean([r[key] for r in per]))

    def test_chunk_size_does_not_change_results(self):
        model = build_model(reference_spec("unet", "sat"), 0)
        samples = _tiny_dataset(5)
        per_small, _ = evaluate(model, samples, chunk=2)
        per_big, _ = evaluate(model, samples, chunk=8)
        assert per_small == per_big


class TestStackBatch:
    def test_batch_axis_is_last(self):
        samples = _tiny_dataset(3)
        x, y = stack_batch(samples)
        assert x.shape == (16, 16, 1, 3) and y.shape == x.shape
        assert np.array_equal(x[..., 0, 1], samples[1].image[..., 0])


class TestTrain:
    def test_smoke_one_epoch(self):
        model = build_model(reference_spec("unet", "sat"), 0)
        hist = train(model, _tiny_dataset(4), _tiny_dataset(2, seed=1),
                     TrainConfig(epochs=1, batch_size=2))
        assert len(hist.rows) == 1
        row = hist.rows[0]
        assert set(hist.columns) == set(row)
        assert all(np.isfinite(v) for v in row.values())

    def test_history_length_equals_epochs(self):
        model = build_model(reference_spec("unet", "org"), 0)
        hist = train(model, _tiny_dataset(4), _tiny_dataset(2, seed=1),
                     TrainConfig(epochs=3, batch_size=4))
        assert [r["epoch"] for r in hist.rows] == [0, 1, 2]

    def test_same_seed_bit_identical_parameters(self):
        results = []
        for _ in range(2):
            model = build_model(reference_spec("unet", "sat"), 2)
            train(model, _tiny_dataset(6), _tiny_dataset(2, seed=1),
                  TrainConfig(epochs=2, batch_size=3, seed=9))
            results.append({p.name: p.data.tobytes()
                            for p in model.parameters()})
        assert results[0] == results[1]

    def test_dataset_not_mutated(self):
        samples = _tiny_dataset(4)
        before = [(s.image.tobytes(), s.mask.tobytes()) for s in samples]
        model = build_model(reference_spec("unet", "sat"), 0)
        train(model, samples, _tiny_dataset(2, seed=1),
              TrainConfig(epochs=1, batch_size=2))
        after = [(s.image.tobytes(), s.mask.tobytes()) for s in samples]
        assert before == after

    def test_fixed_batch_loss_decreases_over_50_steps(self):
        # median over 5 seeds of the loss after 50 ADADELTA steps on one
        # fixed, well-separated batch must come down from the start
        firsts, lasts = [], []
        for seed in range(5):
            model = build_model(reference_spec("unet", "sat"), seed)
            samples = _tiny_dataset(4, sigma=0.1, seed=seed)
            x, y = stack_batch(samples)
            opt = Adadelta(model.trainable_parameters())
            losses = []
            for _ in range(50):
                opt.zero_grad()
                loss = dice_loss(model.forward(Tensor(x), training=True),
                                 Tensor(y))
                losses.append(loss.item())
                loss.backward()
                opt.step()
            firsts.append(losses[0])
            lasts.append(losses[-1])
        assert np.median(lasts) < np.median(firsts)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_naming_epoch_and_batch(self):
        samples = _tiny_dataset(4)
        samples[0].image[0, 0, 0] = np.inf
        model = build_model(reference_spec("unet", "sat"), 0)
        with pytest.raises(NotFiniteError, match=r"epoch 0, batch 0"):
            train(model, samples, _tiny_dataset(2, seed=1),
                  TrainConfig(epochs=1, batch_size=4))

    def test_empty_sets_rejected(self):
        model = build_model(reference_spec("unet", "sat"), 0)
        with pytest.raises(ValueError):
            train(model, [], _tiny_dataset(1), TrainConfig())
        with pytest.raises(ValueError):
            train(model, _tiny_dataset(1), [], TrainConfig())


class TestTrainHistory:
    def test_column_layout(self):
        hist = TrainHistory(["gate.skip0", "gate.skip1"])
        assert hist.columns == [
            "epoch", "train_loss", "val_dice", "val_fpr", "val_fnr",
            "channels_off.gate.skip0", "channels_off.gate.skip1"]

    def test_csv_bytes_deterministic(self, tmp_path):
        hist = TrainHistory(["g"])
        hist.rows.append({"epoch": 0, "train_loss": 1 / 3, "val_dice": 0.5,
                          "val_fpr": 0.25, "val_fnr": 0.125,
                          "channels_off.g": 0.0})
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        hist.to_csv(str(a))
        hist.to_csv(str(b))
        assert a.read_bytes() == b.read_bytes()
        text = a.read_text()
        assert text.splitlines()[0].startswith("epoch,train_loss,val_dice")
        # float cells use repr, so the exact value survives a round trip
        assert repr(1 / 3) in text
