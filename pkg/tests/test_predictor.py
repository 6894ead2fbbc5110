"""Predictor plans, training signal recovery, clamping, evaluation."""

import numpy as np
import pytest

from cactusnet.errors import DataError, LeakageError, ShapeMismatchError
from cactusnet.nn import Network, TrainConfig
from cactusnet.predictor import (PredictorModel, build_predictor,
                                 evaluate_predictor, load_predictor,
                                 predict_applicability, predict_batch,
                                 save_predictor, train_predictor)


class TestBuildPredictor:
    def test_conv_plan_for_wide_tap(self):
        spec = build_predictor((12, 12, 16))
        assert spec.plan == "conv"
        kinds = [s.kind for s in spec.layer_specs()]
        assert kinds == ["Conv2D", "ReLU", "Conv2D", "ReLU", "MaxPool2D",
                         "Conv2D", "ReLU", "Conv2D", "ReLU", "MaxPool2D",
                         "Flatten", "Dense"]
        filters = [s.filters for s in spec.layer_specs() if s.kind == "Conv2D"]
        assert filters == [32, 32, 64, 64]
        # the plan must actually build
        Network.build(spec.layer_specs(), spec.tap_shape, seed=0)

    def test_dense_plan_for_flat_tap(self):
        spec = build_predictor((1, 1, 32))
        assert spec.plan == "dense"
        widths = [s.units for s in spec.layer_specs() if s.kind == "Dense"]
        assert widths == [64, 32, 1]

    def test_dense_plan_when_pooling_twice_impossible(self):
        assert build_predictor((2, 2, 8)).plan == "dense"

    def test_kernel_adapts_to_tap_size(self):
        assert build_predictor((16, 16, 8)).kernel == 3
        assert build_predictor((12, 12, 16)).kernel == 2
        assert build_predictor((9, 9, 8)).kernel == 1

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeMismatchError):
            build_predictor((0, 4, 8))


def linear_signal_samples(n, dim, seed, shuffle_targets=False, spread=0.6):
    """Targets are a fixed linear function of the mean activation."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.0, 1.0, size=n)
    acts = base[:, None] + rng.normal(0.0, 0.05, size=(n, dim))
    targets = (0.5 - spread / 2) + spread * base
    if shuffle_targets:
        targets = targets[rng.permutation(n)]
    return [(acts[i].astype(np.float32), float(np.clip(targets[i], 0, 1)))
            for i in range(n)]


def closed_form_baseline_mse(samples):
    """Least squares of target on (mean activation, 1)."""
    x = np.array([s[0].mean() for s in samples])
    y = np.array([s[1] for s in samples])
    design = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(np.mean((design @ coef - y) ** 2))


class TestTrainPredictor:
    CFG = TrainConfig(0.05, 40, 16, seed=2)

    def test_recovers_linear_signal(self):
        samples = linear_signal_samples(100, 16, seed=1)
        spec = build_predictor((1, 1, 16))
        _, report = train_predictor(spec, samples, self.CFG)
        baseline = closed_form_baseline_mse(samples)
        assert report.final_train_mse <= 0.01
        assert report.final_train_mse <= baseline + 0.01
        assert report.n_samples == 100

    def test_training_reduces_loss(self):
        samples = linear_signal_samples(100, 16, seed=3)
        spec = build_predictor((1, 1, 16))
        _, report = train_predictor(spec, samples, self.CFG)
        assert report.epoch_losses[-1] < report.epoch_losses[0]

    def test_signal_recovery_on_held_out_data(self):
        # applicability an injective function of the mean activation:
        # held-out MSE must land well under the target variance
        train = linear_signal_samples(120, 16, seed=8, spread=0.9)
        heldout = linear_signal_samples(60, 16, seed=9, spread=0.9)
        spec = build_predictor((1, 1, 16))
        cfg = TrainConfig(0.05, 80, 16, seed=2)
        _, report = train_predictor(spec, train, cfg, heldout=heldout)
        variance = float(np.var([t for _, t in heldout]))
        assert report.heldout_mse <= 0.05 * variance

    def test_permutation_control(self):
        train = linear_signal_samples(100, 16, seed=4, shuffle_targets=True)
        heldout = linear_signal_samples(60, 16, seed=5)
        spec = build_predictor((1, 1, 16))
        _, report = train_predictor(spec, train, self.CFG, heldout=heldout)
        variance = float(np.var([t for _, t in heldout]))
        assert report.heldout_mse >= 0.5 * variance

    def test_degenerate_targets_warn_but_train(self):
        samples = [(np.full(8, 0.3, np.float32), 0.7) for _ in range(10)]
        spec = build_predictor((1, 1, 8))
        with pytest.warns(UserWarning, match="identical"):
            model, _ = train_predictor(spec, samples, TrainConfig(0.05, 2, 4, 0))
        assert model.net is not None

    def test_target_range_enforced(self):
        samples = [(np.zeros(8, np.float32), 1.5)]
        with pytest.raises(DataError, match=r"\[0, 1\]"):
            train_predictor(build_predictor((1, 1, 8)), samples * 3,
                            TrainConfig(0.05, 1, 4, 0))

    def test_activation_shape_mismatch(self):
        spec = build_predictor((1, 1, 8))
        samples = [(np.zeros((2, 2, 2), np.float32), 0.5)] * 4
        with pytest.raises(ShapeMismatchError):
            train_predictor(spec, samples, TrainConfig(0.05, 1, 4, 0))

    def test_conv_plan_trains_too(self):
        rng = np.random.default_rng(6)
        base = rng.uniform(0, 1, size=60)
        acts = (base[:, None, None, None]
                + rng.normal(0, 0.05, size=(60, 6, 6, 3))).astype(np.float32)
        samples = [(acts[i], float(np.clip(0.2 + 0.6 * base[i], 0, 1)))
                   for i in range(60)]
        spec = build_predictor((6, 6, 3))
        assert spec.plan == "conv"
        _, report = train_predictor(spec, samples, TrainConfig(0.05, 30, 8, 7))
        assert report.final_train_mse <= 0.02


def constant_model(bias, tap=(1, 1, 8)):
    spec = build_predictor(tap)
    net = Network.build(spec.layer_specs(), spec.tap_shape, seed=0)
    params = list(net.params)
    last = max(net.param_layers())
    params[last] = {"W": np.zeros_like(params[last]["W"]),
                    "b": np.full_like(params[last]["b"], bias)}
    return PredictorModel(spec, net.with_params(params), 0, 0.0, 1.0)


class TestPredict:
    def test_constant_model_clamps(self):
        act = np.zeros(8, np.float32)
        assert predict_applicability(constant_model(2.0), act) == 1.0
        assert predict_applicability(constant_model(-0.5), act) == 0.0
        assert predict_applicability(constant_model(0.3), act) == pytest.approx(0.3)

    def test_deterministic(self):
        model = constant_model(0.4)
        act = np.random.default_rng(0).random(8).astype(np.float32)
        assert predict_applicability(model, act) == \
            predict_applicability(model, act)

    def test_percent_scale_reference(self):
        # fraction-space error matches the percent-scale row it came from
        assert 100 * abs(0.9670 - 0.9592) == pytest.approx(0.78, abs=1e-9)

    def test_batch_matches_scalar(self):
        model = constant_model(0.4)
        acts = np.random.default_rng(1).random((5, 8)).astype(np.float32)
        batch = predict_batch(model, acts)
        singles = [predict_applicability(model, a) for a in acts]
        np.testing.assert_allclose(batch, singles)


class TestEvaluate:
    def test_constant_model_closed_form(self):
        model = constant_model(0.4)
        rng = np.random.default_rng(2)
        held = {7: (rng.random((20, 8), np.float32), 0.9)}
        report = evaluate_predictor(model, held)
        (row,) = report.rows
        assert row.mean_predicted == pytest.approx(0.4, abs=1e-6)
        assert row.abs_err == pytest.approx(0.5, abs=1e-6)
        assert report.overall_mse == pytest.approx((0.9 - 0.4) ** 2, abs=1e-6)

    def test_leakage_rejected(self):
        model = constant_model(0.4)
        model.train_class_ids = (7,)
        with pytest.raises(LeakageError):
            evaluate_predictor(model, {7: (np.zeros((2, 8), np.float32), 0.5)})


class TestPredictorCheckpoint:
    def test_round_trip(self, tmp_path):
        samples = linear_signal_samples(50, 8, seed=9)
        model, _ = train_predictor(build_predictor((1, 1, 8)), samples,
                                   TrainConfig(0.05, 5, 8, 1),
                                   layer_index=4, train_class_ids=(1, 2))
        path = tmp_path / "pred.ckpt"
        save_predictor(model, path)
        back = load_predictor(path)
        assert back.layer_index == 4
        assert back.train_class_ids == (1, 2)
        act = np.random.default_rng(3).random(8).astype(np.float32)
        assert predict_applicability(back, act) == \
            predict_applicability(model, act)
