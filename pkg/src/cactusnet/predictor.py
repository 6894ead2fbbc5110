"""Per-layer applicability predictors.

Small regressors that map a layer's activation tensor to a scalar
predicted applicability in [0, 1].  Convolutional taps get a two-block
CNN (two convs + 2x2 max-pool per block; 32 filters in the first block,
64 in the second) with the kernel size adapted so valid shapes survive
both poolings; flat taps of shape (1, 1, d) get a small MLP instead.
Targets are class-level applicabilities assigned to every image of the
class, trained with mean squared error.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, LeakageError, ShapeMismatchError
from .nn import (LayerSpec, Network, backward, checkpoint_load_with_extra,
                 checkpoint_save, output_shapes, predict, sgd_step)
from .seeding import rng_for

PREDICTOR_MAGIC = b"CNLPRED1"

DENSE_HIDDEN = (64, 32)


def _conv_plan(kernel):
    return [LayerSpec.conv(32, kernel), LayerSpec.relu(),
            LayerSpec.conv(32, kernel), LayerSpec.relu(),
            LayerSpec.maxpool(2),
            LayerSpec.conv(64, kernel), LayerSpec.relu(),
            LayerSpec.conv(64, kernel), LayerSpec.relu(),
            LayerSpec.maxpool(2),
            LayerSpec.flatten(), LayerSpec.dense(1)]


def _dense_plan():
    return [LayerSpec.flatten(),
            LayerSpec.dense(DENSE_HIDDEN[0]), LayerSpec.relu(),
            LayerSpec.dense(DENSE_HIDDEN[1]), LayerSpec.relu(),
            LayerSpec.dense(1)]


@dataclass(frozen=True)
class PredictorSpec:
    tap_shape: tuple      # (h, w, maps); flat taps are (1, 1, outputs)
    plan: str             # "conv" or "dense"
    kernel: int = 0       # conv plan only

    def layer_specs(self):
        return _conv_plan(self.kernel) if self.plan == "conv" else _dense_plan()


def build_predictor(tap_shape) -> PredictorSpec:
    """Choose the predictor plan for a tap of shape (h, w, maps).

    The convolutional plan applies when min(h, w) >= 4, which is exactly
    when two conv blocks with valid pooling fit; the kernel size is the
    largest of 3/2/1 that keeps every stage non-empty.
    """
    tap_shape = tuple(int(d) for d in tap_shape)
    if len(tap_shape) != 3 or any(d < 1 for d in tap_shape):
        raise ShapeMismatchError(
            f"tap shape must be 3 positive extents, got {tap_shape}")
    h, w, _ = tap_shape
    if min(h, w) >= 4:
        for kernel in (3, 2, 1):
            try:
                output_shapes(_conv_plan(kernel), tap_shape)
            except ShapeMismatchError:
                continue
            return PredictorSpec(tap_shape, "conv", kernel)
    return PredictorSpec(tap_shape, "dense")


@dataclass
class TrainingReport:
    epoch_losses: list
    n_samples: int
    final_train_mse: float
    heldout_mse: float | None = None


@dataclass
class PredictorModel:
    """A trained predictor plus the input normalization it was fit with."""
    spec: PredictorSpec
    net: Network
    layer_index: int
    in_mean: float
    in_scale: float
    train_class_ids: tuple = ()
    report: TrainingReport | None = None

    def normalize(self, acts):
        return ((acts - self.in_mean) / self.in_scale).astype(np.float32)


def _stack_samples(spec, samples):
    acts, targets = [], []
    for activation, target in samples:
        arr = np.asarray(activation, dtype=np.float32)
        if arr.ndim == 1:
            arr = arr.reshape(1, 1, -1)
        if arr.shape != spec.tap_shape:
            raise ShapeMismatchError(
                f"activation shape {arr.shape} does not match tap "
                f"{spec.tap_shape}")
        acts.append(arr)
        targets.append(float(target))
    x = np.stack(acts)
    y = np.asarray(targets, dtype=np.float32)
    if y.size and (y.min() < 0.0 or y.max() > 1.0):
        raise DataError("applicability targets must lie in [0, 1]")
    return x, y


def _mse(net, x, y):
    out = predict(net, x)[:, 0]
    return float(np.mean((out.astype(np.float64) - y) ** 2))


def train_predictor(spec: PredictorSpec, samples, cfg, heldout=None,
                    layer_index=-1, train_class_ids=()):
    """Fit the predictor by SGD on mean squared error.

    ``samples`` is a sequence of (activation, target) pairs; ``heldout``,
    when given, is scored after training and recorded in the report.
    """
    x, y = _stack_samples(spec, samples)
    if x.shape[0] < 2:
        raise DataError("need at least 2 samples to fit a predictor")
    if np.unique(y).size < 2:
        warnings.warn("all predictor targets are identical; the fit cannot "
                      "be validated", stacklevel=2)
    mean = float(x.mean())
    scale = float(x.std()) or 1.0
    xn = ((x - mean) / scale).astype(np.float32)

    net = Network.build(spec.layer_specs(), spec.tap_shape,
                        seed=rng_for(cfg.seed, 0xF17).integers(2**31))
    targets = y[:, None].astype(np.float32)
    rng = rng_for(cfg.seed)
    n = xn.shape[0]
    epoch_losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            grads, _ = backward(net, xn[sel], targets[sel], "MSE")
            net = sgd_step(net, grads, cfg)
        epoch_losses.append(_mse(net, xn, y))

    model = PredictorModel(spec, net, layer_index, mean, scale,
                           tuple(train_class_ids))
    report = TrainingReport(epoch_losses, n, epoch_losses[-1])
    if heldout is not None:
        hx, hy = _stack_samples(spec, heldout)
        hn = model.normalize(hx)
        report.heldout_mse = _mse(net, hn, hy)
    model.report = report
    return model, report


def predict_applicability(model: PredictorModel, activation) -> float:
    """Predicted applicability for one activation, clamped to [0, 1]."""
    arr = np.asarray(activation, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr.reshape(1, 1, -1)
    if arr.shape != model.spec.tap_shape:
        raise ShapeMismatchError(
            f"activation shape {arr.shape} does not match tap "
            f"{model.spec.tap_shape}")
    out = predict(model.net, model.normalize(arr[None]))[0, 0]
    return float(np.clip(out, 0.0, 1.0))


def predict_batch(model: PredictorModel, activations) -> np.ndarray:
    arr = np.asarray(activations, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr.reshape(arr.shape[0], 1, 1, -1)
    if arr.shape[1:] != model.spec.tap_shape:
        raise ShapeMismatchError(
            f"activations {arr.shape} do not match tap {model.spec.tap_shape}")
    out = predict(model.net, model.normalize(arr))[:, 0]
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class ClassFidelity:
    class_id: int
    actual_app: float
    mean_predicted: float
    abs_err: float
    n_samples: int


@dataclass
class EvaluationReport:
    rows: list
    overall_mse: float


def evaluate_predictor(model: PredictorModel, held_out) -> EvaluationReport:
    """Score held-out classes the predictor never trained on.

    ``held_out`` maps class_id to (activations, measured class App).
    Reports per-class mean prediction and |mean predicted - actual|,
    plus the per-image MSE over all held-out samples.
    """
    overlap = sorted(set(held_out) & set(model.train_class_ids))
    if overlap:
        raise LeakageError(
            f"held-out classes {overlap} were in the predictor's training set")
    rows = []
    sq_errs = []
    for cid in sorted(held_out):
        acts, actual = held_out[cid]
        preds = predict_batch(model, np.asarray(acts))
        mean_pred = float(preds.mean())
        rows.append(ClassFidelity(cid, float(actual), mean_pred,
                                  abs(mean_pred - float(actual)), len(preds)))
        sq_errs.append((preds.astype(np.float64) - float(actual)) ** 2)
    overall = float(np.mean(np.concatenate(sq_errs))) if sq_errs else 0.0
    return EvaluationReport(rows, overall)


# ---------------------------------------------------------------------
# Checkpoints (shared binary layout, predictor magic)
# ---------------------------------------------------------------------

def save_predictor(model: PredictorModel, path):
    extra = {
        "layer_index": model.layer_index,
        "tap_shape": list(model.spec.tap_shape),
        "plan": model.spec.plan,
        "kernel": model.spec.kernel,
        "in_mean": model.in_mean,
        "in_scale": model.in_scale,
        "train_class_ids": list(model.train_class_ids),
    }
    checkpoint_save(model.net, path, magic=PREDICTOR_MAGIC, extra=extra)


def load_predictor(path) -> PredictorModel:
    net, extra = checkpoint_load_with_extra(path, magic=PREDICTOR_MAGIC)
    spec = PredictorSpec(tuple(extra["tap_shape"]), extra["plan"],
                         extra["kernel"])
    return PredictorModel(spec, net, extra["layer_index"], extra["in_mean"],
                          extra["in_scale"], tuple(extra["train_class_ids"]))
