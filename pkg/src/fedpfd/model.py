"""Multi-task CNN fault-diagnosis model, adaptive sensitive-cost loss and metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dsp import DESK, FeatureTable, Profile
from .errors import DataError, DomainError, StructuralError
from .nn import SGD, LayerSpec, Network, ParamSet, head_tag

log = logging.getLogger(__name__)

F1_FLOOR = 0.05
THRESHOLD = 0.5
DEFAULT_LR = 0.01
FAULT_NAMES = ("unbalance", "misalignment", "bearing", "friction")


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArchConfig:
    """Widths of the layer table; everything else follows from the profile."""

    branch_channels: tuple[int, int] = (4, 8)
    scalogram_channels: tuple[int, int] = (4, 8)
    feature_length: int = 16        # length every branch is reduced to
    scalogram_rows: int = 2         # scalogram height after the branch
    shared_channels: int = 16
    head_units: int = 32
    output_gain: float = 0.0        # heads start at p = 0.5 for every input


ARCH = {
    "desk": ArchConfig(),
    "paper-shape": ArchConfig(branch_channels=(8, 16), scalogram_channels=(4, 8),
                              feature_length=32, scalogram_rows=4,
                              shared_channels=32, head_units=56),
}


def _split_factor(r: int) -> tuple[int, int]:
    """Split a reduction factor into two pool sizes, the first >= sqrt(r)."""
    for p in range(math.ceil(math.sqrt(r)), r + 1):
        if r % p == 0:
            return p, r // p
    return r, 1


def _reduction(n: int, target: int, what: str) -> int:
    if n % target:
        raise StructuralError(f"{what}: size {n} not divisible by target {target}")
    return n // target


def _branch_1d(prefix: str, src: str, length: int, arch: ArchConfig) -> list[LayerSpec]:
    r = _reduction(length, arch.feature_length, prefix)
    stride = max(1, r // 16)
    p1, p2 = _split_factor(r // stride)
    c1, c2 = arch.branch_channels
    return [
        LayerSpec("conv1d", f"{prefix}.conv1", (src,),
                  dict(out_channels=c1, kernel=2 * stride + 1, stride=stride, pad=stride)),
        LayerSpec("maxpool", f"{prefix}.pool1", hp=dict(size=p1)),
        LayerSpec("relu", f"{prefix}.relu1"),
        LayerSpec("conv1d", f"{prefix}.conv2", hp=dict(out_channels=c2, kernel=5, pad=2)),
        LayerSpec("maxpool", f"{prefix}.pool2", hp=dict(size=p2)),
        LayerSpec("relu", f"{prefix}.relu2"),
    ]


def _branch_2d(prefix: str, src: str, shape: tuple[int, int], arch: ArchConfig) -> list[LayerSpec]:
    rh = _reduction(shape[0], arch.scalogram_rows, prefix)
    rw = _reduction(shape[1], arch.feature_length, prefix)
    # the first conv is strided by 2 on both axes when the reductions allow it
    stride = 2 if rh % 2 == 0 and rw % 2 == 0 else 1
    h1, h2 = _split_factor(rh // stride)
    w1, w2 = _split_factor(rw // stride)
    c1, c2 = arch.scalogram_channels
    return [
        LayerSpec("conv2d", f"{prefix}.conv1", (src,),
                  dict(out_channels=c1, kernel=3, stride=stride, pad=1)),
        LayerSpec("maxpool", f"{prefix}.pool1", hp=dict(size=(h1, w1))),
        LayerSpec("relu", f"{prefix}.relu1"),
        LayerSpec("conv2d", f"{prefix}.conv2", hp=dict(out_channels=c2, kernel=3, pad=1)),
        LayerSpec("maxpool", f"{prefix}.pool2", hp=dict(size=(h2, w2))),
        LayerSpec("relu", f"{prefix}.relu2"),
    ]


def build_layers(profile: Profile, n_faults: int, arch: ArchConfig) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    branch_outs = []
    for c, n in enumerate(profile.signal_lengths):
        layers += _branch_1d(f"sig{c}", f"signal{c}", n, arch)
        branch_outs.append(layers[-1].name)
    for c, n in enumerate(profile.spectrum_bins):
        layers += _branch_1d(f"spec{c}", f"spectrum{c}", n, arch)
        branch_outs.append(layers[-1].name)
    for c, shape in enumerate(profile.scalogram_shapes):
        layers += _branch_2d(f"cwt{c}", f"scalogram{c}", shape, arch)
        branch_outs.append(layers[-1].name)
    layers += [
        LayerSpec("concat", "fuse", tuple(branch_outs)),
        LayerSpec("conv1d", "shared.conv", hp=dict(out_channels=arch.shared_channels,
                                                   kernel=3, pad=1)),
        LayerSpec("maxpool", "shared.pool", hp=dict(size=2)),
        LayerSpec("relu", "shared.relu"),
        LayerSpec("flatten", "features"),
    ]
    outs = []
    for i in range(n_faults):
        tag = head_tag(i)
        layers += [
            LayerSpec("dense", f"head{i}.fc1", ("features",), dict(units=arch.head_units), tag),
            LayerSpec("relu", f"head{i}.relu", partition=tag),
            LayerSpec("dense", f"head{i}.fc2", hp=dict(units=1, init_gain=arch.output_gain),
                      partition=tag),
            LayerSpec("sigmoid", f"head{i}.out", partition=tag),
        ]
        outs.append(f"head{i}.out")
    layers.append(LayerSpec("concat", "outputs", tuple(outs)))
    return layers


@dataclass
class DiagnosisModel:
    """Network graph plus its current parameters."""

    network: Network
    params: ParamSet
    n_faults: int
    profile: Profile

    @property
    def num_params(self) -> int:
        return self.params.num_params

    def copy(self) -> "DiagnosisModel":
        return DiagnosisModel(self.network, self.params.copy(), self.n_faults, self.profile)


def build_network(profile: Profile = DESK, n_faults: int = 4,
                  arch: ArchConfig | None = None) -> Network:
    arch = arch or ARCH.get(profile.name, ArchConfig())
    return Network(profile.input_shapes(), build_layers(profile, n_faults, arch))


def build_model(profile: Profile = DESK, n_faults: int = 4, seed: int = 0,
                arch: ArchConfig | None = None) -> DiagnosisModel:
    if n_faults < 1:
        raise StructuralError("need at least one fault head")
    net = build_network(profile, n_faults, arch)
    params = net.init_params(seed)
    log.debug("built %s model with %d parameters", profile.name, params.num_params)
    return DiagnosisModel(net, params, n_faults, profile)


def predict(model: DiagnosisModel, inputs: Sequence[np.ndarray], batch_size: int = 256) -> np.ndarray:
    """Fault probabilities, shape ``(n, N)``."""
    n = inputs[0].shape[0]
    out = []
    for start in range(0, n, batch_size):
        batch = [a[start:start + batch_size] for a in inputs]
        y, _ = model.network.forward(model.params, batch, keep_cache=False)
        out.append(y)
    if not out:
        return np.zeros((0, model.n_faults), dtype=np.float32)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# Adaptive sensitive cost
# ---------------------------------------------------------------------------


@dataclass
class TaskState:
    """Per-task F1 from the previous epoch and training-partition fault rates."""

    f1: np.ndarray
    rates: np.ndarray

    @classmethod
    def initial(cls, rates: Sequence[float]) -> "TaskState":
        rates = np.asarray(rates, dtype=np.float64)
        return cls(np.ones_like(rates), rates)

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "TaskState":
        return cls.initial(np.asarray(labels, dtype=np.float64).mean(axis=0))

    def floored(self) -> np.ndarray:
        return np.clip(np.asarray(self.f1, dtype=np.float64), F1_FLOOR, 1.0)


def sensitive_coefficients(state: TaskState) -> np.ndarray:
    """T_i = (sum_j f_j) / f_i with F1 floored at 0.05."""
    f = state.floored()
    return f.sum() / f


def cost_weights(labels: np.ndarray, state: TaskState) -> np.ndarray:
    """C = (l * (1 - r) + 1) * T, broadcast over samples."""
    r = np.asarray(state.rates, dtype=np.float64)
    if np.any(r >= 1) or np.any(r < 0):
        raise DomainError(f"fault rates must lie in [0, 1), got {r}")
    t = sensitive_coefficients(state)
    return (np.asarray(labels, dtype=np.float64) * (1 - r) + 1) * t


def adaptive_loss(outputs: np.ndarray, labels: np.ndarray, state: TaskState):
    """Weighted squared error and its gradient w.r.t. the outputs.

    Returns ``(loss, weights, grad)`` with the weights held constant in the
    gradient: ``grad = 2 (y - l) C``.
    """
    y = np.asarray(outputs, dtype=np.float64)
    l = np.asarray(labels, dtype=np.float64)
    if y.shape != l.shape:
        raise StructuralError(f"outputs {y.shape} and labels {l.shape} differ in shape")
    c = cost_weights(l, state)
    diff = y - l
    loss = float(np.sum(diff * diff * c))
    return loss, c, 2.0 * diff * c


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class TaskMetrics:
    tp: np.ndarray
    tn: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    accuracy: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return self.tp + self.fn


def metrics_from_counts(tp, tn, fp, fn) -> TaskMetrics:
    tp, tn, fp, fn = (np.atleast_1d(np.asarray(v, dtype=np.int64)) for v in (tp, tn, fp, fn))
    total = tp + tn + fp + fn
    with np.errstate(divide="ignore", invalid="ignore"):
        acc = np.where(total > 0, (tp + tn) / np.maximum(total, 1), 0.0)
        prec = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        rec = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
        denom = prec + rec
        f1 = np.where(denom > 0, 2 * prec * rec / np.where(denom > 0, denom, 1), 0.0)
    return TaskMetrics(tp, tn, fp, fn, acc, prec, rec, f1)


def metrics(preds: np.ndarray, labels: np.ndarray, threshold: float = THRESHOLD) -> TaskMetrics:
    """Per-task accuracy, precision, recall and F1 at a fixed threshold."""
    p = np.atleast_2d(np.asarray(preds)) > threshold
    l = np.atleast_2d(np.asarray(labels)).astype(bool)
    if p.shape != l.shape:
        raise StructuralError(f"predictions {p.shape} and labels {l.shape} differ in shape")
    tp = np.sum(p & l, axis=0)
    tn = np.sum(~p & ~l, axis=0)
    fp = np.sum(p & ~l, axis=0)
    fn = np.sum(~p & l, axis=0)
    return metrics_from_counts(tp, tn, fp, fn)


def mean_f1(m: TaskMetrics) -> float | None:
    """Mean F1 over tasks with at least one positive; ``None`` if there are none."""
    has_pos = m.positives > 0
    if not has_pos.any():
        return None
    return float(m.f1[has_pos].mean())


def epoch_f1(m: TaskMetrics) -> np.ndarray:
    """F1 used to update the task state; tasks without positives stay neutral (1.0)."""
    return np.where(m.positives > 0, m.f1, 1.0)


# ---------------------------------------------------------------------------
# Local training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParamSet
    mean_f1: float | None
    state: TaskState
    history: list[dict] = field(default_factory=list)

    @property
    def upload_f1(self) -> float:
        return F1_FLOOR if self.mean_f1 is None else max(self.mean_f1, F1_FLOOR)


def train_local(model: DiagnosisModel, data: FeatureTable, labels: np.ndarray, epochs: int,
                batch_size: int = 16, lr: float = DEFAULT_LR, momentum: float = 0.9,
                state: TaskState | None = None, rng: np.random.Generator | None = None
                ) -> TrainResult:
    """Minibatch SGD on the adaptive loss for ``epochs`` epochs.

    Task F1 scores are re-measured on the training set after every epoch and
    fed into the next epoch's sensitive coefficients.  Each minibatch gradient is divided by the sum of
    its cost weights: the direction is that of the adaptive loss, while the
    step length no longer grows with the sensitive coefficients or the batch
    size.  ``model.params`` is updated in place.
    """
    labels = np.asarray(labels, dtype=np.float32)
    n = labels.shape[0]
    if n == 0 or len(data) != n:
        raise DataError(f"cannot build batches from {len(data)} records / {n} labels")
    if batch_size < 1:
        raise DataError("batch size must be positive")
    state = state or TaskState.from_labels(labels)
    rng = rng or np.random.default_rng(0)
    net, params = model.network, model.params
    opt = SGD(lr, momentum)
    history = []
    if epochs <= 0:
        m = metrics(predict(model, data.inputs), labels)
        return TrainResult(params, mean_f1(m), state, history)
    m = None
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            rows = order[start:start + batch_size]
            batch = [a[rows] for a in data.inputs]
            y, cache = net.forward(params, batch)
            loss, c, grad = adaptive_loss(y, labels[rows], state)
            total += loss
            grads = net.backward(cache, params, (grad / c.sum()).astype(y.dtype))
            opt.step(params, grads)
        m = metrics(predict(model, data.inputs), labels)
        state = TaskState(epoch_f1(m), state.rates)
        history.append({"epoch": epoch, "loss": total, "f1": m.f1.tolist()})
    return TrainResult(params, mean_f1(m), state, history)


def write_epoch_log(path, rows: Sequence[dict], fault_types: Sequence[str] = FAULT_NAMES) -> None:
    """CSV of training epochs: any leading id columns, then epoch, loss and per-task F1."""
    rows = list(rows)
    ids = [k for k in (rows[0] if rows else {}) if k not in ("epoch", "loss", "f1")]
    header = ids + ["epoch", "loss"] + [f"f1_{f}" for f in fault_types]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r[k] for k in ids] + [r["epoch"], repr(float(r["loss"]))]
                       + [repr(float(v)) for v in r["f1"]])
