"""Dense softplus network surrogate of the parameter-to-observation map.

Inputs and outputs are standardized with statistics fitted on the training
split; the network itself works in normalized space and ``forward`` maps
back to physical observations.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import NumericError, SchemaError, TrainingError, ValidationError

NET_FORMAT = "elastid-net-v1"
DEFAULT_LAYOUT = (2, 200, 100, 50)


def softplus(s):
    """``ln(1 + e^s)``, overflow-safe."""
    return np.logaddexp(0.0, s)


def softplus_derivative(s):
    return expit(s)


def _identity(s):
    return s


def _one(s):
    return np.ones_like(s)


ACTIVATIONS = {
    "softplus": (softplus, softplus_derivative),
    "identity": (_identity, _one),
}


@dataclass
class NormalizationStats:
    input_mean: np.ndarray
    input_scale: np.ndarray
    output_mean: np.ndarray
    output_scale: np.ndarray

    def __post_init__(self):
        for name in ("input_mean", "input_scale", "output_mean", "output_scale"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.input_scale <= 0) or np.any(self.output_scale <= 0):
            raise ValidationError("normalization scales must be positive")

    @classmethod
    def identity(cls, n_in: int, n_out: int) -> "NormalizationStats":
        return cls(np.zeros(n_in), np.ones(n_in), np.zeros(n_out), np.ones(n_out))

    def normalize_inputs(self, p):
        return (np.asarray(p, dtype=float) - self.input_mean) / self.input_scale

    def denormalize_inputs(self, q):
        return np.asarray(q, dtype=float) * self.input_scale + self.input_mean

    def normalize_outputs(self, y):
        return (np.asarray(y, dtype=float) - self.output_mean) / self.output_scale

    def denormalize_outputs(self, y):
        return np.asarray(y, dtype=float) * self.output_scale + self.output_mean


@dataclass
class DenseNetwork:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    norm: NormalizationStats
    hidden_activation: str = "softplus"
    output_activation: str = "identity"

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValidationError("number of weight matrices does not match the layout")
        for l, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            shape = (self.layer_sizes[l], self.layer_sizes[l - 1])
            if w.shape != shape or b.shape != (shape[0],):
                raise ValidationError(f"layer {l}: expected W {shape} and b ({shape[0]},), got {w.shape}, {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {l} has non-finite parameters")
        for act in (self.hidden_activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ValidationError(f"unknown activation {act!r}")
        if self.norm.input_mean.shape != (self.layer_sizes[0],) or self.norm.output_mean.shape != (
            self.layer_sizes[-1],
        ):
            raise ValidationError("normalization statistics do not match the layout")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def activation(self, l: int):
        """Activation pair of layer ``l`` (1-based)."""
        name = self.output_activation if l == self.n_layers else self.hidden_activation
        return ACTIVATIONS[name]

    def parameters(self) -> list[np.ndarray]:
        return [x for pair in zip(self.weights, self.biases) for x in pair]

    def with_parameters(self, params) -> "DenseNetwork":
        params = list(params)
        return DenseNetwork(self.layer_sizes, params[0::2], params[1::2], self.norm,
                            self.hidden_activation, self.output_activation)

    def copy(self) -> "DenseNetwork":
        return self.with_parameters([x.copy() for x in self.parameters()])


@dataclass
class ForwardTrace:
    z: list[np.ndarray]  # z[l-1] is the pre-activation of layer l
    a: list[np.ndarray]  # a[0] is the normalized input, a[L] the normalized output


@dataclass
class Dataset:
    inputs: np.ndarray
    outputs: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        if len(self.inputs) != len(self.outputs):
            raise ValidationError(f"{len(self.inputs)} input rows but {len(self.outputs)} output rows")

    def __len__(self):
        return len(self.inputs)


def init_network(layout=DEFAULT_LAYOUT, seed: int = 0, hidden_activation="softplus",
                 output_activation="identity") -> DenseNetwork:
    """Uniform weights in ``+-1/sqrt(fan_in)``, zero biases, identity normalization."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(layout[:-1], layout[1:]):
        bound = 1.0 / math.sqrt(n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    norm = NormalizationStats.identity(layout[0], layout[-1])
    return DenseNetwork(tuple(layout), weights, biases, norm, hidden_activation, output_activation)


def forward_normalized(net: DenseNetwork, x) -> tuple[np.ndarray, ForwardTrace]:
    """Propagate normalized inputs ``x`` (shape ``(n_in,)`` or ``(batch, n_in)``)."""
    a = np.asarray(x, dtype=float)
    trace = ForwardTrace([], [a])
    for l, (w, b) in enumerate(zip(net.weights, net.biases), start=1):
        z = a @ w.T + b
        a = net.activation(l)[0](z)
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite activation in layer {l}")
        trace.z.append(z)
        trace.a.append(a)
    return a, trace


def forward(net: DenseNetwork, p) -> tuple[np.ndarray, ForwardTrace]:
    """Evaluate the surrogate at physical parameters ``p``; returns physical observations."""
    out, trace = forward_normalized(net, net.norm.normalize_inputs(p))
    return net.norm.denormalize_outputs(out), trace


def predict(net: DenseNetwork, p) -> np.ndarray:
    """Fast trace-free evaluation."""
    a = (np.asarray(p, dtype=float) - net.norm.input_mean) / net.norm.input_scale
    last = net.n_layers
    for l, (w, b) in enumerate(zip(net.weights, net.biases), start=1):
        a = a @ w.T + b
        if l < last or net.output_activation != "identity":
            a = net.activation(l)[0](a)
    return a * net.norm.output_scale + net.norm.output_mean


class FoldedEvaluator:
    """Single-point evaluator with the normalization folded into the weights.

    Same map as ``predict`` up to rounding; avoids per-call normalization and
    layer bookkeeping, which dominates the cost of one small evaluation.
    """

    def __init__(self, net: DenseNetwork):
        if net.output_activation != "identity":
            raise ValidationError("folding requires an identity output layer")
        n = net.norm
        ws = [w.copy() for w in net.weights]
        bs = [b.copy() for b in net.biases]
        ws[0] = ws[0] / n.input_scale
        bs[0] = bs[0] - ws[0] @ n.input_mean
        ws[-1] = ws[-1] * n.output_scale[:, None]
        bs[-1] = bs[-1] * n.output_scale + n.output_mean
        if net.hidden_activation != "softplus":
            raise ValidationError("folding supports softplus hidden layers only")
        self._layers = [(np.ascontiguousarray(w), b, np.empty(len(b))) for w, b in zip(ws[:-1], bs[:-1])]
        self._w_out = np.ascontiguousarray(ws[-1])
        self._b_out = bs[-1]

    def __call__(self, p) -> np.ndarray:
        a = np.asarray(p, dtype=float)
        for w, b, buf in self._layers:
            np.dot(w, a, out=buf)
            np.add(buf, b, out=buf)
            a = np.logaddexp(0.0, buf, out=buf)
        return self._w_out @ a + self._b_out


def loss_normalized(net: DenseNetwork, x, y) -> float:
    out, _ = forward_normalized(net, x)
    return 0.5 * float(np.mean(np.sum((y - out) ** 2, axis=1)))


def loss(net: DenseNetwork, dataset: Dataset) -> float:
    """Least-squares loss ``1/(2n) sum |C_i - N(p_i)|^2`` in normalized output space."""
    if len(dataset) == 0:
        raise ValidationError("empty dataset")
    x = net.norm.normalize_inputs(dataset.inputs)
    y = net.norm.normalize_outputs(dataset.outputs)
    return loss_normalized(net, x, y)


def fit_normalization(dataset: Dataset, constant_rtol: float = 1e-5, strict: bool = False,
                      output_groups=None, input_names=("E", "nu"), output_names=None) -> NormalizationStats:
    """Per-column mean and standard deviation.

    An input column with zero variance is an error. An output column whose
    standard deviation is below ``constant_rtol`` times the largest standard
    deviation of its group (columns sharing a physical unit) is numerically
    constant, e.g. a measurement that vanishes by symmetry. Such columns keep
    unit scale unless ``strict`` is set.
    """
    n = len(dataset)
    if n < 2:
        raise ValidationError("at least two samples are required to fit normalization")
    in_mean = dataset.inputs.mean(axis=0)
    in_std = dataset.inputs.std(axis=0)
    for j, s in enumerate(in_std):
        if not s > 0:
            name = input_names[j] if j < len(input_names) else f"input {j}"
            raise ValidationError(f"input column {name!r} has zero variance")
    out_mean = dataset.outputs.mean(axis=0)
    out_std = dataset.outputs.std(axis=0)
    if output_groups is None:
        output_groups = [np.arange(len(out_std))]
    floor = np.zeros_like(out_std)
    for group in output_groups:
        floor[group] = constant_rtol * out_std[group].max()
    degenerate = out_std <= floor
    if strict and degenerate.any():
        j = int(np.flatnonzero(degenerate)[0])
        name = output_names[j] if output_names is not None else f"output {j}"
        raise ValidationError(f"output column {name!r} has zero variance")
    out_scale = np.where(degenerate, 1.0, out_std)
    return NormalizationStats(in_mean, in_std, out_mean, out_scale)


def _backprop(weights, biases, acts, x, y):
    a = x
    zs, As = [], [x]
    for (w, b), (f, _) in zip(zip(weights, biases), acts):
        z = a @ w.T + b
        a = f(z)
        zs.append(z)
        As.append(a)
    delta = (a - y) / len(x)  # d loss / d a^L
    grads = [None] * (2 * len(weights))
    for l in range(len(weights), 0, -1):
        delta = delta * acts[l - 1][1](zs[l - 1])  # d loss / d z^l
        grads[2 * (l - 1)] = delta.T @ As[l - 1]
        grads[2 * (l - 1) + 1] = delta.sum(axis=0)
        if l > 1:
            delta = delta @ weights[l - 1]
    return grads


def backprop_weights(net: DenseNetwork, x, y) -> list[np.ndarray]:
    """Gradient of the normalized mean loss w.r.t. ``[W1, b1, W2, b2, ...]``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if len(x) == 0:
        raise ValidationError("empty batch")
    acts = [net.activation(l) for l in range(1, net.n_layers + 1)]
    return _backprop(net.weights, net.biases, acts, x, y)


def sgd_step(net: DenseNetwork, grads, rate: float) -> DenseNetwork:
    if rate <= 0:
        raise ValidationError("learning rate must be positive")
    return net.with_parameters([p - rate * g for p, g in zip(net.parameters(), grads)])


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, net: DenseNetwork) -> "AdamState":
        return cls([np.zeros_like(p) for p in net.parameters()], [np.zeros_like(p) for p in net.parameters()])


def adam_step(net: DenseNetwork, grads, rate: float, state: AdamState, beta1=0.9, beta2=0.999,
              eps=1e-8) -> tuple[DenseNetwork, AdamState]:
    if rate <= 0:
        raise ValidationError("learning rate must be positive")
    k = state.step + 1
    m = [beta1 * mi + (1 - beta1) * g for mi, g in zip(state.m, grads)]
    v = [beta2 * vi + (1 - beta2) * g * g for vi, g in zip(state.v, grads)]
    c1 = 1 - beta1**k
    c2 = 1 - beta2**k
    params = [p - rate * (mi / c1) / (np.sqrt(vi / c2) + eps) for p, mi, vi in zip(net.parameters(), m, v)]
    return net.with_parameters(params), AdamState(m, v, k)


@dataclass(frozen=True)
class TrainingConfig:
    total_epochs: int = 500
    block_epochs: int = 50
    batch_size: int = 32
    lr_start: float = 1e-3
    lr_end: float = 5e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    rng_seed: int = 0

    def __post_init__(self):
        if self.block_epochs <= 0 or self.total_epochs < 0 or self.total_epochs % self.block_epochs:
            raise ValidationError("total_epochs must be a non-negative multiple of block_epochs")
        if self.lr_start <= 0 or self.lr_end <= 0 or self.batch_size <= 0:
            raise ValidationError("learning rates and batch size must be positive")

    def learning_rate(self, epoch: int) -> float:
        """Geometric ramp from ``lr_start`` (epoch 0) to ``lr_end`` (last epoch)."""
        if self.total_epochs <= 1:
            return self.lr_start
        frac = epoch / (self.total_epochs - 1)
        return self.lr_start * (self.lr_end / self.lr_start) ** frac


@dataclass
class TrainingHistory:
    initial_train_loss: float = float("nan")
    initial_val_loss: float = float("nan")
    rows: list[dict] = field(default_factory=list)
    winners: list[str] = field(default_factory=list)

    COLUMNS = ("epoch", "block", "lr", "winner", "train_loss", "val_loss",
               "sgd_train_loss", "sgd_val_loss", "adam_train_loss", "adam_val_loss")

    @property
    def final_val_loss(self) -> float:
        return self.rows[-1]["val_loss"] if self.rows else self.initial_val_loss

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            w.writerow([0, -1, "", "init", _fmt(self.initial_train_loss), _fmt(self.initial_val_loss), "", "", "", ""])
            for r in self.rows:
                w.writerow([r["epoch"], r["block"], _fmt(r["lr"]), r["winner"]]
                           + [_fmt(r[c]) for c in self.COLUMNS[4:]])


def _fmt(x: float) -> str:
    return "%.17g" % x


def _run_branch(params, x, y, xv, yv, cfg: TrainingConfig, first_epoch: int, use_adam: bool, template):
    params = [p.copy() for p in params]
    n = len(x)
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    k = 0
    train_hist, val_hist = [], []
    acts = [template.activation(l) for l in range(1, template.n_layers + 1)]
    for e in range(first_epoch, first_epoch + cfg.block_epochs):
        lr = cfg.learning_rate(e)
        order = np.random.default_rng([cfg.rng_seed, e]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grads = _backprop(params[0::2], params[1::2], acts, x[idx], y[idx])
            if use_adam:
                k += 1
                c1 = 1 - cfg.adam_beta1**k
                c2 = 1 - cfg.adam_beta2**k
                for i, g in enumerate(grads):
                    m[i] *= cfg.adam_beta1
                    m[i] += (1 - cfg.adam_beta1) * g
                    v[i] *= cfg.adam_beta2
                    v[i] += (1 - cfg.adam_beta2) * g * g
                    params[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + cfg.adam_eps)
            else:
                for i, g in enumerate(grads):
                    params[i] -= lr * g
        if not all(np.all(np.isfinite(p)) for p in params):
            return params, train_hist + [math.inf], val_hist + [math.inf], False
        net = template.with_parameters(params)
        try:
            train_hist.append(loss_normalized(net, x, y))
            val_hist.append(loss_normalized(net, xv, yv))
        except NumericError:
            return params, train_hist + [math.inf], val_hist + [math.inf], False
        if not (math.isfinite(train_hist[-1]) and math.isfinite(val_hist[-1])):
            return params, train_hist, val_hist, False
    return params, train_hist, val_hist, True


def train(net: DenseNetwork, train_set: Dataset, val_set: Dataset, cfg: TrainingConfig = TrainingConfig()):
    """Alternating SGD/Adam training.

    Every block of ``cfg.block_epochs`` epochs runs an SGD branch and an Adam
    branch from the same weights (Adam moments reset) over identical batch
    orderings, and keeps whichever ends with the lower validation loss. A
    block in which neither branch improves on the block-start validation loss
    keeps the block-start weights.

    Returns:
        ``(trained network, TrainingHistory)``.
    """
    x = net.norm.normalize_inputs(train_set.inputs)
    y = net.norm.normalize_outputs(train_set.outputs)
    xv = net.norm.normalize_inputs(val_set.inputs)
    yv = net.norm.normalize_outputs(val_set.outputs)
    history = TrainingHistory(loss_normalized(net, x, y), loss_normalized(net, xv, yv))
    params = [p.copy() for p in net.parameters()]
    kept_train, kept_val = history.initial_train_loss, history.initial_val_loss
    for block in range(cfg.total_epochs // cfg.block_epochs):
        first = block * cfg.block_epochs
        with np.errstate(over="ignore", invalid="ignore"):
            sgd = _run_branch(params, x, y, xv, yv, cfg, first, False, net)
            adam = _run_branch(params, x, y, xv, yv, cfg, first, True, net)
        if not (sgd[3] or adam[3]):
            bad = first + max(len(sgd[2]), len(adam[2]))
            raise TrainingError(f"both branches diverged in block {block} (epoch {bad})", epoch=bad)
        if adam[3] and (not sgd[3] or adam[2][-1] < sgd[2][-1]):
            winner, chosen = "adam", adam
        else:
            winner, chosen = "sgd", sgd
        if chosen[2][-1] < kept_val:
            params = chosen[0]
            train_curve, val_curve = chosen[1], chosen[2]
            kept_train, kept_val = train_curve[-1], val_curve[-1]
        else:
            # neither branch reduced the validation loss: keep the block-start weights
            winner = "none"
            train_curve = [kept_train] * cfg.block_epochs
            val_curve = [kept_val] * cfg.block_epochs
        history.winners.append(winner)

        def at(curve, i):
            return curve[i] if i < len(curve) else math.inf

        for i in range(cfg.block_epochs):
            history.rows.append({
                "epoch": first + i + 1, "block": block, "lr": cfg.learning_rate(first + i), "winner": winner,
                "train_loss": train_curve[i], "val_loss": val_curve[i],
                "sgd_train_loss": at(sgd[1], i), "sgd_val_loss": at(sgd[2], i),
                "adam_train_loss": at(adam[1], i), "adam_val_loss": at(adam[2], i),
            })
    return net.with_parameters(params), history


def network_to_dict(net: DenseNetwork) -> dict:
    return {
        "format": NET_FORMAT,
        "layer_sizes": list(net.layer_sizes),
        "activations": {"hidden": net.hidden_activation, "output": net.output_activation},
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "normalization": {
            "input_mean": net.norm.input_mean.tolist(),
            "input_scale": net.norm.input_scale.tolist(),
            "output_mean": net.norm.output_mean.tolist(),
            "output_scale": net.norm.output_scale.tolist(),
        },
    }


def network_from_dict(doc: dict) -> DenseNetwork:
    if not isinstance(doc, dict) or doc.get("format") != NET_FORMAT:
        raise SchemaError(f"not an {NET_FORMAT} document")
    missing = [k for k in ("layer_sizes", "weights", "biases", "normalization", "activations") if k not in doc]
    if missing:
        raise SchemaError(f"network document misses {', '.join(missing)}")
    nd = doc["normalization"]
    try:
        norm = NormalizationStats(nd["input_mean"], nd["input_scale"], nd["output_mean"], nd["output_scale"])
        return DenseNetwork(doc["layer_sizes"], doc["weights"], doc["biases"], norm,
                            doc["activations"]["hidden"], doc["activations"]["output"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"invalid network document: {exc}") from exc


def save_network(net: DenseNetwork, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n")


def load_network(path) -> DenseNetwork:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"cannot parse network file {path}: {exc}") from exc
    return network_from_dict(doc)
