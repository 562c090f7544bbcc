"""Small feedforward classifier with manual backprop, plus dataset tooling.

The network is a plain MLP (no normalization layers, so there are no
running statistics to worry about when parameters are shuffled).  Loss is
softmax cross-entropy with optional label smoothing folded into the
targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .params import LayeredParams, ParamLayout
from .rng import substream

ACTIVATIONS = ("relu", "tanh")

# Per-model heterogeneity menus: input jitter sigma and label smoothing.
SIGMA_MENU = (0.0, 0.05, 0.1)
SMOOTHING_MENU = (0.0, 0.05, 0.1)


@dataclass(frozen=True)
class NetSpec:
    """Architecture: input width, hidden widths..., class count."""

    layer_dims: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ValidationError("need at least input and output dims")
        if any(d < 1 for d in self.layer_dims):
            raise ValidationError(f"layer dims must be positive: {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_layers(self) -> int:
        """Depth count L: one weight matrix + bias pair per depth."""
        return len(self.layer_dims) - 1

    @property
    def param_count(self) -> int:
        return sum((fi + 1) * fo for fi, fo in zip(self.layer_dims, self.layer_dims[1:]))

    def layout(self) -> ParamLayout:
        shapes, depths = [], []
        for l, (fi, fo) in enumerate(zip(self.layer_dims, self.layer_dims[1:])):
            shapes.append((fi, fo))
            depths.append(l)
            shapes.append((fo,))
            depths.append(l)
        return ParamLayout(shapes=tuple(shapes), depths=tuple(depths))


def init_params(spec: NetSpec, seed: int) -> LayeredParams:
    """Deterministic init: uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    rng = substream(seed, "init")
    layers = []
    for fi, fo in zip(spec.layer_dims, spec.layer_dims[1:]):
        limit = math.sqrt(6.0 / (fi + fo))
        layers.append(rng.uniform(-limit, limit, size=(fi, fo)))
        layers.append(np.zeros(fo))
    return LayeredParams(layers)


def _forward_trace(params: LayeredParams, x: np.ndarray, activation: str):
    """Forward pass keeping pre/post activations for backprop."""
    hs = [x]
    zs = []
    n_layers = len(params.layers) // 2
    h = x
    for l in range(n_layers):
        w, b = params.layers[2 * l], params.layers[2 * l + 1]
        z = h @ w + b
        zs.append(z)
        if l < n_layers - 1:
            h = np.maximum(z, 0.0) if activation == "relu" else np.tanh(z)
            hs.append(h)
    return hs, zs


def forward(params: LayeredParams, inputs, activation: str = "relu") -> np.ndarray:
    """Logits for a batch of inputs (rows are examples)."""
    x = inputs.x if isinstance(inputs, Batch) else np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if not np.all(np.isfinite(x)):
        raise ValidationError("forward received non-finite inputs")
    if x.shape[1] != params.layers[0].shape[0]:
        raise ValidationError(
            f"input dim {x.shape[1]} does not match net input dim {params.layers[0].shape[0]}")
    _, zs = _forward_trace(params, x, activation)
    return zs[-1]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


def loss_and_grad(params: LayeredParams, batch: "Batch",
                  activation: str = "relu") -> tuple[float, LayeredParams]:
    """Mean cross-entropy over the batch and its exact gradient.

    Label smoothing (``batch.smoothing``) redistributes a fraction of each
    one-hot target uniformly over the classes.
    """
    x = np.asarray(batch.x, dtype=np.float64)
    y = np.asarray(batch.y, dtype=np.int64)
    k = params.layers[-1].shape[0]
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValidationError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    hs, zs = _forward_trace(params, x, activation)
    logp = _log_softmax(zs[-1])
    p = np.exp(logp)

    b = x.shape[0]
    eps = float(batch.smoothing)
    targets = np.full((b, k), eps / k)
    targets[np.arange(b), y] += 1.0 - eps
    loss = float(-(targets * logp).sum() / b)

    n_layers = len(params.layers) // 2
    grads: list[np.ndarray | None] = [None] * len(params.layers)
    dz = (p - targets) / b
    for l in range(n_layers - 1, -1, -1):
        w = params.layers[2 * l]
        grads[2 * l] = hs[l].T @ dz
        grads[2 * l + 1] = dz.sum(axis=0)
        if l > 0:
            dh = dz @ w.T
            if activation == "relu":
                dz = dh * (zs[l - 1] > 0.0)
            else:
                dz = dh * (1.0 - hs[l] ** 2)
    return loss, LayeredParams(grads)


def accuracy(params: LayeredParams, x: np.ndarray, y: np.ndarray,
             activation: str = "relu") -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class."""
    if len(y) == 0:
        raise ValidationError("cannot score an empty split")
    logits = forward(params, x, activation)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


@dataclass
class Dataset:
    """Train/val/test splits of one classification task."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int

    def __post_init__(self):
        for y in (self.y_train, self.y_val, self.y_test):
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValidationError("labels out of range for declared class count")

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]


@dataclass
class Batch:
    """One training batch: dataset indices plus materialized examples."""

    indices: np.ndarray
    x: np.ndarray
    y: np.ndarray
    smoothing: float = 0.0
    jitter_sigma: float = field(default=0.0, compare=False)


def make_synthetic(seed: int, classes: int = 4, dim: int = 20, n_per_class: int = 1000,
                   spread: float = 1.0, n_test_per_class: int = 250,
                   val_fraction: float = 0.02) -> Dataset:
    """Gaussian-cluster classification task, deterministic per seed.

    Class centers are standard-normal draws; ``spread`` scales the
    per-point noise and therefore the cluster overlap.  ``val_fraction``
    of the training points (default 2%) is carved off as validation.
    """
    rng = substream(seed, "dataset")
    means = rng.normal(0.0, 1.0, size=(classes, dim))

    def sample_split(per_class):
        xs, ys = [], []
        for c in range(classes):
            xs.append(means[c] + spread * rng.normal(size=(per_class, dim)))
            ys.append(np.full(per_class, c, dtype=np.int64))
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        order = rng.permutation(len(y))
        return x[order], y[order]

    x_tr, y_tr = sample_split(n_per_class)
    x_te, y_te = sample_split(n_test_per_class)
    n_val = int(round(val_fraction * len(y_tr))) if val_fraction > 0 else 0
    n_val = max(1, n_val) if val_fraction > 0 else 0
    split = len(y_tr) - n_val
    return Dataset(x_train=x_tr[:split], y_train=y_tr[:split],
                   x_val=x_tr[split:], y_val=y_tr[split:],
                   x_test=x_te, y_test=y_te, num_classes=classes)


def hetero_assignment(base_seed: int, model_index: int) -> tuple[float, float]:
    """Per-model (jitter sigma, label smoothing) pair.

    The menu orders are drawn once from ``base_seed``; models cycle
    through the shuffled menus when the population outgrows them.
    """
    rng = substream(base_seed, "hetero")
    sigma_order = rng.permutation(len(SIGMA_MENU))
    smooth_order = rng.permutation(len(SMOOTHING_MENU))
    sigma = SIGMA_MENU[sigma_order[model_index % len(SIGMA_MENU)]]
    smoothing = SMOOTHING_MENU[smooth_order[model_index % len(SMOOTHING_MENU)]]
    return sigma, smoothing


def make_heterogeneous_stream(dataset: Dataset, model_index: int, epoch: int, base_seed: int,
                              hetero: bool = False, batch_size: int = 64) -> list[Batch]:
    """One epoch of batches for one model.

    The example order is a permutation keyed by (base_seed, model, epoch),
    so every model sees each training index exactly once per epoch, in its
    own order.  With ``hetero`` on, the model's menu-assigned Gaussian
    input jitter and label smoothing are applied.
    """
    n = dataset.n_train
    order = substream(base_seed, "order", model_index, epoch).permutation(n)
    sigma, smoothing = hetero_assignment(base_seed, model_index) if hetero else (0.0, 0.0)
    jitter_rng = substream(base_seed, "jitter", model_index, epoch) if sigma > 0 else None

    batches = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = dataset.x_train[idx]
        if jitter_rng is not None:
            x = x + sigma * jitter_rng.normal(size=x.shape)
        batches.append(Batch(indices=idx, x=x, y=dataset.y_train[idx],
                             smoothing=smoothing, jitter_sigma=sigma))
    return batches


def save_dataset(dataset: Dataset, path):
    """Write the flat text format: header `K dim n_train n_val n_test`,
    then one example per line (dim floats + integer label), train/val/test
    in that order."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{dataset.num_classes} {dataset.dim} {dataset.n_train} "
                 f"{len(dataset.y_val)} {len(dataset.y_test)}\n")
        for x, y in ((dataset.x_train, dataset.y_train),
                     (dataset.x_val, dataset.y_val),
                     (dataset.x_test, dataset.y_test)):
            for row, label in zip(x, y):
                fh.write(" ".join(f"{v:.17g}" for v in row) + f" {int(label)}\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 5:
            raise ValidationError(f"bad dataset header: {header}")
        k, dim, n_tr, n_va, n_te = (int(v) for v in header)
        x = np.empty((n_tr + n_va + n_te, dim))
        y = np.empty(n_tr + n_va + n_te, dtype=np.int64)
        for i in range(len(y)):
            parts = fh.readline().split()
            if len(parts) != dim + 1:
                raise ValidationError(f"record {i} has {len(parts)} fields, expected {dim + 1}")
            x[i] = [float(v) for v in parts[:dim]]
            y[i] = int(parts[dim])
    return Dataset(x_train=x[:n_tr], y_train=y[:n_tr],
                   x_val=x[n_tr:n_tr + n_va], y_val=y[n_tr:n_tr + n_va],
                   x_test=x[n_tr + n_va:], y_test=y[n_tr + n_va:], num_classes=k)
