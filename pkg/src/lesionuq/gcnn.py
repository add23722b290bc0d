"""From-scratch graph convolutional network for lesion uncertainty.

Two symmetric-normalized graph convolutions (hidden width 64) feed a
mean-pooled readout and a linear head: a 2-way softmax over {FP, TP} for
the classification variant, a sigmoid IoU estimate for regression.
Gradients are exact analytic derivatives of this forward pass; training
is plain Adam with a geometric learning-rate decay and best-validation
epoch selection, bit-reproducible from the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import FormatError, ModelError, TrainingError
from .graphs import FeatureScaler, LesionGraph, apply_scaler, feature_names, fit_scaler

VARIANTS = ("classification", "regression")
CLASS_FP, CLASS_TP = 0, 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class CsrMatrix:
    """Minimal CSR container for the normalized adjacency."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    n: int

    def matmul(self, x: np.ndarray) -> np.ndarray:
        return _kernels.csr_matmul(self.indptr, self.indices, self.data, x)

    def toarray(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        for i in range(self.n):
            for k in range(self.indptr[i], self.indptr[i + 1]):
                out[i, self.indices[k]] = self.data[k]
        return out


def normalized_adjacency(g: LesionGraph) -> CsrMatrix:
    """D^(-1/2) (A + I) D^(-1/2) with D the degree matrix of A + I."""
    n = g.n_nodes
    deg = np.ones(n, dtype=np.float64)
    if g.edges.size:
        deg += np.bincount(g.edges.reshape(-1), minlength=n)
    rows = np.concatenate([g.edges[:, 0], g.edges[:, 1], np.arange(n, dtype=np.int64)])
    cols = np.concatenate([g.edges[:, 1], g.edges[:, 0], np.arange(n, dtype=np.int64)])
    vals = 1.0 / np.sqrt(deg[rows] * deg[cols])
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return CsrMatrix(indptr=indptr, indices=cols.astype(np.int64), data=vals, n=n)


@dataclass
class GcnnParams:
    """Weights of the two graph convolutions and the linear head."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @classmethod
    def init(cls, n_features: int, hidden: int, variant: str, rng: np.random.Generator) -> "GcnnParams":
        """Seeded uniform Glorot weights, zero biases."""
        out = 2 if variant == "classification" else 1

        def glorot(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        return cls(
            w1=glorot(n_features, hidden),
            b1=np.zeros(hidden),
            w2=glorot(hidden, hidden),
            b2=np.zeros(hidden),
            w3=glorot(hidden, out),
            b3=np.zeros(out),
        )

    @classmethod
    def zeros(cls, n_features: int, hidden: int, variant: str) -> "GcnnParams":
        out = 2 if variant == "classification" else 1
        return cls(
            w1=np.zeros((n_features, hidden)),
            b1=np.zeros(hidden),
            w2=np.zeros((hidden, hidden)),
            b2=np.zeros(hidden),
            w3=np.zeros((hidden, out)),
            b3=np.zeros(out),
        )

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def copy(self) -> "GcnnParams":
        return GcnnParams(*[a.copy() for a in self.arrays()])

    @property
    def out_dim(self) -> int:
        return self.w3.shape[1]


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _forward_prepared(x: np.ndarray, adj: CsrMatrix, params: GcnnParams) -> dict:
    if x.shape[1] != params.w1.shape[0]:
        raise ModelError(
            f"feature width {x.shape[1]} does not match W1 fan-in {params.w1.shape[0]}"
        )
    z1 = adj.matmul(x @ params.w1) + params.b1
    h1 = np.maximum(z1, 0.0)
    z2 = adj.matmul(h1 @ params.w2) + params.b2
    h2 = np.maximum(z2, 0.0)
    r = h2.mean(axis=0)
    y = r @ params.w3 + params.b3
    return {"x": x, "adj": adj, "z1": z1, "h1": h1, "z2": z2, "h2": h2, "r": r, "y": y}


def _softmax(y: np.ndarray) -> np.ndarray:
    e = np.exp(y - y.max())
    return e / e.sum()


def forward(g: LesionGraph, params: GcnnParams, scaler: FeatureScaler | None, variant: str):
    """Run the network on one graph.

    Pass the model's scaler to standardize features here, or None if g is
    already scaled.  Returns (prediction, cache): class probabilities
    (FP, TP) for classification, the scalar IoU estimate for regression.
    """
    if variant not in VARIANTS:
        raise ModelError(f"unknown variant {variant!r}")
    if scaler is not None:
        g = apply_scaler(g, scaler)
    cache = _forward_prepared(g.node_features, normalized_adjacency(g), params)
    if variant == "classification":
        if params.out_dim != 2:
            raise ModelError("classification head must have 2 outputs")
        return _softmax(cache["y"]), cache
    if params.out_dim != 1:
        raise ModelError("regression head must have 1 output")
    return float(_sigmoid(cache["y"])[0]), cache


def _loss_grad_output(cache: dict, target, variant: str):
    """Per-graph loss and dL/dy at the head."""
    y = cache["y"]
    if variant == "classification":
        label = int(target)
        m = y.max()
        lse = m + np.log(np.exp(y - m).sum())
        logp = y - lse
        g_y = np.exp(logp)
        g_y[label] -= 1.0
        return -float(logp[label]), g_y
    yhat = float(_sigmoid(y)[0])
    t = float(target)
    g_y = np.array([2.0 * (yhat - t) * yhat * (1.0 - yhat)])
    return (yhat - t) ** 2, g_y


def _backward_prepared(cache: dict, g_y: np.ndarray, params: GcnnParams, grads: GcnnParams) -> None:
    """Accumulate exact analytic gradients into grads."""
    x, adj = cache["x"], cache["adj"]
    n = x.shape[0]
    grads.b3 += g_y
    grads.w3 += np.outer(cache["r"], g_y)
    g_r = params.w3 @ g_y
    g_h2 = np.broadcast_to(g_r / n, cache["h2"].shape)
    g_z2 = np.where(cache["z2"] > 0.0, g_h2, 0.0)
    grads.b2 += g_z2.sum(axis=0)
    sg2 = adj.matmul(g_z2)
    grads.w2 += cache["h1"].T @ sg2
    g_h1 = sg2 @ params.w2.T
    g_z1 = np.where(cache["z1"] > 0.0, g_h1, 0.0)
    grads.b1 += g_z1.sum(axis=0)
    grads.w1 += x.T @ adj.matmul(g_z1)


def loss_and_gradients(batch, params: GcnnParams, variant: str):
    """Mean loss over the batch and its exact parameter gradients.

    Batch entries are either LesionGraph objects (already scaled) or
    prepared (x, adj, target) triples from the training loop.
    Classification targets come from tp, regression targets from iou_adj.
    """
    if not batch:
        raise TrainingError("empty batch")
    if variant not in VARIANTS:
        raise ModelError(f"unknown variant {variant!r}")
    grads = GcnnParams.zeros(params.w1.shape[0], params.w1.shape[1], variant)
    total = 0.0
    for item in batch:
        if isinstance(item, LesionGraph):
            target = int(item.tp) if variant == "classification" else item.iou_adj
            x, adj = item.node_features, normalized_adjacency(item)
        else:
            x, adj, target = item
        cache = _forward_prepared(x, adj, params)
        loss, g_y = _loss_grad_output(cache, target, variant)
        _backward_prepared(cache, g_y, params, grads)
        total += loss
    b = len(batch)
    for a in grads.arrays():
        a /= b
    return total / b, grads


def _stack_prepared(items):
    """Block-diagonal stack of prepared (x, adj, target) triples.

    One big CSR plus node counts lets a whole batch run through a single
    propagation; readout becomes a segment mean.
    """
    xs = [x for x, _, _ in items]
    adjs = [a for _, a, _ in items]
    n_nodes = np.array([x.shape[0] for x in xs], dtype=np.int64)
    node_off = np.concatenate([[0], np.cumsum(n_nodes)])
    nnz_off = np.concatenate([[0], np.cumsum([a.data.size for a in adjs])])
    indptr = np.concatenate(
        [[0]] + [a.indptr[1:] + nnz_off[i] for i, a in enumerate(adjs)]
    ).astype(np.int64)
    indices = np.concatenate([a.indices + node_off[i] for i, a in enumerate(adjs)])
    data = np.concatenate([a.data for a in adjs])
    adj = CsrMatrix(indptr=indptr, indices=indices, data=data, n=int(node_off[-1]))
    x = np.concatenate(xs, axis=0)
    targets = np.array([t for _, _, t in items], dtype=np.float64)
    return x, adj, targets, n_nodes, node_off[:-1]


def _batch_losses(y: np.ndarray, targets: np.ndarray, variant: str):
    """Per-graph losses and dL_g/dy rows for a stacked batch."""
    if variant == "classification":
        labels = targets.astype(np.int64)
        m = y.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(y - m).sum(axis=1, keepdims=True))
        logp = y - lse
        losses = -logp[np.arange(len(labels)), labels]
        g_y = np.exp(logp)
        g_y[np.arange(len(labels)), labels] -= 1.0
        return losses, g_y
    yhat = _sigmoid(y[:, 0])
    losses = (yhat - targets) ** 2
    g_y = (2.0 * (yhat - targets) * yhat * (1.0 - yhat))[:, None]
    return losses, g_y


def _batched_loss_and_grads(stacked, params: GcnnParams, variant: str, with_grads: bool = True):
    """Mean loss (and gradients) over a block-diagonal stacked batch.

    Numerically equivalent to the per-graph path up to summation order.
    """
    x, adj, targets, n_nodes, starts = stacked
    b = len(n_nodes)
    z1 = adj.matmul(x @ params.w1) + params.b1
    h1 = np.maximum(z1, 0.0)
    z2 = adj.matmul(h1 @ params.w2) + params.b2
    h2 = np.maximum(z2, 0.0)
    r = np.add.reduceat(h2, starts, axis=0) / n_nodes[:, None]
    y = r @ params.w3 + params.b3
    losses, g_y = _batch_losses(y, targets, variant)
    mean_loss = float(losses.mean())
    if not with_grads:
        return mean_loss, None
    g_y = g_y / b
    grads = GcnnParams.zeros(params.w1.shape[0], params.w1.shape[1], variant)
    grads.b3 += g_y.sum(axis=0)
    grads.w3 += r.T @ g_y
    g_r = g_y @ params.w3.T
    g_h2 = np.repeat(g_r / n_nodes[:, None], n_nodes, axis=0)
    g_z2 = np.where(z2 > 0.0, g_h2, 0.0)
    grads.b2 += g_z2.sum(axis=0)
    sg2 = adj.matmul(g_z2)
    grads.w2 += h1.T @ sg2
    g_z1 = np.where(z1 > 0.0, sg2 @ params.w2.T, 0.0)
    grads.b1 += g_z1.sum(axis=0)
    grads.w1 += x.T @ adj.matmul(g_z1)
    return mean_loss, grads


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params: GcnnParams) -> "AdamState":
        return cls(
            m=[np.zeros_like(a) for a in params.arrays()],
            v=[np.zeros_like(a) for a in params.arrays()],
        )


def adam_step(params: GcnnParams, grads: GcnnParams, state: AdamState, lr: float):
    """Standard Adam update with bias correction, in place."""
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return params, state


@dataclass
class TrainConfig:
    variant: str = "classification"
    lr_start: float = 1e-2
    lr_end: float = 1e-5
    epochs: int = 200
    batch_size: int = 10
    epsilon: float = 0.1
    seed: int = 0
    validation_fraction: float = 0.1
    hidden: int = 64

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise TrainingError(f"unknown variant {self.variant!r}")
        if not (self.lr_start >= self.lr_end > 0.0):
            raise TrainingError("need lr_start >= lr_end > 0")
        if self.batch_size < 1 or self.epochs < 1 or self.hidden < 1:
            raise TrainingError("batch_size, epochs and hidden must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise TrainingError("validation_fraction must be in [0,1)")
        if not 0.0 <= self.epsilon < 1.0:
            raise TrainingError("epsilon must be in [0,1)")


@dataclass
class GcnnModel:
    params: GcnnParams
    scaler: FeatureScaler
    variant: str
    n_channels: int
    hidden: int
    seed: int = 0

    @property
    def feature_names(self) -> list[str]:
        return feature_names(self.n_channels)


def lr_schedule(cfg: TrainConfig) -> np.ndarray:
    """Geometric decay hitting lr_start at epoch 0 and lr_end at the last."""
    if cfg.epochs == 1:
        return np.array([cfg.lr_start])
    t = np.arange(cfg.epochs) / (cfg.epochs - 1)
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** t


def _split_validation(graphs, cfg: TrainConfig, rng: np.random.Generator):
    """Seeded holdout; stratified by class for classification."""
    n = len(graphs)
    frac = cfg.validation_fraction
    if frac == 0.0 or n < 2:
        return list(range(n)), []
    if cfg.variant == "classification":
        train_idx, val_idx = [], []
        for cls in (0, 1):
            members = [i for i, g in enumerate(graphs) if int(g.iou_adj >= cfg.epsilon) == cls]
            perm = rng.permutation(len(members))
            n_val = min(int(round(frac * len(members))), len(members) - 1)
            chosen = [members[j] for j in perm]
            val_idx.extend(chosen[:n_val])
            train_idx.extend(chosen[n_val:])
        return sorted(train_idx), sorted(val_idx)
    perm = rng.permutation(n)
    n_val = min(int(round(frac * n)), n - 1)
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def train(dataset, config: TrainConfig):
    """Train a GCNN on a graph dataset.

    Classification labels are re-binarized from iou_adj with the config
    epsilon; the feature scaler is fitted on the post-holdout training
    graphs only.  Returns (model, log) with the parameters of the best
    validation-loss epoch; the run is bit-reproducible from the seed.
    """
    graphs = list(dataset)
    variant = config.variant
    if variant == "classification":
        n_tp = sum(1 for g in graphs if g.iou_adj >= config.epsilon)
        n_fp = len(graphs) - n_tp
        if n_tp < 2 or n_fp < 2:
            raise TrainingError(
                f"classification needs >= 2 graphs per class, got TP={n_tp} FP={n_fp}"
            )
    elif len(graphs) < 2:
        raise TrainingError("regression needs >= 2 graphs")
    n_feat = graphs[0].n_features
    if any(g.n_features != n_feat for g in graphs):
        raise TrainingError("graphs disagree on feature width")

    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = _split_validation(graphs, config, rng)
    scaler = fit_scaler([graphs[i] for i in train_idx])

    def prepare(i):
        g = apply_scaler(graphs[i], scaler)
        target = int(g.iou_adj >= config.epsilon) if variant == "classification" else g.iou_adj
        return (g.node_features, normalized_adjacency(g), target)

    train_set = [prepare(i) for i in train_idx]
    val_set = [prepare(i) for i in val_idx]
    val_stacked = _stack_prepared(val_set) if val_set else None

    params = GcnnParams.init(n_feat, config.hidden, variant, rng)
    state = AdamState.zeros_like(params)
    lrs = lr_schedule(config)
    best_val = np.inf
    best_params = params.copy()
    log = []
    for epoch in range(config.epochs):
        perm = rng.permutation(len(train_set))
        loss_sum = 0.0
        for start in range(0, len(train_set), config.batch_size):
            batch = [train_set[j] for j in perm[start : start + config.batch_size]]
            loss, grads = _batched_loss_and_grads(_stack_prepared(batch), params, variant)
            adam_step(params, grads, state, float(lrs[epoch]))
            loss_sum += loss * len(batch)
        train_loss = loss_sum / len(train_set)
        if val_set:
            val_loss, _ = _batched_loss_and_grads(val_stacked, params, variant, with_grads=False)
        else:
            val_loss = train_loss
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
        log.append(
            {
                "epoch": epoch,
                "lr": float(lrs[epoch]),
                "train_loss": float(train_loss),
                "val_loss": float(val_loss),
            }
        )
    model = GcnnModel(
        params=best_params,
        scaler=scaler,
        variant=variant,
        n_channels=n_feat - 4,
        hidden=config.hidden,
        seed=config.seed,
    )
    return model, log


def predict_uncertainty(g: LesionGraph, model: GcnnModel) -> float:
    """FP probability (classification) or 1 - predicted IoU (regression)."""
    expected = model.n_channels + 4
    if g.n_features != expected:
        raise ModelError(
            f"graph has {g.n_features} features, model expects {expected}"
        )
    pred, _ = forward(g, model.params, model.scaler, model.variant)
    if model.variant == "classification":
        return float(pred[CLASS_FP])
    return 1.0 - pred


_PARAM_ORDER = ("w1", "b1", "w2", "b2", "w3", "b3")


def save_model(model: GcnnModel, path) -> None:
    """One-line JSON header + flat little-endian float64 weight payload."""
    shapes = {name: list(getattr(model.params, name).shape) for name in _PARAM_ORDER}
    header = {
        "format_version": 1,
        "variant": model.variant,
        "hidden": model.hidden,
        "n_channels": model.n_channels,
        "feature_names": model.feature_names,
        "scaler": model.scaler.to_dict(),
        "seed": model.seed,
        "shapes": shapes,
    }
    payload = np.concatenate([getattr(model.params, n).reshape(-1) for n in _PARAM_ORDER])
    with open(path, "wb") as f:
        f.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        f.write(payload.astype("<f8").tobytes())


def load_model(path) -> GcnnModel:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: bad model header: {e}") from None
        for key in ("format_version", "variant", "shapes", "scaler", "n_channels", "hidden"):
            if key not in header:
                raise FormatError(f"{path}: model header missing {key!r}")
        blob = f.read()
    shapes = [tuple(header["shapes"][n]) for n in _PARAM_ORDER]
    counts = [int(np.prod(s)) for s in shapes]
    flat = np.frombuffer(blob, dtype="<f8")
    if flat.size != sum(counts):
        raise FormatError(
            f"{path}: weight payload has {flat.size} values, header implies {sum(counts)}"
        )
    arrays, pos = [], 0
    for s, c in zip(shapes, counts):
        arrays.append(flat[pos : pos + c].reshape(s).copy())
        pos += c
    return GcnnModel(
        params=GcnnParams(*arrays),
        scaler=FeatureScaler.from_dict(header["scaler"]),
        variant=header["variant"],
        n_channels=int(header["n_channels"]),
        hidden=int(header["hidden"]),
        seed=int(header.get("seed", 0)),
    )
