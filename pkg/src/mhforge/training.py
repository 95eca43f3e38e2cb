"""Multi-loss training: one shared forward traversal, per-head losses, accumulated gradients.

Gradients for all heads are accumulated in a single reverse sweep, which is
elementwise equal to running one backward pass per loss and summing. Frozen
parameters never receive gradients, and the sweep stops below the deepest
layer under which everything is frozen.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import ManifestEntry, epoch_order, load_images, project_entries
from .errors import MhforgeError
from .modelfile import ModelBundle
from .surgery import HcLabelMap, hc_encode
from .tensor_ops import (
    LayerParams,
    PoolIndexMap,
    Tensor,
    conv2d_backward,
    conv2d_forward,
    fully_connected,
    fully_connected_backward,
    global_avgpool,
    global_avgpool_backward,
    maxpool2d,
    maxpool2d_backward,
    relu,
    relu_backward,
    softmax_cross_entropy,
    top1_accuracy,
)

_SEED_MASK = (1 << 64) - 1


class TrainError(MhforgeError):
    """Bad training inputs: label arity, empty data, config bounds."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1.0
    momentum: float = 0.9
    seed: int = 0
    split_fraction: float = 0.8

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise TrainError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise TrainError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise TrainError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0 < self.split_fraction < 1:
            raise TrainError(f"split_fraction must be in (0, 1), got {self.split_fraction}")


@dataclass
class HeadResult:
    """Per-category outputs of one forward pass."""

    category: str
    layer_name: str
    logits: Tensor
    loss_weight: float
    probs: np.ndarray | None = None
    loss: float | None = None
    accuracy: float | None = None
    grad_logits: np.ndarray | None = None


@dataclass
class ForwardState:
    """Every activation of one traversal, shared by all heads, plus pool argmax maps."""

    activations: dict[str, Tensor]
    pool_maps: dict[str, PoolIndexMap]
    heads: dict[str, HeadResult]
    batch_size: int


def forward_all(bundle: ModelBundle, images: Tensor, labels: dict[str, np.ndarray] | None = None) -> ForwardState:
    """Runs the graph once; with labels, fills per-head loss, accuracy, and logit gradients."""
    spec = bundle.spec
    n, c, h, w = images.shape
    if (c, h, w) != spec.input_shape:
        raise TrainError(f"batch images are {c}x{h}x{w} but the network expects {spec.input_shape}")
    acts: dict[str, Tensor] = {}
    pool_maps: dict[str, PoolIndexMap] = {}
    heads: dict[str, HeadResult] = {}

    for lay in spec.layers:
        if lay.kind == "input":
            acts[lay.name] = images
        elif lay.kind == "conv":
            acts[lay.name] = conv2d_forward(acts[lay.inputs[0]], bundle.params[lay.name], lay.stride, lay.pad)
        elif lay.kind == "relu":
            acts[lay.name] = relu(acts[lay.inputs[0]])
        elif lay.kind == "maxpool":
            acts[lay.name], pool_maps[lay.name] = maxpool2d(acts[lay.inputs[0]], lay.kernel, lay.stride)
        elif lay.kind == "gavgpool":
            acts[lay.name] = global_avgpool(acts[lay.inputs[0]])
        elif lay.kind == "fc":
            acts[lay.name] = fully_connected(acts[lay.inputs[0]], bundle.params[lay.name])
            if lay.head_tag is not None:
                heads[lay.head_tag] = HeadResult(lay.head_tag, lay.name, acts[lay.name], 1.0)
        elif lay.kind == "loss":
            hr = heads[lay.label_slot]
            hr.loss_weight = lay.loss_weight
            if labels is not None:
                if lay.label_slot not in labels:
                    raise TrainError(f"no labels for category {lay.label_slot!r}")
                hr.loss, hr.probs, hr.grad_logits = softmax_cross_entropy(hr.logits, labels[lay.label_slot])
        elif lay.kind == "accuracy":
            if labels is not None:
                hr = heads[lay.label_slot]
                hr.accuracy = top1_accuracy(hr.logits, labels[lay.label_slot])
    return ForwardState(acts, pool_maps, heads, n)


def _has_unfrozen_below(bundle: ModelBundle) -> dict[str, bool]:
    """For each layer: does it or anything feeding it hold unfrozen parameters?"""
    table: dict[str, bool] = {}
    for lay in bundle.spec.layers:
        own = lay.kind in ("conv", "fc") and not bundle.params[lay.name].frozen
        below = table[lay.inputs[0]] if lay.inputs else False
        table[lay.name] = own or below
    return table


def backward_multi(
    bundle: ModelBundle, state: ForwardState, head_grads: dict[str, np.ndarray]
) -> dict[str, tuple[Tensor, np.ndarray]]:
    """Accumulates all heads' gradients in one reverse sweep over the shared graph.

    head_grads maps category -> gradient w.r.t. that head's logits, (N, F).
    Returns weight/bias gradients for unfrozen layers only; layers with no
    path to any seeded head are absent (their gradient is zero).
    """
    spec = bundle.spec
    reach = _has_unfrozen_below(bundle)
    out_grads: dict[str, np.ndarray] = {}
    param_grads: dict[str, tuple[Tensor, np.ndarray]] = {}

    for cat, g in head_grads.items():
        hr = state.heads[cat]
        n, f = state.batch_size, hr.logits.shape[1]
        g = np.asarray(g, dtype=np.float64).reshape(n, f, 1, 1)
        name = hr.layer_name
        out_grads[name] = out_grads[name] + g if name in out_grads else g

    for lay in reversed(spec.layers):
        if lay.name not in out_grads or lay.kind == "input":
            continue
        g = Tensor(out_grads.pop(lay.name))
        src = lay.inputs[0]
        if lay.kind in ("conv", "fc"):
            params = bundle.params[lay.name]
            if params.frozen and not reach[src]:
                continue
            if lay.kind == "conv":
                gx, gw, gb = conv2d_backward(state.activations[src], params, g, lay.stride, lay.pad)
            else:
                gx, gw, gb = fully_connected_backward(state.activations[src], params, g)
            if not params.frozen:
                _accumulate_params(param_grads, lay.name, gw, gb)
            gi = gx.data if reach[src] else None
        elif lay.kind == "relu":
            gi = relu_backward(state.activations[src], g).data if reach[src] else None
        elif lay.kind == "maxpool":
            gi = maxpool2d_backward(state.pool_maps[lay.name], g).data if reach[src] else None
        elif lay.kind == "gavgpool":
            shape = (state.batch_size, *state.activations[src].shape[1:])
            gi = global_avgpool_backward(shape, g).data if reach[src] else None
        else:
            continue
        if gi is not None:
            out_grads[src] = out_grads[src] + gi if src in out_grads else gi
    return param_grads


def _accumulate_params(store, name, gw: Tensor, gb: np.ndarray) -> None:
    if name in store:
        old_w, old_b = store[name]
        store[name] = (Tensor(old_w.data + gw.data), old_b + gb)
    else:
        store[name] = (gw, gb)


def loss_head_grads(state: ForwardState) -> dict[str, np.ndarray]:
    """Loss-weighted logit gradients for every head whose loss was computed."""
    grads = {}
    for cat, hr in state.heads.items():
        if hr.grad_logits is not None:
            grads[cat] = hr.loss_weight * hr.grad_logits
    return grads


def sgd_step(
    params: dict[str, LayerParams],
    grads: dict[str, tuple[Tensor, np.ndarray]],
    lr: float,
    momentum: float,
    velocity: dict[str, tuple[np.ndarray, np.ndarray]],
) -> None:
    """v <- momentum*v - lr*g; w <- w + v. Updates params and velocity in place."""
    for name, (gw, gb) in grads.items():
        p = params[name]
        if p.frozen:
            continue
        vw, vb = velocity.get(name, (np.zeros_like(p.weights.data), np.zeros_like(p.bias)))
        vw = momentum * vw - lr * gw.data
        vb = momentum * vb - lr * gb
        p.weights.data += vw
        p.bias += vb
        velocity[name] = (vw, vb)


def split_entries(
    entries: list[ManifestEntry], split_fraction: float, seed: int
) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Deterministic stratified split: every label combination lands in both sides.

    Combinations with a single example stay in the training side. Given the
    same seed, datasets whose label tuples are related by a one-to-one
    relabeling (the HC conversion) split into identical memberships.
    """
    groups: dict[tuple[int, ...], list[int]] = {}
    for i, e in enumerate(entries):
        groups.setdefault(e.labels, []).append(i)
    rng = np.random.default_rng(np.random.SeedSequence((seed & _SEED_MASK, 0x5350)))
    train_idx: list[int] = []
    val_idx: list[int] = []
    for combo in groups:
        members = groups[combo]
        order = rng.permutation(len(members))
        n_train = max(1, min(len(members) - 1, round(split_fraction * len(members)))) if len(members) > 1 else 1
        for j, pos in enumerate(order):
            (train_idx if j < n_train else val_idx).append(members[int(pos)])
    return [entries[i] for i in sorted(train_idx)], [entries[i] for i in sorted(val_idx)]


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: dict[str, float]
    train_acc: dict[str, float]
    val_loss: dict[str, float]
    val_acc: dict[str, float]
    seconds: float


@dataclass
class TrainLog:
    categories: tuple[str, ...]
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        cols = ["epoch"]
        for prefix in ("train_loss", "train_acc", "val_loss", "val_acc"):
            cols += [f"{prefix}_{c}" for c in self.categories]
        cols.append("seconds")
        lines = [",".join(cols)]
        for r in self.records:
            cells = [str(r.epoch)]
            for source in (r.train_loss, r.train_acc, r.val_loss, r.val_acc):
                cells += [f"{source[c]:.6f}" for c in self.categories]
            cells.append(f"{r.seconds:.3f}")
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def _label_arrays(entries: list[ManifestEntry], categories) -> dict[str, np.ndarray]:
    return {
        cat: np.array([e.labels[k] for e in entries], dtype=np.int64)
        for k, cat in enumerate(categories.names)
    }


def _manifest_view(bundle: ModelBundle, entries: list[ManifestEntry], manifest_categories):
    """Validates entries against the manifest's categories and the model's subset of them.

    A single-head model trained from a shared multi-category manifest keeps
    the full label tuples for splitting (so every variant sees the same
    train/validation membership) and projects to its own columns afterwards.
    """
    model_cats = bundle.spec.categories
    if model_cats is None:
        raise TrainError("model has no bound label categories")
    if not entries:
        raise TrainError("dataset is empty")
    cats = model_cats if manifest_categories is None else manifest_categories
    for name in model_cats.names:
        cats.index(name)
    for e in entries:
        if len(e.labels) != cats.n:
            raise TrainError(f"{e.image_path}: {len(e.labels)} labels for {cats.n} categories")
    return cats


def train(
    bundle: ModelBundle,
    entries: list[ManifestEntry],
    config: TrainConfig,
    manifest_categories=None,
) -> tuple[ModelBundle, TrainLog]:
    """SGD with momentum on the unfrozen layers; returns the mutated bundle and the log.

    `manifest_categories` describes the label columns of `entries` when they
    carry more categories than the model trains on; the split is computed on
    the full tuples before projecting.
    """
    full_cats = _manifest_view(bundle, entries, manifest_categories)
    cats = bundle.spec.categories
    train_set, val_set = split_entries(entries, config.split_fraction, config.seed)
    if full_cats.names != cats.names:
        train_set = project_entries(train_set, full_cats, cats.names)
        val_set = project_entries(val_set, full_cats, cats.names)

    train_images = load_images(train_set)
    train_labels = _label_arrays(train_set, cats)
    val_images = load_images(val_set) if val_set else None
    val_labels = _label_arrays(val_set, cats) if val_set else None

    epoch_seeds = np.random.SeedSequence((config.seed & _SEED_MASK, 0x45)).generate_state(
        max(config.epochs, 1), dtype=np.uint64
    )
    velocity: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    log = TrainLog(cats.names)
    n_train = len(train_set)

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = epoch_order(n_train, int(epoch_seeds[epoch - 1]), shuffle=True)
        sums = {c: 0.0 for c in cats.names}
        hits = {c: 0.0 for c in cats.names}
        for start in range(0, n_train, config.batch_size):
            idx = order[start : start + config.batch_size]
            images = Tensor(train_images.data[idx])
            labels = {c: train_labels[c][idx] for c in cats.names}
            state = forward_all(bundle, images, labels)
            grads = backward_multi(bundle, state, loss_head_grads(state))
            sgd_step(bundle.params, grads, config.learning_rate, config.momentum, velocity)
            for c in cats.names:
                sums[c] += state.heads[c].loss * len(idx)
                hits[c] += state.heads[c].accuracy * len(idx)
        train_loss = {c: sums[c] / n_train for c in cats.names}
        train_acc = {c: hits[c] / n_train for c in cats.names}
        if val_images is not None:
            val_metrics = _evaluate_arrays(bundle, val_images, val_labels)
            val_loss = {c: val_metrics[c][0] for c in cats.names}
            val_acc = {c: val_metrics[c][1] for c in cats.names}
        else:
            val_loss = {c: float("nan") for c in cats.names}
            val_acc = {c: float("nan") for c in cats.names}
        log.records.append(
            EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc, time.perf_counter() - t0)
        )
    return bundle, log


def _evaluate_arrays(
    bundle: ModelBundle, images: Tensor, labels: dict[str, np.ndarray], chunk: int = 64
) -> dict[str, tuple[float, float]]:
    cats = bundle.spec.categories
    n = images.shape[0]
    sums = {c: 0.0 for c in cats.names}
    hits = {c: 0.0 for c in cats.names}
    for start in range(0, n, chunk):
        part = Tensor(images.data[start : start + chunk])
        part_labels = {c: labels[c][start : start + chunk] for c in cats.names}
        state = forward_all(bundle, part, part_labels)
        for c in cats.names:
            sums[c] += state.heads[c].loss * part.shape[0]
            hits[c] += state.heads[c].accuracy * part.shape[0]
    return {c: (sums[c] / n, hits[c] / n) for c in cats.names}


def evaluate(
    bundle: ModelBundle, entries: list[ManifestEntry], manifest_categories=None
) -> dict[str, tuple[float, float]]:
    """Per-category (loss, accuracy) without touching any parameter."""
    full_cats = _manifest_view(bundle, entries, manifest_categories)
    cats = bundle.spec.categories
    if full_cats.names != cats.names:
        entries = project_entries(entries, full_cats, cats.names)
    images = load_images(entries)
    labels = _label_arrays(entries, cats)
    return _evaluate_arrays(bundle, images, labels)


@dataclass(frozen=True)
class HcEval:
    """Combined-label metrics plus the per-category view recovered by decoding."""

    combined_loss: float
    combined_accuracy: float
    per_category: dict[str, tuple[float, float]]


def evaluate_hc(
    bundle: ModelBundle,
    entries: list[ManifestEntry],
    hc_map: HcLabelMap,
    categories,
) -> HcEval:
    """Evaluates a hard-coded-label model against the original multi-label entries.

    Per-category accuracy compares the decoded argmax combination componentwise;
    per-category loss is the negative log of the marginal probability mass the
    model puts on the true class within that category.
    """
    if not entries:
        raise TrainError("dataset is empty")
    hc_ids = np.array([hc_encode(hc_map, e.labels) for e in entries], dtype=np.int64)
    images = load_images(entries)
    cat_name = bundle.spec.categories.names[0]
    n = images.shape[0]

    total_loss = 0.0
    total_hits = 0.0
    cat_hits = np.zeros(categories.n)
    cat_nll = np.zeros(categories.n)
    combos = np.array(hc_map.combos, dtype=np.int64)  # (n_combos, n_cats)
    true_labels = np.array([e.labels for e in entries], dtype=np.int64)

    for start in range(0, n, 64):
        stop = min(start + 64, n)
        part = Tensor(images.data[start:stop])
        state = forward_all(bundle, part, {cat_name: hc_ids[start:stop]})
        hr = state.heads[cat_name]
        total_loss += hr.loss * (stop - start)
        total_hits += hr.accuracy * (stop - start)
        pred_ids = hr.logits.data.reshape(stop - start, -1).argmax(axis=1)
        decoded = combos[pred_ids]  # (batch, n_cats)
        cat_hits += (decoded == true_labels[start:stop]).sum(axis=0)
        for k in range(categories.n):
            # marginal probability mass on the true class within category k
            sel = combos[None, :, k] == true_labels[start:stop, k][:, None]
            mass = (hr.probs * sel).sum(axis=1)
            cat_nll[k] += -np.log(mass).sum()

    per_category = {
        cat: (cat_nll[k] / n, cat_hits[k] / n) for k, cat in enumerate(categories.names)
    }
    return HcEval(total_loss / n, total_hits / n, per_category)


def predict_ids(bundle: ModelBundle, images: Tensor) -> tuple[np.ndarray, ...]:
    """Argmax class ids per head, in bound-category order."""
    state = forward_all(bundle, images)
    cats = bundle.spec.categories
    names = cats.names if cats is not None else tuple(state.heads)
    return tuple(state.heads[c].logits.data.reshape(images.shape[0], -1).argmax(axis=1) for c in names)
