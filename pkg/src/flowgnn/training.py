"""Supervised training and evaluation over windowed flow graphs.

Splits are chronological (never random): contiguous time segments in order
train -> val -> test with boundaries snapped to window edges, so flows of
one attack burst cannot leak across splits. Training minimizes optionally
class-weighted cross-entropy over the labeled flows of each graph's target
window and keeps the parameters with the best validation multiclass macro
F1. A flow predicted in several target windows is scored once, on its
chronologically last prediction.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .ingest import (FeatureCodec, FlowRecord, LabelVocabulary, UNLABELED,
                     encode_flow)
from .metrics import MetricsReport, build_report, f1_scores
from .model import (GraphArrays, ModelConfig, copy_params, forward_prepared,
                    prepare_graph)
from .tensor import AdamState, Tensor, adam_step, zero_grads
from .windows import GraphBuildConfig, TemporalGraph


class EmptyDataError(ValueError):
    """A split or target window set contains no usable flows."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 0.001
    weighted_loss: bool = True
    seed: int = 0
    batch_size: int = 1
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if len(self.split) != 3 or any(r < 0 for r in self.split) \
                or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split ratios must be non-negative and sum to 1")


def chronological_split(flows: Sequence[FlowRecord],
                        ratios: tuple[float, float, float],
                        window_size: float):
    """Cut the time-sorted stream into contiguous train/val/test segments.

    Boundaries sit at the ratio quantiles of the start-time distribution,
    snapped to the window grid anchored at the earliest start, so no window
    straddles a split boundary.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    if not flows:
        return (), (), ()
    starts = np.array([f.start_time for f in flows])
    t0 = float(starts.min())

    def boundary(fraction: float) -> float:
        cut = int(round(fraction * len(flows)))
        if cut <= 0:
            return t0
        if cut >= len(flows):
            return float(starts.max()) + window_size
        b = float(np.sort(starts)[cut])
        return t0 + round((b - t0) / window_size) * window_size

    b1 = boundary(ratios[0])
    b2 = max(boundary(ratios[0] + ratios[1]), b1)
    train = tuple(f for f in flows if f.start_time < b1)
    val = tuple(f for f in flows if b1 <= f.start_time < b2)
    test = tuple(f for f in flows if f.start_time >= b2)
    for name, part, ratio in (("train", train, ratios[0]),
                              ("val", val, ratios[1]),
                              ("test", test, ratios[2])):
        if ratio > 0 and not part:
            warnings.warn(f"chronological split produced an empty {name} split")
    return train, val, test


def class_weights(labels: Sequence[int], num_classes: int) -> np.ndarray:
    """Inverse-frequency weights N / (C * count_c), counts clamped to 1."""
    counts = np.bincount([l for l in labels if l != UNLABELED],
                         minlength=num_classes).astype(np.float64)
    total = counts.sum()
    return total / (num_classes * np.maximum(counts, 1.0))


def _labeled_targets(arrays: GraphArrays, labels: Mapping[int, int]):
    rows, classes = [], []
    for row, flow_id in zip(arrays.target_rows, arrays.target_flow_ids):
        label = labels.get(flow_id, UNLABELED)
        if label != UNLABELED:
            rows.append(row)
            classes.append(label)
    return np.asarray(rows, dtype=np.int64), np.asarray(classes, dtype=np.int64)


def predict_flows(prepared: Sequence[GraphArrays],
                  params: Mapping[str, Tensor],
                  model_config: ModelConfig) -> dict[int, int]:
    """Last-window argmax prediction per flow across all target windows."""
    out: dict[int, int] = {}
    for arrays in prepared:  # ascending target windows
        if len(arrays.target_rows) == 0:
            continue
        _, logits = forward_prepared(arrays, params, model_config)
        preds = logits.data.argmax(axis=1)
        for flow_id, pred in zip(arrays.target_flow_ids, preds):
            out[flow_id] = int(pred)
    return out


def _macro_f1(prepared, params, model_config, labels, num_classes) -> float:
    predictions = predict_flows(prepared, params, model_config)
    y_true, y_pred = [], []
    for flow_id, pred in predictions.items():
        label = labels.get(flow_id, UNLABELED)
        if label != UNLABELED:
            y_true.append(label)
            y_pred.append(pred)
    if not y_true:
        return 0.0
    return f1_scores(y_true, y_pred, num_classes)[1]


@dataclass
class TrainResult:
    params: dict
    log: list
    seconds: float


def train(train_graphs: Sequence[TemporalGraph],
          val_graphs: Sequence[TemporalGraph] | None,
          labels: Mapping[int, int], params: Mapping[str, Tensor],
          config: TrainConfig, model_config: ModelConfig,
          graph_config: GraphBuildConfig) -> TrainResult:
    """Adam on (optionally class-weighted) cross-entropy over target-window
    flow labels; keeps the checkpoint with the best validation multiclass
    macro F1 (final parameters when there is no validation split).

    The caller's parameter set is deep-copied: training never mutates it.
    """
    params = copy_params(params)
    prepared_all = [prepare_graph(g, graph_config) for g in train_graphs]
    batches_src = [(a, *_labeled_targets(a, labels)) for a in prepared_all]
    batches_src = [(a, rows, classes) for a, rows, classes in batches_src
                   if len(rows) > 0]
    if not batches_src:
        raise EmptyDataError("no labeled flows in any training target window")
    prepared_val = [prepare_graph(g, graph_config) for g in val_graphs] \
        if val_graphs else []

    num_classes = model_config.num_classes
    weights = None
    if config.weighted_loss:
        all_labels = [c for _, _, cls in batches_src for c in cls]
        weights = class_weights(all_labels, num_classes)

    state = AdamState(lr=config.lr)
    log: list[dict] = []
    best = copy_params(params)
    best_f1 = -1.0
    started = time.perf_counter()
    for epoch in range(config.epochs):
        epoch_loss = 0.0
        epoch_flows = 0
        for lo in range(0, len(batches_src), config.batch_size):
            batch = batches_src[lo:lo + config.batch_size]
            zero_grads(params)
            parts = []
            n_total = sum(len(rows) for _, rows, _ in batch)
            for arrays, rows, classes in batch:
                _, logits = forward_prepared(arrays, params, model_config)
                row_pos = {int(r): i for i, r in enumerate(arrays.target_rows)}
                sel = np.asarray([row_pos[int(r)] for r in rows])
                ce = T.cross_entropy(T.gather_rows(logits, sel), classes,
                                     class_weights=weights, reduction="sum")
                parts.append(ce)
            loss = parts[0]
            for p in parts[1:]:
                loss = T.add(loss, p)
            loss = T.scale(loss, 1.0 / n_total)
            loss.backward()
            grads = {name: p.grad for name, p in params.items()}
            adam_step(params, grads, state)
            epoch_loss += loss.item() * n_total
            epoch_flows += n_total
        entry = {"epoch": epoch, "loss": epoch_loss / epoch_flows}
        if prepared_val:
            val_f1 = _macro_f1(prepared_val, params, model_config, labels,
                               num_classes)
            entry["val_macro_f1"] = val_f1
            if val_f1 > best_f1:
                best_f1 = val_f1
                best = copy_params(params)
        log.append(entry)
    if not prepared_val:
        best = copy_params(params)
    return TrainResult(best, log, time.perf_counter() - started)


def evaluate(params: Mapping[str, Tensor], test_graphs: Sequence[TemporalGraph],
             vocab: LabelVocabulary, labels: Mapping[int, int],
             model_config: ModelConfig, graph_config: GraphBuildConfig,
             train_seconds: float = 0.0) -> MetricsReport:
    """Score each labeled flow once, on its chronologically last prediction;
    binary F1 collapses every attack class against benign."""
    ordered = sorted(test_graphs, key=lambda g: g.target.window_index)
    prepared = [prepare_graph(g, graph_config) for g in ordered]
    predictions = predict_flows(prepared, params, model_config)
    y_true, y_pred = [], []
    for flow_id in sorted(predictions):
        label = labels.get(flow_id, UNLABELED)
        if label != UNLABELED:
            y_true.append(label)
            y_pred.append(predictions[flow_id])
    if not y_true:
        raise EmptyDataError("no target flows")
    return build_report(y_true, y_pred, vocab, train_seconds)


# ---------------------------------------------------------------------------
# flat MLP baseline (a GNN without topology)


def _mlp_forward(x: np.ndarray, params: Mapping[str, Tensor],
                 activation: str = "leaky_relu") -> Tensor:
    act = T.ACTIVATIONS[activation]
    h = act(T.add(T.matmul(Tensor(x), params["mlp.0.W"]), params["mlp.0.b"]))
    return T.add(T.matmul(h, params["mlp.1.W"]), params["mlp.1.b"])


def mlp_baseline(train_flows: Sequence[FlowRecord],
                 val_flows: Sequence[FlowRecord],
                 test_flows: Sequence[FlowRecord],
                 codec: FeatureCodec, vocab: LabelVocabulary,
                 config: TrainConfig,
                 hidden: int = 128) -> MetricsReport:
    """Two-layer perceptron on encoded flow features alone, trained with
    the same loss/selection protocol as the graph model."""

    def encode_split(flows):
        rows = [(encode_flow(f, codec), f.label) for f in flows
                if f.label != UNLABELED]
        if not rows:
            return np.zeros((0, codec.feature_dim)), np.zeros(0, dtype=np.int64)
        x = np.asarray([r[0] for r in rows])
        y = np.asarray([r[1] for r in rows], dtype=np.int64)
        return x, y

    x_train, y_train = encode_split(train_flows)
    x_val, y_val = encode_split(val_flows)
    x_test, y_test = encode_split(test_flows)
    if len(y_train) == 0:
        raise EmptyDataError("no labeled flows in the training split")
    if len(y_test) == 0:
        raise EmptyDataError("no target flows")

    num_classes = vocab.num_classes
    rng = T.Rng(config.seed).child("mlp")
    lim0 = np.sqrt(6.0 / (codec.feature_dim + hidden))
    lim1 = np.sqrt(6.0 / (hidden + num_classes))
    params = {
        "mlp.0.W": Tensor(rng.child("0").uniform(-lim0, lim0,
                                                 (codec.feature_dim, hidden))),
        "mlp.0.b": Tensor(np.zeros(hidden)),
        "mlp.1.W": Tensor(rng.child("1").uniform(-lim1, lim1,
                                                 (hidden, num_classes))),
        "mlp.1.b": Tensor(np.zeros(num_classes)),
    }
    weights = class_weights(y_train, num_classes) if config.weighted_loss else None

    state = AdamState(lr=config.lr)
    best = copy_params(params)
    best_f1 = -1.0
    started = time.perf_counter()
    for _ in range(config.epochs):
        zero_grads(params)
        loss = T.cross_entropy(_mlp_forward(x_train, params), y_train,
                               class_weights=weights)
        loss.backward()
        adam_step(params, {n: p.grad for n, p in params.items()}, state)
        if len(y_val) > 0:
            val_pred = _mlp_forward(x_val, params).data.argmax(axis=1)
            val_f1 = f1_scores(y_val, val_pred, num_classes)[1]
            if val_f1 > best_f1:
                best_f1 = val_f1
                best = copy_params(params)
    if len(y_val) == 0:
        best = copy_params(params)
    seconds = time.perf_counter() - started
    y_pred = _mlp_forward(x_test, best).data.argmax(axis=1)
    return build_report(y_test, y_pred, vocab, seconds)
