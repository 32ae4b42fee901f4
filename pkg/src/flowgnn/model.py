"""Hierarchical spatio-temporal GNN over windowed flow graphs.

Each layer runs a temporal node-update step over the four temporal edge
types (same-source / same-destination intra-window chains, inter-window IP
and flow recurrences) followed by a spatial step over the four bipartite
flow<->IP edge types. Per edge type e, a destination node v with at least
one incoming e-edge receives

    W1_e @ h_v + W2_e @ agg({h_u : u -> v via e})

and the per-type results are summed across edge types before the
non-linearity. Nodes untouched by a step pass through unchanged. Final
target-window flow states feed a small MLP classifier.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .ingest import FeatureCodec, LabelVocabulary
from .tensor import Tensor
from .windows import (GraphBuildConfig, SPATIAL_EDGE_TYPES, TEMPORAL_EDGE_TYPES,
                      TemporalGraph, cyclical_encode)

NEIGHBOR_AGGREGATORS = ("sum", "mean", "max")
EDGE_TYPE_AGGREGATORS = ("sum",)


class CompatibilityError(ValueError):
    """Checkpoint tensors or metadata do not match the requested setup."""


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    num_layers: int = 2
    hidden_size: int = 128
    classifier_layers: int = 2
    classifier_hidden: int = 128
    neighbor_aggregator: str = "mean"
    edge_type_aggregator: str = "sum"
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        for name in ("num_layers", "hidden_size", "classifier_layers",
                     "classifier_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.neighbor_aggregator not in NEIGHBOR_AGGREGATORS:
            raise ValueError(f"neighbor_aggregator must be one of "
                             f"{NEIGHBOR_AGGREGATORS}")
        if self.edge_type_aggregator not in EDGE_TYPE_AGGREGATORS:
            raise ValueError("edge_type_aggregator must be 'sum'")
        if self.activation not in T.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


# ---------------------------------------------------------------------------
# graph -> dense arrays


@dataclass(frozen=True)
class GraphArrays:
    """A TemporalGraph flattened to global node indices and edge arrays.

    Flow nodes occupy rows [0, n_flows), IP nodes [n_flows, n_flows+n_ips).
    Pure function of (graph, graph config); prepare once, reuse per epoch.
    """

    n_flows: int
    n_ips: int
    flow_input: np.ndarray      # features || flow cyclical encoding
    ip_input: np.ndarray        # ones || window cyclical encoding
    edges: dict                 # edge type -> (src rows, dst rows)
    target_rows: np.ndarray
    target_flow_ids: tuple[int, ...]

    @property
    def num_nodes(self) -> int:
        return self.n_flows + self.n_ips


def prepare_graph(graph: TemporalGraph,
                  graph_config: GraphBuildConfig) -> GraphArrays:
    flow_base: list[int] = []
    ip_base: list[int] = []
    n_flows = n_ips = 0
    for snap in graph.snapshots:
        flow_base.append(n_flows)
        ip_base.append(n_ips)
        n_flows += snap.num_flows
        n_ips += snap.num_ips

    feat_rows, cyc_rows = [], []
    for snap in graph.snapshots:
        period = max(1, snap.num_flows)
        for node in snap.flow_nodes:
            feat_rows.append(node.features)
            cyc_rows.append(cyclical_encode(node.ordinal, period,
                                            graph_config.flow_encoding_dim))
    if feat_rows:
        feature_dim = len(feat_rows[0])
        if any(len(r) != feature_dim for r in feat_rows):
            raise ValueError("inconsistent flow feature dimensions in graph")
        flow_input = np.concatenate([np.asarray(feat_rows, dtype=np.float64),
                                     np.asarray(cyc_rows)], axis=1)
    else:
        flow_input = np.zeros((0, graph_config.flow_encoding_dim))

    target_global = graph.snapshots[graph.target_index].window_index
    ip_rows = []
    for snap in graph.snapshots:
        age = target_global - snap.window_index
        enc = cyclical_encode(age, graph_config.window_memory,
                              graph_config.window_encoding_dim)
        for _ in snap.ip_nodes:
            ip_rows.append(np.concatenate([[1.0], enc]))
    ip_input = np.asarray(ip_rows) if ip_rows \
        else np.zeros((0, 1 + graph_config.window_encoding_dim))

    edges: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def put(etype, pairs):
        if pairs:
            src, dst = zip(*pairs)
            edges[etype] = (np.asarray(src, dtype=np.int64),
                            np.asarray(dst, dtype=np.int64))
        else:
            edges[etype] = (np.zeros(0, dtype=np.int64),
                            np.zeros(0, dtype=np.int64))

    flow_g = lambda w, i: flow_base[w] + i
    ip_g = lambda w, i: n_flows + ip_base[w] + i

    spatial: dict[str, list] = {e: [] for e in SPATIAL_EDGE_TYPES}
    intra: dict[str, list] = {"intra_src": [], "intra_dst": []}
    for w, snap in enumerate(graph.snapshots):
        for f, i in snap.flow_to_src:
            spatial["flow_to_src"].append((flow_g(w, f), ip_g(w, i)))
        for i, f in snap.src_to_flow:
            spatial["src_to_flow"].append((ip_g(w, i), flow_g(w, f)))
        for f, i in snap.flow_to_dst:
            spatial["flow_to_dst"].append((flow_g(w, f), ip_g(w, i)))
        for i, f in snap.dst_to_flow:
            spatial["dst_to_flow"].append((ip_g(w, i), flow_g(w, f)))
        for a, b in snap.intra_src:
            intra["intra_src"].append((flow_g(w, a), flow_g(w, b)))
        for a, b in snap.intra_dst:
            intra["intra_dst"].append((flow_g(w, a), flow_g(w, b)))
    for etype, pairs in {**spatial, **intra}.items():
        put(etype, pairs)
    put("inter_ip", [(ip_g(a, i), ip_g(b, j))
                     for (a, i), (b, j) in graph.inter_ip_edges])
    put("inter_flow", [(flow_g(a, i), flow_g(b, j))
                       for (a, i), (b, j) in graph.inter_flow_edges])

    target = graph.snapshots[graph.target_index]
    target_rows = np.asarray([flow_g(graph.target_index, i)
                              for i in range(target.num_flows)], dtype=np.int64)
    return GraphArrays(
        n_flows=n_flows, n_ips=n_ips,
        flow_input=flow_input, ip_input=ip_input, edges=edges,
        target_rows=target_rows,
        target_flow_ids=tuple(n.flow_id for n in target.flow_nodes),
    )


# ---------------------------------------------------------------------------
# parameters


def _glorot(rng: T.Rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


def _linear_params(rng: T.Rng, name: str, fan_in: int, fan_out: int,
                   params: dict) -> None:
    params[f"{name}.W"] = Tensor(_glorot(rng, fan_in, fan_out))
    params[f"{name}.b"] = Tensor(np.zeros(fan_out))


def classifier_dims(config: ModelConfig) -> list[tuple[int, int]]:
    dims = [config.hidden_size] + \
        [config.classifier_hidden] * (config.classifier_layers - 1) + \
        [config.num_classes]
    return list(zip(dims[:-1], dims[1:]))


def init_params(model_config: ModelConfig, feature_dim: int,
                graph_config: GraphBuildConfig, rng: T.Rng) -> dict[str, Tensor]:
    """Fresh ParameterSet with the stable naming scheme
    layer{k}.{temporal|spatial}.{edge_type}.{W1|W2} used for transfer."""
    h = model_config.hidden_size
    params: dict[str, Tensor] = {}
    _linear_params(rng.child("encoder.flow"), "encoder.flow",
                   feature_dim + graph_config.flow_encoding_dim, h, params)
    _linear_params(rng.child("encoder.ip"), "encoder.ip",
                   1 + graph_config.window_encoding_dim, h, params)
    for k in range(model_config.num_layers):
        for phase, etypes in (("temporal", TEMPORAL_EDGE_TYPES),
                              ("spatial", SPATIAL_EDGE_TYPES)):
            for etype in etypes:
                base = f"layer{k}.{phase}.{etype}"
                r = rng.child(base)
                params[f"{base}.W1"] = Tensor(_glorot(r.child("W1"), h, h))
                params[f"{base}.W2"] = Tensor(_glorot(r.child("W2"), h, h))
    for i, (fan_in, fan_out) in enumerate(classifier_dims(model_config)):
        _linear_params(rng.child(f"classifier.{i}"), f"classifier.{i}",
                       fan_in, fan_out, params)
    return params


def trunk_names(params: Mapping[str, Tensor]) -> list[str]:
    """Encoder and message-passing tensors (shared between task heads)."""
    return [n for n in params if n.startswith(("encoder.", "layer"))]


def copy_params(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {name: Tensor(p.data.copy()) for name, p in params.items()}


# ---------------------------------------------------------------------------
# forward


def init_node_states(arrays: GraphArrays, params: Mapping[str, Tensor],
                     model_config: ModelConfig) -> Tensor:
    """Encode raw node inputs into hidden_size states for all nodes."""
    act = T.ACTIVATIONS[model_config.activation]
    hidden = params["encoder.flow.W"].data.shape[1]
    if arrays.n_flows > 0:
        enc_in = params["encoder.flow.W"].data.shape[0]
        if arrays.flow_input.shape[1] != enc_in:
            raise ValueError(f"flow encoder expects input dim {enc_in}, "
                             f"graph provides {arrays.flow_input.shape[1]}")
        flow_h = act(T.add(T.matmul(Tensor(arrays.flow_input),
                                    params["encoder.flow.W"]),
                           params["encoder.flow.b"]))
    else:
        flow_h = Tensor(np.zeros((0, hidden)))
    if arrays.n_ips > 0:
        ip_h = act(T.add(T.matmul(Tensor(arrays.ip_input),
                                  params["encoder.ip.W"]),
                         params["encoder.ip.b"]))
    else:
        ip_h = Tensor(np.zeros((0, hidden)))
    return T.concat_rows([flow_h, ip_h])


def _hetero_step(states: Tensor, arrays: GraphArrays,
                 params: Mapping[str, Tensor], layer: int, phase: str,
                 etypes: Sequence[str], config: ModelConfig) -> Tensor:
    n = arrays.num_nodes
    reduce = T.SEGMENT_REDUCERS[config.neighbor_aggregator]
    contrib: Tensor | None = None
    touched = np.zeros(n, dtype=bool)
    for etype in etypes:
        src, dst = arrays.edges[etype]
        if len(src) == 0:
            continue
        w1 = params[f"layer{layer}.{phase}.{etype}.W1"]
        w2 = params[f"layer{layer}.{phase}.{etype}.W2"]
        neigh = reduce(T.gather_rows(states, src), dst, n)
        mask = np.zeros(n)
        mask[dst] = 1.0
        term = T.mul_const(T.add(T.matmul(states, w1), T.matmul(neigh, w2)),
                           mask[:, None])
        contrib = term if contrib is None else T.add(contrib, term)
        touched |= mask.astype(bool)
    if contrib is None:
        return states
    act = T.ACTIVATIONS[config.activation]
    updated = T.mul_const(act(contrib), touched.astype(np.float64)[:, None])
    kept = T.mul_const(states, (~touched).astype(np.float64)[:, None])
    return T.add(updated, kept)


def temporal_step(states: Tensor, arrays: GraphArrays,
                  params: Mapping[str, Tensor], layer: int,
                  config: ModelConfig) -> Tensor:
    """Temporal node update; nodes with no incoming temporal edge of any
    type pass through unchanged."""
    return _hetero_step(states, arrays, params, layer, "temporal",
                        TEMPORAL_EDGE_TYPES, config)


def spatial_step(states: Tensor, arrays: GraphArrays,
                 params: Mapping[str, Tensor], layer: int,
                 config: ModelConfig) -> Tensor:
    """Spatial node update over the four flow<->IP edge types, consuming
    the states produced by the temporal step of the same layer."""
    return _hetero_step(states, arrays, params, layer, "spatial",
                        SPATIAL_EDGE_TYPES, config)


def classify(states: Tensor, rows: np.ndarray, params: Mapping[str, Tensor],
             config: ModelConfig) -> Tensor:
    act = T.ACTIVATIONS[config.activation]
    x = T.gather_rows(states, rows)
    n_layers = len(classifier_dims(config))
    for i in range(n_layers):
        x = T.add(T.matmul(x, params[f"classifier.{i}.W"]),
                  params[f"classifier.{i}.b"])
        if i < n_layers - 1:
            x = act(x)
    return x


def forward_prepared(arrays: GraphArrays, params: Mapping[str, Tensor],
                     config: ModelConfig) -> tuple[tuple[int, ...], Tensor]:
    """Stacked (temporal, spatial) layers then the classifier over the
    target window's flow states; temporal always runs first in a layer."""
    states = init_node_states(arrays, params, config)
    for k in range(config.num_layers):
        states = temporal_step(states, arrays, params, k, config)
        states = spatial_step(states, arrays, params, k, config)
    logits = classify(states, arrays.target_rows, params, config)
    return arrays.target_flow_ids, logits


def final_states(arrays: GraphArrays, params: Mapping[str, Tensor],
                 config: ModelConfig) -> Tensor:
    """All-node states after the last layer (used by the link-prediction
    task heads, which score edges between arbitrary nodes)."""
    states = init_node_states(arrays, params, config)
    for k in range(config.num_layers):
        states = temporal_step(states, arrays, params, k, config)
        states = spatial_step(states, arrays, params, k, config)
    return states


def forward(graph: TemporalGraph, params: Mapping[str, Tensor],
            model_config: ModelConfig,
            graph_config: GraphBuildConfig) -> tuple[tuple[int, ...], Tensor]:
    """Per-flow logits, (flow_id, ...) aligned with logits rows, for the
    target window only."""
    return forward_prepared(prepare_graph(graph, graph_config), params,
                            model_config)


# ---------------------------------------------------------------------------
# checkpoints ("PPTG"; see docs/checkpoint-format.md)

CHECKPOINT_MAGIC = b"PPTG"
CHECKPOINT_VERSION = 1
_DTYPE_F64 = 0


def metadata_text(metadata: Mapping[str, str]) -> str:
    lines = []
    for key in sorted(metadata):
        value = metadata[key]
        if "\n" in value:
            raise ValueError(f"metadata value for {key!r} contains a newline")
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_metadata(text: str) -> dict[str, str]:
    meta = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        meta[key] = value
    return meta


def save_checkpoint(params: Mapping[str, Tensor], metadata: Mapping[str, str],
                    path: str | Path) -> None:
    """Bit-exact round trip: little-endian magic, version, length-prefixed
    canonical metadata text, then named tensors sorted by name."""
    meta_raw = metadata_text(metadata).encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
           struct.pack("<Q", len(meta_raw)), meta_raw,
           struct.pack("<I", len(params))]
    for name in sorted(params):
        data = params[name].data
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<BB", _DTYPE_F64, data.ndim))
        out.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        out.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict[str, str]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<Q", buf, 8)
    offset = 16
    metadata = parse_metadata(buf[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset:offset + name_len].decode("utf-8")
        offset += name_len
        dtype, rank = struct.unpack_from("<BB", buf, offset)
        offset += 2
        if dtype != _DTYPE_F64:
            raise ValueError(f"{path}: unknown dtype tag {dtype} for {name!r}")
        dims = struct.unpack_from(f"<{rank}Q", buf, offset)
        offset += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(buf, dtype="<f8", count=size,
                             offset=offset).reshape(dims).copy()
        offset += 8 * size
        params[name] = Tensor(data)
    return params, metadata


def build_metadata(model_config: ModelConfig, graph_config: GraphBuildConfig,
                   codec: FeatureCodec, vocab: LabelVocabulary,
                   extra: Mapping[str, str] | None = None) -> dict[str, str]:
    meta = {
        "format": "flowgnn-checkpoint",
        "model.num_classes": str(model_config.num_classes),
        "model.num_layers": str(model_config.num_layers),
        "model.hidden_size": str(model_config.hidden_size),
        "model.classifier_layers": str(model_config.classifier_layers),
        "model.classifier_hidden": str(model_config.classifier_hidden),
        "model.neighbor_aggregator": model_config.neighbor_aggregator,
        "model.edge_type_aggregator": model_config.edge_type_aggregator,
        "model.activation": model_config.activation,
        "graph.window_size": repr(graph_config.window_size),
        "graph.window_memory": str(graph_config.window_memory),
        "graph.flow_memory": str(graph_config.flow_memory),
        "graph.flow_encoding_dim": str(graph_config.flow_encoding_dim),
        "graph.window_encoding_dim": str(graph_config.window_encoding_dim),
        "codec.hash": codec.digest(),
        "codec.json": codec.to_json(),
        "vocab.classes": json.dumps(list(vocab.classes)),
    }
    if extra:
        meta.update(extra)
    return meta


def configs_from_metadata(meta: Mapping[str, str]) \
        -> tuple[ModelConfig, GraphBuildConfig, FeatureCodec, LabelVocabulary]:
    model_config = ModelConfig(
        num_classes=int(meta["model.num_classes"]),
        num_layers=int(meta["model.num_layers"]),
        hidden_size=int(meta["model.hidden_size"]),
        classifier_layers=int(meta["model.classifier_layers"]),
        classifier_hidden=int(meta["model.classifier_hidden"]),
        neighbor_aggregator=meta["model.neighbor_aggregator"],
        edge_type_aggregator=meta["model.edge_type_aggregator"],
        activation=meta["model.activation"],
    )
    graph_config = GraphBuildConfig(
        window_size=float(meta["graph.window_size"]),
        window_memory=int(meta["graph.window_memory"]),
        flow_memory=int(meta["graph.flow_memory"]),
        flow_encoding_dim=int(meta["graph.flow_encoding_dim"]),
        window_encoding_dim=int(meta["graph.window_encoding_dim"]),
    )
    codec = FeatureCodec.from_json(meta["codec.json"])
    if codec.digest() != meta["codec.hash"]:
        raise CompatibilityError("codec hash mismatch in checkpoint metadata")
    vocab = LabelVocabulary(tuple(json.loads(meta["vocab.classes"])))
    return model_config, graph_config, codec, vocab


def check_encoder_compat(params: Mapping[str, Tensor], feature_dim: int,
                         graph_config: GraphBuildConfig) -> None:
    expected = feature_dim + graph_config.flow_encoding_dim
    actual = params["encoder.flow.W"].data.shape[0]
    if actual != expected:
        raise CompatibilityError(
            f"encoder.flow.W expects input dim {actual} but the codec yields "
            f"{expected} ({feature_dim} features + "
            f"{graph_config.flow_encoding_dim} encoding)")
