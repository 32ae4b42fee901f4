import statistics

import numpy as np
import pytest

from conftest import mk_flow, sort_flows
from flowgnn.ingest import encode_flows, fit_codec, strip_labels
from flowgnn.model import ModelConfig, init_params, prepare_graph
from flowgnn.pretrain import (PretrainCorpus, init_scorer_params,
                              link_pred_accuracy, link_pred_loss, pretrain,
                              sample_negatives, transfer_weights)
from flowgnn.model import CompatibilityError
from flowgnn.synth import temporal_pattern
from flowgnn.tensor import Rng
from flowgnn.windows import (GraphBuildConfig, build_temporal_graphs,
                             dump_temporal_graph)

GC = GraphBuildConfig(window_size=5.0, window_memory=2)
MC = ModelConfig(num_classes=2, hidden_size=8, classifier_hidden=8,
                 neighbor_aggregator="mean")


def toy_graphs(n=10, seed=0):
    flows = sort_flows([mk_flow(i, i * 0.6, i * 0.6 + 0.2,
                                src=f"s{i % 3}", dst=f"d{i % 2}")
                        for i in range(n)])
    codec = fit_codec(flows)
    return build_temporal_graphs(flows, GC, encode_flows(flows, codec)), codec


class TestSampleNegatives:
    def test_exact_count_and_disjoint_from_positives(self):
        graphs, _ = toy_graphs(12)
        graph = graphs[-1]
        task = sample_negatives(graph, 1.0, Rng(5), GC)
        for etype, (ps, pd) in task.positives.items():
            pos = set(zip(ps.tolist(), pd.tolist()))
            ns, nd = task.negatives[etype]
            neg = list(zip(ns.tolist(), nd.tolist()))
            if etype not in task.shortfall:
                assert len(neg) == int(len(pos) * 1.0)
            assert not (set(neg) & pos)
            assert len(set(neg)) == len(neg)  # no duplicates

    def test_identical_seed_identical_negatives(self):
        graphs, _ = toy_graphs(12)
        a = sample_negatives(graphs[-1], 1.0, Rng(9), GC)
        b = sample_negatives(graphs[-1], 1.0, Rng(9), GC)
        for etype in a.negatives:
            assert np.array_equal(a.negatives[etype][0], b.negatives[etype][0])
            assert np.array_equal(a.negatives[etype][1], b.negatives[etype][1])

    def test_saturated_type_reports_shortfall(self):
        # one flow from a to a: the spatial blocks are complete bipartite
        flows = [mk_flow(0, 0.0, 0.1, src="a", dst="a")]
        codec = fit_codec(flows)
        graphs = build_temporal_graphs(flows, GC, encode_flows(flows, codec))
        task = sample_negatives(graphs[0], 1.0, Rng(1), GC)
        for etype in ("flow_to_src", "src_to_flow", "flow_to_dst",
                      "dst_to_flow"):
            assert len(task.negatives[etype][0]) == 0
            assert task.shortfall[etype] == 1

    def test_inter_window_negatives_point_forward(self):
        graphs, _ = toy_graphs(16)
        graph = graphs[-1]
        arrays = prepare_graph(graph, GC)
        n_flows = arrays.n_flows
        window_of = {}
        pos = ipos = 0
        for w, snap in enumerate(graph.snapshots):
            for _ in snap.flow_nodes:
                window_of[pos] = w
                pos += 1
            for _ in snap.ip_nodes:
                window_of[n_flows + ipos] = w
                ipos += 1
        task = sample_negatives(graph, 1.0, Rng(3), GC)
        for etype in ("inter_ip", "inter_flow"):
            ns, nd = task.negatives[etype]
            for s, d in zip(ns.tolist(), nd.tolist()):
                assert window_of[s] < window_of[d]


class TestScorer:
    def test_untrained_accuracy_near_chance(self):
        records = temporal_pattern(n_windows=10, seed=4)
        codec = fit_codec(records)
        graphs = build_temporal_graphs(records, GC,
                                       encode_flows(records, codec))
        rng = Rng(123)
        params = init_params(MC, codec.feature_dim, GC, rng.child("t"))
        params.update(init_scorer_params(MC, rng.child("s")))
        correct = total = 0
        for gi, graph in enumerate(graphs):
            task = sample_negatives(graph, 1.0, Rng(gi), GC)
            arrays = prepare_graph(graph, GC)
            _, logits, targets = link_pred_loss(arrays, task, params, MC)
            correct += link_pred_accuracy(logits, targets) * len(targets)
            total += len(targets)
        assert total > 400
        assert abs(correct / total - 0.5) < 0.1


class TestPretrain:
    def test_loss_decreases_after_one_epoch_median(self):
        graphs, codec = toy_graphs(14)
        corpus = PretrainCorpus(datasets=(("toy", "x"),), mode="in-context")
        deltas = []
        for seed in range(10):
            result = pretrain(corpus, graphs, MC, GC, codec.feature_dim,
                              epochs=2, lr=0.001, seed=seed)
            deltas.append(result.log[1]["loss"] - result.log[0]["loss"])
        assert statistics.median(deltas) < 0

    def test_empty_corpus_rejected(self):
        graphs, codec = toy_graphs(6)
        corpus = PretrainCorpus(datasets=(("toy", "x"),), mode="in-context")
        with pytest.raises(ValueError, match="empty"):
            pretrain(corpus, (), MC, GC, codec.feature_dim, epochs=1)

    def test_label_free_by_construction(self):
        records = temporal_pattern(n_windows=6, seed=7)
        stripped = strip_labels(records)
        codec = fit_codec(stripped)
        g_labeled = build_temporal_graphs(records, GC,
                                          encode_flows(records, codec))
        g_stripped = build_temporal_graphs(stripped, GC,
                                           encode_flows(stripped, codec))
        # snapshots carry no labels, so both graph sequences are identical
        assert [dump_temporal_graph(a) for a in g_labeled] == \
            [dump_temporal_graph(b) for b in g_stripped]


class TestCorpus:
    def test_out_of_context_excludes_target(self):
        with pytest.raises(ValueError, match="target"):
            PretrainCorpus(datasets=(("netA", "a.pptf"), ("netB", "b.pptf")),
                           mode="out-of-context", target_dataset="netA")

    def test_manifest_round_trip_text(self):
        corpus = PretrainCorpus(datasets=(("netB", "b.pptf"),
                                          ("netC", "c.pptf")),
                                mode="out-of-context", target_dataset="netA")
        text = corpus.manifest_text()
        assert "mode = out-of-context" in text
        assert "target = netA" in text
        assert "dataset = netB\tb.pptf" in text


class TestTransfer:
    def test_trunk_copies_classifier_fresh(self):
        graphs, codec = toy_graphs(10)
        corpus = PretrainCorpus(datasets=(("toy", "x"),), mode="in-context")
        pre = pretrain(corpus, graphs, MC, GC, codec.feature_dim, epochs=1,
                       seed=0)
        transferred = transfer_weights(pre.params, MC, GC, codec.feature_dim,
                                       Rng(42))
        for name, p in transferred.items():
            if name.startswith(("encoder.", "layer")):
                assert np.array_equal(p.data, pre.params[name].data)
        for name in transferred:
            assert not name.startswith("scorer.")
        # classifier head differs from every pretrained tensor
        head = transferred["classifier.0.W"].data
        for name, p in pre.params.items():
            if p.data.shape == head.shape:
                assert not np.array_equal(p.data, head) or \
                    name == "classifier.0.W"
        assert not np.array_equal(head, pre.params["classifier.0.W"].data)

    def test_feature_dim_mismatch_names_encoder(self):
        graphs, codec = toy_graphs(8)
        corpus = PretrainCorpus(datasets=(("toy", "x"),), mode="in-context")
        pre = pretrain(corpus, graphs, MC, GC, codec.feature_dim, epochs=1,
                       seed=0)
        with pytest.raises(CompatibilityError, match="encoder.flow.W"):
            transfer_weights(pre.params, MC, GC, codec.feature_dim + 4,
                             Rng(42))
