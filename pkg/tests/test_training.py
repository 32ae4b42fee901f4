import numpy as np
import pytest

from conftest import mk_flow, sort_flows
from flowgnn.experiments import (FewShotPlan, ablation_suite, fewshot,
                                 prepare_splits, select_fraction,
                                 undersample_order)
from flowgnn.ingest import UNLABELED, encode_flows, fit_codec
from flowgnn.metrics import f1_scores
from flowgnn.model import ModelConfig, init_params, prepare_graph
from flowgnn.synth import (feature_pattern, temporal_pattern,
                           topology_pattern, vocabulary_for)
from flowgnn.tensor import Rng
from flowgnn.training import (EmptyDataError, TrainConfig, chronological_split,
                              class_weights, evaluate, mlp_baseline,
                              predict_flows, train)
from flowgnn.windows import GraphBuildConfig, build_temporal_graphs

GC = GraphBuildConfig(window_size=5.0, window_memory=2)


def small_model(num_classes=2, **kw):
    defaults = dict(hidden_size=16, classifier_hidden=16,
                    neighbor_aggregator="sum")
    defaults.update(kw)
    return ModelConfig(num_classes=num_classes, **defaults)


class TestChronologicalSplit:
    def test_all_train(self):
        flows = [mk_flow(i, float(i), i + 0.5) for i in range(10)]
        train_f, val_f, test_f = chronological_split(flows, (1.0, 0.0, 0.0), 5.0)
        assert len(train_f) == 10 and not val_f and not test_f

    def test_uniform_flows_quantile_boundaries(self):
        flows = [mk_flow(i, float(i), i + 0.5) for i in range(100)]
        train_f, val_f, test_f = chronological_split(flows, (0.6, 0.2, 0.2), 5.0)
        # boundaries snap to the window grid anchored at t=0
        b1 = max(f.start_time for f in train_f)
        assert len(train_f) + len(val_f) + len(test_f) == 100
        assert abs(len(train_f) - 60) <= 5
        assert abs(len(val_f) - 20) <= 5
        boundary = min(f.start_time for f in val_f)
        assert boundary % 5.0 == pytest.approx(0.0)

    def test_partition_no_flow_in_two_splits(self):
        rng = np.random.default_rng(3)
        flows = sort_flows([mk_flow(i, float(rng.uniform(0, 50)), 0.0)
                            for i in range(60)])
        flows = sort_flows([mk_flow(f.flow_id, f.start_time,
                                    f.start_time + 0.2) for f in flows])
        parts = chronological_split(flows, (0.5, 0.25, 0.25), 2.0)
        ids = [{f.flow_id for f in part} for part in parts]
        assert ids[0] | ids[1] | ids[2] == {f.flow_id for f in flows}
        assert not (ids[0] & ids[1]) and not (ids[1] & ids[2]) \
            and not (ids[0] & ids[2])

    def test_time_ordering_between_splits(self):
        flows = [mk_flow(i, i * 0.7, i * 0.7 + 0.1) for i in range(50)]
        train_f, val_f, test_f = chronological_split(flows, (0.6, 0.2, 0.2), 1.0)
        assert max(f.start_time for f in train_f) <= \
            min(f.start_time for f in val_f)
        assert max(f.start_time for f in val_f) <= \
            min(f.start_time for f in test_f)

    def test_empty_split_warns_not_raises(self):
        flows = [mk_flow(0, 0.0, 0.1), mk_flow(1, 1.0, 1.1)]
        with pytest.warns(UserWarning, match="empty"):
            chronological_split(flows, (0.98, 0.01, 0.01), 1.0)


class TestClassWeights:
    def test_inverse_frequency(self):
        w = class_weights([0, 0, 0, 1], 2)
        assert w[0] == pytest.approx(4 / (2 * 3))
        assert w[1] == pytest.approx(4 / (2 * 1))

    def test_missing_class_clamped(self):
        w = class_weights([0, 0], 2)
        assert np.isfinite(w).all()


def prepared_dataset(records, **model_kw):
    vocab = vocabulary_for(records)
    data = prepare_splits(records, vocab, GC, (0.6, 0.2, 0.2))
    config = small_model(num_classes=vocab.num_classes, **model_kw)
    return data, config


class TestTrain:
    def test_single_class_accuracy_one_within_five_epochs(self):
        flows = sort_flows([mk_flow(i, i * 0.5, i * 0.5 + 0.1, label=0,
                                    src=f"s{i % 2}") for i in range(20)])
        codec = fit_codec(flows)
        graphs = build_temporal_graphs(flows, GC, encode_flows(flows, codec))
        labels = {f.flow_id: 0 for f in flows}
        config = small_model()
        params = init_params(config, codec.feature_dim, GC, Rng(0))
        result = train(graphs, None, labels, params,
                       TrainConfig(epochs=5, lr=0.01, seed=0), config, GC)
        prepared = [prepare_graph(g, GC) for g in graphs]
        preds = predict_flows(prepared, result.params, config)
        assert all(p == 0 for p in preds.values())

    def test_overfits_separable_synthetic(self):
        records = feature_pattern(n_flows=120, seed=1)
        vocab = vocabulary_for(records)
        codec = fit_codec(records)
        graphs = build_temporal_graphs(records, GC,
                                       encode_flows(records, codec))
        labels = {r.flow_id: r.label for r in records}
        config = small_model(num_classes=vocab.num_classes)
        params = init_params(config, codec.feature_dim, GC, Rng(1))
        result = train(graphs, None, labels, params,
                       TrainConfig(epochs=40, lr=0.005, seed=1), config, GC)
        prepared = [prepare_graph(g, GC) for g in graphs]
        preds = predict_flows(prepared, result.params, config)
        y_true = [labels[i] for i in sorted(preds)]
        y_pred = [preds[i] for i in sorted(preds)]
        assert f1_scores(y_true, y_pred, 2)[1] > 0.9

    def test_identical_seeds_identical_logs(self):
        records = feature_pattern(n_flows=60, seed=2)
        data, config = prepared_dataset(records)
        runs = []
        for _ in range(2):
            params = init_params(config, data.codec.feature_dim, GC, Rng(5))
            result = train(data.train_graphs, data.val_graphs, data.labels,
                           params, TrainConfig(epochs=4, lr=0.01, seed=5),
                           config, GC)
            runs.append(result.log)
        assert runs[0] == runs[1]

    def test_no_labeled_flows_raises(self):
        flows = sort_flows([mk_flow(i, i * 0.5, i * 0.5 + 0.1)
                            for i in range(5)])
        codec = fit_codec(flows)
        graphs = build_temporal_graphs(flows, GC, encode_flows(flows, codec))
        config = small_model()
        params = init_params(config, codec.feature_dim, GC, Rng(0))
        with pytest.raises(EmptyDataError):
            train(graphs, None, {f.flow_id: UNLABELED for f in flows}, params,
                  TrainConfig(epochs=1), config, GC)


class TestEvaluate:
    def test_multi_window_flow_scored_once_with_last_prediction(self):
        # one long flow spans two target windows; predict_flows keeps the
        # later window's argmax
        flows = sort_flows([mk_flow(0, 0.0, 6.0, src="a"),
                            mk_flow(1, 1.0, 1.2, src="a"),
                            mk_flow(2, 6.5, 6.8, src="b")])
        codec = fit_codec(flows)
        graphs = build_temporal_graphs(flows, GC, encode_flows(flows, codec))
        config = small_model()
        params = init_params(config, codec.feature_dim, GC, Rng(2))
        prepared = [prepare_graph(g, GC) for g in graphs]
        preds_all = predict_flows(prepared, params, config)
        preds_last_only = predict_flows(prepared[-1:], params, config)
        assert preds_all[0] == preds_last_only[0]

    def test_empty_test_raises_empty_data(self):
        flows = sort_flows([mk_flow(0, 0.0, 0.1)])
        codec = fit_codec(flows)
        graphs = build_temporal_graphs(flows, GC, encode_flows(flows, codec))
        config = small_model()
        params = init_params(config, codec.feature_dim, GC, Rng(2))
        from flowgnn.ingest import LabelVocabulary
        with pytest.raises(EmptyDataError, match="no target flows"):
            evaluate(params, graphs, LabelVocabulary(("Benign", "X")),
                     {0: UNLABELED}, config, GC)


class TestMlpBaseline:
    def test_single_class_perfect(self):
        flows = [mk_flow(i, float(i), i + 0.1, label=0) for i in range(30)]
        codec = fit_codec(flows)
        from flowgnn.ingest import LabelVocabulary
        vocab = LabelVocabulary(("Benign", "X"))
        report = mlp_baseline(flows[:20], flows[20:25], flows[25:], codec,
                              vocab, TrainConfig(epochs=5, lr=0.01, seed=0))
        assert report.multiclass_weighted_f1 == 1.0

    def test_topology_labels_defeat_flat_model(self):
        records = topology_pattern(n_windows=18, seed=5)
        data, config = prepared_dataset(records)
        mlp_report = mlp_baseline(data.train_flows, data.val_flows,
                                  data.test_flows, data.codec, data.vocab,
                                  TrainConfig(epochs=40, lr=0.01, seed=0))
        params = init_params(config, data.codec.feature_dim, GC, Rng(3))
        result = train(data.train_graphs, data.val_graphs, data.labels,
                       params, TrainConfig(epochs=40, lr=0.005, seed=3),
                       config, GC)
        gnn_report = evaluate(result.params, data.test_graphs, data.vocab,
                              data.labels, config, GC)
        assert gnn_report.multiclass_macro_f1 > \
            mlp_report.multiclass_macro_f1 + 0.1

    def test_feature_labels_make_mlp_competitive(self):
        records = feature_pattern(n_flows=400, seed=6)
        data, config = prepared_dataset(records, neighbor_aggregator="mean")
        mlp_report = mlp_baseline(data.train_flows, data.val_flows,
                                  data.test_flows, data.codec, data.vocab,
                                  TrainConfig(epochs=60, lr=0.01, seed=0))
        params = init_params(config, data.codec.feature_dim, GC, Rng(4))
        result = train(data.train_graphs, data.val_graphs, data.labels,
                       params, TrainConfig(epochs=40, lr=0.01, seed=4),
                       config, GC)
        gnn_report = evaluate(result.params, data.test_graphs, data.vocab,
                              data.labels, config, GC)
        assert abs(mlp_report.multiclass_macro_f1
                   - gnn_report.multiclass_macro_f1) < 0.2


class TestUndersampling:
    def make_data(self):
        records = temporal_pattern(n_windows=16, seed=8)
        vocab = vocabulary_for(records)
        return prepare_splits(records, vocab, GC, (1.0, 0.0, 0.0)), vocab

    def test_monotone_selection_across_fractions(self):
        data, vocab = self.make_data()
        order = undersample_order(data.train_graphs, data.labels,
                                  vocab.num_classes)
        prev: set = set()
        for fraction in (0.05, 0.1, 0.2, 0.5, 1.0):
            picked, _ = select_fraction(order, data.train_graphs, data.labels,
                                        vocab.num_classes, fraction)
            assert prev.issubset(set(picked))
            prev = set(picked)

    def test_proportions_within_tolerance_at_02(self):
        data, vocab = self.make_data()
        order = undersample_order(data.train_graphs, data.labels,
                                  vocab.num_classes)
        picked, notes = select_fraction(order, data.train_graphs, data.labels,
                                        vocab.num_classes, 0.2)
        assert not any("deviate" in n for n in notes)

    def test_every_class_kept_at_tiny_fraction(self):
        data, vocab = self.make_data()
        order = undersample_order(data.train_graphs, data.labels,
                                  vocab.num_classes)
        picked, _ = select_fraction(order, data.train_graphs, data.labels,
                                    vocab.num_classes, 0.01)
        counts = np.zeros(vocab.num_classes)
        for i in picked:
            for node in data.train_graphs[i].target.flow_nodes:
                label = data.labels.get(node.flow_id, UNLABELED)
                if label != UNLABELED:
                    counts[label] += 1
        assert (counts > 0).all()


class TestHarnesses:
    def test_ablation_emits_three_rows_on_shared_test_windows(self):
        records = temporal_pattern(n_windows=10, seed=9)
        data, config = prepared_dataset(records)
        results = ablation_suite(data, config, GC,
                                 TrainConfig(epochs=3, lr=0.01, seed=1),
                                 pretrain_epochs=2)
        assert [name for name, _ in results] == \
            ["spatial_only", "temporal", "pretrained"]
        supports = [tuple(c.support for c in r.per_class)
                    for _, r in results]
        assert supports[0] == supports[1] == supports[2]

    def test_fewshot_row_per_fraction_and_mode(self):
        records = temporal_pattern(n_windows=10, seed=10)
        data, config = prepared_dataset(records)
        plan = FewShotPlan(reference_score=0.9, fractions=(0.2, 0.5),
                           modes=("none",), epochs=2, lr=0.01)
        rows = fewshot(plan, {"none": None}, data, config, GC, seed=0)
        assert len(rows) == 2
        assert {r["fraction"] for r in rows} == {0.2, 0.5}
        for row in rows:
            assert row["pct_loss"] == pytest.approx(
                100 * (0.9 - row["macro_f1"]) / 0.9)

    def test_training_duration_monotone_in_epochs(self):
        records = feature_pattern(n_flows=200, seed=12)
        data, config = prepared_dataset(records)
        seconds = []
        for epochs in (2, 12):
            params = init_params(config, data.codec.feature_dim, GC, Rng(0))
            result = train(data.train_graphs, None, data.labels, params,
                           TrainConfig(epochs=epochs, lr=0.01, seed=0),
                           config, GC)
            seconds.append(result.seconds)
        assert seconds[0] < seconds[1]

    def test_full_fraction_recovers_reference_configuration(self):
        records = temporal_pattern(n_windows=8, seed=11)
        data, config = prepared_dataset(records)
        order = undersample_order(data.train_graphs, data.labels,
                                  config.num_classes)
        picked, _ = select_fraction(order, data.train_graphs, data.labels,
                                    config.num_classes, 1.0)
        labeled = [i for i, g in enumerate(data.train_graphs)
                   if any(data.labels.get(n.flow_id, UNLABELED) != UNLABELED
                          for n in g.target.flow_nodes)]
        assert picked == labeled
