import pytest

from conftest import records_to_csv, write_schema
from flowgnn.cli import main
from flowgnn.synth import temporal_pattern

FAST = [
    "--set", "model.hidden_size=8",
    "--set", "model.classifier_hidden=8",
    "--set", "train.epochs=2",
    "--set", "pretrain.epochs=1",
    "--set", "finetune.epochs=2",
    "--set", "graph.window_memory=2",
]


@pytest.fixture()
def cache(tmp_path):
    records = temporal_pattern(n_windows=8, seed=1)
    csv_path = records_to_csv(records, tmp_path / "flows.csv")
    schema = write_schema(tmp_path / "schema.txt")
    out = tmp_path / "flows.pptf"
    code = main(["ingest", "--input", str(csv_path), "--schema", str(schema),
                 "--out", str(out)])
    assert code == 0
    return out


class TestIngest:
    def test_valid_csv_exit_zero_counts_printed(self, tmp_path, capsys):
        records = temporal_pattern(n_windows=3, seed=2)
        csv_path = records_to_csv(records, tmp_path / "f.csv")
        schema = write_schema(tmp_path / "s.txt")
        code = main(["ingest", "--input", str(csv_path), "--schema",
                     str(schema), "--out", str(tmp_path / "f.pptf")])
        assert code == 0
        out = capsys.readouterr().out
        assert f"accepted {len(records)}" in out and "rejected 0" in out

    def test_missing_column_exit_two_names_column(self, tmp_path, capsys):
        (tmp_path / "bad.csv").write_text("start,end\n0,1\n", encoding="utf-8")
        schema = write_schema(tmp_path / "s.txt")
        code = main(["ingest", "--input", str(tmp_path / "bad.csv"),
                     "--schema", str(schema), "--out",
                     str(tmp_path / "x.pptf")])
        assert code == 2
        assert "src" in capsys.readouterr().err

    def test_reingest_byte_identical(self, tmp_path):
        records = temporal_pattern(n_windows=3, seed=3)
        csv_path = records_to_csv(records, tmp_path / "f.csv")
        schema = write_schema(tmp_path / "s.txt")
        a, b = tmp_path / "a.pptf", tmp_path / "b.pptf"
        assert main(["ingest", "--input", str(csv_path), "--schema",
                     str(schema), "--out", str(a)]) == 0
        assert main(["ingest", "--input", str(csv_path), "--schema",
                     str(schema), "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()


class TestTrain:
    def test_train_writes_checkpoint_and_reports(self, tmp_path, cache):
        out_dir = tmp_path / "run"
        code = main(["train", "--cache", str(cache), "--out-dir",
                     str(out_dir), "--seed", "3", *FAST])
        assert code == 0
        files = {p.name.split("-")[0] for p in out_dir.iterdir()}
        assert {"checkpoint", "metrics", "confusion", "summary", "config",
                "epochs", "timing"} <= files

    def test_rerun_byte_identical_checkpoints_and_reports(self, tmp_path,
                                                          cache):
        out_dir = tmp_path / "run"
        args = ["train", "--cache", str(cache), "--out-dir", str(out_dir),
                "--seed", "7", *FAST]

        def snapshot():
            return {p.name: p.read_bytes() for p in sorted(out_dir.iterdir())
                    if "timing" not in p.name}

        assert main(args) == 0
        first = snapshot()
        assert main(args) == 0
        second = snapshot()
        assert first.keys() == second.keys()
        for name in first:
            assert first[name] == second[name], name

    def test_seed_env_fallback(self, tmp_path, cache, monkeypatch):
        out_dir = tmp_path / "env"
        monkeypatch.setenv("PPT_SEED", "11")
        assert main(["train", "--cache", str(cache), "--out-dir",
                     str(out_dir), *FAST]) == 0
        config = next(out_dir.glob("config-*.resolved")).read_text()
        assert "seed = 11" in config
        provenance = next(out_dir.glob("provenance-*.txt")).read_text()
        assert "seed = env" in provenance

    def test_rerun_from_echoed_config_reproduces_outputs(self, tmp_path,
                                                         cache):
        out_dir = tmp_path / "echo"
        assert main(["train", "--cache", str(cache), "--out-dir",
                     str(out_dir), "--seed", "4", *FAST]) == 0
        echoed = next(out_dir.glob("config-*.resolved"))
        first = {p.name: p.read_bytes() for p in sorted(out_dir.iterdir())
                 if "timing" not in p.name and "provenance" not in p.name}
        # rerun with the echoed file instead of --set/--seed flags
        assert main(["train", "--cache", str(cache), "--out-dir",
                     str(out_dir), "--config", str(echoed)]) == 0
        second = {p.name: p.read_bytes() for p in sorted(out_dir.iterdir())
                  if "timing" not in p.name and "provenance" not in p.name}
        assert first.keys() == second.keys()
        for name in first:
            assert first[name] == second[name], name


class TestConfigResolution:
    def test_flag_overrides_file_overrides_default(self, tmp_path, cache):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("train.epochs = 3\ntrain.lr = 0.002\n",
                       encoding="utf-8")
        out_dir = tmp_path / "out"
        code = main(["train", "--cache", str(cache), "--out-dir",
                     str(out_dir), "--config", str(cfg), "--seed", "1",
                     "--set", "train.lr=0.004",
                     "--set", "model.hidden_size=8",
                     "--set", "model.classifier_hidden=8",
                     "--set", "graph.window_memory=2"])
        assert code == 0
        text = next(out_dir.glob("config-*.resolved")).read_text()
        assert "train.epochs = 3" in text
        assert "train.lr = 0.004" in text
        assert "train.batch_size = 1" in text
        provenance = next(out_dir.glob("provenance-*.txt")).read_text()
        assert "train.epochs = file" in provenance
        assert "train.lr = flag" in provenance
        assert "train.batch_size = default" in provenance
        assert "finetune.lr = default" in provenance
        assert "finetune.lr = 0.01" in text

    def test_unknown_config_key_exit_two(self, tmp_path, cache):
        assert main(["train", "--cache", str(cache), "--out-dir",
                     str(tmp_path / "o"), "--set", "nope.key=1"]) == 2

    def test_unknown_flag_exits_with_usage(self, cache, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--cache", str(cache), "--bogus-flag", "x"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err


class TestFinetuneEvaluate:
    def test_finetune_requires_checkpoint_flag(self, cache, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["finetune", "--cache", str(cache), "--out-dir", "/tmp/x"])
        assert exc.value.code == 2

    def test_pretrain_then_finetune_then_evaluate(self, tmp_path, cache):
        pre_dir = tmp_path / "pre"
        assert main(["pretrain", "--cache", str(cache), "--out-dir",
                     str(pre_dir), "--mode", "in-context", "--seed", "1",
                     *FAST]) == 0
        ckpt = next(pre_dir.glob("checkpoint-*.pptg"))
        fine_dir = tmp_path / "fine"
        assert main(["finetune", "--from-checkpoint", str(ckpt), "--cache",
                     str(cache), "--out-dir", str(fine_dir), "--seed", "1",
                     *FAST]) == 0
        fine_ckpt = next(fine_dir.glob("checkpoint-*.pptg"))
        eval_dir = tmp_path / "eval"
        assert main(["evaluate", "--checkpoint", str(fine_ckpt), "--cache",
                     str(cache), "--out-dir", str(eval_dir)]) == 0
        assert next(eval_dir.glob("metrics-*.csv")).exists()

    def test_evaluate_unlabeled_cache_exit_four(self, tmp_path, cache,
                                                capsys):
        train_dir = tmp_path / "t"
        assert main(["train", "--cache", str(cache), "--out-dir",
                     str(train_dir), "--seed", "2", *FAST]) == 0
        ckpt = next(train_dir.glob("checkpoint-*.pptg"))
        from conftest import mk_flow, sort_flows
        from flowgnn.ingest import write_flow_cache
        unlabeled = sort_flows([mk_flow(i, i * 0.5, i * 0.5 + 0.1)
                                for i in range(4)])
        bare = tmp_path / "bare.pptf"
        write_flow_cache(unlabeled, bare)
        code = main(["evaluate", "--checkpoint", str(ckpt), "--cache",
                     str(bare), "--out-dir", str(tmp_path / "e")])
        assert code == 4
        assert "no target flows" in capsys.readouterr().err

    def test_evaluate_rejects_pretrain_checkpoint(self, tmp_path, cache):
        pre_dir = tmp_path / "pre2"
        assert main(["pretrain", "--cache", str(cache), "--out-dir",
                     str(pre_dir), "--seed", "1", *FAST]) == 0
        ckpt = next(pre_dir.glob("checkpoint-*.pptg"))
        code = main(["evaluate", "--checkpoint", str(ckpt), "--cache",
                     str(cache), "--out-dir", str(tmp_path / "e2")])
        assert code == 3


class TestHarnessCommands:
    def test_ablate_emits_three_variant_rows(self, tmp_path, cache):
        out_dir = tmp_path / "abl"
        assert main(["ablate", "--cache", str(cache), "--out-dir",
                     str(out_dir), "--seed", "1", *FAST]) == 0
        rows = next(out_dir.glob("ablation-*.csv")).read_text().splitlines()
        assert len(rows) == 4  # header + 3 variants
        assert rows[1].startswith("spatial_only,")
        assert rows[2].startswith("temporal,")
        assert rows[3].startswith("pretrained,")

    def test_fewshot_row_per_fraction_mode(self, tmp_path, cache):
        out_dir = tmp_path / "fs"
        code = main(["fewshot", "--cache", str(cache), "--out-dir",
                     str(out_dir), "--seed", "1", *FAST,
                     "--set", "fewshot.fractions=0.3,0.6",
                     "--set", "fewshot.modes=in-context,none",
                     "--set", "fewshot.reference_score=0.9"])
        assert code == 0
        rows = next(out_dir.glob("fewshot-*.csv")).read_text().splitlines()
        assert len(rows) == 1 + 2 * 2
        timing = next(out_dir.glob("fewshot_timing-*.csv")) \
            .read_text().splitlines()
        assert len(timing) == len(rows)

    def test_fewshot_out_of_context_requires_corpus(self, tmp_path, cache):
        code = main(["fewshot", "--cache", str(cache), "--out-dir",
                     str(tmp_path / "x"), *FAST,
                     "--set", "fewshot.modes=out-of-context"])
        assert code == 2
