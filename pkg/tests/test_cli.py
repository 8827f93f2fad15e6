from __future__ import annotations

import json
from types import SimpleNamespace

import numpy as np
import pytest

from kbvqa.cli import build_parser, main


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


@pytest.fixture(scope="module")
def ws(bundle, tmp_path_factory):
    """One full CLI workflow over the planted fixture, shared by the tests."""
    root = tmp_path_factory.mktemp("cli_ws")
    d = SimpleNamespace(**{n: root / n for n in (
        "ingest", "index", "retrieve", "run", "probe",
        "mine_prki", "mine_vtki", "export", "score", "report", "sweep",
    )})
    kb_flags = ["--kb", str(bundle.entries_path), "--kb-manifest", str(bundle.kb_manifest)]
    q_flag = ["--queries", str(bundle.queries_path)]

    assert main(["ingest", *kb_flags, *q_flag, "--out-dir", str(d.ingest)]) == 0
    assert main(["index", *kb_flags, "--kb-embeddings", str(bundle.kb_embeddings),
                 "--out-dir", str(d.index)]) == 0
    assert main(["retrieve", *kb_flags, "--index", str(d.index / "index.npz"),
                 *q_flag, "--query-manifest", str(bundle.query_manifest),
                 "--query-embeddings", str(bundle.query_embeddings),
                 "--k", "10", "--out-dir", str(d.retrieve)]) == 0
    retrievals = ["--retrievals", str(d.retrieve / "retrieval_results.jsonl")]
    backend = ["--mock-script", str(bundle.mock_script)]
    assert main(["run", "--variant", "core", *kb_flags, *q_flag, *retrievals,
                 *backend, "--top-k", "5", "--workers", "2",
                 "--out-dir", str(d.run)]) == 0
    assert main(["probe-unimodal", *kb_flags, *q_flag, *retrievals, *backend,
                 "--top-k", "5", "--out-dir", str(d.probe)]) == 0
    traces = str(d.run / "traces.jsonl")
    assert main(["mine-prki", "--traces-int", traces, "--traces-ext", traces,
                 *q_flag, "--out-dir", str(d.mine_prki)]) == 0
    assert main(["mine-vtki", "--probe-traces", str(d.probe / "probe_traces.jsonl"),
                 *kb_flags, *q_flag, "--out-dir", str(d.mine_vtki)]) == 0
    assert main(["export-training", "--records",
                 str(d.mine_prki / "d_int.jsonl"), str(d.mine_prki / "d_ext.jsonl"),
                 "--objective", "prki", *kb_flags, *q_flag,
                 "--out-dir", str(d.export)]) == 0
    score_flags = ["--traces", traces, *q_flag, *retrievals, *kb_flags]
    assert main(["score", *score_flags, "--out-dir", str(d.score)]) == 0
    assert main(["report", *score_flags, "--compare-to", str(d.score / "report.json"),
                 "--out-dir", str(d.report)]) == 0
    assert main(["sweep", "--top-m", "5", "--variant", "core", *kb_flags, *q_flag,
                 *retrievals, *backend, "--out-dir", str(d.sweep)]) == 0
    return d


class TestWorkflowArtifacts:
    def test_ingest_summary(self, ws):
        summary = json.loads((ws.ingest / "ingest_summary.json").read_text())
        assert summary == {
            "entries": 100, "queries": 20,
            "splits": {"other": 6, "unseen_e": 7, "unseen_q": 7},
        }
        assert len(read_jsonl(ws.ingest / "entries_normalized.jsonl")) == 100
        assert len(read_jsonl(ws.ingest / "queries_normalized.jsonl")) == 20

    def test_index_artifact(self, ws):
        saved = np.load(ws.index / "index.npz", allow_pickle=True)
        assert list(saved["entry_ids"])[:2] == ["e000", "e001"]
        assert saved["matrix"].shape == (100, 16)
        assert saved["matrix"].dtype == np.float32

    def test_retrieval_results(self, ws):
        rows = read_jsonl(ws.retrieve / "retrieval_results.jsonl")
        assert len(rows) == 20
        assert all(len(r["hits"]) == 10 for r in rows)

    def test_run_traces(self, ws):
        rows = read_jsonl(ws.run / "traces.jsonl")
        assert len(rows) == 20
        assert sum(1 for r in rows if r["prki_flag"] is True) == 12
        assert not any(r["failed"] for r in rows)

    def test_probe_traces(self, ws):
        rows = read_jsonl(ws.probe / "probe_traces.jsonl")
        assert sum(1 for r in rows if r["vtki_flag"] is True) == 9

    def test_prki_mining_outputs(self, ws):
        assert len(read_jsonl(ws.mine_prki / "d_int.jsonl")) == 6
        assert len(read_jsonl(ws.mine_prki / "d_ext.jsonl")) == 6
        counters = json.loads((ws.mine_prki / "mining_summary.json").read_text())
        assert counters["differing"] == 12 and counters["equal_answers"] == 8

    def test_vtki_mining_outputs(self, ws):
        assert len(read_jsonl(ws.mine_vtki / "d_v.jsonl")) == 5
        assert len(read_jsonl(ws.mine_vtki / "d_t.jsonl")) == 3
        counters = json.loads((ws.mine_vtki / "mining_summary.json").read_text())
        assert counters["gold_absent"] == 3

    def test_training_export(self, ws):
        rows = read_jsonl(ws.export / "training_prki.jsonl")
        assert len(rows) == 12
        assert all(r["bucket"] in ("d_int", "d_ext") for r in rows)

    def test_score_report(self, ws):
        report = json.loads((ws.score / "report.json").read_text())
        assert report["recall"] == {"1": 0.2, "2": 0.4, "5": 0.85, "10": 0.95}
        assert report["accuracy_overall"] == 1.0
        strata = {k: v["count"] for k, v in report["accuracy_by_stratum"].items()}
        assert strata == {"1": 4, "2": 4, "3-5": 9, ">5": 3}
        assert len(read_jsonl(ws.score / "verdicts.jsonl")) == 20

    def test_report_with_baseline(self, ws):
        assert (ws.report / "report.csv").exists()
        deltas = (ws.report / "deltas.csv").read_text().splitlines()
        assert deltas[0] == "metric,run_a_pct,run_b_pct,delta_pct"
        assert all(line.endswith("+0.0") for line in deltas[1:])

    def test_sweep_table(self, ws):
        assert (ws.sweep / "sweep.csv").read_text() == (
            "top_m,failed,accuracy_overall_pct,delta_vs_first_pct\n"
            "5,0,100.0,+0.0\n"
        )
        assert (ws.sweep / "traces_top5.jsonl").exists()
        assert (ws.sweep / "report_top5.json").exists()

    def test_run_config_records_resolution(self, ws):
        cfg = json.loads((ws.run / "run_config.json").read_text())
        assert cfg["command"] == "run"
        assert cfg["variant"] == "core"
        assert cfg["top_k"] == 5          # CLI value
        assert cfg["char_budget"] == 2000  # built-in default


class TestStdout:
    def test_retrieve_prints_recall(self, bundle, tmp_path, capsys):
        rc = main([
            "retrieve", "--kb", str(bundle.entries_path),
            "--kb-manifest", str(bundle.kb_manifest),
            "--kb-embeddings", str(bundle.kb_embeddings),
            "--queries", str(bundle.queries_path),
            "--query-manifest", str(bundle.query_manifest),
            "--query-embeddings", str(bundle.query_embeddings),
            "--k", "10", "--out-dir", str(tmp_path),
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "Recall@1 0.200  Recall@2 0.400  Recall@5 0.850  Recall@10 0.950" in out

    def test_run_prints_trace_summary(self, ws, bundle, tmp_path, capsys):
        rc = main([
            "run", "--variant", "core", "--kb", str(bundle.entries_path),
            "--kb-manifest", str(bundle.kb_manifest),
            "--queries", str(bundle.queries_path),
            "--retrievals", str(ws.retrieve / "retrieval_results.jsonl"),
            "--mock-script", str(bundle.mock_script),
            "--out-dir", str(tmp_path),
        ])
        assert rc == 0
        assert "20 traces, 0 failed, prki_true=12" in capsys.readouterr().out


class TestConfigFile:
    def _retrieve_args(self, bundle, out, extra=()):
        return [
            "retrieve", "--kb", str(bundle.entries_path),
            "--kb-manifest", str(bundle.kb_manifest),
            "--kb-embeddings", str(bundle.kb_embeddings),
            "--queries", str(bundle.queries_path),
            "--query-manifest", str(bundle.query_manifest),
            "--query-embeddings", str(bundle.query_embeddings),
            "--out-dir", str(out), *extra,
        ]

    def test_config_supplies_value(self, bundle, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"k": 3}))
        out = tmp_path / "out"
        assert main(self._retrieve_args(bundle, out, ["--config", str(cfg)])) == 0
        rows = read_jsonl(out / "retrieval_results.jsonl")
        assert all(len(r["hits"]) == 3 for r in rows)
        assert json.loads((out / "run_config.json").read_text())["k"] == 3

    def test_cli_flag_beats_config(self, bundle, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"k": 3}))
        out = tmp_path / "out"
        assert main(self._retrieve_args(
            bundle, out, ["--config", str(cfg), "--k", "2"])) == 0
        rows = read_jsonl(out / "retrieval_results.jsonl")
        assert all(len(r["hits"]) == 2 for r in rows)

    def test_unknown_config_key_rejected(self, bundle, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        rc = main(self._retrieve_args(bundle, tmp_path / "out",
                                      ["--config", str(cfg)]))
        assert rc == 2
        assert "unknown keys: ['bogus']" in capsys.readouterr().err

    def test_missing_config_file(self, bundle, tmp_path, capsys):
        rc = main(self._retrieve_args(bundle, tmp_path / "out",
                                      ["--config", str(tmp_path / "nope.json")]))
        assert rc == 2
        assert "cannot load config file" in capsys.readouterr().err

    def test_config_must_be_object(self, bundle, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("[1, 2]")
        rc = main(self._retrieve_args(bundle, tmp_path / "out",
                                      ["--config", str(cfg)]))
        assert rc == 2
        assert "must hold a JSON object" in capsys.readouterr().err


class TestExitCodes:
    def test_missing_required_flag(self, bundle, tmp_path, capsys):
        rc = main(["mine-prki", "--traces-int", "x.jsonl", "--traces-ext", "x.jsonl",
                   "--out-dir", str(tmp_path)])
        assert rc == 2
        assert "missing required --queries" in capsys.readouterr().err

    def test_backend_flags_are_exclusive(self, bundle, tmp_path, capsys):
        rc = main([
            "run", "--variant", "param", "--kb", str(bundle.entries_path),
            "--kb-manifest", str(bundle.kb_manifest),
            "--queries", str(bundle.queries_path),
            "--mock-script", "a.jsonl", "--endpoint-config", "b.json",
            "--out-dir", str(tmp_path),
        ])
        assert rc == 2
        assert "exactly one of --mock-script and --endpoint-config" in capsys.readouterr().err

    def test_no_backend_flag(self, bundle, tmp_path, capsys):
        rc = main([
            "run", "--variant", "param", "--kb", str(bundle.entries_path),
            "--kb-manifest", str(bundle.kb_manifest),
            "--queries", str(bundle.queries_path), "--out-dir", str(tmp_path),
        ])
        assert rc == 2

    def test_partial_failure_exits_one(self, ws, bundle, tmp_path):
        # drop one scripted stage so exactly one trace fails
        kept = [
            line for line in bundle.mock_script.read_text().splitlines()
            if not (json.loads(line)["query_id"] == "q19"
                    and json.loads(line)["stage"] == "core_param")
        ]
        script = tmp_path / "script.jsonl"
        script.write_text("\n".join(kept) + "\n")
        rc = main([
            "run", "--variant", "core", "--kb", str(bundle.entries_path),
            "--kb-manifest", str(bundle.kb_manifest),
            "--queries", str(bundle.queries_path),
            "--retrievals", str(ws.retrieve / "retrieval_results.jsonl"),
            "--mock-script", str(script), "--out-dir", str(tmp_path / "out"),
        ])
        assert rc == 1
        rows = read_jsonl(tmp_path / "out" / "traces.jsonl")
        failed = [r["query_id"] for r in rows if r["failed"]]
        assert failed == ["q19"]

    def test_bad_variant_choice_is_argparse_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["run", "--variant", "banana"])
        assert exc.value.code == 2

    def test_bad_workers_value(self, bundle, tmp_path, capsys):
        rc = main([
            "retrieve", "--kb", str(bundle.entries_path),
            "--kb-manifest", str(bundle.kb_manifest),
            "--kb-embeddings", str(bundle.kb_embeddings),
            "--queries", str(bundle.queries_path),
            "--query-manifest", str(bundle.query_manifest),
            "--query-embeddings", str(bundle.query_embeddings),
            "--workers", "0", "--out-dir", str(tmp_path),
        ])
        assert rc == 2
        assert "--workers must be positive" in capsys.readouterr().err


class TestHelpGoldens:
    def _golden_check(self, text, path):
        assert path.exists(), f"golden missing: {path}"
        assert text == path.read_text(encoding="utf-8")

    def test_main_help(self, goldens_dir, monkeypatch):
        monkeypatch.setenv("COLUMNS", "100")
        self._golden_check(build_parser().format_help(),
                           goldens_dir / "help_main.golden.txt")

    def test_run_help(self, goldens_dir, monkeypatch):
        import argparse
        monkeypatch.setenv("COLUMNS", "100")
        parser = build_parser()
        sub = next(a for a in parser._actions
                   if isinstance(a, argparse._SubParsersAction))
        self._golden_check(sub.choices["run"].format_help(),
                           goldens_dir / "help_run.golden.txt")
