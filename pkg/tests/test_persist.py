import json
from dataclasses import asdict

import numpy as np
import pytest

from octree.data import load_csv
from octree.generator import Exchange
from octree.optimizer import rule_from_text
from octree.persist import (
    CorruptLogError,
    JsonlLog,
    RunDir,
    RunManifest,
    atomic_write,
    check_selection,
    dataset_fingerprint,
    export_augmented,
    format_reduction,
    read_jsonl,
    relative_reduction,
    report,
)
from octree.synthetic import planted_dataset


def manifest(**over):
    base = dict(
        run_id="abc",
        config={},
        dataset={},
        seeds={},
        name_map=None,
        accepted_rules=[{"column": "x6", "rule": "(x1 * x5)", "origin": "round(1)"}],
        metrics={"metric": "error_rate", "val_baseline": 0.2, "val_final": 0.16},
        files=[],
    )
    base.update(over)
    return RunManifest(**base)


def entry(it, rnd, value, rule):
    return {"event": "entry", "iteration": it, "round": rnd, "value": value, "rule": rule, "metric": "error_rate"}


class TestReduction:
    def test_formula(self):
        assert relative_reduction(0.20, 0.16) == pytest.approx(0.2)
        assert format_reduction(0.20, 0.16) == "20.0% relative reduction"

    def test_no_improvement_markers(self):
        assert format_reduction(0.2, 0.2) == "N/I"
        assert format_reduction(0.2, 0.1, accepted=False) == "N/I"
        assert format_reduction(0.0, 0.0) == "N/A"


class TestReport:
    def test_contents(self):
        events = [entry(1, 0, 0.2, "x6 = (x1 + x5)"), entry(1, 1, 0.16, "x6 = (x1 * x5)")]
        text = report(asdict(manifest()), events)
        assert "baseline 0.2000 -> final 0.1600  (20.0% relative reduction)" in text
        assert "  x6 = (x1 * x5)" in text
        assert "per-round scores:" in text
        assert report(asdict(manifest()), events) == text

    def test_no_rules(self):
        text = report(asdict(manifest(accepted_rules=[], metrics={"metric": "error_rate", "val_baseline": 0.2, "val_final": 0.2})), [])
        assert "none (N/I)" in text
        assert "(N/I)" in text.splitlines()[2]


class TestLogs:
    def test_jsonl_round_trip(self, tmp_path):
        log = JsonlLog(tmp_path / "a.jsonl")
        log.append({"b": 1, "a": "x"})
        log.append({"c": [1, 2]})
        assert (tmp_path / "a.jsonl").read_text().splitlines()[0] == '{"a": "x", "b": 1}'
        assert read_jsonl(tmp_path / "a.jsonl") == [{"a": "x", "b": 1}, {"c": [1, 2]}]

    def test_corrupt_line(self, tmp_path):
        (tmp_path / "a.jsonl").write_text('{"a": 1}\n{broken\n')
        with pytest.raises(CorruptLogError, match=":2:"):
            read_jsonl(tmp_path / "a.jsonl")

    def test_atomic_write_replaces(self, tmp_path):
        p = tmp_path / "f.txt"
        atomic_write(p, "one")
        atomic_write(p, "two")
        assert p.read_text() == "two"
        assert [q.name for q in tmp_path.iterdir()] == ["f.txt"]

    def test_exchange_log_flushed_per_record(self, tmp_path):
        run = RunDir(tmp_path)
        run.log_exchange(Exchange(1, "p_gen", "scripted", "prompt", "x6 = x1", 0.01))
        # readable before the run finishes, as after a crash
        assert read_jsonl(tmp_path / "exchanges.jsonl")[0]["response"] == "x6 = x1"

    def test_manifest_requires_files(self, tmp_path):
        run = RunDir(tmp_path)
        with pytest.raises(FileNotFoundError):
            run.write_manifest(manifest(files=["missing.csv"]))
        run.write_manifest(manifest(files=["trajectory.jsonl"]))
        assert json.loads((tmp_path / "manifest.json").read_text())["run_id"] == "abc"


class TestSelectionCheck:
    def test_ok(self):
        events = [entry(1, 0, 0.2, "a"), entry(1, 1, 0.1, "b"), entry(1, 2, 0.1, "c")]
        events.append({"event": "selected", "iteration": 1, "rule": "b", "value": 0.1})
        assert check_selection(events) == []

    def test_tampered(self):
        events = [entry(1, 0, 0.2, "a"), entry(1, 1, 0.1, "b")]
        events.append({"event": "selected", "iteration": 1, "rule": "a", "value": 0.2})
        assert len(check_selection(events)) == 1


class TestExport:
    def test_zero_rules_same_columns(self, tmp_path):
        d = planted_dataset(n=50)
        text = export_augmented(d, [], tmp_path / "out.csv")
        assert text.splitlines()[0] == "x1,x2,x3,x4,x5,y"

    def test_one_rule_before_target_and_round_trip(self, tmp_path):
        d = planted_dataset(n=50)
        rule = rule_from_text("x6", "x6 = x1 * x5 / 3", d.schema)
        export_augmented(d, [rule], tmp_path / "out.csv")
        back = load_csv(tmp_path / "out.csv", "y", "classification")
        assert back.feature_names == ["x1", "x2", "x3", "x4", "x5", "x6"]
        assert np.allclose(back.column("x6"), d.column("x1") * d.column("x5") / 3, rtol=0, atol=1e-12)
        assert np.array_equal(back.column("x1"), d.column("x1"))

    def test_fingerprint_changes_with_one_cell(self):
        d = planted_dataset(n=50)
        e = planted_dataset(n=50, noise=0.1)
        assert dataset_fingerprint(d)["sha256"] != dataset_fingerprint(e)["sha256"]
        assert dataset_fingerprint(d) == dataset_fingerprint(planted_dataset(n=50))
