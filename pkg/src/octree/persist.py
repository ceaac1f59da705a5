"""Run directories: line-delimited logs, the manifest, augmented CSV export and the text report."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .data import Dataset, to_csv
from .dsl import Rule, render
from .generator import Exchange
from .optimizer import realize

MANIFEST = "manifest.json"
TRAJECTORY_LOG = "trajectory.jsonl"
EXCHANGES_LOG = "exchanges.jsonl"
RULES_FILE = "rules.json"
AUGMENTED_CSV = "augmented.csv"
REPORT = "report.txt"
NAME_MAP = "anonymization.csv"


class CorruptLogError(ValueError):
    pass


def _dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


def atomic_write(path: str | Path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class JsonlLog:
    """Append-only line-delimited JSON log; every record is flushed as written."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.touch()

    def append(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(_dumps(record) + "\n")
            fh.flush()


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorruptLogError(f"{path}:{i}: {exc}") from None
    return records


class RunDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        # a fresh run replaces the logs of any previous run in this directory
        for name in (TRAJECTORY_LOG, EXCHANGES_LOG):
            (self.root / name).write_text("", encoding="utf-8")
        self.trajectory = JsonlLog(self.root / TRAJECTORY_LOG)
        self.exchanges = JsonlLog(self.root / EXCHANGES_LOG)

    def path(self, name: str) -> Path:
        return self.root / name

    def log_event(self, record: dict) -> None:
        self.trajectory.append(record)

    def log_exchange(self, ex: Exchange) -> None:
        self.exchanges.append(asdict(ex))

    def write_manifest(self, manifest: RunManifest) -> None:
        for ref in manifest.files:
            if not (self.root / ref).exists():
                raise FileNotFoundError(f"manifest references missing file {ref}")
        atomic_write(self.root / MANIFEST, json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")

    def write_text(self, name: str, text: str) -> None:
        atomic_write(self.root / name, text)


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    config: dict
    dataset: dict
    seeds: dict
    name_map: str | None
    accepted_rules: list
    metrics: dict
    files: list


def dataset_fingerprint(d: Dataset) -> dict:
    return {"rows": d.n_rows, "columns": len(d.schema), "sha256": d.fingerprint()}


def rules_to_records(rules: Iterable[Rule]) -> list[dict]:
    return [{"column": r.new_column, "rule": render(r.expr), "origin": r.origin} for r in rules]


def export_augmented(d: Dataset, rules: Sequence[Rule], path: str | Path | None = None) -> str:
    """Original columns, then generated columns in acceptance order, then the target."""
    text = to_csv(realize(d, rules))
    if path is not None:
        atomic_write(path, text)
    return text


def relative_reduction(baseline: float, final: float) -> float | None:
    if baseline <= 0:
        return None
    return (baseline - final) / baseline


def format_reduction(baseline: float, final: float, accepted: bool = True) -> str:
    if not accepted:
        return "N/I"
    rel = relative_reduction(baseline, final)
    if rel is None:
        return "N/A"
    if rel <= 0:
        return "N/I"
    return f"{100 * rel:.1f}% relative reduction"


def report(manifest: dict, events: Sequence[dict]) -> str:
    """Plain-text summary of a run from its manifest and trajectory log records."""
    metrics = manifest["metrics"]
    metric = metrics.get("metric", "error")
    accepted = manifest["accepted_rules"]
    lines = [f"run {manifest['run_id']}", ""]
    for split in ("val", "test"):
        if f"{split}_baseline" not in metrics:
            continue
        base, final = metrics[f"{split}_baseline"], metrics[f"{split}_final"]
        lines.append(
            f"{split:<5} {metric}: baseline {base:.4f} -> final {final:.4f}  "
            f"({format_reduction(base, final, bool(accepted))})"
        )
    lines += ["", "accepted rules:"]
    if accepted:
        lines += [f"  {r['column']} = {r['rule']}" for r in accepted]
    else:
        lines.append("  none (N/I)")
    lines += ["", "per-round scores:", f"  {'iter':>4} {'round':>5} {metric:>10}  rule"]
    for ev in events:
        if ev.get("event") == "entry":
            lines.append(f"  {ev['iteration']:>4} {ev['round']:>5} {ev['value']:>10.4f}  {ev['rule']}")
        elif ev.get("event") == "skip":
            lines.append(f"  {ev['iteration']:>4} {ev['round']:>5} {'skipped':>10}  {ev['reason']}")
        elif ev.get("event") == "decision":
            verdict = "accepted" if ev["accepted"] else "stopped"
            lines.append(f"  {ev['iteration']:>4} {'-':>5} {verdict:>10}  {ev['reason']}")
    return "\n".join(lines) + "\n"


def check_selection(events: Sequence[dict]) -> list[str]:
    """Selection-optimality violations found by rescanning trajectory log records."""
    problems = []
    entries: dict[int, list[dict]] = {}
    for ev in events:
        if ev.get("event") == "entry":
            entries.setdefault(ev["iteration"], []).append(ev)
    for ev in events:
        if ev.get("event") != "selected":
            continue
        pool = entries.get(ev["iteration"], [])
        if not pool:
            problems.append(f"iteration {ev['iteration']}: selection without entries")
            continue
        best = min(pool, key=lambda e: (e["value"], e["round"]))
        if best["rule"] != ev["rule"] or best["value"] != ev["value"]:
            problems.append(
                f"iteration {ev['iteration']}: selected {ev['rule']!r} ({ev['value']}) "
                f"but best is {best['rule']!r} ({best['value']})"
            )
    return problems
