"""Command-line entry point: ``octree run|transfer|inspect|augment``.

Configuration comes from a YAML/JSON file; ``--set section.key=value``
flags override file values (flags win).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import data as data_mod
from .data import DataError, Dataset, SplitSpec, anonymize, fit_minmax, fit_ordinal, load_csv, split, write_name_map
from .dsl import Rule, RuleError
from .generator import BackendError, ChatAPIBackend, GeneratorSession, RandomBackend, ScriptedBackend
from .optimizer import LoopConfig, OptimizationError, Splits, generate_features, rule_from_text, transfer
from .persist import (
    AUGMENTED_CSV,
    EXCHANGES_LOG,
    NAME_MAP,
    REPORT,
    RULES_FILE,
    TRAJECTORY_LOG,
    CorruptLogError,
    RunDir,
    RunManifest,
    check_selection,
    dataset_fingerprint,
    export_augmented,
    format_reduction,
    read_jsonl,
    report,
    rules_to_records,
)
from .predictor import PredictorConfig

log = logging.getLogger("octree")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_BACKEND = 4
EXIT_VALIDATION = 5

BUILTIN_PLANTED = "builtin:planted"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "scripted"
    rules: tuple[str, ...] = ()
    script_file: str | None = None
    seed: int = 0
    max_depth: int = 3
    endpoint: str = "http://localhost:8000"
    model: str = ""
    temperature: float = 0.7
    max_tokens: int = 512
    timeout: float = 60.0
    retries: int = 2
    api_key_env: str = "OPENAI_API_KEY"


@dataclass(frozen=True)
class CliConfig:
    dataset: str
    target: str
    task: str = "classification"
    context_mode: str = "agnostic"
    objective: str | None = None
    descriptions: dict = field(default_factory=dict)
    output_dir: str = "run"
    split: SplitSpec = field(default_factory=SplitSpec)
    loop: LoopConfig = field(default_factory=LoopConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["split"]["fractions"] = list(self.split.fractions)
        out["backend"]["rules"] = list(self.backend.rules)
        return out


def _build(cls, values: Any, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return dict(values)


def parse_config(raw: Any) -> CliConfig:
    """Validate a config mapping; unknown keys anywhere are rejected."""
    try:
        top = _build(CliConfig, raw, "config")
        for key in ("dataset", "target"):
            if key not in top:
                raise ConfigError(f"config: missing required key {key!r}")
        if top.get("task", "classification") not in ("classification", "regression"):
            raise ConfigError(f"config: task must be classification or regression, got {top['task']!r}")
        if "split" in top:
            s = _build(SplitSpec, top["split"], "split")
            if "fractions" in s:
                s["fractions"] = tuple(float(f) for f in s["fractions"])
            top["split"] = SplitSpec(**s)
        loop = _build(LoopConfig, top.get("loop", {}), "loop")
        if "predictor" in loop:
            loop["predictor"] = PredictorConfig(**_build(PredictorConfig, loop["predictor"], "loop.predictor"))
        if "context_mode" in top:
            loop.setdefault("context_mode", top["context_mode"])
        if "objective" in top:
            loop.setdefault("objective", top["objective"])
        top["loop"] = LoopConfig(**loop)
        top["context_mode"] = top["loop"].context_mode
        if "backend" in top:
            b = _build(BackendConfig, top["backend"], "backend")
            if "rules" in b:
                b["rules"] = tuple(str(r) for r in b["rules"])
            backend = BackendConfig(**b)
            if backend.kind not in ("scripted", "random", "chat_api"):
                raise ConfigError(f"backend: unknown kind {backend.kind!r}")
            if backend.kind == "scripted" and not backend.rules and not backend.script_file:
                raise ConfigError("backend: scripted backend needs rules or script_file")
            if backend.kind == "chat_api" and not backend.model:
                raise ConfigError("backend: chat_api needs a model name")
            top["backend"] = backend
        return CliConfig(**top)
    except ConfigError:
        raise
    except (TypeError, ValueError, DataError) as exc:
        raise ConfigError(str(exc)) from exc


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, value = item.split("=", 1)
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def load_config(path: str | Path, overrides: Sequence[str] = ()) -> tuple[CliConfig, Path]:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(apply_overrides(raw or {}, overrides)), path.parent


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_dataset(cfg: CliConfig, base: Path) -> Dataset:
    if cfg.dataset == BUILTIN_PLANTED:
        ref = resources.files("octree").joinpath("resources/planted.csv")
        with resources.as_file(ref) as p:
            return load_csv(p, cfg.target, cfg.task, cfg.descriptions)
    path = _resolve(base, cfg.dataset)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return load_csv(path, cfg.target, cfg.task, cfg.descriptions)


@dataclass
class Prepared:
    dataset: Dataset
    train: Dataset
    val: Dataset
    test: Dataset
    # whole dataset under the same transformation as the splits
    full: Dataset


def prepare(cfg: CliConfig, base: Path) -> Prepared:
    """Load, (agnostic: anonymize), split, and (agnostic: encode + scale from train)."""
    d = load_dataset(cfg, base)
    if cfg.loop.context_mode == "agnostic":
        d = anonymize(d)
    tr, va, te = split(d, cfg.split)
    full = d
    if cfg.loop.context_mode == "agnostic":
        enc = fit_ordinal(tr)
        tr, va, te, full = (enc.apply(x) for x in (tr, va, te, full))
        scaling = fit_minmax(tr)
        tr, va, te, full = (scaling.apply(x) for x in (tr, va, te, full))
    return Prepared(d, tr, va, te, full)


def make_backend(cfg: BackendConfig, base: Path):
    if cfg.kind == "scripted":
        rules = list(cfg.rules)
        if cfg.script_file:
            text = _resolve(base, cfg.script_file).read_text(encoding="utf-8")
            loaded = yaml.safe_load(text)
            if not isinstance(loaded, list):
                raise ConfigError("script_file must contain a list of responses")
            rules += [str(r) for r in loaded]
        return ScriptedBackend(rules)
    if cfg.kind == "random":
        return RandomBackend(cfg.seed, cfg.max_depth)
    return ChatAPIBackend(
        cfg.endpoint,
        cfg.model,
        temperature=cfg.temperature,
        max_tokens=cfg.max_tokens,
        timeout=cfg.timeout,
        retries=cfg.retries,
        api_key_env=cfg.api_key_env,
    )


def run_id(cfg: CliConfig, d: Dataset) -> str:
    h = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    h.update(d.fingerprint().encode())
    return h.hexdigest()[:12]


def cmd_run(cfg: CliConfig, base: Path, out: Path | None = None) -> int:
    prepared = prepare(cfg, base)
    out = out or _resolve(base, cfg.output_dir)
    run = RunDir(out)
    session = GeneratorSession(make_backend(cfg.backend, base), run.log_exchange)
    splits = Splits.of(prepared.train, prepared.val)
    result = generate_features(cfg.loop, session, splits, prepared.dataset.target, run.log_event)
    base_test, final_test = transfer(result.rules, cfg.loop.predictor, prepared.train, prepared.val, prepared.test)

    files = [TRAJECTORY_LOG, EXCHANGES_LOG, RULES_FILE, AUGMENTED_CSV, REPORT]
    name_map = None
    if prepared.dataset.name_map:
        write_name_map(prepared.dataset, run.path(NAME_MAP))
        name_map = NAME_MAP
        files.append(NAME_MAP)
    records = rules_to_records(result.rules)
    run.write_text(RULES_FILE, json.dumps(records, indent=2) + "\n")
    export_augmented(prepared.full, result.rules, run.path(AUGMENTED_CSV))
    manifest = RunManifest(
        run_id=run_id(cfg, prepared.dataset),
        config=cfg.to_dict(),
        dataset=dataset_fingerprint(prepared.dataset),
        seeds={"split": cfg.split.seed, "loop": cfg.loop.seed, "predictor": cfg.loop.predictor.seed},
        name_map=name_map,
        accepted_rules=records,
        metrics={
            "metric": result.baseline.metric,
            "val_baseline": result.baseline.value,
            "val_final": result.final.value,
            "test_baseline": base_test.value,
            "test_final": final_test.value,
        },
        files=files,
    )
    text = report(dataclasses.asdict(manifest), read_jsonl(run.path(TRAJECTORY_LOG)))
    run.write_text(REPORT, text)
    run.write_manifest(manifest)
    print(text, end="")
    return EXIT_OK


def load_rules(path: Path, schema) -> list[Rule]:
    """Rules file: a JSON list of {"column", "rule"} records (or a manifest)."""
    raw = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(raw, dict):
        raw = raw.get("accepted_rules", raw.get("rules"))
    if not isinstance(raw, list):
        raise ConfigError(f"{path}: expected a list of rules")
    rules: list[Rule] = []
    current = list(schema)
    for rec in raw:
        rule = rule_from_text(rec["column"], rec["rule"], current)
        rules.append(rule)
        current.append(data_mod.ColumnMeta(rule.new_column, "numeric"))
    return rules


def cmd_transfer(cfg: CliConfig, base: Path, rules_path: Path, target: PredictorConfig) -> int:
    prepared = prepare(cfg, base)
    rules = load_rules(rules_path, prepared.train.schema)
    baseline, with_features = transfer(rules, target, prepared.train, prepared.val, prepared.test)
    print(f"target predictor: {target.kind} (depth {target.max_depth})")
    print(f"test {baseline.metric} without generated features: {baseline.value:.4f}")
    print(f"test {with_features.metric} with {len(rules)} generated feature(s): {with_features.value:.4f}")
    print(format_reduction(baseline.value, with_features.value, bool(rules)))
    return EXIT_OK


def cmd_augment(cfg: CliConfig, base: Path, rules_path: Path, out: Path) -> int:
    prepared = prepare(cfg, base)
    rules = load_rules(rules_path, prepared.full.schema)
    export_augmented(prepared.full, rules, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_inspect(run_dir: Path) -> int:
    path = run_dir / TRAJECTORY_LOG
    if not path.exists():
        raise CorruptLogError(f"{run_dir}: no trajectory log")
    events = read_jsonl(path)
    entries = [e for e in events if e.get("event") == "entry"]
    if not entries:
        raise CorruptLogError(f"{run_dir}: trajectory log has no entries")
    print(f"{len(entries)} entries")
    print("by round:")
    for e in entries:
        print(f"  iter {e['iteration']} round {e['round']:>3}  {e['metric']} {e['value']:.4f}  {e['rule']}")
    print("by quality (best last):")
    for e in sorted(entries, key=lambda e: (e["iteration"], -e["value"], -e["round"])):
        print(f"  iter {e['iteration']} round {e['round']:>3}  {e['metric']} {e['value']:.4f}  {e['rule']}")
    problems = check_selection(events)
    if problems:
        for p in problems:
            print(f"selection check FAILED: {p}", file=sys.stderr)
        return EXIT_VALIDATION
    print("selection check passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="octree", description="Generate tabular features with an optimizing rule generator.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", type=Path, help="YAML or JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. loop.rounds=10 (repeatable)")

    p_run = sub.add_parser("run", help="run the feature generation loop")
    with_config(p_run)
    p_run.add_argument("--output", type=Path, help="run directory (overrides output_dir)")

    p_tr = sub.add_parser("transfer", help="evaluate saved rules with another predictor")
    with_config(p_tr)
    p_tr.add_argument("--rules", type=Path, required=True)
    p_tr.add_argument("--predictor", choices=("cart", "gbdt"), default="gbdt")
    p_tr.add_argument("--max-depth", type=int)
    p_tr.add_argument("--n-rounds", type=int, default=100)
    p_tr.add_argument("--learning-rate", type=float, default=0.1)

    p_in = sub.add_parser("inspect", help="print a run's trajectory and check selection")
    p_in.add_argument("run_dir", type=Path)

    p_aug = sub.add_parser("augment", help="export the dataset with rule columns appended")
    with_config(p_aug)
    p_aug.add_argument("--rules", type=Path, required=True)
    p_aug.add_argument("--out", type=Path, required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect":
            return cmd_inspect(args.run_dir)
        cfg, base = load_config(args.config, args.overrides)
        if args.command == "run":
            return cmd_run(cfg, base, args.output)
        if args.command == "transfer":
            depth = args.max_depth if args.max_depth is not None else (4 if args.predictor == "cart" else 3)
            target = PredictorConfig(args.predictor, depth, args.n_rounds, args.learning_rate)
            return cmd_transfer(cfg, base, args.rules, target)
        return cmd_augment(cfg, base, args.rules, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CorruptLogError as exc:
        print(f"corrupt log: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (BackendError, OptimizationError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (RuleError, DataError, ValueError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
