"""The feature-generation loop: propose, evaluate, feed back, select, repeat."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

from .data import ColumnMeta, Dataset, OrdinalEncoding, append_column, fit_ordinal
from .dsl import (
    Binary,
    Col,
    ExtractionError,
    Rule,
    RuleError,
    evaluate,
    extract_rule,
    parse_expr,
    render,
    split_assignment,
    typecheck,
)
from .generator import (
    BackendError,
    DisplayEntry,
    GeneratorSession,
    PromptContext,
    build_p_code,
    build_p_col,
    build_p_gen,
    build_p_init,
    build_trajectory_block,
)
from .predictor import EvalReport, PredictorConfig, score, train
from .tree import fit_cart, to_prose

log = logging.getLogger(__name__)

ContextMode = Literal["aware", "agnostic"]

REASONING_DEPTH = 4
MAX_NON_FINITE = 0.5


class RuleRejected(Exception):
    """A proposed rule was not evaluated (degenerate or duplicate)."""


class OptimizationError(RuntimeError):
    def __init__(self, message: str, exchanges=()):
        super().__init__(message)
        self.exchanges = list(exchanges)


@dataclass(frozen=True)
class LoopConfig:
    rounds: int = 50
    max_new_features: int = 1
    ablate_tree_reasoning: bool = False
    context_mode: ContextMode = "agnostic"
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    seed: int = 0
    # best entries shown in the rule-generation prompt
    keep_best: int = 10
    objective: str | None = None
    output_categories: str = "Yes or No"

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.max_new_features < 1:
            raise ValueError("max_new_features must be >= 1")
        if self.context_mode not in ("aware", "agnostic"):
            raise ValueError(f"unknown context mode {self.context_mode!r}")
        if self.keep_best < 1:
            raise ValueError("keep_best must be >= 1")


@dataclass(frozen=True)
class TrajectoryEntry:
    rule: Rule
    score: EvalReport
    tree_prose: str
    round: int
    non_finite: int = 0


@dataclass
class Trajectory:
    task: Literal["classification", "regression"]
    entries: list[TrajectoryEntry] = field(default_factory=list)

    def best(self) -> TrajectoryEntry:
        if not self.entries:
            raise ValueError("empty trajectory")
        return min(self.entries, key=lambda e: (e.score.value, e.round))

    def display_order(self) -> list[TrajectoryEntry]:
        """Worst first, best last; among equal scores the earliest round comes last."""
        return sorted(self.entries, key=lambda e: (-e.score.value, -e.round))

    def renders(self) -> set[str]:
        return {render(e.rule.expr) for e in self.entries}


# --- data plumbing ------------------------------------------------------------


@dataclass(frozen=True)
class Splits:
    """Train/validation partitions plus the encoding fitted on train.

    Rules are evaluated on these (possibly categorical) tables; predictors
    see them through ``encoding``.
    """

    train: Dataset
    val: Dataset
    encoding: OrdinalEncoding

    @classmethod
    def of(cls, train: Dataset, val: Dataset) -> Splits:
        return cls(train, val, fit_ordinal(train))

    @property
    def schema(self) -> tuple[ColumnMeta, ...]:
        return self.train.schema

    def model_view(self, d: Dataset) -> Dataset:
        return self.encoding.apply(d)

    def augmented(self, rule: Rule) -> Splits:
        return Splits(
            append_column(self.train, rule.new_column, evaluate(rule.expr, self.train).values),
            append_column(self.val, rule.new_column, evaluate(rule.expr, self.val).values),
            self.encoding,
        )


def realize(d: Dataset, rules: Sequence[Rule]) -> Dataset:
    """Append the column of each rule in order (later rules may use earlier columns)."""
    for rule in rules:
        typecheck(rule.expr, d.schema)
        d = append_column(d, rule.new_column, evaluate(rule.expr, d).values)
    return d


def baseline_score(splits: Splits, cfg: PredictorConfig) -> EvalReport:
    model = train(cfg, splits.model_view(splits.train))
    return score(model, splits.model_view(splits.val))


def _unique_name(name: str, taken: set[str]) -> str:
    if name not in taken:
        return name
    k = 2
    while f"{name}_{k}" in taken:
        k += 1
    return f"{name}_{k}"


# --- operations ---------------------------------------------------------------

_QUOTED_RE = re.compile(r"""['"“‘`*]{1,2}([^'"“”‘’`*\n]{1,60}?)['"”’`*]{1,2}""")


def _sanitize(name: str) -> str:
    name = re.sub(r"[^\w \-/()']", " ", name)
    return re.sub(r"\s+", " ", name).strip(" -'")[:64]


def parse_column_name(response: str) -> str | None:
    """First quoted name, else the leading phrase of the first non-empty line."""
    m = _QUOTED_RE.search(response)
    if m:
        name = _sanitize(m.group(1))
        if name:
            return name
    for line in response.splitlines():
        line = re.sub(r"^\s*(?:[-*]\s+|\d+[.)]\s+|#+\s*)", "", line).strip()
        if not line:
            continue
        head = re.split(r":| - |\. |\(", line, maxsplit=1)[0]
        if len(head.split()) <= 5:
            name = _sanitize(head)
            if name:
                return name
        return None
    return None


def propose_column_name(
    session: GeneratorSession,
    schema: Sequence[ColumnMeta],
    target: str,
    objective: str | None = None,
    iteration: int = 1,
) -> str:
    taken = {c.name for c in schema} | {target}
    try:
        response = session.complete(build_p_col(schema, objective or target), PromptContext("p_col", tuple(schema), round=0))
        name = parse_column_name(response)
    except BackendError as exc:
        log.warning("column name proposal failed: %s", exc)
        name = None
    return _unique_name(name or f"feat_{iteration}", taken)


def agnostic_name(schema: Sequence[ColumnMeta], target: str) -> str:
    taken = {c.name for c in schema} | {target}
    return _unique_name(f"x{len(schema) + 1}", taken)


def importance_product_rule(splits: Splits, new_column: str, cfg: PredictorConfig | None = None) -> Rule:
    """Product of the two features with the highest GBDT gain importance."""
    schema = splits.schema
    if len(schema) < 2:
        raise RuleError("the importance-product rule needs at least two features")
    cfg = cfg or PredictorConfig()
    if cfg.kind != "gbdt":
        cfg = PredictorConfig(seed=cfg.seed)
    model = train(cfg, splits.model_view(splits.train))
    weights = model.gain_importance()
    names = [c.name for c in schema]
    numeric = [n for n in names if splits.train.meta(n).kind != "categorical"]
    if len(numeric) < 2:
        raise RuleError("the importance-product rule needs two non-categorical features")
    ranked = sorted(numeric, key=lambda n: (-weights.get(n, 0.0), names.index(n)))
    # operands in schema order so the text does not depend on which of the two ranks first
    a, b = sorted(ranked[:2], key=names.index)
    return Rule(new_column, Binary("*", Col(a), Col(b)), f"{new_column} = {a} * {b}", "init")


def _ask_for_rule(
    session: GeneratorSession,
    prompt: str,
    kind: str,
    schema: Sequence[ColumnMeta],
    new_column: str,
    round_: int,
    mode: ContextMode,
    origin: str,
) -> Rule:
    ctx = PromptContext(kind, tuple(schema), new_column, round_)
    response = session.complete(prompt, ctx)
    if mode == "aware":
        code_ctx = PromptContext("p_code", tuple(schema), new_column, round_)
        response = session.complete(build_p_code(response, schema, new_column), code_ctx)
    return extract_rule(response, schema, new_column, origin)


def init_rule(
    mode: ContextMode,
    session: GeneratorSession | None,
    splits: Splits,
    new_column: str,
    cfg: LoopConfig | None = None,
) -> Rule:
    """Initial rule: generator-proposed (aware) or importance product (agnostic)."""
    cfg = cfg or LoopConfig()
    if mode == "aware" and session is not None:
        try:
            prompt = build_p_init(splits.schema, new_column, cfg.output_categories)
            return _ask_for_rule(session, prompt, "p_init", splits.schema, new_column, 0, mode, "init")
        except (BackendError, RuleError) as exc:
            log.warning("initial rule from generator failed (%s); using importance product", exc)
    return importance_product_rule(splits, new_column, cfg.predictor)


def evaluate_rule(
    rule: Rule,
    splits: Splits,
    cfg: LoopConfig,
    round_: int = 0,
    trajectory: Trajectory | None = None,
) -> TrajectoryEntry:
    typecheck(rule.expr, splits.schema)
    if trajectory is not None and render(rule.expr) in trajectory.renders():
        raise RuleRejected(f"duplicate of an earlier rule: {render(rule.expr)}")
    on_train = evaluate(rule.expr, splits.train)
    if on_train.non_finite_fraction > MAX_NON_FINITE:
        raise RuleRejected(f"degenerate rule: {on_train.non_finite}/{splits.train.n_rows} non-finite values on train")
    aug = Splits(
        append_column(splits.train, rule.new_column, on_train.values),
        append_column(splits.val, rule.new_column, evaluate(rule.expr, splits.val).values),
        splits.encoding,
    )
    train_view = aug.model_view(aug.train)
    model = train(cfg.predictor, train_view)
    report = score(model, aug.model_view(aug.val))
    prose = "" if cfg.ablate_tree_reasoning else to_prose(fit_cart(train_view, REASONING_DEPTH))
    return TrajectoryEntry(rule, report, prose, round_, on_train.non_finite)


EventSink = Callable[[dict], None]


@dataclass
class OptimizationResult:
    best: Rule
    trajectory: Trajectory
    baseline: EvalReport
    new_column: str

    @property
    def best_entry(self) -> TrajectoryEntry:
        return self.trajectory.best()


def run_optimization(
    cfg: LoopConfig,
    session: GeneratorSession,
    splits: Splits,
    target: str,
    iteration: int = 1,
    on_event: EventSink | None = None,
    baseline: EvalReport | None = None,
) -> OptimizationResult:
    """Optimize one new column for ``cfg.rounds`` rounds and return the best rule."""
    emit = on_event or (lambda event: None)
    schema = splits.schema
    task = splits.train.task
    objective = cfg.objective or target
    predictor_label = cfg.predictor.label(task.is_classification)
    if baseline is None:
        baseline = baseline_score(splits, cfg.predictor)
    emit({"event": "baseline", "iteration": iteration, "metric": baseline.metric, "value": baseline.value})

    if cfg.context_mode == "aware":
        new_column = propose_column_name(session, schema, target, cfg.objective, iteration)
    else:
        new_column = agnostic_name(schema, target)
    emit({"event": "column", "iteration": iteration, "column": new_column})

    trajectory = Trajectory(task.kind)

    def attempt(get_rule: Callable[[], Rule], round_: int) -> None:
        try:
            rule = get_rule()
            entry = evaluate_rule(rule, splits, cfg, round_, trajectory)
        except (BackendError, ExtractionError, RuleRejected, RuleError) as exc:
            log.info("iteration %d round %d skipped: %s", iteration, round_, exc)
            emit({"event": "skip", "iteration": iteration, "round": round_, "reason": str(exc)})
            return
        trajectory.entries.append(entry)
        emit(_entry_event(entry, iteration))

    attempt(lambda: init_rule(cfg.context_mode, session, splits, new_column, cfg), 0)
    for round_ in range(1, cfg.rounds + 1):

        def propose(round_=round_) -> Rule:
            prompt = _generation_prompt(cfg, trajectory, splits, objective, new_column, predictor_label)
            kind = "p_gen" if trajectory.entries else "p_init"
            return _ask_for_rule(session, prompt, kind, schema, new_column, round_, cfg.context_mode, f"round({round_})")

        attempt(propose, round_)

    if not trajectory.entries:
        raise OptimizationError(f"iteration {iteration}: no rule could be evaluated", session.exchanges)
    best = trajectory.best()
    emit({
        "event": "selected",
        "iteration": iteration,
        "round": best.round,
        "rule": best.rule.text,
        "metric": best.score.metric,
        "value": best.score.value,
    })
    return OptimizationResult(best.rule, trajectory, baseline, new_column)


def _generation_prompt(cfg, trajectory, splits, objective, new_column, predictor_label) -> str:
    if not trajectory.entries:
        return build_p_init(splits.schema, new_column, cfg.output_categories)
    shown = trajectory.display_order()[-cfg.keep_best:]
    block = build_trajectory_block(
        [DisplayEntry(e.rule.text, e.tree_prose, e.score.display_score) for e in shown],
        objective,
        predictor_label,
        include_trees=not cfg.ablate_tree_reasoning,
    )
    return build_p_gen(
        block,
        splits.schema,
        objective,
        new_column,
        predictor_label,
        trajectory.task,
        include_trees=not cfg.ablate_tree_reasoning,
    )


def _entry_event(entry: TrajectoryEntry, iteration: int) -> dict:
    return {
        "event": "entry",
        "iteration": iteration,
        "round": entry.round,
        "column": entry.rule.new_column,
        "rule": entry.rule.text,
        "origin": entry.rule.origin,
        "metric": entry.score.metric,
        "value": entry.score.value,
        "non_finite": entry.non_finite,
        "tree_prose": entry.tree_prose,
    }


@dataclass
class GenerationResult:
    rules: list[Rule]
    baseline: EvalReport
    final: EvalReport
    results: list[OptimizationResult]
    splits: Splits


def generate_features(
    cfg: LoopConfig,
    session: GeneratorSession,
    splits: Splits,
    target: str,
    on_event: EventSink | None = None,
) -> GenerationResult:
    """Add optimized columns one at a time until validation stops improving."""
    emit = on_event or (lambda event: None)
    accepted: list[Rule] = []
    results: list[OptimizationResult] = []
    first_baseline = baseline_score(splits, cfg.predictor)
    previous = first_baseline
    for iteration in range(1, cfg.max_new_features + 1):
        result = run_optimization(cfg, session, splits, target, iteration, on_event, baseline=previous)
        results.append(result)
        best = result.best_entry.score
        improved = best.value < previous.value
        emit({
            "event": "decision",
            "iteration": iteration,
            "accepted": improved,
            "rule": result.best.text,
            "value": best.value,
            "previous_value": previous.value,
            "reason": "validation score improved" if improved else "validation score no longer improves",
        })
        if not improved:
            break
        accepted.append(result.best)
        splits = splits.augmented(result.best)
        previous = best
    else:
        emit({"event": "stop", "reason": f"reached max_new_features={cfg.max_new_features}"})
    return GenerationResult(accepted, first_baseline, previous, results, splits)


def transfer(
    rules: Sequence[Rule],
    target_cfg: PredictorConfig,
    train_d: Dataset,
    val: Dataset,
    test: Dataset,
) -> tuple[EvalReport, EvalReport]:
    """Test scores of ``target_cfg`` trained without and with the rule columns."""
    encoding = fit_ordinal(train_d)
    base_model = train(target_cfg, encoding.apply(train_d))
    baseline = score(base_model, encoding.apply(test))
    aug_train, aug_test = realize(train_d, rules), realize(test, rules)
    realize(val, rules)
    model = train(target_cfg, encoding.apply(aug_train))
    return baseline, score(model, encoding.apply(aug_test))


def rule_from_text(new_column: str, text: str, schema: Sequence[ColumnMeta], origin: str = "manual") -> Rule:
    _, body = split_assignment(text)
    expr = parse_expr(body)
    typecheck(expr, schema)
    return Rule(new_column, expr, text, origin)
