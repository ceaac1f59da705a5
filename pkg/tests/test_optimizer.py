import itertools

import numpy as np
import pytest

from octree.data import ColumnMeta, Dataset, SplitSpec, Task, split
from octree.dsl import Binary, Col, RuleError, UnknownColumnError, render
from octree.generator import GeneratorSession, PromptContext, ScriptedBackend
from octree.optimizer import (
    LoopConfig,
    OptimizationError,
    RuleRejected,
    Splits,
    Trajectory,
    TrajectoryEntry,
    baseline_score,
    evaluate_rule,
    generate_features,
    importance_product_rule,
    init_rule,
    parse_column_name,
    propose_column_name,
    rule_from_text,
    run_optimization,
    transfer,
)
from octree.predictor import EvalReport, PredictorConfig, gain_importance, train
from octree.synthetic import DISTRACTOR_RULES, PLANTED_RULE, planted_dataset
from octree.tree import fit_cart, to_prose

FAST = PredictorConfig(n_rounds=30)


@pytest.fixture(scope="module")
def planted():
    tr, va, te = split(planted_dataset(n=1000, seed=1), SplitSpec(0))
    return Splits.of(tr, va), te


def session(rules):
    return GeneratorSession(ScriptedBackend(list(rules)))


def regression_dataset(n=600, seed=0):
    rng = np.random.default_rng(seed)
    cols = {f"x{i}": rng.uniform(size=n) for i in range(1, 5)}
    y = cols["x1"] * cols["x2"] + cols["x3"] * cols["x4"]
    schema = tuple(ColumnMeta(k, "numeric", domain=(0.0, 1.0)) for k in cols)
    return Dataset(schema, cols, "y", y, Task("regression"))


class TestTrajectory:
    def entry(self, value, round_, metric="error_rate"):
        rule = rule_from_text("x6", f"x6 = x1 + {round_}", (ColumnMeta("x1", "numeric"),))
        return TrajectoryEntry(rule, EvalReport(metric, value, 10), "", round_)

    def test_best_ties_to_earliest_round(self):
        t = Trajectory("classification", [self.entry(0.2, 0), self.entry(0.1, 1), self.entry(0.1, 2)])
        assert t.best().round == 1

    def test_display_best_last(self):
        t = Trajectory("classification", [self.entry(0.1, 0), self.entry(0.3, 1), self.entry(0.2, 2), self.entry(0.1, 3)])
        assert [e.round for e in t.display_order()] == [1, 2, 3, 0]
        # the prompt reports accuracy, which then ascends top to bottom
        acc = [e.score.display_score for e in t.display_order()]
        assert acc == sorted(acc)

    def test_display_regression_mae_descending(self):
        t = Trajectory("regression", [self.entry(1.0, 0, "mae"), self.entry(3.0, 1, "mae"), self.entry(2.0, 2, "mae")])
        assert [e.score.value for e in t.display_order()] == [3.0, 2.0, 1.0]


class TestColumnName:
    def test_quoted(self):
        assert parse_column_name('A good attribute is "Smoking Status", because...') == "Smoking Status"

    def test_leading_phrase(self):
        assert parse_column_name("1. Smoking Status: whether the patient smokes") == "Smoking Status"

    def test_no_candidate_falls_back(self):
        schema = (ColumnMeta("Age", "numeric"),)
        long = "I think that there are many possible attributes you might consider here."
        assert propose_column_name(session([long]), schema, "Disease") == "feat_1"

    def test_collision_suffix(self):
        schema = (ColumnMeta("Age", "numeric"),)
        assert propose_column_name(session(["'Age'"]), schema, "Disease") == "Age_2"

    def test_backend_failure_falls_back(self):
        s = session(["x"])
        s.complete("", PromptContext("p_col"))  # exhausts the script
        assert propose_column_name(s, (ColumnMeta("Age", "numeric"),), "Disease", iteration=3) == "feat_3"

    def test_quoted_name_with_parenthetical(self):
        schema = (ColumnMeta("Age", "numeric"), ColumnMeta("Fever", "boolean"))
        reply = "A useful new attribute would be 'Smoking Status' (Yes or No)."
        assert propose_column_name(session([reply]), schema, "Disease") == "Smoking Status"


class TestInitRule:
    def test_product_of_top_two_by_gain(self, planted):
        splits, _ = planted
        rule = importance_product_rule(splits, "x6", FAST)
        imp = gain_importance(train(FAST, splits.train))
        top = sorted(sorted(imp, key=lambda k: (-imp[k], k))[:2])
        assert rule.expr == Binary("*", Col(top[0]), Col(top[1]))
        assert top == ["x1", "x5"]
        assert rule.text == "x6 = (x1 * x5)"

    def test_tie_goes_to_lower_index(self):
        d = regression_dataset()
        flat = Dataset(d.schema, d.columns, "y", np.ones(d.n_rows), Task("regression"))
        tr, va, _ = split(flat, SplitSpec(0))
        rule = importance_product_rule(Splits.of(tr, va), "x5")
        assert render(rule.expr) == "(x1 * x2)"

    def test_one_feature_error(self):
        d = planted_dataset(n=100)
        one = Dataset(d.schema[:1], {"x1": d.columns["x1"]}, "y", d.y, d.task)
        tr, va, _ = split(one, SplitSpec(0))
        with pytest.raises(RuleError):
            importance_product_rule(Splits.of(tr, va), "x2")

    def test_aware_extraction_failure_falls_back(self, planted):
        splits, _ = planted
        s = session(["no idea", "still nothing"])
        rule = init_rule("aware", s, splits, "x6", LoopConfig(predictor=FAST))
        assert rule.origin == "init"
        assert rule.expr == importance_product_rule(splits, "x6", FAST).expr
        assert [e.kind for e in s.exchanges] == ["p_init", "p_code"]

    def test_aware_uses_generator(self, planted):
        splits, _ = planted
        s = session(["Multiply x2 by x3", "x6 = x2 * x3"])
        rule = init_rule("aware", s, splits, "x6")
        assert render(rule.expr) == "(x2 * x3)"


class TestEvaluateRule:
    def test_constant_rule_matches_baseline_exactly(self, planted):
        splits, _ = planted
        cfg = LoopConfig(predictor=FAST)
        entry = evaluate_rule(rule_from_text("x6", "x6 = 0", splits.schema), splits, cfg)
        assert entry.score == baseline_score(splits, FAST)

    def test_division_by_zero_is_degenerate(self, planted):
        splits, _ = planted
        with pytest.raises(RuleRejected, match="degenerate"):
            evaluate_rule(rule_from_text("x6", "x6 = x1 / 0", splits.schema), splits, LoopConfig(predictor=FAST))

    def test_duplicate_rejected(self, planted):
        splits, _ = planted
        cfg = LoopConfig(predictor=FAST)
        t = Trajectory("classification")
        t.entries.append(evaluate_rule(rule_from_text("x6", "x6 = x1 * x5", splits.schema), splits, cfg, 0, t))
        with pytest.raises(RuleRejected, match="duplicate"):
            evaluate_rule(rule_from_text("x6", "x6 = (x1) * (x5)", splits.schema), splits, cfg, 1, t)

    def test_tree_prose_is_cart_of_augmented_train(self, planted):
        splits, _ = planted
        rule = rule_from_text("x6", PLANTED_RULE, splits.schema)
        entry = evaluate_rule(rule, splits, LoopConfig(predictor=FAST))
        aug = splits.augmented(rule)
        assert entry.tree_prose == to_prose(fit_cart(aug.train, 4))
        assert "x6" in entry.tree_prose

    def test_ablation_empties_prose(self, planted):
        splits, _ = planted
        rule = rule_from_text("x6", PLANTED_RULE, splits.schema)
        assert evaluate_rule(rule, splits, LoopConfig(predictor=FAST, ablate_tree_reasoning=True)).tree_prose == ""

    def test_planted_beats_baseline(self, planted):
        splits, _ = planted
        entry = evaluate_rule(rule_from_text("x6", PLANTED_RULE, splits.schema), splits, LoopConfig(predictor=FAST))
        assert entry.score.value < baseline_score(splits, FAST).value


def brute_force_best(splits, cfg, texts):
    # evaluate every candidate on its own; ties go to the first in the given order
    scored = []
    for i, text in enumerate(texts):
        rule = rule_from_text("x6", text, splits.schema)
        scored.append((evaluate_rule(rule, splits, cfg).score.value, i, render(rule.expr)))
    return min(scored)


class TestRunOptimization:
    def test_selection_is_permutation_invariant(self, planted):
        splits, _ = planted
        cfg = LoopConfig(rounds=6, predictor=FAST)
        rules = [PLANTED_RULE, *DISTRACTOR_RULES[:5]]
        chosen = set()
        for perm in itertools.islice(itertools.permutations(rules), 0, 720, 180):
            res = run_optimization(cfg, session(perm), splits, "y")
            chosen.add(render(res.best.expr))
            best = min(res.trajectory.entries, key=lambda e: (e.score.value, e.round))
            assert res.best == best.rule
        assert len(chosen) == 1

    def test_best_is_brute_force_argmin(self, planted):
        splits, _ = planted
        cfg = LoopConfig(rounds=6, predictor=FAST)
        rules = [*DISTRACTOR_RULES[:5], PLANTED_RULE]
        res = run_optimization(cfg, session(rules), splits, "y")
        init = importance_product_rule(splits, "x6", FAST)
        value, _, _ = brute_force_best(splits, cfg, [init.text, *rules])
        assert res.best_entry.score.value == value

    def test_zero_rounds_returns_init(self, planted):
        splits, _ = planted
        res = run_optimization(LoopConfig(rounds=0, predictor=FAST), session(["unused"]), splits, "y")
        assert res.best.origin == "init"
        assert len(res.trajectory.entries) == 1

    def test_unparseable_rounds_skipped(self, planted):
        splits, _ = planted
        events = []
        res = run_optimization(LoopConfig(rounds=3, predictor=FAST), session(["??", "x6 = (", "no rule"]), splits, "y", on_event=events.append)
        assert res.best.origin == "init"
        assert [e["event"] for e in events].count("skip") == 3

    def test_no_successful_evaluation(self, planted):
        splits, _ = planted
        # a single-column schema cannot build the init rule, and the script is garbage
        d = Dataset(splits.train.schema[:1], {"x1": splits.train.columns["x1"]}, "y", splits.train.y, splits.train.task)
        v = Dataset(splits.val.schema[:1], {"x1": splits.val.columns["x1"]}, "y", splits.val.y, splits.val.task)
        with pytest.raises(OptimizationError) as info:
            run_optimization(LoopConfig(rounds=1, predictor=FAST), session(["junk"]), Splits.of(d, v), "y")
        assert [e.kind for e in info.value.exchanges] == ["p_init"]

    def test_prompt_uses_trajectory_best_last(self, planted):
        splits, _ = planted
        s = session([PLANTED_RULE, "x6 = x2 * x3", "x6 = x4 ** 2"])
        run_optimization(LoopConfig(rounds=3, predictor=FAST), s, splits, "y")
        gen = [e for e in s.exchanges if e.kind == "p_gen"]
        assert len(gen) == 3
        for ex in gen:
            scores = [float(line) for prev, line in zip(ex.request.splitlines(), ex.request.splitlines()[1:]) if prev.startswith("Score evaluated with")]
            assert scores == sorted(scores)

    def test_keep_best_truncates(self, planted):
        splits, _ = planted
        s = session(DISTRACTOR_RULES[:4])
        run_optimization(LoopConfig(rounds=4, predictor=FAST, keep_best=2), s, splits, "y")
        last = s.exchanges[-1].request
        assert last.count("Rule to predict") == 2


class TestGenerateFeatures:
    def test_never_improves_returns_empty(self):
        # a clean threshold on x1 is learned perfectly, so no column can lower the error
        rng = np.random.default_rng(5)
        cols = {"x1": rng.uniform(size=300), "x2": rng.uniform(size=300)}
        y = np.where(cols["x1"] > 0.5, "1", "0").astype(object)
        schema = tuple(ColumnMeta(k, "numeric") for k in cols)
        tr, va, _ = split(Dataset(schema, cols, "y", y, Task("classification", ("0", "1"))), SplitSpec(0))
        assert baseline_score(Splits.of(tr, va), FAST).value == 0.0
        events = []
        res = generate_features(LoopConfig(rounds=1, predictor=FAST, max_new_features=3), session(["x3 = x1 * x2"]), Splits.of(tr, va), "y", events.append)
        assert res.rules == []
        decisions = [e for e in events if e["event"] == "decision"]
        assert len(decisions) == 1 and not decisions[0]["accepted"]
        assert res.final == res.baseline

    def test_two_planted_features_both_accepted(self):
        tr, va, _ = split(regression_dataset(), SplitSpec(0))
        cfg = LoopConfig(rounds=1, predictor=FAST, max_new_features=2)
        script = ["x5 = x1 * x2", "x6 = x5 + x3 * x4"]
        res = generate_features(cfg, session(script), Splits.of(tr, va), "y")
        assert [r.new_column for r in res.rules] == ["x5", "x6"]
        assert "x5" in res.rules[1].columns()
        values = [r.best_entry.score.value for r in res.results]
        assert values[1] < values[0] < res.baseline.value

    def test_max_new_features_caps(self, planted):
        splits, _ = planted
        events = []
        res = generate_features(LoopConfig(rounds=1, predictor=FAST, max_new_features=1), session([PLANTED_RULE]), splits, "y", events.append)
        assert len(res.rules) == 1
        assert events[-1]["event"] == "stop"


class TestTransfer:
    def test_empty_rules_equal_reports(self, planted):
        splits, te = planted
        base, with_f = transfer([], FAST, splits.train, splits.val, te)
        assert base == with_f

    def test_unknown_column(self, planted):
        splits, te = planted
        rule = rule_from_text("x6", "x6 = x1", splits.schema)
        bad = type(rule)("x6", Col("x9"), "x6 = x9")
        with pytest.raises(UnknownColumnError):
            transfer([bad], FAST, splits.train, splits.val, te)

    def test_planted_cart_to_gbdt(self, planted):
        splits, te = planted
        rule = rule_from_text("x6", PLANTED_RULE, splits.schema)
        base, with_f = transfer([rule], PredictorConfig(), splits.train, splits.val, te)
        assert with_f.value < base.value
