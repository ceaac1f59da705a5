import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octree.data import ColumnMeta, Dataset, Task
from octree.tree import fit_cart, gini, grow, importance, predict, to_prose

from .oracles import all_thresholds, brute_force_root, gini_of, read_prose


def make(columns: dict, labels, task="classification"):
    cols = {k: np.asarray(v, dtype=float) for k, v in columns.items()}
    schema = tuple(ColumnMeta(k, "numeric", domain=(float(v.min()), float(v.max()))) for k, v in cols.items())
    if task == "classification":
        y = np.asarray([str(v) for v in labels], dtype=object)
        t = Task("classification", tuple(sorted(set(y.tolist()) | {"0", "1"})))
    else:
        y = np.asarray(labels, dtype=float)
        t = Task("regression")
    return Dataset(schema, cols, "y", y, t)


def child_gini(rows, labels, j, t):
    left = [labels[i] for i, r in enumerate(rows) if r[j] <= t]
    right = [labels[i] for i, r in enumerate(rows) if r[j] > t]
    return (len(left) * gini_of(left) + len(right) * gini_of(right)) / len(rows)


class TestSpotValues:
    def test_root_gini_half(self):
        t = fit_cart(make({"x1": [1, 2, 3, 4]}, [1, 1, 0, 0]), max_depth=0)
        assert t.nodes[0].impurity == 0.5

    def test_gini_counts(self):
        assert gini(np.array([2.0, 2.0])) == 0.5
        assert gini(np.array([4.0, 0.0])) == 0.0

    def test_single_split_at_midpoint(self):
        rows, labels = [[1], [2], [3], [4]], [0, 0, 1, 1]
        # every candidate threshold, by hand: 1.5 -> 1/3, 2.5 -> 0, 3.5 -> 1/3
        assert [child_gini(rows, labels, 0, t) for _, t in all_thresholds(rows)] == [1 / 3, 0.0, 1 / 3]
        t = fit_cart(make({"x1": [1, 2, 3, 4]}, labels), max_depth=4)
        root = t.nodes[0]
        assert (root.feature, root.threshold) == (0, 2.5)
        left, right = t.nodes[root.left], t.nodes[root.right]
        assert left.is_leaf and right.is_leaf
        assert (left.n * left.impurity + right.n * right.impurity) / root.n == 0.0
        assert t.depth == 1

    def test_prose_golden(self):
        t = fit_cart(make({"x1": [1, 2, 3, 4]}, [0, 0, 1, 1]))
        assert to_prose(t) == "if x1 <= 2.5:\n  predict 0 (n=2)\nelse:\n  predict 1 (n=2)"

    def test_variance_criterion(self):
        t = fit_cart(make({"x1": [1, 2, 3, 4]}, [1.0, 3.0, 10.0, 12.0], "regression"), max_depth=1)
        root = t.nodes[0]
        # population variance of (1, 3, 10, 12): mean 6.5, squared deviations 30.25+12.25+12.25+30.25
        assert root.impurity == pytest.approx(85 / 4, abs=1e-12)
        assert root.threshold == 2.5
        assert [t.nodes[root.left].value, t.nodes[root.right].value] == [2.0, 11.0]
        assert to_prose(t) == "if x1 <= 2.5:\n  predict 2 (n=2)\nelse:\n  predict 11 (n=2)"

    def test_pure_node_is_leaf(self):
        t = fit_cart(make({"x1": [1, 2, 3]}, [1, 1, 1]))
        assert len(t.nodes) == 1
        assert to_prose(t) == "predict 1 (n=3)"
        assert importance(t) == {}

    def test_constant_feature_no_split(self):
        t = fit_cart(make({"x1": [5, 5, 5, 5]}, [0, 1, 0, 1]))
        assert len(t.nodes) == 1

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            grow(np.zeros((0, 1)), np.zeros(0, dtype=np.int64), "gini", 3, ["x1"], ("0", "1"))


# eight rows whose tree and importances are worked out by hand:
#   root gini 30/64; x1 <= 4.5 leaves a pure left and right labels (1,1,0,1) with gini 3/8
#   the right child then splits on x2 <= 0.5 into two pure leaves
#   decreases: root 8*30/64 - 4*3/8 = 2.25, right child 4*3/8 = 1.5 -> x1 0.6, x2 0.4
EIGHT = {
    "x1": [1, 2, 3, 4, 5, 6, 7, 8],
    "x2": [0, 0, 0, 0, 0, 0, 1, 0],
}
EIGHT_Y = [0, 0, 0, 0, 1, 1, 0, 1]


class TestHandWorkedTree:
    def test_structure_and_prose(self):
        t = fit_cart(make(EIGHT, EIGHT_Y))
        assert to_prose(t) == (
            "if x1 <= 4.5:\n"
            "  predict 0 (n=4)\n"
            "else:\n"
            "  if x2 <= 0.5:\n"
            "    predict 1 (n=3)\n"
            "  else:\n"
            "    predict 0 (n=1)"
        )

    def test_importance(self):
        imp = importance(fit_cart(make(EIGHT, EIGHT_Y)))
        assert imp["x1"] == pytest.approx(0.6, abs=1e-12)
        assert imp["x2"] == pytest.approx(0.4, abs=1e-12)

    def test_depth_limit(self):
        t = fit_cart(make(EIGHT, EIGHT_Y), max_depth=1)
        assert t.depth == 1
        assert importance(t) == {"x1": 1.0, "x2": 0.0}


def random_case(rng):
    n = int(rng.integers(2, 9))
    m = int(rng.integers(1, 4))
    rows = [[float(rng.integers(0, 5)) for _ in range(m)] for _ in range(n)]
    labels = [int(v) for v in rng.integers(0, 2, size=n)]
    return rows, labels


def as_dataset(rows, labels):
    m = len(rows[0])
    return make({f"x{j + 1}": [r[j] for r in rows] for j in range(m)}, labels)


class TestOracle:
    def test_root_split_matches_exhaustive_search(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            rows, labels = random_case(rng)
            best, _ = brute_force_root(rows, labels)
            t = fit_cart(as_dataset(rows, labels), max_depth=1)
            root = t.nodes[0]
            if root.is_leaf:
                # no candidate strictly improves on the parent impurity
                assert not all_thresholds(rows) or best >= gini_of(labels) - 1e-12
                continue
            got = child_gini(rows, labels, root.feature, root.threshold)
            assert abs(got - best) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_prose_routes_like_tree(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 40))
        # quarter steps keep every midpoint exact at four significant digits
        cols = {f"x{j + 1}": rng.integers(0, 40, size=n) / 4 for j in range(3)}
        d = make(cols, rng.integers(0, 3, size=n))
        t = fit_cart(d)
        route = read_prose(to_prose(t))
        rows = [{k: cols[k][i] for k in cols} for i in range(n)]
        assert [route(r) for r in rows] == list(predict(t, d))

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_deeper_never_worse_on_train(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 60))
        d = make({f"x{j + 1}": rng.normal(size=n) for j in range(2)}, rng.integers(0, 2, size=n))
        errors = [np.mean(predict(fit_cart(d, k), d) != d.y) for k in range(6)]
        assert all(b <= a for a, b in zip(errors, errors[1:]))
        assert all(fit_cart(d, k).depth <= k for k in range(6))

    def test_deterministic(self):
        d = make(EIGHT, EIGHT_Y)
        assert fit_cart(d) == fit_cart(d)


def test_regression_tree_sse_never_increases_with_depth():
    rng = np.random.default_rng(3)
    d = make({"x1": rng.uniform(size=50), "x2": rng.uniform(size=50)}, rng.normal(size=50), "regression")
    sse = [float(np.sum((predict(fit_cart(d, k), d) - d.y) ** 2)) for k in range(6)]
    assert all(b <= a + 1e-9 for a, b in zip(sse, sse[1:]))
