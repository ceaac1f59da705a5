"""CART decision trees and their if-else prose rendering."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal, Sequence

import numpy as np

from .data import Dataset

Criterion = Literal["gini", "variance"]

# splits must beat the parent impurity by more than this (absorbs float noise)
_MIN_DECREASE = 1e-12


@dataclass(frozen=True)
class Node:
    n: int
    impurity: float
    # leaf payload: class counts (classification) or mean value (regression)
    value: float
    counts: tuple[int, ...] = ()
    feature: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


@dataclass(frozen=True)
class DecisionTree:
    """Fitted binary tree; ``nodes[0]`` is the root. Rows with value <= threshold go left."""

    nodes: tuple[Node, ...]
    features: tuple[str, ...]
    criterion: Criterion
    max_depth: int
    classes: tuple = ()

    @property
    def depth(self) -> int:
        def walk(i: int) -> int:
            node = self.nodes[i]
            return 0 if node.is_leaf else 1 + max(walk(node.left), walk(node.right))

        return walk(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X`` (columns ordered as ``features``)."""
        out = np.zeros(len(X), dtype=np.int64)
        stack = [(0, np.arange(len(X)))]
        while stack:
            i, rows = stack.pop()
            node = self.nodes[i]
            if node.is_leaf or not len(rows):
                out[rows] = i
                continue
            go_left = X[rows, node.feature] <= node.threshold
            stack.append((node.left, rows[go_left]))
            stack.append((node.right, rows[~go_left]))
        return out

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        leaves = self.apply(X)
        if self.criterion == "gini":
            labels = np.asarray(self.classes, dtype=object)
            idx = np.asarray([int(np.argmax(n.counts)) if n.counts else 0 for n in self.nodes])
            return labels[idx[leaves]]
        values = np.asarray([n.value for n in self.nodes])
        return values[leaves]

    def with_leaf_values(self, values: dict[int, float]) -> DecisionTree:
        nodes = list(self.nodes)
        for i, v in values.items():
            nodes[i] = replace(nodes[i], value=float(v))
        return replace(self, nodes=tuple(nodes))


def gini(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - np.sum(p * p))


def _impurity(y: np.ndarray, criterion: Criterion, n_classes: int) -> float:
    if criterion == "gini":
        return gini(np.bincount(y, minlength=n_classes).astype(float))
    return float(np.var(y)) if len(y) else 0.0


def _best_split_feature(x: np.ndarray, y: np.ndarray, criterion: Criterion, n_classes: int):
    """Lowest weighted child impurity over midpoints of consecutive distinct values.

    Returns (weighted impurity, threshold) or None when the column is constant.
    """
    order = np.argsort(x, kind="stable")
    xs = x[order]
    # candidate boundaries: positions where the sorted value changes
    cut = np.nonzero(xs[1:] > xs[:-1])[0]
    if not len(cut):
        return None
    n = len(xs)
    n_left = cut + 1.0
    n_right = n - n_left
    ys = y[order]
    if criterion == "gini":
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), ys] = 1.0
        cum = np.cumsum(onehot, axis=0)[cut]
        right = np.bincount(ys, minlength=n_classes).astype(float) - cum
        gl = 1.0 - np.sum((cum / n_left[:, None]) ** 2, axis=1)
        gr = 1.0 - np.sum((right / n_right[:, None]) ** 2, axis=1)
        weighted = (n_left * gl + n_right * gr) / n
    else:
        s = np.cumsum(ys)
        s2 = np.cumsum(ys * ys)
        sl, sl2 = s[cut], s2[cut]
        sr, sr2 = s[-1] - sl, s2[-1] - sl2
        # n * var = sum(y^2) - sum(y)^2 / n
        sse_l = np.maximum(sl2 - sl * sl / n_left, 0.0)
        sse_r = np.maximum(sr2 - sr * sr / n_right, 0.0)
        weighted = (sse_l + sse_r) / n
    k = int(np.argmin(weighted))
    threshold = (xs[cut[k]] + xs[cut[k] + 1]) / 2.0
    return float(weighted[k]), float(threshold)


def grow(
    X: np.ndarray,
    y: np.ndarray,
    criterion: Criterion,
    max_depth: int,
    features: Sequence[str],
    classes: tuple = (),
) -> DecisionTree:
    """Greedy top-down CART on a numeric matrix.

    ``y`` holds class indices into ``classes`` for gini, real targets for variance.
    Ties go to the lowest feature index, then the lowest threshold.
    """
    if len(X) == 0:
        raise ValueError("cannot fit a tree on an empty dataset")
    n_classes = len(classes)
    nodes: list[Node | None] = []

    def make(rows: np.ndarray, depth: int) -> int:
        yr = y[rows]
        imp = _impurity(yr, criterion, n_classes)
        if criterion == "gini":
            counts = tuple(int(c) for c in np.bincount(yr, minlength=n_classes))
            value = float(np.argmax(counts))
        else:
            counts = ()
            value = float(np.mean(yr))
        idx = len(nodes)
        nodes.append(Node(len(rows), imp, value, counts))
        if depth >= max_depth or len(rows) < 2 or imp <= 0.0:
            return idx
        best = None
        for j in range(X.shape[1]):
            found = _best_split_feature(X[rows, j], yr, criterion, n_classes)
            if found is not None and (best is None or found[0] < best[0]):
                best = (found[0], found[1], j)
        if best is None or imp - best[0] <= _MIN_DECREASE * max(1.0, imp):
            return idx
        _, threshold, j = best
        go_left = X[rows, j] <= threshold
        left = make(rows[go_left], depth + 1)
        right = make(rows[~go_left], depth + 1)
        nodes[idx] = replace(nodes[idx], feature=j, threshold=threshold, left=left, right=right)
        return idx

    make(np.arange(len(X)), 0)
    return DecisionTree(tuple(nodes), tuple(features), criterion, max_depth, tuple(classes))


def class_indices(y: np.ndarray, classes: Sequence) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(classes)}
    try:
        return np.asarray([lookup[v] for v in y.tolist()], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} is not a known class") from None


def fit_cart(d: Dataset, max_depth: int = 4) -> DecisionTree:
    """Fit CART to a dataset whose features are all numeric."""
    if d.n_rows == 0:
        raise ValueError("cannot fit a tree on an empty dataset")
    X = d.matrix()
    if d.task.is_classification:
        return grow(X, class_indices(d.y, d.task.classes), "gini", max_depth, d.feature_names, d.task.classes)
    return grow(X, d.y.astype(float), "variance", max_depth, d.feature_names)


def predict(t: DecisionTree, d: Dataset) -> np.ndarray:
    return t.predict_matrix(d.matrix(t.features))


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def to_prose(t: DecisionTree) -> str:
    """Render as nested ``if <feature> <= <threshold>:`` / ``else:`` blocks."""
    lines: list[str] = []

    def walk(i: int, indent: str) -> None:
        node = t.nodes[i]
        if node.is_leaf:
            if t.criterion == "gini":
                label = t.classes[int(np.argmax(node.counts))]
                lines.append(f"{indent}predict {label} (n={node.n})")
            else:
                lines.append(f"{indent}predict {_fmt(node.value)} (n={node.n})")
            return
        lines.append(f"{indent}if {t.features[node.feature]} <= {_fmt(node.threshold)}:")
        walk(node.left, indent + "  ")
        lines.append(f"{indent}else:")
        walk(node.right, indent + "  ")

    walk(0, "")
    return "\n".join(lines)


def impurity_decreases(t: DecisionTree) -> dict[str, float]:
    """Unnormalized sum of n-weighted impurity decrease per split feature."""
    out: dict[str, float] = {}
    for node in t.nodes:
        if node.is_leaf:
            continue
        left, right = t.nodes[node.left], t.nodes[node.right]
        dec = node.n * node.impurity - left.n * left.impurity - right.n * right.impurity
        name = t.features[node.feature]
        out[name] = out.get(name, 0.0) + dec
    return out


def normalize(weights: dict[str, float], features: Sequence[str] = ()) -> dict[str, float]:
    total = sum(weights.values())
    out = {f: 0.0 for f in features}
    if total <= 0:
        return out
    out.update({k: v / total for k, v in weights.items()})
    return out


def importance(t: DecisionTree) -> dict[str, float]:
    """Normalized impurity-decrease importance; features never split on get 0."""
    dec = impurity_decreases(t)
    if not dec:
        return {}
    return normalize(dec, t.features)
