"""Predictors trained inside the optimization loop and their validation metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np

from .data import Dataset
from .tree import DecisionTree, class_indices, grow, impurity_decreases, normalize

PredictorKind = Literal["cart", "gbdt"]


class NotFittedError(RuntimeError):
    pass


@dataclass(frozen=True)
class PredictorConfig:
    kind: PredictorKind = "gbdt"
    max_depth: int = 3
    n_rounds: int = 100
    learning_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("cart", "gbdt"):
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        # depth 0 is allowed for gbdt: each round is then a single constant leaf
        if self.max_depth < (1 if self.kind == "cart" else 0):
            raise ValueError(f"max_depth too small: {self.max_depth}")
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def label(self, classification: bool) -> str:
        name = "CART" if self.kind == "cart" else "GBDT"
        return f"{name} {'classifier' if classification else 'regressor'}"


@dataclass(frozen=True)
class EvalReport:
    metric: Literal["error_rate", "mae"]
    value: float
    n: int

    def __post_init__(self):
        if self.value < 0 or (self.metric == "error_rate" and self.value > 1):
            raise ValueError(f"invalid {self.metric} value {self.value}")

    @property
    def display_score(self) -> float:
        """Score shown to the generator: accuracy for classification, MAE otherwise."""
        return 1.0 - self.value if self.metric == "error_rate" else self.value


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def _logloss(z: np.ndarray, t: np.ndarray) -> float:
    # mean of log(1 + exp(-s z)) with s = +-1, computed stably
    s = 2.0 * t - 1.0
    return float(np.mean(np.logaddexp(0.0, -s * z)))


class Predictor:
    """Common surface: ``fit`` then ``predict`` / ``score`` / ``gain_importance``."""

    def __init__(self, cfg: PredictorConfig):
        self.cfg = cfg
        self.features: tuple[str, ...] | None = None
        self.task = None

    @property
    def fitted(self) -> bool:
        return self.features is not None

    def _check(self):
        if not self.fitted:
            raise NotFittedError("predictor has not been trained")

    def fit(self, d: Dataset) -> Predictor:
        raise NotImplementedError

    def predict(self, d: Dataset) -> np.ndarray:
        raise NotImplementedError

    def trees(self) -> list[DecisionTree]:
        raise NotImplementedError

    def gain_importance(self) -> dict[str, float]:
        """Impurity-decrease gain summed over every tree, normalized to 1."""
        self._check()
        total: dict[str, float] = {}
        for t in self.trees():
            for k, v in impurity_decreases(t).items():
                total[k] = total.get(k, 0.0) + v
        return normalize(total, self.features)


class CartPredictor(Predictor):
    def fit(self, d: Dataset) -> CartPredictor:
        if d.n_rows == 0:
            raise ValueError("cannot train on an empty dataset")
        X = d.matrix()
        if d.task.is_classification:
            self.tree = grow(X, class_indices(d.y, d.task.classes), "gini", self.cfg.max_depth, d.feature_names, d.task.classes)
        else:
            self.tree = grow(X, d.y.astype(float), "variance", self.cfg.max_depth, d.feature_names)
        self.features = tuple(d.feature_names)
        self.task = d.task
        return self

    def predict(self, d: Dataset) -> np.ndarray:
        self._check()
        return self.tree.predict_matrix(d.matrix(self.features))

    def trees(self) -> list[DecisionTree]:
        self._check()
        return [self.tree]


class GBDTPredictor(Predictor):
    """Gradient boosting over variance-split CART regressors.

    Regression fits squared-error residuals. Classification boosts one
    logistic model per class (one-vs-rest) from the log-odds of the class
    prior, with Newton leaf values; a binary task needs only the model for
    the second class.
    """

    def fit(self, d: Dataset) -> GBDTPredictor:
        if d.n_rows == 0:
            raise ValueError("cannot train on an empty dataset")
        X = d.matrix()
        self.features = tuple(d.feature_names)
        self.task = d.task
        self.loss_curve: list[float] = []
        if d.task.is_classification:
            y = class_indices(d.y, d.task.classes)
            k = d.task.n_classes
            targets = [1] if k == 2 else list(range(k))
            self.models = [self._boost_logistic(X, (y == c).astype(float)) for c in targets]
            self.loss_curve = list(np.sum([m[2] for m in self.models], axis=0))
        else:
            self.models = [self._boost_squared(X, d.y.astype(float))]
            self.loss_curve = self.models[0][2]
        return self

    def _boost_squared(self, X, y):
        base = float(np.mean(y))
        f = np.full(len(y), base)
        trees, curve = [], [float(np.mean((y - f) ** 2))]
        for _ in range(self.cfg.n_rounds):
            r = y - f
            t = grow(X, r, "variance", self.cfg.max_depth, self.features)
            f = f + self.cfg.learning_rate * t.predict_matrix(X)
            trees.append(t)
            curve.append(float(np.mean((y - f) ** 2)))
        return base, trees, curve

    def _boost_logistic(self, X, t01):
        prior = float(np.clip(np.mean(t01), 1e-6, 1 - 1e-6))
        base = float(np.log(prior / (1 - prior)))
        f = np.full(len(t01), base)
        trees, curve = [], [_logloss(f, t01)]
        for _ in range(self.cfg.n_rounds):
            p = _sigmoid(f)
            g = t01 - p
            tree = grow(X, g, "variance", self.cfg.max_depth, self.features)
            leaves = tree.apply(X)
            num = np.bincount(leaves, weights=g, minlength=len(tree.nodes))
            den = np.bincount(leaves, weights=p * (1 - p), minlength=len(tree.nodes))
            values = {i: num[i] / max(den[i], 1e-12) for i in np.unique(leaves)}
            tree = tree.with_leaf_values(values)
            f = f + self.cfg.learning_rate * tree.predict_matrix(X)
            trees.append(tree)
            curve.append(_logloss(f, t01))
        return base, trees, curve

    def _raw(self, X: np.ndarray) -> np.ndarray:
        cols = []
        for base, trees, _ in self.models:
            f = np.full(len(X), base)
            for t in trees:
                f = f + self.cfg.learning_rate * t.predict_matrix(X)
            cols.append(f)
        return np.column_stack(cols)

    def predict_proba(self, d: Dataset) -> np.ndarray:
        """Per-class one-vs-rest probabilities (columns follow ``task.classes``)."""
        self._check()
        if not self.task.is_classification:
            raise ValueError("predict_proba needs a classification task")
        p = _sigmoid(self._raw(d.matrix(self.features)))
        if self.task.n_classes == 2:
            return np.column_stack([1 - p[:, 0], p[:, 0]])
        return p

    def predict(self, d: Dataset) -> np.ndarray:
        self._check()
        if self.task.is_classification:
            proba = self.predict_proba(d)
            labels = np.asarray(self.task.classes, dtype=object)
            return labels[np.argmax(proba, axis=1)]
        return self._raw(d.matrix(self.features))[:, 0]

    def trees(self) -> list[DecisionTree]:
        self._check()
        return [t for _, trees, _ in self.models for t in trees]


def make_predictor(cfg: PredictorConfig) -> Predictor:
    return CartPredictor(cfg) if cfg.kind == "cart" else GBDTPredictor(cfg)


def train(cfg: PredictorConfig, d: Dataset) -> Predictor:
    return make_predictor(cfg).fit(d)


def score_predictions(pred: np.ndarray, d: Dataset) -> EvalReport:
    if d.task.is_classification:
        wrong = np.asarray([a != b for a, b in zip(pred.tolist(), d.y.tolist())], dtype=bool)
        return EvalReport("error_rate", float(wrong.mean()) if len(wrong) else 0.0, d.n_rows)
    err = np.abs(np.asarray(pred, dtype=float) - d.y.astype(float))
    return EvalReport("mae", float(err.mean()) if len(err) else 0.0, d.n_rows)


def score(p: Predictor, d: Dataset) -> EvalReport:
    """Misclassification rate for classification, mean absolute error for regression."""
    return score_predictions(p.predict(d), d)


def gain_importance(p: Predictor) -> dict[str, float]:
    return p.gain_importance()
