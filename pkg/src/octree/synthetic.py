"""Synthetic datasets with planted ground-truth features."""

from __future__ import annotations

import numpy as np

from .data import Dataset, Task, infer_meta

# rules used by the bundled scripted demo: the planted product plus distractors
PLANTED_RULE = "x6 = x1 * x5"
DISTRACTOR_RULES = (
    "x6 = x2 * x3",
    "x6 = x1 + x5",
    "x6 = x2 - x4",
    "x6 = np.sin(x3)",
    "x6 = x4 ** 2",
    "x6 = x2 * x4 * x3",
    "x6 = abs(x3 - x2)",
    "x6 = np.exp(x4)",
    "x6 = x1 / (x2 + 1)",
    "x6 = min(x3, x4)",
    "x6 = max(x2, x3)",
    "x6 = np.sqrt(x2)",
    "x6 = if x3 > 0.5 then 1 else 0",
    "x6 = x5 - x1",
    "x6 = x3 * x4",
    "x6 = np.cos(x2) * x3",
    "x6 = (x2 + x3) ** 2",
    "x6 = np.log(x4 + 1)",
    "x6 = x2 + x3 + x4",
)


def planted_dataset(n: int = 2000, seed: int = 0, noise: float = 0.05) -> Dataset:
    """Five uniform features; label is 1 iff x1*x5 exceeds its median.

    ``noise`` is the fraction of labels flipped (exactly ``round(noise * n)`` rows).
    """
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, 5))
    prod = X[:, 0] * X[:, 4]
    y = (prod > np.median(prod)).astype(np.int64)
    flip = rng.choice(n, size=int(round(noise * n)), replace=False)
    y[flip] = 1 - y[flip]
    names = [f"x{i + 1}" for i in range(5)]
    columns = {name: X[:, i].copy() for i, name in enumerate(names)}
    schema = tuple(infer_meta(name, columns[name]) for name in names)
    labels = np.asarray([str(v) for v in y], dtype=object)
    return Dataset(schema, columns, "y", labels, Task("classification", ("0", "1")))
