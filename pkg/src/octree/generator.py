"""Rule generator: prompt templates and pluggable completion backends."""

from __future__ import annotations

import json
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Literal, Protocol, Sequence

import numpy as np

from .data import ColumnMeta
from .dsl import random_expr, render, render_name

PromptKind = Literal["p_col", "p_init", "p_gen", "p_code"]


class BackendError(RuntimeError):
    """A completion could not be produced; the caller skips the round."""


class ScriptExhausted(BackendError):
    pass


# --- prompts ----------------------------------------------------------------


def _num(v: float) -> str:
    return f"{v:g}"


def describe_kind(meta: ColumnMeta) -> str:
    if meta.kind == "numeric":
        lo, hi = meta.domain if meta.domain else (0.0, 0.0)
        return f"(Numerical value of {_num(lo)} ~ {_num(hi)})"
    if meta.kind == "boolean":
        return "(Boolean)"
    return f"(Categorical value of {', '.join(str(v) for v in meta.domain)})"


def build_attribute_block(schema: Sequence[ColumnMeta], style: Literal["plain", "described"] = "plain") -> str:
    """One ``- name: (type/range)`` line per feature.

    ``described`` uses the rule-generation layout ``- name (type/range):  description``.
    """
    if not schema:
        raise ValueError("schema is empty")
    lines = []
    for meta in schema:
        kind = describe_kind(meta)
        if style == "described":
            line = f"- {meta.name} {kind}"
            if meta.description:
                line += f":  {meta.description}"
        else:
            line = f"- {meta.name}: {kind}"
            if meta.description:
                line += f" {meta.description}"
        lines.append(line)
    return "\n".join(lines)


P_COL = """### Your task ###
Your objective is to predict {objective}. You have access to the following attributes:
{attribute_block}

To enhance prediction performance, what additional attributes should be considered? These attributes should be either binary (e.g., 'Yes' or 'No') or categorical (e.g. 'high', 'low', or 'moderate'). Please propose a new attribute that is not listed above.

### Answer ###
"""

P_INIT = """### Your task ###
You have access to the following attributes:
{attribute_block}

### Question ###
Give a good rule to predict the '{new_column}' ({output_categories}) with the attributes listed above.

### Answer ###
"""

P_GEN_HEADER = """I have some rules to predict {objective} with attributes listed below.
{attribute_block}

"""

P_GEN_TREES = "We also have corresponding decision trees (CART) to predict {objective} from the attributes listed above along with predicted {new_column}.\n"

P_GEN_ORDER = {
    "classification": "The rules are arranged in ascending order based on their scores evaluated with {predictor}, where higher scores indicate better quality.\n",
    "regression": "The rules are arranged in descending order based on their scores evaluated with {predictor}, where lower scores indicate better quality.\n",
}

P_GEN_FOOTER = """
{trajectory_block}

Give me a new rule to predict {objective} that is different from the old ones (but should use the listed attributes above) and has a score as high as possible.

Improved rule:"""

P_CODE = """### Rule ###
{rule_text}

### Your Task ###
Change the rule into a single expression of the rule language below. Consider the type of each feature.
Input attributes: [{all_column_names}]
{attribute_block}

Output: {new_column} as a number
Rule language: arithmetic + - * / ** with parentheses; functions abs, sin, cos, tan, log, exp, sqrt, min, max; comparisons < <= > >= == != and the words and, or, not yield 1 or 0; if <condition> then <value> else <value>; categorical values are compared with == or != against quoted text, e.g. Gender == "Male"; column names containing spaces are written in backticks.
Give only one line of the form '{new_column} = <expression>' without explanation. Consider the feature value types (avoid calculating categorical value and numerical value).

### Only rule expression ###
"""

TREE_SECTION = "Decision tree (CART):"


def build_p_col(schema: Sequence[ColumnMeta], objective: str) -> str:
    return P_COL.format(objective=objective, attribute_block=build_attribute_block(schema))


def build_p_init(schema: Sequence[ColumnMeta], new_column: str, output_categories: str = "Yes or No") -> str:
    return P_INIT.format(
        attribute_block=build_attribute_block(schema),
        new_column=new_column,
        output_categories=output_categories,
    )


def format_score(value: float) -> str:
    return f"{value:.4f}"


@dataclass(frozen=True)
class DisplayEntry:
    """One trajectory entry as it appears in the rule-generation prompt."""

    rule_text: str
    tree_prose: str
    score: float


def build_trajectory_block(
    entries: Sequence[DisplayEntry],
    objective: str,
    predictor: str,
    include_trees: bool = True,
) -> str:
    """Entries must already be in display order (best last)."""
    if not entries:
        raise ValueError("trajectory block needs at least one entry")
    parts = []
    for e in entries:
        lines = [f"Rule to predict {objective}:", e.rule_text]
        if include_trees:
            lines += [TREE_SECTION, e.tree_prose]
        lines += [f"Score evaluated with {predictor}:", format_score(e.score)]
        parts.append("\n".join(lines))
    return "\n\n".join(parts)


def build_p_gen(
    trajectory_block: str,
    schema: Sequence[ColumnMeta],
    objective: str,
    new_column: str,
    predictor: str,
    task: Literal["classification", "regression"] = "classification",
    include_trees: bool = True,
) -> str:
    if not trajectory_block.strip():
        raise ValueError("trajectory block is empty")
    text = P_GEN_HEADER.format(objective=objective, attribute_block=build_attribute_block(schema, "described"))
    if include_trees:
        text += P_GEN_TREES.format(objective=objective, new_column=new_column)
    text += P_GEN_ORDER[task].format(predictor=predictor)
    text += P_GEN_FOOTER.format(trajectory_block=trajectory_block, objective=objective)
    return text


def build_p_code(rule_text: str, schema: Sequence[ColumnMeta], new_column: str) -> str:
    return P_CODE.format(
        rule_text=rule_text.strip(),
        all_column_names=", ".join(render_name(c.name) for c in schema),
        attribute_block=build_attribute_block(schema),
        new_column=render_name(new_column),
    )


# --- backends ---------------------------------------------------------------


@dataclass(frozen=True)
class PromptContext:
    """Structured side information for backends that ignore prompt text."""

    kind: PromptKind
    schema: tuple[ColumnMeta, ...] = ()
    new_column: str = ""
    round: int = 0


class Backend(Protocol):
    id: str

    def complete(self, prompt: str, ctx: PromptContext) -> str: ...


class ScriptedBackend:
    """Replays a fixed list of responses in order; raises once exhausted."""

    def __init__(self, responses: Sequence[str]):
        if not responses:
            raise ValueError("scripted backend needs at least one response")
        self.responses = list(responses)
        self.id = "scripted"
        self._cursor = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str, ctx: PromptContext) -> str:
        with self._lock:
            if self._cursor >= len(self.responses):
                raise ScriptExhausted(f"script exhausted after {len(self.responses)} responses")
            out = self.responses[self._cursor]
            self._cursor += 1
        return out


class RandomBackend:
    """Baseline generator: samples well-typed random rules from the grammar."""

    def __init__(self, seed: int = 0, max_depth: int = 3):
        self.rng = np.random.default_rng(seed)
        self.max_depth = max_depth
        self.id = f"random(seed={seed})"
        self._lock = threading.Lock()

    def complete(self, prompt: str, ctx: PromptContext) -> str:
        with self._lock:
            if ctx.kind == "p_col":
                return f"'Random Feature {int(self.rng.integers(1_000_000))}'"
            expr = random_expr(self.rng, ctx.schema, self.max_depth)
        return f"{render_name(ctx.new_column or 'new')} = {render(expr)}"


@dataclass
class ChatAPIBackend:
    """OpenAI-compatible ``/v1/chat/completions`` client (one user message per call)."""

    endpoint: str
    model: str
    temperature: float = 0.7
    max_tokens: int = 512
    timeout: float = 60.0
    retries: int = 2
    api_key_env: str = "OPENAI_API_KEY"
    backoff: float = 1.0
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        self.id = f"chat_api({self.model})"

    @property
    def url(self) -> str:
        base = self.endpoint.rstrip("/")
        if base.endswith("/chat/completions"):
            return base
        if base.endswith("/v1"):
            return base + "/chat/completions"
        return base + "/v1/chat/completions"

    def request_body(self, prompt: str) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    def complete(self, prompt: str, ctx: PromptContext | None = None) -> str:
        data = json.dumps(self.request_body(prompt)).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                self.sleep(self.backoff * attempt)
            req = urllib.request.Request(self.url, data=data, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
            except urllib.error.HTTPError as exc:
                last_error = exc
                if exc.code >= 500:
                    continue
                raise BackendError(f"chat API rejected request: HTTP {exc.code}") from exc
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                last_error = exc
                continue
            try:
                return payload["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"malformed chat API response: {payload!r:.200}") from exc
        raise BackendError(f"chat API failed after {self.retries + 1} attempts: {last_error}")


@dataclass(frozen=True)
class Exchange:
    round: int
    kind: str
    backend: str
    request: str
    response: str | None
    latency: float
    error: str | None = None


class GeneratorSession:
    """Wraps a backend and records every exchange before returning it."""

    def __init__(self, backend: Backend, on_exchange: Callable[[Exchange], None] | None = None):
        self.backend = backend
        self.on_exchange = on_exchange
        self.exchanges: list[Exchange] = []

    def complete(self, prompt: str, ctx: PromptContext) -> str:
        start = time.perf_counter()
        try:
            response = self.backend.complete(prompt, ctx)
        except BackendError as exc:
            self._record(Exchange(ctx.round, ctx.kind, self.backend.id, prompt, None, time.perf_counter() - start, str(exc)))
            raise
        self._record(Exchange(ctx.round, ctx.kind, self.backend.id, prompt, response, time.perf_counter() - start))
        return response

    def _record(self, ex: Exchange) -> None:
        self.exchanges.append(ex)
        if self.on_exchange is not None:
            self.on_exchange(ex)
