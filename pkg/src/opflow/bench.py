"""Benchmark plumbing: datasets, deterministic splits, answer scorers,
Pareto fronts over (cost, score), and cost report formatting."""

from __future__ import annotations

import json
import math
import random
import re
import string
import subprocess
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

from opflow.errors import OpflowError


class Family(str, Enum):
    QA = "qa"
    MATH = "math"
    CODE = "code"
    EMBODIED = "embodied"
    GAME = "game"


@dataclass(frozen=True)
class DatasetItem:
    id: str
    problem: str
    gold: str


@dataclass(frozen=True)
class Dataset:
    task: str
    family: Family
    items: tuple[DatasetItem, ...]

    def __post_init__(self):
        seen: set[str] = set()
        for item in self.items:
            if item.id in seen:
                raise ValueError(f"duplicate item id {item.id!r} in dataset {self.task!r}")
            seen.add(item.id)

    def by_id(self) -> dict[str, DatasetItem]:
        return {item.id: item for item in self.items}


def load_dataset(manifest_path) -> Dataset:
    """Read a dataset manifest: JSON with ``task``, ``family``, and ``items``
    (a JSONL path relative to the manifest).  Item lines carry id, problem,
    and gold strings."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise OpflowError(f"cannot read dataset manifest {manifest_path}: {exc}") from None
    if not isinstance(manifest, dict):
        raise OpflowError(f"{manifest_path}: manifest must be a JSON object")
    for key in ("task", "family", "items"):
        if not isinstance(manifest.get(key), str):
            raise OpflowError(f"{manifest_path}: missing string field {key!r}")
    try:
        family = Family(manifest["family"])
    except ValueError:
        raise OpflowError(
            f"{manifest_path}: unknown family {manifest['family']!r} "
            f"(expected one of: {', '.join(f.value for f in Family)})"
        ) from None

    items_path = manifest_path.parent / manifest["items"]
    items: list[DatasetItem] = []
    try:
        with open(items_path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                raw = raw.strip()
                if not raw:
                    continue
                try:
                    obj = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise OpflowError(f"{items_path}:{lineno}: invalid JSON: {exc.msg}") from None
                if not isinstance(obj, dict) or not all(
                    isinstance(obj.get(k), str) for k in ("id", "problem", "gold")
                ):
                    raise OpflowError(
                        f"{items_path}:{lineno}: expected string fields id, problem, gold"
                    )
                items.append(DatasetItem(id=obj["id"], problem=obj["problem"], gold=obj["gold"]))
    except OSError as exc:
        raise OpflowError(f"cannot read dataset items {items_path}: {exc}") from None
    if not items:
        raise OpflowError(f"{items_path}: dataset has no items")
    try:
        return Dataset(task=manifest["task"], family=family, items=tuple(items))
    except ValueError as exc:
        raise OpflowError(str(exc)) from None


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Split:
    validation: tuple[str, ...]
    test: tuple[str, ...]
    seed: int
    ratio: float


def split_dataset(dataset: Dataset, ratio: float = 0.2, seed: int = 42) -> Split:
    """Deterministic validation/test split.

    Item ids are shuffled by a seeded Fisher-Yates pass (descending index,
    ``rng.randrange(i + 1)`` partner); the first ``round(ratio * N)`` ids form
    the validation split and the rest the test split, both kept in shuffled
    order.  The same seed and ratio always yield the same split.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be strictly between 0 and 1, got {ratio}")
    ids = [item.id for item in dataset.items]
    n = len(ids)
    rng = random.Random(seed)
    for i in range(n - 1, 0, -1):
        j = rng.randrange(i + 1)
        ids[i], ids[j] = ids[j], ids[i]
    n_val = round(ratio * n)
    if n_val == 0 or n_val == n:
        raise ValueError(
            f"ratio {ratio} leaves an empty split for {n} items "
            f"(validation would take {n_val})"
        )
    return Split(validation=tuple(ids[:n_val]), test=tuple(ids[n_val:]), seed=seed, ratio=ratio)


def split_items(dataset: Dataset, ids: Sequence[str]) -> list[DatasetItem]:
    table = dataset.by_id()
    try:
        return [table[i] for i in ids]
    except KeyError as exc:
        raise ValueError(f"split references unknown item id {exc.args[0]!r}") from None


# ---------------------------------------------------------------------------
# Scorers
# ---------------------------------------------------------------------------

Scorer = Callable[[str, str], float]

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def _norm_tokens(text: str) -> list[str]:
    # Lowercase, drop punctuation characters, collapse whitespace.  Articles
    # are kept on purpose.
    return text.lower().translate(_PUNCT_TABLE).split()


def score_f1(prediction: str, gold: str) -> float:
    """Bag-of-token F1 over normalized tokens.  Either side normalizing to
    nothing scores 0."""
    pred = _norm_tokens(prediction)
    ref = _norm_tokens(gold)
    if not pred or not ref:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(ref)
    return 2 * precision * recall / (precision + recall)


_NUMBER_RE = re.compile(r"[-+]?\d+(?:,\d{3})*(?:\.\d+)?(?:[eE][-+]?\d+)?")
_ANSWER_MARKER = "final answer"


def extract_number(text: str, prefer_marker: bool = True) -> float | None:
    """The answer number in a response: the first number after the last
    answer marker when one is present, otherwise the last number anywhere."""
    if prefer_marker:
        idx = text.lower().rfind(_ANSWER_MARKER)
        if idx >= 0:
            match = _NUMBER_RE.search(text, idx + len(_ANSWER_MARKER))
            if match:
                return float(match.group().replace(",", ""))
    matches = _NUMBER_RE.findall(text)
    if not matches:
        return None
    return float(matches[-1].replace(",", ""))


def score_exact_numeric(prediction: str, gold: str) -> float:
    """1.0 when the extracted numbers agree within a relative tolerance of
    1e-6 scaled by max(1, |gold|), else 0.0."""
    pred = extract_number(prediction)
    ref = extract_number(gold)
    if pred is None or ref is None:
        return 0.0
    return 1.0 if abs(pred - ref) <= 1e-6 * max(1.0, abs(ref)) else 0.0


def binary_exact_reward(prediction: str, gold: str) -> float:
    """Stand-in reward for environments without a programmatic judge:
    normalized exact match.  Real deployments register their own."""
    return 1.0 if _norm_tokens(prediction) == _norm_tokens(gold) else 0.0


class ExternalCommandScorer:
    """Scores by running a judge command with the prediction and gold appended
    as the final two arguments; stdout must be a float in [0, 1]."""

    def __init__(self, command: Sequence[str], timeout: float = 30.0):
        if not command:
            raise ValueError("external scorer needs a command")
        self.command = list(command)
        self.timeout = timeout

    def __call__(self, prediction: str, gold: str) -> float:
        try:
            proc = subprocess.run(
                self.command + [prediction, gold],
                capture_output=True,
                text=True,
                timeout=self.timeout,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise OpflowError(f"external scorer failed: {exc}") from None
        if proc.returncode != 0:
            raise OpflowError(
                f"external scorer exited {proc.returncode}: {proc.stderr.strip()[:200]}"
            )
        try:
            value = float(proc.stdout.strip())
        except ValueError:
            raise OpflowError(
                f"external scorer printed {proc.stdout.strip()[:80]!r}, expected a float"
            ) from None
        if not 0.0 <= value <= 1.0 or math.isnan(value):
            raise OpflowError(f"external scorer value {value} outside [0, 1]")
        return value


class ScorerKind(str, Enum):
    TOKEN_F1 = "token-f1"
    EXACT_NUMERIC = "exact-numeric"
    BINARY_REWARD = "binary-reward"
    EXTERNAL = "external"


FAMILY_SCORERS: dict[Family, ScorerKind] = {
    Family.QA: ScorerKind.TOKEN_F1,
    Family.MATH: ScorerKind.EXACT_NUMERIC,
    Family.CODE: ScorerKind.EXTERNAL,
    Family.EMBODIED: ScorerKind.BINARY_REWARD,
    Family.GAME: ScorerKind.BINARY_REWARD,
}

_REWARD_REGISTRY: dict[str, Scorer] = {}


def register_reward(name: str, scorer: Scorer) -> None:
    """Install a named binary-reward implementation (e.g. an environment
    judge) selectable from configuration."""
    _REWARD_REGISTRY[name] = scorer


def get_scorer(
    kind: ScorerKind | str,
    *,
    command: Sequence[str] | None = None,
    reward: str | None = None,
) -> Scorer:
    kind = ScorerKind(kind)
    if kind is ScorerKind.TOKEN_F1:
        return score_f1
    if kind is ScorerKind.EXACT_NUMERIC:
        return score_exact_numeric
    if kind is ScorerKind.BINARY_REWARD:
        if reward is not None:
            try:
                return _REWARD_REGISTRY[reward]
            except KeyError:
                raise OpflowError(f"no registered reward named {reward!r}") from None
        return binary_exact_reward
    if command is None:
        raise OpflowError("external scorer requires a judge command")
    return ExternalCommandScorer(command)


def scorer_for_family(family: Family, **kwargs) -> Scorer:
    return get_scorer(FAMILY_SCORERS[family], **kwargs)


# ---------------------------------------------------------------------------
# Pareto fronts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParetoPoint:
    label: str
    cost: float
    score: float


def pareto_front(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated subset under (cost to minimize, score to maximize).

    A point is dominated by one with cost no higher and score no lower that
    strictly improves either; exact duplicates survive together.  Returned
    sorted by cost ascending, input order within ties.  Single cost-sorted
    sweep, O(n log n).
    """
    order = sorted(range(len(points)), key=lambda i: (points[i].cost, i))
    front: list[ParetoPoint] = []
    best_cheaper = -math.inf
    i = 0
    while i < len(order):
        j = i
        cost = points[order[i]].cost
        while j < len(order) and points[order[j]].cost == cost:
            j += 1
        group = [points[k] for k in order[i:j]]
        group_max = max(p.score for p in group)
        if group_max > best_cheaper:
            front.extend(p for p in group if p.score == group_max)
        best_cheaper = max(best_cheaper, group_max)
        i = j
    return front


# ---------------------------------------------------------------------------
# Cost reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    model: str
    method: str
    rank: int
    score: float
    cost: float


def _report_order(rows: Sequence[ReportRow]) -> list[ReportRow]:
    # Model-major in order of first appearance, then method likewise, then rank.
    model_order: dict[str, int] = {}
    method_order: dict[str, int] = {}
    for row in rows:
        model_order.setdefault(row.model, len(model_order))
        method_order.setdefault(row.method, len(method_order))
    return sorted(
        rows, key=lambda r: (model_order[r.model], method_order[r.method], r.rank)
    )


def format_report_csv(rows: Sequence[ReportRow]) -> str:
    lines = ["model,method,rank,score,cost"]
    for row in _report_order(rows):
        lines.append(
            f"{row.model},{row.method},Top-{row.rank},{row.score:.4f},{row.cost:.4f}"
        )
    return "\n".join(lines) + "\n"


def format_report_markdown(rows: Sequence[ReportRow]) -> str:
    lines = [
        "| model | method | rank | score | cost |",
        "| --- | --- | --- | ---: | ---: |",
    ]
    for row in _report_order(rows):
        lines.append(
            f"| {row.model} | {row.method} | Top-{row.rank} "
            f"| {row.score:.4f} | {row.cost:.4f} |"
        )
    return "\n".join(lines) + "\n"


def pareto_csv(rows: Sequence[ReportRow]) -> str:
    """Plot-ready view: every row with its per-model front membership.
    Columns: cost, score, label, on_front."""
    ordered = _report_order(rows)
    by_model: dict[str, list[int]] = {}
    for i, row in enumerate(ordered):
        by_model.setdefault(row.model, []).append(i)
    on_front: set[int] = set()
    for indices in by_model.values():
        points = [ParetoPoint(label=str(i), cost=ordered[i].cost, score=ordered[i].score) for i in indices]
        on_front.update(int(p.label) for p in pareto_front(points))
    lines = ["cost,score,label,on_front"]
    for i, row in enumerate(ordered):
        label = f"{row.model}/{row.method}/Top-{row.rank}"
        lines.append(
            f"{row.cost:.4f},{row.score:.4f},{label},{'true' if i in on_front else 'false'}"
        )
    return "\n".join(lines) + "\n"
