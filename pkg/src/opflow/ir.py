"""Workflow intermediate representation.

A workflow is a tree of steps over a closed grammar: operator invocations,
fixed-count loops, and substring-test branches.  Documents are plain JSON so
that model-proposed workflows can be parsed, validated, rejected with a
precise reason, and round-tripped byte-for-byte.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterator, Union

from opflow.errors import OpflowError

FORMAT_VERSION = 1

# Hard structural limits on a single workflow.
MAX_INVOKES = 10
LOOP_COUNT_MIN = 1
LOOP_COUNT_MAX = 5
MAX_COMPOUND_DEPTH = 2

_NO_WS_RE = re.compile(r"^\S+$")


class WorkflowParseError(OpflowError):
    """A workflow or registry document is malformed.  Names the offending field."""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.reason = message


# ---------------------------------------------------------------------------
# Operator definitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OperatorDef:
    """A named, reusable unit of model work.

    ``operator_prompt`` is the instruction the executor sends verbatim;
    ``tool`` optionally names a host-registered callable applied to the
    model output.
    """

    name: str
    operator_prompt: str
    tool: str | None = None

    def __post_init__(self):
        if not self.name or not _NO_WS_RE.match(self.name):
            raise ValueError(f"operator name must be nonempty without whitespace, got {self.name!r}")
        if not self.operator_prompt or not self.operator_prompt.strip():
            raise ValueError(f"operator {self.name!r} has an empty prompt")

    def to_dict(self) -> dict:
        doc: dict = {"name": self.name, "operator_prompt": self.operator_prompt}
        if self.tool is not None:
            doc["tool"] = self.tool
        return doc


class OperatorRegistry:
    """Ordered name -> :class:`OperatorDef` table with unique names."""

    def __init__(self, operators: list[OperatorDef] | tuple[OperatorDef, ...] = ()):
        self._ops: dict[str, OperatorDef] = {}
        for op in operators:
            self.add(op)

    def add(self, op: OperatorDef) -> None:
        if op.name in self._ops:
            raise ValueError(f"duplicate operator name {op.name!r}")
        self._ops[op.name] = op

    def get(self, name: str) -> OperatorDef:
        try:
            return self._ops[name]
        except KeyError:
            raise KeyError(f"unknown operator {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._ops

    def __len__(self) -> int:
        return len(self._ops)

    def __iter__(self) -> Iterator[OperatorDef]:
        return iter(self._ops.values())

    def names(self) -> list[str]:
        return list(self._ops)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "operators": [op.to_dict() for op in self],
        }

    @classmethod
    def from_obj(cls, obj: object) -> "OperatorRegistry":
        # Accept either the versioned wrapper or a bare operator array.
        if isinstance(obj, dict):
            version = obj.get("format_version", FORMAT_VERSION)
            if version != FORMAT_VERSION:
                raise WorkflowParseError(f"unsupported format_version {version!r}", "format_version")
            items = obj.get("operators")
            if not isinstance(items, list):
                raise WorkflowParseError("expected a list", "operators")
        elif isinstance(obj, list):
            items = obj
        else:
            raise WorkflowParseError(f"expected object or array, got {type(obj).__name__}")
        registry = cls()
        for i, item in enumerate(items):
            path = f"operators[{i}]"
            if not isinstance(item, dict):
                raise WorkflowParseError("expected an object", path)
            name = item.get("name")
            prompt = item.get("operator_prompt")
            tool = item.get("tool")
            if not isinstance(name, str):
                raise WorkflowParseError("missing string field 'name'", path)
            if not isinstance(prompt, str):
                raise WorkflowParseError("missing string field 'operator_prompt'", f"{path}.operator_prompt")
            if tool is not None and not isinstance(tool, str):
                raise WorkflowParseError("'tool' must be a string when present", f"{path}.tool")
            try:
                registry.add(OperatorDef(name=name, operator_prompt=prompt, tool=tool))
            except ValueError as exc:
                raise WorkflowParseError(str(exc), path) from None
        return registry

    @classmethod
    def from_json(cls, text: str) -> "OperatorRegistry":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise WorkflowParseError(f"invalid JSON: {exc.msg} (line {exc.lineno})") from None
        return cls.from_obj(obj)

    @classmethod
    def load(cls, path) -> "OperatorRegistry":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Invoke:
    """Run one operator against the accumulated history, store under ``label``."""

    operator: str
    label: str
    prompt_augment: str | None = None


@dataclass(frozen=True)
class Loop:
    """Execute ``body`` exactly ``count`` times."""

    count: int
    body: tuple["Step", ...]


@dataclass(frozen=True)
class SubstringTest:
    """True when ``needle`` occurs in the latest response stored under ``label``.

    Matching is case-insensitive unless ``case_sensitive`` is set.
    """

    label: str
    needle: str
    case_sensitive: bool = False


@dataclass(frozen=True)
class Branch:
    predicate: SubstringTest
    then: tuple["Step", ...]
    orelse: tuple["Step", ...] = ()


Step = Union[Invoke, Loop, Branch]


@dataclass(frozen=True)
class WorkflowIR:
    name: str
    steps: tuple[Step, ...]
    task: str | None = None
    origin_round: int | None = None


def iter_invokes(steps: tuple[Step, ...] | list[Step]) -> Iterator[Invoke]:
    """Yield every Invoke occurrence in document order, including loop bodies
    and both branch arms."""
    for step in steps:
        if isinstance(step, Invoke):
            yield step
        elif isinstance(step, Loop):
            yield from iter_invokes(step.body)
        elif isinstance(step, Branch):
            yield from iter_invokes(step.then)
            yield from iter_invokes(step.orelse)


def invoke_count(workflow: WorkflowIR | tuple[Step, ...] | list[Step]) -> int:
    """Number of Invoke occurrences in the document (complexity measure).

    Loop bodies count once regardless of the loop count.
    """
    steps = workflow.steps if isinstance(workflow, WorkflowIR) else workflow
    return sum(1 for _ in iter_invokes(steps))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _require(obj: dict, key: str, kind: type, path: str):
    value = obj.get(key)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise WorkflowParseError(
            f"missing or invalid field '{key}' (expected {kind.__name__})", path
        )
    return value


def _parse_steps(items: object, path: str) -> tuple[Step, ...]:
    if not isinstance(items, list):
        raise WorkflowParseError("expected a list of steps", path)
    steps = []
    for i, item in enumerate(items):
        here = f"{path}[{i}]"
        if not isinstance(item, dict):
            raise WorkflowParseError("expected a step object", here)
        kind = item.get("kind")
        if kind == "invoke":
            augment = item.get("prompt_augment")
            if augment is not None and not isinstance(augment, str):
                raise WorkflowParseError("'prompt_augment' must be a string", f"{here}.prompt_augment")
            steps.append(
                Invoke(
                    operator=_require(item, "operator", str, f"{here}.operator"),
                    label=_require(item, "label", str, f"{here}.label"),
                    prompt_augment=augment,
                )
            )
        elif kind == "loop":
            steps.append(
                Loop(
                    count=_require(item, "count", int, f"{here}.count"),
                    body=_parse_steps(item.get("body"), f"{here}.body"),
                )
            )
        elif kind == "branch":
            pred = item.get("predicate")
            if not isinstance(pred, dict):
                raise WorkflowParseError("missing 'predicate' object", f"{here}.predicate")
            case_sensitive = pred.get("case_sensitive", False)
            if not isinstance(case_sensitive, bool):
                raise WorkflowParseError("'case_sensitive' must be a boolean", f"{here}.predicate.case_sensitive")
            predicate = SubstringTest(
                label=_require(pred, "label", str, f"{here}.predicate.label"),
                needle=_require(pred, "needle", str, f"{here}.predicate.needle"),
                case_sensitive=case_sensitive,
            )
            orelse = item.get("else", [])
            steps.append(
                Branch(
                    predicate=predicate,
                    then=_parse_steps(item.get("then"), f"{here}.then"),
                    orelse=_parse_steps(orelse, f"{here}.else"),
                )
            )
        else:
            raise WorkflowParseError(f"unknown step kind {kind!r}", f"{here}.kind")
    return tuple(steps)


def parse_workflow(text: str) -> WorkflowIR:
    """Parse a JSON workflow document.  Raises :class:`WorkflowParseError`
    naming the offending field on any shape problem."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WorkflowParseError(f"invalid JSON: {exc.msg} (line {exc.lineno})") from None
    return workflow_from_obj(obj)


def workflow_from_obj(obj: object) -> WorkflowIR:
    if not isinstance(obj, dict):
        raise WorkflowParseError(f"expected an object, got {type(obj).__name__}")
    version = obj.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise WorkflowParseError(f"unsupported format_version {version!r}", "format_version")
    name = _require(obj, "name", str, "name")
    task = obj.get("task")
    if task is not None and not isinstance(task, str):
        raise WorkflowParseError("'task' must be a string", "task")
    origin = obj.get("origin_round")
    if origin is not None and (not isinstance(origin, int) or isinstance(origin, bool)):
        raise WorkflowParseError("'origin_round' must be an integer", "origin_round")
    steps = _parse_steps(obj.get("steps"), "steps")
    return WorkflowIR(name=name, steps=steps, task=task, origin_round=origin)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _step_to_dict(step: Step) -> dict:
    if isinstance(step, Invoke):
        doc: dict = {"kind": "invoke", "operator": step.operator, "label": step.label}
        if step.prompt_augment is not None:
            doc["prompt_augment"] = step.prompt_augment
        return doc
    if isinstance(step, Loop):
        return {"kind": "loop", "count": step.count, "body": [_step_to_dict(s) for s in step.body]}
    if isinstance(step, Branch):
        pred: dict = {"label": step.predicate.label, "needle": step.predicate.needle}
        if step.predicate.case_sensitive:
            pred["case_sensitive"] = True
        return {
            "kind": "branch",
            "predicate": pred,
            "then": [_step_to_dict(s) for s in step.then],
            "else": [_step_to_dict(s) for s in step.orelse],
        }
    raise TypeError(f"not a step: {step!r}")


def workflow_to_dict(workflow: WorkflowIR) -> dict:
    doc: dict = {"format_version": FORMAT_VERSION, "name": workflow.name}
    if workflow.task is not None:
        doc["task"] = workflow.task
    if workflow.origin_round is not None:
        doc["origin_round"] = workflow.origin_round
    doc["steps"] = [_step_to_dict(s) for s in workflow.steps]
    return doc


def workflow_to_json(workflow: WorkflowIR, indent: int | None = 2) -> str:
    return json.dumps(workflow_to_dict(workflow), indent=indent)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def messages(self) -> list[str]:
        return [str(v) for v in self.violations]


def validate_workflow(workflow: WorkflowIR, registry: OperatorRegistry) -> ValidationReport:
    """Check every structural invariant; report all violations, not just the first.

    Checks: at least one invocation, complexity cap, loop count bounds,
    compound nesting depth, label uniqueness, branch predicates referencing
    labels assigned on every path that reaches them, nonempty needles, and
    operator resolution against ``registry``.
    """
    report = ValidationReport()
    add = lambda path, msg: report.violations.append(Violation(path, msg))

    count = invoke_count(workflow)
    if count == 0:
        add("steps", "workflow has no operator invocations")
    if count > MAX_INVOKES:
        add("steps", f"complexity {count} exceeds the limit of {MAX_INVOKES} invocations")

    seen_labels: set[str] = set()

    def walk(steps: tuple[Step, ...], assigned: set[str], depth: int, path: str) -> set[str]:
        # Returns labels definitely assigned after the block runs, given
        # 'assigned' on entry.  Loop bodies run at least once; a branch only
        # guarantees labels assigned in both arms.
        definite = set(assigned)
        for i, step in enumerate(steps):
            here = f"{path}[{i}]"
            if isinstance(step, Invoke):
                if not step.label or not step.label.strip():
                    add(f"{here}.label", "label must be a nonempty string")
                elif "\n" in step.label:
                    add(f"{here}.label", "label must not contain newlines")
                if step.label in seen_labels:
                    add(f"{here}.label", f"duplicate label {step.label!r}")
                seen_labels.add(step.label)
                if not step.operator or step.operator not in registry:
                    add(f"{here}.operator", f"unresolvable operator {step.operator!r}")
                definite.add(step.label)
            elif isinstance(step, Loop):
                if not (LOOP_COUNT_MIN <= step.count <= LOOP_COUNT_MAX):
                    add(
                        f"{here}.count",
                        f"loop count {step.count} outside [{LOOP_COUNT_MIN}, {LOOP_COUNT_MAX}]",
                    )
                if depth + 1 > MAX_COMPOUND_DEPTH:
                    add(here, f"nesting depth exceeds {MAX_COMPOUND_DEPTH}")
                definite = walk(step.body, definite, depth + 1, f"{here}.body")
            elif isinstance(step, Branch):
                if depth + 1 > MAX_COMPOUND_DEPTH:
                    add(here, f"nesting depth exceeds {MAX_COMPOUND_DEPTH}")
                if not step.predicate.needle:
                    add(f"{here}.predicate.needle", "needle must be nonempty")
                if step.predicate.label not in definite:
                    add(
                        f"{here}.predicate.label",
                        f"predicate references label {step.predicate.label!r} "
                        "not assigned on every path reaching this branch",
                    )
                then_set = walk(step.then, definite, depth + 1, f"{here}.then")
                else_set = walk(step.orelse, definite, depth + 1, f"{here}.else")
                definite = then_set & else_set
        return definite

    walk(workflow.steps, set(), 0, "steps")
    return report
