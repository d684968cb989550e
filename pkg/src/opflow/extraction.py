"""Three-stage operator extraction.

Stage one proposes operators from each worked case independently (one model
call per case).  Stage two clusters the pooled proposals into a deduplicated
set (one call).  Stage three refines the clustered set along several parallel
reasoning paths, three drafts each, then aggregates the survivors into the
final set (paths x 3 + 1 calls).  Every call runs through a reflection loop:
parse, validate, and on failure re-ask with the error attached.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable

from opflow.backends import ModelClient, extract_fenced
from opflow.errors import OpflowError
from opflow.ir import OperatorDef, OperatorRegistry, WorkflowIR, WorkflowParseError, parse_workflow
from opflow.prompts import PromptSet, fill

logger = logging.getLogger(__name__)

DEFAULT_PATHS = 6
REFINEMENT_STEPS = 3
DEFAULT_RETRY_LIMIT = 3
MAX_NAME_WORDS = 2


class ExtractionError(OpflowError):
    """A pipeline stage failed permanently."""


class ReflectionFailure(OpflowError):
    """Parse-and-validate kept failing through the retry budget.

    ``errors`` holds one message per failed attempt, oldest first.
    """

    def __init__(self, what: str, errors: list[str], attempts: int):
        super().__init__(f"{what} failed after {attempts} attempt(s): {errors[-1]}")
        self.errors = list(errors)
        self.attempts = attempts


@dataclass(frozen=True)
class TaskCase:
    """One worked example: a problem and its reference solution."""

    id: str
    problem: str
    solution: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("case id must be nonempty")
        if not self.problem or not self.problem.strip():
            raise ValueError(f"case {self.id!r} has an empty problem")


class Stage(Enum):
    INITIAL = "initial"
    CLUSTERED = "clustered"
    DEEP = "deep"


@dataclass(frozen=True)
class Provenance:
    stage: Stage
    # Case ids this operator (transitively) derives from.
    sources: tuple[str, ...]
    path: int | None = None
    step: int | None = None


@dataclass(frozen=True)
class CandidateOperator:
    definition: OperatorDef
    provenance: Provenance

    @property
    def name(self) -> str:
        return self.definition.name


@dataclass(frozen=True)
class ReasoningPath:
    """One surviving refinement path: its sampling temperature and the
    operator set produced at each draft."""

    index: int
    temperature: float
    steps: tuple[tuple[OperatorDef, ...], ...]


# ---------------------------------------------------------------------------
# Parsing and reflection
# ---------------------------------------------------------------------------


class Expectation(Enum):
    OPERATOR_SET = "operator-set"
    WORKFLOW_DOCUMENT = "workflow-document"


def parse_operator_set(text: str) -> list[OperatorDef]:
    """Parse a model reply into operator definitions.

    The first fenced block is used when present, otherwise the whole reply.
    Duplicate names within one set are malformed.
    """
    block = extract_fenced(text)
    if block is None:
        block = text
    try:
        obj = json.loads(block)
    except json.JSONDecodeError as exc:
        raise ValueError(f"reply is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    if not isinstance(obj, list):
        raise ValueError(f"expected a JSON array of operators, got {type(obj).__name__}")
    if not obj:
        raise ValueError("the operator set is empty")
    ops: list[OperatorDef] = []
    seen: set[str] = set()
    for i, item in enumerate(obj):
        if not isinstance(item, dict):
            raise ValueError(f"element {i} is not an object")
        name = item.get("name")
        prompt = item.get("operator_prompt")
        tool = item.get("tool")
        if not isinstance(name, str):
            raise ValueError(f"element {i} is missing a string 'name'")
        if not isinstance(prompt, str):
            raise ValueError(f"element {i} ({name!r}) is missing a string 'operator_prompt'")
        if tool is not None and not isinstance(tool, str):
            raise ValueError(f"element {i} ({name!r}): 'tool' must be a string")
        if name in seen:
            raise ValueError(f"duplicate operator name {name!r}")
        seen.add(name)
        ops.append(OperatorDef(name=name, operator_prompt=prompt, tool=tool))
    return ops


def parse_workflow_reply(text: str) -> WorkflowIR:
    block = extract_fenced(text)
    return parse_workflow(block if block is not None else text)


_PARSERS: dict[Expectation, Callable[[str], object]] = {
    Expectation.OPERATOR_SET: parse_operator_set,
    Expectation.WORKFLOW_DOCUMENT: parse_workflow_reply,
}

Reprompt = Callable[[str], str]
Check = Callable[[object], "str | None"]


def reflect_validate(
    raw: str,
    expectation: Expectation | Callable[[str], object],
    *,
    limit: int = DEFAULT_RETRY_LIMIT,
    reprompt: Reprompt | None = None,
    checks: Iterable[Check] = (),
    what: str = "reflection",
):
    """Parse ``raw``; on failure ask again via ``reprompt`` up to ``limit``
    times.  Returns ``(value, retries_used)``.

    ``checks`` run after a successful parse and return an error message to
    reject the value.  Without a ``reprompt`` callback the first failure is
    final.  Backend errors raised by ``reprompt`` propagate untouched.
    """
    parse = _PARSERS[expectation] if isinstance(expectation, Expectation) else expectation
    errors: list[str] = []
    text = raw
    for attempt in range(limit + 1):
        try:
            value = parse(text)
            for check in checks:
                message = check(value)
                if message:
                    raise ValueError(message)
            return value, attempt
        except (ValueError, WorkflowParseError) as exc:
            errors.append(str(exc))
            if attempt == limit or reprompt is None:
                raise ReflectionFailure(what, errors, attempts=attempt + 1) from None
        text = reprompt(errors[-1])


_NAME_PIECE_RE = re.compile(r"[A-Z]+(?![a-z])|[A-Z][a-z0-9]*|[a-z0-9]+")


def name_word_count(name: str) -> int:
    """Words in an operator name, splitting CamelCase, underscores, dashes."""
    parts: list[str] = []
    for chunk in re.split(r"[_\-\s]+", name):
        parts.extend(_NAME_PIECE_RE.findall(chunk))
    return len(parts)


def _check_name_lengths(ops: object) -> str | None:
    assert isinstance(ops, list)
    bad = [op.name for op in ops if name_word_count(op.name) > MAX_NAME_WORDS]
    if bad:
        return (
            "operator names must be at most "
            f"{MAX_NAME_WORDS} words, these are longer: {', '.join(bad)}"
        )
    return None


def _check_at_most(limit: int, what: str) -> Check:
    def check(ops: object) -> str | None:
        assert isinstance(ops, list)
        if len(ops) > limit:
            return f"{len(ops)} operators exceed the {what} of {limit}"
        return None

    return check


def _make_reprompt(
    client: ModelClient, instruction: str, base_input: str, temperature: float | None = None
) -> Reprompt:
    def reprompt(error: str) -> str:
        retry_input = (
            base_input
            + "\n\nYour previous reply was rejected: "
            + error
            + "\nAnswer again following the required format exactly."
        )
        return client.complete(instruction, retry_input, temperature=temperature).text

    return reprompt


# ---------------------------------------------------------------------------
# Stage 1: per-case generation
# ---------------------------------------------------------------------------


def generate_case_operators(
    cases: list[TaskCase],
    prompts: PromptSet,
    client: ModelClient,
    task: str,
    *,
    retry_limit: int = DEFAULT_RETRY_LIMIT,
) -> list[CandidateOperator]:
    """Propose operators from each case independently and pool the results.

    Cases whose replies never validate are skipped with a warning; the pool
    keeps per-case duplicates since clustering resolves them later.
    """
    if not cases:
        raise ValueError("no cases to extract from")
    instruction = fill(prompts.case_gen, task)
    pool: list[CandidateOperator] = []
    for case in cases:
        case_input = f"Problem:\n{case.problem}\n\nSolution:\n{case.solution}"
        raw = client.complete(instruction, case_input).text
        try:
            ops, _ = reflect_validate(
                raw,
                Expectation.OPERATOR_SET,
                limit=retry_limit,
                reprompt=_make_reprompt(client, instruction, case_input),
                what=f"operator generation for case {case.id!r}",
            )
        except ReflectionFailure as exc:
            logger.warning("skipping case %s: %s", case.id, exc)
            continue
        pool.extend(
            CandidateOperator(op, Provenance(Stage.INITIAL, sources=(case.id,)))
            for op in ops
        )
    if not pool:
        raise ExtractionError("operator generation failed for every case")
    return pool


# ---------------------------------------------------------------------------
# Stage 2: clustering
# ---------------------------------------------------------------------------


def _ops_json(ops: Iterable[OperatorDef]) -> str:
    return json.dumps([op.to_dict() for op in ops], indent=2)


def _merged_sources(candidates: Iterable[CandidateOperator]) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for cand in candidates:
        for source in cand.provenance.sources:
            seen.setdefault(source)
    return tuple(seen)


def cluster_operators(
    candidates: list[CandidateOperator],
    prompts: PromptSet,
    client: ModelClient,
    task: str,
    *,
    retry_limit: int = DEFAULT_RETRY_LIMIT,
) -> list[CandidateOperator]:
    """Merge the pooled per-case proposals into a deduplicated set (one call).

    A reply with more operators than the input is rejected and retried.
    """
    if not candidates:
        raise ValueError("nothing to cluster")
    instruction = fill(prompts.cluster, task)
    cluster_input = _ops_json(c.definition for c in candidates)
    raw = client.complete(instruction, cluster_input).text
    try:
        ops, _ = reflect_validate(
            raw,
            Expectation.OPERATOR_SET,
            limit=retry_limit,
            reprompt=_make_reprompt(client, instruction, cluster_input),
            checks=(_check_at_most(len(candidates), "input pool size"),),
            what="operator clustering",
        )
    except ReflectionFailure as exc:
        raise ExtractionError(str(exc)) from exc
    sources = _merged_sources(candidates)
    return [CandidateOperator(op, Provenance(Stage.CLUSTERED, sources)) for op in ops]


# ---------------------------------------------------------------------------
# Stage 3: deep refinement
# ---------------------------------------------------------------------------


def path_temperatures(paths: int) -> tuple[float, ...]:
    """Sampling temperatures spread across refinement paths: 0.3 plus an even
    step up to 1.3.  A single path samples at 0.8, the midpoint."""
    if paths < 1:
        raise ValueError("at least one refinement path is required")
    if paths == 1:
        return (0.8,)
    return tuple(0.3 + i * (1.0 / (paths - 1)) for i in range(paths))


@dataclass(frozen=True)
class DeepResult:
    final: list[CandidateOperator]
    paths: tuple[ReasoningPath, ...]
    failed_paths: tuple[int, ...]


def deep_extract(
    clustered: list[CandidateOperator],
    prompts: PromptSet,
    client: ModelClient,
    task: str,
    *,
    paths: int = DEFAULT_PATHS,
    retry_limit: int = DEFAULT_RETRY_LIMIT,
) -> DeepResult:
    """Refine the clustered set along parallel paths and aggregate.

    Each path drafts three successively more general operator sets at its own
    temperature.  A path dies when any draft exhausts reflection; the stage
    dies when more than half the paths do.  The aggregation call sees only
    the surviving final drafts.  Deep-stage names are capped at two words,
    and the final set can never outgrow the clustered set.
    """
    if not clustered:
        raise ValueError("nothing to refine")
    temps = path_temperatures(paths)
    clustered_json = _ops_json(c.definition for c in clustered)
    deep_instruction = fill(prompts.deep, task)

    survivors: list[ReasoningPath] = []
    failed: list[int] = []
    for index in range(1, paths + 1):
        temp = temps[index - 1]
        drafts: list[tuple[OperatorDef, ...]] = []
        try:
            for step in range(1, REFINEMENT_STEPS + 1):
                if step == 1:
                    step_input = "Operators:\n" + clustered_json
                else:
                    parts = ["Operators:\n" + clustered_json]
                    parts.extend(
                        f"Draft {i}:\n{_ops_json(d)}" for i, d in enumerate(drafts, start=1)
                    )
                    parts.append(fill(prompts.deep_next, task))
                    step_input = "\n\n".join(parts)
                raw = client.complete(deep_instruction, step_input, temperature=temp).text
                ops, _ = reflect_validate(
                    raw,
                    Expectation.OPERATOR_SET,
                    limit=retry_limit,
                    reprompt=_make_reprompt(client, deep_instruction, step_input, temperature=temp),
                    checks=(_check_name_lengths,),
                    what=f"refinement path {index} draft {step}",
                )
                drafts.append(tuple(ops))
        except ReflectionFailure as exc:
            logger.warning("refinement path %d dropped: %s", index, exc)
            failed.append(index)
            continue
        survivors.append(ReasoningPath(index=index, temperature=temp, steps=tuple(drafts)))

    if 2 * len(failed) > paths:
        raise ExtractionError(
            f"{len(failed)} of {paths} refinement paths failed; not enough survivors"
        )

    agg_instruction = fill(prompts.aggregate, task)
    agg_input = "\n\n".join(
        f"Attempt {p.index} final operators:\n{_ops_json(p.steps[-1])}" for p in survivors
    )
    raw = client.complete(agg_instruction, agg_input).text
    try:
        ops, _ = reflect_validate(
            raw,
            Expectation.OPERATOR_SET,
            limit=retry_limit,
            reprompt=_make_reprompt(client, agg_instruction, agg_input),
            checks=(_check_name_lengths, _check_at_most(len(clustered), "clustered set size")),
            what="aggregation",
        )
    except ReflectionFailure as exc:
        raise ExtractionError(str(exc)) from exc

    sources = _merged_sources(clustered)
    final = [CandidateOperator(op, Provenance(Stage.DEEP, sources)) for op in ops]
    return DeepResult(final=final, paths=tuple(survivors), failed_paths=tuple(failed))


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExtractionResult:
    initial: list[CandidateOperator]
    clustered: list[CandidateOperator]
    deep: DeepResult

    def registry(self) -> OperatorRegistry:
        return OperatorRegistry([c.definition for c in self.deep.final])

    def provenance_doc(self) -> dict:
        """Lineage document written beside the registry: every stage's
        operators with their source cases, plus per-path draft history."""

        def entry(cand: CandidateOperator) -> dict:
            doc = cand.definition.to_dict()
            doc["sources"] = list(cand.provenance.sources)
            return doc

        return {
            "format_version": 1,
            "stages": {
                "initial": [entry(c) for c in self.initial],
                "clustered": [entry(c) for c in self.clustered],
                "deep": [entry(c) for c in self.deep.final],
            },
            "paths": [
                {
                    "path": p.index,
                    "temperature": round(p.temperature, 6),
                    "drafts": [[op.name for op in draft] for draft in p.steps],
                }
                for p in self.deep.paths
            ],
            "failed_paths": list(self.deep.failed_paths),
        }


def run_extraction(
    cases: list[TaskCase],
    prompts: PromptSet,
    client: ModelClient,
    task: str,
    *,
    paths: int = DEFAULT_PATHS,
    retry_limit: int = DEFAULT_RETRY_LIMIT,
) -> ExtractionResult:
    initial = generate_case_operators(cases, prompts, client, task, retry_limit=retry_limit)
    clustered = cluster_operators(initial, prompts, client, task, retry_limit=retry_limit)
    deep = deep_extract(clustered, prompts, client, task, paths=paths, retry_limit=retry_limit)
    return ExtractionResult(initial=initial, clustered=clustered, deep=deep)
