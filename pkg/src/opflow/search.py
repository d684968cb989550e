"""Workflow search over an experience tree.

Each round holds one workflow and its validation score.  A selection policy
mixes uniform exploration with a softmax over scores, an optimizer model
proposes exactly one modification to the selected round's workflow, the
proposal is validated and evaluated, and the outcome is recorded as a child,
partitioned into the parent's success or failure lineage by strict score
improvement.  The whole tree exports to a JSON experience document that can
be re-imported and fed back to the optimizer as a digest.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Callable

from opflow.backends import ModelClient, extract_tagged
from opflow.errors import OpflowError
from opflow.extraction import ReflectionFailure, reflect_validate
from opflow.ir import (
    FORMAT_VERSION,
    Invoke,
    OperatorRegistry,
    WorkflowIR,
    parse_workflow,
    validate_workflow,
)
from opflow.prompts import PromptSet, optimize_instruction
from opflow.runtime import ToolRegistry, execute_workflow
from opflow.bench import DatasetItem, Scorer

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.2
DEFAULT_SOFTMAX_TEMPERATURE = 0.25
DEFAULT_TOP_K = 3


class ExpansionError(OpflowError):
    """The optimizer never produced a valid proposal for a selected round."""


@dataclass
class RoundRecord:
    round: int
    workflow: WorkflowIR | None
    score: float | None
    modification: str
    parent: int | None
    cost: float = 0.0
    success: set[int] = field(default_factory=set)
    failure: set[int] = field(default_factory=set)


class ExperienceTree:
    """Rounds keyed by 1-based index; the root is round 1."""

    def __init__(self, task: str | None = None):
        self.task = task
        self.rounds: dict[int, RoundRecord] = {}
        self.root: int | None = None
        self.truncated = False

    @property
    def next_index(self) -> int:
        return max(self.rounds, default=0) + 1

    def add_root(self, workflow: WorkflowIR, score: float | None = None) -> RoundRecord:
        if self.rounds:
            raise ValueError("tree already has a root")
        record = RoundRecord(round=1, workflow=workflow, score=score, modification="", parent=None)
        self.rounds[1] = record
        self.root = 1
        return record

    def scored_rounds(self) -> list[RoundRecord]:
        return [self.rounds[i] for i in sorted(self.rounds) if self.rounds[i].score is not None]

    def best(self) -> RoundRecord:
        scored = self.scored_rounds()
        if not scored:
            raise ValueError("no scored rounds")
        return max(scored, key=lambda r: (r.score, -r.round))


@dataclass(frozen=True)
class SelectionPolicy:
    """Mixed exploration policy: with weight ``lam`` a uniform choice, with
    the rest a softmax over scores at the given temperature."""

    lam: float = DEFAULT_LAMBDA
    temperature: float = DEFAULT_SOFTMAX_TEMPERATURE

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be within [0, 1], got {self.lam}")
        if self.temperature <= 0.0:
            raise ValueError(f"softmax temperature must be positive, got {self.temperature}")

    def probabilities(self, scores: list[float]) -> list[float]:
        if not scores:
            raise ValueError("no scores to select over")
        n = len(scores)
        peak = max(scores)
        exps = [math.exp((s - peak) / self.temperature) for s in scores]
        total = sum(exps)
        return [self.lam / n + (1.0 - self.lam) * e / total for e in exps]


def select_round(tree: ExperienceTree, policy: SelectionPolicy, rng: random.Random) -> RoundRecord:
    """Draw one scored round.  Consumes exactly one rng.random(): the draw
    walks the cumulative distribution in ascending round order."""
    rounds = tree.scored_rounds()
    probs = policy.probabilities([r.score for r in rounds])
    u = rng.random()
    cumulative = 0.0
    for record, p in zip(rounds, probs):
        cumulative += p
        if u < cumulative:
            return record
    return rounds[-1]


# ---------------------------------------------------------------------------
# Round lifecycle
# ---------------------------------------------------------------------------


def initialize(
    registry: OperatorRegistry,
    root_operator: str | None = None,
    task: str | None = None,
) -> ExperienceTree:
    """Seed a tree with the template workflow: a single invocation of the
    designated operator (the registry's first, when none is named)."""
    if len(registry) == 0:
        raise ValueError("registry is empty")
    names = registry.names()
    if root_operator is None:
        root_operator = names[0]
    elif root_operator not in registry:
        raise ValueError(f"root operator {root_operator!r} is not in the registry")
    workflow = WorkflowIR(
        name="single-op",
        steps=(Invoke(operator=root_operator, label=root_operator),),
        task=task,
        origin_round=1,
    )
    tree = ExperienceTree(task=task)
    tree.add_root(workflow)
    return tree


@dataclass(frozen=True)
class ExpansionCandidate:
    workflow: WorkflowIR
    modification: str
    retries: int


def experience_digest(tree: ExperienceTree) -> str:
    return json.dumps(export_experience(tree), indent=2)


def expand(
    selected: RoundRecord,
    tree: ExperienceTree,
    registry: OperatorRegistry,
    prompts: PromptSet,
    optimizer: ModelClient,
    task: str,
    *,
    retry_limit: int = 3,
) -> ExpansionCandidate:
    """Ask the optimizer for one modification to the selected workflow.

    The reply must carry a <modification> sentence and a <workflow> document
    that parses and validates against the registry; anything else is fed back
    through reflection.  Exhaustion raises :class:`ExpansionError`.
    """
    if selected.workflow is None:
        raise ExpansionError(f"round {selected.round} has no stored workflow to modify")
    instruction = optimize_instruction(prompts.optimize, registry, task)
    expand_input = (
        f"Current workflow (round {selected.round}, score {selected.score}):\n"
        + json.dumps(_workflow_doc(selected.workflow), indent=2)
        + "\n\nExperience so far:\n"
        + experience_digest(tree)
        + "\n\nPropose exactly one modification."
    )

    def parse_proposal(text: str) -> ExpansionCandidate:
        modification = extract_tagged(text, "modification")
        if not modification:
            raise ValueError("reply is missing the <modification> block")
        wf_text = extract_tagged(text, "workflow")
        if wf_text is None:
            raise ValueError("reply is missing the <workflow> block")
        workflow = parse_workflow(_strip_fence(wf_text))
        report = validate_workflow(workflow, registry)
        if not report.ok:
            raise ValueError("workflow rejected: " + "; ".join(report.messages()))
        return ExpansionCandidate(workflow=workflow, modification=modification, retries=0)

    raw = optimizer.complete(instruction, expand_input).text
    try:
        candidate, retries = reflect_validate(
            raw,
            parse_proposal,
            limit=retry_limit,
            reprompt=_optimizer_reprompt(optimizer, instruction, expand_input),
            what=f"expansion of round {selected.round}",
        )
    except ReflectionFailure as exc:
        raise ExpansionError(str(exc)) from exc
    return dataclasses.replace(candidate, retries=retries)


def _strip_fence(text: str) -> str:
    from opflow.backends import extract_fenced

    block = extract_fenced(text)
    return block if block is not None else text


def _workflow_doc(workflow: WorkflowIR) -> dict:
    from opflow.ir import workflow_to_dict

    return workflow_to_dict(workflow)


def _optimizer_reprompt(optimizer: ModelClient, instruction: str, base_input: str):
    def reprompt(error: str) -> str:
        retry_input = (
            base_input
            + "\n\nYour previous proposal was rejected: "
            + error
            + "\nReply again with the <modification> and <workflow> blocks."
        )
        return optimizer.complete(instruction, retry_input).text

    return reprompt


@dataclass(frozen=True)
class EvaluationOutcome:
    score: float
    cost: float


def evaluate(
    workflow: WorkflowIR,
    items: list[DatasetItem],
    scorer: Scorer,
    executor: ModelClient,
    registry: OperatorRegistry,
    *,
    repeats: int = 1,
    tools: ToolRegistry | None = None,
) -> EvaluationOutcome:
    """Mean score over ``repeats`` passes of the validation items, plus the
    executor cost the evaluation incurred.  An item whose execution fails
    scores 0 and is logged; evaluation continues."""
    if not items:
        raise ValueError("no items to evaluate on")
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    mark = executor.ledger.mark()
    total = 0.0
    for _ in range(repeats):
        for item in items:
            try:
                result = execute_workflow(
                    workflow, item.problem, registry, executor, tools=tools
                )
            except OpflowError as exc:
                logger.warning("item %s failed: %s", item.id, exc)
                continue
            total += scorer(result.answer, item.gold)
    score = total / (len(items) * repeats)
    cost = executor.ledger.summary(since=mark).total_cost
    return EvaluationOutcome(score=score, cost=cost)


def backpropagate(
    tree: ExperienceTree,
    parent: int,
    workflow: WorkflowIR,
    modification: str,
    outcome: EvaluationOutcome,
) -> RoundRecord:
    """Commit an evaluated proposal as a child round.  The child lands in the
    parent's success lineage only on strict improvement; a tie is a failure."""
    if parent not in tree.rounds:
        raise ValueError(f"unknown parent round {parent}")
    parent_record = tree.rounds[parent]
    if parent_record.score is None:
        raise ValueError(f"parent round {parent} is unscored")
    index = tree.next_index
    record = RoundRecord(
        round=index,
        workflow=dataclasses.replace(workflow, origin_round=index),
        score=outcome.score,
        modification=modification,
        parent=parent,
        cost=outcome.cost,
    )
    tree.rounds[index] = record
    if outcome.score > parent_record.score:
        parent_record.success.add(index)
    else:
        parent_record.failure.add(index)
    return record


# ---------------------------------------------------------------------------
# The search loop
# ---------------------------------------------------------------------------


@dataclass
class SearchConfig:
    max_rounds: int = 20
    validation_repeats: int = 1
    # Budget for reflection retries within one expansion, and for consecutive
    # failed expansions before the search stops as truncated.
    expansion_retry_limit: int = 3
    top_k: int = DEFAULT_TOP_K
    policy: SelectionPolicy = field(default_factory=SelectionPolicy)


def run_search(
    config: SearchConfig,
    tree: ExperienceTree,
    registry: OperatorRegistry,
    prompts: PromptSet,
    optimizer: ModelClient,
    executor: ModelClient,
    items: list[DatasetItem],
    scorer: Scorer,
    rng: random.Random,
    task: str,
    *,
    tools: ToolRegistry | None = None,
) -> ExperienceTree:
    """Grow the tree to ``config.max_rounds`` rounds.

    The root is evaluated first when still unscored.  Failed expansions skip
    the round and reselect; too many in a row, or a hard backend failure,
    stop the search with the truncation flag set.
    """
    if tree.root is None:
        raise ValueError("tree has no root; call initialize() first")
    root = tree.rounds[tree.root]
    if root.score is None:
        outcome = evaluate(
            root.workflow, items, scorer, executor, registry,
            repeats=config.validation_repeats, tools=tools,
        )
        root.score, root.cost = outcome.score, outcome.cost

    consecutive_failures = 0
    while tree.next_index <= config.max_rounds:
        selected = select_round(tree, config.policy, rng)
        try:
            candidate = expand(
                selected, tree, registry, prompts, optimizer, task,
                retry_limit=config.expansion_retry_limit,
            )
        except ExpansionError as exc:
            consecutive_failures += 1
            logger.warning(
                "expansion failed (%d in a row): %s", consecutive_failures, exc
            )
            if consecutive_failures > config.expansion_retry_limit:
                tree.truncated = True
                break
            continue
        except OpflowError as exc:
            logger.error("search stopped: %s", exc)
            tree.truncated = True
            break
        consecutive_failures = 0
        outcome = evaluate(
            candidate.workflow, items, scorer, executor, registry,
            repeats=config.validation_repeats, tools=tools,
        )
        backpropagate(tree, selected.round, candidate.workflow, candidate.modification, outcome)
    return tree


def select_top_k(tree: ExperienceTree, k: int = DEFAULT_TOP_K) -> list[RoundRecord]:
    """Best ``k`` rounds by score; ties go to the earlier round."""
    if k < 1:
        raise ValueError("k must be at least 1")
    ranked = sorted(tree.scored_rounds(), key=lambda r: (-r.score, r.round))
    return ranked[:k]


# ---------------------------------------------------------------------------
# Experience documents
# ---------------------------------------------------------------------------


def export_experience(tree: ExperienceTree) -> dict:
    """Experience document: one entry per round that has children (the root
    always appears), each child keyed under its parent's success or failure
    map with its modification and score.  Keys ascend numerically."""
    doc: dict = {"format_version": FORMAT_VERSION}

    def child_entry(index: int) -> dict:
        child = tree.rounds[index]
        return {"modification": child.modification, "score": child.score}

    for index in sorted(tree.rounds):
        record = tree.rounds[index]
        if index != tree.root and not record.success and not record.failure:
            continue
        doc[str(index)] = {
            "score": record.score,
            "success": {str(c): child_entry(c) for c in sorted(record.success)},
            "failure": {str(c): child_entry(c) for c in sorted(record.failure)},
        }
    return doc


def import_experience(
    doc: dict,
    workflows: dict[int, WorkflowIR] | None = None,
) -> ExperienceTree:
    """Rebuild a tree from an exported document (inverse of
    :func:`export_experience` up to workflows and costs, which the document
    does not carry; ``workflows`` fills the former back in)."""
    if not isinstance(doc, dict):
        raise ValueError("experience document must be a JSON object")
    version = doc.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version {version!r}")

    entries: dict[int, dict] = {}
    for key, value in doc.items():
        if key == "format_version":
            continue
        try:
            index = int(key)
        except ValueError:
            raise ValueError(f"round key {key!r} is not an integer") from None
        if not isinstance(value, dict):
            raise ValueError(f"round {index} entry must be an object")
        entries[index] = value

    parents: dict[int, int] = {}
    child_info: dict[int, dict] = {}
    partitions: dict[int, tuple[set[int], set[int]]] = {}
    for index, entry in entries.items():
        success: set[int] = set()
        failure: set[int] = set()
        for kind, bucket in (("success", success), ("failure", failure)):
            for child_key, info in (entry.get(kind) or {}).items():
                child = int(child_key)
                if child in parents:
                    raise ValueError(f"round {child} is claimed by two parents")
                if not isinstance(info, dict):
                    raise ValueError(f"child {child} entry must be an object")
                parents[child] = index
                child_info[child] = info
                bucket.add(child)
        partitions[index] = (success, failure)

    indices = sorted(set(entries) | set(parents))
    roots = [i for i in indices if i not in parents]
    if len(roots) != 1:
        raise ValueError(f"expected exactly one root round, found {roots}")
    root = roots[0]

    tree = ExperienceTree()
    workflows = workflows or {}
    for index in indices:
        if index in entries:
            score = entries[index].get("score")
        else:
            score = child_info[index].get("score")
        if index in child_info and index in entries:
            own = entries[index].get("score")
            listed = child_info[index].get("score")
            if own is not None and listed is not None and own != listed:
                raise ValueError(f"round {index} score disagrees with its parent's record")
        modification = child_info[index].get("modification", "") if index in child_info else ""
        success, failure = partitions.get(index, (set(), set()))
        tree.rounds[index] = RoundRecord(
            round=index,
            workflow=workflows.get(index),
            score=score,
            modification=modification,
            parent=parents.get(index),
            success=success,
            failure=failure,
        )
    tree.root = root
    return tree


def tree_signature(tree: ExperienceTree) -> dict:
    """Canonical structural view used for identity checks: everything the
    experience document carries, normalized."""
    return {
        "root": tree.root,
        "rounds": {
            index: {
                "parent": record.parent,
                "score": record.score,
                "modification": record.modification,
                "success": sorted(record.success),
                "failure": sorted(record.failure),
            }
            for index, record in sorted(tree.rounds.items())
        },
    }
