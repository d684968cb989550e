"""Workflow execution over an operator memory.

Every invocation sees the full history so far: the problem statement plus
each completed step's labeled response, joined with newlines.  Responses
append to the memory in execution order and are never rewritten.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterator

from opflow.backends import ModelClient, OutputFormat, UsageSummary
from opflow.errors import OpflowError
from opflow.ir import Branch, Invoke, Loop, OperatorRegistry, Step, WorkflowIR

logger = logging.getLogger(__name__)

ToolFn = Callable[[str], str]
ToolRegistry = dict[str, ToolFn]


class WorkflowExecutionError(OpflowError):
    """Execution failed; the message names the step and operator."""


@dataclass(frozen=True)
class MemoryEntry:
    label: str
    operator: str
    response: str
    # 0-based position among the invocations that actually ran.
    step_index: int


class MemoryLog:
    """Append-only execution memory."""

    def __init__(self):
        self._entries: list[MemoryEntry] = []

    def append(self, label: str, operator: str, response: str) -> MemoryEntry:
        entry = MemoryEntry(label, operator, response, step_index=len(self._entries))
        self._entries.append(entry)
        return entry

    @property
    def entries(self) -> tuple[MemoryEntry, ...]:
        return tuple(self._entries)

    def latest(self, label: str) -> MemoryEntry | None:
        """Most recent entry stored under ``label``, if any."""
        for entry in reversed(self._entries):
            if entry.label == label:
                return entry
        return None

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[MemoryEntry]:
        return iter(self._entries)


def render_history(memory: MemoryLog, problem: str) -> str:
    """The exact text an invocation receives as input: the problem statement,
    then one ``label: response`` line per completed step, newline-joined."""
    parts = [problem]
    parts.extend(f"{entry.label}: {entry.response}" for entry in memory)
    return "\n".join(parts)


@dataclass(frozen=True)
class ExecutionResult:
    answer: str
    memory: MemoryLog
    usage: UsageSummary


OnInvoke = Callable[[MemoryEntry, MemoryLog], None]


def execute_workflow(
    workflow: WorkflowIR,
    problem: str,
    registry: OperatorRegistry,
    client: ModelClient,
    *,
    tools: ToolRegistry | None = None,
    on_invoke: OnInvoke | None = None,
) -> ExecutionResult:
    """Run a workflow against one problem.

    The answer is the response of the last invocation that executed.  Backend
    failures, unresolvable operators, and missing tools abort the run with a
    :class:`WorkflowExecutionError` naming the step; the input history is
    never truncated to fit, so context overflows surface as errors.
    """
    if not workflow.steps:
        raise WorkflowExecutionError(f"workflow {workflow.name!r} has no steps")

    memory = MemoryLog()
    tools = tools or {}
    mark = client.ledger.mark()
    last_response: str | None = None

    def run_invoke(step: Invoke, path: str) -> None:
        nonlocal last_response
        try:
            op = registry.get(step.operator)
        except KeyError as exc:
            raise WorkflowExecutionError(f"{path}: {exc}") from None
        instruction = op.operator_prompt
        if step.prompt_augment:
            instruction = instruction + "\n" + step.prompt_augment
        try:
            response = client.complete(
                instruction, render_history(memory, problem), output_format=OutputFormat.RAW
            )
        except OpflowError as exc:
            raise WorkflowExecutionError(
                f"{path}: operator {op.name!r} failed: {exc}"
            ) from exc
        text = response.text
        if op.tool is not None:
            fn = tools.get(op.tool)
            if fn is None:
                raise WorkflowExecutionError(
                    f"{path}: operator {op.name!r} requires unregistered tool {op.tool!r}"
                )
            try:
                text = fn(text)
            except Exception as exc:
                raise WorkflowExecutionError(
                    f"{path}: tool {op.tool!r} failed: {exc}"
                ) from exc
            if not isinstance(text, str):
                raise WorkflowExecutionError(
                    f"{path}: tool {op.tool!r} returned {type(text).__name__}, expected str"
                )
        entry = memory.append(step.label, op.name, text)
        last_response = text
        if on_invoke is not None:
            on_invoke(entry, memory)

    def run_steps(steps: tuple[Step, ...], path: str) -> None:
        for i, step in enumerate(steps):
            here = f"{path}[{i}]"
            if isinstance(step, Invoke):
                run_invoke(step, here)
            elif isinstance(step, Loop):
                for _ in range(step.count):
                    run_steps(step.body, f"{here}.body")
            elif isinstance(step, Branch):
                entry = memory.latest(step.predicate.label)
                if entry is None:
                    raise WorkflowExecutionError(
                        f"{here}: branch tests label {step.predicate.label!r} "
                        "with no stored response"
                    )
                if step.predicate.case_sensitive:
                    hit = step.predicate.needle in entry.response
                else:
                    hit = step.predicate.needle.lower() in entry.response.lower()
                run_steps(step.then if hit else step.orelse, f"{here}.then" if hit else f"{here}.else")
            else:
                raise WorkflowExecutionError(f"{here}: not a step: {step!r}")

    run_steps(workflow.steps, "steps")

    if last_response is None:
        raise WorkflowExecutionError(
            f"workflow {workflow.name!r} executed no operator invocations"
        )
    return ExecutionResult(
        answer=last_response,
        memory=memory,
        usage=client.ledger.summary(since=mark),
    )
