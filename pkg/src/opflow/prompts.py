"""Prompt texts for operator extraction and workflow optimization.

Defaults live here; a prompts directory can override any of them per run
(one ``<name>.txt`` file per prompt).  The ``{task}`` and ``{operators}``
placeholders are substituted by plain string replacement, never str.format,
so braces in the embedded JSON examples stay literal.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from opflow.errors import OpflowError
from opflow.ir import OperatorRegistry

DEFAULT_CASE_GEN = """\
You design reusable operators for an agent that solves {task} problems.

Study the worked example below.  Identify each distinct unit of model work the
solution relies on (understanding the input, transforming data, computing,
checking, formatting the final answer).  Define one operator per unit.

Reply with a fenced JSON array.  Each element must be an object with:
  "name": a short CamelCase identifier, no spaces
  "operator_prompt": the complete instruction that operator sends to the model

Output only the fenced JSON array.
"""

DEFAULT_CLUSTER = """\
You merge operator definitions for {task} agents.

The operators below were proposed independently from many worked examples, so
near-duplicates abound.  Group operators that do the same kind of work and
write one representative operator per group, with a prompt that covers the
whole group and a name that fits it.

Rules:
- every input operator belongs to exactly one group
- output at most as many operators as the input contains
- names must be unique

Reply with only a fenced JSON array of {"name", "operator_prompt"} objects.
"""

DEFAULT_DEEP = """\
You compress an operator set for {task} agents into its most general form.

Rewrite the operators below as a smaller set of broadly applicable operators.
Merge any two whose work one more general operator could do.  Prompts must
stay complete and self-contained.  Every name is at most two CamelCase words.

Reply with only a fenced JSON array of {"name", "operator_prompt"} objects.
"""

DEFAULT_DEEP_NEXT = """\
Above are your earlier drafts, most recent last.  Push the abstraction one
step further: merge or generalize again wherever possible and tighten the
prompts.  Keep every name at most two CamelCase words.

Reply with only a fenced JSON array of {"name", "operator_prompt"} objects.
"""

DEFAULT_AGGREGATE = """\
Several independent refinement attempts produced the candidate operator sets
below for {task} agents.  Reconcile them into one final set: keep the
abstractions that recur across attempts, merge overlapping operators, and drop
narrow one-off variants.  Names are unique and at most two CamelCase words.

Reply with only a fenced JSON array of {"name", "operator_prompt"} objects.
"""

DEFAULT_OPTIMIZE = """\
You refine agent workflows for {task} problems.

A workflow is a JSON document over three step kinds:
- {"kind": "invoke", "operator": "<name>", "label": "<label>"} runs one
  operator over the problem statement plus every stored response so far and
  stores the reply under the label; an optional "prompt_augment" string
  appends one extra instruction line.
- {"kind": "loop", "count": <1..5>, "body": [<steps>]} repeats the body a
  fixed number of times.
- {"kind": "branch", "predicate": {"label": "<label>", "needle": "<text>"},
  "then": [<steps>], "else": [<steps>]} takes the "then" arm when the needle
  occurs (case-insensitive) in the latest response stored under the label,
  otherwise the "else" arm.

Hard rules:
- at most 10 invoke steps in the whole document
- loop counts stay between 1 and 5
- labels are unique across the document
- a branch may only test a label that is always assigned before it runs
- invoke only the operators listed below
- the document carries "format_version": 1, a "name", and "steps"

Available operators:
{operators}

Example, a two-step sequence:
```json
{"format_version": 1, "name": "plan-then-act", "steps": [
  {"kind": "invoke", "operator": "Planner", "label": "plan"},
  {"kind": "invoke", "operator": "Executor", "label": "act"}]}
```

Example, attempt in a loop and then check:
```json
{"format_version": 1, "name": "act-twice-check", "steps": [
  {"kind": "loop", "count": 2, "body": [
    {"kind": "invoke", "operator": "Executor", "label": "act"}]},
  {"kind": "invoke", "operator": "Validator", "label": "check"}]}
```

You will receive the current workflow, its validation score, and a digest of
earlier rounds with their scores.  Study which changes helped before choosing.
Propose exactly one modification: add, remove, or replace a step; adjust a
loop count; swap an operator; add a branch; or adjust a prompt_augment.

Reply with exactly two blocks and nothing else:
<modification>one sentence naming the single change and the reason</modification>
<workflow>the complete modified workflow JSON document</workflow>
"""


@dataclass(frozen=True)
class PromptSet:
    case_gen: str = DEFAULT_CASE_GEN
    cluster: str = DEFAULT_CLUSTER
    deep: str = DEFAULT_DEEP
    deep_next: str = DEFAULT_DEEP_NEXT
    aggregate: str = DEFAULT_AGGREGATE
    optimize: str = DEFAULT_OPTIMIZE


def fill(text: str, task: str) -> str:
    return text.replace("{task}", task)


def load_prompts(directory=None) -> PromptSet:
    """Build a prompt set, overriding defaults with ``<field>.txt`` files
    found in ``directory``.  Unknown files are rejected to catch typos."""
    if directory is None:
        return PromptSet()
    root = Path(directory)
    if not root.is_dir():
        raise OpflowError(f"prompts directory {root} does not exist")
    known = {f.name for f in fields(PromptSet)}
    overrides = {}
    for path in sorted(root.glob("*.txt")):
        if path.stem not in known:
            raise OpflowError(
                f"unrecognized prompt file {path.name!r} (expected one of: "
                + ", ".join(sorted(f"{k}.txt" for k in known)) + ")"
            )
        overrides[path.stem] = path.read_text(encoding="utf-8")
    return PromptSet(**overrides)


def optimize_instruction(template: str, registry: OperatorRegistry, task: str) -> str:
    """Instantiate the optimizer instruction with the operator catalog."""
    catalog = "\n".join(f"- {op.name}: {op.operator_prompt}" for op in registry)
    return fill(template, task).replace("{operators}", catalog)
