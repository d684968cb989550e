"""Shared test helpers: deterministic backends, a seeded random workflow
generator, an IR walker written independently of the runtime, and the pieces
of the enumerable toy search space."""

from __future__ import annotations

import json
import random

from opflow.backends import CompletionRequest, CompletionResponse, approx_tokens
from opflow.ir import (
    Branch,
    Invoke,
    Loop,
    OperatorDef,
    OperatorRegistry,
    SubstringTest,
    WorkflowIR,
)


class EchoBackend:
    """Replies ``echo-<n>`` forever, recording every request."""

    def __init__(self):
        self.calls = 0
        self.requests: list[CompletionRequest] = []

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        self.calls += 1
        self.requests.append(request)
        return CompletionResponse(f"echo-{self.calls}", approx_tokens(request.input), 2)


def toy_registry(names=("Alpha", "Beta", "Gamma")) -> OperatorRegistry:
    return OperatorRegistry([OperatorDef(n, f"Do the {n} work.") for n in names])


class RecordingBackend:
    """Delegating wrapper that keeps every request for inspection."""

    def __init__(self, inner):
        self.inner = inner
        self.requests: list[CompletionRequest] = []

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        self.requests.append(request)
        return self.inner.complete(request)


# Needles chosen to hit both branch arms against echo-<n> responses, in both
# case modes.
NEEDLES = ("echo", "ECHO", "zzz", "Echo-1", "never-present", "5")


def random_workflow(rng: random.Random, registry: OperatorRegistry, max_invokes: int = 10) -> WorkflowIR:
    """A random workflow that satisfies every structural invariant."""
    names = registry.names()
    label_counter = 0
    budget = rng.randint(1, max_invokes)
    used = 0

    def new_invoke() -> Invoke:
        nonlocal label_counter, used
        label_counter += 1
        used += 1
        augment = rng.choice((None, None, None, "Keep it short."))
        return Invoke(operator=rng.choice(names), label=f"s{label_counter}", prompt_augment=augment)

    def gen_block(depth: int, definite: set[str]) -> tuple[tuple, set[str]]:
        steps: list = []
        definite = set(definite)
        for _ in range(rng.randint(1, 3)):
            if used >= budget:
                break
            roll = rng.random()
            if depth < 2 and roll < 0.2 and budget - used >= 2:
                body, body_def = gen_block(depth + 1, definite)
                if body:
                    steps.append(Loop(count=rng.randint(1, 5), body=body))
                    definite = body_def
                    continue
            if depth < 2 and roll < 0.35 and definite and budget - used >= 2:
                label = rng.choice(sorted(definite))
                then, then_def = gen_block(depth + 1, definite)
                if rng.random() < 0.7:
                    orelse, else_def = gen_block(depth + 1, definite)
                else:
                    orelse, else_def = (), set(definite)
                if then:
                    steps.append(
                        Branch(
                            SubstringTest(label, rng.choice(NEEDLES), rng.random() < 0.3),
                            then,
                            orelse,
                        )
                    )
                    definite = then_def & else_def
                    continue
            invoke = new_invoke()
            steps.append(invoke)
            definite.add(invoke.label)
        return tuple(steps), definite

    # The first step is always an invoke, so the workflow is nonempty and
    # every branch has at least one assigned label to test.
    first = new_invoke()
    rest, _ = gen_block(0, {first.label})
    return WorkflowIR(name=f"wf-{rng.randrange(10**6)}", steps=(first,) + rest)


def predict_execution(workflow: WorkflowIR) -> list[tuple[str, str, str]]:
    """Expected (label, operator, response) trace under :class:`EchoBackend`,
    derived straight from the step grammar without touching the runtime."""
    counter = 0
    trace: list[tuple[str, str, str]] = []

    def latest(label: str) -> str | None:
        for lab, _, resp in reversed(trace):
            if lab == label:
                return resp
        return None

    def walk(steps) -> None:
        nonlocal counter
        for step in steps:
            if isinstance(step, Invoke):
                counter += 1
                trace.append((step.label, step.operator, f"echo-{counter}"))
            elif isinstance(step, Loop):
                for _ in range(step.count):
                    walk(step.body)
            elif isinstance(step, Branch):
                resp = latest(step.predicate.label)
                if step.predicate.case_sensitive:
                    hit = step.predicate.needle in resp
                else:
                    hit = step.predicate.needle.lower() in resp.lower()
                walk(step.then if hit else step.orelse)

    walk(workflow.steps)
    return trace


# ---------------------------------------------------------------------------
# The enumerable toy search space: sequences of length 1..3 over A/B/C.
# ---------------------------------------------------------------------------

TOY_OPS = ("A", "B", "C")


def toy_search_registry() -> OperatorRegistry:
    return OperatorRegistry([OperatorDef(n, f"APPEND:{n}") for n in TOY_OPS])


def toy_sequences() -> list[str]:
    """All 39 toy workflows as operator sequences, shortest first."""
    seqs: list[str] = []
    frontier = [""]
    for _ in range(3):
        frontier = [s + op for s in frontier for op in TOY_OPS]
        seqs.extend(frontier)
    return seqs


def toy_workflow(seq: str) -> dict:
    return {
        "format_version": 1,
        "name": f"seq-{seq}",
        "steps": [
            {"kind": "invoke", "operator": op, "label": f"s{i + 1}"}
            for i, op in enumerate(seq)
        ],
    }


def toy_score(answer: str, gold: str) -> float:
    """Positional match fraction against the gold sequence."""
    return sum(1 for a, b in zip(answer, gold) if a == b) / len(gold)


class ChainEchoBackend:
    """Toy executor: each reply extends the chain in the latest stored
    response with the letter named by the operator instruction."""

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        op = request.instruction.split("APPEND:", 1)[1][:1]
        last_line = request.input.rsplit("\n", 1)[-1]
        chain = last_line.split(": ", 1)[1] if ": " in last_line else ""
        return CompletionResponse(chain + op, 1, 1)


class HillClimbOptimizer:
    """Toy optimizer: reads the experience digest out of the expansion
    request and proposes the first unexplored single-edit neighbor of the
    best explored sequence, falling back to plain enumeration."""

    def __init__(self, root_seq: str = "A"):
        self.root_seq = root_seq
        self.calls = 0

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        self.calls += 1
        explored = self._explored(request.input)
        best = max(explored, key=lambda s: (explored[s], len(s), s))
        proposal = self._next_candidate(best, explored)
        text = (
            f"<modification>try {proposal}</modification>\n"
            f"<workflow>{json.dumps(toy_workflow(proposal))}</workflow>"
        )
        return CompletionResponse(text, 1, 1)

    def _explored(self, input_text: str) -> dict[str, float]:
        digest = input_text.split("Experience so far:\n", 1)[1]
        digest = digest.rsplit("\n\nPropose", 1)[0]
        doc = json.loads(digest)
        explored: dict[str, float] = {}
        for key, entry in doc.items():
            if key == "format_version":
                continue
            if int(key) == 1:
                explored[self.root_seq] = entry["score"]
            for bucket in ("success", "failure"):
                for info in entry[bucket].values():
                    seq = info["modification"].split("try ", 1)[1]
                    explored[seq] = info["score"]
        return explored

    def _next_candidate(self, best: str, explored: dict[str, float]) -> str:
        candidates: list[str] = []
        if len(best) < 3:
            candidates.extend(best + op for op in TOY_OPS)
        for pos in range(len(best)):
            candidates.extend(
                best[:pos] + op + best[pos + 1 :] for op in TOY_OPS if op != best[pos]
            )
        if len(best) > 1:
            candidates.append(best[:-1])
        for cand in candidates:
            if cand not in explored:
                return cand
        for cand in toy_sequences():
            if cand not in explored:
                return cand
        raise AssertionError("toy space exhausted")
