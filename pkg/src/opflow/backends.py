"""Model backends and usage accounting.

Two interchangeable transports sit behind one protocol: an OpenAI-compatible
HTTP chat-completions client and a deterministic scripted backend that
replays a recorded JSONL session.  The module-level :func:`complete` adds the
retry policy, output extraction, and ledger accounting shared by both.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Protocol

import httpx

from opflow.errors import OpflowError

logger = logging.getLogger(__name__)

# One initial attempt plus three retries on transient failures.
RETRY_ATTEMPTS = 3
RETRY_BACKOFF = (1.0, 2.0, 4.0)


class BackendError(OpflowError):
    """The backend failed in a way retrying will not fix."""


class TransportFailure(BackendError):
    """Transient transport problem (timeout, connection reset, 429/5xx)."""


class ContextLengthError(BackendError):
    """The request exceeded the model's context window."""

    def __init__(self, message: str, request_chars: int):
        super().__init__(f"{message} (request was {request_chars} characters)")
        self.request_chars = request_chars


class ScriptExhaustedError(BackendError):
    """A scripted session ran out of recorded responses."""


class ScriptMismatchError(BackendError):
    """A scripted response carried a match constraint the request failed."""


class OutputFormat(str, Enum):
    RAW = "raw"
    FENCED_CODE = "fenced-code"
    TAGGED_BLOCK = "tagged-block"


@dataclass(frozen=True)
class CompletionRequest:
    model: str
    instruction: str
    input: str
    temperature: float = 0.7
    output_format: OutputFormat = OutputFormat.RAW
    # Delimiter name used when output_format is TAGGED_BLOCK.
    tag: str = "answer"


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")


class Backend(Protocol):
    def complete(self, request: CompletionRequest) -> CompletionResponse: ...


# ---------------------------------------------------------------------------
# Output extraction
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```[^\n]*\n(.*?)\n?```", re.DOTALL)


def extract_fenced(text: str) -> str | None:
    """First fenced code block, or None when the text has no complete fence."""
    match = _FENCE_RE.search(text)
    return match.group(1).strip() if match else None


def extract_tagged(text: str, tag: str) -> str | None:
    """Content of the first <tag>...</tag> region, or None."""
    pattern = re.compile(rf"<{re.escape(tag)}>(.*?)</{re.escape(tag)}>", re.DOTALL)
    match = pattern.search(text)
    return match.group(1).strip() if match else None


def approx_tokens(text: str) -> int:
    # Whitespace word count; used when a backend reports no usage.
    return len(text.split())


# ---------------------------------------------------------------------------
# Pricing and the usage ledger
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelPrice:
    prompt_per_1k: float
    completion_per_1k: float

    def __post_init__(self):
        if self.prompt_per_1k < 0 or self.completion_per_1k < 0:
            raise ValueError("prices must be non-negative")


PriceTable = dict[str, ModelPrice]


def load_price_table(path) -> PriceTable:
    """Read a JSON price table: {model: {prompt_per_1k, completion_per_1k}}."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("price table must be a JSON object keyed by model name")
    table: PriceTable = {}
    for model, entry in raw.items():
        if not isinstance(entry, dict):
            raise ValueError(f"price entry for {model!r} must be an object")
        try:
            table[model] = ModelPrice(
                prompt_per_1k=float(entry["prompt_per_1k"]),
                completion_per_1k=float(entry["completion_per_1k"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"bad price entry for {model!r}: {exc}") from None
    return table


def call_cost(price: ModelPrice, prompt_tokens: int, completion_tokens: int) -> float:
    return (
        prompt_tokens * price.prompt_per_1k / 1000.0
        + completion_tokens * price.completion_per_1k / 1000.0
    )


@dataclass(frozen=True)
class UsageRecord:
    model: str
    prompt_tokens: int
    completion_tokens: int
    cost: float


@dataclass(frozen=True)
class ModelTotals:
    calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost: float = 0.0


@dataclass(frozen=True)
class UsageSummary:
    calls: int
    prompt_tokens: int
    completion_tokens: int
    total_cost: float
    per_model: dict[str, ModelTotals]


class UsageLedger:
    """Append-only, thread-safe record of model calls and their cost.

    Models absent from the price table cost 0; the call is still recorded.
    """

    def __init__(self, prices: PriceTable | None = None):
        self._prices = dict(prices) if prices else {}
        self._records: list[UsageRecord] = []
        self._lock = threading.Lock()

    def record(self, model: str, prompt_tokens: int, completion_tokens: int) -> UsageRecord:
        if prompt_tokens < 0 or completion_tokens < 0:
            raise ValueError("token counts must be non-negative")
        price = self._prices.get(model)
        cost = call_cost(price, prompt_tokens, completion_tokens) if price else 0.0
        rec = UsageRecord(model, prompt_tokens, completion_tokens, cost)
        with self._lock:
            self._records.append(rec)
        return rec

    @property
    def records(self) -> tuple[UsageRecord, ...]:
        with self._lock:
            return tuple(self._records)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def mark(self) -> int:
        """Current record count; pass to :meth:`summary` to scope a window."""
        return len(self)

    def summary(self, since: int = 0) -> UsageSummary:
        records = self.records[since:]
        per_model: dict[str, ModelTotals] = {}
        for rec in records:
            prev = per_model.get(rec.model, ModelTotals())
            per_model[rec.model] = ModelTotals(
                calls=prev.calls + 1,
                prompt_tokens=prev.prompt_tokens + rec.prompt_tokens,
                completion_tokens=prev.completion_tokens + rec.completion_tokens,
                cost=prev.cost + rec.cost,
            )
        return UsageSummary(
            calls=len(records),
            prompt_tokens=sum(r.prompt_tokens for r in records),
            completion_tokens=sum(r.completion_tokens for r in records),
            total_cost=sum(r.cost for r in records),
            per_model=per_model,
        )


def usage_summary(ledger: UsageLedger, since: int = 0) -> UsageSummary:
    return ledger.summary(since)


# ---------------------------------------------------------------------------
# Scripted backend
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScriptLine:
    response: str
    # Optional assertion: the request (instruction + input) must contain this
    # substring, otherwise the session replays out of order.
    match: str | None = None
    prompt_tokens: int | None = None
    completion_tokens: int | None = None


class ScriptedBackend:
    """Replays recorded responses in strict load order.

    Requests never influence which line is served; the ``match`` field only
    asserts the expected pairing.  Thread-safe.
    """

    def __init__(self, lines: list[ScriptLine]):
        self._lines = list(lines)
        self._cursor = 0
        self._lock = threading.Lock()

    @classmethod
    def from_responses(cls, responses: list[str]) -> "ScriptedBackend":
        return cls([ScriptLine(response=r) for r in responses])

    @classmethod
    def from_path(cls, path) -> "ScriptedBackend":
        lines: list[ScriptLine] = []
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                raw = raw.strip()
                if not raw:
                    continue
                try:
                    obj = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise BackendError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
                if not isinstance(obj, dict) or not isinstance(obj.get("response"), str):
                    raise BackendError(f"{path}:{lineno}: expected an object with a string 'response'")
                match = obj.get("match")
                if match is not None and not isinstance(match, str):
                    raise BackendError(f"{path}:{lineno}: 'match' must be a string")
                pt = obj.get("prompt_tokens")
                ct = obj.get("completion_tokens")
                for name, value in (("prompt_tokens", pt), ("completion_tokens", ct)):
                    if value is not None and (not isinstance(value, int) or value < 0):
                        raise BackendError(f"{path}:{lineno}: {name!r} must be a non-negative integer")
                lines.append(ScriptLine(obj["response"], match, pt, ct))
        return cls(lines)

    @property
    def calls(self) -> int:
        with self._lock:
            return self._cursor

    @property
    def remaining(self) -> int:
        with self._lock:
            return len(self._lines) - self._cursor

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        with self._lock:
            if self._cursor >= len(self._lines):
                raise ScriptExhaustedError(f"script exhausted after {len(self._lines)} responses")
            index = self._cursor
            line = self._lines[index]
            self._cursor += 1
        if line.match is not None:
            haystack = request.instruction + "\n" + request.input
            if line.match not in haystack:
                raise ScriptMismatchError(
                    f"script line {index + 1} expected a request containing {line.match!r}"
                )
        pt = line.prompt_tokens
        ct = line.completion_tokens
        if pt is None:
            pt = approx_tokens(request.instruction) + approx_tokens(request.input)
        if ct is None:
            ct = approx_tokens(line.response)
        return CompletionResponse(text=line.response, prompt_tokens=pt, completion_tokens=ct)


# ---------------------------------------------------------------------------
# HTTP backend
# ---------------------------------------------------------------------------

_CONTEXT_MARKERS = ("context_length", "context length", "maximum context", "too many tokens")


class HttpChatBackend:
    """OpenAI-compatible ``/chat/completions`` client over httpx.

    ``endpoint`` is the API base URL; the chat path is appended unless the
    URL already ends with it.  ``record_path`` appends each successful
    exchange as a scripted-session line for later replay.
    """

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        *,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
        record_path=None,
    ):
        base = endpoint.rstrip("/")
        self._url = base if base.endswith("/chat/completions") else base + "/chat/completions"
        self._api_key = api_key
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._record_path = record_path
        self._record_lock = threading.Lock()

    @property
    def url(self) -> str:
        return self._url

    @property
    def api_key(self) -> str | None:
        return self._api_key

    def close(self) -> None:
        self._client.close()

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        body = {
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.instruction},
                {"role": "user", "content": request.input},
            ],
            "temperature": request.temperature,
        }
        headers = {}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        try:
            resp = self._client.post(self._url, json=body, headers=headers)
        except httpx.TransportError as exc:
            raise TransportFailure(f"transport error: {exc}") from exc

        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportFailure(f"HTTP {resp.status_code} from {self._url}")
        if resp.status_code >= 400:
            detail = resp.text[:500]
            if any(marker in detail.lower() for marker in _CONTEXT_MARKERS):
                raise ContextLengthError(
                    f"HTTP {resp.status_code}: request rejected for length",
                    request_chars=len(request.instruction) + len(request.input),
                )
            raise BackendError(f"HTTP {resp.status_code}: {detail}")

        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {exc}") from None
        if not isinstance(text, str):
            raise BackendError("malformed completion response: content is not a string")

        usage = data.get("usage") or {}
        pt = usage.get("prompt_tokens")
        ct = usage.get("completion_tokens")
        if not isinstance(pt, int) or pt < 0:
            pt = approx_tokens(request.instruction) + approx_tokens(request.input)
        if not isinstance(ct, int) or ct < 0:
            ct = approx_tokens(text)

        if self._record_path is not None:
            line = json.dumps(
                {"response": text, "prompt_tokens": pt, "completion_tokens": ct}
            )
            with self._record_lock, open(self._record_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

        return CompletionResponse(text=text, prompt_tokens=pt, completion_tokens=ct)


# ---------------------------------------------------------------------------
# Shared completion policy
# ---------------------------------------------------------------------------


def complete(
    request: CompletionRequest,
    backend: Backend,
    ledger: UsageLedger | None = None,
    *,
    sleep: Callable[[float], None] = time.sleep,
) -> CompletionResponse:
    """One completion with transient-failure retry, extraction, accounting.

    Transient failures are retried up to three times with 1s/2s/4s backoff.
    On success exactly one ledger record is appended; failed attempts record
    nothing.  When the requested output format names a block the response
    lacks, the full text is returned and left to caller-side validation.
    """
    response: CompletionResponse | None = None
    for attempt in range(RETRY_ATTEMPTS + 1):
        try:
            response = backend.complete(request)
            break
        except TransportFailure as exc:
            if attempt == RETRY_ATTEMPTS:
                raise
            delay = RETRY_BACKOFF[attempt]
            logger.warning(
                "transient backend failure (%s); retry %d/%d in %.0fs",
                exc, attempt + 1, RETRY_ATTEMPTS, delay,
            )
            sleep(delay)
    assert response is not None

    text = response.text
    if request.output_format is OutputFormat.FENCED_CODE:
        text = extract_fenced(text) or text
    elif request.output_format is OutputFormat.TAGGED_BLOCK:
        extracted = extract_tagged(text, request.tag)
        text = extracted if extracted is not None else text

    if ledger is not None:
        ledger.record(request.model, response.prompt_tokens, response.completion_tokens)
    return CompletionResponse(
        text=text,
        prompt_tokens=response.prompt_tokens,
        completion_tokens=response.completion_tokens,
    )


class ModelClient:
    """One configured model slot: a transport plus its own ledger."""

    def __init__(
        self,
        backend: Backend,
        model: str,
        *,
        ledger: UsageLedger | None = None,
        prices: PriceTable | None = None,
        temperature: float = 0.7,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.model = model
        self.ledger = ledger if ledger is not None else UsageLedger(prices)
        self.temperature = temperature
        self._sleep = sleep

    def complete(
        self,
        instruction: str,
        input: str,
        *,
        temperature: float | None = None,
        output_format: OutputFormat = OutputFormat.RAW,
        tag: str = "answer",
    ) -> CompletionResponse:
        request = CompletionRequest(
            model=self.model,
            instruction=instruction,
            input=input,
            temperature=self.temperature if temperature is None else temperature,
            output_format=output_format,
            tag=tag,
        )
        return complete(request, self.backend, self.ledger, sleep=self._sleep)
