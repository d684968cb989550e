"""Run configuration.

Runs are described by a TOML file: the task, a dataset manifest, three model
slots (generator for extraction, optimizer for search, executor for running
workflows), search settings, and optional pricing/prompt overrides.  Two
environment variables override every HTTP slot: A2F_API_KEY and A2F_ENDPOINT.
All referenced paths resolve relative to the config file and are checked at
load time, before any backend is constructed.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from opflow.backends import (
    HttpChatBackend,
    ModelClient,
    PriceTable,
    ScriptedBackend,
    load_price_table,
)
from opflow.bench import Family, ScorerKind
from opflow.errors import ConfigError

ENV_API_KEY = "A2F_API_KEY"
ENV_ENDPOINT = "A2F_ENDPOINT"

SLOT_NAMES = ("generator", "optimizer", "executor")

# Interactive environments get short searches with single-pass validation;
# the rest get longer searches with repeated scoring.
FAMILY_SEARCH_DEFAULTS: dict[Family, tuple[int, int]] = {
    Family.EMBODIED: (10, 1),
    Family.GAME: (10, 1),
    Family.QA: (20, 3),
    Family.MATH: (20, 3),
    Family.CODE: (20, 3),
}


@dataclass(frozen=True)
class SlotConfig:
    kind: str
    model: str
    endpoint: str | None = None
    api_key: str | None = None
    api_key_env: str | None = None
    script: Path | None = None
    temperature: float = 0.7


@dataclass(frozen=True)
class SearchSettings:
    max_rounds: int | None = None
    lam: float = 0.2
    softmax_temperature: float = 0.25
    validation_repeats: int | None = None
    top_k: int = 3
    expansion_retry_limit: int = 3
    root_operator: str | None = None


@dataclass(frozen=True)
class ExtractionSettings:
    paths: int = 6
    retry_limit: int = 3


@dataclass(frozen=True)
class RunConfig:
    task: str
    method: str
    dataset_manifest: Path
    split_ratio: float
    scorer: str | None
    judge_command: tuple[str, ...] | None
    reward: str | None
    backends: dict[str, SlotConfig]
    search: SearchSettings = field(default_factory=SearchSettings)
    extraction: ExtractionSettings = field(default_factory=ExtractionSettings)
    prompts_dir: Path | None = None
    price_table: Path | None = None

    def search_defaults(self, family: Family) -> tuple[int, int]:
        """(max_rounds, validation_repeats) after family defaults."""
        d_rounds, d_repeats = FAMILY_SEARCH_DEFAULTS[family]
        return (
            self.search.max_rounds if self.search.max_rounds is not None else d_rounds,
            self.search.validation_repeats
            if self.search.validation_repeats is not None
            else d_repeats,
        )


def _expect(table: dict, key: str, kind: type, where: str, default=None, required=False):
    if key not in table:
        if required:
            raise ConfigError(f"{where}: missing required key {key!r}")
        return default
    value = table[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(f"{where}: {key!r} must be a {kind.__name__}")
    return value


def _check_keys(table: dict, allowed: set[str], where: str) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s): {', '.join(sorted(unknown))}")


def _resolve(base: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else base / path


def load_config(path) -> RunConfig:
    """Parse and validate a run config.  Raises :class:`ConfigError` on any
    schema problem or missing referenced file."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    base = path.parent

    _check_keys(
        raw,
        {"task", "method", "prompts_dir", "dataset", "backends", "search", "extraction", "pricing"},
        str(path),
    )
    task = _expect(raw, "task", str, str(path), required=True)
    method = _expect(raw, "method", str, str(path), default="ours")

    dataset = raw.get("dataset")
    if not isinstance(dataset, dict):
        raise ConfigError(f"{path}: missing [dataset] section")
    _check_keys(dataset, {"manifest", "split_ratio", "scorer", "judge_command", "reward"}, "[dataset]")
    manifest = _resolve(base, _expect(dataset, "manifest", str, "[dataset]", required=True))
    if not manifest.is_file():
        raise ConfigError(f"[dataset]: manifest {manifest} does not exist")
    split_ratio = _expect(dataset, "split_ratio", float, "[dataset]", default=0.2)
    scorer = _expect(dataset, "scorer", str, "[dataset]")
    if scorer is not None:
        try:
            ScorerKind(scorer)
        except ValueError:
            raise ConfigError(
                f"[dataset]: unknown scorer {scorer!r} "
                f"(expected one of: {', '.join(k.value for k in ScorerKind)})"
            ) from None
    judge = dataset.get("judge_command")
    if judge is not None and (
        not isinstance(judge, list) or not judge or not all(isinstance(x, str) for x in judge)
    ):
        raise ConfigError("[dataset]: judge_command must be a nonempty list of strings")
    reward = _expect(dataset, "reward", str, "[dataset]")

    backends_raw = raw.get("backends")
    if not isinstance(backends_raw, dict):
        raise ConfigError(f"{path}: missing [backends.*] sections")
    backends: dict[str, SlotConfig] = {}
    for slot in SLOT_NAMES:
        table = backends_raw.get(slot)
        if not isinstance(table, dict):
            raise ConfigError(f"{path}: missing [backends.{slot}] section")
        where = f"[backends.{slot}]"
        _check_keys(
            table,
            {"kind", "model", "endpoint", "api_key", "api_key_env", "script", "temperature"},
            where,
        )
        kind = _expect(table, "kind", str, where, default="http")
        if kind not in ("http", "scripted"):
            raise ConfigError(f"{where}: kind must be 'http' or 'scripted', got {kind!r}")
        script_raw = _expect(table, "script", str, where)
        script = _resolve(base, script_raw) if script_raw is not None else None
        if kind == "scripted":
            if script is None:
                raise ConfigError(f"{where}: scripted backend needs a 'script' path")
            if not script.is_file():
                raise ConfigError(f"{where}: script {script} does not exist")
        backends[slot] = SlotConfig(
            kind=kind,
            model=_expect(table, "model", str, where, required=True),
            endpoint=_expect(table, "endpoint", str, where),
            api_key=_expect(table, "api_key", str, where),
            api_key_env=_expect(table, "api_key_env", str, where),
            script=script,
            temperature=_expect(table, "temperature", float, where, default=0.7),
        )
    _check_keys(backends_raw, set(SLOT_NAMES), "[backends]")

    search_raw = raw.get("search", {})
    if not isinstance(search_raw, dict):
        raise ConfigError(f"{path}: [search] must be a table")
    _check_keys(
        search_raw,
        {
            "max_rounds", "lambda", "softmax_temperature", "validation_repeats",
            "top_k", "expansion_retry_limit", "root_operator",
        },
        "[search]",
    )
    search = SearchSettings(
        max_rounds=_expect(search_raw, "max_rounds", int, "[search]"),
        lam=_expect(search_raw, "lambda", float, "[search]", default=0.2),
        softmax_temperature=_expect(search_raw, "softmax_temperature", float, "[search]", default=0.25),
        validation_repeats=_expect(search_raw, "validation_repeats", int, "[search]"),
        top_k=_expect(search_raw, "top_k", int, "[search]", default=3),
        expansion_retry_limit=_expect(search_raw, "expansion_retry_limit", int, "[search]", default=3),
        root_operator=_expect(search_raw, "root_operator", str, "[search]"),
    )

    extraction_raw = raw.get("extraction", {})
    if not isinstance(extraction_raw, dict):
        raise ConfigError(f"{path}: [extraction] must be a table")
    _check_keys(extraction_raw, {"paths", "retry_limit"}, "[extraction]")
    extraction = ExtractionSettings(
        paths=_expect(extraction_raw, "paths", int, "[extraction]", default=6),
        retry_limit=_expect(extraction_raw, "retry_limit", int, "[extraction]", default=3),
    )
    if extraction.paths < 1:
        raise ConfigError("[extraction]: paths must be at least 1")

    prompts_dir = None
    prompts_raw = _expect(raw, "prompts_dir", str, str(path))
    if prompts_raw is not None:
        prompts_dir = _resolve(base, prompts_raw)
        if not prompts_dir.is_dir():
            raise ConfigError(f"prompts_dir {prompts_dir} does not exist")

    price_table = None
    pricing_raw = raw.get("pricing", {})
    if not isinstance(pricing_raw, dict):
        raise ConfigError(f"{path}: [pricing] must be a table")
    _check_keys(pricing_raw, {"table"}, "[pricing]")
    table_raw = _expect(pricing_raw, "table", str, "[pricing]")
    if table_raw is not None:
        price_table = _resolve(base, table_raw)
        if not price_table.is_file():
            raise ConfigError(f"[pricing]: table {price_table} does not exist")

    return RunConfig(
        task=task,
        method=method,
        dataset_manifest=manifest,
        split_ratio=split_ratio,
        scorer=scorer,
        judge_command=tuple(judge) if judge else None,
        reward=reward,
        backends=backends,
        search=search,
        extraction=extraction,
        prompts_dir=prompts_dir,
        price_table=price_table,
    )


def build_clients(
    config: RunConfig,
    slots: tuple[str, ...],
    replay_dir=None,
) -> dict[str, ModelClient]:
    """Construct the requested model slots, each with its own ledger.

    With ``replay_dir`` every slot replays ``<replay_dir>/<slot>.jsonl``
    regardless of its configured kind; no network client is built.
    """
    prices: PriceTable | None = None
    if config.price_table is not None:
        try:
            prices = load_price_table(config.price_table)
        except ValueError as exc:
            raise ConfigError(f"bad price table {config.price_table}: {exc}") from None

    clients: dict[str, ModelClient] = {}
    for slot in slots:
        cfg = config.backends[slot]
        if replay_dir is not None:
            script = Path(replay_dir) / f"{slot}.jsonl"
            if not script.is_file():
                raise ConfigError(f"replay directory is missing {script.name}")
            backend = ScriptedBackend.from_path(script)
        elif cfg.kind == "scripted":
            backend = ScriptedBackend.from_path(cfg.script)
        else:
            endpoint = os.environ.get(ENV_ENDPOINT) or cfg.endpoint
            if not endpoint:
                raise ConfigError(
                    f"[backends.{slot}]: no endpoint configured and {ENV_ENDPOINT} is unset"
                )
            api_key = cfg.api_key
            if api_key is None and cfg.api_key_env:
                api_key = os.environ.get(cfg.api_key_env)
            if api_key is None:
                api_key = os.environ.get(ENV_API_KEY)
            backend = HttpChatBackend(endpoint, api_key)
        clients[slot] = ModelClient(
            backend, cfg.model, prices=prices, temperature=cfg.temperature
        )
    return clients
