import json

import pytest

from opflow.backends import HttpChatBackend, ScriptedBackend
from opflow.bench import Family
from opflow.config import (
    ENV_API_KEY,
    ENV_ENDPOINT,
    SLOT_NAMES,
    build_clients,
    load_config,
)
from opflow.errors import ConfigError

MINIMAL = """\
task = "algebra word problems"

[dataset]
manifest = "data.json"

[backends.generator]
model = "gen-model"
endpoint = "https://api.example.test/v1"

[backends.optimizer]
model = "opt-model"
endpoint = "https://api.example.test/v1"

[backends.executor]
kind = "scripted"
model = "exec-model"
script = "exec.jsonl"
"""

FULL = """\
task = "t"
method = "ablation"
prompts_dir = "prompts"

[dataset]
manifest = "data.json"
split_ratio = 0.3
scorer = "binary-reward"
reward = "my-env"
judge_command = ["judge", "--strict"]

[backends.generator]
model = "gen-model"
endpoint = "https://api.example.test/v1"
temperature = 0.1

[backends.optimizer]
model = "opt-model"
endpoint = "https://api.example.test/v1"

[backends.executor]
kind = "scripted"
model = "exec-model"
script = "exec.jsonl"

[search]
max_rounds = 7
lambda = 0.5
softmax_temperature = 1.0
validation_repeats = 2
top_k = 5
expansion_retry_limit = 4
root_operator = "Planner"

[extraction]
paths = 3
retry_limit = 2

[pricing]
table = "prices.json"
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "data.json").write_text(
        json.dumps({"task": "demo", "family": "math", "items": "items.jsonl"})
    )
    (tmp_path / "items.jsonl").write_text('{"id": "a", "problem": "p", "gold": "1"}\n')
    (tmp_path / "exec.jsonl").write_text(json.dumps({"response": "hello"}) + "\n")
    (tmp_path / "run.toml").write_text(MINIMAL)
    return tmp_path


def load(workdir, text=None):
    if text is not None:
        (workdir / "run.toml").write_text(text)
    return load_config(workdir / "run.toml")


def in_dataset(text, extra):
    return text.replace('manifest = "data.json"', f'manifest = "data.json"\n{extra}')


def test_minimal_config_defaults(workdir):
    config = load(workdir)
    assert config.task == "algebra word problems"
    assert config.method == "ours"
    assert config.split_ratio == 0.2
    assert config.scorer is None and config.reward is None and config.judge_command is None
    assert config.dataset_manifest == workdir / "data.json"
    assert set(config.backends) == set(SLOT_NAMES)
    assert config.backends["executor"].script == workdir / "exec.jsonl"
    assert config.backends["generator"].temperature == 0.7
    assert config.search.max_rounds is None
    assert config.search.lam == 0.2
    assert config.search.softmax_temperature == 0.25
    assert config.search.top_k == 3
    assert config.extraction.paths == 6
    assert config.prompts_dir is None and config.price_table is None


def test_full_config(workdir):
    (workdir / "prices.json").write_text(
        json.dumps({"gen-model": {"prompt_per_1k": 0.1, "completion_per_1k": 0.2}})
    )
    (workdir / "prompts").mkdir()
    config = load(workdir, FULL)
    assert config.method == "ablation"
    assert config.split_ratio == 0.3
    assert config.scorer == "binary-reward"
    assert config.reward == "my-env"
    assert config.judge_command == ("judge", "--strict")
    assert config.backends["generator"].temperature == 0.1
    assert config.search.max_rounds == 7
    assert config.search.lam == 0.5
    assert config.search.softmax_temperature == 1.0
    assert config.search.validation_repeats == 2
    assert config.search.top_k == 5
    assert config.search.expansion_retry_limit == 4
    assert config.search.root_operator == "Planner"
    assert config.extraction.paths == 3
    assert config.extraction.retry_limit == 2
    assert config.prompts_dir == workdir / "prompts"
    assert config.price_table == workdir / "prices.json"


def test_family_defaults_for_search(workdir):
    config = load(workdir)
    assert config.search_defaults(Family.EMBODIED) == (10, 1)
    assert config.search_defaults(Family.GAME) == (10, 1)
    assert config.search_defaults(Family.QA) == (20, 3)
    assert config.search_defaults(Family.MATH) == (20, 3)
    assert config.search_defaults(Family.CODE) == (20, 3)


def test_explicit_search_settings_beat_family_defaults(workdir):
    config = load(workdir, MINIMAL + "\n[search]\nmax_rounds = 5\n")
    assert config.search_defaults(Family.MATH) == (5, 3)
    config = load(workdir, MINIMAL + "\n[search]\nvalidation_repeats = 9\n")
    assert config.search_defaults(Family.EMBODIED) == (10, 9)


def test_absolute_paths_are_kept(workdir, tmp_path):
    other = tmp_path / "elsewhere.jsonl"
    other.write_text(json.dumps({"response": "x"}) + "\n")
    text = MINIMAL.replace('script = "exec.jsonl"', f'script = "{other}"')
    assert load(workdir, text).backends["executor"].script == other


@pytest.mark.parametrize(
    "mutation, message",
    [
        (lambda t: t.replace('task = "algebra word problems"\n', ""), "missing required key 'task'"),
        (lambda t: "surprise = 1\n" + t, "unknown key"),
        (
            lambda t: t.replace('[dataset]\nmanifest = "data.json"\n', ""),
            "missing \\[dataset\\] section",
        ),
        (lambda t: t.replace('"data.json"', '"missing.json"'), "does not exist"),
        (lambda t: in_dataset(t, 'scorer = "nope"'), "unknown scorer"),
        (lambda t: in_dataset(t, "judge_command = []"), "judge_command"),
        (lambda t: in_dataset(t, 'judge_command = "python"'), "judge_command"),
        (lambda t: in_dataset(t, "split_ratio = true"), "split_ratio"),
        (lambda t: t.replace("[backends.executor]", "[backends.oops]"), "missing \\[backends.executor\\]"),
        (lambda t: t.replace('kind = "scripted"', 'kind = "grpc"'), "kind must be"),
        (lambda t: t.replace('script = "exec.jsonl"\n', ""), "needs a 'script' path"),
        (lambda t: t.replace('script = "exec.jsonl"', 'script = "gone.jsonl"'), "does not exist"),
        (lambda t: t.replace('model = "gen-model"\n', ""), "missing required key 'model'"),
        (lambda t: t + "\n[search]\nmax_rounds = 2.5\n", "must be a int"),
        (lambda t: t + "\n[search]\nwarps = 1\n", "unknown key"),
        (lambda t: t + "\n[extraction]\npaths = 0\n", "at least 1"),
        (lambda t: 'prompts_dir = "nowhere"\n' + t, "does not exist"),
        (lambda t: t + '\n[pricing]\ntable = "nowhere.json"\n', "does not exist"),
    ],
)
def test_config_rejections(workdir, mutation, message):
    with pytest.raises(ConfigError, match=message):
        load(workdir, mutation(MINIMAL))


def test_invalid_toml_and_missing_file(workdir):
    with pytest.raises(ConfigError, match="invalid TOML"):
        load(workdir, "task = [unclosed")
    with pytest.raises(ConfigError, match="cannot read config"):
        load_config(workdir / "absent.toml")


# ---------------------------------------------------------------------------
# Client construction
# ---------------------------------------------------------------------------


def test_build_clients_scripted_and_http(workdir, monkeypatch):
    monkeypatch.delenv(ENV_ENDPOINT, raising=False)
    monkeypatch.delenv(ENV_API_KEY, raising=False)
    config = load(workdir)
    clients = build_clients(config, ("generator", "executor"))
    assert set(clients) == {"generator", "executor"}
    assert isinstance(clients["generator"].backend, HttpChatBackend)
    assert isinstance(clients["executor"].backend, ScriptedBackend)
    assert clients["generator"].model == "gen-model"
    # Separate ledgers per slot.
    assert clients["generator"].ledger is not clients["executor"].ledger


def test_build_clients_env_overrides(workdir, monkeypatch):
    config = load(workdir)
    monkeypatch.setenv(ENV_ENDPOINT, "https://override.test/v2")
    monkeypatch.setenv(ENV_API_KEY, "sk-env")
    client = build_clients(config, ("generator",))["generator"]
    backend = client.backend
    assert isinstance(backend, HttpChatBackend)
    assert backend.url == "https://override.test/v2/chat/completions"
    assert backend.api_key == "sk-env"


def test_build_clients_api_key_resolution_order(workdir, monkeypatch):
    monkeypatch.delenv(ENV_ENDPOINT, raising=False)
    monkeypatch.setenv(ENV_API_KEY, "sk-fallback")
    monkeypatch.setenv("CUSTOM_KEY", "sk-custom")
    text = MINIMAL.replace(
        '[backends.generator]\nmodel = "gen-model"',
        '[backends.generator]\nmodel = "gen-model"\napi_key_env = "CUSTOM_KEY"',
    )
    config = load(workdir, text)
    client = build_clients(config, ("generator",))["generator"]
    assert client.backend.api_key == "sk-custom"

    # Literal api_key beats both environment routes.
    text2 = text.replace('api_key_env = "CUSTOM_KEY"', 'api_key = "sk-literal"')
    client2 = build_clients(load(workdir, text2), ("generator",))["generator"]
    assert client2.backend.api_key == "sk-literal"

    # Without a slot-specific route the shared variable applies.
    client3 = build_clients(load(workdir, MINIMAL), ("generator",))["generator"]
    assert client3.backend.api_key == "sk-fallback"


def test_build_clients_requires_an_endpoint(workdir, monkeypatch):
    monkeypatch.delenv(ENV_ENDPOINT, raising=False)
    text = MINIMAL.replace('endpoint = "https://api.example.test/v1"\n', "", 1)
    config = load(workdir, text)
    with pytest.raises(ConfigError, match="no endpoint"):
        build_clients(config, ("generator",))


def test_build_clients_replay_overrides_everything(workdir, tmp_path):
    replay = tmp_path / "replay"
    replay.mkdir()
    for slot in SLOT_NAMES:
        (replay / f"{slot}.jsonl").write_text(json.dumps({"response": f"{slot} says hi"}) + "\n")
    config = load(workdir)
    clients = build_clients(config, SLOT_NAMES, replay_dir=replay)
    for slot in SLOT_NAMES:
        assert isinstance(clients[slot].backend, ScriptedBackend)
    assert clients["generator"].complete("i", "x").text == "generator says hi"


def test_build_clients_replay_missing_file(workdir, tmp_path):
    replay = tmp_path / "replay"
    replay.mkdir()
    config = load(workdir)
    with pytest.raises(ConfigError, match="missing generator.jsonl"):
        build_clients(config, ("generator",), replay_dir=replay)


def test_build_clients_applies_price_table(workdir):
    (workdir / "prices.json").write_text(
        json.dumps({"exec-model": {"prompt_per_1k": 1.0, "completion_per_1k": 1.0}})
    )
    config = load(workdir, MINIMAL + '\n[pricing]\ntable = "prices.json"\n')
    client = build_clients(config, ("executor",))["executor"]
    client.complete("inst", "in")
    assert client.ledger.summary().total_cost > 0.0


def test_build_clients_bad_price_table(workdir):
    (workdir / "prices.json").write_text(json.dumps({"m": {"prompt_per_1k": 0.1}}))
    config = load(workdir, MINIMAL + '\n[pricing]\ntable = "prices.json"\n')
    with pytest.raises(ConfigError, match="bad price table"):
        build_clients(config, ("executor",))
