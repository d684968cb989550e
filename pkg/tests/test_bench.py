import json
import math
import random
import sys

import pytest
from hypothesis import given
from hypothesis import strategies as st

from opflow.bench import (
    Dataset,
    DatasetItem,
    ExternalCommandScorer,
    Family,
    ParetoPoint,
    ReportRow,
    ScorerKind,
    binary_exact_reward,
    extract_number,
    format_report_csv,
    format_report_markdown,
    get_scorer,
    load_dataset,
    pareto_csv,
    pareto_front,
    register_reward,
    score_exact_numeric,
    score_f1,
    scorer_for_family,
    split_dataset,
    split_items,
)
from opflow.errors import OpflowError


def make_dataset(n=5, prefix="x", family=Family.QA):
    items = tuple(DatasetItem(f"{prefix}{i}", f"problem {i}", f"gold {i}") for i in range(1, n + 1))
    return Dataset(task="toy", family=family, items=items)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def write_dataset(tmp_path, items, family="qa", items_name="items.jsonl"):
    manifest = tmp_path / "data.json"
    manifest.write_text(json.dumps({"task": "demo", "family": family, "items": items_name}))
    lines = "\n".join(json.dumps(i) for i in items)
    (tmp_path / items_name).write_text(lines + "\n")
    return manifest


def test_load_dataset_reads_manifest_and_jsonl(tmp_path):
    manifest = write_dataset(
        tmp_path,
        [
            {"id": "a", "problem": "p1", "gold": "g1"},
            {"id": "b", "problem": "p2", "gold": "g2"},
        ],
    )
    ds = load_dataset(manifest)
    assert ds.task == "demo"
    assert ds.family is Family.QA
    assert [i.id for i in ds.items] == ["a", "b"]
    assert ds.by_id()["b"].gold == "g2"


def test_load_dataset_skips_blank_lines(tmp_path):
    manifest = tmp_path / "data.json"
    manifest.write_text(json.dumps({"task": "t", "family": "math", "items": "i.jsonl"}))
    (tmp_path / "i.jsonl").write_text(
        '{"id": "a", "problem": "p", "gold": "1"}\n\n{"id": "b", "problem": "p", "gold": "2"}\n'
    )
    assert len(load_dataset(manifest).items) == 2


@pytest.mark.parametrize(
    "mangle, message",
    [
        (lambda m, d: m.write_text("not json"), "cannot read dataset manifest"),
        (lambda m, d: m.write_text('{"task": "t", "items": "i.jsonl"}'), "missing string field 'family'"),
        (lambda m, d: m.write_text('{"task": "t", "family": "weird", "items": "i.jsonl"}'), "unknown family"),
        (lambda m, d: (d / "items.jsonl").write_text("{broken\n"), "invalid JSON"),
        (lambda m, d: (d / "items.jsonl").write_text('{"id": "a", "problem": "p"}\n'), "expected string fields"),
        (lambda m, d: (d / "items.jsonl").write_text("\n"), "no items"),
        (lambda m, d: (d / "items.jsonl").unlink(), "cannot read dataset items"),
        (
            lambda m, d: (d / "items.jsonl").write_text(
                '{"id": "a", "problem": "p", "gold": "g"}\n{"id": "a", "problem": "q", "gold": "h"}\n'
            ),
            "duplicate item id",
        ),
    ],
)
def test_load_dataset_error_paths(tmp_path, mangle, message):
    manifest = write_dataset(tmp_path, [{"id": "a", "problem": "p", "gold": "g"}])
    mangle(manifest, tmp_path)
    with pytest.raises(OpflowError, match=message):
        load_dataset(manifest)


def test_dataset_rejects_duplicate_ids_directly():
    with pytest.raises(ValueError, match="duplicate item id"):
        Dataset(
            task="t",
            family=Family.QA,
            items=(DatasetItem("a", "p", "g"), DatasetItem("a", "q", "h")),
        )


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def test_split_matches_seeded_fisher_yates_oracle():
    ds = make_dataset(23)
    split = split_dataset(ds, ratio=0.3, seed=9)
    ids = [i.id for i in ds.items]
    rng = random.Random(9)
    for i in range(len(ids) - 1, 0, -1):
        j = rng.randrange(i + 1)
        ids[i], ids[j] = ids[j], ids[i]
    n_val = round(0.3 * 23)
    assert list(split.validation) == ids[:n_val]
    assert list(split.test) == ids[n_val:]


def test_split_golden_values():
    split = split_dataset(make_dataset(5))
    assert split.validation == ("x4",)
    assert split.test == ("x2", "x3", "x5", "x1")
    assert (split.seed, split.ratio) == (42, 0.2)


def test_split_is_deterministic_and_seed_sensitive():
    ds = make_dataset(40)
    a = split_dataset(ds, ratio=0.2, seed=42)
    b = split_dataset(ds, ratio=0.2, seed=42)
    c = split_dataset(ds, ratio=0.2, seed=43)
    assert a == b
    assert a.validation != c.validation


def test_split_sizes_use_round_half_even():
    assert len(split_dataset(make_dataset(100)).validation) == 20
    assert len(split_dataset(make_dataset(100)).test) == 80
    # round(0.25 * 10) = round(2.5) = 2 under banker's rounding.
    assert len(split_dataset(make_dataset(10), ratio=0.25).validation) == 2


def test_split_partitions_all_ids():
    ds = make_dataset(31)
    split = split_dataset(ds, ratio=0.4, seed=5)
    assert not set(split.validation) & set(split.test)
    assert set(split.validation) | set(split.test) == {i.id for i in ds.items}
    # Shuffled order, not a prefix of the original listing.
    assert list(split.validation) != [i.id for i in ds.items][: len(split.validation)]


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.2, 1.5])
def test_split_rejects_out_of_range_ratio(ratio):
    with pytest.raises(ValueError, match="strictly between"):
        split_dataset(make_dataset(10), ratio=ratio)


def test_split_rejects_empty_sides():
    with pytest.raises(ValueError, match="empty split"):
        split_dataset(make_dataset(2), ratio=0.1)  # round(0.2) == 0
    with pytest.raises(ValueError, match="empty split"):
        split_dataset(make_dataset(2), ratio=0.9)  # round(1.8) == 2 == n


def test_split_items_resolves_in_order():
    ds = make_dataset(4)
    items = split_items(ds, ["x3", "x1"])
    assert [i.id for i in items] == ["x3", "x1"]
    with pytest.raises(ValueError, match="unknown item id 'zz'"):
        split_items(ds, ["zz"])


# ---------------------------------------------------------------------------
# Token F1
# ---------------------------------------------------------------------------


def oracle_f1(pred, gold):
    import string

    def norm(t):
        return t.lower().translate(str.maketrans("", "", string.punctuation)).split()

    p, g = norm(pred), norm(gold)
    if not p or not g:
        return 0.0
    overlap = 0
    remaining = list(g)
    for tok in p:
        if tok in remaining:
            remaining.remove(tok)
            overlap += 1
    if overlap == 0:
        return 0.0
    prec, rec = overlap / len(p), overlap / len(g)
    return 2 * prec * rec / (prec + rec)


@pytest.mark.parametrize(
    "pred, gold, expected",
    [
        ("the cat sat", "the cat sat", 1.0),
        ("Cat!", "cat", 1.0),
        ("dog", "cat", 0.0),
        ("the cat sat", "cat", 0.5),
        ("the cat", "cat", 2 / 3),  # articles count
        ("a a b", "a b b", 2 / 3),  # bag semantics, not set
        ("", "cat", 0.0),
        ("cat", "", 0.0),
        ("!!!", "cat", 0.0),  # normalizes to nothing
    ],
)
def test_score_f1_cases(pred, gold, expected):
    assert score_f1(pred, gold) == pytest.approx(expected)


@given(st.text(max_size=40), st.text(max_size=40))
def test_score_f1_matches_oracle_and_is_symmetric(pred, gold):
    value = score_f1(pred, gold)
    assert value == pytest.approx(oracle_f1(pred, gold))
    assert value == pytest.approx(score_f1(gold, pred))
    assert 0.0 <= value <= 1.0


# ---------------------------------------------------------------------------
# Numeric answers
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "text, expected",
    [
        ("The final answer is 42.", 42.0),
        ("total 1,234,567 units", 1234567.0),
        ("rate 3.2e-5 per step", 3.2e-5),
        ("delta -17.5 today", -17.5),
        ("first 1 then 2", 2.0),
        ("Final Answer: 10\nscratch 20 later", 10.0),
        ("We computed 7 before. Final answer: pending", 7.0),
        ("guess 5. Final answer 8. No wait.", 8.0),
        ("no digits here", None),
    ],
)
def test_extract_number(text, expected):
    assert extract_number(text) == expected


def test_extract_number_last_marker_wins():
    text = "final answer 3 ... revised final answer 9 trailing 1"
    assert extract_number(text) == 9.0
    assert extract_number(text, prefer_marker=False) == 1.0


@pytest.mark.parametrize(
    "pred, gold, expected",
    [
        ("Final answer: 42", "42", 1.0),
        ("roughly 100.00009", "100", 1.0),  # tol 1e-4 at gold 100
        ("100.0002", "100", 0.0),
        ("0.500002", "0.5", 0.0),  # tol floors at 1e-6 for small golds
        ("0.5", "0.50000049", 1.0),
        ("no number", "42", 0.0),
        ("42", "no number", 0.0),
    ],
)
def test_score_exact_numeric(pred, gold, expected):
    assert score_exact_numeric(pred, gold) == expected


def test_binary_exact_reward_normalizes():
    assert binary_exact_reward("The Cat!", "the cat") == 1.0
    assert binary_exact_reward("the cat", "a cat") == 0.0
    assert binary_exact_reward("", "") == 1.0


# ---------------------------------------------------------------------------
# External judge
# ---------------------------------------------------------------------------


def judge(code):
    return ExternalCommandScorer([sys.executable, "-c", code])


def test_external_scorer_passes_arguments_and_parses_stdout():
    scorer = judge("import sys; print(1.0 if sys.argv[1] == 'pred' and sys.argv[2] == 'gold' else 0.25)")
    assert scorer("pred", "gold") == 1.0
    assert scorer("other", "gold") == 0.25


@pytest.mark.parametrize(
    "code, message",
    [
        ("import sys; sys.exit(3)", "exited 3"),
        ("print('yes')", "expected a float"),
        ("print(1.5)", "outside"),
        ("print(float('nan'))", "outside"),
    ],
)
def test_external_scorer_error_paths(code, message):
    with pytest.raises(OpflowError, match=message):
        judge(code)("p", "g")


def test_external_scorer_requires_a_command():
    with pytest.raises(ValueError):
        ExternalCommandScorer([])


# ---------------------------------------------------------------------------
# Scorer selection
# ---------------------------------------------------------------------------


def test_family_scorer_mapping():
    assert scorer_for_family(Family.QA) is score_f1
    assert scorer_for_family(Family.MATH) is score_exact_numeric
    assert scorer_for_family(Family.EMBODIED) is binary_exact_reward
    assert scorer_for_family(Family.GAME) is binary_exact_reward
    external = scorer_for_family(Family.CODE, command=["true"])
    assert isinstance(external, ExternalCommandScorer)


def test_get_scorer_accepts_strings_and_registered_rewards():
    assert get_scorer("token-f1") is score_f1
    register_reward("always-half", lambda p, g: 0.5)
    assert get_scorer(ScorerKind.BINARY_REWARD, reward="always-half")("a", "b") == 0.5
    with pytest.raises(OpflowError, match="no registered reward"):
        get_scorer(ScorerKind.BINARY_REWARD, reward="missing")
    with pytest.raises(OpflowError, match="judge command"):
        get_scorer(ScorerKind.EXTERNAL)


# ---------------------------------------------------------------------------
# Pareto fronts
# ---------------------------------------------------------------------------


def oracle_front(points):
    def dominated(p, q):
        return q.cost <= p.cost and q.score >= p.score and (q.cost < p.cost or q.score > p.score)

    keep = [
        (i, p)
        for i, p in enumerate(points)
        if not any(dominated(p, q) for q in points)
    ]
    keep.sort(key=lambda pair: (pair[1].cost, pair[0]))
    return [p for _, p in keep]


def pts(*pairs):
    return [ParetoPoint(label=str(i), cost=c, score=s) for i, (c, s) in enumerate(pairs)]


def test_pareto_front_hand_cases():
    assert pareto_front([]) == []
    lone = pts((1.0, 0.5))
    assert pareto_front(lone) == lone

    cheap_good, pricey_bad = pts((1.0, 0.8), (2.0, 0.5))
    assert pareto_front([cheap_good, pricey_bad]) == [cheap_good]

    both = pts((1.0, 0.5), (2.0, 0.8))
    assert pareto_front(both) == both

    # Same cost: only the group maximum survives, duplicates together.
    a, b, c = pts((1.0, 0.5), (1.0, 0.5), (1.0, 0.3))
    assert pareto_front([a, b, c]) == [a, b]

    # Same score at higher cost is dominated.
    first, second = pts((1.0, 0.5), (2.0, 0.5))
    assert pareto_front([first, second]) == [first]


def test_pareto_front_orders_by_cost_then_input_order():
    p = pts((3.0, 0.9), (1.0, 0.2), (2.0, 0.6))
    assert pareto_front(p) == [p[1], p[2], p[0]]


@given(
    st.lists(
        st.tuples(
            st.sampled_from([0.0, 1.0, 1.0, 2.0, 3.5]),
            st.sampled_from([0.0, 0.25, 0.5, 0.5, 1.0]),
        ),
        max_size=24,
    )
)
def test_pareto_front_matches_quadratic_oracle(pairs):
    points = pts(*pairs)
    assert pareto_front(points) == oracle_front(points)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


ROWS = [
    ReportRow("model-b", "ours", 2, 0.61234, 1.0),
    ReportRow("model-a", "ours", 1, 0.75, 2.5),
    ReportRow("model-a", "baseline", 1, 0.5, 0.125),
    ReportRow("model-b", "ours", 1, 0.7, 3.0),
    ReportRow("model-a", "ours", 2, 0.6899999, 1.25),
]


def test_report_csv_ordering_and_formatting():
    csv = format_report_csv(ROWS)
    lines = csv.strip().split("\n")
    assert lines[0] == "model,method,rank,score,cost"
    # model-b appears first in the input, so it leads; within it, method
    # "ours" rows sort by rank.
    assert lines[1] == "model-b,ours,Top-1,0.7000,3.0000"
    assert lines[2] == "model-b,ours,Top-2,0.6123,1.0000"
    assert lines[3] == "model-a,ours,Top-1,0.7500,2.5000"
    assert lines[4] == "model-a,ours,Top-2,0.6900,1.2500"
    assert lines[5] == "model-a,baseline,Top-1,0.5000,0.1250"
    assert csv.endswith("\n")


def test_report_markdown_shape():
    md = format_report_markdown(ROWS[:2])
    lines = md.strip().split("\n")
    assert lines[0] == "| model | method | rank | score | cost |"
    assert lines[1] == "| --- | --- | --- | ---: | ---: |"
    assert lines[2] == "| model-b | ours | Top-2 | 0.6123 | 1.0000 |"
    assert lines[3] == "| model-a | ours | Top-1 | 0.7500 | 2.5000 |"
    assert len(lines) == 4


def test_pareto_csv_fronts_are_per_model():
    rows = [
        ReportRow("m1", "ours", 1, 0.9, 2.0),
        ReportRow("m1", "ours", 2, 0.6, 1.0),
        ReportRow("m2", "ours", 1, 0.5, 0.5),
        ReportRow("m2", "ours", 2, 0.4, 0.8),  # dominated within m2
    ]
    csv = pareto_csv(rows)
    lines = csv.strip().split("\n")
    assert lines[0] == "cost,score,label,on_front"
    table = {line.split(",")[2]: line.split(",")[3] for line in lines[1:]}
    assert table == {
        "m1/ours/Top-1": "true",
        "m1/ours/Top-2": "true",
        "m2/ours/Top-1": "true",
        "m2/ours/Top-2": "false",
    }


def test_pareto_csv_row_values():
    line = pareto_csv([ReportRow("m", "ours", 3, 0.51, 0.0625)]).strip().split("\n")[1]
    assert line == "0.0625,0.5100,m/ours/Top-3,true"
