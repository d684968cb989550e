"""Command line interface.

Four subcommands mirror the pipeline: ``extract-ops`` distills an operator
registry from a dataset's validation cases, ``search`` grows a workflow
experience tree over that registry, ``eval`` scores the best workflows on the
held-out test split, and ``report`` merges evaluation results into cost
report tables with Pareto front annotations.  Every stage can run offline
from recorded sessions via ``--replay``.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import random
from pathlib import Path

import click

from opflow import __version__
from opflow.bench import (
    FAMILY_SCORERS,
    Dataset,
    ReportRow,
    ScorerKind,
    format_report_csv,
    format_report_markdown,
    get_scorer,
    load_dataset,
    pareto_csv,
    split_dataset,
    split_items,
)
from opflow.config import RunConfig, build_clients, load_config
from opflow.errors import ConfigError, OpflowError
from opflow.extraction import TaskCase, run_extraction
from opflow.ir import OperatorRegistry, parse_workflow, workflow_to_dict
from opflow.prompts import load_prompts
from opflow.search import (
    SearchConfig,
    SelectionPolicy,
    evaluate,
    export_experience,
    import_experience,
    initialize,
    run_search,
    select_top_k,
)


def _fail_on_error(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except OpflowError as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


def _common_options(fn):
    fn = click.option(
        "--seed", type=int, default=42, show_default=True,
        help="Seed for the dataset split and search selection.",
    )(fn)
    fn = click.option(
        "--out", "out_dir", required=True,
        type=click.Path(file_okay=False, path_type=Path),
        help="Directory for command outputs (created if needed).",
    )(fn)
    fn = click.option(
        "--replay", "replay_dir", default=None,
        type=click.Path(exists=True, file_okay=False, path_type=Path),
        help="Replay recorded model sessions from this directory instead of "
        "calling any backend.",
    )(fn)
    fn = click.option(
        "--config", "config_path", required=True,
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        help="Run configuration (TOML).",
    )(fn)
    return fn


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _load_run(config_path: Path, seed: int):
    config = load_config(config_path)
    dataset = load_dataset(config.dataset_manifest)
    split = split_dataset(dataset, ratio=config.split_ratio, seed=seed)
    return config, dataset, split


def _resolve_scorer(config: RunConfig, dataset: Dataset):
    kind = ScorerKind(config.scorer) if config.scorer else FAMILY_SCORERS[dataset.family]
    try:
        scorer = get_scorer(kind, command=config.judge_command, reward=config.reward)
    except OpflowError as exc:
        raise ConfigError(str(exc)) from exc
    return scorer, kind


@click.group()
@click.version_option(version=__version__, prog_name="opflow")
@click.option("-v", "--verbose", is_flag=True, help="Log pipeline progress.")
def main(verbose: bool):
    """Operator extraction and workflow search for LLM agent pipelines."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command("extract-ops")
@_common_options
@_fail_on_error
def cmd_extract_ops(config_path: Path, replay_dir: Path | None, out_dir: Path, seed: int):
    """Distill an operator registry from the dataset's validation cases."""
    config, dataset, split = _load_run(config_path, seed)
    prompts = load_prompts(config.prompts_dir)
    clients = build_clients(config, ("generator",), replay_dir=replay_dir)

    cases = [
        TaskCase(id=item.id, problem=item.problem, solution=item.gold)
        for item in split_items(dataset, split.validation)
    ]
    result = run_extraction(
        cases,
        prompts,
        clients["generator"],
        config.task,
        paths=config.extraction.paths,
        retry_limit=config.extraction.retry_limit,
    )

    out_dir.mkdir(parents=True, exist_ok=True)
    registry = result.registry()
    registry.save(out_dir / "registry.json")
    _write_json(out_dir / "provenance.json", result.provenance_doc())

    usage = clients["generator"].ledger.summary()
    click.echo(
        f"extracted {len(result.initial)} initial -> {len(result.clustered)} clustered "
        f"-> {len(registry)} final operators from {len(cases)} cases"
    )
    click.echo(f"operators: {', '.join(registry.names())}")
    click.echo(f"generator calls: {usage.calls} (cost {usage.total_cost:.4f})")
    click.echo(f"wrote {out_dir / 'registry.json'} and {out_dir / 'provenance.json'}")


@main.command("search")
@_common_options
@click.option(
    "--registry", "registry_path", required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Operator registry produced by extract-ops.",
)
@_fail_on_error
def cmd_search(
    config_path: Path,
    replay_dir: Path | None,
    out_dir: Path,
    seed: int,
    registry_path: Path,
):
    """Search for workflows over the registry, guided by validation scores."""
    config, dataset, split = _load_run(config_path, seed)
    scorer, scorer_kind = _resolve_scorer(config, dataset)
    prompts = load_prompts(config.prompts_dir)
    registry = OperatorRegistry.load(registry_path)
    clients = build_clients(config, ("optimizer", "executor"), replay_dir=replay_dir)

    max_rounds, repeats = config.search_defaults(dataset.family)
    search_config = SearchConfig(
        max_rounds=max_rounds,
        validation_repeats=repeats,
        expansion_retry_limit=config.search.expansion_retry_limit,
        top_k=config.search.top_k,
        policy=SelectionPolicy(
            lam=config.search.lam, temperature=config.search.softmax_temperature
        ),
    )
    tree = initialize(registry, config.search.root_operator, config.task)
    run_search(
        search_config,
        tree,
        registry,
        prompts,
        clients["optimizer"],
        clients["executor"],
        split_items(dataset, split.validation),
        scorer,
        random.Random(seed),
        config.task,
    )

    out_dir.mkdir(parents=True, exist_ok=True)
    rounds_dir = out_dir / "rounds"
    rounds_dir.mkdir(exist_ok=True)
    _write_json(out_dir / "experience.json", export_experience(tree))
    for index in sorted(tree.rounds):
        record = tree.rounds[index]
        if record.workflow is not None:
            _write_json(rounds_dir / f"{index}.json", workflow_to_dict(record.workflow))
    best = tree.best()
    _write_json(out_dir / "best_workflow.json", workflow_to_dict(best.workflow))
    _write_json(
        out_dir / "manifest.json",
        {
            "format_version": 1,
            "task": config.task,
            "method": config.method,
            "seed": seed,
            "split_ratio": config.split_ratio,
            "scorer": scorer_kind.value,
            "search": {
                "max_rounds": max_rounds,
                "lambda": config.search.lam,
                "softmax_temperature": config.search.softmax_temperature,
                "validation_repeats": repeats,
                "top_k": config.search.top_k,
                "expansion_retry_limit": config.search.expansion_retry_limit,
            },
            "backends": {
                slot: {
                    "kind": "scripted" if replay_dir else config.backends[slot].kind,
                    "model": config.backends[slot].model,
                }
                for slot in ("optimizer", "executor")
            },
            "rounds": len(tree.rounds),
            "best_round": best.round,
            "truncated": tree.truncated,
        },
    )

    if tree.truncated:
        click.echo("warning: search stopped early; tree is truncated", err=True)
    click.echo(f"searched {len(tree.rounds)} rounds; best round {best.round} "
               f"scored {best.score:.4f}")
    click.echo(f"wrote {out_dir / 'experience.json'}")


@main.command("eval")
@_common_options
@click.option(
    "--registry", "registry_path", required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Operator registry produced by extract-ops.",
)
@click.option(
    "--experience", "experience_dir", required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    help="Search output directory (experience.json plus rounds/).",
)
@_fail_on_error
def cmd_eval(
    config_path: Path,
    replay_dir: Path | None,
    out_dir: Path,
    seed: int,
    registry_path: Path,
    experience_dir: Path,
):
    """Score the top-k searched workflows on the held-out test split."""
    config, dataset, split = _load_run(config_path, seed)
    scorer, _ = _resolve_scorer(config, dataset)
    registry = OperatorRegistry.load(registry_path)
    clients = build_clients(config, ("executor",), replay_dir=replay_dir)

    experience_path = experience_dir / "experience.json"
    try:
        doc = json.loads(experience_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {experience_path}: {exc}") from None
    workflows = {}
    for path in sorted((experience_dir / "rounds").glob("*.json")):
        workflow = parse_workflow(path.read_text(encoding="utf-8"))
        index = workflow.origin_round
        workflows[index if index is not None else int(path.stem)] = workflow
    try:
        tree = import_experience(doc, workflows)
    except ValueError as exc:
        raise ConfigError(f"{experience_path}: {exc}") from None

    top = select_top_k(tree, config.search.top_k)
    test_items = split_items(dataset, split.test)
    model = config.backends["executor"].model

    rows = []
    for rank, record in enumerate(top, start=1):
        if record.workflow is None:
            raise ConfigError(
                f"round {record.round} has no workflow document under {experience_dir / 'rounds'}"
            )
        outcome = evaluate(
            record.workflow, test_items, scorer, clients["executor"], registry
        )
        rows.append((rank, record.round, outcome.score, outcome.cost))
        click.echo(
            f"rank {rank} (round {record.round}): score {outcome.score:.4f} "
            f"cost {outcome.cost:.4f}"
        )

    out_dir.mkdir(parents=True, exist_ok=True)
    eval_path = out_dir / "eval.csv"
    with open(eval_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "method", "rank", "round", "score", "cost"])
        for rank, round_index, score, cost in rows:
            writer.writerow([model, config.method, rank, round_index, score, cost])
    click.echo(f"wrote {eval_path}")


@main.command("report")
@click.argument(
    "results", nargs=-1, required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
)
@click.option(
    "--out", "out_dir", required=True,
    type=click.Path(file_okay=False, path_type=Path),
    help="Directory for the report files.",
)
@_fail_on_error
def cmd_report(results: tuple[Path, ...], out_dir: Path):
    """Merge eval.csv files into cost report tables and a Pareto CSV."""
    rows: list[ReportRow] = []
    for path in results:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            required = {"model", "method", "rank", "score", "cost"}
            if reader.fieldnames is None or not required <= set(reader.fieldnames):
                raise ConfigError(
                    f"{path}: expected columns {', '.join(sorted(required))}"
                )
            for lineno, record in enumerate(reader, start=2):
                try:
                    rank_text = record["rank"]
                    rank = int(rank_text[4:]) if rank_text.startswith("Top-") else int(rank_text)
                    rows.append(
                        ReportRow(
                            model=record["model"],
                            method=record["method"],
                            rank=rank,
                            score=float(record["score"]),
                            cost=float(record["cost"]),
                        )
                    )
                except (KeyError, ValueError) as exc:
                    raise ConfigError(f"{path}:{lineno}: bad row: {exc}") from None
    if not rows:
        raise ConfigError("result files contain no rows")

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(format_report_csv(rows), encoding="utf-8")
    markdown = format_report_markdown(rows)
    (out_dir / "report.md").write_text(markdown, encoding="utf-8")
    (out_dir / "pareto.csv").write_text(pareto_csv(rows), encoding="utf-8")
    click.echo(markdown, nl=False)
    click.echo(f"wrote report.csv, report.md, pareto.csv under {out_dir}")


if __name__ == "__main__":
    main()
