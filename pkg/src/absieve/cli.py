"""Command-line surface: screen, explain, reflect, evaluate, estimate-cost.

Configuration lives in an INI file with ``[backend]``, ``[runner]`` and
``[paths]`` sections; every field can be overridden by a flag. The API
credential is only ever read from the environment, never from the file.

Exit codes are a stable contract for scripting: 0 success, 1 completed with
per-row errors, 2 usage or configuration failure.
"""

from __future__ import annotations

import configparser
import csv
import json
import random
import sys
from dataclasses import dataclass
from pathlib import Path

import click

from . import metrics as metrics_mod
from .corpus import (
    CorpusError,
    Decision,
    ScreeningManifest,
    ScreeningRecord,
    clean_text,
    load_dataset,
    load_manifest,
    write_results,
)
from .llm import AuthMissing, HttpBackend, MockBackend, MockScript
from .prompts import PromptKind
from .runner import (
    ConfigInvalid,
    RunConfig,
    estimate_cost,
    run_explanations,
    run_screening,
)

RUN_LOG_NAME = "run_log.jsonl"
RUN_REPORT_NAME = "run_report.json"
METRICS_JSON_NAME = "metrics.json"
METRICS_TABLE_NAME = "metrics_table.csv"
ESTIMATE_JSON_NAME = "estimate.json"

TABLE_COLUMNS = (
    "Dataset",
    "Accuracy",
    "Sensitivity (Included)",
    "Sensitivity (Excluded)",
    "Kappa",
)


class CliFailure(click.ClickException):
    """Configuration or usage failure; maps to exit status 2."""

    exit_code = 2


@dataclass
class AppConfig:
    backend_kind: str  # "http" or "mock"
    base_url: str | None
    mock_script: Path | None
    credential_env: str
    run: RunConfig
    manifest_path: Path
    data_dir: Path
    output_dir: Path


def _get(parser: configparser.ConfigParser, section: str, key: str) -> str | None:
    if parser.has_option(section, key):
        value = parser.get(section, key).strip()
        return value or None
    return None


def _coerce(value: str, kind: type, field: str):
    try:
        return kind(value)
    except ValueError:
        raise CliFailure(f"config field {field}: cannot parse {value!r} as {kind.__name__}")


def load_app_config(path: Path, overrides: dict[str, str | None]) -> AppConfig:
    """Parse the INI config, apply flag overrides, and validate."""
    parser = configparser.ConfigParser()
    if not path.exists():
        raise CliFailure(f"config file not found: {path}")
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise CliFailure(f"config file {path}: {exc}")

    def setting(section: str, key: str, flag: str) -> str | None:
        if overrides.get(flag) is not None:
            return str(overrides[flag])
        return _get(parser, section, key)

    base_url = setting("backend", "base_url", "base_url")
    mock_script = setting("backend", "mock_script", "mock_script")
    if bool(base_url) == bool(mock_script):
        raise CliFailure(
            "exactly one backend must be configured: set either backend.base_url "
            "or backend.mock_script"
        )

    run = RunConfig()
    model = setting("backend", "model", "model")
    if model:
        run.model = model
    temperature = setting("backend", "temperature", "temperature")
    if temperature is not None:
        run.temperature = _coerce(temperature, float, "backend.temperature")
    for key, kind in (
        ("max_in_flight", int),
        ("requests_per_minute", int),
        ("max_retries", int),
        ("backoff_base_s", float),
        ("checkpoint_every", int),
        ("price_per_1k_input", float),
        ("price_per_1k_output", float),
    ):
        raw = setting("runner", key, key)
        if raw is not None:
            setattr(run, key, _coerce(raw, kind, f"runner.{key}"))

    manifest = setting("paths", "manifest", "manifest")
    if not manifest:
        raise CliFailure("config field paths.manifest is required")
    data_dir = setting("paths", "data_dir", "data_dir")
    if not data_dir:
        raise CliFailure("config field paths.data_dir is required")
    output_dir = setting("paths", "output_dir", "output_dir")
    if not output_dir:
        raise CliFailure("config field paths.output_dir is required")

    manifest_path = Path(manifest)
    if not manifest_path.exists():
        raise CliFailure(f"paths.manifest does not exist: {manifest_path}")
    data_path = Path(data_dir)
    if not data_path.is_dir():
        raise CliFailure(f"paths.data_dir is not a directory: {data_path}")
    out_path = Path(output_dir)
    out_path.mkdir(parents=True, exist_ok=True)

    mock_path = None
    if mock_script:
        mock_path = Path(mock_script)
        if not mock_path.exists():
            raise CliFailure(f"backend.mock_script does not exist: {mock_path}")

    return AppConfig(
        backend_kind="mock" if mock_script else "http",
        base_url=base_url,
        mock_script=mock_path,
        credential_env=setting("backend", "credential_env", "credential_env")
        or "ABSIEVE_API_KEY",
        run=run,
        manifest_path=manifest_path,
        data_dir=data_path,
        output_dir=out_path,
    )


def _make_backend(config: AppConfig):
    if config.backend_kind == "mock":
        return MockBackend(MockScript.from_file(config.mock_script))
    try:
        return HttpBackend(config.base_url, api_key_env=config.credential_env)
    except AuthMissing as exc:
        raise CliFailure(str(exc))


def _load_manifest(config: AppConfig) -> ScreeningManifest:
    try:
        return load_manifest(config.manifest_path)
    except CorpusError as exc:
        raise CliFailure(str(exc))


def _dataset_names(manifest: ScreeningManifest, dataset: str | None) -> list[str]:
    if dataset is None:
        return list(manifest.names())
    if dataset not in manifest:
        raise CliFailure(f"dataset {dataset!r} is not listed in the manifest")
    return [dataset]


def _results_path(config: AppConfig, name: str) -> Path:
    return config.output_dir / f"{name}_results.csv"


def _load_records(
    config: AppConfig, manifest: ScreeningManifest, name: str, resume: bool
) -> list[ScreeningRecord]:
    source = config.data_dir / f"{name}.csv"
    if resume and _results_path(config, name).exists():
        source = _results_path(config, name)
    if not source.exists():
        raise CliFailure(f"dataset file not found: {source}")
    try:
        return load_dataset(source, name, manifest)
    except CorpusError as exc:
        raise CliFailure(str(exc))


_CONFIG_OPTIONS = [
    click.option(
        "--config",
        "-c",
        "config_path",
        type=click.Path(path_type=Path),
        default=Path("absieve.ini"),
        show_default=True,
        help="Path to the INI configuration file.",
    ),
    click.option("--manifest", default=None, help="Override paths.manifest."),
    click.option("--data-dir", "data_dir", default=None, help="Override paths.data_dir."),
    click.option("--output-dir", "output_dir", default=None, help="Override paths.output_dir."),
    click.option("--base-url", "base_url", default=None, help="Override backend.base_url."),
    click.option("--mock-script", "mock_script", default=None, help="Override backend.mock_script."),
    click.option("--model", default=None, help="Override backend.model."),
    click.option("--temperature", default=None, help="Override backend.temperature."),
    click.option(
        "--credential-env",
        "credential_env",
        default=None,
        help="Environment variable holding the API key.",
    ),
    click.option("--max-in-flight", "max_in_flight", default=None, help="Override runner.max_in_flight."),
    click.option(
        "--requests-per-minute",
        "requests_per_minute",
        default=None,
        help="Override runner.requests_per_minute.",
    ),
    click.option("--max-retries", "max_retries", default=None, help="Override runner.max_retries."),
    click.option(
        "--backoff-base",
        "backoff_base_s",
        default=None,
        help="Override runner.backoff_base_s (seconds).",
    ),
    click.option(
        "--checkpoint-every",
        "checkpoint_every",
        default=None,
        help="Override runner.checkpoint_every.",
    ),
    click.option(
        "--price-per-1k-input",
        "price_per_1k_input",
        default=None,
        help="Override runner.price_per_1k_input (USD).",
    ),
    click.option(
        "--price-per-1k-output",
        "price_per_1k_output",
        default=None,
        help="Override runner.price_per_1k_output (USD).",
    ),
]


def config_options(command):
    for option in reversed(_CONFIG_OPTIONS):
        command = option(command)
    return command


def _split_config_kwargs(kwargs: dict) -> AppConfig:
    config_path = kwargs.pop("config_path")
    override_keys = (
        "manifest",
        "data_dir",
        "output_dir",
        "base_url",
        "mock_script",
        "model",
        "temperature",
        "credential_env",
        "max_in_flight",
        "requests_per_minute",
        "max_retries",
        "backoff_base_s",
        "checkpoint_every",
        "price_per_1k_input",
        "price_per_1k_output",
    )
    overrides = {key: kwargs.pop(key) for key in override_keys}
    return load_app_config(config_path, overrides)


@click.group()
@click.version_option(package_name="absieve")
def main() -> None:
    """Batch title/abstract screening against natural-language criteria."""


@main.command()
@config_options
@click.option("--dataset", default=None, help="Screen a single named dataset.")
@click.option("--resume", is_flag=True, help="Continue from an existing results file.")
def screen(dataset: str | None, resume: bool, **kwargs) -> None:
    """Run the screening loop and write per-dataset results CSVs."""
    config = _split_config_kwargs(kwargs)
    manifest = _load_manifest(config)
    names = _dataset_names(manifest, dataset)
    datasets = {name: _load_records(config, manifest, name, resume) for name in names}
    backend = _make_backend(config)
    try:
        report = run_screening(
            manifest,
            datasets,
            backend,
            config.run,
            config.output_dir,
            run_log_path=config.output_dir / RUN_LOG_NAME,
        )
    except (ConfigInvalid, CorpusError) as exc:
        raise CliFailure(str(exc))

    report_path = config.output_dir / RUN_REPORT_NAME
    report_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="ascii")
    for name, stats in report.datasets.items():
        click.echo(
            f"{name}: {stats.rows_total} rows, {stats.rows_screened} screened, "
            f"{stats.rows_skipped_resume} resumed, {stats.included_count} included, "
            f"{stats.excluded_count} excluded, {stats.unparseable_count} unparseable, "
            f"{stats.error_count} errors, {stats.empty_abstract_count} empty abstracts"
        )
    click.echo(
        f"total: {report.input_tokens} input tokens, {report.output_tokens} output tokens, "
        f"estimated cost ${report.estimated_cost:.4f}, wall time {report.wall_time_s:.1f}s"
    )
    if report.error_count:
        sys.exit(1)


def _run_explain(
    dataset: str,
    mode_name: str,
    sample: int | None,
    rows: str | None,
    seed: int,
    kwargs: dict,
) -> None:
    config = _split_config_kwargs(kwargs)
    manifest = _load_manifest(config)
    if dataset not in manifest:
        raise CliFailure(f"dataset {dataset!r} is not listed in the manifest")
    results_path = _results_path(config, dataset)
    if not results_path.exists():
        raise CliFailure(f"results file not found (run `screen` first): {results_path}")
    try:
        records = load_dataset(results_path, dataset, manifest)
    except CorpusError as exc:
        raise CliFailure(str(exc))

    mode = PromptKind.EXPLAIN if mode_name == "explain" else PromptKind.REFLECT
    from .runner import _eligible_for  # shared eligibility rule

    eligible = [r for r in records if _eligible_for(mode, r)]
    if rows is not None:
        try:
            wanted = {int(part) for part in rows.split(",") if part.strip()}
        except ValueError:
            raise CliFailure(f"--rows must be a comma-separated list of integers: {rows!r}")
        unknown = wanted - {r.row_index for r in records}
        if unknown:
            raise CliFailure(f"--rows names rows not in the dataset: {sorted(unknown)}")
        chosen = [r for r in records if r.row_index in wanted]
        if not any(_eligible_for(mode, r) for r in chosen):
            raise CliFailure(f"no eligible rows for mode {mode_name!r} in --rows selection")
    else:
        if not eligible:
            raise CliFailure(f"no eligible rows for mode {mode_name!r} in {dataset}")
        if sample is None or sample >= len(eligible):
            chosen = eligible
        else:
            chosen = random.Random(seed).sample(eligible, sample)
            chosen.sort(key=lambda r: r.row_index)

    backend = _make_backend(config)
    try:
        report = run_explanations(
            chosen,
            manifest.criteria_for(dataset),
            backend,
            config.run,
            mode,
            dataset,
            run_log_path=config.output_dir / RUN_LOG_NAME,
        )
        write_results(records, results_path)
    except (ConfigInvalid, CorpusError) as exc:
        raise CliFailure(str(exc))
    click.echo(
        f"{dataset}: {report.annotated_count} annotated, {report.skipped_count} skipped, "
        f"{report.error_count} errors ({mode_name})"
    )
    if report.error_count:
        sys.exit(1)


@main.command()
@config_options
@click.option("--dataset", required=True, help="Dataset whose results file to annotate.")
@click.option(
    "--mode",
    type=click.Choice(["explain", "reflect"]),
    default="explain",
    show_default=True,
)
@click.option("--sample", type=int, default=None, help="Annotate K eligible rows, sampled with --seed.")
@click.option("--rows", default=None, help="Comma-separated row indexes to annotate.")
@click.option("--seed", type=int, default=0, show_default=True, help="Sampling seed.")
def explain(dataset: str, mode: str, sample: int | None, rows: str | None, seed: int, **kwargs) -> None:
    """Ask the model to explain (or reflect on) decisions in a results file."""
    _run_explain(dataset, mode, sample, rows, seed, kwargs)


@main.command()
@config_options
@click.option("--dataset", required=True, help="Dataset whose results file to annotate.")
@click.option("--sample", type=int, default=None, help="Annotate K eligible rows, sampled with --seed.")
@click.option("--rows", default=None, help="Comma-separated row indexes to annotate.")
@click.option("--seed", type=int, default=0, show_default=True, help="Sampling seed.")
def reflect(dataset: str, sample: int | None, rows: str | None, seed: int, **kwargs) -> None:
    """Ask the model why its disagreeing decisions were incorrect."""
    _run_explain(dataset, "reflect", sample, rows, seed, kwargs)


def _decision_columns(
    path: Path, truth_column: str, pred_column: str
) -> tuple[list[Decision | None], list[Decision | None]]:
    """Read two named decision columns from a results CSV.

    Header names match case-insensitively. Cells that are empty or not a
    known decision token count as missing, which drops the row from the
    comparison (and shows up in the ``dropped`` tally).
    """
    try:
        with open(path, newline="", encoding="utf-8-sig") as fh:
            rows = [row for row in csv.reader(fh) if row]
    except OSError as exc:
        raise CliFailure(f"cannot read {path}: {exc}")
    if not rows:
        raise CliFailure(f"{path}: file is empty")
    header = {clean_text(name).lower(): pos for pos, name in enumerate(rows[0])}

    def column(name: str) -> list[Decision | None]:
        pos = header.get(clean_text(name).lower())
        if pos is None:
            raise CliFailure(f"{path}: missing column {name!r}")
        values: list[Decision | None] = []
        for row in rows[1:]:
            cell = clean_text(row[pos]).lower() if pos < len(row) else ""
            try:
                values.append(Decision(cell) if cell else None)
            except ValueError:
                values.append(None)
        return values

    return column(truth_column), column(pred_column)


def _format_ratio(value: float | None) -> str:
    return "-" if value is None else f"{value:.3f}"


def _format_kappa(value: float | None) -> str:
    # Kappa prints with two decimals in the summary table; JSON keeps full precision.
    return "-" if value is None else f"{value:.2f}"


def _confusion_svg(name: str, cm: metrics_mod.ConfusionMatrix) -> str:
    """Render a 2x2 annotated heatmap as a standalone SVG document."""
    counts = [[cm.tp, cm.fn], [cm.fp, cm.tn]]
    peak = max(cm.tp, cm.fn, cm.fp, cm.tn, 1)
    cell, x0, y0 = 120, 150, 70
    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="420" height="360" '
        'viewBox="0 0 420 360" font-family="monospace" font-size="14">',
        f'<text x="210" y="28" text-anchor="middle" font-size="16">{name}</text>',
        f'<text x="{x0 + cell}" y="52" text-anchor="middle">predicted</text>',
        f'<text x="{x0 + cell // 2}" y="{y0 - 4}" text-anchor="middle">included</text>',
        f'<text x="{x0 + cell + cell // 2}" y="{y0 - 4}" text-anchor="middle">excluded</text>',
        f'<text x="20" y="{y0 + cell}" writing-mode="tb" text-anchor="middle">truth</text>',
        f'<text x="{x0 - 10}" y="{y0 + cell // 2}" text-anchor="end">included</text>',
        f'<text x="{x0 - 10}" y="{y0 + cell + cell // 2}" text-anchor="end">excluded</text>',
    ]
    for r, row in enumerate(counts):
        for c, count in enumerate(row):
            share = count / peak
            # Blend white toward steel blue with the cell's share of the peak count.
            red = round(255 - share * (255 - 70))
            green = round(255 - share * (255 - 114))
            blue = round(255 - share * (255 - 178))
            x, y = x0 + c * cell, y0 + r * cell
            text_fill = "#ffffff" if share > 0.6 else "#000000"
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="rgb({red},{green},{blue})" stroke="#333333"/>'
            )
            parts.append(
                f'<text x="{x + cell // 2}" y="{y + cell // 2 + 5}" '
                f'text-anchor="middle" fill="{text_fill}">{count}</text>'
            )
    parts.append(
        f'<text x="{x0}" y="{y0 + 2 * cell + 30}">n={cm.n}, dropped={cm.dropped}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


@main.command()
@config_options
@click.option("--dataset", default=None, help="Evaluate a single named dataset.")
@click.option("--all", "evaluate_all", is_flag=True, help="Evaluate every manifest dataset.")
@click.option("--truth", default="human_decision", show_default=True, help="Ground-truth column.")
@click.option("--pred", default="decision", show_default=True, help="Predicted column.")
def evaluate(dataset: str | None, evaluate_all: bool, truth: str, pred: str, **kwargs) -> None:
    """Score results files against ground truth and emit metric artifacts."""
    if dataset is not None and evaluate_all:
        raise CliFailure("--dataset and --all are mutually exclusive")
    config = _split_config_kwargs(kwargs)
    manifest = _load_manifest(config)
    names = _dataset_names(manifest, dataset)

    per_dataset: list[metrics_mod.DatasetMetrics] = []
    for name in names:
        path = _results_path(config, name)
        if not path.exists():
            raise CliFailure(f"results file not found (run `screen` first): {path}")
        truth_col, pred_col = _decision_columns(path, truth, pred)
        try:
            per_dataset.append(metrics_mod.DatasetMetrics.from_decisions(name, truth_col, pred_col))
        except metrics_mod.EmptyMatrix:
            raise CliFailure(
                f"{name}: no comparable rows between columns {truth!r} and {pred!r}"
            )

        cm = per_dataset[-1].confusion
        with open(config.output_dir / f"{name}_confusion.csv", "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dataset", "tp", "fn", "fp", "tn", "dropped", "n"])
            writer.writerow([name, cm.tp, cm.fn, cm.fp, cm.tn, cm.dropped, cm.n])
        (config.output_dir / f"{name}_confusion.svg").write_text(
            _confusion_svg(name, cm), encoding="ascii"
        )

    summary = metrics_mod.weighted_summary(per_dataset)

    document = {
        "truth_column": truth,
        "pred_column": pred,
        "datasets": [m.to_dict() for m in per_dataset],
        "weighted_total": summary.to_dict(),
    }
    (config.output_dir / METRICS_JSON_NAME).write_text(
        json.dumps(document, indent=2) + "\n", encoding="ascii"
    )

    with open(config.output_dir / METRICS_TABLE_NAME, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_COLUMNS)
        for m in per_dataset:
            writer.writerow(
                [
                    m.dataset_name,
                    _format_ratio(m.accuracy),
                    _format_ratio(m.sensitivity_included),
                    _format_ratio(m.sensitivity_excluded),
                    _format_kappa(m.kappa),
                ]
            )
        writer.writerow(
            [
                "Total (Weighted Average)",
                _format_ratio(summary.accuracy),
                _format_ratio(summary.sensitivity_included),
                _format_ratio(summary.sensitivity_excluded),
                "-",
            ]
        )

    header = f"{'Dataset':<28} {'Accuracy':>9} {'Sens(Inc)':>10} {'Sens(Exc)':>10} {'Kappa':>7}"
    click.echo(header)
    for m in per_dataset:
        click.echo(
            f"{m.dataset_name:<28} {_format_ratio(m.accuracy):>9} "
            f"{_format_ratio(m.sensitivity_included):>10} "
            f"{_format_ratio(m.sensitivity_excluded):>10} {_format_kappa(m.kappa):>7}"
        )
    click.echo(
        f"{'Total (Weighted Average)':<28} {_format_ratio(summary.accuracy):>9} "
        f"{_format_ratio(summary.sensitivity_included):>10} "
        f"{_format_ratio(summary.sensitivity_excluded):>10} {'-':>7}"
    )
    click.echo(f"weighting: {summary.weighting}")


@main.command("estimate-cost")
@config_options
def estimate_cost_cmd(**kwargs) -> None:
    """Project token usage, cost, and wall time for a full screening run."""
    config = _split_config_kwargs(kwargs)
    manifest = _load_manifest(config)
    datasets = {
        name: _load_records(config, manifest, name, resume=False)
        for name in manifest.names()
    }
    try:
        estimate = estimate_cost(manifest, datasets, config.run)
    except (ConfigInvalid, CorpusError) as exc:
        raise CliFailure(str(exc))

    (config.output_dir / ESTIMATE_JSON_NAME).write_text(
        json.dumps(estimate.to_dict(), indent=2) + "\n", encoding="ascii"
    )
    for d in estimate.per_dataset:
        click.echo(
            f"{d.dataset_name}: {d.rows} rows, {d.input_tokens} input tokens, "
            f"{d.output_tokens} output tokens, ${d.cost:.4f}"
        )
    click.echo(
        f"total: {estimate.total_input_tokens} input tokens, "
        f"{estimate.total_output_tokens} output tokens, ${estimate.cost:.4f}, "
        f"projected wall time >= {estimate.projected_wall_time_s:.0f}s "
        f"(rate-limit lower bound)"
    )


if __name__ == "__main__":
    main()
