"""Concurrent screening loop: rate limiting, retries, checkpointing, cost ledger.

One coordinator walks the datasets in order and dispatches up to
``max_in_flight`` worker calls through a shared rate limiter. Workers only
call the backend and report back; every record mutation, tally, and
checkpoint write happens on the coordinator, so no locking is needed around
the records themselves.

The results CSV doubles as the checkpoint: a non-empty ``decision`` cell
means the row is done, and each checkpoint is an atomic whole-file replace.
Interrupt the process at any point and a resumed run converges on the same
final file.
"""

from __future__ import annotations

import json
import random
import threading
import time
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

from .corpus import (
    CriteriaSet,
    Decision,
    ScreeningManifest,
    ScreeningRecord,
    write_results,
)
from .llm import (
    CompletionRequest,
    CompletionResult,
    FatalBackendError,
    TransientBackendError,
    count_tokens_estimate,
    parse_decision,
)
from .prompts import (
    PromptKind,
    build_decision_prompt,
    build_explain_prompt,
    build_reflect_prompt,
)

# The decision reply is a single word by construction; explain/reflect are prose.
DECISION_MAX_TOKENS = 8
NARRATIVE_MAX_TOKENS = 512
MAX_BACKOFF_S = 60.0


class RunnerError(Exception):
    pass


class ConfigInvalid(RunnerError):
    pass


class Backend(Protocol):
    def complete(self, request: CompletionRequest) -> CompletionResult: ...


@dataclass
class RunConfig:
    model: str = "gpt-3.5-turbo"
    temperature: float = 0.0
    max_in_flight: int = 4
    requests_per_minute: int = 60
    max_retries: int = 5
    backoff_base_s: float = 1.0
    checkpoint_every: int = 1
    price_per_1k_input: float = 0.0015
    price_per_1k_output: float = 0.002

    def validate(self) -> None:
        if not self.model:
            raise ConfigInvalid("model must be non-empty")
        if self.temperature < 0:
            raise ConfigInvalid("temperature must be >= 0")
        for name in ("max_in_flight", "requests_per_minute", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigInvalid(f"{name} must be a positive integer")
        if self.max_retries < 0:
            raise ConfigInvalid("max_retries must be >= 0")
        if self.backoff_base_s < 0:
            raise ConfigInvalid("backoff_base_s must be >= 0")
        for name in ("price_per_1k_input", "price_per_1k_output"):
            if getattr(self, name) < 0:
                raise ConfigInvalid(f"{name} must be >= 0")


@dataclass
class DatasetStats:
    rows_total: int = 0
    rows_screened: int = 0
    rows_skipped_resume: int = 0
    included_count: int = 0
    excluded_count: int = 0
    unparseable_count: int = 0
    error_count: int = 0
    empty_abstract_count: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunReport:
    datasets: dict[str, DatasetStats] = field(default_factory=dict)
    wall_time_s: float = 0.0
    input_tokens: int = 0
    output_tokens: int = 0
    estimated_cost: float = 0.0

    @property
    def error_count(self) -> int:
        return sum(s.error_count for s in self.datasets.values())

    def to_dict(self) -> dict:
        return {
            "datasets": {name: s.to_dict() for name, s in self.datasets.items()},
            "totals": {
                "wall_time_s": self.wall_time_s,
                "input_tokens": self.input_tokens,
                "output_tokens": self.output_tokens,
                "estimated_cost": self.estimated_cost,
            },
        }


class RateLimiter:
    """Spaces request starts at least ``60 / requests_per_minute`` apart.

    The next slot is measured from the previous caller's actual start (the
    moment its acquire returned), not from a precomputed reservation. A call
    that starts late under scheduler noise therefore pushes followers back
    instead of letting them compress the observed gap.
    """

    def __init__(self, requests_per_minute: int):
        self._interval = 60.0 / requests_per_minute
        self._lock = threading.Lock()
        self._last_start: float | None = None

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                if self._last_start is None or now >= self._last_start + self._interval:
                    self._last_start = now
                    return
                delay = self._last_start + self._interval - now
            time.sleep(delay)


class _RunLog:
    """Append-only JSONL log, one object per backend call. Thread-safe."""

    def __init__(self, path: str | Path | None):
        self._path = Path(path) if path is not None else None
        self._lock = threading.Lock()

    def record(self, **fields) -> None:
        if self._path is None:
            return
        line = json.dumps(fields, sort_keys=True)
        with self._lock:
            with open(self._path, "a", encoding="ascii") as fh:
                fh.write(line + "\n")


@dataclass(frozen=True)
class _RowOutcome:
    decision: Decision
    input_tokens: int
    output_tokens: int


def _backoff_sleep(config: RunConfig, retry_index: int) -> None:
    # Full jitter: uniform over (0, base * 2^k], capped to stay polite.
    cap = min(MAX_BACKOFF_S, config.backoff_base_s * (2**retry_index))
    if cap > 0:
        time.sleep(random.uniform(0, cap))


def _screen_row(
    record: ScreeningRecord,
    criteria: CriteriaSet,
    dataset_name: str,
    backend: Backend,
    config: RunConfig,
    limiter: RateLimiter,
    log: _RunLog,
) -> _RowOutcome:
    """Resolve one row's decision: call, retry transient errors, re-ask once.

    Call budget per row is 1 + max_retries (transient retries) + 1 (a single
    re-ask when the first parsed answer is neither label). A row that
    exhausts its budget becomes ERROR; a row that stays unreadable becomes
    UNPARSEABLE. Neither aborts the run.
    """
    request = CompletionRequest(
        model=config.model,
        prompt=build_decision_prompt(record, criteria),
        temperature=config.temperature,
        max_output_tokens=DECISION_MAX_TOKENS,
        dataset_name=dataset_name,
        row_index=record.row_index,
    )
    attempt = 0
    retries_used = 0
    reasked = False
    input_tokens = output_tokens = 0

    while True:
        attempt += 1
        limiter.acquire()
        started = time.monotonic()
        try:
            result = backend.complete(request)
        except TransientBackendError:
            log.record(
                dataset=dataset_name,
                row=record.row_index,
                attempt=attempt,
                latency_ms=(time.monotonic() - started) * 1000.0,
                input_tokens=0,
                output_tokens=0,
                outcome="transient_error",
            )
            if reasked:
                # The re-ask gets one shot; we already hold an unreadable answer.
                return _RowOutcome(Decision.UNPARSEABLE, input_tokens, output_tokens)
            if retries_used >= config.max_retries:
                return _RowOutcome(Decision.ERROR, input_tokens, output_tokens)
            _backoff_sleep(config, retries_used)
            retries_used += 1
            continue
        except FatalBackendError:
            log.record(
                dataset=dataset_name,
                row=record.row_index,
                attempt=attempt,
                latency_ms=(time.monotonic() - started) * 1000.0,
                input_tokens=0,
                output_tokens=0,
                outcome="fatal_error",
            )
            return _RowOutcome(Decision.ERROR, input_tokens, output_tokens)

        input_tokens += result.input_tokens
        output_tokens += result.output_tokens
        decision = parse_decision(result.text)
        log.record(
            dataset=dataset_name,
            row=record.row_index,
            attempt=attempt,
            latency_ms=result.latency_ms,
            input_tokens=result.input_tokens,
            output_tokens=result.output_tokens,
            outcome="ok" if decision in (Decision.INCLUDED, Decision.EXCLUDED) else "unparseable",
        )
        if decision in (Decision.INCLUDED, Decision.EXCLUDED):
            return _RowOutcome(decision, input_tokens, output_tokens)
        if reasked:
            return _RowOutcome(Decision.UNPARSEABLE, input_tokens, output_tokens)
        reasked = True  # ask once more with the very same prompt


def _drain_completed(
    futures: dict[Future, ScreeningRecord], done: set[Future]
) -> Iterable[tuple[ScreeningRecord, _RowOutcome]]:
    # Successes first, so completed rows reach the checkpoint before a crash
    # surfacing in the same batch (e.g. an interrupt) unwinds the coordinator.
    failed = []
    for future in done:
        if future.exception() is None:
            yield futures.pop(future), future.result()
        else:
            failed.append(future)
    for future in failed:
        futures.pop(future)
        future.result()


def run_screening(
    manifest: ScreeningManifest,
    datasets: Mapping[str, list[ScreeningRecord]],
    backend: Backend,
    config: RunConfig,
    output_dir: str | Path,
    run_log_path: str | Path | None = None,
) -> RunReport:
    """Screen every undecided row of every dataset and checkpoint as we go.

    Rows that already carry a model decision are skipped (that is the whole
    resume contract). Results land in ``output_dir/<name>_results.csv``,
    rewritten atomically after every ``checkpoint_every`` completions, so at
    most that many finished rows can be lost to a crash. Output row order is
    input row order regardless of completion order.
    """
    config.validate()
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    limiter = RateLimiter(config.requests_per_minute)
    log = _RunLog(run_log_path)
    report = RunReport()
    run_started = time.monotonic()

    for name, records in datasets.items():
        criteria = manifest.criteria_for(name)
        stats = DatasetStats(rows_total=len(records))
        stats.empty_abstract_count = sum(1 for r in records if not r.abstract)
        pending = [r for r in records if r.model_decision is None]
        stats.rows_skipped_resume = len(records) - len(pending)
        results_path = out_dir / f"{name}_results.csv"
        write_results(records, results_path)

        since_checkpoint = 0
        with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
            futures: dict[Future, ScreeningRecord] = {
                pool.submit(_screen_row, r, criteria, name, backend, config, limiter, log): r
                for r in pending
            }
            try:
                while futures:
                    done, _ = wait(futures, return_when=FIRST_COMPLETED)
                    for record, outcome in _drain_completed(futures, done):
                        record.model_decision = outcome.decision
                        stats.rows_screened += 1
                        if outcome.decision is Decision.INCLUDED:
                            stats.included_count += 1
                        elif outcome.decision is Decision.EXCLUDED:
                            stats.excluded_count += 1
                        elif outcome.decision is Decision.UNPARSEABLE:
                            stats.unparseable_count += 1
                        else:
                            stats.error_count += 1
                        report.input_tokens += outcome.input_tokens
                        report.output_tokens += outcome.output_tokens
                        since_checkpoint += 1
                        if since_checkpoint >= config.checkpoint_every:
                            write_results(records, results_path)
                            since_checkpoint = 0
            except BaseException:
                # Crash or interrupt: stop feeding work, keep the last checkpoint.
                pool.shutdown(wait=True, cancel_futures=True)
                raise

        write_results(records, results_path)
        report.datasets[name] = stats

    report.wall_time_s = time.monotonic() - run_started
    report.estimated_cost = (
        report.input_tokens / 1000.0 * config.price_per_1k_input
        + report.output_tokens / 1000.0 * config.price_per_1k_output
    )
    return report


@dataclass
class ExplainReport:
    mode: PromptKind
    annotated_count: int = 0
    skipped_count: int = 0
    error_count: int = 0
    input_tokens: int = 0
    output_tokens: int = 0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "annotated_count": self.annotated_count,
            "skipped_count": self.skipped_count,
            "error_count": self.error_count,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
        }


def _eligible_for(mode: PromptKind, record: ScreeningRecord) -> bool:
    decided = (Decision.INCLUDED, Decision.EXCLUDED)
    if mode is PromptKind.EXPLAIN:
        return record.model_decision in decided and record.human_decision is not None
    if mode is PromptKind.REFLECT:
        return (
            record.model_decision in decided
            and record.human_decision in decided
            and record.human_decision is not record.model_decision
        )
    raise ValueError(f"mode must be EXPLAIN or REFLECT, got {mode}")


def _annotate_row(
    record: ScreeningRecord,
    criteria: CriteriaSet,
    dataset_name: str,
    mode: PromptKind,
    backend: Backend,
    config: RunConfig,
    limiter: RateLimiter,
    log: _RunLog,
) -> tuple[str | None, int, int]:
    """Fetch one explanation or reflection; returns (text, in_tokens, out_tokens)."""
    build = build_explain_prompt if mode is PromptKind.EXPLAIN else build_reflect_prompt
    request = CompletionRequest(
        model=config.model,
        prompt=build(record, criteria, record.human_decision, record.model_decision),
        temperature=config.temperature,
        max_output_tokens=NARRATIVE_MAX_TOKENS,
        dataset_name=dataset_name,
        row_index=record.row_index,
    )
    attempt = 0
    retries_used = 0
    while True:
        attempt += 1
        limiter.acquire()
        started = time.monotonic()
        try:
            result = backend.complete(request)
        except TransientBackendError:
            log.record(
                dataset=dataset_name,
                row=record.row_index,
                attempt=attempt,
                latency_ms=(time.monotonic() - started) * 1000.0,
                input_tokens=0,
                output_tokens=0,
                outcome="transient_error",
            )
            if retries_used >= config.max_retries:
                return None, 0, 0
            _backoff_sleep(config, retries_used)
            retries_used += 1
            continue
        except FatalBackendError:
            log.record(
                dataset=dataset_name,
                row=record.row_index,
                attempt=attempt,
                latency_ms=(time.monotonic() - started) * 1000.0,
                input_tokens=0,
                output_tokens=0,
                outcome="fatal_error",
            )
            return None, 0, 0
        log.record(
            dataset=dataset_name,
            row=record.row_index,
            attempt=attempt,
            latency_ms=result.latency_ms,
            input_tokens=result.input_tokens,
            output_tokens=result.output_tokens,
            outcome="ok",
        )
        return result.text, result.input_tokens, result.output_tokens


def run_explanations(
    records: Sequence[ScreeningRecord],
    criteria: CriteriaSet,
    backend: Backend,
    config: RunConfig,
    mode: PromptKind,
    dataset_name: str,
    run_log_path: str | Path | None = None,
) -> ExplainReport:
    """Fill ``explanation`` or ``reflection`` on the given records in place.

    EXPLAIN needs a parsed model decision and a recorded human decision;
    REFLECT additionally needs the two to disagree. Rows that do not qualify
    are skipped and counted, never an error.
    """
    if mode not in (PromptKind.EXPLAIN, PromptKind.REFLECT):
        raise ValueError(f"mode must be EXPLAIN or REFLECT, got {mode}")
    config.validate()
    limiter = RateLimiter(config.requests_per_minute)
    log = _RunLog(run_log_path)
    report = ExplainReport(mode=mode)

    eligible = [r for r in records if _eligible_for(mode, r)]
    report.skipped_count = len(records) - len(eligible)
    if not eligible:
        return report

    with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
        futures: dict[Future, ScreeningRecord] = {
            pool.submit(
                _annotate_row, r, criteria, dataset_name, mode, backend, config, limiter, log
            ): r
            for r in eligible
        }
        try:
            while futures:
                done, _ = wait(futures, return_when=FIRST_COMPLETED)
                for future in done:
                    record = futures.pop(future)
                    text, in_tokens, out_tokens = future.result()
                    report.input_tokens += in_tokens
                    report.output_tokens += out_tokens
                    if text is None:
                        report.error_count += 1
                        continue
                    if mode is PromptKind.EXPLAIN:
                        record.explanation = text
                    else:
                        record.reflection = text
                    report.annotated_count += 1
        except BaseException:
            pool.shutdown(wait=True, cancel_futures=True)
            raise
    return report


@dataclass(frozen=True)
class DatasetCostEstimate:
    dataset_name: str
    rows: int
    input_tokens: int
    output_tokens: int
    cost: float

    def to_dict(self) -> dict:
        return {
            "dataset_name": self.dataset_name,
            "rows": self.rows,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "cost": self.cost,
        }


@dataclass(frozen=True)
class CostEstimate:
    per_dataset: tuple[DatasetCostEstimate, ...]
    total_input_tokens: int
    total_output_tokens: int
    cost: float
    projected_wall_time_s: float

    def to_dict(self) -> dict:
        return {
            "per_dataset": [d.to_dict() for d in self.per_dataset],
            "total_input_tokens": self.total_input_tokens,
            "total_output_tokens": self.total_output_tokens,
            "cost": self.cost,
            "projected_wall_time_s": self.projected_wall_time_s,
        }


def _dataset_cost(
    name: str,
    records: Sequence[ScreeningRecord],
    criteria: CriteriaSet,
    config: RunConfig,
) -> DatasetCostEstimate:
    input_tokens = sum(
        count_tokens_estimate(build_decision_prompt(r, criteria).body) for r in records
    )
    output_tokens = len(records)  # one single-word reply per row
    cost = (
        input_tokens / 1000.0 * config.price_per_1k_input
        + output_tokens / 1000.0 * config.price_per_1k_output
    )
    return DatasetCostEstimate(name, len(records), input_tokens, output_tokens, cost)


def estimate_cost(
    manifest: ScreeningManifest,
    datasets: Mapping[str, Sequence[ScreeningRecord]],
    config: RunConfig,
) -> CostEstimate:
    """Project token usage, cost, and wall time for screening ``datasets``.

    Input tokens come from the character-count heuristic over every rendered
    decision prompt; output is one token per row. Projected wall time is a
    lower bound set by the request rate limit alone, ignoring latency.
    """
    config.validate()
    per_dataset = tuple(
        _dataset_cost(name, records, manifest.criteria_for(name), config)
        for name, records in datasets.items()
    )
    total_rows = sum(d.rows for d in per_dataset)
    return CostEstimate(
        per_dataset=per_dataset,
        total_input_tokens=sum(d.input_tokens for d in per_dataset),
        total_output_tokens=sum(d.output_tokens for d in per_dataset),
        cost=sum(d.cost for d in per_dataset),
        projected_wall_time_s=total_rows * 60.0 / config.requests_per_minute,
    )
