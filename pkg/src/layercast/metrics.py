"""Reproducibility metrics over generation traces.

Every standard deviation is the sample (n-1) form. Means and deviations go
through :mod:`statistics`, whose exact summation makes each metric invariant to
the order configurations or traces are supplied in.
"""

from __future__ import annotations

import csv
import statistics
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np

from layercast.models import (
    NO_DIVERGENCE,
    AblationRow,
    DivergenceReport,
    Factor,
    GapHistogram,
    GenerationTrace,
    MemoryFootprint,
    PassAtOne,
    RunConfig,
)

DEFAULT_GAP_EDGES = tuple(i / 10 for i in range(11))

TraceSet = Sequence[GenerationTrace]


def sample_std(values: Iterable[float]) -> float:
    data = [float(value) for value in values]
    if len(data) < 2:
        raise ValueError(f"Sample standard deviation needs at least 2 values, got {len(data)}")
    return statistics.stdev(data)


def div_index(traces: TraceSet) -> int | None:
    """First position where any two traces disagree; ``None`` if all are identical.

    A trace that is a strict prefix of another diverges at its own length.
    """
    if len(traces) < 2:
        raise ValueError(f"div_index needs at least 2 traces, got {len(traces)}")
    if len({tuple(trace.prompt) for trace in traces}) > 1:
        raise ValueError("div_index traces must share one prompt")
    sequences = [trace.tokens for trace in traces]
    shortest = min(len(tokens) for tokens in sequences)
    for position in range(shortest):
        if len({tokens[position] for tokens in sequences}) > 1:
            return position
    if any(len(tokens) != shortest for tokens in sequences):
        return shortest
    return None


def _check_trace_sets(trace_sets: Sequence[TraceSet]) -> None:
    if not trace_sets:
        raise ValueError("No examples to aggregate")
    counts = {len(traces) for traces in trace_sets}
    if len(counts) != 1:
        raise ValueError(f"Examples carry different trace counts: {sorted(counts)}")
    if counts.pop() < 2:
        raise ValueError("Each example needs at least 2 traces")


def _example_std_top1(traces: TraceSet) -> float | None:
    divergence = div_index(traces)
    span = (
        min(trace.length for trace in traces) if divergence is None else divergence
    )
    if span == 0:
        return None
    return statistics.fmean(
        sample_std(trace.top1_prob[position] for trace in traces)
        for position in range(span)
    )


def avg_std_top1_prob(trace_sets: Sequence[TraceSet]) -> float:
    """Cross-config std of the top-1 probability, averaged over the shared prefix.

    Examples that diverge at position 0 contribute no positions and are left
    out of the example average.
    """
    _check_trace_sets(trace_sets)
    per_example = [
        std
        for traces in trace_sets
        if (std := _example_std_top1(traces)) is not None
    ]
    return statistics.fmean(per_example) if per_example else 0.0


def avg_std_output_length(trace_sets: Sequence[TraceSet]) -> float:
    _check_trace_sets(trace_sets)
    return statistics.fmean(
        sample_std(trace.length for trace in traces) for traces in trace_sets
    )


def std_acc(accuracies: Sequence[float]) -> float:
    return sample_std(accuracies)


def div_percent(trace_sets: Sequence[TraceSet]) -> float:
    _check_trace_sets(trace_sets)
    divergent = sum(1 for traces in trace_sets if div_index(traces) is not None)
    return divergent / len(trace_sets)


def pass_at_1(correctness: Mapping[str, Sequence[bool]]) -> PassAtOne:
    """Mean over runs per config, and the sample std of those means across configs."""
    if len(correctness) < 2:
        raise ValueError("pass_at_1 needs at least 2 configs")
    run_counts = {len(runs) for runs in correctness.values()}
    if len(run_counts) != 1 or 0 in run_counts:
        raise ValueError(f"pass_at_1 needs equal, nonzero run counts, got {sorted(run_counts)}")
    means = {
        config: statistics.fmean(float(correct) for correct in runs)
        for config, runs in sorted(correctness.items())
    }
    return PassAtOne(means=means, std=sample_std(means.values()))


def prob_gap_histogram(
    traces: Iterable[GenerationTrace],
    edges: Sequence[float] = DEFAULT_GAP_EDGES,
) -> GapHistogram:
    """Histogram of per-step ``top1 - top2`` probability gaps over ``[0, 1]``."""
    if len(edges) < 2 or edges[0] != 0.0 or edges[-1] != 1.0:
        raise ValueError("Gap histogram edges must run from 0 to 1")
    if any(low >= high for low, high in zip(edges, edges[1:], strict=False)):
        raise ValueError("Gap histogram edges must be strictly increasing")
    gaps = []
    for trace in traces:
        for step in trace.topk:
            if len(step) < 2:
                raise ValueError(
                    f"{trace.run_config_id}: gap analysis needs top-k with k >= 2"
                )
            gaps.append(min(max(step[0].prob - step[1].prob, 0.0), 1.0))
    counts, _ = np.histogram(np.asarray(gaps, dtype=np.float64), bins=np.asarray(edges))
    return GapHistogram(edges=list(edges), counts=[int(count) for count in counts])


def div_index_distribution(div_indices: Iterable[int]) -> dict[int, int]:
    """Count of examples per Div_Index value (``-1`` for no divergence)."""
    return dict(sorted(Counter(div_indices).items()))


def _trace_sets(traces_by_config: Mapping[str, TraceSet]) -> list[tuple[GenerationTrace, ...]]:
    counts = {len(traces) for traces in traces_by_config.values()}
    if len(counts) != 1:
        raise ValueError(f"Configs carry different example counts: {sorted(counts)}")
    return list(zip(*(traces_by_config[key] for key in sorted(traces_by_config)), strict=True))


def factor_ablation(
    policy: str,
    traces_by_config: Mapping[RunConfig, TraceSet],
    vary: Factor,
) -> list[AblationRow]:
    """Group configs by every factor except ``vary`` and measure the spread inside each group."""
    held = [factor for factor in Factor if factor is not vary]
    groups: dict[tuple[str, ...], list[RunConfig]] = {}
    for config in traces_by_config:
        key = tuple(str(getattr(config, factor.value)) for factor in held)
        groups.setdefault(key, []).append(config)

    rows = []
    for key, configs in sorted(groups.items()):
        if len(configs) < 2:
            continue
        ordered = sorted(configs, key=lambda config: config.run_config_id)
        trace_sets = _trace_sets(
            {config.run_config_id: traces_by_config[config] for config in ordered}
        )
        rows.append(
            AblationRow(
                policy=policy,
                vary=vary,
                fixed="-".join(
                    f"{factor.value}={value}"
                    for factor, value in zip(held, key, strict=True)
                ),
                run_config_ids=[config.run_config_id for config in ordered],
                div_percent=div_percent(trace_sets),
                avg_std_top1_prob=avg_std_top1_prob(trace_sets),
            )
        )
    return rows


def _final_token(trace: GenerationTrace) -> int | None:
    return trace.tokens[-1] if trace.tokens else None


def accuracy(traces: TraceSet, golden: TraceSet) -> float:
    """Fraction of examples whose final token matches the golden run's final token."""
    if len(traces) != len(golden):
        raise ValueError(f"{len(traces)} traces against {len(golden)} golden traces")
    if not traces:
        raise ValueError("No examples to score")
    return statistics.fmean(
        float(_final_token(trace) == _final_token(reference))
        for trace, reference in zip(traces, golden, strict=True)
    )


def build_report(
    policy: str,
    traces_by_config: Mapping[str, TraceSet],
    golden: TraceSet,
    *,
    samples_by_config: Mapping[str, TraceSet] | None = None,
    memory: MemoryFootprint | None = None,
) -> DivergenceReport:
    """All reproducibility metrics of one policy.

    ``samples_by_config`` holds sampled traces in run-major order (every prompt
    of run 0, then run 1, ...); each is scored against the golden trace of its
    prompt.
    """
    if len(traces_by_config) < 2:
        raise ValueError(f"{policy}: a report needs at least 2 configs")
    trace_sets = _trace_sets(traces_by_config)
    indices = [div_index(traces) for traces in trace_sets]
    divergent = [index for index in indices if index is not None]
    accuracies = {
        config: accuracy(traces_by_config[config], golden)
        for config in sorted(traces_by_config)
    }

    pass_at_one = None
    if samples_by_config:
        correctness = {}
        for config, samples in samples_by_config.items():
            if len(samples) % len(golden):
                raise ValueError(
                    f"{policy}/{config}: {len(samples)} samples do not cover "
                    f"{len(golden)} prompts evenly"
                )
            correctness[config] = [
                _final_token(sample) == _final_token(golden[index % len(golden)])
                for index, sample in enumerate(samples)
            ]
        pass_at_one = pass_at_1(correctness)

    return DivergenceReport(
        policy=policy,
        n_configs=len(traces_by_config),
        n_examples=len(trace_sets),
        div_index=statistics.fmean(divergent) if divergent else float(NO_DIVERGENCE),
        div_indices=[NO_DIVERGENCE if index is None else index for index in indices],
        div_percent=len(divergent) / len(trace_sets),
        avg_std_top1_prob=avg_std_top1_prob(trace_sets),
        avg_std_output_length=avg_std_output_length(trace_sets),
        accuracies=accuracies,
        std_acc=std_acc(list(accuracies.values())),
        pass_at_1=pass_at_one,
        memory=memory,
    )


def _write_csv(path: Path, fields: Sequence[str], rows: Iterable[Mapping[str, object]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as file:
        writer = csv.DictWriter(file, fieldnames=list(fields))
        writer.writeheader()
        writer.writerows(rows)


def write_summary_csv(path: Path, reports: Sequence[DivergenceReport]) -> None:
    """``policy,n_configs,n_examples,div_index,div_percent,avg_std_top1_prob,avg_std_output_length,std_acc``"""
    fields = (
        "policy",
        "n_configs",
        "n_examples",
        "div_index",
        "div_percent",
        "avg_std_top1_prob",
        "avg_std_output_length",
        "std_acc",
    )
    _write_csv(path, fields, (report.model_dump(include=set(fields)) for report in reports))


def write_accuracy_csv(path: Path, reports: Sequence[DivergenceReport]) -> None:
    """``policy,run_config_id,accuracy,pass_at_1``; pass_at_1 is empty without sampling."""
    rows = []
    for report in reports:
        means = report.pass_at_1.means if report.pass_at_1 else {}
        rows += [
            {
                "policy": report.policy,
                "run_config_id": config,
                "accuracy": value,
                "pass_at_1": means.get(config, ""),
            }
            for config, value in report.accuracies.items()
        ]
    _write_csv(path, ("policy", "run_config_id", "accuracy", "pass_at_1"), rows)


def write_div_index_csv(path: Path, reports: Sequence[DivergenceReport]) -> None:
    """``policy,div_index,examples``: the Div_Index distribution of each policy."""
    rows = [
        {"policy": report.policy, "div_index": index, "examples": count}
        for report in reports
        for index, count in div_index_distribution(report.div_indices).items()
    ]
    _write_csv(path, ("policy", "div_index", "examples"), rows)


def write_gap_histogram_csv(path: Path, histograms: Mapping[str, GapHistogram]) -> None:
    """``policy,bin_low,bin_high,steps``"""
    rows = [
        {"policy": policy, "bin_low": low, "bin_high": high, "steps": count}
        for policy, histogram in histograms.items()
        for low, high, count in zip(
            histogram.edges, histogram.edges[1:], histogram.counts, strict=False
        )
    ]
    _write_csv(path, ("policy", "bin_low", "bin_high", "steps"), rows)


def write_ablation_csv(path: Path, rows: Sequence[AblationRow]) -> None:
    """``policy,vary,fixed,run_config_ids,div_percent,avg_std_top1_prob``"""
    _write_csv(
        path,
        ("policy", "vary", "fixed", "run_config_ids", "div_percent", "avg_std_top1_prob"),
        (
            row.model_dump(mode="json") | {"run_config_ids": " ".join(row.run_config_ids)}
            for row in rows
        ),
    )
