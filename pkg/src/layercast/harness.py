"""Configuration sweeps over simulated runtimes, persisted traces and reports.

An arch profile, device count and batch size stand in for GPU type, GPU count
and batch size. The mapping to a reduction schedule is fixed:

* ``split_k`` is the device count,
* ``block_size`` is 32, 64 or 128 for batch 8, 16 or 32,
* ArchA merges partials sequentially, ArchB as a pairwise tree.

ArchA and ArchB therefore differ only in association order, not in any other
microarchitectural effect.
"""

from __future__ import annotations

import asyncio
import hashlib
import itertools
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from datetime import UTC, datetime
from fractions import Fraction
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

from layercast.decoder import WeightSet, decode_batch, init_weights, resident_bytes
from layercast.log import logger
from layercast.metrics import (
    build_report,
    factor_ablation,
    prob_gap_histogram,
    write_ablation_csv,
    write_accuracy_csv,
    write_div_index_csv,
    write_gap_histogram_csv,
    write_summary_csv,
)
from layercast.models import (
    AblationRow,
    ArchProfile,
    CellRecord,
    CombineOrder,
    ConfigRecord,
    DivergenceReport,
    Factor,
    GapHistogram,
    GenerationTrace,
    Manifest,
    PolicyKind,
    PrecisionPolicy,
    ReductionSchedule,
    RunConfig,
    SweepSpec,
)
from layercast.reduction import reduce_permuted
from layercast.rng import SplitMix64
from layercast.settings import Settings
from layercast.softfloat import FloatFormat, ScalarBits, rounding_error
from layercast.trace_store import (
    GOLDEN_PATH,
    TraceStore,
    TraceStoreError,
    encode_reports,
    trace_path,
)

DEVICE_COUNTS = (2, 4)
BATCH_SIZES = (8, 16, 32)
BLOCK_SIZES = {8: 32, 16: 64, 32: 128}
COMBINE_ORDERS = {
    ArchProfile.ARCH_A: CombineOrder.SEQUENTIAL_ASCENDING,
    ArchProfile.ARCH_B: CombineOrder.PAIRWISE_TREE,
}
GOLDEN_POLICY = PrecisionPolicy.of(PolicyKind.REFERENCE_FP64)
GOLDEN_RUN_ID = "golden"

Clock = Callable[[], datetime]


class SelfTestError(RuntimeError):
    """Live arithmetic disagreed with the embedded expected bit patterns."""


def _utc_now() -> datetime:
    return datetime.now(UTC)


def _package_version() -> str:
    try:
        return version("layercast")
    except PackageNotFoundError:
        return "0+unknown"


def schedule_for(config: RunConfig) -> ReductionSchedule:
    return ReductionSchedule(
        split_k=config.device_count,
        block_size=BLOCK_SIZES[config.batch_size],
        combine_order=COMBINE_ORDERS[config.arch_profile],
    )


def all_run_configs(policy: PrecisionPolicy) -> list[RunConfig]:
    """The 2 × 2 × 3 = 12 runtime configurations of one policy."""
    return [
        RunConfig.model_validate(
            {
                "arch_profile": arch,
                "device_count": devices,
                "batch_size": batch,
                "policy": policy,
            }
        )
        for arch, devices, batch in itertools.product(
            ArchProfile, DEVICE_COUNTS, BATCH_SIZES
        )
    ]


def config_hash(config: RunConfig) -> str:
    """Digest of the runtime factors and their schedule; the same for every policy."""
    payload = config.model_dump_json(exclude={"policy"}) + schedule_for(
        config
    ).model_dump_json()
    return hashlib.sha256(payload.encode()).hexdigest()


def generate_prompts(spec: SweepSpec) -> list[list[int]]:
    """The sweep's own prompts, or ``prompt_count`` seeded prompts avoiding the EOS id 0."""
    if spec.prompts is not None:
        return [list(prompt) for prompt in spec.prompts]
    stream = SplitMix64(spec.prompt_seed)
    vocab = spec.model.vocab_size
    return [
        [1 + stream.next() % (vocab - 1) for _ in range(spec.prompt_length)]
        for _ in range(spec.prompt_count)
    ]


def golden_traces(
    spec: SweepSpec, weights: WeightSet, prompts: Sequence[Sequence[int]]
) -> list[GenerationTrace]:
    """Greedy FP64-reference traces under the canonical schedule, one per prompt."""
    return decode_batch(
        weights,
        prompts,
        spec.max_new_tokens,
        GOLDEN_POLICY,
        ReductionSchedule.canonical(),
        top_k=spec.top_k,
        run_config_id=GOLDEN_RUN_ID,
    )


def golden_run(spec: SweepSpec, prompt: Sequence[int]) -> GenerationTrace:
    return golden_traces(spec, init_weights(spec.model), [prompt])[0]


@dataclass(frozen=True, slots=True)
class CellResult:
    config: RunConfig
    greedy: list[GenerationTrace]
    samples: list[GenerationTrace]


def run_cell(
    spec: SweepSpec,
    weights: WeightSet,
    prompts: Sequence[Sequence[int]],
    config: RunConfig,
) -> CellResult:
    """Greedy traces for every prompt, plus ``sample_n`` sampled runs when requested.

    Sampled run ``r`` uses ``rng_seed + r`` in every configuration, so only
    numerics differ between configurations.
    """
    schedule = schedule_for(config)
    label = f"{config.policy.label}/{config.run_config_id}"
    logger.info(f"{label}: decoding {len(prompts)} prompts")
    greedy = decode_batch(
        weights,
        prompts,
        spec.max_new_tokens,
        config.policy,
        schedule,
        top_k=spec.top_k,
        run_config_id=config.run_config_id,
    )
    samples: list[GenerationTrace] = []
    if spec.sampling is not None:
        for run in range(spec.sample_n):
            params = spec.sampling.model_copy(
                update={"rng_seed": spec.sampling.rng_seed + run}
            )
            samples += decode_batch(
                weights,
                prompts,
                spec.max_new_tokens,
                config.policy,
                schedule,
                sampling=params,
                top_k=spec.top_k,
                run_config_id=config.run_config_id,
            )
    return CellResult(config=config, greedy=greedy, samples=samples)


def run_single(spec: SweepSpec, config: RunConfig) -> CellResult:
    return run_cell(spec, init_weights(spec.model), generate_prompts(spec), config)


def _new_manifest(spec: SweepSpec, weights: WeightSet, prompt_count: int, now: Clock) -> Manifest:
    configs = all_run_configs(spec.policies[0])
    return Manifest(
        version=_package_version(),
        created_at=now().isoformat(),
        spec=spec,
        spec_hash=spec.spec_hash(),
        weight_checksum=weights.checksum(),
        prompt_count=prompt_count,
        configs=[
            ConfigRecord(
                run_config_id=config.run_config_id,
                schedule=schedule_for(config),
                config_hash=config_hash(config),
            )
            for config in configs
        ],
        policies=[policy.label for policy in spec.policies],
    )


def _cell_paths(config: RunConfig, sampled: bool) -> list[tuple[str, bool]]:
    paths = [(trace_path(config.policy.label, config.run_config_id), False)]
    if sampled:
        paths.append(
            (trace_path(config.policy.label, config.run_config_id, sampled=True), True)
        )
    return paths


async def run_sweep(
    spec: SweepSpec,
    store: TraceStore,
    *,
    max_concurrent: int = Settings.DEFAULT_MAX_CONCURRENT,
    now: Clock = _utc_now,
) -> dict[str, DivergenceReport]:
    """Run every policy × configuration cell, persist traces, return inline reports.

    The manifest is written before any trace. Cells already recorded under the
    same spec hash with matching file digests are skipped.
    """
    weights = init_weights(spec.model)
    prompts = generate_prompts(spec)
    sampled = spec.sampling is not None and spec.sample_n > 0

    manifest = store.read_manifest()
    if manifest is not None and (
        manifest.spec_hash != spec.spec_hash()
        or manifest.weight_checksum != weights.checksum()
    ):
        logger.warning("Existing manifest belongs to a different sweep; starting over")
        manifest = None
    if manifest is None:
        manifest = _new_manifest(spec, weights, len(prompts), now)
        store.write_manifest(manifest)

    if not store.is_recorded(manifest.golden):
        logger.info(f"Golden run over {len(prompts)} prompts")
        golden = await asyncio.to_thread(golden_traces, spec, weights, prompts)
        manifest = manifest.model_copy(
            update={"golden": store.write_traces(GOLDEN_PATH, golden)}
        )
        store.write_manifest(manifest)

    pending = []
    for policy in spec.policies:
        for config in all_run_configs(policy):
            paths = _cell_paths(config, sampled)
            if all(store.is_recorded(manifest.cells.get(path)) for path, _ in paths):
                logger.debug(f"{policy.label}/{config.run_config_id}: already recorded")
                continue
            pending.append(config)
    logger.info(f"{len(pending)} cells to run, {max_concurrent} at a time")

    semaphore = asyncio.Semaphore(max_concurrent)

    async def run_one(config: RunConfig) -> CellResult:
        async with semaphore:
            return await asyncio.to_thread(run_cell, spec, weights, prompts, config)

    # Only this loop touches the manifest.
    for finished, next_result in enumerate(
        asyncio.as_completed([run_one(config) for config in pending]), 1
    ):
        result = await next_result
        cells = dict(manifest.cells)
        for path, is_sample in _cell_paths(result.config, sampled):
            traces = result.samples if is_sample else result.greedy
            cells[path] = store.write_traces(path, traces)
        manifest = manifest.model_copy(update={"cells": dict(sorted(cells.items()))})
        store.write_manifest(manifest)
        logger.info(
            f"{result.config.policy.label}/{result.config.run_config_id}: "
            f"recorded ({finished}/{len(pending)})"
        )

    reports = analyze(store).reports
    store.write_reports(reports)
    return reports


@dataclass(frozen=True, slots=True)
class Analysis:
    reports: dict[str, DivergenceReport]
    gap_histograms: dict[str, GapHistogram]
    ablation: list[AblationRow]


def analyze(store: TraceStore) -> Analysis:
    """Recompute every metric from persisted traces alone."""
    manifest = store.read_manifest()
    if manifest is None:
        raise TraceStoreError("Missing manifest.json; not a sweep output")
    if manifest.golden is None:
        raise TraceStoreError(f"Missing {GOLDEN_PATH}: the golden run was not recorded")
    spec = manifest.spec
    golden = store.read_traces(GOLDEN_PATH)
    sampled = spec.sampling is not None and spec.sample_n > 0

    reports: dict[str, DivergenceReport] = {}
    histograms: dict[str, GapHistogram] = {}
    ablation: list[AblationRow] = []
    for policy in spec.policies:
        greedy: dict[RunConfig, list[GenerationTrace]] = {}
        samples: dict[str, list[GenerationTrace]] = {}
        for config in all_run_configs(policy):
            for path, is_sample in _cell_paths(config, sampled):
                if manifest.cells.get(path) is None:
                    raise TraceStoreError(
                        f"{policy.label}: traces for {config.run_config_id} "
                        f"are missing ({path})"
                    )
                try:
                    traces = store.read_traces(path)
                except TraceStoreError as error:
                    raise TraceStoreError(
                        f"{policy.label}: traces for {config.run_config_id} "
                        f"are unreadable: {error}"
                    ) from error
                if is_sample:
                    samples[config.run_config_id] = traces
                else:
                    greedy[config] = traces

        reports[policy.label] = build_report(
            policy.label,
            {config.run_config_id: traces for config, traces in greedy.items()},
            golden,
            samples_by_config=samples or None,
            memory=resident_bytes(spec.model, policy),
        )
        histograms[policy.label] = prob_gap_histogram(
            trace for traces in greedy.values() for trace in traces
        )
        for factor in Factor:
            ablation += factor_ablation(policy.label, greedy, factor)
    return Analysis(reports=reports, gap_histograms=histograms, ablation=ablation)


def export_report(analysis: Analysis, out_dir: Path) -> list[Path]:
    """Write ``report.json`` and the CSV tables into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = list(analysis.reports.values())
    written = {
        "summary.csv": lambda path: write_summary_csv(path, reports),
        "accuracy.csv": lambda path: write_accuracy_csv(path, reports),
        "div_index_distribution.csv": lambda path: write_div_index_csv(path, reports),
        "gap_histogram.csv": lambda path: write_gap_histogram_csv(
            path, analysis.gap_histograms
        ),
        "ablation.csv": lambda path: write_ablation_csv(path, analysis.ablation),
    }
    paths = []
    for name, write in written.items():
        write(out_dir / name)
        paths.append(out_dir / name)
    report_path = out_dir / "report.json"
    report_path.write_bytes(encode_reports(analysis.reports))
    paths.append(report_path)
    logger.info(f"Exported {len(paths)} files to {out_dir}")
    return paths


# Arithmetic self-test: literal operands, orders and the bit patterns they must produce.
_ROUNDING_LITERAL = "1.00012"
_ROUNDING_EXPECTED = {
    FloatFormat.FP32: "00111111100000000000001111101111",
    FloatFormat.FP16: "0011110000000000",
    FloatFormat.BF16: "0011111110000000",
}
_FP32_DECIMAL_PREFIX = "1.0001200437545776"
_FP32_ERROR = 1 + Fraction(1007, 2**23) - Fraction(_ROUNDING_LITERAL)
_NONASSOC_CASES = [
    (
        ("0.1", "-0.1", "0.2"),
        {
            FloatFormat.FP32: (
                "00111110010011001100110011001101",
                "00111110010011001100110011001110",
            ),
            FloatFormat.BF16: ("0011111001001101", "0011111001001110"),
        },
    ),
    (
        ("0.0016", "0.0027", "1.0"),
        {
            FloatFormat.FP32: (
                "00111111100000001000110011100111",
                "00111111100000001000110011100111",
            ),
            FloatFormat.BF16: ("0011111110000001", "0011111110000000"),
        },
    ),
]
_ORDERS = ((0, 1, 2), (0, 2, 1))


def demo_nonassoc() -> str:
    """Render rounding and non-associativity demonstrations, checking every bit pattern.

    Raises :class:`SelfTestError` listing each mismatch.
    """
    lines = [f"Rounding {_ROUNDING_LITERAL}:"]
    mismatches = []
    for fmt, expected in _ROUNDING_EXPECTED.items():
        value = ScalarBits.parse(_ROUNDING_LITERAL, fmt)
        error = rounding_error(value, _ROUNDING_LITERAL)
        lines.append(
            f"  {fmt.value:<5} {value.bit_string():>32}  "
            f"{value.decimal():.25f}  error {float(error):+.6e}"
        )
        if value.bit_string() != expected:
            mismatches.append(f"{fmt.value}({_ROUNDING_LITERAL}) = {value.bit_string()}, expected {expected}")
        if fmt is FloatFormat.FP32:
            if not str(value.decimal()).startswith(_FP32_DECIMAL_PREFIX):
                mismatches.append(f"fp32({_ROUNDING_LITERAL}) decimal {value.decimal()}")
            if abs(error - _FP32_ERROR) > abs(_FP32_ERROR) / 1000:
                mismatches.append(f"fp32({_ROUNDING_LITERAL}) error {float(error):e}")
        elif value.exact() != 1:
            mismatches.append(f"{fmt.value}({_ROUNDING_LITERAL}) is not exactly 1")

    for literals, expectations in _NONASSOC_CASES:
        lines.append(f"Sum of {', '.join(literals)}:")
        for fmt, expected in expectations.items():
            values = [ScalarBits.parse(literal, fmt) for literal in literals]
            for order, want in zip(_ORDERS, expected, strict=True):
                got = reduce_permuted(values, order, fmt)
                names = "+".join("abc"[index] for index in order)
                lines.append(
                    f"  {fmt.value:<5} {names}  {got.bit_string():>32}  {float(got.value)!r}"
                )
                if got.bit_string() != want:
                    mismatches.append(
                        f"{fmt.value} {names} over {literals} = {got.bit_string()}, expected {want}"
                    )

    report = "\n".join(lines)
    if mismatches:
        raise SelfTestError("Self-test mismatch:\n  " + "\n  ".join(mismatches))
    return report
