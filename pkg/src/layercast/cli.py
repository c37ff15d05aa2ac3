from __future__ import annotations

import asyncio
import os
from pathlib import Path
from typing import Annotated

import typer
from pydantic import ValidationError

from layercast.log import logger, setup_logging
from layercast.models import (
    ArchProfile,
    PolicyKind,
    PrecisionPolicy,
    RunConfig,
    SamplingMode,
    SamplingParams,
    SweepSpec,
)
from layercast.settings import Settings
from layercast.softfloat import FloatFormat
from layercast.sweeps import load_prompts, load_sweep_spec
from layercast.trace_store import DirectoryTraceStore, TraceStoreError, trace_path

app = typer.Typer(help="LayerCast: floating-point reproducibility lab for LLM inference")

EXIT_USAGE = 1
EXIT_SELF_TEST = 2
EXIT_IO = 3

# Base of the usage errors typer raises, from click or its vendored copy.
UsageErrorBase: type[Exception] = next(
    cls for cls in typer.BadParameter.__mro__ if cls.__name__ == "ClickException"
)

SpecOption = Annotated[
    Path | None,
    typer.Option("--spec", help="Sweep spec file (.json or .toml); flags below override it"),
]
OutOption = Annotated[
    Path | None,
    typer.Option("--out", help="Output directory (default: $LAYERCAST_OUTPUT_DIR or runs)"),
]
SeedOption = Annotated[int | None, typer.Option("--seed", help="Weight seed")]
PromptSeedOption = Annotated[
    int | None, typer.Option("--prompt-seed", help="Seed for generated prompts")
]
PromptsOption = Annotated[
    Path | None,
    typer.Option("--prompts", help="Prompt file (.json list of lists, or one prompt per line)"),
]
MaxNewTokensOption = Annotated[
    int | None, typer.Option("--max-new-tokens", help="Tokens generated per prompt")
]
SampleNOption = Annotated[
    int | None, typer.Option("--sample-n", help="Seeded top-p runs per configuration")
]
TemperatureOption = Annotated[
    float, typer.Option("--temperature", help="Sampling temperature")
]
TopPOption = Annotated[float, typer.Option("--top-p", help="Nucleus mass")]
KvOption = Annotated[
    FloatFormat | None,
    typer.Option("--kv-cache-storage", help="Override KV-cache storage format"),
]
LogLevelOption = Annotated[
    str | None, typer.Option("--log-level", help="Log level (default: INFO)")
]


def _settings(out: Path | None, log_level: str | None) -> Settings:
    settings = Settings.from_sources(env=os.environ, output_dir=out, log_level=log_level)
    setup_logging(settings.log_level)
    return settings


def _sweep_spec(
    settings: Settings,
    *,
    out: Path | None,
    spec_path: Path | None,
    policies: list[PolicyKind] | None,
    kv_cache_storage: FloatFormat | None,
    seed: int | None,
    prompt_seed: int | None,
    prompts: Path | None,
    max_new_tokens: int | None,
    sample_n: int | None,
    temperature: float,
    top_p: float,
) -> SweepSpec:
    spec = load_sweep_spec(spec_path) if spec_path else None
    base = (
        spec.model_dump()
        if spec
        else {
            "prompt_count": settings.prompt_count,
            "prompt_length": settings.prompt_length,
            "max_new_tokens": settings.max_new_tokens,
            "top_k": settings.top_k,
        }
    )
    if seed is not None:
        base["model"] = {**base.get("model", {}), "weight_seed": seed}
    if prompt_seed is not None:
        base["prompt_seed"] = prompt_seed
    if prompts is not None:
        base["prompts"] = load_prompts(prompts)
    if max_new_tokens is not None:
        base["max_new_tokens"] = max_new_tokens
    if policies:
        base["policies"] = [
            PrecisionPolicy.of(kind, kv_cache_storage=kv_cache_storage) for kind in policies
        ]
    elif kv_cache_storage is not None:
        base["policies"] = [
            PrecisionPolicy.of(policy.kind, kv_cache_storage=kv_cache_storage)
            for policy in SweepSpec.model_validate(base).policies
        ]
    if sample_n is not None:
        base["sample_n"] = sample_n
        if sample_n and base.get("sampling") is None:
            base["sampling"] = SamplingParams(
                mode=SamplingMode.TOP_P, temperature=temperature, top_p=top_p
            )
    if out is not None or spec is None:
        base["output_dir"] = settings.output_dir
    return SweepSpec.model_validate(base)


@app.command("demo-nonassoc")
def demo_nonassoc_command(log_level: LogLevelOption = None) -> None:
    """Show live rounding and summation-order bit patterns and check them."""
    from layercast.harness import demo_nonassoc

    _settings(None, log_level)
    typer.echo(demo_nonassoc())


@app.command()
def run(
    policy: Annotated[PolicyKind, typer.Option("--policy", help="Precision policy")] = (
        PolicyKind.LAYERCAST
    ),
    arch: Annotated[ArchProfile, typer.Option("--arch", help="Arch profile")] = (
        ArchProfile.ARCH_A
    ),
    devices: Annotated[int, typer.Option("--devices", help="Device count (2 or 4)")] = 2,
    batch_size: Annotated[
        int, typer.Option("--batch-size", help="Batch size (8, 16 or 32)")
    ] = 8,
    spec_path: SpecOption = None,
    out: OutOption = None,
    seed: SeedOption = None,
    prompt_seed: PromptSeedOption = None,
    prompts: PromptsOption = None,
    max_new_tokens: MaxNewTokensOption = None,
    sample_n: SampleNOption = None,
    temperature: TemperatureOption = 0.7,
    top_p: TopPOption = 0.95,
    kv_cache_storage: KvOption = None,
    log_level: LogLevelOption = None,
) -> None:
    """Decode every prompt under one runtime configuration."""
    from layercast.harness import run_single

    settings = _settings(out, log_level)
    spec = _sweep_spec(
        settings,
        spec_path=spec_path,
        out=out,
        policies=[policy],
        kv_cache_storage=kv_cache_storage,
        seed=seed,
        prompt_seed=prompt_seed,
        prompts=prompts,
        max_new_tokens=max_new_tokens,
        sample_n=sample_n,
        temperature=temperature,
        top_p=top_p,
    )
    config = RunConfig.model_validate(
        {
            "arch_profile": arch,
            "device_count": devices,
            "batch_size": batch_size,
            "policy": spec.policies[0],
        }
    )
    result = run_single(spec, config)
    store = DirectoryTraceStore(spec.output_dir)
    label = config.policy.label
    store.write_traces(trace_path(label, config.run_config_id), result.greedy)
    if result.samples:
        store.write_traces(
            trace_path(label, config.run_config_id, sampled=True), result.samples
        )
    typer.echo(
        f"{label}/{config.run_config_id}: {len(result.greedy)} greedy, "
        f"{len(result.samples)} sampled traces → {spec.output_dir}"
    )


@app.command()
def sweep(
    policy: Annotated[
        list[PolicyKind] | None,
        typer.Option("--policy", help="Precision policy (repeatable; default: bf16 fp16 fp32 layercast)"),
    ] = None,
    spec_path: SpecOption = None,
    out: OutOption = None,
    seed: SeedOption = None,
    prompt_seed: PromptSeedOption = None,
    prompts: PromptsOption = None,
    max_new_tokens: MaxNewTokensOption = None,
    sample_n: SampleNOption = None,
    temperature: TemperatureOption = 0.7,
    top_p: TopPOption = 0.95,
    kv_cache_storage: KvOption = None,
    max_concurrent: Annotated[
        int | None, typer.Option("--max-concurrent", help="Cells decoded at once")
    ] = None,
    log_level: LogLevelOption = None,
) -> None:
    """Run the full policy × 12-configuration sweep (resumable)."""
    from layercast.harness import run_sweep

    settings = Settings.from_sources(
        env=os.environ, output_dir=out, log_level=log_level, max_concurrent=max_concurrent
    )
    setup_logging(settings.log_level)
    spec = _sweep_spec(
        settings,
        spec_path=spec_path,
        out=out,
        policies=policy,
        kv_cache_storage=kv_cache_storage,
        seed=seed,
        prompt_seed=prompt_seed,
        prompts=prompts,
        max_new_tokens=max_new_tokens,
        sample_n=sample_n,
        temperature=temperature,
        top_p=top_p,
    )
    store = DirectoryTraceStore(spec.output_dir)
    reports = asyncio.run(
        run_sweep(spec, store, max_concurrent=settings.max_concurrent)
    )
    for label, report in reports.items():
        typer.echo(
            f"{label:<16} div_percent={report.div_percent:.3f} "
            f"div_index={report.div_index:.2f} "
            f"avg_std_top1_prob={report.avg_std_top1_prob:.3e} "
            f"std_acc={report.std_acc:.4f}"
        )


@app.command()
def analyze(
    trace_dir: Annotated[Path, typer.Argument(help="Directory written by `sweep`")],
    export: Annotated[
        Path | None,
        typer.Option("--export", help="Directory for CSV/JSON exports (default: <trace_dir>/analysis)"),
    ] = None,
    log_level: LogLevelOption = None,
) -> None:
    """Recompute every metric from persisted traces only."""
    from layercast.harness import analyze as analyze_traces
    from layercast.harness import export_report

    _settings(None, log_level)
    analysis = analyze_traces(DirectoryTraceStore(trace_dir))
    paths = export_report(analysis, export or trace_dir / "analysis")
    typer.echo(f"Analyzed {len(analysis.reports)} policies; wrote {len(paths)} files")


@app.command()
def report(
    trace_dir: Annotated[Path, typer.Argument(help="Directory written by `sweep`")],
    output: Annotated[
        Path | None, typer.Option("--output", help="Write the reports JSON here instead of stdout")
    ] = None,
    log_level: LogLevelOption = None,
) -> None:
    """Print (or export) the reports recorded by a sweep."""
    from layercast.trace_store import encode_reports

    _settings(None, log_level)
    payload = encode_reports(DirectoryTraceStore(trace_dir).read_reports())
    if output is None:
        typer.echo(payload.decode())
        return
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_bytes(payload)
    typer.echo(f"Wrote reports → {output}")


def main() -> None:
    """Console entry point: 0 success, 1 usage, 2 self-test mismatch, 3 I/O."""
    from layercast.harness import SelfTestError

    try:
        code = app(standalone_mode=False)
    except typer.Abort:
        code = EXIT_USAGE
    except UsageErrorBase as error:
        typer.echo(f"Error: {error}", err=True)
        code = EXIT_USAGE
    except SelfTestError as error:
        logger.error(str(error))
        typer.echo(str(error), err=True)
        code = EXIT_SELF_TEST
    except (TraceStoreError, OSError) as error:
        logger.error(str(error))
        typer.echo(f"I/O error: {error}", err=True)
        code = EXIT_IO
    except (ValidationError, ValueError) as error:
        typer.echo(f"Invalid input: {error}", err=True)
        code = EXIT_USAGE
    raise SystemExit(code if isinstance(code, int) else 0)
