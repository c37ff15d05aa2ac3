from __future__ import annotations

import hashlib
from enum import StrEnum
from pathlib import Path
from typing import Annotated, Literal, Self

import numpy as np
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    model_validator,
)

from layercast.softfloat import FloatFormat

NO_DIVERGENCE = -1
UNBLOCKED = 2**31 - 1


def _fp32_to_json(value: float) -> dict[str, str | float]:
    narrow = np.float32(value)
    return {"hex": f"0x{int(narrow.view(np.uint32)):08x}", "decimal": float(narrow)}


def _fp32_from_json(value: object) -> object:
    if isinstance(value, dict) and "hex" in value:
        return float(np.uint32(int(value["hex"], 16)).view(np.float32))
    return value


# FP32 probabilities travel as exact bit patterns; the decimal is for humans.
Fp32 = Annotated[
    float,
    BeforeValidator(_fp32_from_json),
    PlainSerializer(_fp32_to_json, return_type=dict),
]


class CombineOrder(StrEnum):
    SEQUENTIAL_ASCENDING = "SequentialAscending"
    SEQUENTIAL_DESCENDING = "SequentialDescending"
    PAIRWISE_TREE = "PairwiseTree"


class ReductionSchedule(BaseModel):
    """Association order of a sum: optional shuffle, split-K chunks, blocks, merge order."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    split_k: int = Field(default=1, ge=1)
    block_size: int = Field(default=UNBLOCKED, ge=1)
    combine_order: CombineOrder = CombineOrder.SEQUENTIAL_ASCENDING
    permutation_seed: int | None = Field(default=None, ge=0, lt=2**64)

    @classmethod
    def canonical(cls) -> ReductionSchedule:
        return cls()

    def is_canonical_for(self, n: int) -> bool:
        return (
            self.split_k == 1
            and self.block_size >= n
            and self.combine_order is CombineOrder.SEQUENTIAL_ASCENDING
            and self.permutation_seed is None
        )


class PolicyKind(StrEnum):
    PURE_BF16 = "bf16"
    PURE_FP16 = "fp16"
    PURE_FP32 = "fp32"
    LAYERCAST = "layercast"
    REFERENCE_FP64 = "fp64ref"


_STORAGE = {
    PolicyKind.PURE_BF16: FloatFormat.BF16,
    PolicyKind.PURE_FP16: FloatFormat.FP16,
    PolicyKind.PURE_FP32: FloatFormat.FP32,
    PolicyKind.LAYERCAST: FloatFormat.BF16,
    PolicyKind.REFERENCE_FP64: FloatFormat.FP64REF,
}
_COMPUTE = {
    PolicyKind.PURE_BF16: FloatFormat.BF16,
    PolicyKind.PURE_FP16: FloatFormat.FP16,
    PolicyKind.PURE_FP32: FloatFormat.FP32,
    PolicyKind.LAYERCAST: FloatFormat.FP32,
    PolicyKind.REFERENCE_FP64: FloatFormat.FP64REF,
}


class PrecisionPolicy(BaseModel):
    """How weights are stored, how arithmetic is done and how the KV cache is kept.

    ``kv_cache_storage`` defaults to the compute format for pure policies and to
    BF16 for LayerCast.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: PolicyKind
    kv_cache_storage: FloatFormat | None = None

    @classmethod
    def of(cls, kind: PolicyKind | str, *, kv_cache_storage: FloatFormat | None = None) -> Self:
        return cls(kind=PolicyKind(kind), kv_cache_storage=kv_cache_storage)

    @property
    def weight_storage(self) -> FloatFormat:
        return _STORAGE[self.kind]

    @property
    def compute_format(self) -> FloatFormat:
        return _COMPUTE[self.kind]

    @property
    def kv_storage(self) -> FloatFormat:
        if self.kv_cache_storage is not None:
            return self.kv_cache_storage
        if self.kind is PolicyKind.LAYERCAST:
            return FloatFormat.BF16
        return self.compute_format

    @property
    def label(self) -> str:
        if self.kv_cache_storage is None:
            return self.kind.value
        return f"{self.kind.value}-kv{self.kv_cache_storage.value}"


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    vocab_size: int = Field(default=256, ge=2)
    d_model: int = Field(default=64, ge=1)
    n_heads: int = Field(default=4, ge=1)
    n_layers: int = Field(default=2, ge=1)
    d_ff: int = Field(default=128, ge=1)
    max_seq_len: int = Field(default=256, ge=1)
    weight_seed: int = Field(default=42, ge=0, lt=2**64)
    use_kv_cache: bool = True

    @model_validator(mode="after")
    def _heads_divide_model(self) -> Self:
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class SamplingMode(StrEnum):
    GREEDY = "Greedy"
    TOP_P = "TopP"


class SamplingParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: SamplingMode = SamplingMode.TOP_P
    temperature: float = Field(default=0.7, gt=0)
    top_p: float = Field(default=0.95, gt=0, le=1)
    rng_seed: int = Field(default=0, ge=0, lt=2**64)


class TokenProb(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    token: int = Field(ge=0)
    prob: Fp32


class GenerationTrace(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    run_config_id: str
    prompt: list[int]
    tokens: list[int]
    top1_prob: list[Fp32]
    topk: list[list[TokenProb]]
    length: int = Field(ge=0)

    @model_validator(mode="after")
    def _consistent(self) -> Self:
        if not (self.length == len(self.tokens) == len(self.top1_prob) == len(self.topk)):
            raise ValueError(
                f"{self.run_config_id}: length, tokens, top1_prob and topk disagree"
            )
        if any(not 0.0 <= prob <= 1.0 for prob in self.top1_prob):
            raise ValueError(f"{self.run_config_id}: top1_prob outside [0, 1]")
        for step in self.topk:
            probs = [entry.prob for entry in step]
            if probs != sorted(probs, reverse=True):
                raise ValueError(f"{self.run_config_id}: topk not sorted descending")
        return self


class ArchProfile(StrEnum):
    ARCH_A = "ArchA"
    ARCH_B = "ArchB"


class RunConfig(BaseModel):
    """One simulated runtime configuration (stand-in for GPU type, GPU count, batch size)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    arch_profile: ArchProfile
    device_count: Literal[2, 4]
    batch_size: Literal[8, 16, 32]
    policy: PrecisionPolicy

    @property
    def run_config_id(self) -> str:
        return f"{self.arch_profile.value}-d{self.device_count}-b{self.batch_size}"


class SweepSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    prompts: list[list[int]] | None = None
    prompt_seed: int = Field(default=42, ge=0, lt=2**64)
    prompt_count: int = Field(default=100, ge=1)
    prompt_length: int = Field(default=8, ge=1)
    max_new_tokens: int = Field(default=16, ge=1)
    policies: list[PrecisionPolicy] = Field(
        default_factory=lambda: [
            PrecisionPolicy.of(kind)
            for kind in (
                PolicyKind.PURE_BF16,
                PolicyKind.PURE_FP16,
                PolicyKind.PURE_FP32,
                PolicyKind.LAYERCAST,
            )
        ],
        min_length=1,
    )
    sampling: SamplingParams | None = None
    sample_n: int = Field(default=0, ge=0)
    top_k: int = Field(default=5, ge=2)
    output_dir: Path = Path("runs")

    @model_validator(mode="after")
    def _valid(self) -> Self:
        if self.prompts is not None and not self.prompts:
            raise ValueError("SweepSpec prompts must not be empty")
        if self.prompts is not None and any(not prompt for prompt in self.prompts):
            raise ValueError("SweepSpec prompts must not contain empty sequences")
        if self.sample_n and self.sampling is None:
            raise ValueError("SweepSpec sample_n requires sampling parameters")
        labels = [policy.label for policy in self.policies]
        if len(set(labels)) != len(labels):
            raise ValueError(f"SweepSpec policies must be distinct, got {labels}")
        return self

    def spec_hash(self) -> str:
        """SHA-256 of everything that determines trace bytes (output_dir excluded)."""
        payload = self.model_dump_json(exclude={"output_dir"})
        return hashlib.sha256(payload.encode()).hexdigest()


class PassAtOne(BaseModel):
    means: dict[str, float]
    std: float = Field(ge=0)


class MemoryFootprint(BaseModel):
    weight_bytes: int = Field(ge=0)
    kv_bytes_per_token: int = Field(ge=0)


class DivergenceReport(BaseModel):
    """Reproducibility metrics of one policy over all configurations and examples.

    ``div_index`` averages only divergent examples; ``-1`` means none diverged.
    """

    policy: str
    n_configs: int = Field(ge=0)
    n_examples: int = Field(ge=0)
    div_index: float
    div_indices: list[int]
    div_percent: float = Field(ge=0, le=1)
    avg_std_top1_prob: float = Field(ge=0)
    avg_std_output_length: float = Field(ge=0)
    accuracies: dict[str, float] = Field(default_factory=dict)
    std_acc: float = Field(default=0.0, ge=0)
    pass_at_1: PassAtOne | None = None
    memory: MemoryFootprint | None = None


class CellRecord(BaseModel):
    path: str
    sha256: str
    traces: int = Field(ge=0)


class ConfigRecord(BaseModel):
    run_config_id: str
    schedule: ReductionSchedule
    config_hash: str


class Manifest(BaseModel):
    version: str
    created_at: str
    spec: SweepSpec
    spec_hash: str
    weight_checksum: str
    prompt_count: int
    configs: list[ConfigRecord]
    policies: list[str]
    golden: CellRecord | None = None
    cells: dict[str, CellRecord] = Field(default_factory=dict)


class Factor(StrEnum):
    ARCH = "arch_profile"
    DEVICES = "device_count"
    BATCH = "batch_size"


class AblationRow(BaseModel):
    """Spread across the values of one factor with the other two held fixed."""

    policy: str
    vary: Factor
    fixed: str
    run_config_ids: list[str]
    div_percent: float = Field(ge=0, le=1)
    avg_std_top1_prob: float = Field(ge=0)


class GapHistogram(BaseModel):
    edges: list[float] = Field(min_length=2)
    counts: list[int]

    @model_validator(mode="after")
    def _shape(self) -> Self:
        if len(self.counts) != len(self.edges) - 1:
            raise ValueError("GapHistogram needs one count per bin")
        return self

    @property
    def total(self) -> int:
        return sum(self.counts)
