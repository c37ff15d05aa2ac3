"""Deterministic toy transformer decoder over the scheduled kernels.

Pre-norm blocks (RMSNorm, causal attention, residual, RMSNorm, SiLU MLP,
residual) with learned absolute position embeddings. Every contraction runs
through the reduction schedule in the policy's compute format, attention
scores and attention-weighted values included; only softmax is fixed to FP32.

Rows of a batch never interact, so decoding prompts together yields the same
bits as decoding them one at a time.
"""

from __future__ import annotations

import hashlib
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np
import numpy.typing as npt

from layercast.kernels import (
    Tensor,
    contract_values,
    matmul_values,
    residual_add_values,
    rmsnorm_values,
    silu_values,
    softmax_values,
    tensor_to_bytes,
)
from layercast.log import logger
from layercast.models import (
    GenerationTrace,
    MemoryFootprint,
    ModelConfig,
    PrecisionPolicy,
    ReductionSchedule,
    SamplingMode,
    SamplingParams,
    TokenProb,
)
from layercast.rng import SplitMix64, derive_seed
from layercast.softfloat import FloatArray, FloatFormat, arithmetic, convert

EOS_TOKEN = 0
DEFAULT_TOP_K = 5

TokenArray = npt.NDArray[np.int64]


def tensor_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every weight tensor, in initialisation order."""
    d, ff, vocab = config.d_model, config.d_ff, config.vocab_size
    layout: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (vocab, d)),
        ("pos_emb", (config.max_seq_len, d)),
    ]
    for layer in range(config.n_layers):
        prefix = f"layers.{layer}."
        layout += [
            (prefix + "attn_norm", (d,)),
            (prefix + "wq", (d, d)),
            (prefix + "wk", (d, d)),
            (prefix + "wv", (d, d)),
            (prefix + "wo", (d, d)),
            (prefix + "mlp_norm", (d,)),
            (prefix + "w_up", (d, ff)),
            (prefix + "w_down", (ff, d)),
        ]
    layout += [("final_norm", (d,)), ("lm_head", (d, vocab))]
    return layout


@dataclass(frozen=True, slots=True)
class WeightSet:
    config: ModelConfig
    tensors: Mapping[str, Tensor]

    def __post_init__(self) -> None:
        shapes = [(name, tensor.shape) for name, tensor in self.tensors.items()]
        if shapes != tensor_layout(self.config):
            raise ValueError("WeightSet tensors do not match the layout of its config")
        formats = {tensor.storage_format for tensor in self.tensors.values()}
        if len(formats) != 1:
            raise ValueError(
                f"WeightSet mixes storage formats {sorted(f.value for f in formats)}"
            )
        object.__setattr__(self, "tensors", MappingProxyType(dict(self.tensors)))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def storage_format(self) -> FloatFormat:
        return next(iter(self.tensors.values())).storage_format

    @property
    def parameter_count(self) -> int:
        return sum(tensor.size for tensor in self.tensors.values())

    def cast(self, fmt: FloatFormat) -> WeightSet:
        """Every tensor rounded once into ``fmt`` (exact when widening)."""
        if fmt is self.storage_format:
            return self
        return WeightSet(
            self.config,
            {name: tensor.to(fmt) for name, tensor in self.tensors.items()},
        )

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in self.tensors.items():
            digest.update(name.encode())
            digest.update(tensor_to_bytes(tensor))
        return digest.hexdigest()


def init_weights(config: ModelConfig) -> WeightSet:
    """FP32 weights drawn in layout order from one SplitMix64 stream.

    Matrices are ``uniform(-s, s)`` with ``s = 1/sqrt(d_model)``; norm gains are
    ``1 + uniform(-s, s)``.
    """
    scale = 1.0 / math.sqrt(config.d_model)
    stream = SplitMix64(config.weight_seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in tensor_layout(config):
        draws = stream.uniform(math.prod(shape), -scale, scale).reshape(shape)
        if name.endswith("norm"):
            draws = 1.0 + draws
        tensors[name] = Tensor.of(draws, FloatFormat.FP32)
    return WeightSet(config, tensors)


def resident_bytes(config: ModelConfig, policy: PrecisionPolicy) -> MemoryFootprint:
    """Bytes the policy keeps resident: stored weights and KV cache per token."""
    parameters = sum(math.prod(shape) for _, shape in tensor_layout(config))
    kv_values = 2 * config.n_layers * config.d_model
    return MemoryFootprint(
        weight_bytes=parameters * policy.weight_storage.itemsize,
        kv_bytes_per_token=kv_values * policy.kv_storage.itemsize,
    )


@dataclass(slots=True)
class _KVCache:
    keys: list[FloatArray | None]
    values: list[FloatArray | None]
    length: int = 0

    @classmethod
    def empty(cls, n_layers: int) -> _KVCache:
        return cls([None] * n_layers, [None] * n_layers)

    def extend(
        self,
        layer: int,
        keys: FloatArray,
        values: FloatArray,
        storage: FloatFormat,
    ) -> tuple[FloatArray, FloatArray]:
        """Append ``(B, H, T, hd)`` keys/values rounded to ``storage``; return all stored."""
        stored_keys, stored_values = convert(keys, storage), convert(values, storage)
        if (previous := self.keys[layer]) is not None:
            stored_keys = np.concatenate([previous, stored_keys], axis=2)
        if (previous := self.values[layer]) is not None:
            stored_values = np.concatenate([previous, stored_values], axis=2)
        self.keys[layer], self.values[layer] = stored_keys, stored_values
        return stored_keys, stored_values


@dataclass(slots=True)
class _Model:
    weights: WeightSet
    policy: PrecisionPolicy
    schedule: ReductionSchedule
    _scale: FloatArray = field(init=False)

    def __post_init__(self) -> None:
        self.weights = self.weights.cast(self.policy.weight_storage)
        head_dim = self.weights.config.head_dim
        self._scale = convert(np.float64(1.0 / math.sqrt(head_dim)), self.fmt)

    @property
    def config(self) -> ModelConfig:
        return self.weights.config

    @property
    def fmt(self) -> FloatFormat:
        return self.policy.compute_format

    def _weight(self, name: str) -> FloatArray:
        # Stored in weight_storage, widened (or kept) just before use.
        return convert(self.weights[name].data, self.fmt)

    def _matmul(self, x: FloatArray, name: str) -> FloatArray:
        return matmul_values(x, self._weight(name), self.fmt, self.schedule)

    def _norm(self, x: FloatArray, name: str) -> FloatArray:
        return rmsnorm_values(x, self._weight(name), self.fmt, self.schedule)

    def _split_heads(self, x: FloatArray) -> FloatArray:
        batch, length, _ = x.shape
        heads, head_dim = self.config.n_heads, self.config.head_dim
        return x.reshape(batch, length, heads, head_dim).transpose(0, 2, 1, 3)

    def _attend(
        self, queries: FloatArray, keys: FloatArray, values: FloatArray, start: int
    ) -> FloatArray:
        fmt, schedule = self.fmt, self.schedule
        multiply = arithmetic(np.multiply, fmt)
        rows = []
        for offset in range(queries.shape[2]):
            visible = start + offset + 1
            scores = contract_values(
                queries[:, :, offset, None, :],
                keys[:, :, :visible, :],
                fmt,
                schedule,
                axis=-1,
            )
            with np.errstate(all="ignore"):
                scaled = multiply(scores, self._scale)
            weights = convert(softmax_values(scaled), fmt)
            rows.append(
                contract_values(
                    weights[..., None], values[:, :, :visible, :], fmt, schedule, axis=-2
                )
            )
        return np.stack(rows, axis=2)

    def _block(self, layer: int, x: FloatArray, start: int, cache: _KVCache) -> FloatArray:
        prefix = f"layers.{layer}."
        fmt = self.fmt
        h = self._norm(x, prefix + "attn_norm")
        queries = self._split_heads(self._matmul(h, prefix + "wq"))
        keys, values = cache.extend(
            layer,
            self._split_heads(self._matmul(h, prefix + "wk")),
            self._split_heads(self._matmul(h, prefix + "wv")),
            self.policy.kv_storage,
        )
        attended = self._attend(
            queries, convert(keys, fmt), convert(values, fmt), start
        )
        merged = attended.transpose(0, 2, 1, 3).reshape(x.shape)
        x = residual_add_values(x, self._matmul(merged, prefix + "wo"), fmt)
        h = self._norm(x, prefix + "mlp_norm")
        up = silu_values(self._matmul(h, prefix + "w_up"), fmt)
        return residual_add_values(x, self._matmul(up, prefix + "w_down"), fmt)

    def logits(self, tokens: TokenArray, cache: _KVCache) -> FloatArray:
        """Next-token logits ``(B, vocab)`` for ``tokens[:, cache.length:]`` appended to the cache."""
        start = cache.length
        fresh = tokens[:, start:]
        positions = np.arange(start, tokens.shape[1])
        x = residual_add_values(
            self._weight("tok_emb")[fresh], self._weight("pos_emb")[positions], self.fmt
        )
        for layer in range(self.config.n_layers):
            x = self._block(layer, x, start, cache)
        cache.length = tokens.shape[1]
        return self._matmul(self._norm(x[:, -1, :], "final_norm"), "lm_head")


def _check_prompt(tokens: Sequence[int], config: ModelConfig, extra: int = 0) -> None:
    if not tokens:
        raise ValueError("Token sequence must not be empty")
    if bad := [token for token in tokens if not 0 <= token < config.vocab_size]:
        raise ValueError(f"Token ids {bad} outside vocabulary of {config.vocab_size}")
    if len(tokens) + extra > config.max_seq_len:
        raise ValueError(
            f"Sequence of {len(tokens)} tokens (+{extra} generated) exceeds "
            f"max_seq_len {config.max_seq_len}"
        )


def forward(
    weights: WeightSet,
    tokens: Sequence[int],
    policy: PrecisionPolicy,
    schedule: ReductionSchedule,
) -> Tensor:
    """Logits for the token after ``tokens``, in the policy's compute format."""
    _check_prompt(tokens, weights.config)
    model = _Model(weights, policy, schedule)
    batch = np.asarray([tokens], dtype=np.int64)
    logits = model.logits(batch, _KVCache.empty(weights.config.n_layers))[0]
    return Tensor(tuple(logits.shape), policy.compute_format, logits)


def greedy_choice(logits: FloatArray) -> npt.NDArray[np.intp]:
    """Argmax over the last axis; ties go to the lowest token id."""
    return np.argmax(logits, axis=-1)


def nucleus(probs: FloatArray, top_p: float) -> npt.NDArray[np.intp]:
    """Smallest descending-probability prefix reaching ``top_p`` (ties by lowest id)."""
    order = np.argsort(-probs, kind="stable")
    cumulative = np.cumsum(probs[order].astype(np.float64))
    keep = min(int(np.searchsorted(cumulative, top_p, side="left")) + 1, len(order))
    return order[:keep]


def nucleus_draw(probs: FloatArray, top_p: float, u: float) -> int:
    """Inverse-CDF draw with ``u`` in [0, 1) from the renormalised nucleus."""
    kept = nucleus(probs, top_p)
    cumulative = np.cumsum(probs[kept].astype(np.float64))
    index = int(np.searchsorted(cumulative, u * cumulative[-1], side="right"))
    return int(kept[min(index, len(kept) - 1)])


def tempered_probs(logits: FloatArray, params: SamplingParams, fmt: FloatFormat) -> FloatArray:
    """FP32 softmax of ``logits / temperature``, the division done in ``fmt``."""
    with np.errstate(all="ignore"):
        tempered = arithmetic(np.divide, fmt)(
            logits, convert(np.float64(params.temperature), fmt)
        )
    return softmax_values(tempered)


def sample_from_logits(
    logits: FloatArray, params: SamplingParams, step: int, fmt: FloatFormat
) -> int:
    u = SplitMix64(derive_seed(params.rng_seed, step)).next_double()
    return nucleus_draw(tempered_probs(logits, params, fmt), params.top_p, u)


@dataclass(slots=True)
class _TraceBuilder:
    prompt: list[int]
    tokens: list[int] = field(default_factory=list)
    top1_prob: list[float] = field(default_factory=list)
    topk: list[list[TokenProb]] = field(default_factory=list)

    def record(self, token: int, probs: FloatArray, top_k: int, *, greedy: bool) -> None:
        ranked = np.argsort(-probs, kind="stable")[:top_k]
        self.tokens.append(token)
        self.top1_prob.append(float(probs[token] if greedy else probs[ranked[0]]))
        self.topk.append(
            [TokenProb(token=int(index), prob=float(probs[index])) for index in ranked]
        )

    def build(self, run_config_id: str) -> GenerationTrace:
        return GenerationTrace(
            run_config_id=run_config_id,
            prompt=self.prompt,
            tokens=self.tokens,
            top1_prob=self.top1_prob,
            topk=self.topk,
            length=len(self.tokens),
        )


def _decode_group(
    model: _Model,
    prompts: TokenArray,
    max_new_tokens: int,
    sampling: SamplingParams | None,
    top_k: int,
) -> list[_TraceBuilder]:
    config, fmt = model.config, model.fmt
    builders = [_TraceBuilder(prompt=[int(t) for t in prompt]) for prompt in prompts]
    active = np.ones(len(prompts), dtype=bool)
    sequences = prompts
    cache = _KVCache.empty(config.n_layers)
    for step in range(max_new_tokens):
        if not config.use_kv_cache:
            cache = _KVCache.empty(config.n_layers)
        logits = model.logits(sequences, cache)
        if sampling is None:
            probs = softmax_values(logits)
            chosen = greedy_choice(logits)
        else:
            probs = tempered_probs(logits, sampling, fmt)
            u = SplitMix64(derive_seed(sampling.rng_seed, step)).next_double()
            chosen = np.array(
                [nucleus_draw(row, sampling.top_p, u) for row in probs], dtype=np.int64
            )
        for row in np.flatnonzero(active):
            builders[row].record(
                int(chosen[row]), probs[row], top_k, greedy=sampling is None
            )
        active &= chosen != EOS_TOKEN
        if not active.any():
            break
        sequences = np.concatenate([sequences, chosen[:, None].astype(np.int64)], axis=1)
    return builders


def decode_batch(
    weights: WeightSet,
    prompts: Sequence[Sequence[int]],
    max_new_tokens: int,
    policy: PrecisionPolicy,
    schedule: ReductionSchedule,
    *,
    sampling: SamplingParams | None = None,
    top_k: int = DEFAULT_TOP_K,
    run_config_id: str = "",
) -> list[GenerationTrace]:
    """Decode every prompt; prompts of equal length share one batched pass.

    ``sampling=None`` (or Greedy mode) decodes greedily. Traces come back in
    prompt order.
    """
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be at least 1")
    if top_k < 1:
        raise ValueError("top_k must be at least 1")
    if sampling is not None and sampling.mode is SamplingMode.GREEDY:
        sampling = None
    config = weights.config
    for prompt in prompts:
        _check_prompt(prompt, config, max_new_tokens - 1)

    model = _Model(weights, policy, schedule)
    groups: dict[int, list[int]] = {}
    for index, prompt in enumerate(prompts):
        groups.setdefault(len(prompt), []).append(index)

    traces: list[GenerationTrace | None] = [None] * len(prompts)
    for length, indices in groups.items():
        batch = np.asarray([prompts[index] for index in indices], dtype=np.int64)
        builders = _decode_group(
            model, batch, max_new_tokens, sampling, min(top_k, config.vocab_size)
        )
        for index, builder in zip(indices, builders, strict=True):
            traces[index] = builder.build(run_config_id)
        logger.debug(
            f"{run_config_id or policy.label}: decoded {len(indices)} prompts "
            f"of length {length}"
        )
    return [trace for trace in traces if trace is not None]


def greedy_decode(
    weights: WeightSet,
    prompt: Sequence[int],
    max_new_tokens: int,
    policy: PrecisionPolicy,
    schedule: ReductionSchedule,
    *,
    top_k: int = DEFAULT_TOP_K,
    run_config_id: str = "",
) -> GenerationTrace:
    return decode_batch(
        weights,
        [prompt],
        max_new_tokens,
        policy,
        schedule,
        top_k=top_k,
        run_config_id=run_config_id,
    )[0]


def sample_decode(
    weights: WeightSet,
    prompt: Sequence[int],
    max_new_tokens: int,
    policy: PrecisionPolicy,
    schedule: ReductionSchedule,
    params: SamplingParams,
    *,
    top_k: int = DEFAULT_TOP_K,
    run_config_id: str = "",
) -> GenerationTrace:
    if params.mode is not SamplingMode.TOP_P:
        raise ValueError("sample_decode needs SamplingParams with mode TopP")
    return decode_batch(
        weights,
        [prompt],
        max_new_tokens,
        policy,
        schedule,
        sampling=params,
        top_k=top_k,
        run_config_id=run_config_id,
    )[0]
