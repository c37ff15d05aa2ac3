"""Tensor kernels routed through scheduled reductions and a precision policy.

Array-level functions (``*_values``) take value arrays already in the compute
format and are what the decoder calls; the :class:`Tensor` functions wrap them
with storage-format bookkeeping.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt

from layercast.models import PrecisionPolicy, ReductionSchedule
from layercast.reduction import reduce_values
from layercast.softfloat import (
    FloatArray,
    FloatFormat,
    ScalarBits,
    arithmetic,
    bits_from_values,
    convert,
    values_from_bits,
)

RMSNORM_EPSILON = 1e-6

_CANONICAL = ReductionSchedule.canonical()
_MAGIC = b"LCT1"
_FORMAT_TAGS = {
    FloatFormat.BF16: 0,
    FloatFormat.FP16: 1,
    FloatFormat.FP32: 2,
    FloatFormat.FP64REF: 3,
}
_TAG_FORMATS = {tag: fmt for fmt, tag in _FORMAT_TAGS.items()}
_BITS_LE = {
    FloatFormat.BF16: np.dtype("<u2"),
    FloatFormat.FP16: np.dtype("<u2"),
    FloatFormat.FP32: np.dtype("<u4"),
    FloatFormat.FP64REF: np.dtype("<u8"),
}


@dataclass(frozen=True, slots=True)
class Tensor:
    shape: tuple[int, ...]
    storage_format: FloatFormat
    data: FloatArray

    def __post_init__(self) -> None:
        if tuple(self.data.shape) != tuple(self.shape):
            raise ValueError(
                f"Tensor data shape {self.data.shape} does not match {self.shape}"
            )
        if self.data.dtype != self.storage_format.value_dtype:
            raise ValueError(
                f"Tensor data dtype {self.data.dtype} cannot hold "
                f"{self.storage_format.value}"
            )

    @classmethod
    def of(cls, values: npt.ArrayLike, fmt: FloatFormat) -> Tensor:
        """Round ``values`` once into ``fmt``."""
        data = convert(np.asarray(values), fmt)
        return cls(tuple(data.shape), fmt, data)

    @classmethod
    def from_bits(
        cls, bits: npt.ArrayLike, shape: tuple[int, ...], fmt: FloatFormat
    ) -> Tensor:
        data = values_from_bits(np.asarray(bits), fmt).reshape(shape)
        return cls(tuple(shape), fmt, data)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.size * self.storage_format.itemsize

    def bits(self) -> npt.NDArray[np.unsignedinteger]:
        return bits_from_values(self.data, self.storage_format)

    def scalars(self) -> list[ScalarBits]:
        """Row-major elements as :class:`ScalarBits`."""
        return ScalarBits.from_values(self.data, self.storage_format)

    def to(self, fmt: FloatFormat) -> Tensor:
        return Tensor.of(self.data, fmt)

    def bitwise_equal(self, other: Tensor) -> bool:
        return (
            self.shape == other.shape
            and self.storage_format is other.storage_format
            and bool(np.array_equal(self.bits(), other.bits()))
        )


def contract_values(
    a: FloatArray,
    b: FloatArray,
    fmt: FloatFormat,
    schedule: ReductionSchedule,
    *,
    axis: int,
) -> FloatArray:
    """Round each product ``a * b`` (broadcast), then sum along ``axis`` by schedule."""
    with np.errstate(all="ignore"):
        products = arithmetic(np.multiply, fmt)(a, b)
    return reduce_values(products, schedule, fmt, axis=axis)


def matmul_values(
    a: FloatArray, w: FloatArray, fmt: FloatFormat, schedule: ReductionSchedule
) -> FloatArray:
    """``a[..., k] @ w[k, n]`` in ``fmt``; operands already in ``fmt``."""
    return contract_values(a[..., :, None], w, fmt, schedule, axis=-2)


def rmsnorm_values(
    x: FloatArray, gain: FloatArray, fmt: FloatFormat, schedule: ReductionSchedule
) -> FloatArray:
    d = x.shape[-1]
    if d == 0:
        raise ValueError("RMSNorm over an empty dimension")
    square_sum = contract_values(x, x, fmt, schedule, axis=-1)
    mul = arithmetic(np.multiply, fmt)
    div = arithmetic(np.divide, fmt)
    with np.errstate(all="ignore"):
        mean = div(square_sum, convert(np.float64(d), fmt))
        rms = arithmetic(np.sqrt, fmt)(
            arithmetic(np.add, fmt)(mean, convert(np.float64(RMSNORM_EPSILON), fmt))
        )
        return div(mul(x, gain), rms[..., None])


def softmax_values(logits: FloatArray) -> FloatArray:
    """Stable softmax along the last axis, always in FP32, canonical normalisation."""
    z = convert(logits, FloatFormat.FP32)
    with np.errstate(all="ignore"):
        shifted = np.ascontiguousarray(z - z.max(axis=-1, keepdims=True))
        exps = np.exp(shifted)
    total = reduce_values(exps, _CANONICAL, FloatFormat.FP32, axis=-1)
    with np.errstate(all="ignore"):
        return exps / total[..., None]


def silu_values(x: FloatArray, fmt: FloatFormat) -> FloatArray:
    """``x · sigmoid(x)``; half formats evaluate in FP32 and round once."""
    working = FloatFormat.FP64REF if fmt is FloatFormat.FP64REF else FloatFormat.FP32
    wide = np.ascontiguousarray(convert(x, working))
    with np.errstate(all="ignore"):
        one = wide.dtype.type(1)
        activated = wide / (one + np.exp(-wide))
    return convert(activated, fmt)


def residual_add_values(x: FloatArray, y: FloatArray, fmt: FloatFormat) -> FloatArray:
    with np.errstate(all="ignore"):
        return arithmetic(np.add, fmt)(x, y)


def matmul(
    a: Tensor, w: Tensor, policy: PrecisionPolicy, schedule: ReductionSchedule
) -> Tensor:
    """Scheduled matmul ``a[..., k] @ w[k, n]`` under ``policy``.

    ``w`` must be stored in the policy's weight format; it is widened exactly to
    the compute format just before multiplication (LayerCast: BF16 → FP32).
    """
    if len(w.shape) != 2 or not a.shape or a.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {w.shape}")
    if w.storage_format is not policy.weight_storage:
        raise ValueError(
            f"matmul weights stored as {w.storage_format.value}, "
            f"policy {policy.label} stores {policy.weight_storage.value}"
        )
    fmt = policy.compute_format
    out = matmul_values(convert(a.data, fmt), convert(w.data, fmt), fmt, schedule)
    return Tensor(tuple(out.shape), fmt, out)


def rmsnorm(
    x: Tensor, gain: Tensor, policy: PrecisionPolicy, schedule: ReductionSchedule
) -> Tensor:
    if not x.shape or x.shape[-1] != gain.shape[-1] or len(gain.shape) != 1:
        raise ValueError(f"rmsnorm shape mismatch: {x.shape} with gain {gain.shape}")
    fmt = policy.compute_format
    out = rmsnorm_values(convert(x.data, fmt), convert(gain.data, fmt), fmt, schedule)
    return Tensor(tuple(out.shape), fmt, out)


def softmax_stable(logits: Tensor) -> Tensor:
    if not logits.shape or logits.shape[-1] < 1:
        raise ValueError("softmax needs at least one logit")
    out = softmax_values(logits.data)
    return Tensor(tuple(out.shape), FloatFormat.FP32, out)


def silu(x: Tensor, policy: PrecisionPolicy) -> Tensor:
    fmt = policy.compute_format
    out = silu_values(x.data, fmt)
    return Tensor(tuple(out.shape), fmt, out)


def residual_add(x: Tensor, y: Tensor, policy: PrecisionPolicy) -> Tensor:
    if x.shape != y.shape:
        raise ValueError(f"residual_add shape mismatch: {x.shape} + {y.shape}")
    fmt = policy.compute_format
    out = residual_add_values(convert(x.data, fmt), convert(y.data, fmt), fmt)
    return Tensor(tuple(out.shape), fmt, out)


def tensor_to_bytes(tensor: Tensor) -> bytes:
    """Binary container: magic, format tag, rank, little-endian u64 dims, LE bit patterns."""
    header = _MAGIC + struct.pack(
        f"<BB{len(tensor.shape)}Q",
        _FORMAT_TAGS[tensor.storage_format],
        len(tensor.shape),
        *tensor.shape,
    )
    payload = tensor.bits().astype(_BITS_LE[tensor.storage_format]).tobytes()
    return header + payload


def tensor_from_bytes(buffer: bytes) -> Tensor:
    if buffer[:4] != _MAGIC:
        raise ValueError("Not a tensor container (bad magic)")
    tag, rank = struct.unpack_from("<BB", buffer, 4)
    if tag not in _TAG_FORMATS:
        raise ValueError(f"Unknown tensor format tag {tag}")
    fmt = _TAG_FORMATS[tag]
    shape = struct.unpack_from(f"<{rank}Q", buffer, 6)
    offset = 6 + 8 * rank
    expected = math.prod(shape) * fmt.itemsize
    if len(buffer) - offset != expected:
        raise ValueError(
            f"Tensor payload is {len(buffer) - offset} bytes, expected {expected}"
        )
    bits = np.frombuffer(buffer, dtype=_BITS_LE[fmt], offset=offset)
    return Tensor.from_bits(bits.astype(fmt.bits_dtype), tuple(shape), fmt)


def save_tensor(path: Path, tensor: Tensor) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tensor_to_bytes(tensor))


def load_tensor(path: Path) -> Tensor:
    return tensor_from_bytes(path.read_bytes())
