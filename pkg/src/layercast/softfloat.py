"""Bit-exact scalar and array arithmetic for BF16, FP16, FP32 and an FP64 reference.

Values of a format live in a numpy array of its *value dtype*: ``float16`` for
FP16, ``float32`` for FP32, ``float64`` for FP64REF and ``float32`` for BF16
(every BF16 value is exactly representable in FP32). FP16 arithmetic widens
to FP32, runs the native operation and rounds once back; FP32's 24-bit
significand is at least ``2p + 2``, so the double rounding is innocuous. BF16
shares FP32's exponent range, whose subnormals would round twice, so BF16
operations run in FP64 and come back through the round-to-odd path.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
from decimal import Decimal
from enum import StrEnum
from fractions import Fraction

import numpy as np
import numpy.typing as npt

FloatArray = npt.NDArray[np.floating]


class FloatFormat(StrEnum):
    BF16 = "bf16"
    FP16 = "fp16"
    FP32 = "fp32"
    FP64REF = "fp64ref"

    @property
    def sign_bits(self) -> int:
        return 1

    @property
    def exponent_bits(self) -> int:
        return _LAYOUTS[self].exponent_bits

    @property
    def mantissa_bits(self) -> int:
        return _LAYOUTS[self].mantissa_bits

    @property
    def width(self) -> int:
        return self.sign_bits + self.exponent_bits + self.mantissa_bits

    @property
    def value_dtype(self) -> np.dtype:
        return _LAYOUTS[self].value_dtype

    @property
    def bits_dtype(self) -> np.dtype:
        return _LAYOUTS[self].bits_dtype

    @property
    def canonical_nan_bits(self) -> int:
        return _LAYOUTS[self].nan_bits

    @property
    def itemsize(self) -> int:
        """Bytes per element in storage."""
        return self.width // 8


@dataclass(frozen=True, slots=True)
class _Layout:
    exponent_bits: int
    mantissa_bits: int
    value_dtype: np.dtype
    bits_dtype: np.dtype
    nan_bits: int


_LAYOUTS: dict[FloatFormat, _Layout] = {
    FloatFormat.BF16: _Layout(8, 7, np.dtype(np.float32), np.dtype(np.uint16), 0x7FC0),
    FloatFormat.FP16: _Layout(5, 10, np.dtype(np.float16), np.dtype(np.uint16), 0x7E00),
    FloatFormat.FP32: _Layout(
        8, 23, np.dtype(np.float32), np.dtype(np.uint32), 0x7FC00000
    ),
    FloatFormat.FP64REF: _Layout(
        11, 52, np.dtype(np.float64), np.dtype(np.uint64), 0x7FF8000000000000
    ),
}

_BF16_NAN_AS_FP32 = np.uint32(0x7FC00000)


def _round_to_odd_fp32(values: FloatArray) -> FloatArray:
    """Round float64 to float32 toward zero, forcing the last bit to 1 when inexact.

    A value rounded to odd with at least ``p + 2`` bits rounds to nearest-even at
    ``p`` bits exactly as the original would, which lets FP64REF reach the half
    formats through FP32 without a double-rounding error.
    """
    wide = np.asarray(values, dtype=np.float64)
    narrow = wide.astype(np.float32)
    away = np.abs(narrow.astype(np.float64)) > np.abs(wide)
    narrow = np.where(away, np.nextafter(narrow, np.float32(0)), narrow)
    inexact = narrow.astype(np.float64) != wide
    bits = narrow.view(np.uint32) | inexact.astype(np.uint32)
    return bits.view(np.float32)


def _round_fp32_to_bf16(values: FloatArray) -> FloatArray:
    narrow = np.asarray(values, dtype=np.float32)
    bits = narrow.view(np.uint32)
    lsb = (bits >> np.uint32(16)) & np.uint32(1)
    rounded = (bits + np.uint32(0x7FFF) + lsb) & np.uint32(0xFFFF0000)
    rounded = np.where(np.isnan(narrow), _BF16_NAN_AS_FP32, rounded)
    return np.asarray(rounded, dtype=np.uint32).view(np.float32)


def convert(values: npt.ArrayLike, target: FloatFormat) -> FloatArray:
    """Round an array of float16/32/64 values to ``target`` (RNE, overflow to ±inf).

    The source precision is taken from the array dtype; widening is exact.
    """
    source = np.asarray(values)
    if source.dtype.kind != "f":
        source = source.astype(np.float64)
    with np.errstate(all="ignore"):
        match target:
            case FloatFormat.FP64REF:
                return source.astype(np.float64)
            case FloatFormat.FP32:
                return source.astype(np.float32)
            case FloatFormat.FP16:
                if source.dtype == np.float64:
                    source = _round_to_odd_fp32(source)
                return source.astype(np.float16)
            case FloatFormat.BF16:
                if source.dtype == np.float64:
                    source = _round_to_odd_fp32(source)
                return _round_fp32_to_bf16(source)
    raise ValueError(f"Unknown float format: {target!r}")


def bits_from_values(
    values: npt.ArrayLike, fmt: FloatFormat
) -> npt.NDArray[np.unsignedinteger]:
    """Raw bit patterns of ``values`` (already in ``fmt``), NaNs canonicalised."""
    array = np.asarray(values, dtype=fmt.value_dtype)
    if fmt is FloatFormat.BF16:
        bits = (array.view(np.uint32) >> np.uint32(16)).astype(np.uint16)
    else:
        bits = array.view(fmt.bits_dtype)
    canonical = np.asarray(fmt.canonical_nan_bits, dtype=fmt.bits_dtype)
    return np.where(np.isnan(array), canonical, bits).astype(fmt.bits_dtype)


def values_from_bits(bits: npt.ArrayLike, fmt: FloatFormat) -> FloatArray:
    raw = np.asarray(bits)
    if raw.dtype.kind not in "iu":
        raise ValueError(f"Bit patterns must be integers, got dtype {raw.dtype}")
    if raw.size and (int(raw.min()) < 0 or int(raw.max()) >> fmt.width):
        raise ValueError(f"Bit patterns out of range for {fmt.value} ({fmt.width} bits)")
    raw = raw.astype(fmt.bits_dtype)
    if fmt is FloatFormat.BF16:
        return (raw.astype(np.uint32) << np.uint32(16)).view(np.float32)
    return raw.view(fmt.value_dtype)


def arithmetic(
    op: Callable[..., FloatArray], fmt: FloatFormat
) -> Callable[..., FloatArray]:
    """Correctly rounded elementwise ``op`` over value arrays of ``fmt``.

    Operands must already carry the format's value dtype; the caller owns
    ``np.errstate``. numpy evaluates float16 ufuncs in float32 and rounds once,
    which is exactly the widen/operate/round scheme, so FP16 uses them directly.
    BF16 has no numpy dtype: the FP64 result is rounded explicitly.
    """
    if fmt is not FloatFormat.BF16:
        return op

    def bf16_op(*operands: FloatArray) -> FloatArray:
        wide = [np.asarray(operand, dtype=np.float64) for operand in operands]
        return _round_fp32_to_bf16(_round_to_odd_fp32(op(*wide)))

    return bf16_op


def _compute(
    op: Callable[..., FloatArray],
    fmt: FloatFormat,
    *operands: npt.ArrayLike,
) -> FloatArray:
    arrays = [np.asarray(operand, dtype=fmt.value_dtype) for operand in operands]
    with np.errstate(all="ignore"):
        return np.asarray(arithmetic(op, fmt)(*arrays), dtype=fmt.value_dtype)


def add_values(a: npt.ArrayLike, b: npt.ArrayLike, fmt: FloatFormat) -> FloatArray:
    """Elementwise correctly rounded ``a + b`` in ``fmt``."""
    return _compute(np.add, fmt, a, b)


def sub_values(a: npt.ArrayLike, b: npt.ArrayLike, fmt: FloatFormat) -> FloatArray:
    return _compute(np.subtract, fmt, a, b)


def mul_values(a: npt.ArrayLike, b: npt.ArrayLike, fmt: FloatFormat) -> FloatArray:
    """Elementwise correctly rounded ``a * b`` in ``fmt``."""
    return _compute(np.multiply, fmt, a, b)


def div_values(a: npt.ArrayLike, b: npt.ArrayLike, fmt: FloatFormat) -> FloatArray:
    return _compute(np.divide, fmt, a, b)


def sqrt_values(a: npt.ArrayLike, fmt: FloatFormat) -> FloatArray:
    return _compute(np.sqrt, fmt, a)


@dataclass(frozen=True, slots=True)
class ScalarBits:
    """One value of a format, held as its raw IEEE-754 bit pattern."""

    format: FloatFormat
    bits: int

    def __post_init__(self) -> None:
        if not 0 <= self.bits < (1 << self.format.width):
            raise ValueError(
                f"ScalarBits bits {self.bits:#x} do not fit {self.format.value}"
            )

    @classmethod
    def from_values(cls, values: npt.ArrayLike, fmt: FloatFormat) -> list[ScalarBits]:
        """Wrap an array already in ``fmt`` as scalars (row-major)."""
        return [cls(fmt, int(bits)) for bits in bits_from_values(values, fmt).ravel()]

    @classmethod
    def from_value(cls, value: float | np.floating, fmt: FloatFormat) -> ScalarBits:
        """Round a float (taken at its own precision) once into ``fmt``."""
        source = np.asarray([value])
        if source.dtype.kind != "f":
            source = source.astype(np.float64)
        return cls(fmt, int(bits_from_values(convert(source, fmt), fmt)[0]))

    @classmethod
    def parse(cls, text: str, fmt: FloatFormat) -> ScalarBits:
        """Parse a decimal literal to the nearest FP64REF value, then round once."""
        try:
            nearest = float(text)
        except ValueError as error:
            raise ValueError(f"Not a decimal literal: {text!r}") from error
        return cls.from_value(nearest, fmt)

    @classmethod
    def from_bit_string(cls, text: str, fmt: FloatFormat) -> ScalarBits:
        if len(text) != fmt.width or set(text) - {"0", "1"}:
            raise ValueError(
                f"Expected {fmt.width} binary digits for {fmt.value}, got {text!r}"
            )
        return cls(fmt, int(text, 2))

    @property
    def value(self) -> np.floating:
        return self.as_array()[0]

    def __float__(self) -> float:
        return float(self.value)

    def as_array(self) -> FloatArray:
        bits = np.asarray([self.bits], dtype=self.format.bits_dtype)
        return values_from_bits(bits, self.format)

    def is_nan(self) -> bool:
        return bool(np.isnan(self.value))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.value))

    def exact(self) -> Fraction:
        if not self.is_finite():
            raise ValueError(f"{self.bit_string()} has no exact rational value")
        return Fraction(float(self.value))

    def decimal(self) -> Decimal:
        """Exact decimal expansion (every format embeds in float64)."""
        return Decimal(float(self.value))

    def bit_string(self) -> str:
        return format(self.bits, f"0{self.format.width}b")


def _check_format(value: ScalarBits, fmt: FloatFormat) -> None:
    if value.format is not fmt:
        raise ValueError(
            f"Operand is {value.format.value}, expected {fmt.value}; use round_to first"
        )


def _scalar(values: FloatArray, fmt: FloatFormat) -> ScalarBits:
    return ScalarBits(fmt, int(bits_from_values(values, fmt).ravel()[0]))


def round_to(value: ScalarBits, target: FloatFormat) -> ScalarBits:
    """Round-to-nearest-even conversion; total (NaN maps to the canonical NaN)."""
    return _scalar(convert(value.as_array(), target), target)


def add(a: ScalarBits, b: ScalarBits, fmt: FloatFormat) -> ScalarBits:
    _check_format(a, fmt)
    _check_format(b, fmt)
    return _scalar(add_values(a.as_array(), b.as_array(), fmt), fmt)


def mul(a: ScalarBits, b: ScalarBits, fmt: FloatFormat) -> ScalarBits:
    _check_format(a, fmt)
    _check_format(b, fmt)
    return _scalar(mul_values(a.as_array(), b.as_array(), fmt), fmt)


def div(a: ScalarBits, b: ScalarBits, fmt: FloatFormat) -> ScalarBits:
    _check_format(a, fmt)
    _check_format(b, fmt)
    return _scalar(div_values(a.as_array(), b.as_array(), fmt), fmt)


def sqrt(a: ScalarBits, fmt: FloatFormat) -> ScalarBits:
    _check_format(a, fmt)
    return _scalar(sqrt_values(a.as_array(), fmt), fmt)


def bit_string(value: ScalarBits) -> str:
    return value.bit_string()


def rounding_error(value: ScalarBits, true_value: str | Fraction) -> Fraction:
    """Signed error ``value − true_value``, exact."""
    target = Fraction(true_value) if isinstance(true_value, str) else true_value
    return value.exact() - target
