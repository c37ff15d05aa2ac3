from decimal import Decimal
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layercast.softfloat import (
    FloatFormat,
    ScalarBits,
    add,
    add_values,
    bit_string,
    bits_from_values,
    convert,
    div,
    mul,
    mul_values,
    round_to,
    rounding_error,
    sqrt,
    values_from_bits,
)

HALF_FORMATS = (FloatFormat.BF16, FloatFormat.FP16)


def round_fraction(value: Fraction, fmt: FloatFormat) -> Fraction | float:
    """Round an exact rational to ``fmt`` (RNE, subnormals, overflow to inf)."""
    p = fmt.mantissa_bits
    emax = 2 ** (fmt.exponent_bits - 1) - 1
    emin = 1 - emax
    magnitude = abs(value)
    if magnitude == 0:
        return Fraction(0)
    exponent = magnitude.numerator.bit_length() - magnitude.denominator.bit_length()
    if Fraction(2) ** exponent > magnitude:
        exponent -= 1
    exponent = max(exponent, emin)
    scaled = magnitude / Fraction(2) ** (exponent - p)
    whole, remainder = divmod(scaled.numerator, scaled.denominator)
    twice = 2 * remainder
    if twice > scaled.denominator or (twice == scaled.denominator and whole % 2):
        whole += 1
    result = whole * Fraction(2) ** (exponent - p)
    largest = (2 - Fraction(1, 2**p)) * Fraction(2) ** emax
    if result > largest:
        return float("-inf") if value < 0 else float("inf")
    return -result if value < 0 else result


def finite_bits(fmt: FloatFormat) -> st.SearchStrategy[ScalarBits]:
    return (
        st.integers(0, (1 << fmt.width) - 1)
        .map(lambda bits: ScalarBits(fmt, bits))
        .filter(lambda value: value.is_finite())
    )


def assert_matches_oracle(result: ScalarBits, exact: Fraction) -> None:
    expected = round_fraction(exact, result.format)
    if isinstance(expected, float):
        assert float(result) == expected
    else:
        assert result.is_finite()
        assert result.exact() == expected


def test_format_layouts_match_ieee_widths() -> None:
    layouts = {
        fmt: (fmt.sign_bits, fmt.exponent_bits, fmt.mantissa_bits, fmt.width)
        for fmt in FloatFormat
    }

    assert layouts == {
        FloatFormat.BF16: (1, 8, 7, 16),
        FloatFormat.FP16: (1, 5, 10, 16),
        FloatFormat.FP32: (1, 8, 23, 32),
        FloatFormat.FP64REF: (1, 11, 52, 64),
    }


def test_rounding_1_00012_in_each_format() -> None:
    fp32 = ScalarBits.parse("1.00012", FloatFormat.FP32)
    fp16 = ScalarBits.parse("1.00012", FloatFormat.FP16)
    bf16 = ScalarBits.parse("1.00012", FloatFormat.BF16)

    assert fp32.exact() == 1 + Fraction(1007, 2**23)
    assert str(fp32.decimal()).startswith("1.0001200437545776")
    assert fp32.decimal() == Decimal("1.00012004375457763671875")
    assert float(rounding_error(fp32, "1.00012")) == pytest.approx(4.3754577637e-8, rel=1e-3)
    assert fp16.exact() == 1
    assert bf16.exact() == 1
    assert float(rounding_error(bf16, "1.00012")) == pytest.approx(-0.00012)
    assert (
        abs(rounding_error(fp32, "1.00012"))
        < abs(rounding_error(fp16, "1.00012"))
        <= abs(rounding_error(bf16, "1.00012"))
    )


def test_one_in_bf16_has_textbook_bits() -> None:
    one = round_to(ScalarBits.from_value(1.0, FloatFormat.FP32), FloatFormat.BF16)

    assert bit_string(one) == "0011111110000000"
    assert one.value == 1.0
    assert ScalarBits.from_bit_string("0011111110000000", FloatFormat.BF16) == one


def test_fp32_sum_order_changes_last_bit() -> None:
    a, b, c = (ScalarBits.parse(text, FloatFormat.FP32) for text in ("0.1", "-0.1", "0.2"))

    first = add(add(a, b, FloatFormat.FP32), c, FloatFormat.FP32)
    second = add(add(a, c, FloatFormat.FP32), b, FloatFormat.FP32)

    assert bit_string(first) == "00111110010011001100110011001101"
    assert bit_string(second) == "00111110010011001100110011001110"


def test_bf16_sum_order_changes_last_bit() -> None:
    a, b, c = (
        ScalarBits.parse(text, FloatFormat.BF16) for text in ("0.0016", "0.0027", "1.0")
    )

    first = add(add(a, b, FloatFormat.BF16), c, FloatFormat.BF16)
    second = add(add(a, c, FloatFormat.BF16), b, FloatFormat.BF16)

    assert bit_string(first) == "0011111110000001"
    assert bit_string(second) == "0011111110000000"


def test_operands_must_already_be_in_the_working_format() -> None:
    one32 = ScalarBits.from_value(1.0, FloatFormat.FP32)
    one16 = ScalarBits.from_value(1.0, FloatFormat.BF16)

    with pytest.raises(ValueError, match="use round_to first"):
        add(one32, one16, FloatFormat.FP32)


def test_scalar_bits_validation() -> None:
    with pytest.raises(ValueError, match="do not fit bf16"):
        ScalarBits(FloatFormat.BF16, 1 << 16)
    with pytest.raises(ValueError, match="Expected 16 binary digits"):
        ScalarBits.from_bit_string("0101", FloatFormat.FP16)
    with pytest.raises(ValueError, match="Not a decimal literal"):
        ScalarBits.parse("one", FloatFormat.FP32)
    with pytest.raises(ValueError, match="no exact rational value"):
        ScalarBits.from_value(float("inf"), FloatFormat.FP32).exact()


@pytest.mark.parametrize("fmt", HALF_FORMATS)
def test_half_formats_widen_and_narrow_exactly(fmt: FloatFormat) -> None:
    bits = np.arange(1 << 16, dtype=np.uint32).astype(fmt.bits_dtype)
    values = values_from_bits(bits, fmt)

    round_trip = bits_from_values(
        convert(convert(values, FloatFormat.FP32), fmt), fmt
    )

    nan = np.isnan(values)
    assert np.array_equal(round_trip[~nan], bits[~nan])
    assert np.all(round_trip[nan] == fmt.canonical_nan_bits)


def test_nan_results_are_canonical() -> None:
    inf = ScalarBits.from_value(float("inf"), FloatFormat.BF16)
    minus_inf = ScalarBits.from_value(float("-inf"), FloatFormat.BF16)

    assert add(inf, minus_inf, FloatFormat.BF16).bits == 0x7FC0
    assert ScalarBits.from_value(float("nan"), FloatFormat.FP16).bits == 0x7E00
    assert ScalarBits.from_value(float("nan"), FloatFormat.FP32).bits == 0x7FC00000
    assert ScalarBits.from_value(float("nan"), FloatFormat.FP64REF).bits == (
        0x7FF8000000000000
    )


def test_overflow_rounds_to_infinity_and_subnormals_survive() -> None:
    big = ScalarBits.from_value(1e39, FloatFormat.BF16)
    tiny = ScalarBits.from_value(2.0**-133, FloatFormat.BF16)
    fp16_tiny = ScalarBits.from_value(2.0**-24, FloatFormat.FP16)

    assert float(big) == float("inf")
    assert tiny.bits == 0x0001
    assert fp16_tiny.bits == 0x0001
    assert round_to(ScalarBits.from_value(2.0**-150, FloatFormat.FP64REF), FloatFormat.FP32).bits == 0


def test_fp64_to_half_rounds_once() -> None:
    # Halfway between two BF16 neighbours plus a tail that FP32 alone would drop.
    value = 1.0 + 2.0**-8 + 2.0**-40
    rounded = ScalarBits.from_value(value, FloatFormat.BF16)

    assert rounded.exact() == 1 + Fraction(1, 2**7)


def test_small_exact_products_and_quotients() -> None:
    half = ScalarBits.from_value(0.5, FloatFormat.BF16)
    four = ScalarBits.from_value(4.0, FloatFormat.FP32)
    two = ScalarBits.from_value(2.0, FloatFormat.FP32)

    assert mul(half, half, FloatFormat.BF16).value == 0.25
    assert div(four, two, FloatFormat.FP32).value == 2.0
    assert sqrt(four, FloatFormat.FP32).value == 2.0


@given(st.sampled_from(list(FloatFormat)).flatmap(finite_bits))
def test_adding_positive_zero_is_identity(value: ScalarBits) -> None:
    zero = ScalarBits.from_value(0.0, value.format)

    result = add(value, zero, value.format)

    assert result == value or (value.value == 0 and result.value == 0)


@given(st.sampled_from(list(FloatFormat)).flatmap(finite_bits))
def test_multiplying_by_one_is_identity(value: ScalarBits) -> None:
    one = ScalarBits.from_value(1.0, value.format)

    assert mul(value, one, value.format) == value


@settings(max_examples=2000)
@given(finite_bits(FloatFormat.BF16), finite_bits(FloatFormat.BF16))
def test_bf16_add_and_mul_match_exact_oracle(a: ScalarBits, b: ScalarBits) -> None:
    assert_matches_oracle(add(a, b, FloatFormat.BF16), a.exact() + b.exact())
    assert_matches_oracle(mul(a, b, FloatFormat.BF16), a.exact() * b.exact())


@settings(max_examples=2000)
@given(finite_bits(FloatFormat.FP16), finite_bits(FloatFormat.FP16))
def test_fp16_add_and_mul_match_exact_oracle(a: ScalarBits, b: ScalarBits) -> None:
    assert_matches_oracle(add(a, b, FloatFormat.FP16), a.exact() + b.exact())
    assert_matches_oracle(mul(a, b, FloatFormat.FP16), a.exact() * b.exact())


@given(
    st.sampled_from(list(FloatFormat)),
    st.floats(allow_nan=False),
    st.floats(allow_nan=False),
)
def test_rounding_is_monotone(fmt: FloatFormat, x: float, y: float) -> None:
    low, high = sorted((x, y))

    assert ScalarBits.from_value(low, fmt).value <= ScalarBits.from_value(high, fmt).value


def test_bf16_conversion_agrees_with_ml_dtypes() -> None:
    ml_dtypes = pytest.importorskip("ml_dtypes")
    rng = np.random.default_rng(7)
    values = (rng.standard_normal(100_000) * 10.0 ** rng.integers(-30, 30, 100_000)).astype(
        np.float32
    )

    ours = bits_from_values(convert(values, FloatFormat.BF16), FloatFormat.BF16)
    theirs = values.astype(ml_dtypes.bfloat16).view(np.uint16)

    assert np.array_equal(ours, theirs)


def _round_float64_to_bf16(exact: np.ndarray) -> np.ndarray:
    """Independent RNE of float64 values onto the BF16 grid (quantum never below 2**-133)."""
    _, exponent = np.frexp(exact)
    quantum = np.maximum(exponent.astype(np.int64) - 8, -133)
    with np.errstate(all="ignore"):
        rounded = np.ldexp(np.rint(np.ldexp(exact, -quantum)), quantum)
        largest = (2 - 2.0**-7) * 2.0**127
        rounded = np.where(np.abs(rounded) > largest, np.copysign(np.inf, exact), rounded)
    return np.where(np.isfinite(exact), rounded, exact)


@pytest.mark.slow
@pytest.mark.parametrize("op", ["add", "mul"])
def test_bf16_exhaustive_grid_against_stratified_partners(op: str) -> None:
    all_bits = np.arange(1 << 16, dtype=np.uint32).astype(np.uint16)
    values = values_from_bits(all_bits, FloatFormat.BF16)
    partner_bits = [(stratum << 8) | ((stratum * 151) & 0xFF) for stratum in range(256)]

    for partner in partner_bits:
        other = values_from_bits(np.full_like(all_bits, partner), FloatFormat.BF16)
        wide = values.astype(np.float64)
        with np.errstate(all="ignore"):
            exact = wide + other.astype(np.float64) if op == "add" else wide * other
            ours = (
                add_values(values, other, FloatFormat.BF16)
                if op == "add"
                else mul_values(values, other, FloatFormat.BF16)
            )
        expected = _round_float64_to_bf16(np.asarray(exact, dtype=np.float64))

        assert np.array_equal(
            bits_from_values(ours, FloatFormat.BF16),
            bits_from_values(expected.astype(np.float32), FloatFormat.BF16),
        ), f"{op} with partner {partner:#06x}"


@pytest.mark.slow
def test_fp16_million_random_pairs_against_direct_rounding() -> None:
    rng = np.random.default_rng(11)
    a_bits = rng.integers(0, 1 << 16, 1_000_000).astype(np.uint16)
    b_bits = rng.integers(0, 1 << 16, 1_000_000).astype(np.uint16)
    a = values_from_bits(a_bits, FloatFormat.FP16)
    b = values_from_bits(b_bits, FloatFormat.FP16)

    with np.errstate(all="ignore"):
        expected_sum = (a.astype(np.float64) + b.astype(np.float64)).astype(np.float16)
        expected_product = (a.astype(np.float64) * b.astype(np.float64)).astype(np.float16)

    assert np.array_equal(
        bits_from_values(add_values(a, b, FloatFormat.FP16), FloatFormat.FP16),
        bits_from_values(expected_sum, FloatFormat.FP16),
    )
    assert np.array_equal(
        bits_from_values(mul_values(a, b, FloatFormat.FP16), FloatFormat.FP16),
        bits_from_values(expected_product, FloatFormat.FP16),
    )
