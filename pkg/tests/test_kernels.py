from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from layercast.kernels import (
    Tensor,
    load_tensor,
    matmul,
    matmul_values,
    residual_add,
    rmsnorm,
    rmsnorm_values,
    save_tensor,
    silu,
    softmax_stable,
    tensor_from_bytes,
    tensor_to_bytes,
)
from layercast.models import CombineOrder, PolicyKind, PrecisionPolicy, ReductionSchedule
from layercast.softfloat import FloatFormat, convert

HARDWARE_SCHEDULES = [
    ReductionSchedule(split_k=devices, block_size=block, combine_order=order)
    for order in (CombineOrder.SEQUENTIAL_ASCENDING, CombineOrder.PAIRWISE_TREE)
    for devices in (2, 4)
    for block in (32, 64, 128)
]
FP32 = PrecisionPolicy.of(PolicyKind.PURE_FP32)
LAYERCAST = PrecisionPolicy.of(PolicyKind.LAYERCAST)


@pytest.mark.parametrize("kind", list(PolicyKind))
@pytest.mark.parametrize("schedule", HARDWARE_SCHEDULES[::3])
def test_identity_matmul_returns_its_input(kind: PolicyKind, schedule: ReductionSchedule) -> None:
    policy = PrecisionPolicy.of(kind)
    rng = np.random.default_rng(1)
    values = rng.uniform(0.5, 2.0, (5, 7)) * rng.choice([-1.0, 1.0], (5, 7))
    a = Tensor.of(values, policy.compute_format)
    identity = Tensor.of(np.eye(7), policy.weight_storage)

    out = matmul(a, identity, policy, schedule)

    assert out.bitwise_equal(a)


def test_layercast_matmul_equals_fp32_on_rounded_weights() -> None:
    rng = np.random.default_rng(3)
    for trial in range(200):
        k, n = rng.integers(1, 80, 2)
        a = Tensor.of(rng.standard_normal((3, k)), FloatFormat.FP32)
        stored = Tensor.of(rng.standard_normal((k, n)) / np.sqrt(k), FloatFormat.BF16)
        schedule = HARDWARE_SCHEDULES[trial % len(HARDWARE_SCHEDULES)]

        layercast = matmul(a, stored, LAYERCAST, schedule)
        pure = matmul(a, stored.to(FloatFormat.FP32), FP32, schedule)

        assert layercast.storage_format is FloatFormat.FP32
        assert layercast.bitwise_equal(pure)


def test_matmul_summation_order_shows_in_the_last_bit() -> None:
    ones = Tensor.of(np.ones((1, 3)), FloatFormat.FP32)
    w = Tensor.of(np.array([[0.1], [-0.1], [0.2]]), FloatFormat.FP32)

    canonical = matmul(ones, w, FP32, ReductionSchedule.canonical())
    shuffled = {
        format(int(matmul(ones, w, FP32, ReductionSchedule(permutation_seed=seed)).bits()[0, 0]), "032b")
        for seed in range(64)
    }

    assert format(int(canonical.bits()[0, 0]), "032b") == "00111110010011001100110011001101"
    assert "00111110010011001100110011001110" in shuffled


def test_matmul_rejects_bad_shapes_and_storage() -> None:
    a = Tensor.of(np.ones((2, 3)), FloatFormat.FP32)

    with pytest.raises(ValueError, match="shape mismatch"):
        matmul(a, Tensor.of(np.ones((4, 2)), FloatFormat.FP32), FP32, ReductionSchedule())
    with pytest.raises(ValueError, match="stores bf16"):
        matmul(a, Tensor.of(np.ones((3, 2)), FloatFormat.FP32), LAYERCAST, ReductionSchedule())


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.sampled_from(list(PolicyKind)))
def test_matmul_output_shape(m: int, k: int, n: int, kind: PolicyKind) -> None:
    policy = PrecisionPolicy.of(kind)

    out = matmul(
        Tensor.of(np.ones((m, k)), policy.compute_format),
        Tensor.of(np.ones((k, n)), policy.weight_storage),
        policy,
        ReductionSchedule(split_k=2),
    )

    assert out.shape == (m, n)
    assert np.all(out.data == k)


def test_rmsnorm_of_zeros_is_zero() -> None:
    x = Tensor.of(np.zeros((2, 16)), FloatFormat.FP32)
    gain = Tensor.of(np.ones(16), FloatFormat.FP32)

    out = rmsnorm(x, gain, FP32, ReductionSchedule())

    assert np.array_equal(out.data, np.zeros((2, 16), dtype=np.float32))


def test_rmsnorm_matches_float64_on_a_constant_vector() -> None:
    x = Tensor.of(np.full(64, 2.0), FloatFormat.FP32)
    gain = Tensor.of(np.ones(64), FloatFormat.FP32)

    out = rmsnorm(x, gain, FP32, ReductionSchedule(split_k=4))

    assert out.data == pytest.approx(np.full(64, 2.0 / np.sqrt(4.0 + 1e-6)), rel=1e-6)


def test_rmsnorm_rejects_an_empty_dimension() -> None:
    with pytest.raises(ValueError, match="empty dimension"):
        rmsnorm_values(
            np.zeros((2, 0), dtype=np.float32),
            np.zeros(0, dtype=np.float32),
            FloatFormat.FP32,
            ReductionSchedule(),
        )


def test_rmsnorm_depends_on_the_schedule() -> None:
    rng = np.random.default_rng(17)
    x = convert(rng.standard_normal((20, 64)), FloatFormat.FP32)
    gain = np.ones(64, dtype=np.float32)

    outputs = {
        rmsnorm_values(x, gain, FloatFormat.FP32, schedule).tobytes()
        for schedule in HARDWARE_SCHEDULES
    }

    assert len(outputs) > 1


def test_softmax_edge_cases() -> None:
    pair = softmax_stable(Tensor.of(np.zeros(2), FloatFormat.FP32))
    single = softmax_stable(Tensor.of(np.array([3.0]), FloatFormat.BF16))
    extreme = softmax_stable(Tensor.of(np.array([1000.0, 0.0]), FloatFormat.FP32))

    assert pair.data.tolist() == [0.5, 0.5]
    assert single.data.tolist() == [1.0]
    assert extreme.data.tolist() == [1.0, 0.0]
    assert pair.storage_format is FloatFormat.FP32
    with pytest.raises(ValueError, match="at least one logit"):
        softmax_stable(Tensor.of(np.zeros(0), FloatFormat.FP32))


def test_softmax_matches_float64_and_sums_to_one() -> None:
    rng = np.random.default_rng(23)
    logits = rng.standard_normal((256, 32)) * 4

    probs = softmax_stable(Tensor.of(logits, FloatFormat.FP32)).data

    wide = logits.astype(np.float32).astype(np.float64)
    expected = np.exp(wide - wide.max(axis=1, keepdims=True))
    expected /= expected.sum(axis=1, keepdims=True)
    assert np.max(np.abs(probs - expected)) < 1e-6
    assert np.max(np.abs(probs.astype(np.float64).sum(axis=1) - 1.0)) < 1e-6


def test_silu_and_residual_add() -> None:
    x = Tensor.of(np.array([-2.0, 0.0, 1.5]), FloatFormat.FP32)

    activated = silu(x, FP32)
    doubled = residual_add(x, x, FP32)

    assert activated.data == pytest.approx(np.array([-2.0, 0.0, 1.5]) / (1 + np.exp([2.0, 0.0, -1.5])))
    assert doubled.data.tolist() == [-4.0, 0.0, 3.0]
    with pytest.raises(ValueError, match="residual_add shape mismatch"):
        residual_add(x, Tensor.of(np.zeros(2), FloatFormat.FP32), FP32)


def test_lower_precision_diverges_more_often_between_schedules() -> None:
    rng = np.random.default_rng(31)
    raw_a = rng.uniform(-1, 1, (1000, 64))
    raw_w = rng.uniform(-1, 1, (64, 1))
    first, second = HARDWARE_SCHEDULES[0], HARDWARE_SCHEDULES[-1]

    differing = {}
    for fmt in (FloatFormat.BF16, FloatFormat.FP16, FloatFormat.FP32):
        a, w = convert(raw_a, fmt), convert(raw_w, fmt)
        left = matmul_values(a, w, fmt, first)
        right = matmul_values(a, w, fmt, second)
        differing[fmt] = int(np.count_nonzero(left != right))

    assert differing[FloatFormat.BF16] >= differing[FloatFormat.FP16] >= differing[FloatFormat.FP32]
    assert differing[FloatFormat.BF16] > 0


def test_tensor_rejects_mismatched_data() -> None:
    with pytest.raises(ValueError, match="does not match"):
        Tensor((3,), FloatFormat.FP32, np.zeros(2, dtype=np.float32))
    with pytest.raises(ValueError, match="cannot hold fp16"):
        Tensor((2,), FloatFormat.FP16, np.zeros(2, dtype=np.float32))


def test_tensor_container_round_trip(tmp_path: Path) -> None:
    rng = np.random.default_rng(4)
    tensor = Tensor.of(rng.standard_normal((3, 4)), FloatFormat.BF16)

    save_tensor(tmp_path / "nested" / "t.bin", tensor)
    loaded = load_tensor(tmp_path / "nested" / "t.bin")

    assert loaded.bitwise_equal(tensor)
    assert loaded.nbytes == 24
    assert tensor_to_bytes(tensor)[:4] == b"LCT1"


def test_tensor_container_rejects_corrupt_input() -> None:
    payload = tensor_to_bytes(Tensor.of(np.ones(4), FloatFormat.FP16))

    with pytest.raises(ValueError, match="bad magic"):
        tensor_from_bytes(b"XXXX" + payload[4:])
    with pytest.raises(ValueError, match="Unknown tensor format tag 9"):
        tensor_from_bytes(payload[:4] + b"\x09" + payload[5:])
    with pytest.raises(ValueError, match="expected 8"):
        tensor_from_bytes(payload[:-1])
