import numpy as np
import pytest

from layercast.rng import SplitMix64, derive_seed, mix64, permutation


def test_splitmix64_reference_outputs_for_seed_zero() -> None:
    stream = SplitMix64(0)

    assert [stream.next() for _ in range(3)] == [
        0xE220A8397B1DCDAF,
        0x6E789E6AA1B965F4,
        0x06C45D188009454F,
    ]


def test_take_matches_repeated_next_and_advances_state() -> None:
    scalar = SplitMix64(1234)
    vector = SplitMix64(1234)

    expected = [scalar.next() for _ in range(100)]
    taken = vector.take(100)

    assert [int(value) for value in taken] == expected
    assert vector.next() == scalar.next()


def test_take_rejects_negative_counts() -> None:
    with pytest.raises(ValueError, match="must not be negative"):
        SplitMix64(0).take(-1)


def test_doubles_and_uniform_stay_in_range() -> None:
    stream = SplitMix64(9)

    doubles = [stream.next_double() for _ in range(1000)]
    uniform = SplitMix64(9).uniform(1000, -0.5, 0.5)

    assert all(0.0 <= value < 1.0 for value in doubles)
    assert np.all((uniform >= -0.5) & (uniform < 0.5))
    assert uniform[0] == pytest.approx(doubles[0] - 0.5)


def test_mix64_stays_within_64_bits() -> None:
    assert 0 <= mix64(2**80 + 5) < 2**64
    assert mix64(2**64 + 5) == mix64(5)


def test_derive_seed_separates_components() -> None:
    seeds = {derive_seed(7, run, step) for run in range(4) for step in range(16)}

    assert len(seeds) == 64
    assert derive_seed(7, 1, 2) == derive_seed(7, 1, 2)
    assert derive_seed(7, 1, 2) != derive_seed(7, 2, 1)
    assert derive_seed(7) == 7


def test_permutation_is_a_deterministic_shuffle() -> None:
    first = permutation(50, 3)

    assert sorted(first) == list(range(50))
    assert permutation(50, 3) == first
    assert permutation(50, 4) != first
    assert permutation(1, 3) == [0]
    assert permutation(0, 3) == []


def test_permutation_follows_fisher_yates_on_the_stream() -> None:
    # next() % 3 == 1, then next() % 2 == 0 for seed 0.
    assert permutation(3, 0) == [2, 0, 1]
