"""Explicitly ordered floating-point reductions.

A :class:`~layercast.models.ReductionSchedule` fixes the association order of a
sum the way kernel choice, blocking, split-K and device partitioning do on real
hardware. Accumulation happens in the element format; there is no hidden wide
accumulator.
"""

from __future__ import annotations

import itertools
from collections import Counter
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from layercast.models import CombineOrder, ReductionSchedule
from layercast.rng import permutation
from layercast.softfloat import (
    FloatArray,
    FloatFormat,
    ScalarBits,
    arithmetic,
    bits_from_values,
    values_from_bits,
)

MAX_SPREAD_N = 8

_Adder = Callable[[FloatArray, FloatArray], FloatArray]


@dataclass(frozen=True, slots=True)
class OrderedSum:
    value: ScalarBits
    ops_performed: int


@dataclass(slots=True)
class _Reducer:
    add: _Adder
    ops: int = 0

    def fold(self, block: FloatArray) -> FloatArray:
        acc = block[..., 0]
        for j in range(1, block.shape[-1]):
            acc = self.add(acc, block[..., j])
            self.ops += 1
        return acc

    def combine(self, partials: list[FloatArray], order: CombineOrder) -> FloatArray:
        match order:
            case CombineOrder.SEQUENTIAL_ASCENDING:
                acc = partials[0]
                for partial in partials[1:]:
                    acc = self.add(acc, partial)
                    self.ops += 1
            case CombineOrder.SEQUENTIAL_DESCENDING:
                acc = partials[-1]
                for partial in reversed(partials[:-1]):
                    acc = self.add(acc, partial)
                    self.ops += 1
            case CombineOrder.PAIRWISE_TREE:
                level = partials
                while len(level) > 1:
                    merged = [
                        self.add(level[i], level[i + 1])
                        for i in range(0, len(level) - 1, 2)
                    ]
                    self.ops += len(merged)
                    if len(level) % 2:
                        merged.append(level[-1])
                    level = merged
                acc = level[0]
        return acc


def chunk_bounds(n: int, split_k: int) -> list[tuple[int, int]]:
    """Contiguous chunks whose sizes differ by at most one; empty chunks dropped."""
    base, extra = divmod(n, split_k)
    bounds = []
    start = 0
    for index in range(split_k):
        stop = start + base + (1 if index < extra else 0)
        if stop > start:
            bounds.append((start, stop))
        start = stop
    return bounds


def _reduce_last_axis(
    data: FloatArray, schedule: ReductionSchedule, reducer: _Reducer
) -> FloatArray:
    n = data.shape[-1]
    if schedule.permutation_seed is not None:
        data = data[..., permutation(n, schedule.permutation_seed)]
    chunk_partials = []
    for start, stop in chunk_bounds(n, schedule.split_k):
        chunk = data[..., start:stop]
        block_partials = [
            reducer.fold(chunk[..., offset : offset + schedule.block_size])
            for offset in range(0, stop - start, schedule.block_size)
        ]
        chunk_partials.append(reducer.combine(block_partials, schedule.combine_order))
    return reducer.combine(chunk_partials, schedule.combine_order)


def reduce_values(
    values: FloatArray,
    schedule: ReductionSchedule,
    fmt: FloatFormat,
    *,
    axis: int = -1,
) -> FloatArray:
    """Scheduled sum along ``axis`` of an array of ``fmt`` values.

    Every other axis is independent: each output element sees exactly the
    scheduled association order over its own inputs.
    """
    data = np.moveaxis(np.asarray(values, dtype=fmt.value_dtype), axis, -1)
    if data.shape[-1] < 1:
        raise ValueError("Cannot reduce an empty sequence")
    reducer = _Reducer(arithmetic(np.add, fmt))
    with np.errstate(all="ignore"):
        result = _reduce_last_axis(data, schedule, reducer)
    return np.asarray(result, dtype=fmt.value_dtype)


def _as_values(values: Sequence[ScalarBits], fmt: FloatFormat) -> FloatArray:
    if not values:
        raise ValueError("Cannot reduce an empty sequence")
    wrong = {value.format for value in values} - {fmt}
    if wrong:
        raise ValueError(
            f"Reduction in {fmt.value} got operands in {sorted(f.value for f in wrong)}"
        )
    return values_from_bits(
        np.array([value.bits for value in values], dtype=fmt.bits_dtype), fmt
    )


def _to_scalar(result: FloatArray, fmt: FloatFormat) -> ScalarBits:
    return ScalarBits(fmt, int(bits_from_values(result, fmt).ravel()[0]))


def _check_permutation(order: Sequence[int], n: int) -> None:
    duplicates = sorted(index for index, count in Counter(order).items() if count > 1)
    out_of_range = sorted(index for index in set(order) if not 0 <= index < n)
    if len(order) != n or duplicates or out_of_range:
        raise ValueError(
            f"Order is not a permutation of 0..{n - 1}: length {len(order)}, "
            f"duplicates {duplicates}, out of range {out_of_range}"
        )


def _left_folds(data: FloatArray, fmt: FloatFormat) -> FloatArray:
    """Left fold along the last axis, vectorised over leading axes."""
    return _Reducer(arithmetic(np.add, fmt)).fold(data)


def reduce_permuted(
    values: Sequence[ScalarBits], order: Sequence[int], fmt: FloatFormat
) -> ScalarBits:
    """``v[order[0]] ⊕ v[order[1]] ⊕ … ⊕ v[order[n−1]]``, left to right."""
    data = _as_values(values, fmt)
    _check_permutation(order, len(data))
    with np.errstate(all="ignore"):
        result = _left_folds(data[list(order)], fmt)
    return _to_scalar(np.asarray(result, dtype=fmt.value_dtype), fmt)


def reduce_scheduled(
    values: Sequence[ScalarBits], schedule: ReductionSchedule, fmt: FloatFormat
) -> OrderedSum:
    data = _as_values(values, fmt)
    reducer = _Reducer(arithmetic(np.add, fmt))
    with np.errstate(all="ignore"):
        result = _reduce_last_axis(data, schedule, reducer)
    return OrderedSum(
        value=_to_scalar(np.asarray(result, dtype=fmt.value_dtype), fmt),
        ops_performed=reducer.ops,
    )


def enumerate_order_spread(
    values: Sequence[ScalarBits],
    fmt: FloatFormat,
    max_n: int = MAX_SPREAD_N,
    *,
    trees: bool = False,
) -> set[ScalarBits]:
    """Every distinct result of summing ``values`` in some order.

    By default the orders are the n! left folds. With ``trees=True`` every
    binary association tree over every order is included, which is the set any
    blocked, split or pairwise schedule can reach.
    """
    if max_n > MAX_SPREAD_N:
        raise ValueError(f"max_n must be at most {MAX_SPREAD_N}, got {max_n}")
    data = _as_values(values, fmt)
    n = len(data)
    if n > max_n:
        raise ValueError(f"Order spread of {n} values exceeds max_n={max_n}")
    if not trees:
        orders = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
        with np.errstate(all="ignore"):
            results = _left_folds(data[orders], fmt)
        distinct = np.unique(bits_from_values(results, fmt))
        return {ScalarBits(fmt, int(bits)) for bits in distinct}
    return {ScalarBits(fmt, int(bits)) for bits in _tree_spread(data, fmt)}


def _tree_spread(
    data: FloatArray, fmt: FloatFormat
) -> npt.NDArray[np.unsignedinteger]:
    n = len(data)
    add = arithmetic(np.add, fmt)
    reachable: dict[int, FloatArray] = {1 << i: data[i : i + 1] for i in range(n)}
    # Submasks are numerically smaller, so ascending order visits them first.
    for mask in range(1, 1 << n):
        if mask in reachable:
            continue
        found: list[FloatArray] = []
        sub = (mask - 1) & mask
        while sub:
            other = mask ^ sub
            if sub < other:
                with np.errstate(all="ignore"):
                    sums = add(reachable[sub][:, None], reachable[other][None, :])
                found.append(np.asarray(sums, dtype=fmt.value_dtype).ravel())
            sub = (sub - 1) & mask
        merged = np.concatenate(found)
        _, first = np.unique(bits_from_values(merged, fmt), return_index=True)
        reachable[mask] = merged[np.sort(first)]
    return np.unique(bits_from_values(reachable[(1 << n) - 1], fmt))
