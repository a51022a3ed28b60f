"""Mergeable quantile sketches with a relative-error guarantee.

Values map to logarithmically spaced buckets: a positive v lands in bucket
ceil(log_gamma(v)) where gamma = (1 + alpha) / (1 - alpha). Every value in a
bucket is within a factor gamma of the bucket bound, so the estimate
2 * gamma^i / (gamma + 1) is within alpha of any true value in the bucket.
Zeros are counted separately; negative values are rejected.
"""

from __future__ import annotations

import math
import struct
from bisect import bisect_right

DEFAULT_ALPHA = 0.01

_HEADER = struct.Struct("<BdQddQI")  # version, alpha, zero_count, min, max, count, n_buckets
_SUM = struct.Struct("<d")
_BUCKET = struct.Struct("<iQ")
_FORMAT_VERSION = 1


class SketchError(ValueError):
    pass


class QuantileSketch:
    """Bounded-memory summary of a non-negative value distribution.

    min/max/sum/count are tracked exactly; only quantiles are approximate.
    A `max_buckets` cap (optional) collapses the lowest buckets together,
    trading accuracy at the low end for a hard memory bound.
    """

    __slots__ = ("alpha", "gamma", "_log_gamma", "buckets", "zero_count",
                 "min", "max", "sum", "count", "max_buckets")

    def __init__(self, alpha: float = DEFAULT_ALPHA, max_buckets: int | None = None):
        if not 0.0 < alpha < 1.0:
            raise SketchError(f"alpha must be in (0, 1), got {alpha}")
        self.alpha = alpha
        self.gamma = (1.0 + alpha) / (1.0 - alpha)
        self._log_gamma = math.log(self.gamma)
        self.buckets: dict[int, int] = {}
        self.zero_count = 0
        self.min = math.inf
        self.max = -math.inf
        self.sum = 0
        self.count = 0
        self.max_buckets = max_buckets

    def bucket_index(self, v: float) -> int:
        return math.ceil(math.log(v) / self._log_gamma)

    def insert(self, v: float) -> None:
        if v < 0:
            raise SketchError(f"negative value rejected: {v}")
        if v == 0:
            self.zero_count += 1
        else:
            idx = self.bucket_index(v)
            self.buckets[idx] = self.buckets.get(idx, 0) + 1
            if self.max_buckets is not None and len(self.buckets) > self.max_buckets:
                self._collapse_lowest()
        self.count += 1
        self.sum += v
        if v < self.min:
            self.min = v
        if v > self.max:
            self.max = v

    def _collapse_lowest(self) -> None:
        # Fold the lowest bucket into the next-lowest; repeated values at the
        # low end lose precision but memory stays capped.
        lo, next_lo = sorted(self.buckets)[:2]
        self.buckets[next_lo] += self.buckets.pop(lo)

    def merge(self, other: "QuantileSketch") -> "QuantileSketch":
        """Return a new sketch equivalent to inserting both inputs' values."""
        if other.alpha != self.alpha:
            raise SketchError(f"alpha mismatch: {self.alpha} vs {other.alpha}")
        out = QuantileSketch(self.alpha, self.max_buckets)
        out.buckets = dict(self.buckets)
        for idx, n in other.buckets.items():
            out.buckets[idx] = out.buckets.get(idx, 0) + n
        out.zero_count = self.zero_count + other.zero_count
        out.count = self.count + other.count
        out.sum = self.sum + other.sum
        out.min = min(self.min, other.min)
        out.max = max(self.max, other.max)
        return out

    def merge_in_place(self, other: "QuantileSketch") -> None:
        if other.alpha != self.alpha:
            raise SketchError(f"alpha mismatch: {self.alpha} vs {other.alpha}")
        buckets = self.buckets
        for idx, n in other.buckets.items():
            buckets[idx] = buckets.get(idx, 0) + n
        self.zero_count += other.zero_count
        self.count += other.count
        self.sum += other.sum
        if other.min < self.min:
            self.min = other.min
        if other.max > self.max:
            self.max = other.max

    def quantile(self, q: float) -> float:
        """Estimate the q-quantile (nearest-rank convention).

        For all-positive inputs the result is within `alpha` relative error
        of the exact nearest-rank quantile.
        """
        if self.count == 0:
            raise SketchError("quantile of empty sketch")
        if not 0.0 <= q <= 1.0:
            raise SketchError(f"q must be in [0, 1], got {q}")
        rank = max(1, math.ceil(q * self.count))
        if rank <= self.zero_count:
            return 0.0
        remaining = rank - self.zero_count
        for idx in sorted(self.buckets):
            remaining -= self.buckets[idx]
            if remaining <= 0:
                est = 2.0 * self.gamma**idx / (self.gamma + 1.0)
                return min(max(est, self.min), self.max)
        return self.max  # unreachable when counts are consistent

    def mean(self) -> float:
        if self.count == 0:
            raise SketchError("mean of empty sketch")
        return self.sum / self.count

    @property
    def bucket_count(self) -> int:
        return len(self.buckets)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantileSketch):
            return NotImplemented
        return (
            self.alpha == other.alpha
            and self.buckets == other.buckets
            and self.zero_count == other.zero_count
            and self.count == other.count
            and self.sum == other.sum
            and (self.min == other.min or (self.count == 0 and other.count == 0))
            and (self.max == other.max or (self.count == 0 and other.count == 0))
        )

    def serialize(self) -> bytes:
        """Pack to the documented little-endian wire format.

        Layout: u8 version, f64 alpha, u64 zero_count, f64 min, f64 max,
        u64 count, u32 n_buckets, f64 sum, then (i32 index, u64 count) pairs
        in ascending index order. An empty sketch stores min = max = 0.
        """
        items = sorted(self.buckets.items())
        empty = self.count == 0
        head = _HEADER.pack(
            _FORMAT_VERSION,
            self.alpha,
            self.zero_count,
            0.0 if empty else float(self.min),
            0.0 if empty else float(self.max),
            self.count,
            len(items),
        )
        parts = [head, _SUM.pack(float(self.sum))]
        parts.extend(_BUCKET.pack(idx, n) for idx, n in items)
        return b"".join(parts)

    @classmethod
    def deserialize(cls, data: bytes) -> "QuantileSketch":
        try:
            version, alpha, zero_count, mn, mx, count, n_buckets = _HEADER.unpack_from(data, 0)
            if version != _FORMAT_VERSION:
                raise SketchError(f"unsupported sketch format version {version}")
            offset = _HEADER.size
            (total,) = _SUM.unpack_from(data, offset)
            offset += _SUM.size
            expected = offset + n_buckets * _BUCKET.size
            if len(data) != expected:
                raise SketchError(f"sketch payload length {len(data)} != expected {expected}")
            sketch = cls(alpha)
            for _ in range(n_buckets):
                idx, n = _BUCKET.unpack_from(data, offset)
                offset += _BUCKET.size
                if n <= 0:
                    raise SketchError("non-positive bucket count")
                sketch.buckets[idx] = n
            sketch.zero_count = zero_count
            sketch.count = count
            sketch.sum = _as_int_if_exact(total)
            if count:
                sketch.min = _as_int_if_exact(mn)
                sketch.max = _as_int_if_exact(mx)
            if sketch.zero_count + sum(sketch.buckets.values()) != count:
                raise SketchError("bucket counts inconsistent with total count")
            return sketch
        except struct.error as exc:
            raise SketchError(f"corrupt sketch payload: {exc}") from exc


def _as_int_if_exact(x: float):
    # Integer-valued inputs keep exact integer arithmetic through a
    # serialize/deserialize hop (within float64's exact-integer range).
    return int(x) if x.is_integer() and abs(x) < 2**53 else x


def exact_quantile(values: list, q: float) -> float:
    """Nearest-rank quantile of a value list: sorted[ceil(q*N)] (1-indexed)."""
    if not values:
        raise SketchError("quantile of empty list")
    if not 0.0 <= q <= 1.0:
        raise SketchError(f"q must be in [0, 1], got {q}")
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


class ErrorReport:
    """Sketch accuracy metrics aggregated across principals.

    For each quantile: relative value error |est - exact| / |exact| and
    normalized rank error |rank(est) - q*N| / N. Cells where the exact
    quantile is zero cannot define a relative error and are flagged instead.
    """

    def __init__(self, quantiles: tuple[float, ...]):
        self.quantiles = quantiles
        self._value_errors: dict[float, list[float]] = {q: [] for q in quantiles}
        self._rank_errors: dict[float, list[float]] = {q: [] for q in quantiles}
        self.flagged_zero_cells = 0
        self.keys = 0

    def add(self, estimates: dict[float, float], values: list) -> None:
        """Score one principal's estimates against its raw values."""
        if not values:
            raise SketchError("error metrics need a non-empty value list")
        ordered = sorted(values)
        n = len(ordered)
        self.keys += 1
        for q in self.quantiles:
            est = estimates[q]
            exact = ordered[max(1, math.ceil(q * n)) - 1]
            if exact == 0:
                self.flagged_zero_cells += 1
            else:
                self._value_errors[q].append(abs(est - exact) / abs(exact))
            est_rank = bisect_right(ordered, est)
            self._rank_errors[q].append(abs(est_rank - q * n) / n)

    def summary(self) -> dict:
        per_q = {}
        for q in self.quantiles:
            ve, re = self._value_errors[q], self._rank_errors[q]
            per_q[q] = {
                "value_error_mean": sum(ve) / len(ve) if ve else None,
                "value_error_max": max(ve) if ve else None,
                "rank_error_mean": sum(re) / len(re) if re else None,
                "rank_error_max": max(re) if re else None,
            }
        value_means = [c["value_error_mean"] for c in per_q.values() if c["value_error_mean"] is not None]
        rank_means = [c["rank_error_mean"] for c in per_q.values() if c["rank_error_mean"] is not None]
        return {
            "keys": self.keys,
            "flagged_zero_cells": self.flagged_zero_cells,
            "per_quantile": per_q,
            "value_error": _min_mean_max(value_means),
            "rank_error": _min_mean_max(rank_means),
        }


def _min_mean_max(xs: list[float]) -> dict:
    if not xs:
        return {"min_q": None, "mean": None, "max_q": None}
    return {"min_q": min(xs), "mean": sum(xs) / len(xs), "max_q": max(xs)}


def error_metrics(estimates: dict[float, float], values: list,
                  quantiles: tuple[float, ...] | None = None) -> dict:
    """Score one estimate set; convenience wrapper over ErrorReport."""
    qs = quantiles if quantiles is not None else tuple(sorted(estimates))
    report = ErrorReport(qs)
    report.add(estimates, values)
    return report.summary()
