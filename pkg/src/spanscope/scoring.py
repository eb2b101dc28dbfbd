"""Robust streaming statistics for span durations.

Each span type gets a sliding window of exclusive durations. The window
median comes from a pair of heaps (max-heap below, min-heap above) with lazy
deletion, so it is exact at every step. Dispersion is the median absolute
deviation, estimated with the five-marker streaming quantile algorithm over
|x - running median|; deviations are not recomputed when the median moves.
The same estimator tracks a high quantile of the emitted Z-scores, which
serves as the selection threshold.

Z = (x - median) / MAD. With MAD = 0 the score degenerates: it is 0 when the
observation sits on the median and a capped sentinel otherwise.
"""

from __future__ import annotations

import heapq
import math
import statistics
import threading
from collections import Counter, deque
from typing import NamedTuple

DEFAULT_WINDOW = 512
DEFAULT_MIN_OBS = 8
DEFAULT_THETA = 0.90
Z_CAP = 1e6


class P2Quantile:
    """Constant-space streaming quantile estimator.

    Five markers track the minimum, the target quantile, its half-way
    neighbours and the maximum. Marker heights move by piecewise-parabolic
    interpolation with a linear fallback; positions stay strictly increasing
    integers and heights non-decreasing. The first five observations are held
    exactly and sorted.
    """

    __slots__ = ("q", "n", "heights", "positions", "_desired", "_increments")

    def __init__(self, quantile: float):
        if not 0.0 < quantile < 1.0:
            raise ValueError("quantile must be in (0, 1)")
        self.q = quantile
        self.n = 0
        self.heights: list[float] = []
        self.positions = [1, 2, 3, 4, 5]
        self._desired = [1.0, 1 + 2 * quantile, 1 + 4 * quantile, 3 + 2 * quantile, 5.0]
        self._increments = [0.0, quantile / 2, quantile, (1 + quantile) / 2, 1.0]

    def update(self, x: float) -> None:
        self.n += 1
        if self.n <= 5:
            self.heights.append(x)
            if self.n == 5:
                self.heights.sort()
            return

        h = self.heights
        pos = self.positions
        des = self._desired
        inc = self._increments

        if x < h[0]:
            h[0] = x
            k = 0
        elif x >= h[4]:
            h[4] = x
            k = 3
        else:
            k = 0
            while x >= h[k + 1]:
                k += 1

        for i in range(k + 1, 5):
            pos[i] += 1
        des[1] += inc[1]
        des[2] += inc[2]
        des[3] += inc[3]
        des[4] += inc[4]

        for i in (1, 2, 3):
            d = des[i] - pos[i]
            if (d >= 1 and pos[i + 1] - pos[i] > 1) or (d <= -1 and pos[i - 1] - pos[i] < -1):
                d = 1 if d > 0 else -1
                hi = h[i]
                pi = pos[i]
                p_next = pos[i + 1]
                p_prev = pos[i - 1]
                candidate = hi + d / (p_next - p_prev) * (
                    (pi - p_prev + d) * (h[i + 1] - hi) / (p_next - pi)
                    + (p_next - pi - d) * (hi - h[i - 1]) / (pi - p_prev)
                )
                if h[i - 1] < candidate < h[i + 1]:
                    h[i] = candidate
                else:
                    h[i] = hi + d * (h[i + d] - hi) / (pos[i + d] - pi)
                pos[i] = pi + d

    def value(self) -> float:
        """Current estimate; exact for fewer than five observations."""
        if self.n == 0:
            return 0.0
        if self.n < 5:
            ordered = sorted(self.heights)
            rank = self.q * (len(ordered) - 1)
            lo = int(math.floor(rank))
            hi = min(lo + 1, len(ordered) - 1)
            frac = rank - lo
            return ordered[lo] * (1 - frac) + ordered[hi] * frac
        return self.heights[2]


def p2_update(estimator: P2Quantile, x: float) -> P2Quantile:
    """Feed one observation; returns the same estimator for chaining."""
    estimator.update(x)
    return estimator


class RunningMedian:
    """Exact median of a multiset under insertions and deletions.

    Two heaps with lazy deletion: the lower half as a negated max-heap, the
    upper half as a min-heap. Ghost entries are counted per heap and pruned
    whenever a top is inspected, and live sizes are tracked separately so
    ghosts never skew the balance. Even sizes report the midpoint.
    """

    __slots__ = ("_low", "_high", "_low_n", "_high_n", "_dead_low", "_dead_high")

    def __init__(self):
        self._low: list[float] = []
        self._high: list[float] = []
        self._low_n = 0
        self._high_n = 0
        self._dead_low: Counter = Counter()
        self._dead_high: Counter = Counter()

    def __len__(self) -> int:
        return self._low_n + self._high_n

    def _top_low(self) -> float:
        low, dead = self._low, self._dead_low
        v = -low[0]
        while dead[v] > 0:
            dead[v] -= 1
            heapq.heappop(low)
            v = -low[0]
        return v

    def _top_high(self) -> float:
        high, dead = self._high, self._dead_high
        v = high[0]
        while dead[v] > 0:
            dead[v] -= 1
            heapq.heappop(high)
            v = high[0]
        return v

    def add(self, x: float) -> None:
        if self._low_n == 0 or x <= self._top_low():
            heapq.heappush(self._low, -x)
            self._low_n += 1
        else:
            heapq.heappush(self._high, x)
            self._high_n += 1
        self._rebalance()

    def remove(self, x: float) -> None:
        """Remove one occurrence of x; x must be logically present."""
        if self._low_n and x <= self._top_low():
            self._low_n -= 1
            if x == -self._low[0]:
                heapq.heappop(self._low)
            else:
                self._dead_low[x] += 1
        else:
            self._high_n -= 1
            if x == self._top_high():
                heapq.heappop(self._high)
            else:
                self._dead_high[x] += 1
        self._rebalance()

    def _rebalance(self) -> None:
        low_n, high_n = self._low_n, self._high_n
        if low_n > high_n + 1:
            x = self._top_low()
            heapq.heappop(self._low)
            heapq.heappush(self._high, x)
            self._low_n = low_n - 1
            self._high_n = high_n + 1
        elif high_n > low_n:
            x = self._top_high()
            heapq.heappop(self._high)
            heapq.heappush(self._low, -x)
            self._high_n = high_n - 1
            self._low_n = low_n + 1

    def median(self) -> float:
        low_n = self._low_n
        if low_n == 0:
            raise ValueError("median of empty set")
        if low_n == self._high_n:
            return (self._top_low() + self._top_high()) / 2
        return self._top_low()


class Welford:
    """Running mean and standard deviation, single pass."""

    __slots__ = ("count", "_mean", "_m2")

    def __init__(self):
        self.count = 0
        self._mean = 0.0
        self._m2 = 0.0

    def add(self, x: float) -> None:
        self.count += 1
        delta = x - self._mean
        self._mean += delta / self.count
        self._m2 += delta * (x - self._mean)

    @property
    def mean(self) -> float:
        return self._mean

    @property
    def std(self) -> float:
        if self.count < 2:
            return 0.0
        return math.sqrt(self._m2 / (self.count - 1))


class ZScore(NamedTuple):
    """Robust anomaly score; degenerate marks a zero-MAD window."""

    value: float
    degenerate: bool = False


class SpanStatWindow:
    """Sliding window of exclusive durations for one span type.

    observe() scores against the statistics in place before the new value is
    inserted; the first min_obs observations score 0 so cold windows flag
    nothing. Exact mode recomputes median and MAD by sorting and exists for
    oracle tests. Updates to one window must be serialized by the caller;
    distinct keys are independent.
    """

    def __init__(self, key: str, window: int = DEFAULT_WINDOW, min_obs: int = DEFAULT_MIN_OBS,
                 z_cap: float = Z_CAP, theta: float = DEFAULT_THETA, exact: bool = False):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.key = key
        self.window = window
        self.min_obs = min_obs
        self.z_cap = z_cap
        self.theta = theta
        self.exact = exact
        self.count = 0
        self._values: deque[float] = deque()
        self._median = RunningMedian()
        self._mad_est = P2Quantile(0.5)
        self._zq_est = P2Quantile(theta)
        self._welford = Welford()
        # bound-method aliases keep the per-observation path lean
        self._median_value = self._median.median
        self._median_add = self._median.add
        self._median_remove = self._median.remove
        self._mad_update = self._mad_est.update
        self._zq_update = self._zq_est.update
        self._wf_add = self._welford.add

    def _current_median(self) -> float | None:
        if not self._values:
            return None
        if self.exact:
            return statistics.median(self._values)
        return self._median.median()

    def _current_mad(self, med: float) -> float:
        if self.exact:
            return statistics.median(abs(v - med) for v in self._values)
        return self._mad_est.value()

    def observe(self, x: float) -> ZScore:
        values = self._values
        if not values:
            med = None
        elif self.exact:
            med = statistics.median(values)
        else:
            med = self._median_value()

        if med is None:
            z = ZScore(0.0, False)
            deviation = 0.0
        elif self.count < self.min_obs:
            z = ZScore(0.0, False)
            deviation = abs(x - med)
        else:
            mad = self._current_mad(med)
            dev = x - med
            if dev == 0:
                z = ZScore(0.0, mad == 0)
            elif mad <= 0:
                z = ZScore(math.copysign(self.z_cap, dev), True)
            else:
                z = ZScore(dev / mad, False)
            deviation = abs(dev)

        self._zq_update(z.value)
        self._wf_add(x)
        self._mad_update(deviation)
        if len(values) == self.window:
            self._median_remove(values.popleft())
        values.append(x)
        self._median_add(x)
        self.count += 1
        return z

    def z_threshold(self) -> float:
        """Current estimate of the theta quantile of emitted Z-scores.

        Infinite until min_obs scores exist, so nothing is flagged while the
        window is cold.
        """
        if self.count < self.min_obs:
            return math.inf
        return self._zq_est.value()

    def score(self, x: float) -> tuple[ZScore, float]:
        """observe() paired with the threshold in force before the update."""
        threshold = self.z_threshold()
        return self.observe(x), threshold

    def stats(self) -> dict:
        med = self._current_median()
        return {
            "count": self.count,
            "median": med if med is not None else 0.0,
            "mad": self._current_mad(med) if med is not None else 0.0,
            "z_quantile": self._zq_est.value(),
            "mean": self._welford.mean,
            "std": self._welford.std,
        }


class ScoreBook:
    """All per-key windows plus snapshot export.

    One window per key; per-key updates are serialized with a single lock
    held only around window creation and mutation, so distinct keys stay
    cheap and thresholds may trail writers by at most one observation.
    """

    def __init__(self, window: int = DEFAULT_WINDOW, min_obs: int = DEFAULT_MIN_OBS,
                 z_cap: float = Z_CAP, theta: float = DEFAULT_THETA, exact: bool = False):
        self.window = window
        self.min_obs = min_obs
        self.z_cap = z_cap
        self.theta = theta
        self.exact = exact
        self._windows: dict[str, SpanStatWindow] = {}
        self._lock = threading.Lock()

    def window_for(self, key: str) -> SpanStatWindow:
        win = self._windows.get(key)
        if win is None:
            with self._lock:
                win = self._windows.get(key)
                if win is None:
                    win = SpanStatWindow(key, self.window, self.min_obs,
                                         self.z_cap, self.theta, self.exact)
                    self._windows[key] = win
        return win

    def observe(self, key: str, x: float) -> ZScore:
        return self.window_for(key).observe(x)

    def z_threshold(self, key: str) -> float:
        win = self._windows.get(key)
        return math.inf if win is None else win.z_threshold()

    def snapshot(self) -> dict:
        keys = {}
        for key in sorted(self._windows):
            keys[key] = self._windows[key].stats()
        return {"schema_version": 1, "kind": "stats-snapshot", "keys": keys}


def save_snapshot(snapshot: dict, path) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_snapshot(path) -> dict:
    import json

    from .errors import MalformedDocumentError

    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict) or data.get("kind") != "stats-snapshot":
        raise MalformedDocumentError("not a statistics snapshot")
    return data
