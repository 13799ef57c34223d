"""Producer-side temporal stabilisation of depth maps.

Three per-pixel stages run in order: historic fill of invalid readings, a
small-jitter hold against a moving average and a large-jitter hold driven by
a change count. Statistics are always computed on RAW sensor readings; the
held value is, by default, the previously emitted (filtered) value.
"""

from __future__ import annotations

from collections.abc import Iterable, Iterator
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core import DepthFrame, ValidationError

_NO_TIME = -(2**62)


@dataclass(frozen=True)
class FilterParams:
    historic_window_ms: float = 200.0
    small_n: int = 10
    small_threshold_mm: float = 3.0
    large_n2: int = 60
    large_lambda_mm: float = 3.0
    large_ratio: float = 0.6
    # "output": hold the last emitted value; "raw": hold the last sensor reading.
    hold_source: str = "output"

    def __post_init__(self):
        # a zero window disables historic fill; a zero tolerance holds exact repeats of the mean only
        for name in ("historic_window_ms", "small_threshold_mm"):
            if not getattr(self, name) >= 0:
                raise ValidationError(f"FilterParams.{name} must be non-negative")
        for name in ("small_n", "large_n2", "large_lambda_mm"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"FilterParams.{name} must be positive")
        if not 0 < self.large_ratio <= 1:
            raise ValidationError("FilterParams.large_ratio must lie in (0, 1]")
        if self.hold_source not in ("output", "raw"):
            raise ValidationError("FilterParams.hold_source must be 'output' or 'raw'")

    @property
    def capacity(self) -> int:
        return max(self.small_n, self.large_n2)


class PixelHistory:
    """Ring buffer of raw depth frames plus running per-pixel window statistics.

    Single writer: call :meth:`push` once per frame, in frame order.
    """

    def __init__(self, params: FilterParams = FilterParams(), capacity: int | None = None):
        self.params = params
        self.capacity = max(capacity or 0, params.capacity)
        self.shape: tuple[int, int] | None = None
        self.count = 0
        self.timestamps: list[int] = []
        self.frame_numbers: list[int] = []

    def __len__(self) -> int:
        return min(self.count, self.capacity)

    def _allocate(self, shape):
        p = self.params
        h, w = shape
        self.shape = shape
        self._ring = np.zeros((self.capacity, h, w), np.uint16)
        self._small_sum = np.zeros(shape, np.int64)
        self._small_cnt = np.zeros(shape, np.int64)
        self._trans = np.zeros((max(p.large_n2 - 1, 1), h, w), bool)
        self._n_trans = 0
        self.xi = np.zeros(shape, np.int64)
        self.last_valid = np.zeros(shape, np.uint16)
        self.last_valid_ts = np.full(shape, _NO_TIME, np.int64)
        self.prev_raw: NDArray | None = None
        self.prev_output: NDArray | None = None

    def recent(self, age: int) -> NDArray[np.uint16]:
        """Raw frame ``age`` steps back (0 = newest)."""
        if not 0 <= age < len(self):
            raise IndexError(age)
        return self._ring[(self.count - 1 - age) % self.capacity]

    def raw_frames(self) -> NDArray[np.uint16]:
        """Stored raw frames, oldest first."""
        n = len(self)
        if n == 0:
            return np.zeros((0, 0, 0), np.uint16)
        return np.stack([self.recent(a) for a in range(n - 1, -1, -1)])

    @property
    def small_window(self) -> tuple[NDArray, NDArray]:
        """Sum and count of valid readings over the last ``small_n`` frames."""
        return self._small_sum, self._small_cnt

    def push(self, raw: DepthFrame, output: DepthFrame | None = None) -> None:
        p = self.params
        data = raw.data
        if self.shape is None:
            self._allocate(data.shape)
        elif data.shape != self.shape:
            raise ValidationError(f"frame {raw.frame_number}: shape {data.shape} != history shape {self.shape}")
        if self.timestamps and raw.timestamp_us < self.timestamps[-1]:
            raise ValidationError(f"frame {raw.frame_number}: timestamp goes backwards")

        valid = data > 0
        if self.count >= p.small_n:
            leaving = self.recent(p.small_n - 1)
            self._small_sum -= leaving
            self._small_cnt -= leaving > 0
        self._small_sum += data
        self._small_cnt += valid

        if self.count >= 1 and p.large_n2 >= 2:
            prev = self.recent(0)
            changed = (np.abs(data.astype(np.int32) - prev) > p.large_lambda_mm) & valid & (prev > 0)
            slot = self._n_trans % self._trans.shape[0]
            if self._n_trans >= self._trans.shape[0]:
                self.xi -= self._trans[slot]
            self._trans[slot] = changed
            self.xi += changed
            self._n_trans += 1

        np.copyto(self.last_valid, data, where=valid)
        self.last_valid_ts[valid] = raw.timestamp_us

        self._ring[self.count % self.capacity] = data
        self.count += 1
        self.timestamps.append(raw.timestamp_us)
        self.frame_numbers.append(raw.frame_number)
        if len(self.timestamps) > self.capacity:
            del self.timestamps[0], self.frame_numbers[0]
        self.prev_raw = self._ring[(self.count - 1) % self.capacity]
        self.prev_output = np.array(output.data if output is not None else data)


def _check(current: DepthFrame, history: PixelHistory) -> bool:
    """True when the history holds at least one usable frame."""
    if history.count == 0:
        return False
    if current.data.shape != history.shape:
        raise ValidationError(f"frame {current.frame_number}: shape {current.data.shape} != history {history.shape}")
    if history.timestamps[-1] > current.timestamp_us:
        raise ValidationError(f"frame {current.frame_number}: history is newer than the current frame")
    return True


def _held_value(history: PixelHistory, params: FilterParams) -> NDArray:
    return history.prev_output if params.hold_source == "output" else history.prev_raw


def historic_fill(current: DepthFrame, history: PixelHistory, params: FilterParams = FilterParams()) -> DepthFrame:
    """Replace invalid pixels by the latest valid reading within the time window."""
    if not _check(current, history):
        return current
    window_us = params.historic_window_ms * 1000.0
    fill = (current.data == 0) & (current.timestamp_us - history.last_valid_ts <= window_us)
    return current.replace_data(np.where(fill, history.last_valid, current.data))


def small_jitter_hold(current: DepthFrame, history: PixelHistory, params: FilterParams = FilterParams()) -> DepthFrame:
    """Hold the previous value where the reading is within tolerance of the moving average."""
    if not _check(current, history):
        return current
    s, c = history.small_window
    cur = current.data.astype(np.int64)
    # |cur - s/c| <= thr  <=>  |cur*c - s| <= thr*c, exact in integers
    near = (cur > 0) & (c > 0) & (np.abs(cur * c - s) <= params.small_threshold_mm * c)
    prev = _held_value(history, params)
    return current.replace_data(np.where(near & (prev > 0), prev, current.data))


def large_jitter_hold(current: DepthFrame, history: PixelHistory, params: FilterParams = FilterParams()) -> DepthFrame:
    """Hold the previous value where the recent change rate exceeds ``large_ratio``."""
    if not _check(current, history):
        return current
    busy = history.xi / params.large_n2 > params.large_ratio
    prev = _held_value(history, params)
    return current.replace_data(np.where(busy & (prev > 0), prev, current.data))


def filter_frame(current: DepthFrame, history: PixelHistory, params: FilterParams = FilterParams()) -> DepthFrame:
    """Run all three stages, then record the raw frame in ``history``."""
    out = historic_fill(current, history, params)
    out = small_jitter_hold(out, history, params)
    out = large_jitter_hold(out, history, params)
    history.push(current, out)
    return out


class TemporalFilter:
    def __init__(self, params: FilterParams = FilterParams()):
        self.params = params
        self.history = PixelHistory(params)

    def __call__(self, frame: DepthFrame) -> DepthFrame:
        return filter_frame(frame, self.history, self.params)


def filter_stream(frames: Iterable[DepthFrame], params: FilterParams = FilterParams()) -> Iterator[DepthFrame]:
    f = TemporalFilter(params)
    for frame in frames:
        yield f(frame)
