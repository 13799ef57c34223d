"""Renderer-side depth/color pair synchronisation over a simulated network.

Depth and color halves of a frame travel on separate channels. The renderer
shows frames in increasing frame-number order:

* a frame renders once both halves are present and no lower-numbered frame
  is still waiting for its other half;
* an incomplete frame is skipped ``out_of_order_wait_ms`` after its first
  half arrived;
* when the newest frame number seen runs more than ``max_lag_ms`` of capture
  time ahead of the displayed frame, the renderer jumps to the newest
  complete frame, superseding everything below it.

Packets arriving at the same virtual time as a timeout are handled first.
"""

from __future__ import annotations

import csv
import heapq
import io
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .core import FramePair, ValidationError, VolcapError


class OrderingError(VolcapError, ValueError):
    pass


class Channel(str, Enum):
    DEPTH = "depth"
    COLOR = "color"


class Action(str, Enum):
    RENDER = "render"
    SKIP = "skip"
    JUMP_TO = "jump_to"
    WAIT = "wait"


@dataclass(frozen=True)
class StreamPacket:
    channel: Channel
    frame_number: int
    send_time_ms: float
    arrival_time_ms: float
    payload: Any = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.arrival_time_ms < self.send_time_ms:
            raise ValidationError(f"packet for frame {self.frame_number} arrives before it was sent")


@dataclass(frozen=True)
class SyncPolicy:
    out_of_order_wait_ms: float = 100.0
    max_lag_ms: float = 200.0
    delivery_fps: float = 15.0
    capture_fps: float = 30.0

    def __post_init__(self):
        for name in ("out_of_order_wait_ms", "max_lag_ms", "delivery_fps", "capture_fps"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"SyncPolicy.{name} must be positive")

    def lag_exceeded(self, frames: int) -> bool:
        """True when ``frames`` capture intervals span more than ``max_lag_ms``."""
        return frames * 1000.0 > self.max_lag_ms * self.capture_fps


@dataclass(frozen=True)
class RenderDecision:
    time_ms: float
    action: Action
    frame_number: int


@dataclass
class SyncStats:
    rendered: int = 0  # includes frames shown through a jump
    skipped: int = 0
    superseded: int = 0
    jumps: int = 0
    mean_render_latency_ms: float = 0.0
    frames_seen: int = 0

    def to_json(self) -> dict:
        return dict(vars(self))


class FrameSynchronizer:
    """Event-driven synchroniser; feed packets in arrival order, then :meth:`finish`."""

    def __init__(self, policy: SyncPolicy = SyncPolicy(), report_waits: bool = False):
        self.policy = policy
        self.report_waits = report_waits
        self.decisions: list[RenderDecision] = []
        self.current: int | None = None
        self.highest_seen: int | None = None
        self.outcome: dict[int, str] = {}
        self._pending: dict[int, set[Channel]] = {}
        self._send_time: dict[int, float] = {}
        self._timers: list[tuple[float, int]] = []
        self._waited: set[int] = set()
        self._now = float("-inf")
        self._latencies: list[float] = []

    # -- event handling ---------------------------------------------------
    def feed(self, packet: StreamPacket) -> None:
        t = packet.arrival_time_ms
        if t < self._now:
            raise OrderingError(f"packet for frame {packet.frame_number} at {t} ms arrives before {self._now} ms")
        self._fire_timers(before=t)
        self._now = t
        n = packet.frame_number
        self._send_time.setdefault(n, packet.send_time_ms)
        if self.highest_seen is None or n > self.highest_seen:
            self.highest_seen = n
        if n in self.outcome:
            return  # late half of a frame already accounted for
        if self.current is not None and n <= self.current:
            self.outcome[n] = "superseded"
            return
        halves = self._pending.get(n)
        if halves is None:
            halves = self._pending[n] = set()
            heapq.heappush(self._timers, (t + self.policy.out_of_order_wait_ms, n))
        halves.add(Channel(packet.channel))
        self._settle(t)

    def finish(self) -> list[RenderDecision]:
        self._fire_timers(before=float("inf"))
        return self.decisions

    def _fire_timers(self, before: float) -> None:
        while self._timers and self._timers[0][0] < before:
            deadline, n = heapq.heappop(self._timers)
            if n in self._pending and len(self._pending[n]) < 2:
                del self._pending[n]
                self.outcome[n] = "skipped"
                self._emit(deadline, Action.SKIP, n)
                self._now = max(self._now, deadline)
                self._settle(deadline)

    def _complete(self, n: int) -> bool:
        return len(self._pending.get(n, ())) == 2

    def _settle(self, t: float) -> None:
        if (
            self.current is not None
            and self.highest_seen is not None
            and self.policy.lag_exceeded(self.highest_seen - self.current)
        ):
            complete = [n for n in self._pending if self._complete(n)]
            if complete:
                target = max(complete)
                for n in [m for m in self._pending if m < target]:
                    del self._pending[n]
                    self.outcome[n] = "superseded"
                self._show(t, Action.JUMP_TO, target)

        while self._pending:
            lowest = min(self._pending)
            if not self._complete(lowest):
                if self.report_waits and lowest not in self._waited and any(map(self._complete, self._pending)):
                    self._waited.add(lowest)
                    self._emit(t, Action.WAIT, lowest)
                break
            self._show(t, Action.RENDER, lowest)

    def _show(self, t: float, action: Action, n: int) -> None:
        del self._pending[n]
        self.outcome[n] = "rendered"
        self.current = n
        self._latencies.append(t - self._send_time[n])
        self._emit(t, action, n)

    def _emit(self, t: float, action: Action, n: int) -> None:
        self.decisions.append(RenderDecision(t, action, n))

    def stats(self) -> SyncStats:
        vals = list(self.outcome.values())
        return SyncStats(
            rendered=vals.count("rendered"),
            skipped=vals.count("skipped"),
            superseded=vals.count("superseded"),
            jumps=sum(d.action is Action.JUMP_TO for d in self.decisions),
            mean_render_latency_ms=float(np.mean(self._latencies)) if self._latencies else 0.0,
            frames_seen=len(self.outcome) + len(self._pending),
        )


def synchronize(
    packets: Iterable[StreamPacket], policy: SyncPolicy = SyncPolicy(), report_waits: bool = False
) -> list[RenderDecision]:
    """Run the policy over packets sorted by arrival time."""
    sync = FrameSynchronizer(policy, report_waits)
    for p in packets:
        sync.feed(p)
    return sync.finish()


# -- simulated network ------------------------------------------------------


@dataclass(frozen=True)
class ChannelModel:
    latency_ms: float = 0.0
    jitter_ms: float = 0.0  # std-dev of Gaussian latency noise
    loss_rate: float = 0.0

    def __post_init__(self):
        if self.latency_ms < 0 or self.jitter_ms < 0:
            raise ValidationError("latency and jitter must be non-negative")
        if not 0 <= self.loss_rate <= 1:
            raise ValidationError("loss_rate must lie in [0, 1]")


@dataclass(frozen=True)
class NetworkModel:
    depth: ChannelModel = ChannelModel()
    color: ChannelModel = ChannelModel()
    seed: int = 0

    @classmethod
    def symmetric(cls, latency_ms=0.0, jitter_ms=0.0, loss_rate=0.0, seed=0) -> NetworkModel:
        ch = ChannelModel(latency_ms, jitter_ms, loss_rate)
        return cls(ch, ch, seed)


def make_packets(frames: Sequence[tuple[int, float, Any]], network: NetworkModel) -> list[StreamPacket]:
    """Split ``(frame_number, send_time_ms, payload)`` frames into per-channel packets.

    Random draws use ``numpy.random.default_rng(seed)`` (PCG64) in a fixed
    order: per frame, depth then color, each drawing one uniform (loss) and
    one standard normal (latency noise). Delays are clipped at zero.
    """
    rng = np.random.default_rng(network.seed)
    packets = []
    for n, send, payload in frames:
        for channel, model in ((Channel.DEPTH, network.depth), (Channel.COLOR, network.color)):
            lost = rng.random() < model.loss_rate
            delay = max(0.0, model.latency_ms + model.jitter_ms * rng.standard_normal())
            if not lost:
                packets.append(StreamPacket(channel, n, send, send + delay, payload))
    order = {Channel.DEPTH: 0, Channel.COLOR: 1}
    packets.sort(key=lambda p: (p.arrival_time_ms, p.frame_number, order[p.channel]))
    return packets


def decimate(pairs: Sequence[FramePair], policy: SyncPolicy = SyncPolicy()) -> list[FramePair]:
    """Keep the pairs a sender at ``delivery_fps`` transmits from a ``capture_fps`` stream."""
    step = max(1, round(policy.capture_fps / policy.delivery_fps))
    return [p for p in pairs if p.frame_number % step == 0]


@dataclass
class SimulationResult:
    decisions: list[RenderDecision]
    stats: SyncStats
    packets: list[StreamPacket]


def simulate_network(
    pairs: Sequence[FramePair], network: NetworkModel = NetworkModel(), policy: SyncPolicy = SyncPolicy()
) -> SimulationResult:
    frames = [(p.frame_number, p.timestamp_us / 1000.0, p) for p in pairs]
    packets = make_packets(frames, network)
    sync = FrameSynchronizer(policy)
    for p in packets:
        sync.feed(p)
    decisions = sync.finish()
    return SimulationResult(decisions, sync.stats(), packets)


def decisions_csv(decisions: Iterable[RenderDecision]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_ms", "action", "frame_number"])
    for d in decisions:
        w.writerow([f"{d.time_ms:.3f}", d.action.value, d.frame_number])
    return buf.getvalue()


def write_decisions(decisions: Iterable[RenderDecision], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        f.write(decisions_csv(decisions))


def read_decisions(path: str | os.PathLike) -> list[RenderDecision]:
    with open(path, newline="") as f:
        return [
            RenderDecision(float(r["time_ms"]), Action(r["action"]), int(r["frame_number"]))
            for r in csv.DictReader(f)
        ]
