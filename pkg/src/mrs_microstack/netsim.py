"""Deterministic topic pub/sub over bandwidth-limited, lossy, delayed channels.

Every node transmits on its own instance of a channel (its radio): bytes are
serialized in FIFO order at the channel bandwidth, each message then travels
for the channel latency and is dropped with the channel loss probability.
Loss is drawn once per message from the network's seeded stream, at publish
time, so the draw order does not depend on how the network is stepped.
"""

from __future__ import annotations

import heapq
import itertools
import math
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class UnknownChannel(KeyError):
    pass


class UnknownTopic(KeyError):
    pass


class OversizedPayload(ValueError):
    pass


class Backpressure(RuntimeError):
    pass


# backlog beyond this many seconds of channel bandwidth is refused
MAX_BACKLOG_S = 10.0


@dataclass(frozen=True)
class ChannelConfig:
    name: str
    bandwidth: float  # bytes/s
    latency: float = 0.0  # s
    loss_probability: float = 0.0
    mtu: int = 65535

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError("loss_probability must be in [0, 1]")
        if self.latency < 0:
            raise ValueError("latency must be non-negative")
        if self.mtu < 1:
            raise ValueError("mtu must be positive")

    def serialization_time(self, nbytes: int) -> float:
        return nbytes / self.bandwidth


LOWBAND = ChannelConfig("lowband", bandwidth=100.0, latency=0.1, loss_probability=0.05, mtu=512)
HIGHBAND = ChannelConfig("highband", bandwidth=1_000_000.0, latency=0.02, loss_probability=0.01, mtu=65535)
PRESETS = {c.name: c for c in (LOWBAND, HIGHBAND)}


def preset(name: str, **overrides) -> ChannelConfig:
    if name not in PRESETS:
        raise UnknownChannel(f"unknown channel preset {name!r}; available: {sorted(PRESETS)}")
    base = PRESETS[name]
    if not overrides:
        return base
    fields = {**base.__dict__, **overrides}
    return ChannelConfig(**fields)


@dataclass(frozen=True)
class TopicMessage:
    topic: str
    origin: str
    payload: bytes
    enqueue_time: float
    seq: int = 0


@dataclass(frozen=True)
class Delivery:
    time: float
    node: str
    message: TopicMessage


@dataclass
class ChannelStats:
    sent: int = 0
    delivered: int = 0
    lost: int = 0
    dropped_no_subscriber: int = 0
    rejected: int = 0
    bytes_sent: int = 0
    bytes_delivered: int = 0

    def in_flight(self) -> int:
        return self.sent - self.delivered - self.lost


@dataclass(order=True)
class _Pending:
    deliver_at: float
    seq: int
    channel: str = field(compare=False)
    message: TopicMessage = field(compare=False)
    subscribers: tuple[str, ...] = field(compare=False)
    lost: bool = field(compare=False)
    done_serializing: float = field(compare=False)


Handler = Callable[[TopicMessage], None]


class Network:
    def __init__(self, seed: int | np.random.SeedSequence | np.random.Generator = 0):
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.now = 0.0
        self.channels: dict[str, ChannelConfig] = {}
        self.stats: dict[str, ChannelStats] = {}
        self._exposed: dict[tuple[str, str], str] = {}  # (node, topic) -> channel
        self._subs: dict[str, dict[str, Handler | None]] = defaultdict(dict)  # topic -> node -> handler
        self._busy_until: dict[tuple[str, str], float] = {}  # (channel, origin)
        self._queue: list[_Pending] = []
        self._seq = itertools.count()
        self.inbox: dict[str, list[TopicMessage]] = defaultdict(list)
        self.trace: list[Delivery] = []

    # -- configuration
    def add_channel(self, config: ChannelConfig):
        self.channels[config.name] = config
        self.stats.setdefault(config.name, ChannelStats())

    def expose_topic(self, node: str, topic: str, channel: str):
        if channel not in self.channels:
            raise UnknownChannel(f"channel {channel!r} not registered; known: {sorted(self.channels)}")
        self._exposed[(node, topic)] = channel

    def subscribe(self, node: str, topic: str, handler: Handler | None = None):
        """Register ``node`` for ``topic``; without a handler messages go to ``inbox[node]``."""
        self._subs[topic][node] = handler

    # -- traffic
    def backlog(self, node: str, channel: str) -> float:
        """Seconds of serialization still queued on a node's channel."""
        return max(0.0, self._busy_until.get((channel, node), 0.0) - self.now)

    def channel_of(self, node: str, topic: str) -> str:
        key = (node, topic)
        if key not in self._exposed:
            raise UnknownTopic(f"topic {topic!r} not exposed by {node!r}")
        return self._exposed[key]

    def publish(self, node: str, topic: str, payload: bytes) -> TopicMessage:
        name = self.channel_of(node, topic)
        cfg = self.channels[name]
        st = self.stats[name]
        if len(payload) > cfg.mtu:
            st.rejected += 1
            raise OversizedPayload(f"{len(payload)} B exceeds mtu {cfg.mtu} B of {name}")
        start = max(self.now, self._busy_until.get((name, node), 0.0))
        if start - self.now + cfg.serialization_time(len(payload)) > MAX_BACKLOG_S:
            st.rejected += 1
            raise Backpressure(f"{node} backlog on {name} would exceed {MAX_BACKLOG_S} s")
        seq = next(self._seq)
        msg = TopicMessage(topic, node, bytes(payload), self.now, seq)
        subs = tuple(sorted(n for n in self._subs.get(topic, {}) if n != node))
        lost = bool(self.rng.random() < cfg.loss_probability)
        done = start + cfg.serialization_time(len(payload))
        self._busy_until[(name, node)] = done
        st.sent += 1
        st.bytes_sent += len(payload)
        if not subs:
            st.dropped_no_subscriber += 1
        heapq.heappush(self._queue, _Pending(done + cfg.latency, seq, name, msg, subs, lost, done))
        return msg

    def step(self, dt: float) -> list[Delivery]:
        """Advance time by ``dt`` and hand over every message due by then."""
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.now += dt
        return self.deliver_due()

    def advance_to(self, t: float) -> list[Delivery]:
        if t < self.now:
            raise ValueError("time went backwards")
        self.now = t
        return self.deliver_due()

    def deliver_due(self) -> list[Delivery]:
        out = []
        eps = 1e-9
        while self._queue and self._queue[0].deliver_at <= self.now + eps:
            p = heapq.heappop(self._queue)
            st = self.stats[p.channel]
            if p.lost:
                st.lost += 1
                continue
            st.delivered += 1
            st.bytes_delivered += len(p.message.payload)
            for node in p.subscribers:
                handler = self._subs.get(p.message.topic, {}).get(node)
                d = Delivery(p.deliver_at, node, p.message)
                out.append(d)
                self.trace.append(d)
                if handler is None:
                    self.inbox[node].append(p.message)
                else:
                    handler(p.message)
        return out

    def drain(self, node: str) -> list[TopicMessage]:
        msgs = self.inbox.pop(node, [])
        return msgs

    def in_flight(self) -> int:
        return len(self._queue)

    def summary(self) -> dict[str, dict[str, int]]:
        return {name: dict(st.__dict__, in_flight=st.in_flight()) for name, st in sorted(self.stats.items())}


# -- mission status record ---------------------------------------------------------

_STATUS = struct.Struct("<HBfff")


@dataclass(frozen=True)
class StatusRecord:
    uav_id: int
    state: int
    position: tuple[float, float, float]

    def encode(self) -> bytes:
        return _STATUS.pack(self.uav_id, self.state, *self.position)

    @classmethod
    def decode(cls, data: bytes) -> "StatusRecord":
        uid, state, x, y, z = _STATUS.unpack(data)
        return cls(uid, state, (x, y, z))


STATUS_SIZE = _STATUS.size


def max_points_for(channel: ChannelConfig, budget_s: float, header: int = 17, per_point: int = 12) -> int:
    """Largest point count whose trajectory record serializes within ``budget_s``."""
    n = int(math.floor((budget_s * channel.bandwidth - header) / per_point))
    n = min(n, (channel.mtu - header) // per_point)
    return max(n, 2)
