"""
Deterministic discrete-event kernel for the resource discovery protocol.

Drives Poisson request arrivals over a small-world overlay of slot servers,
runs the protocol through its effect lists with one tick per hop, scores
every placement against a centralised oracle and sweeps the mean load.
"""

import heapq
import json
import logging
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

import protocol
from protocol import CPU, NodeState, PolicyConfig, Variant
from topology import OverlayGraph, build_small_world, TopologyError

logger = logging.getLogger(__name__)

# --- Constants for Configuration ---
DEFAULT_NODES = 1600
DEFAULT_CAPACITY = 1
DEFAULT_JOB_DURATION = 40.0
DEFAULT_HORIZON = 500
DEFAULT_EVICT_INTERVAL = 10
LOAD_BINS = 20
HOP_LATENCY = 1
SWEEP_CSV_COLUMNS = ["variant", "target_load", "mean_load", "success_rate",
                     "stderr", "msgs_per_request", "seed_count"]


class ConfigError(ValueError):
    """Experiment configuration outside its valid range."""


class SimulationError(RuntimeError):
    """A broken kernel invariant (conservation, oracle agreement)."""


class EventKind(str, Enum):
    REQUEST_ARRIVAL = "request_arrival"
    MESSAGE_DELIVERY = "message_delivery"
    JOB_COMPLETION = "job_completion"
    ROUND_TIMEOUT = "round_timeout"
    PERIODIC_EVICT = "periodic_evict"


@dataclass
class SimConfig:
    n: int = DEFAULT_NODES
    k_near: int = 4
    n_far: int = 1
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    arrival_rate: float | None = None
    job_duration_mean: float = DEFAULT_JOB_DURATION
    node_capacity: int = DEFAULT_CAPACITY
    target_load: float | None = 0.5
    horizon: int = DEFAULT_HORIZON
    warmup: int | None = None
    seed: int = 0
    demand: float | None = None
    prefill: bool = True
    evict_interval: int = DEFAULT_EVICT_INTERVAL
    trace: bool = False

    def __post_init__(self):
        if self.warmup is None:
            self.warmup = self.horizon // 10
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.node_capacity < 1:
            raise ConfigError(f"node_capacity must be >= 1, got {self.node_capacity}")
        if not self.horizon > self.warmup >= 0:
            raise ConfigError(f"need horizon > warmup >= 0, got horizon={self.horizon} warmup={self.warmup}")
        if self.job_duration_mean <= 0:
            raise ConfigError(f"job_duration_mean must be positive, got {self.job_duration_mean}")
        if self.target_load is None and self.arrival_rate is None:
            raise ConfigError("one of target_load or arrival_rate is required")
        if self.target_load is not None and not 0.0 < self.target_load < 1.0:
            raise ConfigError(f"target_load must be in (0, 1), got {self.target_load}")
        if self.arrival_rate is not None and self.arrival_rate < 0:
            raise ConfigError(f"arrival_rate must be >= 0, got {self.arrival_rate}")
        if self.demand is not None and not 0.0 <= self.demand <= 1.0:
            raise ConfigError(f"demand must be in [0, 1], got {self.demand}")
        if self.evict_interval < 1:
            raise ConfigError(f"evict_interval must be >= 1, got {self.evict_interval}")
        bad_ring = self.k_near < 2 or self.k_near % 2 or self.k_near > max(self.n - 1, 2)
        if self.n >= 2 and (bad_ring or self.n_far < 0):
            raise ConfigError(f"invalid overlay parameters k_near={self.k_near} n_far={self.n_far} for n={self.n}")

    @property
    def effective_rate(self) -> float:
        if self.target_load is not None:
            return self.target_load * self.n * self.node_capacity / self.job_duration_mean
        return self.arrival_rate

    @property
    def effective_demand(self) -> float:
        return self.demand if self.demand is not None else 1.0 / self.node_capacity


@dataclass
class ServerNode:
    capacity: int
    busy_slots: int = 0

    @property
    def load(self) -> float:
        return self.busy_slots / self.capacity

    @property
    def availability(self) -> float:
        return 1.0 - self.load


@dataclass(frozen=True)
class Event:
    at: int
    seq: int
    kind: EventKind
    payload: object = None


@dataclass(frozen=True)
class OracleResult:
    min_load: float
    argmin: frozenset


@dataclass
class Metrics:
    requests: int = 0
    successes: int = 0
    queued: int = 0
    messages_sent: dict = field(default_factory=lambda: {"query": 0, "reply": 0, "advertisement": 0})
    bin_requests: list = field(default_factory=lambda: [0] * LOAD_BINS)
    bin_successes: list = field(default_factory=lambda: [0] * LOAD_BINS)
    mean_load: float = 0.0
    jobs_started: int = 0
    jobs_completed: int = 0

    @property
    def success_rate(self) -> float:
        return self.successes / self.requests if self.requests else 1.0

    @property
    def total_messages(self) -> int:
        return sum(self.messages_sent.values())

    @property
    def messages_per_request(self) -> float:
        return self.total_messages / self.requests if self.requests else 0.0

    def to_dict(self) -> dict:
        data = asdict(self)
        data["success_rate"] = self.success_rate
        data["messages_per_request"] = self.messages_per_request
        return data


class EventQueue:
    """
    Calendar of per-tick FIFO buckets. Events run in (tick, insertion
    sequence) order.
    """

    def __init__(self):
        self._ticks: list[int] = []
        self._buckets: dict[int, deque] = {}
        self._seq = 0

    def __len__(self):
        return sum(len(b) for b in self._buckets.values())

    def __bool__(self):
        return bool(self._ticks)

    def push(self, at: int, kind: EventKind, payload=None) -> Event:
        self._seq += 1
        event = Event(at, self._seq, kind, payload)
        bucket = self._buckets.get(at)
        if bucket is None:
            bucket = self._buckets[at] = deque()
            heapq.heappush(self._ticks, at)
        bucket.append(event)
        return event

    def peek_time(self) -> int:
        return self._ticks[0]

    def pop(self) -> Event:
        at = self._ticks[0]
        bucket = self._buckets[at]
        event = bucket.popleft()
        if not bucket:
            heapq.heappop(self._ticks)
            del self._buckets[at]
        return event


class LoadIndex:
    """Histogram of busy-slot counts; gives the global minimum in O(capacity)."""

    def __init__(self, n: int, capacity: int):
        self.counts = [0] * (capacity + 1)
        self.counts[0] = n

    def move(self, old: int, new: int):
        self.counts[old] -= 1
        self.counts[new] += 1

    def min_busy(self) -> int:
        for level, count in enumerate(self.counts):
            if count:
                return level
        raise SimulationError("load index is empty")


def oracle_best(servers: Sequence[ServerNode]) -> OracleResult:
    """Exact global minimum load and every node attaining it."""
    loads = [s.load for s in servers]
    low = min(loads)
    return OracleResult(low, frozenset(i for i, load in enumerate(loads) if load == low))


def score_request(chosen: int, oracle: OracleResult) -> bool:
    return chosen in oracle.argmin


def _make_overlay(cfg: SimConfig) -> OverlayGraph:
    if cfg.n == 1:
        return OverlayGraph(n=1, adjacency=((),), seed=cfg.seed)
    try:
        return build_small_world(cfg.n, cfg.k_near, cfg.n_far, cfg.seed)
    except TopologyError as exc:
        raise ConfigError(str(exc)) from exc


class Simulation:
    """One run of the discovery protocol; use run_experiment for the usual entry."""

    def __init__(self, cfg: SimConfig, check_oracle: bool = False):
        self.cfg = cfg
        self.check_oracle = check_oracle
        self.graph = _make_overlay(cfg)
        arrivals, durations, prefill = np.random.SeedSequence(cfg.seed).spawn(3)
        self.arrival_rng = np.random.default_rng(arrivals)
        self.duration_rng = np.random.default_rng(durations)
        self.prefill_rng = np.random.default_rng(prefill)

        self.servers = [ServerNode(cfg.node_capacity) for _ in range(cfg.n)]
        self.waiting: list[deque] = [deque() for _ in range(cfg.n)]
        self.loads = LoadIndex(cfg.n, cfg.node_capacity)
        self.nodes = [
            NodeState(i, self.graph.adjacency[i], cfg.policy, local={CPU.name: 1.0}, seed=cfg.seed)
            for i in range(cfg.n)
        ]
        self.queue = EventQueue()
        self.metrics = Metrics()
        self.rounds: dict[str, protocol.DiscoveryRound] = {}
        self.trace: list[dict] = []
        self.now = 0
        self.total_busy = 0
        self._load_area = 0.0
        self._clock = 0.0
        self._demand = cfg.effective_demand

    # --- time and load bookkeeping ---

    def _advance(self, to: int):
        lo = max(self.now, self.cfg.warmup)
        hi = min(to, self.cfg.horizon)
        if hi > lo:
            self._load_area += self.total_busy * (hi - lo)
        self.now = to

    def _set_busy(self, node: int, busy: int):
        server = self.servers[node]
        self.loads.move(server.busy_slots, busy)
        self.total_busy += busy - server.busy_slots
        server.busy_slots = busy
        self.nodes[node].local[CPU.name] = server.availability

    def _record(self, kind: str, **data):
        if self.cfg.trace:
            self.trace.append({"at": self.now, "event": kind, **data})

    # --- messaging ---

    def _send(self, sender: int | None, target: int, message: protocol.Message):
        if target == sender:
            self._deliver(sender, target, message)
            return
        if isinstance(message, protocol.Query):
            self.metrics.messages_sent["query"] += 1
        elif isinstance(message, protocol.QueryReply):
            self.metrics.messages_sent["reply"] += 1
        else:
            self.metrics.messages_sent["advertisement"] += 1
        self.queue.push(self.now + HOP_LATENCY, EventKind.MESSAGE_DELIVERY, (sender, target, message))

    def _deliver(self, sender, target: int, message: protocol.Message):
        node = self.nodes[target]
        if self.cfg.trace:
            self._record("deliver", sender=sender, target=target, message=protocol.encode_message(message))
        if isinstance(message, protocol.Query):
            effects = protocol.handle_query(node, message, self.now)
            self._apply_query_effects(target, effects)
        elif isinstance(message, protocol.QueryReply):
            effects = protocol.handle_reply(node, message, self.now)
            if effects.deliver is not None:
                discovery = self.rounds.get(effects.deliver.query_id)
                if discovery is not None and self.now <= discovery.deadline:
                    discovery.replies.append(effects.deliver)
            elif effects.forward_to is not None:
                self._send(target, effects.forward_to, effects.forwarded)
        else:
            for j, ad in protocol.handle_advertisement(node, message, sender, self.now):
                self._send(target, j, ad)

    def _apply_query_effects(self, at_node: int, effects: protocol.QueryEffects):
        if effects.reply is not None:
            self._send(at_node, effects.reply.return_path[0], effects.reply)
        for target, q in effects.forwards:
            self._send(at_node, target, q)

    def _advertise(self, node: int):
        ad = protocol.maybe_advertise(self.nodes[node], CPU, self.now)
        if ad is not None:
            self._deliver(None, node, ad)

    # --- event handlers ---

    def _schedule_next_arrival(self):
        rate = self.cfg.effective_rate
        if rate <= 0:
            return
        self._clock += float(self.arrival_rng.exponential(1.0 / rate))
        at = int(math.floor(self._clock))
        if at < self.cfg.horizon:
            origin = int(self.arrival_rng.integers(self.cfg.n))
            self.queue.push(at, EventKind.REQUEST_ARRIVAL, origin)

    def _on_arrival(self, origin: int):
        discovery, effects = protocol.run_discovery(self.nodes[origin], CPU, self._demand, self.now)
        self.rounds[discovery.query_id] = discovery
        self._record("arrival", origin=origin, query=discovery.query_id)
        self.queue.push(discovery.deadline + 1, EventKind.ROUND_TIMEOUT, discovery.query_id)
        self._apply_query_effects(origin, effects)
        self._schedule_next_arrival()

    def _job_duration(self) -> int:
        return max(1, int(round(float(self.duration_rng.exponential(self.cfg.job_duration_mean)))))

    def _begin(self, node: int, at: int, duration: int):
        self.metrics.jobs_started += 1
        self.queue.push(at + duration, EventKind.JOB_COMPLETION, node)

    def _start_job(self, node: int, at: int, duration: int):
        self._set_busy(node, self.servers[node].busy_slots + 1)
        self._begin(node, at, duration)

    def _place(self, candidates: list[int]) -> tuple[int, bool]:
        """
        The origin submits to the candidates it learned of. The one with the
        most free slots right now takes the job; when all are full it waits
        at the candidate with the shortest queue. Ties keep candidate order.
        """
        capacity = self.cfg.node_capacity
        free = [c for c in candidates if self.servers[c].busy_slots < capacity]
        if free:
            return min(free, key=lambda c: self.servers[c].busy_slots), True
        return min(candidates, key=lambda c: len(self.waiting[c])), False

    def _on_timeout(self, query_id: str):
        discovery = self.rounds.pop(query_id)
        candidates = protocol.placement_candidates(discovery, self.nodes[discovery.origin], self.now)
        chosen, has_slot = self._place(candidates)
        min_busy = self.loads.min_busy()
        success = self.servers[chosen].busy_slots == min_busy
        if self.check_oracle:
            oracle = oracle_best(self.servers)
            if oracle.min_load != min_busy / self.cfg.node_capacity or score_request(chosen, oracle) != success:
                raise SimulationError(f"load index disagrees with oracle at tick {self.now}")
        self._record("conclude", query=query_id, chosen=chosen, success=success, queued=not has_slot)

        if discovery.started_at >= self.cfg.warmup:
            m = self.metrics
            m.requests += 1
            m.successes += success
            m.queued += not has_slot
            b = min(LOAD_BINS - 1, int(self.total_busy / (self.cfg.n * self.cfg.node_capacity) * LOAD_BINS))
            m.bin_requests[b] += 1
            m.bin_successes[b] += success

        duration = self._job_duration()
        if has_slot:
            self._start_job(chosen, self.now, duration)
            self._advertise(chosen)
        else:
            self.waiting[chosen].append(duration)

    def _on_completion(self, node: int, announce: bool = True):
        self.metrics.jobs_completed += 1
        waiting = self.waiting[node]
        if waiting:
            # the freed slot goes straight to the next waiting job
            self._begin(node, self.now, waiting.popleft())
            return
        self._set_busy(node, self.servers[node].busy_slots - 1)
        if announce:
            self._advertise(node)

    def _on_evict(self):
        for node in self.nodes:
            protocol.evict_stale(node, self.now)
        nxt = self.now + self.cfg.evict_interval
        if nxt < self.cfg.horizon:
            self.queue.push(nxt, EventKind.PERIODIC_EVICT)

    # --- main loop ---

    def _prefill(self):
        cfg = self.cfg
        load = cfg.target_load
        if load is None:
            load = min(1.0, cfg.effective_rate * cfg.job_duration_mean / (cfg.n * cfg.node_capacity))
        busy = self.prefill_rng.binomial(cfg.node_capacity, load, cfg.n)
        for node, slots in enumerate(busy):
            for _ in range(int(slots)):
                self._start_job(node, 0, max(1, int(round(float(
                    self.prefill_rng.exponential(self.cfg.job_duration_mean))))))

    def run(self) -> Metrics:
        cfg = self.cfg
        if cfg.prefill:
            self._prefill()
        for node in range(cfg.n):
            self._advertise(node)
        self.queue.push(cfg.evict_interval, EventKind.PERIODIC_EVICT)
        self._schedule_next_arrival()

        while self.queue and self.queue.peek_time() < cfg.horizon:
            event = self.queue.pop()
            self._advance(event.at)
            if event.kind is EventKind.REQUEST_ARRIVAL:
                self._on_arrival(event.payload)
            elif event.kind is EventKind.MESSAGE_DELIVERY:
                self._deliver(*event.payload)
            elif event.kind is EventKind.JOB_COMPLETION:
                self._on_completion(event.payload)
            elif event.kind is EventKind.ROUND_TIMEOUT:
                self._on_timeout(event.payload)
            else:
                self._on_evict()
        self._advance(cfg.horizon)
        self.metrics.mean_load = self._load_area / ((cfg.horizon - cfg.warmup) * cfg.n * cfg.node_capacity)

        # drain: running and waiting jobs finish, nothing else is processed
        while self.queue:
            event = self.queue.pop()
            if event.kind is EventKind.JOB_COMPLETION:
                self.now = event.at
                self._on_completion(event.payload, announce=False)
        stranded = sum(len(w) for w in self.waiting)
        if self.total_busy != 0 or stranded or self.metrics.jobs_started != self.metrics.jobs_completed:
            raise SimulationError(
                f"job conservation broken: {self.metrics.jobs_started} started, "
                f"{self.metrics.jobs_completed} completed, {self.total_busy} slots busy, {stranded} waiting")

        logger.info("run n=%d variant=%s seed=%d: %d requests, success %.4f, mean load %.4f, %.1f msgs/request",
                    cfg.n, cfg.policy.variant.value, cfg.seed, self.metrics.requests,
                    self.metrics.success_rate, self.metrics.mean_load, self.metrics.messages_per_request)
        return self.metrics

    def trace_lines(self) -> str:
        return "".join(json.dumps(entry, sort_keys=True) + "\n" for entry in self.trace)


def run_experiment(cfg: SimConfig) -> Metrics:
    return Simulation(cfg).run()


def run_static_discovery(nodes: Sequence[NodeState], origin: int, demand: float = 0.0,
                         now: int = 0) -> tuple[int, int]:
    """
    One discovery round on frozen loads, delivered in FIFO hop order until
    no message is left. Returns (chosen node, messages sent).
    """
    discovery, effects = protocol.run_discovery(nodes[origin], CPU, demand, now)
    pending = deque()
    sent = 0

    def queue_effects(at_node, fx):
        if fx.reply is not None:
            pending.append((at_node, fx.reply.return_path[0], fx.reply))
        for target, q in fx.forwards:
            pending.append((at_node, target, q))

    queue_effects(origin, effects)
    while pending:
        sender, target, message = pending.popleft()
        sent += sender != target
        if isinstance(message, protocol.Query):
            queue_effects(target, protocol.handle_query(nodes[target], message, now))
        else:
            fx = protocol.handle_reply(nodes[target], message, now)
            if fx.deliver is not None:
                discovery.replies.append(fx.deliver)
            else:
                pending.append((target, fx.forward_to, fx.forwarded))
    return protocol.conclude_discovery(discovery, nodes[origin], now), sent


# --- load sweep ---

@dataclass(frozen=True)
class SweepRow:
    variant: str
    target_load: float
    mean_load: float
    success_rate: float
    stderr: float
    msgs_per_request: float
    seed_count: int


def _cell_config(base: SimConfig, variant: Variant, load: float, seed_index: int) -> SimConfig:
    return replace(base, target_load=load, arrival_rate=None, seed=base.seed + seed_index,
                   policy=replace(base.policy, variant=Variant(variant)))


def _run_cell(cfg: SimConfig) -> tuple[float, float, int, int]:
    m = run_experiment(cfg)
    return m.success_rate, m.mean_load, m.total_messages, m.requests


def sweep_load(base: SimConfig, load_points: Iterable[float],
               variants: Iterable[Variant] = (Variant.QUERY_ONLY, Variant.QUERY_AND_ADVERT),
               seeds: int = 5, workers: int = 1) -> list[SweepRow]:
    load_points = list(load_points)
    variants = [Variant(v) for v in variants]
    for load in load_points:
        if not 0.0 < load < 1.0:
            raise ConfigError(f"load point {load} outside (0, 1)")
    if seeds < 1:
        raise ConfigError(f"seeds per point must be >= 1, got {seeds}")

    cells = [(v, load, s) for v in variants for load in load_points for s in range(seeds)]
    configs = [_cell_config(base, v, load, s) for v, load, s in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, configs))
    else:
        results = [_run_cell(c) for c in configs]
    by_cell = dict(zip(cells, results))

    rows = []
    for v in variants:
        for load in load_points:
            runs = [by_cell[(v, load, s)] for s in range(seeds)]
            rates = np.array([r[0] for r in runs])
            stderr = float(rates.std(ddof=1) / math.sqrt(seeds)) if seeds > 1 else 0.0
            requests = sum(r[3] for r in runs)
            rows.append(SweepRow(
                variant=v.value,
                target_load=load,
                mean_load=float(np.mean([r[1] for r in runs])),
                success_rate=float(rates.mean()),
                stderr=stderr,
                msgs_per_request=sum(r[2] for r in runs) / requests if requests else 0.0,
                seed_count=seeds,
            ))
            logger.info("sweep %s load=%.2f success=%.4f", v.value, load, rows[-1].success_rate)
    return rows


def sweep_table(rows: Sequence[SweepRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in rows], columns=SWEEP_CSV_COLUMNS)


def sweep_csv_text(rows: Sequence[SweepRow]) -> str:
    return sweep_table(rows).to_csv(index=False, float_format="%.6f", lineterminator="\n")
