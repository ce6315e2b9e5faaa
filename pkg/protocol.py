"""
Per-node state machine of the self-organising resource discovery protocol.

Every handler takes a node, a message and the current tick and returns the
messages to send as explicit effects. Nothing here performs I/O, so the same
code runs under the discrete-event kernel or a hand-driven test.
"""

import logging
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Union

logger = logging.getLogger(__name__)

# --- Constants for Configuration ---
DEFAULT_QTTL = 5
DEFAULT_ATTL = 3
DEFAULT_CACHE_MAX = 32
DEFAULT_CACHE_LIFETIME = 200
DEFAULT_ADV_DELTA = 0.1
DEFAULT_FANOUT = 1


class PolicyError(ValueError):
    """A policy record with out-of-range knobs."""


class ProtocolViolation(Exception):
    """A message that breaks the protocol's structural rules."""


class ResourceKind(str, Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


class Variant(str, Enum):
    QUERY_ONLY = "query_only"
    QUERY_AND_ADVERT = "query_and_advert"


@dataclass(frozen=True)
class ResourceType:
    name: str
    kind: ResourceKind = ResourceKind.DYNAMIC

    def __post_init__(self):
        if not self.name:
            raise ValueError("resource type name must be non-empty")


CPU = ResourceType("cpu", ResourceKind.DYNAMIC)
DISK = ResourceType("disk", ResourceKind.STATIC)


@dataclass(frozen=True)
class ResourceSnapshot:
    node: int
    rtype: ResourceType
    availability: float
    observed_at: int

    def __post_init__(self):
        if not 0.0 <= self.availability <= 1.0:
            raise ValueError(f"availability {self.availability} outside [0, 1]")
        if self.observed_at < 0:
            raise ValueError(f"observed_at {self.observed_at} is negative")


@dataclass(frozen=True)
class Query:
    id: str
    origin: int
    rtype: ResourceType
    demand: float
    qttl: int
    path: tuple[int, ...]


@dataclass(frozen=True)
class QueryReply:
    query_id: str
    responder: int
    snapshot: ResourceSnapshot
    return_path: tuple[int, ...]

    def __post_init__(self):
        if self.snapshot.node != self.responder:
            raise ProtocolViolation("reply snapshot must describe the responder")


@dataclass(frozen=True)
class Advertisement:
    id: str
    snapshot: ResourceSnapshot
    attl: int


Message = Union[Query, QueryReply, Advertisement]


@dataclass(frozen=True)
class CacheEntry:
    snapshot: ResourceSnapshot
    inserted_at: int


@dataclass(frozen=True)
class PolicyConfig:
    """Protocol knobs. One record per node; SLA-derived policies land here."""

    qttl_init: int = DEFAULT_QTTL
    attl_init: int = DEFAULT_ATTL
    cache_max: int = DEFAULT_CACHE_MAX
    cache_lifetime: int = DEFAULT_CACHE_LIFETIME
    adv_delta: float = DEFAULT_ADV_DELTA
    fanout: int = DEFAULT_FANOUT
    collect_window: int | None = None
    variant: Variant = Variant.QUERY_AND_ADVERT

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.collect_window is None:
            object.__setattr__(self, "collect_window", 2 * self.qttl_init)
        for name in ("qttl_init", "attl_init", "cache_max", "cache_lifetime", "collect_window"):
            if getattr(self, name) < 0:
                raise PolicyError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.adv_delta <= 1.0:
            raise PolicyError(f"adv_delta must be in (0, 1], got {self.adv_delta}")
        if self.fanout < 1:
            raise PolicyError(f"fanout must be >= 1, got {self.fanout}")


@dataclass
class NodeState:
    id: int
    base_neighbours: tuple[int, ...]
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    local: dict[str, float] = field(default_factory=dict)
    caches: dict[str, dict[int, CacheEntry]] = field(default_factory=dict)
    seen_ads: set[str] = field(default_factory=set)
    last_advertised: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    next_seq: int = 0

    def snapshot(self, rtype: ResourceType, now: int) -> ResourceSnapshot:
        return ResourceSnapshot(self.id, rtype, self.local.get(rtype.name, 0.0), now)

    def cache_for(self, rtype: ResourceType) -> dict[int, CacheEntry]:
        return self.caches.setdefault(rtype.name, {})

    def new_id(self, prefix: str) -> str:
        self.next_seq += 1
        return f"{prefix}{self.id}.{self.next_seq}"


@dataclass(frozen=True)
class QueryEffects:
    reply: QueryReply | None
    forwards: tuple[tuple[int, Query], ...]


@dataclass(frozen=True)
class ReplyEffects:
    deliver: QueryReply | None
    forward_to: int | None
    forwarded: QueryReply | None


@dataclass
class DiscoveryRound:
    query_id: str
    origin: int
    rtype: ResourceType
    demand: float
    started_at: int
    deadline: int
    replies: list[QueryReply] = field(default_factory=list)


def _expired(entry: CacheEntry, now: int, lifetime: int) -> bool:
    return now - entry.inserted_at > lifetime


def _cache_insert(node: NodeState, snapshot: ResourceSnapshot, now: int):
    """Insert or refresh a snapshot; newer observed_at wins, oldest entry makes room."""
    limit = node.policy.cache_max
    if limit == 0:
        return
    cache = node.cache_for(snapshot.rtype)
    current = cache.get(snapshot.node)
    if current is not None:
        if current.snapshot.observed_at > snapshot.observed_at:
            return
        cache[snapshot.node] = CacheEntry(snapshot, now)
        return
    if len(cache) >= limit:
        stale = [k for k, e in cache.items() if _expired(e, now, node.policy.cache_lifetime)]
        for k in stale:
            del cache[k]
        while len(cache) >= limit:
            oldest = min(cache, key=lambda k: (cache[k].inserted_at, k))
            del cache[oldest]
    cache[snapshot.node] = CacheEntry(snapshot, now)


def _cached_candidates(node: NodeState, rtype: ResourceType, demand: float,
                       exclude, now: int) -> list[int]:
    lifetime = node.policy.cache_lifetime
    entries = [
        (e.snapshot.availability, k)
        for k, e in node.caches.get(rtype.name, {}).items()
        if k not in exclude and e.snapshot.availability >= demand and not _expired(e, now, lifetime)
    ]
    entries.sort(key=lambda item: (-item[0], item[1]))
    return [k for _, k in entries]


def select_target(node: NodeState, rtype: ResourceType, demand: float,
                  exclude, now: int) -> list[int]:
    """
    Best fresh cached nodes first (availability descending, lower id on
    ties), then base neighbours in a shuffle seeded by (seed, node, tick).
    """
    candidates = _cached_candidates(node, rtype, demand, exclude, now)
    chosen = set(candidates)
    fallback = [j for j in node.base_neighbours if j not in exclude and j not in chosen]
    random.Random(f"{node.seed}:{node.id}:{now}").shuffle(fallback)
    return candidates + fallback


def handle_query(node: NodeState, q: Query, now: int) -> QueryEffects:
    if q.qttl < 0:
        raise ProtocolViolation(f"query {q.id} has negative qttl {q.qttl}")
    if not q.path or q.path[0] != q.origin or q.path[-1] != node.id:
        raise ProtocolViolation(f"query {q.id} path {q.path} does not end at node {node.id}")
    if len(set(q.path)) != len(q.path):
        raise ProtocolViolation(f"query {q.id} path {q.path} is cyclic")

    reply = None
    if node.local.get(q.rtype.name, 0.0) >= q.demand:
        back = tuple(reversed(q.path[:-1])) or (node.id,)
        reply = QueryReply(q.id, node.id, node.snapshot(q.rtype, now), back)

    forwards: list[tuple[int, Query]] = []
    if q.qttl > 0:
        targets = select_target(node, q.rtype, q.demand, set(q.path), now)[: node.policy.fanout]
        forwards = [(t, replace(q, qttl=q.qttl - 1, path=q.path + (t,))) for t in targets]
    return QueryEffects(reply, tuple(forwards))


def handle_reply(node: NodeState, r: QueryReply, now: int) -> ReplyEffects:
    if not r.return_path or r.return_path[0] != node.id:
        raise ProtocolViolation(f"reply to {r.query_id} reached node {node.id} off its return path")
    _cache_insert(node, r.snapshot, now)
    rest = r.return_path[1:]
    if rest:
        return ReplyEffects(None, rest[0], replace(r, return_path=rest))
    return ReplyEffects(r, None, None)


def handle_advertisement(node: NodeState, a: Advertisement, sender: int | None,
                         now: int) -> list[tuple[int, Advertisement]]:
    if a.attl < 0:
        raise ProtocolViolation(f"advertisement {a.id} has negative attl {a.attl}")
    if a.id in node.seen_ads:
        return []
    node.seen_ads.add(a.id)
    _cache_insert(node, a.snapshot, now)
    if a.attl == 0:
        return []
    child = replace(a, attl=a.attl - 1)
    return [(j, child) for j in node.base_neighbours if j != sender]


def maybe_advertise(node: NodeState, rtype: ResourceType, now: int) -> Advertisement | None:
    if node.policy.variant is not Variant.QUERY_AND_ADVERT:
        return None
    current = node.local.get(rtype.name, 0.0)
    previous = node.last_advertised.get(rtype.name)
    if previous is not None and abs(current - previous) < node.policy.adv_delta:
        return None
    node.last_advertised[rtype.name] = current
    return Advertisement(node.new_id("a"), node.snapshot(rtype, now), node.policy.attl_init)


def evict_stale(node: NodeState, now: int) -> int:
    removed = 0
    lifetime = node.policy.cache_lifetime
    for cache in node.caches.values():
        stale = [k for k, e in cache.items() if _expired(e, now, lifetime)]
        for k in stale:
            del cache[k]
        removed += len(stale)
        overflow = len(cache) - node.policy.cache_max
        if overflow > 0:
            for k in sorted(cache, key=lambda k: (cache[k].inserted_at, k))[:overflow]:
                del cache[k]
            removed += overflow
    return removed


def run_discovery(origin: NodeState, rtype: ResourceType, demand: float,
                  now: int) -> tuple[DiscoveryRound, QueryEffects]:
    """Open a discovery round and issue its initial query at the origin."""
    q = Query(origin.new_id("q"), origin.id, rtype, demand, origin.policy.qttl_init, (origin.id,))
    discovery = DiscoveryRound(q.id, origin.id, rtype, demand, now, now + origin.policy.collect_window)
    return discovery, handle_query(origin, q, now)


def placement_candidates(discovery: DiscoveryRound, origin: NodeState, now: int) -> list[int]:
    """
    Every node the round learned of, best first: repliers by snapshot
    availability, then fresh cached candidates, then the origin itself.
    Ties go to the lower id.
    """
    ranked = sorted(discovery.replies, key=lambda r: (-r.snapshot.availability, r.responder))
    candidates = list(dict.fromkeys(r.responder for r in ranked))
    candidates += _cached_candidates(origin, discovery.rtype, discovery.demand, set(candidates), now)
    if origin.id not in candidates:
        candidates.append(origin.id)
    return candidates


def conclude_discovery(discovery: DiscoveryRound, origin: NodeState, now: int) -> int:
    candidates = placement_candidates(discovery, origin, now)
    if len(candidates) == 1 and not discovery.replies:
        logger.debug("round %s: no replies and no cached candidate, placing at origin %d",
                     discovery.query_id, origin.id)
    return candidates[0]


# --- Canonical message encoding ---

def _rtype_from(data) -> ResourceType:
    return ResourceType(data["name"], ResourceKind(data["kind"]))


def _snapshot_to(s: ResourceSnapshot) -> dict:
    return {
        "node": s.node,
        "rtype": {"name": s.rtype.name, "kind": s.rtype.kind.value},
        "availability": s.availability,
        "observed_at": s.observed_at,
    }


def _snapshot_from(data) -> ResourceSnapshot:
    return ResourceSnapshot(data["node"], _rtype_from(data["rtype"]), data["availability"], data["observed_at"])


def encode_message(message: Message) -> dict:
    """JSON-compatible record with the message's field names and a "type" tag."""
    if isinstance(message, Query):
        return {
            "type": "query", "id": message.id, "origin": message.origin,
            "rtype": {"name": message.rtype.name, "kind": message.rtype.kind.value},
            "demand": message.demand, "qttl": message.qttl, "path": list(message.path),
        }
    if isinstance(message, QueryReply):
        return {
            "type": "reply", "query_id": message.query_id, "responder": message.responder,
            "snapshot": _snapshot_to(message.snapshot), "return_path": list(message.return_path),
        }
    if isinstance(message, Advertisement):
        return {"type": "advertisement", "id": message.id,
                "snapshot": _snapshot_to(message.snapshot), "attl": message.attl}
    raise TypeError(f"not a protocol message: {message!r}")


def decode_message(data: dict) -> Message:
    kind = data.get("type")
    if kind == "query":
        return Query(data["id"], data["origin"], _rtype_from(data["rtype"]),
                     data["demand"], data["qttl"], tuple(data["path"]))
    if kind == "reply":
        return QueryReply(data["query_id"], data["responder"],
                          _snapshot_from(data["snapshot"]), tuple(data["return_path"]))
    if kind == "advertisement":
        return Advertisement(data["id"], _snapshot_from(data["snapshot"]), data["attl"])
    raise ProtocolViolation(f"unknown message type {kind!r}")
