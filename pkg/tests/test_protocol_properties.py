"""Randomised operation sequences checked against the protocol invariants."""

import random
from collections import deque

import pytest

import protocol
from protocol import CPU, NodeState, PolicyConfig, Variant
from topology import build_small_world

SEQUENCES = 10_000


def random_network(rng: random.Random):
    n = rng.randint(3, 7)
    g = build_small_world(n, 2, rng.randint(0, 1), seed=rng.randrange(1000))
    policy = PolicyConfig(
        qttl_init=rng.randint(0, 4),
        attl_init=rng.randint(0, 3),
        cache_max=rng.randint(0, 4),
        cache_lifetime=rng.randint(1, 20),
        adv_delta=rng.choice([0.05, 0.1, 0.5]),
        fanout=rng.randint(1, 3),
        variant=rng.choice(list(Variant)),
    )
    nodes = [
        NodeState(i, g.adjacency[i], policy, local={"cpu": rng.choice([0.0, 0.25, 0.5, 1.0])}, seed=7)
        for i in range(n)
    ]
    return g, policy, nodes


class Checker:
    def __init__(self, g, policy, nodes):
        self.g = g
        self.policy = policy
        self.nodes = nodes
        self.advert_messages = 0

    def check_insert(self, node: NodeState, snapshot):
        entry = node.caches.get("cpu", {}).get(snapshot.node)
        if entry is not None:
            assert entry.snapshot.observed_at >= snapshot.observed_at
        for cache in node.caches.values():
            assert len(cache) <= self.policy.cache_max

    def drain(self, pending: deque, now: int, discovery=None):
        deliveries = {}
        while pending:
            sender, target, msg = pending.popleft()
            node = self.nodes[target]
            if isinstance(msg, protocol.Query):
                assert len(set(msg.path)) == len(msg.path)
                assert msg.qttl >= 0
                fx = protocol.handle_query(node, msg, now)
                for t, child in fx.forwards:
                    assert child.qttl == msg.qttl - 1
                    assert child.path == msg.path + (t,)
                    pending.append((target, t, child))
                if fx.reply is not None:
                    pending.append((target, fx.reply.return_path[0], fx.reply))
            elif isinstance(msg, protocol.QueryReply):
                fx = protocol.handle_reply(node, msg, now)
                self.check_insert(node, msg.snapshot)
                if fx.deliver is not None:
                    if discovery is not None:
                        discovery.replies.append(fx.deliver)
                else:
                    pending.append((target, fx.forward_to, fx.forwarded))
            else:
                self.advert_messages += 1
                deliveries[msg.id] = deliveries.get(msg.id, 0) + 1
                out = protocol.handle_advertisement(node, msg, sender, now)
                self.check_insert(node, msg.snapshot)
                for j, child in out:
                    assert child.attl == msg.attl - 1 >= 0
                    pending.append((target, j, child))
        bound = self.g.n * self.g.max_degree() + 1
        for count in deliveries.values():
            assert count <= bound

    def discover(self, rng, now):
        origin = rng.randrange(self.g.n)
        discovery, fx = protocol.run_discovery(self.nodes[origin], CPU, rng.choice([0.0, 0.5]), now)
        pending = deque()
        if fx.reply is not None:
            pending.append((origin, fx.reply.return_path[0], fx.reply))
        for t, q in fx.forwards:
            assert q.qttl == self.policy.qttl_init - 1
            pending.append((origin, t, q))
        self.drain(pending, now, discovery)
        chosen = protocol.conclude_discovery(discovery, self.nodes[origin], now)
        assert 0 <= chosen < self.g.n

    def change_load(self, rng, now):
        i = rng.randrange(self.g.n)
        self.nodes[i].local["cpu"] = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0])
        ad = protocol.maybe_advertise(self.nodes[i], CPU, now)
        if self.policy.variant is Variant.QUERY_ONLY:
            assert ad is None
        if ad is not None:
            assert ad.attl == self.policy.attl_init
            self.drain(deque([(None, i, ad)]), now)

    def evict(self, now):
        for node in self.nodes:
            protocol.evict_stale(node, now)
            for cache in node.caches.values():
                assert len(cache) <= self.policy.cache_max
                for entry in cache.values():
                    assert now - entry.inserted_at <= self.policy.cache_lifetime


@pytest.mark.slow
def test_random_operation_sequences():
    rng = random.Random(20240601)
    for _ in range(SEQUENCES):
        g, policy, nodes = random_network(rng)
        checker = Checker(g, policy, nodes)
        now = 0
        for _ in range(rng.randint(1, 4)):
            now += rng.randint(0, 8)
            op = rng.random()
            if op < 0.5:
                checker.discover(rng, now)
            elif op < 0.85:
                checker.change_load(rng, now)
            else:
                checker.evict(now)
        if policy.variant is Variant.QUERY_ONLY:
            assert checker.advert_messages == 0


def test_handlers_are_deterministic():
    def fresh():
        rng = random.Random(5)
        return random_network(rng)

    _, _, a = fresh()
    _, _, b = fresh()
    qa = protocol.Query("q", 0, CPU, 0.0, 3, (0,))
    assert protocol.handle_query(a[0], qa, 12) == protocol.handle_query(b[0], qa, 12)
