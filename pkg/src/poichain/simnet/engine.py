"""Deterministic discrete-event network simulator.

Events are ordered by (virtual time in microseconds, insertion sequence), so a
config and seed determine every event. The network is fully connected; each
message takes a latency drawn from a lognormal with mean ``com_mean``,
truncated at ``delta_max`` (or exactly ``com_mean`` when jitter is 0).
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import random
from dataclasses import dataclass
from typing import Any, Callable

from ..chain import ChainParams, ChainStore
from ..crypto import ED25519, NodeId, TransparentScheme, make_keys
from ..node import Node, Send, SignRequestMsg, Timer
from ..poi import service_count, tour_visits
from . import analysis
from .adversary import DoubleTourNode, SelfishNode, SharedKeysNode
from .config import SimConfig
from .metrics import Metrics

log = logging.getLogger(__name__)

MS = 1000  # microseconds per virtual millisecond
RETRY_FACTOR = 4


def _us(ms: float) -> int:
    return int(round(ms * MS))


@dataclass
class SimResult:
    config: SimConfig
    metrics: Metrics
    nodes: list[Node]
    end_time: int  # microseconds

    @property
    def chains(self) -> list[ChainStore]:
        return [node.chain for node in self.nodes]

    def reference(self) -> Node:
        return self.nodes[self.metrics.summary["reference_node"]]


class Simulation:
    def __init__(self, config: SimConfig):
        config.validate()
        self.config = config
        self.scheme = TransparentScheme() if config.scheme == "transparent" else ED25519
        self.keys = make_keys(config.seed, config.n, self.scheme)
        self.ids = [k.public for k in self.keys]
        self.index: dict[NodeId, int] = {u: i for i, u in enumerate(self.ids)}
        self.roster = tuple(sorted(self.ids))
        self.params = ChainParams(
            initial_difficulty=config.initial_difficulty,
            reward=config.reward,
            stake=config.stake,
            retarget_period=config.retarget_period,
            target_interval=max(1, round(config.target_block_interval)),
        )
        self.rng = random.Random(config.seed)
        self.metrics = Metrics()
        self.now = 0
        self._queue: list[tuple[int, int, str, Any]] = []
        self._seq = itertools.count()
        self.crashed: set[int] = set()
        self.colluders = set(config.adversary.colluders) if config.adversary.kind != "none" else set()
        self.nodes = [self._make_node(i) for i in range(config.n)]
        self.max_height = 0
        self._until: Callable[[Simulation], bool] | None = None
        self._stop = False
        self._produced_heights: set[int] = set()

    # -- setup -----------------------------------------------------------

    def _make_node(self, i: int) -> Node:
        cfg = self.config
        adv = cfg.adversary
        kwargs: dict[str, Any] = dict(
            scheme=self.scheme,
            retry_after=_us(RETRY_FACTOR * cfg.com_mean),
            mining_start=_us(cfg.mining_start),
            observer=lambda kind, **data: self._observe(i, kind, data),
        )
        args = (self.keys[i], self.roster, self.params)
        if i not in self.colluders:
            return Node(*args, **kwargs)
        if adv.kind == "double_tour":
            kwargs["mining_start"] = 0
            return DoubleTourNode(*args, k=adv.k, release_at=_us(adv.release_at), rounds=adv.rounds, **kwargs)
        members = frozenset(self.ids[c] for c in self.colluders)
        if adv.kind == "selfish":
            return SelfishNode(*args, colluders=members, serve_requests=adv.serve_requests,
                               race=adv.race, **kwargs)
        pool = {self.ids[c]: self.keys[c] for c in self.colluders}
        return SharedKeysNode(*args, pool=pool, **kwargs)

    def latency(self) -> int:
        cfg = self.config
        if cfg.com_jitter == 0:
            ms = cfg.com_mean
        else:
            sigma = cfg.com_jitter
            ms = self.rng.lognormvariate(math.log(cfg.com_mean) - sigma * sigma / 2, sigma)
        return max(1, min(_us(ms), _us(cfg.delta_max)))

    def _push(self, at: int, kind: str, payload: Any) -> None:
        heapq.heappush(self._queue, (at, next(self._seq), kind, payload))

    # -- observation -----------------------------------------------------

    def _observe(self, i: int, kind: str, data: dict[str, Any]) -> None:
        m = self.metrics
        if kind == "tour_begin":
            services = [self.index[u] for u in data["services"]]
            m.tours.append({
                "node": i, "time_us": self.now, "d": data["d"].hex(), "m": data["m"].hex(),
                "length": data["length"], "difficulty": data["difficulty"], "services": services,
                "crashed_in_services": sum(1 for s in services if s in self.crashed),
            })
        elif kind == "block_produced":
            block = data["block"]
            h = self.nodes[i].chain.height[block.prev_hash] + 1
            if h in self._produced_heights:
                m.forks += 1
            self._produced_heights.add(h)
            m.blocks.append({
                "id": block.block_id.hex(), "parent": block.prev_hash.hex(), "height": h,
                "producer": i, "tour_len": data["length"], "time_us": self.now,
                "header_time": block.header.time, "difficulty": block.header.difficulty,
                "n_tx": len(block.transactions),
            })
        elif kind == "block_inserted":
            result = data["result"]
            block = data["block"]
            if result.kind == "reorg":
                m.reorgs.append(result.depth)
            bid = block.block_id.hex()
            if i not in self.colluders and block.producer != self.ids[i]:
                m.first_public.setdefault(bid, self.now)
            self.max_height = max(self.max_height, self.nodes[i].chain.max_height)
            if self._until is not None and self._until(self):
                self._stop = True
        elif kind == "answer":
            if i not in self.colluders:
                m.first_answer.setdefault(data["d"].hex(), self.now)
        elif kind == "conflict":
            m.conflicts.append({
                "detector": i, "accused": self.index[data["accused"]],
                "d": data["d"].hex(), "time_us": self.now,
            })
        elif kind == "invalid_block":
            m.invalid_blocks += 1
        else:
            record = {"event": kind, "node": i, "time_us": self.now}
            for key, value in data.items():
                if isinstance(value, bytes):
                    record[key] = self.index[value] if value in self.index else value.hex()
                elif hasattr(value, "block_id"):
                    record[key] = value.block_id.hex()
                    record["parent"] = value.prev_hash.hex()
                else:
                    record[key] = value
            m.adversary.append(record)

    # -- main loop -------------------------------------------------------

    def _apply(self, i: int, actions) -> None:
        if i in self.crashed:
            return
        proc = _us(self.config.processing_delay)
        for act in actions:
            if isinstance(act, Send):
                self.metrics.messages[type(act.msg).__name__] += 1
                self._push(self.now + proc + self.latency(), "deliver", (i, self.index[act.dst], act.msg))
            elif isinstance(act, Timer):
                self._push(self.now + act.delay, "timer", (i, act.tag))

    def run(self, until: Callable[[Simulation], bool] | None = None) -> SimResult:
        """Process events until a halt condition; ``until`` is checked after every block insertion."""
        cfg = self.config
        for f in cfg.faults:
            self._push(_us(f.crash_at), "crash", f.node)
            if f.reboot_at is not None:
                self._push(_us(f.reboot_at), "reboot", f.node)
        if cfg.max_time is not None:
            self._push(_us(cfg.max_time), "halt", None)
        for i, node in enumerate(self.nodes):
            self._push(0, "start", i)

        self._until = until
        self._stop = False
        while self._queue and self.max_height < cfg.blocks and not self._stop:
            self.now, _, kind, payload = heapq.heappop(self._queue)
            if kind == "halt":
                break
            if kind == "deliver":
                src, dst, msg = payload
                if dst in self.crashed:
                    self.metrics.dropped += 1
                    if isinstance(msg, SignRequestMsg):
                        req = msg.request
                        self.metrics.stuck_tours.add((self.index[req.initiator], req.d.hex(), req.m.hex()))
                    continue
                self._apply(dst, self.nodes[dst].handle(self.now, self.ids[src], msg))
            elif kind == "timer":
                i, tag = payload
                if i not in self.crashed:
                    self._apply(i, self.nodes[i].on_timer(self.now, tag))
            elif kind == "start":
                if payload not in self.crashed:
                    self._apply(payload, self.nodes[payload].start(self.now))
            elif kind == "crash":
                self.crashed.add(payload)
                log.debug("t=%d node %d crashed", self.now, payload)
            elif kind == "reboot":
                self.crashed.discard(payload)
                node = self.nodes[payload]
                node.mining = node.mining or self.now >= node.mining_start
                self._apply(payload, node.reboot(self.now))

        self.metrics.summary = self._summarise()
        return SimResult(cfg, self.metrics, self.nodes, self.now)

    # -- summary ---------------------------------------------------------

    def _summarise(self) -> dict[str, Any]:
        cfg, m = self.config, self.metrics
        honest = [i for i in range(cfg.n) if i not in self.colluders] or list(range(cfg.n))
        alive = [i for i in honest if i not in self.crashed] or honest
        ref = max(alive, key=lambda i: (self.nodes[i].chain.head_height, -i))
        chain = self.nodes[ref].chain
        main = chain.path()[1:]
        produced = {b["id"]: b for b in m.blocks}
        times = [produced[b.hex()]["time_us"] for b in main if b.hex() in produced]
        ledger = chain.ledger
        n_s = service_count(cfg.n)
        crashed_tours = [t for t in m.tours if t["node"] not in self.crashed]
        summary: dict[str, Any] = {
            "reference_node": ref,
            "end_time_us": self.now,
            "blocks_produced": len(m.blocks),
            "main_chain_height": chain.head_height,
            "head": chain.head.hex(),
            "mean_block_interval_ms": (times[-1] / len(times) / MS) if times else None,
            "messages": dict(sorted(m.messages.items())),
            "messages_total": m.total_messages(),
            "messages_per_ms": m.total_messages() / (self.now / MS) if self.now else 0.0,
            "forks": m.forks,
            "reorgs": len(m.reorgs),
            "max_reorg_depth": max(m.reorgs, default=0),
            "stuck_tours": len(m.stuck_tours),
            "fraud_conflicts": len(m.conflicts),
            "fraud_claims_on_chain": sum(
                1 for b in main for tx in chain.blocks[b].transactions if tx.claim is not None
            ),
            "balances": [ledger.balances[u] for u in self.ids],
            "stakes": [ledger.stakes[u] for u in self.ids],
            "excluded": sorted(self.index[u] for u in ledger.excluded),
            "service_set_size": n_s,
        }
        if cfg.faults:
            n_crashed = len({f.node for f in cfg.faults})
            healthy = [t["crashed_in_services"] == 0 for t in crashed_tours]
            summary["crash"] = {
                "crashed_nodes": n_crashed,
                "tours_observed": len(healthy),
                "unstuck_fraction": sum(healthy) / len(healthy) if healthy else None,
                "any_unstuck": any(healthy),
                "exact_all_alive": analysis.all_alive_probability(cfg.n, n_crashed, n_s),
                "independent_all_alive": analysis.independent_all_alive(n_s, n_crashed / cfg.n),
                "coin_flip_any_unstuck": analysis.any_set_unstuck_probability(cfg.n, n_s),
            }
        if cfg.adversary.kind != "none":
            total = sum(summary["balances"])
            minted = cfg.reward * chain.head_height
            colluder_rewards = sum(summary["balances"][c] for c in self.colluders)
            slots = colluder_slots = 0
            for b in main:
                people = {self.index[u] for u in tour_visits(chain.blocks[b].proof, chain.blocks[b].header.merkle_root, self.roster)}
                people.add(self.index[chain.blocks[b].producer])
                slots += len(people)
                colluder_slots += len(people & self.colluders)
            summary["adversary"] = {
                "kind": cfg.adversary.kind,
                "colluders": sorted(self.colluders),
                "reward_share": colluder_rewards / minted if minted else 0.0,
                "participation_share": colluder_slots / slots if slots else 0.0,
                "balance_total": total,
            }
        return summary


def run(config: SimConfig, until: Callable[[Simulation], bool] | None = None) -> SimResult:
    """Run one scenario to its halt condition."""
    return Simulation(config).run(until)
