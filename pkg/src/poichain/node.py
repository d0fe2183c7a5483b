"""Per-participant protocol state machine.

A node is a single-threaded event handler. Every handler takes the current
virtual time (microseconds) and returns a list of actions for the transport:
:class:`Send` and :class:`Timer`. Nothing here knows about queues or latency.
"""

from __future__ import annotations

import enum
import struct
from collections import Counter
from dataclasses import dataclass
from typing import Any, Callable, Sequence, Union

from .chain import (
    Block,
    ChainParams,
    ChainStore,
    FraudClaim,
    InsertResult,
    MissingParent,
    Transaction,
    TxKind,
    assemble_block,
    merkle_root,
)
from .crypto import ED25519, HASH_LEN, KeyPair, NodeId, SignatureScheme
from .poi import BadResponse, Completed, SignRequest, TourState, answer_request, tour_advance, tour_begin


@dataclass(frozen=True)
class SignRequestMsg:
    request: SignRequest


@dataclass(frozen=True)
class SignResponse:
    responder: NodeId
    h: bytes
    signature: bytes


@dataclass(frozen=True)
class BlockAnnounce:
    block: Block


@dataclass(frozen=True)
class BlockRequest:
    block_id: bytes


@dataclass(frozen=True)
class BlockResponse:
    block: Block


Message = Union[SignRequestMsg, SignResponse, BlockAnnounce, BlockRequest, BlockResponse]

_TAGS = {SignRequestMsg: 1, SignResponse: 2, BlockAnnounce: 3, BlockRequest: 4, BlockResponse: 5}


def encode_message(msg: Message) -> bytes:
    """Wire form: one type byte followed by the body in the chain/poi formats."""
    tag = bytes([_TAGS[type(msg)]])
    if isinstance(msg, SignRequestMsg):
        return tag + msg.request.to_bytes()
    if isinstance(msg, SignResponse):
        return tag + msg.responder + msg.h + struct.pack(">H", len(msg.signature)) + msg.signature
    if isinstance(msg, BlockRequest):
        return tag + msg.block_id
    return tag + msg.block.to_bytes()


def decode_message(data: bytes) -> Message:
    tag, body = data[0], data[1:]
    if tag == 1:
        return SignRequestMsg(SignRequest.from_bytes(body))
    if tag == 2:
        (size,) = struct.unpack_from(">H", body, 2 * HASH_LEN)
        if len(body) != 2 * HASH_LEN + 2 + size:
            raise ValueError("malformed sign response")
        return SignResponse(NodeId(body[:32]), body[32:64], body[66:])
    if tag == 3:
        return BlockAnnounce(Block.from_bytes(body))
    if tag == 4:
        if len(body) != HASH_LEN:
            raise ValueError("malformed block request")
        return BlockRequest(body)
    if tag == 5:
        return BlockResponse(Block.from_bytes(body))
    raise ValueError(f"unknown message tag {tag}")


@dataclass(frozen=True)
class Send:
    dst: NodeId
    msg: Message


@dataclass(frozen=True)
class Timer:
    delay: int  # microseconds
    tag: tuple


Action = Union[Send, Timer]


class Verdict(enum.Enum):
    ACCEPT = "accept"
    REJECT_CONFLICT = "reject-conflict"
    NEED_BLOCK = "need-block"
    IGNORE = "ignore"


def _noop(kind: str, **data: Any) -> None:
    pass


class Node:
    """Honest participant.

    On every new head it abandons its tour and starts a fresh one on the new
    head. It signs requests only for dependencies that are tips of a longest
    branch, and only one message per (initiator, dependency).
    """

    def __init__(
        self,
        key: KeyPair,
        roster: Sequence[NodeId],
        params: ChainParams,
        *,
        scheme: SignatureScheme = ED25519,
        retry_after: int = 40_000,
        mining_start: int = 0,
        observer: Callable[..., None] = _noop,
    ):
        self.key = key
        self.id = key.public
        self.scheme = scheme
        self.chain = ChainStore(tuple(roster), params, scheme)
        self.peers = [u for u in self.chain.roster if u != self.id]
        self.retry_after = retry_after
        self.mining_start = mining_start
        self.mining = False
        self.observe = observer

        self.tour: TourState | None = None
        self.outstanding: SignRequest | None = None
        self.candidate: tuple[Transaction, ...] = ()
        self.tour_seq = 0
        self.mempool: list[Transaction] = []
        self.received: dict[tuple[bytes, bytes], SignRequest] = {}
        self.flagged: set[tuple[bytes, bytes]] = set()
        self.pending: dict[bytes, list[SignRequest]] = {}
        self.requested: set[bytes] = set()
        self.orphans: dict[bytes, dict[bytes, Block]] = {}
        self.announced: set[bytes] = set()
        self.invalid_from: Counter[bytes] = Counter()

    # -- lifecycle -------------------------------------------------------

    def start(self, now: int) -> list[Action]:
        if now < self.mining_start:
            return [Timer(self.mining_start - now, ("mine",))]
        self.mining = True
        return self.on_new_head(now)

    def reboot(self, now: int) -> list[Action]:
        """Come back from a crash: the chain persists, volatile state does not."""
        self.received.clear()
        self.pending.clear()
        self.requested.clear()
        self.orphans.clear()
        self.tour = self.outstanding = None
        return self.on_new_head(now) if self.mining else []

    @property
    def excluded(self) -> bool:
        return self.id in self.chain.ledger.excluded

    # -- dispatch --------------------------------------------------------

    def handle(self, now: int, src: NodeId, msg: Message) -> list[Action]:
        if isinstance(msg, SignRequestMsg):
            return self.on_sign_request(now, msg.request)
        if isinstance(msg, SignResponse):
            return self.on_sign_response(now, msg)
        if isinstance(msg, (BlockAnnounce, BlockResponse)):
            return self.on_block(now, src, msg.block)
        if isinstance(msg, BlockRequest):
            return self.on_block_request(now, src, msg.block_id)
        raise TypeError(f"unknown message {msg!r}")

    def on_timer(self, now: int, tag: tuple) -> list[Action]:
        if tag[0] == "mine":
            self.mining = True
            return self.on_new_head(now)
        if tag[0] == "retry":
            _, seq, step = tag
            if self.tour is not None and seq == self.tour_seq and step == self.tour.step:
                return self._send_request(self.tour, self.outstanding)
        return []

    # -- tour generation -------------------------------------------------

    def assemble_candidate(self) -> tuple[Transaction, ...]:
        """Mempool in FIFO order, minus anything already on the head path."""
        excluded = self.chain.ledger.excluded
        txs = []
        for tx in self.mempool:
            if self.chain.tx_on_head_path(tx.tx_hash):
                continue
            if tx.kind is TxKind.FRAUD_CLAIM and tx.claim.accused in excluded:
                continue
            txs.append(tx)
        return tuple(txs)

    def on_new_head(self, now: int) -> list[Action]:
        self.tour = self.outstanding = None
        self.tour_seq += 1
        self._forget_stale()
        if not self.mining or self.excluded:
            return []
        self.candidate = self.assemble_candidate()
        return self._begin_tour(self.chain.head, self.candidate)

    def _begin_tour(self, d: bytes, txs: tuple[Transaction, ...]) -> list[Action]:
        difficulty = self.chain.expected_difficulty(d)
        state, req = tour_begin(self.key, self.chain.roster, d, merkle_root(txs), difficulty, self.scheme)
        self.tour = state
        self.observe(
            "tour_begin", initiator=self.id, d=d, m=state.message,
            services=state.services, length=state.target_len, difficulty=difficulty,
        )
        return self._send_request(state, req)

    def _send_request(self, state: TourState, req: SignRequest) -> list[Action]:
        self.outstanding = req
        return [
            Send(state.target, SignRequestMsg(req)),
            Timer(self.retry_after, ("retry", self.tour_seq, state.step)),
        ]

    def on_sign_response(self, now: int, resp: SignResponse) -> list[Action]:
        state = self.tour
        if state is None or resp.h != state.current_hash or resp.responder != state.target:
            return []  # stale or duplicate
        try:
            state, out = tour_advance(state, self.key, resp.signature, self.scheme)
        except BadResponse:
            return []
        self.tour = state
        if isinstance(out, Completed):
            return self._complete(now, state, out)
        return self._send_request(state, out)

    def _complete(self, now: int, state: TourState, done: Completed) -> list[Action]:
        block = self._make_block(now, state, done, self.candidate)
        self.tour = self.outstanding = None
        return self._publish(now, block)

    def _make_block(self, now: int, state: TourState, done: Completed, txs) -> Block:
        parent = self.chain.blocks[state.dependency]
        block = assemble_block(
            prev_hash=state.dependency,
            time=max(now // 1000, parent.header.time + 1),
            difficulty=self.chain.expected_difficulty(state.dependency),
            transactions=txs,
            proof=done.proof,
            producer=self.id,
        )
        self.observe("block_produced", block=block, length=state.target_len)
        return block

    def _publish(self, now: int, block: Block) -> list[Action]:
        """Insert our own block and announce it to everybody."""
        if not self.chain.validate_block(block):
            raise AssertionError("produced an invalid block")
        self.announced.add(block.block_id)
        actions: list[Action] = [Send(u, BlockAnnounce(block)) for u in self.peers]
        return actions + self._accept_block(now, block)

    # -- answering -------------------------------------------------------

    def check_message(self, req: SignRequest) -> Verdict:
        """Signing policy for an incoming request (and double-touring detection)."""
        u = req.initiator
        if u not in self.chain.roster or not req.is_signed(self.scheme):
            return Verdict.IGNORE
        if u in self.chain.ledger.excluded:
            return Verdict.IGNORE
        if self.chain.is_longest_tip(req.d):
            key = (u, req.d)
            first = self.received.get(key)
            if first is not None and first.m != req.m:
                if key not in self.flagged:
                    self.flagged.add(key)
                    claim = FraudClaim(u, self.id, first, req)
                    self.mempool.append(Transaction.fraud(claim))
                    self.observe("conflict", accused=u, d=req.d, claim=claim)
                return Verdict.REJECT_CONFLICT
            self.received.setdefault(key, req)
            return Verdict.ACCEPT
        if req.d not in self.chain:
            return Verdict.NEED_BLOCK
        return Verdict.IGNORE

    def on_sign_request(self, now: int, req: SignRequest) -> list[Action]:
        if self.excluded:
            return []
        verdict = self.check_message(req)
        if verdict is Verdict.ACCEPT:
            self.observe("answer", initiator=req.initiator, d=req.d, m=req.m)
            sig = answer_request(self.key, req, self.scheme)
            return [Send(req.initiator, SignResponse(self.id, req.h, sig))]
        if verdict is Verdict.NEED_BLOCK:
            self.pending.setdefault(req.d, []).append(req)
            return self._fetch(req.initiator, req.d)
        return []

    def _fetch(self, src: NodeId, block_id: bytes) -> list[Action]:
        if block_id in self.requested:
            return []
        self.requested.add(block_id)
        return [Send(src, BlockRequest(block_id))]

    def _forget_stale(self) -> None:
        tips = self.chain.longest_tips()
        self.received = {k: v for k, v in self.received.items() if k[1] in tips}

    # -- blocks ----------------------------------------------------------

    def on_block_request(self, now: int, src: NodeId, block_id: bytes) -> list[Action]:
        block = self.chain.blocks.get(block_id)
        if block is None:
            return []
        return [Send(src, BlockResponse(block))]

    def on_block(self, now: int, src: NodeId, block: Block) -> list[Action]:
        bid = block.block_id
        if bid in self.chain:
            return []
        if block.prev_hash not in self.chain:
            self.orphans.setdefault(block.prev_hash, {})[bid] = block
            return self._fetch(src, block.prev_hash)
        try:
            ok = self.chain.validate_block(block)
        except MissingParent:  # pragma: no cover - guarded above
            return []
        if not ok:
            self.invalid_from[block.producer] += 1
            self.observe("invalid_block", block=block)
            return []
        actions = self._relay(block, src)
        return actions + self._accept_block(now, block)

    def _relay(self, block: Block, src: NodeId) -> list[Action]:
        bid = block.block_id
        if bid in self.announced:
            return []
        self.announced.add(bid)
        return [Send(u, BlockAnnounce(block)) for u in self.peers if u != src]

    def _accept_block(self, now: int, block: Block) -> list[Action]:
        """Insert a validated block, then any orphans and parked requests it unblocks."""
        old_head = self.chain.head
        actions = self._insert(block)
        queue = [block.block_id]
        while queue:
            bid = queue.pop()
            for child in self.orphans.pop(bid, {}).values():
                if self.chain.validate_block(child):
                    actions += self._relay(child, self.id)
                    actions += self._insert(child)
                    queue.append(child.block_id)
        if self.chain.head != old_head:
            actions += self.on_new_head(now)
        for d in [d for d in self.pending if d in self.chain]:
            self.requested.discard(d)
            for req in self.pending.pop(d):
                actions += self.on_sign_request(now, req)
        return actions

    def _insert(self, block: Block) -> list[Action]:
        result: InsertResult = self.chain.insert_block(block)
        self.observe("block_inserted", node=self.id, block=block, result=result)
        return []
