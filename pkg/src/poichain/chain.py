"""Blocks, the Merkle commitment, validation, fork choice, difficulty and the ledger.

Header layout (112 bytes, big-endian)::

    version u32 | time u32 | difficulty u32 | extra u32
    prev_hash[32] | merkle_root[32] | proof_hash[32]

``time`` is in milliseconds of (virtual) time; ``difficulty`` is the mean tour
length; ``extra`` is a free producer-chosen word with no consensus meaning.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .crypto import ED25519, HASH_LEN, NodeId, SignatureScheme, digest
from .poi import EMPTY_PROOF, PoIProof, SignRequest, check_poi, tour_visits

VERSION = 1
HEADER_LEN = 112
_HEADER = struct.Struct(">IIII32s32s32s")
ZERO_HASH = bytes(HASH_LEN)


class MissingParent(LookupError):
    """The block's parent is not in the store; fetch it first."""

    def __init__(self, parent: bytes):
        super().__init__(f"unknown parent {parent.hex()[:16]}")
        self.parent = parent


@dataclass(frozen=True)
class BlockHeader:
    version: int
    time: int
    difficulty: int
    extra: int
    prev_hash: bytes
    merkle_root: bytes
    proof_hash: bytes

    def to_bytes(self) -> bytes:
        return _HEADER.pack(
            self.version, self.time, self.difficulty, self.extra,
            self.prev_hash, self.merkle_root, self.proof_hash,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> BlockHeader:
        if len(data) != HEADER_LEN:
            raise ValueError(f"header must be {HEADER_LEN} bytes, got {len(data)}")
        return cls(*_HEADER.unpack(data))

    @property
    def block_id(self) -> bytes:
        return digest(self.to_bytes())


class TxKind(enum.IntEnum):
    OPAQUE = 0
    FRAUD_CLAIM = 1


@dataclass(frozen=True)
class FraudClaim:
    """Two sign requests from ``accused`` with the same dependency and different messages."""

    accused: NodeId
    claimant: NodeId
    first: SignRequest
    second: SignRequest

    def is_valid(self, scheme: SignatureScheme = ED25519) -> bool:
        a, b = self.first, self.second
        return (
            a.initiator == b.initiator == self.accused
            and a.d == b.d
            and a.m != b.m
            and a.is_signed(scheme)
            and b.is_signed(scheme)
        )

    def to_bytes(self) -> bytes:
        return self.accused + self.claimant + self.first.to_bytes() + self.second.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> FraudClaim:
        if len(data) < 2 * HASH_LEN:
            raise ValueError("truncated fraud claim")
        accused, claimant = NodeId(data[:32]), NodeId(data[32:64])
        first, off = SignRequest.read(data, 64)
        second, off = SignRequest.read(data, off)
        if off != len(data):
            raise ValueError("trailing bytes after fraud claim")
        return cls(accused, claimant, first, second)


@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    payload: bytes = b""
    claim: FraudClaim | None = None

    @classmethod
    def opaque(cls, payload: bytes) -> Transaction:
        return cls(TxKind.OPAQUE, bytes(payload))

    @classmethod
    def fraud(cls, claim: FraudClaim) -> Transaction:
        return cls(TxKind.FRAUD_CLAIM, claim=claim)

    def to_bytes(self) -> bytes:
        if self.kind is TxKind.FRAUD_CLAIM:
            assert self.claim is not None
            return bytes([self.kind]) + self.claim.to_bytes()
        return bytes([self.kind]) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> Transaction:
        if not data:
            raise ValueError("empty transaction")
        kind = TxKind(data[0])
        if kind is TxKind.FRAUD_CLAIM:
            return cls.fraud(FraudClaim.from_bytes(data[1:]))
        return cls.opaque(data[1:])

    @property
    def tx_hash(self) -> bytes:
        return digest(self.to_bytes())


def merkle_root(txs: Sequence[Transaction]) -> bytes:
    """Bitcoin-style root over ``H(tx)`` leaves; a lone node is its own root."""
    if not txs:
        return digest(b"")
    level = [tx.tx_hash for tx in txs]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [digest(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple[Transaction, ...]
    proof: PoIProof
    producer: NodeId

    @property
    def block_id(self) -> bytes:
        return self.header.block_id

    @property
    def prev_hash(self) -> bytes:
        return self.header.prev_hash

    def to_bytes(self) -> bytes:
        parts = [self.header.to_bytes(), struct.pack(">I", len(self.transactions))]
        for tx in self.transactions:
            raw = tx.to_bytes()
            parts.append(struct.pack(">I", len(raw)))
            parts.append(raw)
        parts.append(self.proof.to_bytes())
        parts.append(self.producer)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> Block:
        if len(data) < HEADER_LEN + 4:
            raise ValueError("block file too short")
        header = BlockHeader.from_bytes(data[:HEADER_LEN])
        (count,) = struct.unpack_from(">I", data, HEADER_LEN)
        off = HEADER_LEN + 4
        txs = []
        for _ in range(count):
            if off + 4 > len(data):
                raise ValueError("truncated transaction length")
            (size,) = struct.unpack_from(">I", data, off)
            off += 4
            if off + size > len(data):
                raise ValueError("truncated transaction")
            txs.append(Transaction.from_bytes(data[off : off + size]))
            off += size
        proof, off = PoIProof.read(data, off)
        if len(data) - off != HASH_LEN:
            raise ValueError("missing or malformed producer field")
        return cls(header, tuple(txs), proof, NodeId(data[off:]))


def assemble_block(
    *,
    prev_hash: bytes,
    time: int,
    difficulty: int,
    transactions: Iterable[Transaction],
    proof: PoIProof,
    producer: NodeId,
    extra: int = 0,
) -> Block:
    txs = tuple(transactions)
    header = BlockHeader(VERSION, time, difficulty, extra, prev_hash, merkle_root(txs), proof.hash())
    return Block(header, txs, proof, producer)


def make_genesis(initial_difficulty: int) -> Block:
    return assemble_block(
        prev_hash=ZERO_HASH, time=0, difficulty=initial_difficulty,
        transactions=(), proof=EMPTY_PROOF, producer=NodeId(ZERO_HASH),
    )


@dataclass
class Ledger:
    balances: dict[NodeId, int]
    stakes: dict[NodeId, int]
    excluded: frozenset[NodeId] = frozenset()

    @classmethod
    def initial(cls, roster: Iterable[NodeId], stake: int) -> Ledger:
        roster = list(roster)
        return cls({u: 0 for u in roster}, {u: stake for u in roster})

    def copy(self) -> Ledger:
        return Ledger(dict(self.balances), dict(self.stakes), self.excluded)

    def total(self) -> int:
        return sum(self.balances.values()) + sum(self.stakes.values())


def reward_recipients(block: Block, roster: Sequence[NodeId]) -> set[NodeId]:
    """Distinct nodes of the block's tour, producer included."""
    return set(tour_visits(block.proof, block.header.merkle_root, roster)) | {block.producer}


def apply_rewards(block: Block, ledger: Ledger, reward: int, roster: Sequence[NodeId]) -> Ledger:
    """Split ``reward`` evenly over the tour participants; the remainder goes to the producer."""
    out = ledger.copy()
    recipients = reward_recipients(block, roster)
    share, rest = divmod(reward, len(recipients))
    for u in recipients:
        out.balances[u] = out.balances.get(u, 0) + share
    out.balances[block.producer] = out.balances.get(block.producer, 0) + rest
    return out


def apply_fraud_claim(claim: FraudClaim, ledger: Ledger) -> Ledger:
    """Move all of the accused's locked stake to the claimant and exclude the accused."""
    out = ledger.copy()
    seized = out.stakes.get(claim.accused, 0)
    out.stakes[claim.accused] = 0
    out.balances[claim.claimant] = out.balances.get(claim.claimant, 0) + seized
    out.excluded = out.excluded | {claim.accused}
    return out


def apply_block(block: Block, ledger: Ledger, reward: int, roster: Sequence[NodeId]) -> Ledger:
    out = apply_rewards(block, ledger, reward, roster)
    for tx in block.transactions:
        if tx.kind is TxKind.FRAUD_CLAIM:
            out = apply_fraud_claim(tx.claim, out)
    return out


def retarget(old_mean: int, period: int, target_interval: int, duration: int) -> int:
    """Proportional retarget, clamped to a factor of 4 either way, never below 1."""
    if duration <= 0:
        wanted = Fraction(old_mean * 4)
    else:
        wanted = Fraction(old_mean * period * target_interval, duration)
    wanted = min(max(wanted, Fraction(old_mean, 4)), Fraction(old_mean * 4))
    return max(1, round(wanted))


@dataclass(frozen=True)
class ChainParams:
    initial_difficulty: int = 10
    reward: int = 100
    stake: int = 1000
    retarget_period: int = 100
    target_interval: int = 100  # ms of header time

    def __post_init__(self):
        if self.retarget_period < 1:
            raise ValueError("retarget_period must be >= 1")


@dataclass(frozen=True)
class InsertResult:
    kind: str  # "duplicate", "unchanged", "new_head" or "reorg"
    depth: int = 0

    @property
    def head_changed(self) -> bool:
        return self.kind in ("new_head", "reorg")


@dataclass
class ChainStore:
    """Block tree with longest-chain head selection (first-seen on ties).

    A ledger snapshot is kept for every stored block, so the head ledger
    after a reorg is simply the snapshot of the new head.
    """

    roster: tuple[NodeId, ...]
    params: ChainParams = field(default_factory=ChainParams)
    scheme: SignatureScheme = ED25519

    def __post_init__(self):
        self.roster = tuple(sorted(self.roster))
        genesis = make_genesis(self.params.initial_difficulty)
        self.genesis_id = genesis.block_id
        self.blocks: dict[bytes, Block] = {self.genesis_id: genesis}
        self.height: dict[bytes, int] = {self.genesis_id: 0}
        self.children: dict[bytes, list[bytes]] = {self.genesis_id: []}
        self.tips: set[bytes] = {self.genesis_id}
        self.max_height = 0
        self.head = self.genesis_id
        self.ledgers: dict[bytes, Ledger] = {
            self.genesis_id: Ledger.initial(self.roster, self.params.stake)
        }
        self.tx_blocks: dict[bytes, list[bytes]] = {}

    def __contains__(self, block_id: bytes) -> bool:
        return block_id in self.blocks

    @property
    def ledger(self) -> Ledger:
        return self.ledgers[self.head]

    @property
    def head_block(self) -> Block:
        return self.blocks[self.head]

    @property
    def head_height(self) -> int:
        return self.height[self.head]

    def longest_tips(self) -> set[bytes]:
        return {t for t in self.tips if self.height[t] == self.max_height}

    def is_longest_tip(self, block_id: bytes) -> bool:
        return block_id in self.tips and self.height[block_id] == self.max_height

    def parent(self, block_id: bytes) -> bytes | None:
        if block_id == self.genesis_id:
            return None
        return self.blocks[block_id].prev_hash

    def ancestor(self, block_id: bytes, height: int) -> bytes:
        while self.height[block_id] > height:
            block_id = self.blocks[block_id].prev_hash
        return block_id

    def path(self, block_id: bytes | None = None) -> list[bytes]:
        """Block ids from genesis to ``block_id`` (default: head), inclusive."""
        cur = self.head if block_id is None else block_id
        out = [cur]
        while cur != self.genesis_id:
            cur = self.blocks[cur].prev_hash
            out.append(cur)
        return out[::-1]

    def on_head_path(self, block_id: bytes) -> bool:
        h = self.height.get(block_id)
        return h is not None and self.ancestor(self.head, h) == block_id

    def tx_on_head_path(self, tx_hash: bytes) -> bool:
        return any(self.on_head_path(b) for b in self.tx_blocks.get(tx_hash, ()))

    def expected_difficulty(self, parent_id: bytes) -> int:
        """Difficulty required of a child of ``parent_id``."""
        parent = self.blocks[parent_id]
        child_height = self.height[parent_id] + 1
        period = self.params.retarget_period
        if child_height <= 1 or (child_height - 1) % period:
            return parent.header.difficulty
        start = self.blocks[self.ancestor(parent_id, child_height - 1 - period)]
        duration = parent.header.time - start.header.time
        return retarget(parent.header.difficulty, period, self.params.target_interval, duration)

    def validate_block(self, block: Block) -> bool:
        """Full validity of ``block`` on top of its parent. Raises :class:`MissingParent`."""
        header = block.header
        parent = self.blocks.get(header.prev_hash)
        if parent is None:
            raise MissingParent(header.prev_hash)
        if header.version != VERSION or block.producer not in self.roster:
            return False
        if block.producer in self.ledgers[header.prev_hash].excluded:
            return False
        if header.merkle_root != merkle_root(block.transactions):
            return False
        if header.proof_hash != block.proof.hash():
            return False
        if header.time <= parent.header.time:
            return False
        if header.difficulty != self.expected_difficulty(header.prev_hash):
            return False
        for tx in block.transactions:
            if tx.kind is TxKind.FRAUD_CLAIM and not self._claim_ok(tx.claim):
                return False
        return check_poi(
            block.proof, block.producer, header.prev_hash, header.merkle_root,
            header.difficulty, self.roster, self.scheme,
        )

    def _claim_ok(self, claim: FraudClaim) -> bool:
        return (
            claim.accused in self.roster
            and claim.claimant in self.roster
            and claim.is_valid(self.scheme)
        )

    def insert_block(self, block: Block) -> InsertResult:
        """Store an already validated block and recompute the head."""
        bid = block.block_id
        if bid in self.blocks:
            return InsertResult("duplicate")
        prev = block.prev_hash
        if prev not in self.blocks:
            raise MissingParent(prev)
        self.blocks[bid] = block
        self.height[bid] = h = self.height[prev] + 1
        self.children[bid] = []
        self.children[prev].append(bid)
        self.tips.discard(prev)
        self.tips.add(bid)
        self.max_height = max(self.max_height, h)
        self.ledgers[bid] = apply_block(block, self.ledgers[prev], self.params.reward, self.roster)
        for tx in block.transactions:
            self.tx_blocks.setdefault(tx.tx_hash, []).append(bid)

        old = self.head
        if h <= self.height[old]:
            return InsertResult("unchanged")
        self.head = bid
        if prev == old:
            return InsertResult("new_head")
        fork = self.common_ancestor(old, bid)
        return InsertResult("reorg", self.height[old] - self.height[fork])

    def common_ancestor(self, a: bytes, b: bytes) -> bytes:
        ha, hb = self.height[a], self.height[b]
        a = self.ancestor(a, min(ha, hb))
        b = self.ancestor(b, min(ha, hb))
        while a != b:
            a, b = self.blocks[a].prev_hash, self.blocks[b].prev_hash
        return a
