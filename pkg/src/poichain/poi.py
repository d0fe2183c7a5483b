"""Proof-of-Interaction: service sets, tour lengths, the tour state machine, checking.

A tour for dependency ``d`` and message ``m`` starts from ``s0 = sign(u0, d)``.
``s0`` seeds both the service set (a shuffled prefix of the roster) and the
tour length. Each hop is picked from the running hash: the visited node signs
``h || d || m``, the initiator countersigns that reply, and the hash of the
countersignature picks the next hop. The proof is
``[s0, s1, s1', ..., sL, sL']``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Callable, Sequence

from .crypto import ED25519, HASH_LEN, KeyPair, NodeId, SeededRng, SignatureScheme, digest, rng_word

MAX_SERVICES = 20
MAX_DIFFICULTY = 2**32 - 1


class PoIError(ValueError):
    pass


class InvalidRoster(PoIError):
    pass


class InvalidDifficulty(PoIError):
    pass


class BadResponse(PoIError):
    """A sign response did not verify for the node addressed at this step."""


def service_count(n: int) -> int:
    return min(MAX_SERVICES, n // 2)


def _sorted_roster(roster: Sequence[bytes]) -> list[NodeId]:
    members = sorted(NodeId(bytes(r)) for r in roster)
    if len(members) < 2:
        raise InvalidRoster(f"roster needs at least 2 nodes, got {len(members)}")
    if any(a == b for a, b in zip(members, members[1:])):
        raise InvalidRoster("duplicate node in roster")
    return members


def create_services(roster: Sequence[bytes], seed: bytes) -> tuple[NodeId, ...]:
    """First ``min(20, n // 2)`` entries of a Fisher-Yates shuffle of ``roster``.

    The shuffle is driven by ``SeededRng(H(seed))``; the roster is put in
    public-key order first, so callers may pass it in any order.
    """
    members = _sorted_roster(roster)
    rng = SeededRng(digest(seed))
    for i in range(len(members) - 1, 0, -1):
        word, rng = rng.next()
        j = word % (i + 1)
        members[i], members[j] = members[j], members[i]
    return tuple(members[: service_count(len(members))])


def check_difficulty(mean: int) -> int:
    if not isinstance(mean, int) or not 1 <= mean <= MAX_DIFFICULTY:
        raise InvalidDifficulty(f"difficulty mean must be in [1, 2^32), got {mean!r}")
    return mean


def tour_length(mean: int, seed: bytes) -> int:
    """Tour length, uniform on ``[1, 2*mean - 1]`` so that its expectation is ``mean``."""
    check_difficulty(mean)
    return 1 + rng_word(digest(seed + b"len"), 0) % (2 * mean - 1)


def hop_index(current_hash: bytes, size: int) -> int:
    return struct.unpack(">Q", current_hash[:8])[0] % size


def next_hop(current_hash: bytes, services: Sequence[NodeId]) -> NodeId:
    return services[hop_index(current_hash, len(services))]


def request_payload(h: bytes, d: bytes, m: bytes) -> bytes:
    if len(h) != HASH_LEN or len(d) != HASH_LEN or len(m) != HASH_LEN:
        raise ValueError("h, d and m must each be 32 bytes")
    return h + d + m


@dataclass(frozen=True)
class PoIProof:
    signatures: tuple[bytes, ...]

    def __len__(self) -> int:
        return len(self.signatures)

    @property
    def tour_len(self) -> int:
        return max(0, (len(self.signatures) - 1) // 2)

    def to_bytes(self) -> bytes:
        out = [struct.pack(">H", len(self.signatures))]
        for sig in self.signatures:
            out.append(struct.pack(">H", len(sig)))
            out.append(sig)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> PoIProof:
        proof, used = cls.read(data, 0)
        if used != len(data):
            raise ValueError("trailing bytes after proof")
        return proof

    @classmethod
    def read(cls, data: bytes, offset: int) -> tuple[PoIProof, int]:
        """Parse a proof at ``offset``; returns it with the offset just past it."""
        if offset + 2 > len(data):
            raise ValueError("truncated proof count")
        (count,) = struct.unpack_from(">H", data, offset)
        offset += 2
        sigs = []
        for _ in range(count):
            if offset + 2 > len(data):
                raise ValueError("truncated signature length")
            (size,) = struct.unpack_from(">H", data, offset)
            offset += 2
            if offset + size > len(data):
                raise ValueError("truncated signature")
            sigs.append(bytes(data[offset : offset + size]))
            offset += size
        return cls(tuple(sigs)), offset

    def hash(self) -> bytes:
        return digest(self.to_bytes())


EMPTY_PROOF = PoIProof(())


@dataclass(frozen=True)
class SignRequest:
    """The ``(h, d, m)`` tuple sent to a visited node, signed by the initiator.

    The initiator signature makes two conflicting requests a proof of
    double-touring that anyone can check.
    """

    h: bytes
    d: bytes
    m: bytes
    initiator: NodeId
    req_sig: bytes

    @property
    def payload(self) -> bytes:
        return request_payload(self.h, self.d, self.m)

    def is_signed(self, scheme: SignatureScheme = ED25519) -> bool:
        try:
            payload = self.payload
        except ValueError:
            return False
        return scheme.verify(self.initiator, self.req_sig, payload)

    def to_bytes(self) -> bytes:
        return (
            self.h + self.d + self.m + self.initiator
            + struct.pack(">H", len(self.req_sig)) + self.req_sig
        )

    @classmethod
    def read(cls, data: bytes, offset: int) -> tuple[SignRequest, int]:
        end = offset + 4 * HASH_LEN + 2
        if end > len(data):
            raise ValueError("truncated sign request")
        fields = [bytes(data[offset + i * HASH_LEN : offset + (i + 1) * HASH_LEN]) for i in range(4)]
        (size,) = struct.unpack_from(">H", data, end - 2)
        if end + size > len(data):
            raise ValueError("truncated request signature")
        sig = bytes(data[end : end + size])
        return cls(fields[0], fields[1], fields[2], NodeId(fields[3]), sig), end + size

    @classmethod
    def from_bytes(cls, data: bytes) -> SignRequest:
        req, used = cls.read(data, 0)
        if used != len(data):
            raise ValueError("trailing bytes after sign request")
        return req


@dataclass(frozen=True)
class TourState:
    initiator: NodeId
    dependency: bytes
    message: bytes
    services: tuple[NodeId, ...]
    target_len: int
    step: int
    current_hash: bytes
    partial: tuple[bytes, ...]

    @property
    def target(self) -> NodeId:
        """Node addressed by the outstanding request."""
        return next_hop(self.current_hash, self.services)

    def request(self, key: KeyPair, scheme: SignatureScheme = ED25519) -> SignRequest:
        payload = request_payload(self.current_hash, self.dependency, self.message)
        return SignRequest(
            self.current_hash, self.dependency, self.message, self.initiator,
            scheme.sign(key, payload),
        )


@dataclass(frozen=True)
class Completed:
    proof: PoIProof


def tour_begin(
    key: KeyPair,
    roster: Sequence[bytes],
    d: bytes,
    m: bytes,
    difficulty: int,
    scheme: SignatureScheme = ED25519,
) -> tuple[TourState, SignRequest]:
    if key.public not in set(map(bytes, roster)):
        raise InvalidRoster("initiator is not in the roster")
    s0 = scheme.sign(key, d)
    services = create_services(roster, s0)
    length = tour_length(difficulty, s0)
    state = TourState(
        initiator=key.public,
        dependency=d,
        message=m,
        services=services,
        target_len=length,
        step=0,
        current_hash=digest(s0 + m),
        partial=(s0,),
    )
    return state, state.request(key, scheme)


def tour_advance(
    state: TourState,
    key: KeyPair,
    response: bytes,
    scheme: SignatureScheme = ED25519,
) -> tuple[TourState, SignRequest | Completed]:
    """Consume the visited node's signature; raise :class:`BadResponse` if it is wrong."""
    payload = request_payload(state.current_hash, state.dependency, state.message)
    if not scheme.verify(state.target, response, payload):
        raise BadResponse(f"response does not verify for step {state.step}")
    counter = scheme.sign(key, response)
    new = replace(
        state,
        step=state.step + 1,
        current_hash=digest(counter),
        partial=state.partial + (bytes(response), counter),
    )
    if new.step == new.target_len:
        return new, Completed(PoIProof(new.partial))
    return new, new.request(key, scheme)


def answer_request(key: KeyPair, req: SignRequest, scheme: SignatureScheme = ED25519) -> bytes:
    return scheme.sign(key, req.payload)


def generate_poi(
    key: KeyPair,
    roster: Sequence[bytes],
    d: bytes,
    m: bytes,
    difficulty: int,
    key_of: Callable[[NodeId], KeyPair],
    scheme: SignatureScheme = ED25519,
) -> tuple[PoIProof, list[NodeId]]:
    """Run a whole tour in-process, answering each hop with ``key_of(node)``.

    Returns the proof and the visited nodes in order. Only usable when every
    visited key is at hand: tests, and colluders that pooled their keys.
    """
    state, out = tour_begin(key, roster, d, m, difficulty, scheme)
    visited = []
    while isinstance(out, SignRequest):
        visited.append(state.target)
        state, out = tour_advance(state, key, answer_request(key_of(state.target), out, scheme), scheme)
    return out.proof, visited


@dataclass(frozen=True)
class PoIVerdict:
    valid: bool
    tour_len: int = 0
    index: int | None = None  # first failing signature index
    check: str | None = None  # "initiator", "length", "service" or "countersign"

    def __bool__(self) -> bool:
        return self.valid

    def describe(self) -> str:
        if self.valid:
            return f"valid, L={self.tour_len}"
        if self.check == "length":
            return "invalid: length"
        return f"invalid at index {self.index} ({self.check})"


def inspect_poi(
    proof: PoIProof,
    u: bytes,
    d: bytes,
    m: bytes,
    difficulty: int,
    roster: Sequence[bytes],
    scheme: SignatureScheme = ED25519,
) -> PoIVerdict:
    """Check a proof and say where it first fails.

    A valid proof costs exactly ``2L + 1`` signature verifications.
    """
    sigs = proof.signatures
    if not sigs or len(d) != HASH_LEN or len(m) != HASH_LEN:
        return PoIVerdict(False, index=0, check="initiator")
    if not scheme.verify(u, sigs[0], d):
        return PoIVerdict(False, index=0, check="initiator")
    try:
        services = create_services(roster, sigs[0])
        length = tour_length(difficulty, sigs[0])
    except PoIError:
        return PoIVerdict(False, index=0, check="initiator")
    if 2 * length + 1 != len(sigs):
        return PoIVerdict(False, tour_len=length, check="length")
    current = digest(sigs[0] + m)
    for i in range(length):
        reply, counter = sigs[2 * i + 1], sigs[2 * i + 2]
        if not scheme.verify(next_hop(current, services), reply, current + d + m):
            return PoIVerdict(False, length, 2 * i + 1, "service")
        if not scheme.verify(u, counter, reply):
            return PoIVerdict(False, length, 2 * i + 2, "countersign")
        current = digest(counter)
    return PoIVerdict(True, length)


def check_poi(
    proof: PoIProof,
    u: bytes,
    d: bytes,
    m: bytes,
    difficulty: int,
    roster: Sequence[bytes],
    scheme: SignatureScheme = ED25519,
) -> bool:
    return inspect_poi(proof, u, d, m, difficulty, roster, scheme).valid


def tour_visits(proof: PoIProof, m: bytes, roster: Sequence[bytes]) -> list[NodeId]:
    """Visited nodes implied by a well-formed proof (signatures are not checked)."""
    sigs = proof.signatures
    if not sigs:
        return []
    services = create_services(roster, sigs[0])
    current = digest(sigs[0] + m)
    visited = []
    for i in range(proof.tour_len):
        visited.append(next_hop(current, services))
        current = digest(sigs[2 * i + 2])
    return visited
