"""Misbehaving participants, each a separate state machine built on :class:`Node`.

The honest class is never patched; these override only the hooks where the
strategy deviates.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..chain import Block, Transaction, merkle_root
from ..crypto import KeyPair, NodeId
from ..node import Action, BlockAnnounce, Node, Send, SignRequestMsg, SignResponse, Timer
from ..poi import BadResponse, Completed, SignRequest, TourState, answer_request, tour_advance, tour_begin


@dataclass
class _Variant:
    txs: tuple[Transaction, ...]
    state: TourState
    outstanding: SignRequest


class DoubleTourNode(Node):
    """Runs ``k`` tours on the same dependency with different block contents.

    Completed blocks are held until ``release_at`` (microseconds), then the
    first one is published. After ``rounds`` heads it behaves honestly.
    """

    def __init__(self, *args, k: int = 2, release_at: int = 0, rounds: int = 1, **kwargs):
        super().__init__(*args, **kwargs)
        self.k = k
        self.release_at = release_at
        self.rounds_left = rounds
        self.variants: dict[int, _Variant] = {}
        self.held: list[Block] = []

    def on_new_head(self, now: int) -> list[Action]:
        self.variants.clear()
        if self.rounds_left <= 0 or not self.mining or self.excluded:
            return super().on_new_head(now)
        self.rounds_left -= 1
        self.tour = self.outstanding = None
        self.tour_seq += 1
        self._forget_stale()
        base = self.assemble_candidate()
        d = self.chain.head
        difficulty = self.chain.expected_difficulty(d)
        actions: list[Action] = []
        for i in range(self.k):
            txs = base + (Transaction.opaque(b"variant-%d-" % i + self.id),)
            state, req = tour_begin(self.key, self.chain.roster, d, merkle_root(txs), difficulty, self.scheme)
            self.variants[i] = _Variant(txs, state, req)
            self.observe("adv_tour", variant=i, d=d, m=state.message, length=state.target_len)
            actions += self._send_variant(i)
        return actions

    def _send_variant(self, i: int) -> list[Action]:
        v = self.variants[i]
        self.observe("adv_request", variant=i, target=v.state.target, d=v.state.dependency, m=v.state.message)
        return [
            Send(v.state.target, SignRequestMsg(v.outstanding)),
            Timer(self.retry_after, ("retry_variant", self.tour_seq, i, v.state.step)),
        ]

    def on_sign_request(self, now: int, req: SignRequest) -> list[Action]:
        if req.initiator == self.id:  # never police our own tours
            return [Send(self.id, SignResponse(self.id, req.h, answer_request(self.key, req, self.scheme)))]
        return super().on_sign_request(now, req)

    def on_sign_response(self, now: int, resp: SignResponse) -> list[Action]:
        if not self.variants:
            return super().on_sign_response(now, resp)
        for i, v in self.variants.items():
            if resp.h == v.state.current_hash and resp.responder == v.state.target:
                break
        else:
            return []
        try:
            state, out = tour_advance(v.state, self.key, resp.signature, self.scheme)
        except BadResponse:
            return []
        if isinstance(out, Completed):
            del self.variants[i]
            self.candidate = v.txs
            block = self._make_block(now, state, out, v.txs)
            self.observe("adv_complete", variant=i, block=block)
            self.held.append(block)
            if now >= self.release_at:
                return self._release(now)
            return [Timer(self.release_at - now, ("release",))]
        self.variants[i] = _Variant(v.txs, state, out)
        return self._send_variant(i)

    def _release(self, now: int) -> list[Action]:
        block, self.held = self.held[0], []
        if block.prev_hash != self.chain.head:
            return []
        self.variants.clear()
        return self._publish(now, block)

    def on_timer(self, now: int, tag: tuple) -> list[Action]:
        if tag[0] == "release":
            return self._release(now) if self.held else []
        if tag[0] == "retry_variant":
            _, seq, i, step = tag
            v = self.variants.get(i)
            if seq == self.tour_seq and v is not None and v.state.step == step:
                return self._send_variant(i)
            return []
        return super().on_timer(now, tag)


class SelfishNode(Node):
    """Withholds its blocks, sharing them only with fellow colluders.

    A withheld block leaves the private set only when an honest node asks for
    it (it must, before signing a request that depends on it) or, with
    ``race``, when the honest chain catches up to the private head.
    """

    def __init__(self, *args, colluders: frozenset[NodeId], serve_requests: bool = True,
                 race: bool = True, **kwargs):
        super().__init__(*args, **kwargs)
        self.colluders = colluders
        self.serve_requests = serve_requests
        self.race = race
        self.private: set[bytes] = set()

    def _publish(self, now: int, block: Block) -> list[Action]:
        if not self.chain.validate_block(block):
            raise AssertionError("produced an invalid block")
        bid = block.block_id
        self.announced.add(bid)
        self.private.add(bid)
        self.observe("withheld", block=block)
        actions: list[Action] = [Send(u, BlockAnnounce(block)) for u in self.peers if u in self.colluders]
        return actions + self._accept_block(now, block)

    def _relay(self, block: Block, src: NodeId) -> list[Action]:
        if block.producer in self.colluders and src in self.colluders:
            self.announced.add(block.block_id)
            self.private.add(block.block_id)
            return []
        return super()._relay(block, src)

    def on_block_request(self, now: int, src: NodeId, block_id: bytes) -> list[Action]:
        if block_id in self.private and src not in self.colluders:
            if not self.serve_requests:
                self.observe("refused", block_id=block_id, requester=src)
                return []
            self.private.discard(block_id)
            self.observe("forced_public", block_id=block_id, requester=src)
        return super().on_block_request(now, src, block_id)

    def on_block(self, now: int, src: NodeId, block: Block) -> list[Action]:
        actions = super().on_block(now, src, block)
        if not self.race or src in self.colluders or block.block_id not in self.chain:
            return actions
        chain = self.chain
        if chain.height[block.block_id] == chain.head_height and chain.head != block.block_id:
            for bid in chain.path():
                if bid in self.private:
                    self.private.discard(bid)
                    self.observe("race_public", block_id=bid)
                    actions += [Send(u, BlockAnnounce(chain.blocks[bid])) for u in self.peers
                                if u not in self.colluders]
        return actions


class SharedKeysNode(Node):
    """Colluder holding every colluder's private key.

    Tour steps that land on a colluder are signed on the spot, with no
    network round trip; only honest hops go over the wire.
    """

    def __init__(self, *args, pool: dict[NodeId, KeyPair], **kwargs):
        super().__init__(*args, **kwargs)
        self.pool = pool
        self.network_steps = 0

    def on_new_head(self, now: int) -> list[Action]:
        self.tour = self.outstanding = None
        self.tour_seq += 1
        self._forget_stale()
        if not self.mining or self.excluded:
            return []
        # Start on a fresh event: an all-local tour finishes instantly and would
        # otherwise recurse through the next head change.
        return [Timer(0, ("tour", self.tour_seq))]

    def on_timer(self, now: int, tag: tuple) -> list[Action]:
        if tag[0] == "tour":
            if tag[1] != self.tour_seq or self.tour is not None:
                return []
            self.candidate = self.assemble_candidate()
            d = self.chain.head
            difficulty = self.chain.expected_difficulty(d)
            state, req = tour_begin(self.key, self.chain.roster, d, merkle_root(self.candidate),
                                    difficulty, self.scheme)
            self.network_steps = 0
            self.observe("tour_begin", initiator=self.id, d=d, m=state.message,
                         services=state.services, length=state.target_len, difficulty=difficulty)
            return self._drive(now, state, req)
        return super().on_timer(now, tag)

    def _drive(self, now: int, state: TourState, out) -> list[Action]:
        while isinstance(out, SignRequest) and state.target in self.pool:
            sig = answer_request(self.pool[state.target], out, self.scheme)
            state, out = tour_advance(state, self.key, sig, self.scheme)
        self.tour = state
        if isinstance(out, Completed):
            self.observe("shared_tour_done", d=state.dependency, m=state.message,
                         all_local=self.network_steps == 0)
            return self._complete(now, state, out)
        self.network_steps += 1
        return self._send_request(state, out)

    def on_sign_response(self, now: int, resp: SignResponse) -> list[Action]:
        state = self.tour
        if state is None or resp.h != state.current_hash or resp.responder != state.target:
            return []
        try:
            state, out = tour_advance(state, self.key, resp.signature, self.scheme)
        except BadResponse:
            return []
        return self._drive(now, state, out)
