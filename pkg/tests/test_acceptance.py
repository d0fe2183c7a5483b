"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s`` to see the lines
as they happen; a plain ``pytest`` run lists them in the terminal summary.
"""

import math
import random
import statistics
import time
from fractions import Fraction

import pytest

from poichain.chain import (
    ChainParams,
    ChainStore,
    Transaction,
    apply_rewards,
    assemble_block,
)
from poichain.crypto import ED25519, make_keys
from poichain.poi import (
    EMPTY_PROOF,
    PoIProof,
    check_poi,
    generate_poi,
    service_count,
    tour_length,
    tour_visits,
)
from poichain.simnet import AdversaryConfig, FaultSpec, SimConfig, Simulation, analysis, run

from conftest import ACCEPTANCE_LINES


def report(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def pool():
    keys = make_keys(b"acceptance", 50)
    return keys, {k.public: k for k in keys}.__getitem__


# -- 1 ----------------------------------------------------------------------


def test_c01_round_trip_validity(pool):
    keys, key_of = pool
    rng = random.Random(101)
    start = time.perf_counter()
    failures = 0
    for _ in range(100):
        n, mean = rng.randint(2, 50), rng.randint(1, 50)
        d, m = rng.randbytes(32), rng.randbytes(32)
        roster = [k.public for k in keys[:n]]
        initiator = keys[rng.randrange(n)]
        proof, _ = generate_poi(initiator, roster, d, m, mean, key_of)
        failures += not check_poi(proof, initiator.public, d, m, mean, roster)
    elapsed = time.perf_counter() - start
    report(1, failures == 0 and elapsed < 30,
           f"100 random tuples, {failures} rejected, {elapsed:.1f} s (limit 30 s)")


# -- 2 ----------------------------------------------------------------------


def test_c02_mutation_rejection(pool):
    keys, key_of = pool
    rng = random.Random(202)
    false_accepts = parse_rejects = checked = 0
    lengths = []
    while len(lengths) < 10:
        n, mean = rng.randint(2, 30), rng.randint(1, 3)
        roster = [k.public for k in keys[:n]]
        u, d, m = keys[rng.randrange(n)], rng.randbytes(32), rng.randbytes(32)
        proof, _ = generate_poi(u, roster, d, m, mean, key_of)
        assert proof.tour_len <= 5
        lengths.append(proof.tour_len)
        raw = proof.to_bytes()
        for pos in range(len(raw)):
            for flip in (0x01, 0x80, 0xFF):
                bad = bytearray(raw)
                bad[pos] ^= flip
                checked += 1
                try:
                    mutated = PoIProof.from_bytes(bytes(bad))
                except ValueError:
                    parse_rejects += 1
                    continue
                false_accepts += check_poi(mutated, u.public, d, m, mean, roster)
    report(2, false_accepts == 0,
           f"10 proofs (L={lengths}), {checked} single-byte mutations, "
           f"{false_accepts} false accepts ({parse_rejects} rejected at parse)")


# -- 3 ----------------------------------------------------------------------


def _fingerprint(result):
    chains = []
    proofs = []
    for chain in result.chains:
        for bid in sorted(chain.blocks):
            chains.append(chain.blocks[bid].to_bytes())
            proofs.append(chain.blocks[bid].proof.to_bytes())
    return result.metrics.to_jsonl(), result.metrics.summary_json(), chains, proofs


def test_c03_determinism():
    scenarios = [
        SimConfig(n=8, seed=11, com_jitter=0.6, initial_difficulty=4, blocks=25,
                  faults=(FaultSpec(2, 50.0, 400.0),)),
        SimConfig(n=8, seed=12, com_jitter=0.4, initial_difficulty=3, blocks=20,
                  adversary=AdversaryConfig(kind="selfish", colluders=(0, 1))),
    ]
    same = [(_fingerprint(run(cfg)) == _fingerprint(run(cfg))) for cfg in scenarios]
    differs = _fingerprint(run(scenarios[0])) != _fingerprint(run(scenarios[0].replace(seed=13)))
    report(3, all(same) and differs,
           f"byte-identical proofs, chains and metrics on re-run: {same}; other seed differs: {differs}")


# -- 4 ----------------------------------------------------------------------


class CountingScheme:
    name = "counting-ed25519"

    def __init__(self):
        self.calls = 0

    def sign(self, key, msg):
        return ED25519.sign(key, msg)

    def verify(self, pk, sig, msg):
        self.calls += 1
        return ED25519.verify(pk, sig, msg)


def test_c04_proof_size_and_verification_cost(pool):
    keys, key_of = pool
    rng = random.Random(404)
    bad = []
    for _ in range(30):
        n, mean = rng.randint(2, 50), rng.randint(1, 30)
        roster = [k.public for k in keys[:n]]
        u, d, m = keys[rng.randrange(n)], rng.randbytes(32), rng.randbytes(32)
        proof, visited = generate_poi(u, roster, d, m, mean, key_of)
        L = tour_length(mean, proof.signatures[0])
        counter = CountingScheme()
        ok = check_poi(proof, u.public, d, m, mean, roster, counter)
        if not (ok and len(proof) == 2 * L + 1 == len(visited) * 2 + 1 and counter.calls == 2 * L + 1):
            bad.append((L, len(proof), counter.calls))
    report(4, not bad, f"30 proofs: |proof| = 2L+1 and exactly 2L+1 verifications; mismatches {bad}")


# -- 5 ----------------------------------------------------------------------


def test_c05_tour_length_statistics():
    lengths = [tour_length(10, i.to_bytes(8, "big")) for i in range(10_000)]
    mean10 = statistics.fmean(lengths)
    groups = 100_000
    mins = [
        min(tour_length(27, (g * 10 + j).to_bytes(8, "big") + b"min") for j in range(10))
        for g in range(groups)
    ]
    emp = statistics.fmean(mins)
    approx = analysis.continuous_min_tour_estimate(27, 10)
    exact = float(analysis.expected_min_tour(27, 10))
    se = statistics.stdev(mins) / math.sqrt(groups)
    ok_mean = abs(mean10 - 10) <= 0.2
    ok_min = abs(emp - approx) <= 0.1 * approx
    ok_exact = abs(emp - exact) <= 4 * se
    report(5, ok_mean and ok_min and ok_exact,
           f"mean=10: sample mean {mean10:.3f} (within 2%: {ok_mean}); "
           f"E[min of 10], mean=27: {emp:.4f} vs 2*27/11={approx:.4f} "
           f"({(emp / approx - 1) * 100:+.1f}%, within 10%: {ok_min}); "
           f"exact discrete {exact:.4f}, |diff| {abs(emp - exact) / se:.1f} SE")


# -- 6 ----------------------------------------------------------------------


def test_c06_block_interval_formula():
    cfg = SimConfig(n=10, seed=6, com_mean=10, com_jitter=0, initial_difficulty=27,
                    retarget_period=10**6, blocks=300)
    result = run(cfg)
    chain = result.reference().chain
    main = chain.path()[1:]
    measured = result.metrics.summary["mean_block_interval_ms"]
    realized = statistics.fmean(chain.blocks[b].proof.tour_len for b in main)
    exact = float(analysis.expected_min_tour(27, 10))
    approx = analysis.continuous_min_tour_estimate(27, 10)
    pred_realized = 2 * realized * cfg.com_mean
    pred_exact = 2 * exact * cfg.com_mean
    pred_approx = 2 * approx * cfg.com_mean
    ok_r = abs(measured - pred_realized) <= 0.15 * pred_realized
    ok_e = abs(measured - pred_exact) <= 0.15 * pred_exact
    report(6, len(main) >= 300 and ok_r and ok_e,
           f"{len(main)} blocks, mean interval {measured:.1f} ms; "
           f"2*realized L_min*Com = {pred_realized:.1f} ({(measured / pred_realized - 1) * 100:+.1f}%), "
           f"2*E[L_min]*Com = {pred_exact:.1f} ({(measured / pred_exact - 1) * 100:+.1f}%); "
           f"continuous 2*4.91*Com = {pred_approx:.1f} ({(measured / pred_approx - 1) * 100:+.1f}%, shown only)")


# -- 7 ----------------------------------------------------------------------


def _crash_sweep(n, crashed, seeds, difficulty):
    faults = tuple(FaultSpec(i, 0.0) for i in range(crashed))
    clean = tours = any_clean = 0
    for seed in range(seeds):
        cfg = SimConfig(n=n, seed=seed, initial_difficulty=difficulty, blocks=20, max_time=300,
                        faults=faults)
        result = run(cfg)
        live = [t for t in result.metrics.tours if t["node"] >= crashed]
        ok = [t["crashed_in_services"] == 0 for t in live]
        clean += sum(ok)
        tours += len(ok)
        any_clean += any(ok)
    return clean, tours, any_clean / seeds


def test_c07_crash_faults():
    lines = []
    verdicts = []
    for n, crashed, seeds in ((30, 15, 200), (6, 3, 200)):
        n_s = service_count(n)
        clean, tours, any_freq = _crash_sweep(n, crashed, seeds, difficulty=10)
        p = analysis.all_alive_probability(n, crashed, n_s)
        sigma = math.sqrt(p * (1 - p) / tours)
        measured = clean / tours
        ok = abs(measured - p) <= 3 * sigma
        verdicts.append(ok)
        lines.append(
            f"n={n}, {crashed} crashed, {seeds} seeds, {tours} tours: unstuck {measured:.4g} "
            f"vs hypergeometric {p:.4g} (3 sigma {3 * sigma:.2g}, ok {ok}); "
            f"coin-flip {analysis.independent_all_alive(n_s):.4g}; "
            f"p=1-(1-(1/2)^nS)^n {analysis.any_set_unstuck_probability(n, n_s):.4g} "
            f"vs measured any-unstuck {any_freq:.3f}"
        )
    report(7, all(verdicts), " | ".join(lines))


# -- 8 ----------------------------------------------------------------------


def _double_tour_seed(seed, n, mean):
    cfg = SimConfig(n=n, seed=seed, initial_difficulty=mean, blocks=400, mining_start=500,
                    adversary=AdversaryConfig(kind="double_tour", colluders=(0,), k=2, release_at=500))
    sim = Simulation(cfg)
    adv = sim.ids[0]
    result = sim.run(until=lambda s: all(adv in nd.chain.ledger.excluded for nd in s.nodes[1:]))
    targets = {}
    for e in result.metrics.adversary:
        if e["event"] == "adv_request" and e["target"] != 0:
            targets.setdefault(e["variant"], set()).add(e["target"])
    common = targets.get(0, set()) & targets.get(1, set())
    detectors = {c["detector"] for c in result.metrics.conflicts}

    slashed = None
    if detectors:
        chain = result.reference().chain
        slashed = False
        for bid in chain.path()[1:]:
            block = chain.blocks[bid]
            claims = [tx.claim for tx in block.transactions if tx.claim is not None and tx.claim.accused == adv]
            if not claims:
                continue
            before = chain.ledgers[block.prev_hash]
            after = chain.ledgers[bid]
            rewarded = apply_rewards(block, before, cfg.reward, chain.roster)
            claimant = claims[0].claimant
            slashed = (
                before.stakes[adv] == cfg.stake and after.stakes[adv] == 0
                and after.balances[claimant] - rewarded.balances[claimant] == cfg.stake
                and adv in after.excluded
            )
            break
    return common, detectors, slashed


def test_c08_double_touring_detection():
    parts = []
    verdicts = []
    for n, mean, seeds in ((10, 4, 200), (40, 20, 12)):
        misses = false_alarms = set_mismatch = landed = detected = 0
        for seed in range(seeds):
            common, detectors, slashed = _double_tour_seed(seed, n, mean)
            misses += bool(common) and not detectors
            false_alarms += bool(detectors) and not common
            set_mismatch += detectors != common
            detected += bool(detectors)
            landed += bool(slashed)
        ok = misses == false_alarms == set_mismatch == 0 and landed == detected
        verdicts.append(ok)
        parts.append(f"n={n}, mean={mean}, {seeds} seeds: {detected} detections, {misses} misses, "
                     f"{false_alarms} false alarms, detector set == intersection in all runs: "
                     f"{set_mismatch == 0}, full-stake claims on chain {landed}/{detected}")
    report(8, all(verdicts), " | ".join(parts))


# -- 9 ----------------------------------------------------------------------


def test_c09_selfish_mining():
    parts = []
    verdicts = []
    for n, colluders, mean, seeds in ((6, (0,), 3, 20), (10, (0, 1, 2), 5, 20)):
        cases = visited_violations = literal_cases = literal_violations = unexplained = 0
        rewards = minted = slots = colluder_slots = 0
        for seed in range(seeds):
            cfg = SimConfig(n=n, seed=seed, initial_difficulty=mean, blocks=60, retarget_period=10**6,
                            com_jitter=0.3, adversary=AdversaryConfig(kind="selfish", colluders=colluders))
            sim = Simulation(cfg)
            result = sim.run()
            m = result.metrics
            withheld = {e["block"] for e in m.adversary if e["event"] == "withheld"}
            tours = {(t["node"], t["d"], t["m"]): t for t in m.tours}
            for b in m.blocks:
                if b["parent"] not in withheld or b["producer"] not in colluders:
                    continue
                bid = bytes.fromhex(b["id"])
                block = next(c.blocks[bid] for c in result.chains if bid in c)
                visited = {sim.index[u] for u in tour_visits(block.proof, block.header.merkle_root, sim.roster)}
                services = tours[(b["producer"], b["parent"], block.header.merkle_root.hex())]["services"]
                public_first = m.first_public.get(b["parent"], math.inf) < b["time_us"]
                honest_visit = bool(visited - set(colluders))
                cases += 1
                if honest_visit and not public_first:
                    visited_violations += 1
                if any(s not in colluders for s in services):
                    literal_cases += 1
                    if not public_first:
                        literal_violations += 1
                        unexplained += honest_visit
            s = m.summary
            chain = result.reference().chain
            rewards += sum(s["balances"][c] for c in colluders)
            minted += cfg.reward * chain.head_height
            for bid in chain.path()[1:]:
                blk = chain.blocks[bid]
                people = {sim.index[u] for u in tour_visits(blk.proof, blk.header.merkle_root, sim.roster)}
                people.add(sim.index[blk.producer])
                slots += len(people)
                colluder_slots += len(people & set(colluders))
        reward_share, part_share = rewards / minted, colluder_slots / slots
        share_ok = abs(reward_share - part_share) <= 0.10 * part_share
        ok = cases > 0 and visited_violations == 0 and unexplained == 0 and share_ok
        verdicts.append(ok)
        parts.append(
            f"{len(colluders)}/{n} withholders, {seeds} seeds: {cases} proofs built on withheld blocks; "
            f"tours visiting an honest node completed before the block went public: {visited_violations}; "
            f"service set with an honest node but block still private: {literal_violations}/{literal_cases}, "
            f"all from tours that visited colluders only: {unexplained == 0}; "
            f"reward share {reward_share:.3f} vs participation {part_share:.3f} "
            f"({(reward_share / part_share - 1) * 100:+.1f}%)"
        )
    report(9, all(verdicts), " | ".join(parts))


# -- 10 ---------------------------------------------------------------------


def test_c10_shared_mining():
    colluders = (0, 1, 2, 3)
    measured = oracle = tours = 0
    mu = var = 0.0
    per_run_equal = True
    for seed in range(20):
        cfg = SimConfig(n=8, seed=seed, initial_difficulty=3, blocks=40, retarget_period=10**6,
                        adversary=AdversaryConfig(kind="shared_keys", colluders=colluders))
        sim = Simulation(cfg)
        result = sim.run()
        key_of = {k.public: k for k in sim.keys}.__getitem__
        run_oracle = 0
        for t in result.metrics.tours:
            if t["node"] not in colluders:
                continue
            tours += 1
            _, visited = generate_poi(sim.keys[t["node"]], sim.roster, bytes.fromhex(t["d"]),
                                      bytes.fromhex(t["m"]), t["difficulty"], key_of)
            run_oracle += all(sim.index[u] in colluders for u in visited)
            c = sum(1 for s in t["services"] if s in colluders)
            p = analysis.all_colluder_tour_probability(c, len(t["services"]), t["length"])
            mu += p
            var += p * (1 - p)
        run_measured = sum(1 for e in result.metrics.adversary
                           if e["event"] == "shared_tour_done" and e["all_local"])
        per_run_equal &= run_measured == run_oracle
        measured += run_measured
        oracle += run_oracle
    sigma = math.sqrt(var)
    ok = per_run_equal and abs(measured - mu) <= 3 * sigma
    report(10, ok,
           f"F/n=0.5, n=8, mean=3, 20 runs, {tours} colluder tours: all-colluder tours {measured}, "
           f"per-run oracle {oracle} (equal in every run: {per_run_equal}); "
           f"analytic sum (c/n_S)^L = {mu:.1f} +- {3 * sigma:.1f} (3 sigma), "
           f"deviation {(measured - mu) / sigma:+.2f} sigma")


# -- 11 ---------------------------------------------------------------------


def test_c11_message_complexity():
    sizes = (10, 20, 40)
    totals, tour_rates, per_node = [], [], []
    for n in sizes:
        cfg = SimConfig(n=n, seed=1, initial_difficulty=analysis.mean_for_interval(2, n),
                        retarget_period=10**6, blocks=30)
        result = run(cfg)
        s = result.metrics.summary
        ms = result.end_time / 1000
        tour_msgs = s["messages"].get("SignRequestMsg", 0) + s["messages"].get("SignResponse", 0)
        totals.append(s["messages_per_ms"])
        tour_rates.append(tour_msgs / ms)
        per_node.append(tour_msgs / ms / n * cfg.com_mean)
    _, _, r2 = analysis.linear_fit_r2(list(sizes), totals)
    _, _, r2_tour = analysis.linear_fit_r2(list(sizes), tour_rates)
    report(11, r2 >= 0.95,
           f"n={list(sizes)}: total messages/ms {[round(x, 2) for x in totals]}, linear R^2 {r2:.4f}; "
           f"tour messages/ms {[round(x, 3) for x in tour_rates]}, R^2 {r2_tour:.5f}; "
           f"tour messages per node per Com {[round(x, 2) for x in per_node]}")


# -- 12 ---------------------------------------------------------------------


def _closed_loop(mean0, n, com_schedule, period, target):
    """Drive a real ChainStore whose block times follow the interval model."""
    roster = tuple(k.public for k in make_keys(b"retarget", n))
    store = ChainStore(roster, ChainParams(initial_difficulty=mean0, retarget_period=period,
                                           target_interval=target))
    clock = Fraction(0)
    means = []
    for height in range(1, period * len(com_schedule) + 1):
        com = com_schedule[(height - 1) // period]
        difficulty = store.expected_difficulty(store.head)
        if (height - 1) % period == 0:
            means.append(difficulty)
        clock += 2 * analysis.expected_min_tour(difficulty, n) * com
        block = assemble_block(prev_hash=store.head, time=math.floor(clock), difficulty=difficulty,
                               transactions=(Transaction.opaque(height.to_bytes(4, "big")),),
                               proof=EMPTY_PROOF, producer=roster[0])
        store.insert_block(block)
    means.append(store.expected_difficulty(store.head))
    return means


def _fixed_points(n, com, target, lo, hi):
    """Means the proportional rule maps to themselves at latency ``com``."""
    out = []
    for mean in range(lo, hi):
        interval = 2 * analysis.expected_min_tour(mean, n) * com
        if round(Fraction(mean) * target / interval) == mean:
            out.append(mean)
    return out


def test_c12_retarget_fixed_point():
    n, period, mean0, com = 10, 20, 27, 10
    target = round(2 * analysis.expected_min_tour(mean0, n) * com)
    steady = _closed_loop(mean0, n, [com] * 3, period, target)
    halved = _closed_loop(mean0, n, [com] + [com / 2] * 5, period, target)
    steps = halved[1:]
    clamp_ok = all(Fraction(b, a) <= 4 and Fraction(b, a) >= Fraction(1, 4)
                   for a, b in zip(halved, halved[1:]))
    fixed = _fixed_points(n, com / 2, target, mean0, 8 * mean0)
    first_ok = abs(steps[1] - 2 * mean0) <= 1
    settled = steps[-1] in fixed or any(abs(steps[-1] - f) <= 1 for f in fixed)
    moved_toward = all(abs(x - 2 * mean0) < abs(mean0 - 2 * mean0) for x in steps[1:])
    report(12, all(x == mean0 for x in steady) and clamp_ok and first_ok and settled and moved_toward,
           f"target {target} ms, Com {com}: means over 3 periods {steady}; "
           f"Com halved: {halved} (first retarget {steps[1]} vs 2x={2 * mean0}; "
           f"settles at {steps[-1]}, controller fixed point {fixed}, "
           f"{(steps[-1] / (2 * mean0) - 1) * 100:+.1f}% from 2x; clamp respected {clamp_ok})")
