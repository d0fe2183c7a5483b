"""Command-line entry point: run scenarios and inspect proofs and blocks.

Exit codes: 0 success, 1 invalid proof or block, 2 bad arguments or config,
3 unreadable or corrupt input file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .chain import HEADER_LEN, Block, merkle_root
from .crypto import NodeId
from .poi import PoIProof, inspect_poi
from .simnet import ConfigError, SimConfig, Simulation

EXIT_INVALID = 1
EXIT_CONFIG = 2
EXIT_FILE = 3

log = logging.getLogger("poichain")


class InputError(Exception):
    """A file could not be read or parsed."""


def _read_bytes(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc


def _hex(value: str, name: str, size: int = 32) -> bytes:
    try:
        raw = bytes.fromhex(value)
    except ValueError:
        raise ConfigError(name, "not a hex string") from None
    if len(raw) != size:
        raise ConfigError(name, f"expected {size} bytes, got {len(raw)}")
    return raw


def read_roster(path: str) -> list[NodeId]:
    """One hex public key per line; blank lines and ``#`` comments are ignored.

    Lines may carry a leading index column (as written by ``run``).
    """
    text = _read_bytes(path).decode("utf-8", errors="replace")
    roster = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        token = line.split()[-1]
        try:
            key = bytes.fromhex(token)
        except ValueError:
            raise InputError(f"{path}:{lineno}: not a hex key") from None
        if len(key) != 32:
            raise InputError(f"{path}:{lineno}: key must be 32 bytes")
        roster.append(NodeId(key))
    if len(roster) < 2:
        raise InputError(f"{path}: roster needs at least 2 keys")
    return roster


def load_scenario(path: str) -> tuple[SimConfig, str | None]:
    """Parse a YAML scenario; returns the config and the optional ``out`` directory."""
    try:
        data = yaml.safe_load(_read_bytes(path)) or {}
    except yaml.YAMLError as exc:
        raise InputError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InputError(f"{path}: top level must be a mapping")
    out = data.pop("out", None)
    return SimConfig.from_dict(data), out


# -- commands ----------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    config, out = load_scenario(args.scenario)
    overrides = {
        "seed": args.seed, "n": args.n, "com_mean": args.com,
        "initial_difficulty": args.difficulty_mean, "blocks": args.blocks,
    }
    changes = {k: v for k, v in overrides.items() if v is not None}
    if changes:
        config = SimConfig.from_dict({**config.to_dict(), **changes})
    out_dir = Path(args.out or out or "out")

    sim = Simulation(config)
    result = sim.run()
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.jsonl").write_text(result.metrics.to_jsonl())
    (out_dir / "summary.json").write_text(result.metrics.summary_json())
    (out_dir / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    (out_dir / "roster.txt").write_text("".join(f"{i} {u.hex()}\n" for i, u in enumerate(sim.ids)))
    blocks_dir = out_dir / "blocks"
    blocks_dir.mkdir(exist_ok=True)
    chain = result.reference().chain
    for height, bid in enumerate(chain.path()):
        (blocks_dir / f"{height:06d}.blk").write_bytes(chain.blocks[bid].to_bytes())

    s = result.metrics.summary
    print(f"height {s['main_chain_height']}, {s['blocks_produced']} blocks produced, "
          f"mean interval {s['mean_block_interval_ms']} ms, {s['messages_total']} messages")
    if "crash" in s:
        c = s["crash"]
        print(f"stuck tours {s['stuck_tours']}, unstuck fraction {c['unstuck_fraction']} "
              f"(exact {c['exact_all_alive']:.3g})")
    print(f"wrote {out_dir}")
    return 0


def cmd_verify_proof(args: argparse.Namespace) -> int:
    raw = _read_bytes(args.proof)
    try:
        proof = PoIProof.from_bytes(raw)
    except ValueError as exc:
        raise InputError(f"{args.proof}: corrupt proof ({exc})") from exc
    roster = read_roster(args.roster)
    verdict = inspect_poi(
        proof, _hex(args.initiator, "initiator"), _hex(args.d, "d"), _hex(args.m, "m"),
        args.difficulty, roster,
    )
    print(verdict.describe())
    return 0 if verdict else EXIT_INVALID


def describe_block(block: Block) -> list[str]:
    h = block.header
    return [
        f"block id     {block.block_id.hex()}",
        f"version      {h.version}",
        f"time         {h.time} ms",
        f"difficulty   {h.difficulty}",
        f"extra        {h.extra:#010x}",
        f"prev hash    {h.prev_hash.hex()}",
        f"merkle root  {h.merkle_root.hex()}",
        f"proof hash   {h.proof_hash.hex()}",
        f"producer     {block.producer.hex()}",
        f"transactions {len(block.transactions)}",
        f"proof        {len(block.proof)} signatures, L={block.proof.tour_len}",
    ]


def block_checks(block: Block, roster: list[NodeId]) -> dict[str, bool]:
    """Checks that need no chain context: commitments, producer and proof."""
    h = block.header
    return {
        "merkle root": h.merkle_root == merkle_root(block.transactions),
        "proof hash": h.proof_hash == block.proof.hash(),
        "producer in roster": block.producer in roster,
        "proof": bool(inspect_poi(block.proof, block.producer, h.prev_hash, h.merkle_root,
                                  h.difficulty, roster)),
    }


def cmd_inspect_block(args: argparse.Namespace) -> int:
    raw = _read_bytes(args.block)
    if len(raw) < HEADER_LEN:
        raise InputError(f"{args.block}: {len(raw)} bytes, shorter than a header")
    try:
        block = Block.from_bytes(raw)
    except ValueError as exc:
        raise InputError(f"{args.block}: corrupt block ({exc})") from exc
    lines = describe_block(block)
    if args.json:
        h = block.header
        print(json.dumps({
            "block_id": block.block_id.hex(), "version": h.version, "time": h.time,
            "difficulty": h.difficulty, "extra": h.extra, "prev_hash": h.prev_hash.hex(),
            "merkle_root": h.merkle_root.hex(), "proof_hash": h.proof_hash.hex(),
            "producer": block.producer.hex(), "transactions": len(block.transactions),
            "proof_signatures": len(block.proof),
        }, indent=2))
    else:
        print("\n".join(lines))
    if args.roster is None:
        return 0
    checks = block_checks(block, read_roster(args.roster))
    for name, ok in checks.items():
        print(f"check {name}: {'ok' if ok else 'FAILED'}")
    return 0 if all(checks.values()) else EXIT_INVALID


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poichain", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("scenario", help="YAML scenario file")
    run.add_argument("--seed", type=int)
    run.add_argument("--n", type=int, help="number of nodes")
    run.add_argument("--com", type=float, help="mean message latency, virtual ms")
    run.add_argument("--difficulty-mean", type=int, help="initial mean tour length")
    run.add_argument("--blocks", type=int, help="halt at this chain height")
    run.add_argument("--out", help="output directory (default: scenario 'out' or ./out)")
    run.set_defaults(func=cmd_run)

    vp = sub.add_parser("verify-proof", help="check a serialized proof")
    vp.add_argument("proof", help="proof file (binary)")
    vp.add_argument("--initiator", required=True, help="initiator public key, hex")
    vp.add_argument("--d", required=True, help="dependency, hex")
    vp.add_argument("--m", required=True, help="message, hex")
    vp.add_argument("--difficulty", type=int, required=True, help="mean tour length")
    vp.add_argument("--roster", required=True, help="roster file, one hex key per line")
    vp.set_defaults(func=cmd_verify_proof)

    ib = sub.add_parser("inspect-block", help="dump a block file")
    ib.add_argument("block")
    ib.add_argument("--roster", help="also run context-free validity checks against this roster")
    ib.add_argument("--json", action="store_true")
    ib.set_defaults(func=cmd_inspect_block)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FILE


if __name__ == "__main__":
    sys.exit(main())
