"""Run measurements, filled in from node observer callbacks."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Any


@dataclass
class Metrics:
    blocks: list[dict[str, Any]] = field(default_factory=list)
    tours: list[dict[str, Any]] = field(default_factory=list)
    messages: Counter[str] = field(default_factory=Counter)
    dropped: int = 0
    forks: int = 0
    reorgs: list[int] = field(default_factory=list)
    stuck_tours: set[tuple[int, str, str]] = field(default_factory=set)
    conflicts: list[dict[str, Any]] = field(default_factory=list)
    invalid_blocks: int = 0
    first_public: dict[str, int] = field(default_factory=dict)
    first_answer: dict[str, int] = field(default_factory=dict)
    adversary: list[dict[str, Any]] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)

    def total_messages(self) -> int:
        return sum(self.messages.values())

    def records(self) -> list[dict[str, Any]]:
        out = [{"type": "block", **b} for b in self.blocks]
        out.append({
            "type": "counters",
            "messages": dict(sorted(self.messages.items())),
            "dropped": self.dropped,
            "forks": self.forks,
            "reorgs": len(self.reorgs),
            "max_reorg_depth": max(self.reorgs, default=0),
            "stuck_tours": len(self.stuck_tours),
            "fraud_conflicts": len(self.conflicts),
            "invalid_blocks": self.invalid_blocks,
        })
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def summary_json(self) -> str:
        return json.dumps(self.summary, sort_keys=True, indent=2) + "\n"
