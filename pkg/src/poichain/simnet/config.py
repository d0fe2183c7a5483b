"""Scenario parameters. Times are virtual milliseconds unless a name says otherwise."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

ADVERSARY_KINDS = ("none", "double_tour", "selfish", "shared_keys")
SCHEMES = ("ed25519", "transparent")


class ConfigError(ValueError):
    def __init__(self, key: str, problem: str):
        super().__init__(f"{key}: {problem}")
        self.key = key


@dataclass(frozen=True)
class FaultSpec:
    node: int
    crash_at: float
    reboot_at: float | None = None


@dataclass(frozen=True)
class AdversaryConfig:
    """Which nodes misbehave and how.

    ``colluders`` lists node indices (key-derivation order). ``k`` is the
    number of parallel tours of a double-tourer, ``release_at`` the time
    before which it keeps completed blocks to itself, ``rounds`` how many
    heads it double-tours on. ``serve_requests`` and ``race`` shape the
    selfish miner.
    """

    kind: str = "none"
    colluders: tuple[int, ...] = ()
    k: int = 2
    release_at: float = 0.0
    rounds: int = 1
    serve_requests: bool = True
    race: bool = True


@dataclass(frozen=True)
class SimConfig:
    n: int = 10
    seed: int = 1
    com_mean: float = 10.0
    com_jitter: float = 0.0  # lognormal sigma; 0 means every message takes exactly com_mean
    delta_max: float = 100.0
    target_block_interval: float = 100.0
    initial_difficulty: int = 10
    reward: int = 100
    stake: int = 1000
    retarget_period: int = 100
    blocks: int = 50  # halt once some node's head reaches this height
    max_time: float | None = None
    processing_delay: float = 0.0
    mining_start: float = 0.0
    scheme: str = "ed25519"
    faults: tuple[FaultSpec, ...] = ()
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n < 2:
            raise ConfigError("n", "need at least 2 nodes")
        if self.com_mean <= 0:
            raise ConfigError("com_mean", "must be positive")
        if self.com_jitter < 0:
            raise ConfigError("com_jitter", "must be >= 0")
        if self.com_mean > self.delta_max:
            raise ConfigError("delta_max", "must be >= com_mean")
        if self.initial_difficulty < 1:
            raise ConfigError("initial_difficulty", "must be >= 1")
        if self.target_block_interval <= 0:
            raise ConfigError("target_block_interval", "must be positive")
        if self.retarget_period < 1:
            raise ConfigError("retarget_period", "must be >= 1")
        if self.blocks < 1:
            raise ConfigError("blocks", "must be >= 1")
        if self.processing_delay < 0 or self.mining_start < 0:
            raise ConfigError("processing_delay", "times must be >= 0")
        if self.scheme not in SCHEMES:
            raise ConfigError("scheme", f"must be one of {SCHEMES}")
        for f in self.faults:
            if not 0 <= f.node < self.n:
                raise ConfigError("faults.node", f"index {f.node} out of range")
            if f.crash_at < 0 or (f.reboot_at is not None and f.reboot_at <= f.crash_at):
                raise ConfigError("faults.reboot_at", "must come after crash_at")
        adv = self.adversary
        if adv.kind not in ADVERSARY_KINDS:
            raise ConfigError("adversary.kind", f"must be one of {ADVERSARY_KINDS}")
        if any(not 0 <= c < self.n for c in adv.colluders) or len(set(adv.colluders)) != len(adv.colluders):
            raise ConfigError("adversary.colluders", "indices must be distinct and in range")
        if adv.kind != "none" and not adv.colluders:
            raise ConfigError("adversary.colluders", "adversary needs at least one node")
        if adv.kind == "double_tour" and (len(adv.colluders) != 1 or adv.k < 2):
            raise ConfigError("adversary.k", "double touring needs one node and k >= 2")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SimConfig:
        """Build a config from plain data, rejecting unknown keys by name."""
        data = dict(data or {})
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown key")
        if "faults" in data:
            faults = []
            for i, raw in enumerate(data["faults"] or ()):
                faults.append(_build(FaultSpec, raw, f"faults[{i}]"))
            data["faults"] = tuple(faults)
        if "adversary" in data:
            raw = dict(data["adversary"] or {})
            if "colluders" in raw:
                raw["colluders"] = tuple(raw["colluders"])
            data["adversary"] = _build(AdversaryConfig, raw, "adversary")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from exc

    def replace(self, **changes: Any) -> SimConfig:
        return dataclasses.replace(self, **changes)


def _build(kind, raw: dict[str, Any], where: str):
    known = {f.name for f in dataclasses.fields(kind)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{where}.{key}", "unknown key")
    return kind(**raw)
