"""Byte-exact communication accounting and a simple transfer-time model."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional

UPLINK, DOWNLINK = "uplink", "downlink"
MODEL, PROMPT = "model", "prompt"
BYTES_PER_MB = 1_000_000


@dataclass(frozen=True)
class MessageSizeModel:
    bytes_per_param: int = 4
    header_bytes: int = 64

    def __post_init__(self):
        if self.bytes_per_param <= 0 or self.header_bytes <= 0:
            raise ValueError("message sizes must be positive")

    def model_bytes(self, param_count: int) -> int:
        return self.header_bytes + param_count * self.bytes_per_param


@dataclass(frozen=True)
class CostModel:
    seconds_per_mb: float = 1.0
    round_latency: float = 0.0

    def __post_init__(self):
        if self.seconds_per_mb <= 0 or self.round_latency < 0:
            raise ValueError("link rate must be positive and latency nonnegative")


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    client: int
    direction: str
    kind: str
    bytes: int


@dataclass
class CommLedger:
    entries: list[LedgerEntry] = field(default_factory=list)

    def append(self, entry: LedgerEntry) -> None:
        if entry.bytes <= 0:
            raise ValueError("ledger entries must carry a positive byte count")
        if entry.direction not in (UPLINK, DOWNLINK) or entry.kind not in (MODEL, PROMPT):
            raise ValueError(f"bad entry {entry}")
        if entry.kind == PROMPT and entry.direction == DOWNLINK:
            raise ValueError("prompts only travel client -> server")
        self.entries.append(entry)

    def merge(self, other: "CommLedger") -> None:
        for e in other.entries:
            self.append(e)

    def total(self, direction: Optional[str] = None, kind: Optional[str] = None) -> int:
        return sum(e.bytes for e in self.entries
                   if (direction is None or e.direction == direction)
                   and (kind is None or e.kind == kind))

    def count(self, direction: Optional[str] = None, kind: Optional[str] = None,
              round: Optional[int] = None) -> int:
        return sum(1 for e in self.entries
                   if (direction is None or e.direction == direction)
                   and (kind is None or e.kind == kind)
                   and (round is None or e.round == round))

    def totals(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for e in self.entries:
            out[f"{e.direction}_{e.kind}"] += e.bytes
        out["total"] = sum(e.bytes for e in self.entries)
        return dict(sorted(out.items()))

    def per_round(self) -> dict[int, int]:
        out: dict[int, int] = defaultdict(int)
        for e in self.entries:
            out[e.round] += e.bytes
        return dict(sorted(out.items()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "client", "direction", "kind", "bytes"])
        for e in self.entries:
            w.writerow([e.round, e.client, e.direction, e.kind, e.bytes])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CommLedger":
        ledger = cls()
        for row in csv.DictReader(io.StringIO(text)):
            ledger.append(LedgerEntry(int(row["round"]), int(row["client"]), row["direction"],
                                      row["kind"], int(row["bytes"])))
        return ledger


def record_model_exchange(ledger: CommLedger, round: int, client: int, direction: str,
                          param_count: int, size_model: MessageSizeModel) -> CommLedger:
    if param_count <= 0:
        raise ValueError(f"param_count must be positive, got {param_count}")
    ledger.append(LedgerEntry(round, client, direction, MODEL, size_model.model_bytes(param_count)))
    return ledger


def record_prompt_upload(ledger: CommLedger, client: int, payload_bytes: int, round: int = 0
                         ) -> CommLedger:
    """Prompts only ever travel client -> server."""
    ledger.append(LedgerEntry(round, client, UPLINK, PROMPT, int(payload_bytes)))
    return ledger


def compare_protocols(fgl: CommLedger, fedavg: CommLedger) -> dict:
    if not fedavg.entries:
        raise ValueError("FedAvg ledger is empty")
    ratio = Fraction(fgl.total(), fedavg.total())
    up_ratio = Fraction(fgl.total(UPLINK), fedavg.total(UPLINK)) if fedavg.total(UPLINK) else None
    return {
        "fgl_total_bytes": fgl.total(),
        "fedavg_total_bytes": fedavg.total(),
        "fgl_uplink_bytes": fgl.total(UPLINK),
        "fedavg_uplink_bytes": fedavg.total(UPLINK),
        "ratio": float(ratio),
        "ratio_exact": [ratio.numerator, ratio.denominator],
        "uplink_ratio": None if up_ratio is None else float(up_ratio),
        "fedavg_per_round_bytes": [[r, b] for r, b in fedavg.per_round().items()],
    }


def estimate_costs(ledger: CommLedger, cost_model: CostModel,
                   measured: Optional[Mapping[str, float]] = None) -> dict:
    """Modeled transfer seconds plus measured compute seconds."""
    measured = dict(measured or {})
    transfer = ledger.total() / BYTES_PER_MB * cost_model.seconds_per_mb
    rounds = len({e.round for e in ledger.entries})
    transfer += rounds * cost_model.round_latency
    compute = float(sum(measured.values()))
    return {
        "transfer_seconds": transfer,
        "compute_seconds": compute,
        "total_seconds": transfer + compute,
        "rounds": rounds,
        "measured": measured,
    }


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
