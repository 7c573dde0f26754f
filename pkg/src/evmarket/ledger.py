"""Simulated consortium-chain layer.

Three contract state machines (matching, real-time management, LSTM
registry) guarded by a static allowlist, with every per-period batch of state
changes anchored into a linear hash chain for tamper evidence.

Canonical payload encoding (all little-endian):
  string  -> u16 byte length + UTF-8 bytes
  integer -> i64
  real    -> IEEE-754 binary64
  payload -> u32 event count + concatenated tagged events
Event layouts are in the ``_encode_*`` functions; anchors hash the payload
with SHA-256 and chain-link via the previous anchor's canonical encoding.
"""
from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .domain import GRID, Bid, MatchAssignment, Side, TradeEvent

ZERO_HASH = bytes(32)

EVENT_BID = 0x01
EVENT_ASSIGNMENT = 0x02
EVENT_TRADE = 0x03
EVENT_PARAMS = 0x04

_ALGORITHM_CODES = {"greedy": 0, "hungarian": 1}
_ALGORITHM_NAMES = {v: k for k, v in _ALGORITHM_CODES.items()}


class LedgerError(ValueError):
    pass


class ContractKind(Enum):
    MATCHING = 0
    MANAGEMENT = 1
    LSTM_REGISTRY = 2

    @property
    def short_name(self) -> str:
        return {0: "matching", 1: "management", 2: "lstm"}[self.value]

    @classmethod
    def from_short_name(cls, name: str) -> "ContractKind":
        for kind in cls:
            if kind.short_name == name:
                return kind
        raise LedgerError(f"unknown contract {name!r}")


@dataclass(frozen=True)
class Allowlist:
    """Authorized agent ids with their role."""

    prosumers: frozenset[str]
    evs: frozenset[str]

    def __post_init__(self) -> None:
        overlap = self.prosumers & self.evs
        if overlap:
            raise LedgerError(f"ids registered with both roles: {sorted(overlap)}")

    def role_of(self, agent_id: str) -> str | None:
        if agent_id in self.prosumers:
            return "prosumer"
        if agent_id in self.evs:
            return "ev"
        return None


@dataclass(frozen=True)
class PayloadRecord:
    """One anchored batch of contract state changes."""

    contract_kind: ContractKind
    sequence: int
    period_index: int
    payload: bytes


@dataclass(frozen=True)
class AnchorRecord:
    anchor_index: int
    contract_kind: ContractKind
    sequence: int
    period_index: int
    state_hash: bytes
    prev_anchor_hash: bytes


def _enc_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise LedgerError("string too long for canonical encoding")
    return struct.pack("<H", len(raw)) + raw


def _dec_str(buf: bytes, offset: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    return buf[offset:offset + n].decode("utf-8"), offset + n


def _encode_bid(bid: Bid) -> bytes:
    out = [struct.pack("<B", EVENT_BID), _enc_str(bid.agent_id),
           struct.pack("<q", bid.period_index)]
    if bid.side is Side.PROSUMER_NET:
        out.append(struct.pack("<Bd", 0, bid.prosumer_forecast_net_kwh))
    else:
        out.append(struct.pack("<Bdd", 1, bid.ev_available_kwh, bid.ev_headroom_kwh))
    out.append(struct.pack("<q", bid.submitted_at))
    return b"".join(out)


def _encode_assignment(a: MatchAssignment) -> bytes:
    out = [struct.pack("<Bq", EVENT_ASSIGNMENT, a.period_index),
           struct.pack("<Bd", _ALGORITHM_CODES[a.algorithm.value], a.total_cost_kwh),
           struct.pack("<I", len(a.pairs))]
    for prosumer, ev, matching_id in a.pairs:
        out.extend((_enc_str(prosumer), _enc_str(ev), _enc_str(matching_id)))
    return b"".join(out)


def _encode_trade(e: TradeEvent) -> bytes:
    has_ev = e.ev_available_kwh_after is not None
    return b"".join([
        struct.pack("<Bq", EVENT_TRADE, e.t),
        _enc_str(e.matching_id), _enc_str(e.seller_id), _enc_str(e.buyer_id),
        struct.pack("<dd", e.energy_kwh, e.price_p_per_kwh),
        struct.pack("<Bdd", 1 if has_ev else 0,
                    e.ev_available_kwh_after if has_ev else 0.0,
                    e.ev_headroom_kwh_after if has_ev else 0.0),
    ])


def _encode_params(version: int, params_hash: bytes) -> bytes:
    if len(params_hash) != 32:
        raise LedgerError("parameter hash must be 32 bytes")
    return struct.pack("<Bq", EVENT_PARAMS, version) + params_hash


def encode_payload(events: list[bytes]) -> bytes:
    return struct.pack("<I", len(events)) + b"".join(events)


def decode_payload(payload: bytes) -> list[dict]:
    """Decode a canonical payload back into event dictionaries."""
    (count,) = struct.unpack_from("<I", payload, 0)
    offset = 4
    events: list[dict] = []
    for _ in range(count):
        (tag,) = struct.unpack_from("<B", payload, offset)
        offset += 1
        if tag == EVENT_BID:
            agent, offset = _dec_str(payload, offset)
            (period,) = struct.unpack_from("<q", payload, offset)
            offset += 8
            (side,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            if side == 0:
                (forecast,) = struct.unpack_from("<d", payload, offset)
                offset += 8
                ev = {"type": "bid", "agent_id": agent, "period": period,
                      "side": "prosumer", "forecast_net_kwh": forecast}
            else:
                avail, headroom = struct.unpack_from("<dd", payload, offset)
                offset += 16
                ev = {"type": "bid", "agent_id": agent, "period": period,
                      "side": "ev", "available_kwh": avail, "headroom_kwh": headroom}
            (submitted,) = struct.unpack_from("<q", payload, offset)
            offset += 8
            ev["submitted_at"] = submitted
            events.append(ev)
        elif tag == EVENT_ASSIGNMENT:
            period, algo, total = struct.unpack_from("<qBd", payload, offset)
            offset += 17
            (n_pairs,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            pairs = []
            for _ in range(n_pairs):
                p, offset = _dec_str(payload, offset)
                v, offset = _dec_str(payload, offset)
                mid, offset = _dec_str(payload, offset)
                pairs.append((p, v, mid))
            events.append({"type": "assignment", "period": period,
                           "algorithm": _ALGORITHM_NAMES[algo],
                           "total_cost_kwh": total, "pairs": pairs})
        elif tag == EVENT_TRADE:
            (t,) = struct.unpack_from("<q", payload, offset)
            offset += 8
            mid, offset = _dec_str(payload, offset)
            seller, offset = _dec_str(payload, offset)
            buyer, offset = _dec_str(payload, offset)
            energy, price, has_ev, avail, headroom = struct.unpack_from("<ddBdd", payload, offset)
            offset += 33
            events.append({"type": "trade", "t": t, "matching_id": mid,
                           "seller_id": seller, "buyer_id": buyer,
                           "energy_kwh": energy, "price_p_per_kwh": price,
                           "ev_available_kwh_after": avail if has_ev else None,
                           "ev_headroom_kwh_after": headroom if has_ev else None})
        elif tag == EVENT_PARAMS:
            (version,) = struct.unpack_from("<q", payload, offset)
            offset += 8
            events.append({"type": "params", "version": version,
                           "param_hash": payload[offset:offset + 32].hex()})
            offset += 32
        else:
            raise LedgerError(f"unknown event tag {tag:#x}")
    if offset != len(payload):
        raise LedgerError("trailing bytes in payload")
    return events


def encode_anchor(a: AnchorRecord) -> bytes:
    return struct.pack("<qBqq", a.anchor_index, a.contract_kind.value,
                       a.sequence, a.period_index) + a.state_hash + a.prev_anchor_hash


def verify_records(payloads: list[PayloadRecord],
                   anchors: list[AnchorRecord]) -> int | None:
    """Recompute every digest and link; None when intact, else the index of
    the first broken anchor."""
    by_key = {(p.contract_kind, p.sequence): p for p in payloads}
    prev_hash = ZERO_HASH
    last_seq: dict[ContractKind, int] = {}
    for idx, anchor in enumerate(anchors):
        if anchor.anchor_index != idx:
            return idx
        payload = by_key.get((anchor.contract_kind, anchor.sequence))
        if payload is None:
            return idx
        if hashlib.sha256(payload.payload).digest() != anchor.state_hash:
            return idx
        if anchor.prev_anchor_hash != prev_hash:
            return idx
        if anchor.sequence <= last_seq.get(anchor.contract_kind, 0):
            return idx
        if payload.period_index != anchor.period_index:
            return idx
        last_seq[anchor.contract_kind] = anchor.sequence
        prev_hash = hashlib.sha256(encode_anchor(anchor)).digest()
    return None


@dataclass
class _ContractBuffer:
    sequence: int = 0
    events: list[bytes] = field(default_factory=list)


class WaspChain:
    """Serialized state machine for the three contracts plus the anchor chain.

    All transitions apply in a single total order; one anchor per contract per
    matching period (when its state changed) keeps anchor volume bounded while
    staying tamper-evident over every stored byte.
    """

    def __init__(self, allowlist: Allowlist):
        self.allowlist = allowlist
        self.payloads: list[PayloadRecord] = []
        self.anchors: list[AnchorRecord] = []
        self._buffers = {kind: _ContractBuffer() for kind in ContractKind}
        self._open_period: int | None = None
        self._bids_this_period: dict[str, Bid] = {}
        self._bidding_closed = False
        self._matching_ids: set[str] = set()
        self._charged_evs: set[str] = set()
        self._param_version = 0
        self._trade_count = 0

    # -- period lifecycle --

    def begin_period(self, period_index: int) -> None:
        if self._open_period is not None:
            raise LedgerError(f"period {self._open_period} still open")
        self._open_period = period_index
        self._bids_this_period = {}
        self._bidding_closed = False

    def end_period(self) -> None:
        if self._open_period is None:
            raise LedgerError("no open period")
        for kind in ContractKind:
            buf = self._buffers[kind]
            if not buf.events:
                continue
            buf.sequence += 1
            payload = PayloadRecord(kind, buf.sequence, self._open_period,
                                    encode_payload(buf.events))
            self.payloads.append(payload)
            prev = (hashlib.sha256(encode_anchor(self.anchors[-1])).digest()
                    if self.anchors else ZERO_HASH)
            self.anchors.append(AnchorRecord(
                len(self.anchors), kind, buf.sequence, self._open_period,
                hashlib.sha256(payload.payload).digest(), prev))
            buf.events = []
        self._open_period = None

    # -- matching contract --

    def submit_bid(self, bid: Bid, agent_id: str) -> None:
        if agent_id != bid.agent_id:
            raise LedgerError("bid submitted for a different agent")
        role = self.allowlist.role_of(agent_id)
        expected = "prosumer" if bid.side is Side.PROSUMER_NET else "ev"
        if role != expected:
            raise LedgerError(f"unauthorized: {agent_id} is not a registered {expected}")
        if self._open_period != bid.period_index or self._bidding_closed:
            raise LedgerError(f"closed period {bid.period_index}")
        if agent_id in self._bids_this_period:
            raise LedgerError(f"duplicate bid from {agent_id} in period {bid.period_index}")
        self._bids_this_period[agent_id] = bid
        self._buffers[ContractKind.MATCHING].events.append(_encode_bid(bid))

    def record_assignment(self, assignment: MatchAssignment) -> int:
        if self._open_period != assignment.period_index:
            raise LedgerError("assignment for a period that is not open")
        for prosumer, ev, matching_id in assignment.pairs:
            for agent in (prosumer, ev):
                if agent not in self._bids_this_period:
                    raise LedgerError(f"pair references missing bid from {agent}")
            self._matching_ids.add(matching_id)
        self._bidding_closed = True
        self._buffers[ContractKind.MATCHING].events.append(_encode_assignment(assignment))
        return self._buffers[ContractKind.MATCHING].sequence + 1

    # -- management contract --

    def log_trade(self, event: TradeEvent) -> int:
        if event.matching_id != GRID and event.matching_id not in self._matching_ids:
            raise LedgerError(f"unknown matching id {event.matching_id}")
        for party in (event.seller_id, event.buyer_id):
            if party != GRID and self.allowlist.role_of(party) is None:
                raise LedgerError(f"unauthorized trade party {party}")
        self._buffers[ContractKind.MANAGEMENT].events.append(_encode_trade(event))
        self._trade_count += 1
        if event.matching_id != GRID and self.allowlist.role_of(event.buyer_id) == "ev":
            self._charged_evs.add(event.buyer_id)
        return self._buffers[ContractKind.MANAGEMENT].sequence + 1

    def has_charge_event(self, ev_id: str) -> bool:
        return ev_id in self._charged_evs

    # -- LSTM registry contract --

    def publish_params(self, params_hash: bytes, version: int) -> int:
        if version != self._param_version + 1:
            raise LedgerError(f"version gap: head is {self._param_version}, got {version}")
        self._param_version = version
        self._buffers[ContractKind.LSTM_REGISTRY].events.append(
            _encode_params(version, params_hash))
        return self._buffers[ContractKind.LSTM_REGISTRY].sequence + 1

    # -- verification and export --

    def verify_chain(self) -> int | None:
        return verify_records(self.payloads, self.anchors)

    def iter_trades(self) -> list[dict]:
        trades = []
        for record in self.payloads:
            if record.contract_kind is ContractKind.MANAGEMENT:
                trades.extend(e for e in decode_payload(record.payload)
                              if e["type"] == "trade")
        return trades

    def export_files(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        write_payloads(self.payloads, out_dir / "ledger_payloads.bin")
        write_anchors_csv(self.anchors, out_dir / "anchors.csv")


def write_payloads(payloads: list[PayloadRecord], path: str | Path) -> None:
    with Path(path).open("wb") as fh:
        for p in payloads:
            fh.write(struct.pack("<BqqI", p.contract_kind.value, p.sequence,
                                 p.period_index, len(p.payload)))
            fh.write(p.payload)


def read_payloads(path: str | Path) -> list[PayloadRecord]:
    blob = Path(path).read_bytes()
    offset = 0
    out = []
    while offset < len(blob):
        kind, sequence, period, n = struct.unpack_from("<BqqI", blob, offset)
        offset += struct.calcsize("<BqqI")
        out.append(PayloadRecord(ContractKind(kind), sequence, period,
                                 blob[offset:offset + n]))
        offset += n
    return out


def write_anchors_csv(anchors: list[AnchorRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["anchor_index", "contract", "sequence", "period",
                         "state_hash_hex", "prev_hash_hex"])
        for a in anchors:
            writer.writerow([a.anchor_index, a.contract_kind.short_name, a.sequence,
                             a.period_index, a.state_hash.hex(), a.prev_anchor_hash.hex()])


def read_anchors_csv(path: str | Path) -> list[AnchorRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise LedgerError(f"{path}: empty anchors file")
        for row in reader:
            if not row:
                continue
            out.append(AnchorRecord(int(row[0]), ContractKind.from_short_name(row[1]),
                                    int(row[2]), int(row[3]),
                                    bytes.fromhex(row[4]), bytes.fromhex(row[5])))
    return out


def verify_files(run_dir: str | Path) -> int | None:
    """Verify an exported run directory's ledger; see verify_records."""
    run_dir = Path(run_dir)
    payloads = read_payloads(run_dir / "ledger_payloads.bin")
    anchors = read_anchors_csv(run_dir / "anchors.csv")
    return verify_records(payloads, anchors)
