"""Per-node queues and the timeslot backlog update law.

Each node keeps a compact packet queue (CPQ) per commodity holding fully
decoded packets, and a partial packet queue (PPQ) ledger holding accumulated
mutual information for packets it has only overheard.  The RMIA ledger
(``epoch_info``) tracks, per transmitter stream, information accumulated
purely within that transmitter's current epoch; it is wiped by the renewal
operation at every epoch end, while PPQ entries survive epochs under MIA
and are erased only when their packet is delivered.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .errors import IntegrityError


class Scheme(Enum):
    REP = "rep"
    RMIA = "rmia"
    MIA = "mia"


@dataclass(slots=True, frozen=True)
class Packet:
    pid: int
    commodity: int
    source: int
    created_slot: int


@dataclass
class NodeState:
    node: int
    cpq: dict[int, deque[Packet]] = field(default_factory=dict)
    ppq: dict[int, float] = field(default_factory=dict)
    # transmitter stream key -> bits accumulated in that stream's current epoch
    epoch_info: dict[object, float] = field(default_factory=dict)

    def queue(self, commodity: int) -> deque[Packet]:
        q = self.cpq.get(commodity)
        if q is None:
            q = self.cpq[commodity] = deque()
        return q

    def backlog(self, commodity: int) -> int:
        q = self.cpq.get(commodity)
        return len(q) if q is not None else 0


@dataclass(frozen=True)
class BacklogSnapshot:
    """CPQ backlogs frozen at a slot boundary; q[n][ci] indexed by the
    position of the commodity in ``commodities``."""

    q: tuple[tuple[int, ...], ...]
    commodities: tuple[int, ...]

    def backlog(self, n: int, commodity: int) -> int:
        return self.q[n][self.commodities.index(commodity)]


def snapshot(states: list[NodeState], commodities: tuple[int, ...]) -> BacklogSnapshot:
    rows = tuple(
        tuple(st.backlog(c) for c in commodities) for st in states
    )
    return BacklogSnapshot(q=rows, commodities=commodities)


def accumulate(
    state: NodeState,
    transmitter: object,
    packet_id: int,
    rate: float,
    scheme: Scheme,
    h0: float,
) -> tuple[bool, bool]:
    """Apply one slot of reception at this node; returns (ack_rmia, ack_mia).

    REP discards partial information: decode iff this slot alone carries a
    whole packet.  RMIA accumulates within the transmitter's current epoch.
    MIA additionally charges the packet's PPQ entry, so pre-accumulated
    information from earlier epochs counts toward ack_mia.
    """
    if rate < 0.0:
        raise ValueError(f"rate must be >= 0, got {rate}")
    if scheme is Scheme.REP:
        ok = rate >= h0
        return ok, ok
    info = state.epoch_info.get(transmitter, 0.0) + rate
    state.epoch_info[transmitter] = info
    ack_rmia = info >= h0
    if scheme is Scheme.RMIA:
        return ack_rmia, ack_rmia
    total = state.ppq.get(packet_id, 0.0) + rate
    state.ppq[packet_id] = total
    return ack_rmia, total >= h0


def renewal_clear(
    states: list[NodeState],
    transmitter: object,
    packet_id: int,
    scheme: Scheme,
    receivers,
) -> None:
    """End-of-epoch cleanup at the receivers of one transmitter stream.

    The RMIA ledger is wiped for every receiver.  Under RMIA the packet's
    partial information disappears entirely; under MIA the PPQ entries stay
    (the forwarding rule deals with decoders separately).
    """
    for k in receivers:
        st = states[k]
        st.epoch_info.pop(transmitter, None)
        if scheme is not Scheme.MIA:
            st.ppq.pop(packet_id, None)


def erase_packet_info(states: list[NodeState], packet_id: int) -> None:
    """Remove every PPQ trace of a packet (delivery, or null-packet cleanup)."""
    for st in states:
        st.ppq.pop(packet_id, None)


def apply_slot_update(
    states: list[NodeState],
    transfers: list[tuple[int, int, Packet | None, int]],
    arrivals: list[tuple[int, int, int]],
    slot: int = 0,
    next_pid: int = 0,
) -> tuple[list[Packet], int]:
    """Realize one slot of queue motion: forwarded packets, then arrivals.

    transfers: (from_node, to_node, packet_or_None, commodity); a None packet
    is a scheduled null transmission and moves nothing (the inequality slack
    in the backlog update law).  A real packet must sit at the head of the
    sender's CPQ for its commodity, else the run is corrupt.  Packets whose
    transfer lands on their destination leave the network immediately; they
    are returned as delivered.  arrivals: (node, commodity, count) append
    fresh packets.  Returns (delivered, next_pid).
    """
    delivered: list[Packet] = []
    for sender, receiver, packet, commodity in transfers:
        if packet is None:
            continue
        q = states[sender].cpq.get(commodity)
        if not q or q[0].pid != packet.pid:
            raise IntegrityError(
                f"slot {slot}: node {sender} scheduled packet {packet.pid} "
                f"which is not at the head of its commodity-{commodity} CPQ"
            )
        q.popleft()
        if receiver == packet.commodity:
            delivered.append(packet)
        else:
            states[receiver].queue(commodity).append(packet)
    for node, commodity, count in arrivals:
        q = states[node].queue(commodity)
        for _ in range(count):
            q.append(Packet(next_pid, commodity, node, slot))
            next_pid += 1
    return delivered, next_pid


def census(states: list[NodeState]) -> dict[int, int]:
    """Packet ids -> holder node; raises if the single-copy rule is broken."""
    holders: dict[int, int] = {}
    for st in states:
        for q in st.cpq.values():
            for pkt in q:
                if pkt.pid in holders:
                    raise IntegrityError(
                        f"packet {pkt.pid} held by both {holders[pkt.pid]} and {st.node}"
                    )
                holders[pkt.pid] = st.node
    return holders
