"""Slotted simulation loop: epochs, ACK collection, forwarding, renewal,
deliveries, and arrivals.

Within one timeslot the protocol order is: backlog exchange and transmit
decisions (for nodes at an epoch boundary), data transmission, per-receiver
ACK/NACK, forwarding decision and copy cleanup, then exogenous arrivals.

Channel randomness is positional: every link consumes exactly one draw per
slot from its own column of a pregenerated stream, whether or not anyone
transmits.  Policy choice therefore cannot perturb channel realizations,
which is what makes coupled-seed comparisons between REP/RMIA/MIA exact.
A consequence worth exploiting: an epoch's ending slot and final ACK sets
are a function of its starting slot and the draws alone, so they are
resolved from per-link prefix sums when the epoch begins, and the loop only
does work at epoch boundaries and arrival events.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .analytics import MetricsSeries
from .errors import ConfigError, IntegrityError
from .policy import DivbarPolicy, Policy, StationaryPolicy
from .queueing import NodeState, Packet, Scheme
from .topology import Topology, validate

CHUNK_SLOTS = 65536
_NULL_PID = -1


def _no_land(node: int, slot: int) -> None:
    pass


@dataclass
class SimConfig:
    topology: Topology
    policy: Policy
    slots: int
    seed: int
    arrival_process: str = "bernoulli_batch"  # or "poisson"
    mia_loser_ledger: str = "retain"  # or "clear"
    trace: bool = False
    grid_cells: int = 1024
    max_order: int = 512
    initial_packets: tuple[tuple[int, int], ...] = ()  # (node, commodity)
    record_backlogs: bool = False  # keep per-(node, commodity) series
    use_kernel: bool = True  # compiled loop when available (traces force the
    # pure-Python reference loop, which is the semantic ground truth)


@dataclass
class RunResult:
    series: MetricsSeries
    flows: dict[tuple[int, int, int], float]  # scheduled (n, k, c) -> pkts/slot
    realized_flows: dict[tuple[int, int, int], float]
    states: list[NodeState]
    trace: list[tuple] | None
    packets_created: int
    packets_delivered: int
    epochs: int


def decode_threshold(h0: float) -> float:
    """Effective decode threshold: a hair under h0 so that discrete-atom
    sums meeting h0 exactly are not lost to float rounding."""
    return h0 * (1.0 - 1e-12)


def draw_arrivals(
    topo: Topology, process: str, rng: np.random.Generator
) -> list[tuple[int, int, int]]:
    """One slot of exogenous arrivals: (node, commodity, count) triples.

    bernoulli_batch is a sum of a_max Bernoulli(rate / a_max) trials, so the
    per-slot count is capped at a_max by construction; poisson draws are
    clipped to a_max (their mean lands slightly below the nominal rate).
    """
    out = []
    for (n, c) in sorted(topo.arrival_rates):
        rate = topo.arrival_rates[(n, c)]
        if rate <= 0.0:
            continue
        if process == "bernoulli_batch":
            count = int(rng.binomial(topo.a_max, rate / topo.a_max))
        elif process == "poisson":
            count = min(int(rng.poisson(rate)), topo.a_max)
        else:
            raise ConfigError(f"unknown arrival process {process!r}")
        if count:
            out.append((n, c, count))
    return out


# ---------------------------------------------------------------------------
# Channel stream generation
# ---------------------------------------------------------------------------


@dataclass
class ChannelStreams:
    """Pregenerated per-link randomness for one run."""

    links: list[tuple[int, int]]  # column order
    col: dict[tuple[int, int], int]
    prefix: np.ndarray  # (slots + 1, L) prefix sums of per-slot rates
    rep_next: dict[int, np.ndarray] | None  # node -> next single-slot success
    ends: dict[int, np.ndarray] | None  # node -> epoch end slot per start slot
    # node -> receiver bitmask of the first successful set, indexed by the
    # epoch's start slot (accumulation) or by the ending slot (repetition)
    omega_bits: dict[int, np.ndarray] | None = None
    rep_bits: dict[int, np.ndarray] | None = None

    def rate(self, col: int, slot: int) -> float:
        return float(self.prefix[slot + 1, col] - self.prefix[slot, col])


def generate_channel_streams(
    topo: Topology,
    slots: int,
    seed: int,
    need_rep: bool,
    need_ends: bool,
) -> ChannelStreams:
    links = sorted(topo.links)
    col = {lk: j for j, lk in enumerate(links)}
    models = [topo.links[lk] for lk in links]
    n_links = len(links)
    h0_eff = decode_threshold(topo.h0)
    rng = np.random.default_rng([seed, 11])

    prefix = np.zeros((slots + 1, n_links))
    succ_any: dict[int, np.ndarray] = {}
    node_cols = {
        n: [col[(n, k)] for k in topo.neighbors(n)]
        for n in range(topo.node_count)
        if topo.neighbors(n)
    }
    if need_rep:
        succ_any = {n: np.zeros(slots, dtype=bool) for n in node_cols}
    for a in range(0, slots, CHUNK_SLOTS):
        b = min(a + CHUNK_SLOTS, slots)
        u = rng.random((b - a, n_links))
        rates = np.empty_like(u)
        for j, model in enumerate(models):
            rates[:, j] = model.rates_from_uniform(u[:, j])
        np.cumsum(rates, axis=0, out=rates)
        prefix[a + 1 : b + 1] = rates + prefix[a]
        if need_rep:
            single = prefix[a + 1 : b + 1] - prefix[a:b]
            for n, cols in node_cols.items():
                succ_any[n][a:b] = (single[:, cols] >= h0_eff).any(axis=1)

    rep_next = None
    rep_bits = None
    if need_rep:
        rep_next = {}
        rep_bits = {}
        single = prefix[1:] - prefix[:-1]
        for n, cols in node_cols.items():
            flags = succ_any[n]
            nxt = np.full(slots + 1, slots, dtype=np.int64)
            idx = np.flatnonzero(flags)
            nxt[idx] = idx
            rep_next[n] = np.minimum.accumulate(nxt[::-1])[::-1]
            bits = np.zeros(slots, dtype=np.int16)
            for i, j in enumerate(cols):
                bits |= (single[:, j] >= h0_eff).astype(np.int16) << i
            rep_bits[n] = bits
        del single

    ends = None
    omega_bits = None
    if need_ends:
        ends = {}
        omega_bits = {}
        for n, cols in node_cols.items():
            per_recv = [
                np.searchsorted(
                    prefix[1:, j], prefix[:slots, j] + h0_eff, side="left"
                )
                for j in cols
            ]
            emin = (
                np.minimum.reduce(per_recv) if len(per_recv) > 1 else per_recv[0]
            )
            ends[n] = emin
            bits = np.zeros(slots, dtype=np.int16)
            for i, e_recv in enumerate(per_recv):
                bits |= (e_recv == emin).astype(np.int16) << i
            omega_bits[n] = bits

    return ChannelStreams(
        links=links,
        col=col,
        prefix=prefix,
        rep_next=rep_next,
        ends=ends,
        omega_bits=omega_bits,
        rep_bits=rep_bits,
    )


def _pregenerate_arrivals(
    topo: Topology, slots: int, seed: int, process: str, multiplier: float = 1.0
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """All arrival events of a run as (slot, pair index, count) arrays."""
    pairs = sorted(k for k, v in topo.arrival_rates.items() if v > 0.0)
    rng = np.random.default_rng([seed, 22])
    if not pairs:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, empty, pairs
    counts = np.zeros((slots, len(pairs)), dtype=np.int64)
    for idx, key in enumerate(pairs):
        rate = topo.arrival_rates[key] * multiplier
        if rate > topo.a_max + 1e-12:
            raise ConfigError(
                f"arrival rate {rate} at {key} exceeds a_max {topo.a_max}"
            )
        if process == "bernoulli_batch":
            counts[:, idx] = rng.binomial(topo.a_max, rate / topo.a_max, size=slots)
        elif process == "poisson":
            counts[:, idx] = np.minimum(rng.poisson(rate, size=slots), topo.a_max)
        else:
            raise ConfigError(f"unknown arrival process {process!r}")
    slot_idx, pair_idx = np.nonzero(counts)
    return slot_idx, pair_idx, counts[slot_idx, pair_idx], pairs


# ---------------------------------------------------------------------------
# Run state shared by both policy families
# ---------------------------------------------------------------------------


class _RunState:
    def __init__(self, config: SimConfig):
        topo = config.topology
        problems = validate(topo)
        if problems:
            raise ConfigError("invalid topology: " + "; ".join(problems))
        if config.slots < 1:
            raise ConfigError(f"slots must be >= 1, got {config.slots}")
        if config.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if config.mia_loser_ledger not in ("retain", "clear"):
            raise ConfigError(f"unknown mia_loser_ledger {config.mia_loser_ledger!r}")

        self.config = config
        self.topo = topo
        self.commodities = topo.commodities
        self.cidx = {c: i for i, c in enumerate(self.commodities)}
        self.n_nodes = topo.node_count
        self.receivers = [topo.neighbors(n) for n in range(self.n_nodes)]
        self.h0_eff = decode_threshold(topo.h0)

        self.states = [NodeState(node=n) for n in range(self.n_nodes)]
        nc = len(self.commodities)
        self.q = [[0] * nc for _ in range(self.n_nodes)]
        self.cpq: list[list[deque]] = [
            [self.states[n].queue(c) for c in self.commodities]
            for n in range(self.n_nodes)
        ]
        self.total_backlog = [0] * self.n_nodes
        self.occupancy = 0
        self.next_pid = 0

        slot_idx, pair_idx, cnts, pairs = _pregenerate_arrivals(
            topo, config.slots, config.seed, config.arrival_process
        )
        self.arr_slots = slot_idx.tolist()
        self.arr_pairs = pair_idx.tolist()
        self.arr_counts = cnts.tolist()
        self.lam_pairs = pairs

        tracked = list(pairs) + [p for p in config.initial_packets if p not in pairs]
        self.delivered_pairs = tracked
        self.delivered_counts = {p: 0 for p in tracked}
        self.occ_series = np.zeros(config.slots, dtype=np.int64)
        self.delivered_series = {
            p: np.zeros(config.slots, dtype=np.int64) for p in tracked
        }
        self.backlog_series = None
        if config.record_backlogs:
            self.backlog_series = {
                (n, c): np.zeros(config.slots, dtype=np.int64)
                for n in range(self.n_nodes)
                for c in self.commodities
            }
        self.sched_flow: dict[tuple[int, int, int], int] = {}
        self.real_flow: dict[tuple[int, int, int], int] = {}
        self.trace: list[tuple] | None = [] if config.trace else None
        self.packets_created = 0
        self.packets_delivered = 0
        self.epochs = 0
        # hook invoked when a packet lands on a node (wakes dormant nodes)
        self.on_land = _no_land

        for (node, commodity) in config.initial_packets:
            self._add_packet(node, commodity, -1)

    def _add_packet(self, node: int, commodity: int, slot: int) -> Packet:
        pkt = Packet(self.next_pid, commodity, node, slot)
        self.next_pid += 1
        self.cpq[node][self.cidx[commodity]].append(pkt)
        self.q[node][self.cidx[commodity]] += 1
        self.total_backlog[node] += 1
        self.occupancy += 1
        self.packets_created += 1
        return pkt

    def apply_arrivals(self, slot: int, ptr: int) -> int:
        arr_slots = self.arr_slots
        while ptr < len(arr_slots) and arr_slots[ptr] == slot:
            node, commodity = self.lam_pairs[self.arr_pairs[ptr]]
            for _ in range(self.arr_counts[ptr]):
                pkt = self._add_packet(node, commodity, slot)
                if self.trace is not None:
                    self.trace.append((slot, node, "arrive", commodity, pkt.pid, ""))
            self.on_land(node, slot)
            ptr += 1
        return ptr

    def record(self, slot: int) -> None:
        self.occ_series[slot] = self.occupancy
        for p in self.delivered_pairs:
            self.delivered_series[p][slot] = self.delivered_counts[p]
        if self.backlog_series is not None:
            for ci, c in enumerate(self.commodities):
                for n in range(self.n_nodes):
                    self.backlog_series[(n, c)][slot] = self.q[n][ci]

    def deliver(self, pkt: Packet, slot: int, via: int) -> None:
        key = (pkt.source, pkt.commodity)
        if key not in self.delivered_counts:
            self.delivered_counts[key] = 0
            self.delivered_series[key] = np.zeros(self.config.slots, dtype=np.int64)
            self.delivered_pairs.append(key)
        self.delivered_counts[key] += 1
        self.packets_delivered += 1
        if self.trace is not None:
            self.trace.append(
                (slot, via, "deliver", pkt.commodity, pkt.pid, f"src={pkt.source}")
            )

    def result(self) -> RunResult:
        slots = self.config.slots
        series = MetricsSeries(
            occupancy=self.occ_series,
            delivered={p: self.delivered_series[p] for p in self.delivered_pairs},
            slots=slots,
            backlogs=self.backlog_series,
        )
        return RunResult(
            series=series,
            flows={k: v / slots for k, v in sorted(self.sched_flow.items())},
            realized_flows={k: v / slots for k, v in sorted(self.real_flow.items())},
            states=self.states,
            trace=self.trace,
            packets_created=self.packets_created,
            packets_delivered=self.packets_delivered,
            epochs=self.epochs,
        )


# ---------------------------------------------------------------------------
# Backpressure family (contiguous per-transmitter epochs)
# ---------------------------------------------------------------------------


def _run_divbar(rs: _RunState, streams: ChannelStreams) -> RunResult:
    config = rs.config
    scheme = config.policy.scheme
    topo = rs.topo
    slots = config.slots
    h0 = topo.h0
    h0_eff = rs.h0_eff
    n_nodes = rs.n_nodes
    ncomm = len(rs.commodities)
    commodities = rs.commodities
    receivers = rs.receivers
    q = rs.q
    cpq = rs.cpq
    total_backlog = rs.total_backlog
    prefix = streams.prefix
    rep = scheme is Scheme.REP
    mia = scheme is Scheme.MIA
    retain_losers = config.mia_loser_ledger == "retain"
    trace = rs.trace

    from .channel import cached_cdf_table
    from .policy import phi as phi_series, phi_rep as phi_single

    node_cols = [
        [streams.col[(n, k)] for k in receivers[n]] for n in range(n_nodes)
    ]
    n_links = len(streams.links)
    prefix_item = prefix.item  # flat scalar reads off the prefix-sum matrix
    tables = {
        (n, k): cached_cdf_table(
            topo.links[(n, k)], h0, h0 / config.grid_cells, config.max_order
        )
        for n in range(n_nodes)
        for k in receivers[n]
    }
    phi_cache: list[dict] = [dict() for _ in range(n_nodes)]

    def phi_for(n: int, order: tuple[int, ...]) -> list[float]:
        """First-decode probabilities for a ranking given as receiver-list
        positions (best first), aligned back to receiver-list order."""
        cached = phi_cache[n].get(order)
        if cached is None:
            recv = receivers[n]
            tb = {k: tables[(n, k)] for k in recv}
            ranking = tuple(recv[i] for i in order)
            probs = phi_single(tb, ranking) if rep else phi_series(tb, ranking)
            cached = [probs[k] for k in recv]
            phi_cache[n][order] = cached
        return cached

    def ranked(w: list) -> tuple[int, ...]:
        """Positions sorted by descending weight, stable (ascending-id ties)."""
        kk = len(w)
        if kk == 1:
            return (0,)
        if kk == 2:
            return (0, 1) if w[0] >= w[1] else (1, 0)
        if kk == 3:
            a, b, c = w
            if a >= b:
                if b >= c:
                    return (0, 1, 2)
                if a >= c:
                    return (0, 2, 1)
                return (2, 0, 1)
            if a >= c:
                return (1, 0, 2)
            if b >= c:
                return (1, 2, 0)
            return (2, 1, 0)
        return tuple(sorted(range(kk), key=lambda i: -w[i]))

    ends = streams.rep_next if rep else streams.ends
    ends_by_node: dict[int, list[int]] = {}
    transmitters = [n for n in range(n_nodes) if receivers[n]]
    rep_bits: dict[int, list[int]] = {}
    omega_bits: dict[int, list[int]] = {}
    for n in transmitters:
        ends_by_node[n] = ends[n].tolist()
        if rep:
            rep_bits[n] = streams.rep_bits[n].tolist()
        else:
            omega_bits[n] = streams.omega_bits[n].tolist()
    NEVER = slots
    end_due = [NEVER] * n_nodes
    # per-node epoch context: [commodity_index, packet, w(list), start_slot,
    #                          prev_prefix(list or None), pre(list or None)]
    ctx: list[list | None] = [None] * n_nodes
    # nodes with zero backlog skip ahead over whole null-epoch chains; a
    # packet landing on them walks the (precomputed) boundary chain forward
    dormant_since: list[int] = [-1] * n_nodes
    use_dormancy = trace is None
    ppq = [st.ppq for st in rs.states]
    restart: list[int] = []
    memo: list[dict | None] = [dict() for _ in range(n_nodes)]

    def land(k: int, slot: int) -> None:
        if dormant_since[k] < 0:
            return
        chain = ends_by_node[k]
        e = chain[dormant_since[k]]
        while e < slot:
            rs.epochs += 1
            e = chain[e + 1]
        dormant_since[k] = -1
        if e == slot:
            restart.append(k)
        elif e < slots:
            end_due[k] = e
        # e past the horizon: the running null epoch never ends in this run
    rs.on_land = land

    def decide(n: int) -> tuple:
        """Score every commodity; returns (best_ci, W list, metric)."""
        recv = receivers[n]
        best_metric = 0.0
        best_ci = -1
        best_w = None
        qn = q[n]
        for ci in range(ncomm):
            qnc = qn[ci]
            if qnc == 0:
                continue
            w = []
            mx = 0
            for k in recv:
                d = qnc - q[k][ci]
                if d <= 0:
                    d = 0
                elif d > mx:
                    mx = d
                w.append(d)
            if mx == 0:
                continue
            probs = phi_for(n, ranked(w))
            metric = 0.0
            for i, wi in enumerate(w):
                if wi:
                    metric += wi * probs[i]
            if metric > best_metric:
                best_metric = metric
                best_ci = ci
                best_w = w
        return (best_ci, best_w, best_metric)

    # Decision memo per node, keyed by the local backlog fingerprint.  In a
    # stable run the fingerprints cycle through a small set; once queues grow
    # without bound the memo would only thrash, so it is dropped the first
    # time it fills.
    MEMO_CAP = 65536

    def begin_epoch(n: int, start: int) -> None:
        """Decision with the state as of the beginning of `start` (callers
        invoke this after all of the previous slot's events)."""
        if start >= slots:
            return
        if not total_backlog[n] and use_dormancy:
            dormant_since[n] = start
            ctx[n] = None
            return
        rs.epochs += 1
        node_memo = memo[n]
        if node_memo is None:
            choice = decide(n)
        else:
            qn = q[n]
            key = tuple(qn) + tuple(
                q[k][ci] for k in receivers[n] for ci in range(ncomm)
            )
            choice = node_memo.get(key)
            if choice is None:
                choice = decide(n)
                if len(node_memo) >= MEMO_CAP:
                    memo[n] = None
                else:
                    node_memo[key] = choice
        best_ci, best_w, best_metric = choice
        if best_ci < 0:
            ctx[n] = None  # null-packet epoch: timing only
            if trace is not None:
                trace.append((start, n, "epoch_start", -1, _NULL_PID, "null"))
        else:
            packet = cpq[n][best_ci][0]
            pre = None
            if mia:
                pid = packet.pid
                pre = [ppq[k].get(pid, 0.0) for k in receivers[n]]
            ctx[n] = [best_ci, packet, best_w, start, pre]
            if trace is not None:
                trace.append(
                    (
                        start,
                        n,
                        "epoch_start",
                        commodities[best_ci],
                        packet.pid,
                        f"metric={best_metric:.9g}",
                    )
                )
        end = ends_by_node[n][start]
        end_due[n] = end if end < slots else NEVER

    def finish_epoch(n: int, slot: int) -> None:
        epoch = ctx[n]
        ctx[n] = None
        if epoch is None:
            if trace is not None:
                trace.append((slot, n, "epoch_end", -1, _NULL_PID, "null"))
            return
        ci, packet, w, start, pre = epoch
        recv = receivers[n]
        kk = len(recv)
        # the first successful receiver set, resolved from the draw streams
        bits = rep_bits[n][slot] if rep else omega_bits[n][start]
        if not bits:
            raise IntegrityError(
                f"slot {slot}: node {n} epoch ended with an empty ACK set"
            )
        if mia:
            cols = node_cols[n]
            pf = prefix_item
            base_end = (slot + 1) * n_links
            base_start = start * n_links
            cum = [pf(base_end + j) - pf(base_start + j) for j in cols]
            ack_bits = 0
            for i in range(kk):
                if pre[i] + cum[i] >= h0_eff:
                    ack_bits |= 1 << i
            if (ack_bits & bits) != bits:
                raise IntegrityError(
                    f"slot {slot}: node {n} MIA ACK set lost a renewal ACK"
                )
        else:
            ack_bits = bits
        # forwarding contest over the ACK set, epoch-start backlogs
        winner = -1
        winner_w = 0
        for i in range(kk):
            if ack_bits >> i & 1:
                wi = w[i]
                if wi > winner_w:
                    winner, winner_w = i, wi
        commodity = commodities[ci]
        pid = packet.pid
        if winner >= 0:
            k = recv[winner]
            queue = cpq[n][ci]
            moved = queue.popleft()
            if moved.pid != pid:
                raise IntegrityError(
                    f"slot {slot}: node {n} epoch packet {pid} no longer at "
                    f"its CPQ head"
                )
            q[n][ci] -= 1
            total_backlog[n] -= 1
            key = (n, k, commodity)
            rs.sched_flow[key] = rs.sched_flow.get(key, 0) + 1
            if k == commodity:
                rs.occupancy -= 1
                rs.deliver(packet, slot, via=n)
            else:
                cpq[k][ci].append(packet)
                q[k][ci] += 1
                total_backlog[k] += 1
                land(k, slot)
            if trace is not None:
                trace.append((slot, n, "epoch_end", commodity, pid, f"fwd={k}"))
        elif trace is not None:
            trace.append((slot, n, "epoch_end", commodity, pid, "retain"))
        if mia:
            # Renewal under MIA: epoch ledgers die with the epoch; PPQ
            # entries persist per the forwarding rule.
            if winner >= 0 and recv[winner] == commodity:
                for st_ppq in ppq:
                    st_ppq.pop(pid, None)
            else:
                for i, k in enumerate(recv):
                    if winner >= 0 and i == winner:
                        ppq[k].pop(pid, None)  # whole packet now in CPQ
                    elif ack_bits >> i & 1:
                        if retain_losers:
                            ppq[k][pid] = min(pre[i] + cum[i], h0)
                        else:
                            ppq[k].pop(pid, None)
                    elif cum[i] > 0.0 or pre[i] > 0.0:
                        ppq[k][pid] = pre[i] + cum[i]

    for n in transmitters:
        begin_epoch(n, 0)

    arr_ptr = 0
    for slot in range(slots):
        restart.clear()
        for n in transmitters:
            if end_due[n] == slot:
                end_due[n] = NEVER
                finish_epoch(n, slot)
                restart.append(n)
        arr_ptr = rs.apply_arrivals(slot, arr_ptr)
        for n in restart:
            begin_epoch(n, slot + 1)
        rs.record(slot)

    # The backpressure family only contests real packets, so every scheduled
    # forward is realized.
    rs.real_flow = dict(rs.sched_flow)
    return rs.result()


# ---------------------------------------------------------------------------
# Stationary randomized policies (per-slot commodity draws; epochs per
# transmitter-commodity stream, noncontiguous in wall-clock slots)
# ---------------------------------------------------------------------------


def _run_stationary(rs: _RunState, streams: ChannelStreams) -> RunResult:
    config = rs.config
    policy: StationaryPolicy = config.policy
    scheme = policy.scheme
    slots = config.slots
    h0_eff = rs.h0_eff
    commodities = rs.commodities
    ncomm = len(commodities)
    receivers = rs.receivers
    q = rs.q
    cpq = rs.cpq
    total_backlog = rs.total_backlog
    prefix = streams.prefix
    trace = rs.trace

    transmitters = [n for n in range(rs.n_nodes) if receivers[n]]
    node_cols = {n: [streams.col[(n, k)] for k in receivers[n]] for n in transmitters}

    # Per-slot commodity choices: inverse-cdf over each node's alpha values.
    rng_pol = np.random.default_rng([config.seed, 33])
    rng_fwd = np.random.default_rng([config.seed, 44])
    cum_alpha = {}
    for n in transmitters:
        edges = []
        acc = 0.0
        for c in commodities:
            acc += policy.alpha.get((n, c), 0.0)
            edges.append(acc)
        cum_alpha[n] = np.array(edges)
    idle = ncomm  # sentinel choice index

    theta = policy.theta
    # active (n, ci) streams: [packet_or_None, acc list per receiver]
    streams_state: dict[tuple[int, int], list] = {}

    arr_ptr = 0
    window = 4096
    win_rows: list[list[float]] = []
    win_choice: list[list[int]] = []
    win_base = 0

    def load_window(a: int) -> None:
        nonlocal win_rows, win_choice, win_base
        b = min(a + window, slots)
        win_base = a
        win_rows = (prefix[a + 1 : b + 1] - prefix[a:b]).tolist()
        u = rng_pol.random((b - a, len(transmitters)))
        cols = []
        for j, n in enumerate(transmitters):
            cols.append(np.searchsorted(cum_alpha[n], u[:, j], side="right"))
        win_choice = np.stack(cols, axis=1).tolist() if transmitters else []

    def contest(n: int, ci: int, ack_ids: list[int], packet, slot: int) -> None:
        commodity = commodities[ci]
        dist = theta.get((n, commodity, frozenset(ack_ids)), None)
        winner = -1
        if dist:
            u = float(rng_fwd.random())
            acc = 0.0
            for k in sorted(dist):
                acc += dist[k]
                if u < acc:
                    winner = k
                    break
        else:
            rng_fwd.random()  # keep the stream positional regardless of theta
        if winner < 0:
            if trace is not None:
                pid = packet.pid if packet is not None else _NULL_PID
                trace.append((slot, n, "epoch_end", commodity, pid, "retain"))
            return
        rs.sched_flow[(n, winner, commodity)] = (
            rs.sched_flow.get((n, winner, commodity), 0) + 1
        )
        if packet is not None:
            queue = cpq[n][ci]
            moved = queue.popleft()
            if moved.pid != packet.pid:
                raise IntegrityError(
                    f"slot {slot}: node {n} stationary stream lost its head packet"
                )
            q[n][ci] -= 1
            total_backlog[n] -= 1
            rs.real_flow[(n, winner, commodity)] = (
                rs.real_flow.get((n, winner, commodity), 0) + 1
            )
            if winner == commodity:
                rs.occupancy -= 1
                rs.deliver(packet, slot, via=n)
            else:
                cpq[winner][ci].append(packet)
                q[winner][ci] += 1
                total_backlog[winner] += 1
        if trace is not None:
            pid = packet.pid if packet is not None else _NULL_PID
            trace.append((slot, n, "epoch_end", commodity, pid, f"fwd={winner}"))

    for slot in range(slots):
        if slot - win_base >= len(win_rows) or slot < win_base:
            load_window(slot)
        rates = win_rows[slot - win_base]
        choices = win_choice[slot - win_base]
        for j, n in enumerate(transmitters):
            ci = choices[j]
            if ci >= idle:
                continue
            recv = receivers[n]
            cols = node_cols[n]
            if scheme is Scheme.REP:
                ack = [recv[i] for i, col in enumerate(cols) if rates[col] >= h0_eff]
                if ack:
                    packet = cpq[n][ci][0] if q[n][ci] else None
                    contest(n, ci, ack, packet, slot)
            else:
                stream = streams_state.get((n, ci))
                if stream is None:
                    packet = cpq[n][ci][0] if q[n][ci] else None
                    stream = streams_state[(n, ci)] = [packet, [0.0] * len(recv)]
                acc = stream[1]
                ended = False
                for i, col in enumerate(cols):
                    acc[i] += rates[col]
                    if acc[i] >= h0_eff:
                        ended = True
                if ended:
                    ack = [recv[i] for i, v in enumerate(acc) if v >= h0_eff]
                    contest(n, ci, ack, stream[0], slot)
                    del streams_state[(n, ci)]  # renewal: epoch info cleared

        arr_ptr = rs.apply_arrivals(slot, arr_ptr)
        rs.record(slot)

    return rs.result()


def _run_divbar_kernel(rs: _RunState, streams: ChannelStreams) -> RunResult:
    """Marshal run state into flat arrays and drive the compiled loop."""
    from . import _kernels
    from .channel import cached_cdf_table
    from .policy import phi as phi_series, phi_rep as phi_single

    config = rs.config
    topo = rs.topo
    scheme = config.policy.scheme
    rep = scheme is Scheme.REP
    mia = scheme is Scheme.MIA
    slots = config.slots
    n_nodes = rs.n_nodes
    ncomm = len(rs.commodities)

    recv_ids = []
    recv_cols = []
    recv_off = [0]
    for n in range(n_nodes):
        for k in rs.receivers[n]:
            recv_ids.append(k)
            recv_cols.append(streams.col[(n, k)])
        recv_off.append(len(recv_ids))
    recv_ids = np.array(recv_ids, dtype=np.int32)
    recv_cols = np.array(recv_cols, dtype=np.int32)
    recv_off = np.array(recv_off, dtype=np.int32)
    kmax = max((recv_off[1:] - recv_off[:-1]).max(), 1)

    # decode probabilities for every ranking permutation of every node
    import itertools
    import math as _math

    max_code = _math.factorial(int(kmax))
    phi_perm = np.zeros((n_nodes, max_code, kmax))
    for n in range(n_nodes):
        recv = rs.receivers[n]
        if not recv:
            continue
        tables = {
            k: cached_cdf_table(
                topo.links[(n, k)], topo.h0, topo.h0 / config.grid_cells, config.max_order
            )
            for k in recv
        }
        for order in itertools.permutations(range(len(recv))):
            ranking = tuple(recv[i] for i in order)
            probs = phi_single(tables, ranking) if rep else phi_series(tables, ranking)
            code = _kernels.perm_code(order)
            for i, k in enumerate(recv):
                phi_perm[n, code, i] = probs[k]

    ends_arr = np.full((n_nodes, slots), slots, dtype=np.int64)
    bits_arr = np.zeros((n_nodes, slots), dtype=np.int16)
    source = streams.rep_next if rep else streams.ends
    bit_source = streams.rep_bits if rep else streams.omega_bits
    for n in range(n_nodes):
        if rs.receivers[n]:
            ends_arr[n] = np.minimum(source[n][:slots], slots)
            bits_arr[n] = bit_source[n]

    pairs = rs.lam_pairs
    arr_slot = np.array(rs.arr_slots, dtype=np.int64)
    arr_node = np.array(
        [pairs[p][0] for p in rs.arr_pairs], dtype=np.int32
    )
    arr_ci = np.array(
        [rs.cidx[pairs[p][1]] for p in rs.arr_pairs], dtype=np.int32
    )
    arr_cnt = np.array(rs.arr_counts, dtype=np.int32)

    init_node = np.array([n for n, _ in config.initial_packets], dtype=np.int32)
    init_ci = np.array(
        [rs.cidx[c] for _, c in config.initial_packets], dtype=np.int32
    )

    # ring capacities: a queue can hold at most every packet of its commodity
    per_comm = np.zeros(ncomm, dtype=np.int64)
    for p_idx, cnt in zip(rs.arr_pairs, rs.arr_counts):
        per_comm[rs.cidx[pairs[p_idx][1]]] += cnt
    for _, c in config.initial_packets:
        per_comm[rs.cidx[c]] += 1
    ring_cap = np.maximum(per_comm, 1)[None, :].repeat(n_nodes, axis=0)
    ring_off = np.zeros((n_nodes, ncomm), dtype=np.int64)
    total = 0
    for n in range(n_nodes):
        for ci in range(ncomm):
            ring_off[n, ci] = total
            total += ring_cap[n, ci]
    ring = np.zeros(total, dtype=np.int64)

    dlv_row = np.full((n_nodes, ncomm), -1, dtype=np.int32)
    tracked = rs.delivered_pairs
    for row, (n, c) in enumerate(tracked):
        dlv_row[n, rs.cidx[c]] = row
    dlv_out = np.zeros((len(tracked), slots), dtype=np.int64)
    backlog_out = (
        np.zeros((n_nodes * ncomm, slots), dtype=np.int64)
        if config.record_backlogs
        else np.zeros((0, 0), dtype=np.int64)
    )
    flows_out = np.zeros((n_nodes, n_nodes, ncomm), dtype=np.int64)
    ppq = _kernels.make_ppq_dict()

    # reset the packet bookkeeping the constructor did; the kernel owns it
    for st in rs.states:
        for dq in st.cpq.values():
            dq.clear()

    (
        integrity,
        created,
        delivered,
        epochs,
        next_pid,
        q_final,
        head,
        tail,
    ) = _kernels.divbar_kernel(
        slots,
        n_nodes,
        ncomm,
        rep,
        mia,
        config.mia_loser_ledger == "retain",
        True,
        np.array(rs.commodities, dtype=np.int32),
        recv_ids,
        recv_cols,
        recv_off,
        streams.prefix.ravel(),
        len(streams.links),
        ends_arr,
        bits_arr,
        phi_perm,
        topo.h0,
        rs.h0_eff,
        arr_slot,
        arr_node,
        arr_ci,
        arr_cnt,
        init_node,
        init_ci,
        ring,
        ring_off,
        ring_cap,
        ppq,
        rs.occ_series,
        dlv_out,
        dlv_row,
        backlog_out,
        flows_out,
    )
    if integrity:
        reasons = {
            1: "epoch ended with an empty ACK set",
            2: "MIA ACK set lost a renewal ACK",
            3: "epoch packet no longer at its CPQ head",
        }
        raise IntegrityError(reasons.get(int(integrity), "kernel fault"))

    # rebuild packet objects for the surviving queue contents
    created_slots = _pid_created_slots(rs, config)
    mask = (1 << _kernels.PID_SHIFT) - 1
    for n in range(n_nodes):
        for ci, c in enumerate(rs.commodities):
            dq = rs.cpq[n][ci]
            off = ring_off[n, ci]
            cap = ring_cap[n, ci]
            for pos in range(head[n, ci], tail[n, ci]):
                entry = int(ring[off + pos % cap])
                pid = entry & mask
                src = entry >> _kernels.PID_SHIFT
                dq.append(Packet(pid, c, src, created_slots.get(pid, -1)))
            rs.q[n][ci] = int(q_final[n, ci])
    for key, val in ppq.items():
        node = int(key) >> _kernels.PID_SHIFT
        pid = int(key) & mask
        rs.states[node].ppq[pid] = float(val)

    rs.packets_created = int(created)
    rs.packets_delivered = int(delivered)
    rs.epochs = int(epochs)
    rs.next_pid = int(next_pid)
    for row, pair in enumerate(tracked):
        rs.delivered_series[pair][:] = dlv_out[row]
        rs.delivered_counts[pair] = int(dlv_out[row, -1]) if slots else 0
    if config.record_backlogs:
        for n in range(n_nodes):
            for ci, c in enumerate(rs.commodities):
                rs.backlog_series[(n, c)][:] = backlog_out[n * ncomm + ci]
    for (n, k, ci), cnt in np.ndenumerate(flows_out):
        if cnt:
            key = (n, k, rs.commodities[ci])
            rs.sched_flow[key] = int(cnt)
    rs.real_flow = dict(rs.sched_flow)
    return rs.result()


def _pid_created_slots(rs: _RunState, config: SimConfig) -> dict[int, int]:
    """Packet ids are assigned in a fixed order (initial packets, then
    arrival events), so creation slots are reconstructible after the fact."""
    out: dict[int, int] = {}
    pid = 0
    for _ in config.initial_packets:
        out[pid] = -1
        pid += 1
    for slot, cnt in zip(rs.arr_slots, rs.arr_counts):
        for _ in range(cnt):
            out[pid] = slot
            pid += 1
    return out


def run(config: SimConfig) -> RunResult:
    """Execute one replica and return its metrics, flows, and final state."""
    rs = _RunState(config)
    stationary = isinstance(config.policy, StationaryPolicy)
    rep = config.policy.scheme is Scheme.REP
    streams = generate_channel_streams(
        config.topology,
        config.slots,
        config.seed,
        need_rep=rep and not stationary,
        need_ends=not stationary and not rep,
    )
    if stationary:
        return _run_stationary(rs, streams)
    if not isinstance(config.policy, DivbarPolicy):
        raise ConfigError(f"unsupported policy {config.policy!r}")
    from . import _kernels

    if config.use_kernel and _kernels.HAVE_NUMBA and not config.trace:
        return _run_divbar_kernel(rs, streams)
    return _run_divbar(rs, streams)


def link_decode_slots(
    topo: Topology, slots: int, seed: int
) -> dict[tuple[int, int], tuple[int, int]]:
    """Coupled-seed per-link decodability: for each link, the first slot a
    packet transmitted continuously from slot 0 becomes decodable under REP
    (some single draw carries h0) and under accumulation (prefix sum reaches
    h0).  Accumulation never lags repetition on the same draws."""
    streams = generate_channel_streams(topo, slots, seed, need_rep=False, need_ends=False)
    h0_eff = decode_threshold(topo.h0)
    out = {}
    for lk, j in streams.col.items():
        base = streams.prefix[1:, j]
        acc = int(np.searchsorted(base, h0_eff, side="left"))
        single = base - streams.prefix[:-1, j]
        hits = np.flatnonzero(single >= h0_eff)
        rep_slot = int(hits[0]) if hits.size else slots
        out[lk] = (rep_slot, min(acc, slots))
    return out
