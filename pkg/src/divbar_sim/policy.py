"""Decision procedures: differential backlogs, priority ranking, first-decode
probabilities, commodity selection, and forwarding for all policy variants.

All tie-breaking (commodities, receivers, rankings) is by ascending id; the
algorithms themselves never specify ties and determinism is required for
replay, so the convention is applied uniformly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .channel import CdfTable, TRUNCATION_TOL
from .errors import IntegrityError, TruncationWarning
from .queueing import BacklogSnapshot, Scheme

RETAIN = None  # sentinel forwarding outcome: sender keeps the packet


@dataclass(frozen=True)
class DivbarPolicy:
    """Backpressure family: REP (original metric, m = 1), RMIA, or MIA."""

    scheme: Scheme

    @property
    def stationary(self) -> bool:
        return False


@dataclass
class StationaryPolicy:
    """Backlog-independent randomized policy.

    alpha[(n, c)] is the per-timeslot probability that node n transmits a
    commodity-c unit; the per-node residual is silence.  theta[(n, c, S)]
    maps each successful receiver in S to a forwarding probability, with
    the residual meaning retain.  Under the REP scheme S is the single-slot
    success set; under RMIA it is the first successful receiver set of the
    (n, c) epoch.
    """

    alpha: dict[tuple[int, int], float]
    theta: dict[tuple[int, int, frozenset[int]], dict[int, float]]
    scheme: Scheme = Scheme.RMIA

    def __post_init__(self):
        if self.scheme is Scheme.MIA:
            raise ValueError("stationary policies are defined for REP/RMIA only")
        totals: dict[int, float] = {}
        for (n, _c), a in self.alpha.items():
            if a < 0.0:
                raise ValueError(f"alpha must be >= 0 at node {n}")
            totals[n] = totals.get(n, 0.0) + a
        for n, tot in totals.items():
            if tot > 1.0 + 1e-12:
                raise ValueError(f"node {n} transmit probabilities sum to {tot} > 1")
        for key, dist in self.theta.items():
            s = sum(dist.values())
            if s > 1.0 + 1e-9 or any(p < -1e-15 for p in dist.values()):
                raise ValueError(f"invalid forwarding distribution at {key}: sum {s}")

    @property
    def stationary(self) -> bool:
        return True


Policy = DivbarPolicy | StationaryPolicy

DIVBAR_REP = DivbarPolicy(Scheme.REP)
DIVBAR_RMIA = DivbarPolicy(Scheme.RMIA)
DIVBAR_MIA = DivbarPolicy(Scheme.MIA)


@dataclass(slots=True)
class EpochDecision:
    """Frozen at the epoch's starting slot and reused until it ends."""

    commodity: int | None  # None = idle (null packet)
    metric: float
    ranking: tuple[int, ...]  # receivers, best first
    w: dict[int, int]  # receiver -> differential backlog for the commodity
    snapshot: BacklogSnapshot | None = None


def differential_backlog(snapshot: BacklogSnapshot, n: int, k: int, c: int) -> int:
    return max(snapshot.backlog(n, c) - snapshot.backlog(k, c), 0)


@dataclass(frozen=True)
class PriorityRanking:
    order: tuple[int, ...]

    def high(self, k: int) -> tuple[int, ...]:
        """Receivers strictly better-ranked than k (ties resolved by the
        total order, so a tied receiver appears in exactly one side)."""
        i = self.order.index(k)
        return self.order[:i]

    def low(self, k: int) -> tuple[int, ...]:
        i = self.order.index(k)
        return self.order[i + 1 :]


def priority_sets(
    snapshot: BacklogSnapshot, n: int, c: int, receivers
) -> PriorityRanking:
    w = {k: differential_backlog(snapshot, n, k, c) for k in receivers}
    order = tuple(sorted(receivers, key=lambda k: (-w[k], k)))
    return PriorityRanking(order=order)


def phi(tables: dict[int, CdfTable], ranking: tuple[int, ...]) -> dict[int, float]:
    """First-decode probabilities per receiver for a priority ranking.

    phi[k] is the probability that k decodes in the epoch's final slot while
    every better-ranked receiver does not, i.e. that k is the top-priority
    member of the first successful receiver set:

        sum over m >= 1 of
            prod_{j better} F_j(m) * prod_{j worse} F_j(m-1)
                * [F_k(m-1) - F_k(m)]

    with F_j(m) the m-slot decode-failure probability at h0.  The series is
    truncated at the tables' max order; a warning fires if the joint failure
    mass at the truncation point is still above tolerance.
    """
    if not ranking:
        raise ValueError("empty receiver set: the epoch would never end")
    _check_tables(tables, ranking)
    fail = {k: tables[k].failure_at_h0 for k in ranking}
    order = min(t.max_order for t in tables.values())
    tail = 1.0
    for k in ranking:
        tail *= fail[k][order]
    if tail > TRUNCATION_TOL:
        warnings.warn(
            f"decode series truncated at m={order} with joint tail {tail:.3e}",
            TruncationWarning,
            stacklevel=2,
        )
    out: dict[int, float] = {}
    for i, k in enumerate(ranking):
        term = fail[k][:order] - fail[k][1 : order + 1]  # F(m-1) - F(m)
        for j in ranking[:i]:
            term = term * fail[j][1 : order + 1]  # F_j(m)
        for j in ranking[i + 1 :]:
            term = term * fail[j][:order]  # F_j(m-1)
        out[k] = float(term.sum())
    return out


def phi_rep(tables: dict[int, CdfTable], ranking: tuple[int, ...]) -> dict[int, float]:
    """Single-slot truncation of the decode series (the original diversity
    backpressure metric): phi[k] = (1 - F_k) * prod over better-ranked of F_j."""
    if not ranking:
        raise ValueError("empty receiver set: the epoch would never end")
    _check_tables(tables, ranking)
    out: dict[int, float] = {}
    acc = 1.0
    for k in ranking:
        fk = tables[k].at_h0(1)
        out[k] = acc * (1.0 - fk)
        acc *= fk
    return out


def _check_tables(tables: dict[int, CdfTable], ranking) -> None:
    h0s = {tables[k].h0 for k in ranking}
    if len(h0s) != 1:
        raise ValueError(f"tables disagree on h0: {sorted(h0s)}")


def choose_commodity(
    policy: Policy,
    snapshot: BacklogSnapshot,
    n: int,
    receivers,
    phi_fn,
    rng: np.random.Generator | None = None,
) -> EpochDecision:
    """Pick the commodity to transmit at an epoch boundary.

    The backpressure family maximizes sum_k W * phi over commodities (idle
    iff the best metric is zero); phi_fn(ranking) supplies the variant's
    decode probabilities.  Stationary policies sample their fixed transmit
    probabilities and ignore backlogs entirely.
    """
    if isinstance(policy, StationaryPolicy):
        u = float(rng.random())
        acc = 0.0
        for c in snapshot.commodities:
            acc += policy.alpha.get((n, c), 0.0)
            if u < acc:
                w = {k: differential_backlog(snapshot, n, k, c) for k in receivers}
                order = tuple(sorted(receivers, key=lambda k: (-w[k], k)))
                return EpochDecision(commodity=c, metric=0.0, ranking=order, w=w)
        return EpochDecision(commodity=None, metric=0.0, ranking=tuple(receivers), w={})

    best: EpochDecision | None = None
    for c in snapshot.commodities:
        if snapshot.backlog(n, c) == 0:
            continue  # every W is zero, the metric cannot be positive
        w = {k: differential_backlog(snapshot, n, k, c) for k in receivers}
        order = tuple(sorted(receivers, key=lambda k: (-w[k], k)))
        probs = phi_fn(order)
        metric = sum(w[k] * probs[k] for k in receivers)
        if metric > 0.0 and (best is None or metric > best.metric):
            best = EpochDecision(commodity=c, metric=metric, ranking=order, w=w)
    if best is None:
        return EpochDecision(
            commodity=None, metric=0.0, ranking=tuple(receivers), w={}
        )
    return best


def choose_forwarder(
    policy: Policy,
    decision: EpochDecision,
    ack_set,
    rng: np.random.Generator | None = None,
    node: int | None = None,
) -> int | None:
    """Forwarding contest at the epoch's end over the acknowledged set.

    Backpressure family: the acknowledged receiver with the largest positive
    differential backlog from the epoch-start snapshot, RETAIN when none is
    positive.  Stationary: sample the fixed theta distribution, RETAIN with
    the residual.
    """
    if not ack_set:
        raise IntegrityError("forwarding contest with an empty ACK set")
    if isinstance(policy, StationaryPolicy):
        dist = policy.theta.get((node, decision.commodity, frozenset(ack_set)), {})
        u = float(rng.random())
        acc = 0.0
        for k in sorted(dist):
            acc += dist[k]
            if u < acc:
                return k
        return RETAIN
    best = RETAIN
    best_w = 0
    for k in sorted(ack_set):
        wk = decision.w[k]
        if wk > best_w:
            best, best_w = k, wk
    return best
