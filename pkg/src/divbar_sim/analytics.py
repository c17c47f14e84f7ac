"""Closed-form oracles, policy transforms, and empirical stability metrics.

The decode-set probabilities of a transmitter with receiver set K are all
series over the epoch length m, built from per-receiver decode-failure
vectors F_j(m) = P(m-slot sum < h0):

  q_rmia(S)          probability S is the first successful receiver set,
  q_rep_rmia(P, S)   joint probability that S is the first successful set
                     while exactly P also decoded single-slot (REP-wise) in
                     the final slot,
  q_rep(P)           per-slot probability that P is the REP success set,
  beta               inverse expected epoch length.

These satisfy exact identities (q_rmia sums to one, marginalizing
q_rep_rmia recovers both q_rmia and q_rep / beta) used as cross-checks
against a brute-force Monte-Carlo epoch simulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np

from .channel import CdfTable, ChannelModel, build_cdf_table
from .policy import Policy, StationaryPolicy
from .queueing import Scheme
from .topology import Scenario, Topology, with_arrivals

MAX_ENUMERATED_RECEIVERS = 12


# ---------------------------------------------------------------------------
# Decode-set probabilities (series side)
# ---------------------------------------------------------------------------


class EpochLengthEstimate(NamedTuple):
    slots: float
    tail_bound: float


def expected_epoch_length(tables: dict[int, CdfTable]) -> EpochLengthEstimate:
    """E{T} = sum over m >= 1 of prod_j F_j(m-1), truncated at the tables'
    max order, with a geometric majorant bound on the discarded tail."""
    if not tables:
        raise ValueError("empty receiver set: the epoch never ends")
    order = min(t.max_order for t in tables.values())
    prod = np.ones(order)
    for t in tables.values():
        prod *= t.failure_at_h0[:order]
    f_single = 1.0
    for t in tables.values():
        f_single *= t.at_h0(1)
    tail = f_single**order / (1.0 - f_single) if f_single < 1.0 else math.inf
    return EpochLengthEstimate(slots=float(prod.sum()), tail_bound=float(tail))


@dataclass
class DecodeSetProbs:
    receivers: tuple[int, ...]
    q_rmia: dict[frozenset[int], float]
    q_rep: dict[frozenset[int], float]
    q_rep_rmia: dict[tuple[frozenset[int], frozenset[int]], float]
    beta_rmia: float
    expected_epoch: float = field(default=0.0)

    def q_rmia_through(self, k: int) -> float:
        return sum(v for s, v in self.q_rmia.items() if k in s)


def compute_decode_set_probs(tables: dict[int, CdfTable]) -> DecodeSetProbs:
    """Evaluate every decode-set probability series for one transmitter.

    Enumerates subsets of the receiver set, so the neighborhood is capped at
    MAX_ENUMERATED_RECEIVERS; larger fan-outs only get Monte-Carlo estimates.
    """
    receivers = tuple(sorted(tables))
    kk = len(receivers)
    if kk == 0:
        raise ValueError("empty receiver set: the epoch never ends")
    if kk > MAX_ENUMERATED_RECEIVERS:
        raise ValueError(
            f"subset enumeration supports at most {MAX_ENUMERATED_RECEIVERS} "
            f"receivers, got {kk}"
        )
    order = min(t.max_order for t in tables.values())

    # Per-receiver event vectors over epoch length m = 1..order:
    #   decode:      F(m-1) - F(m)          first reaches h0 at slot m
    #   decode_rep:  F(m-1) * (1 - F(1))    ... with the final slot alone >= h0
    #   decode_acc:  F(m-1) * F(1) - F(m)   ... final slot alone short of h0
    #   fail:        F(m)                   still short after m slots
    decode = {}
    decode_rep = {}
    decode_acc = {}
    fail = {}
    for k in receivers:
        f = tables[k].failure_at_h0
        f1 = float(f[1])
        decode[k] = f[:order] - f[1 : order + 1]
        decode_rep[k] = f[:order] * (1.0 - f1)
        decode_acc[k] = f[:order] * f1 - f[1 : order + 1]
        fail[k] = f[1 : order + 1]

    def product(vecs) -> np.ndarray:
        out = np.ones(order)
        for v in vecs:
            out = out * v
        return out

    members = {1 << i: receivers[i] for i in range(kk)}

    def mask_members(mask: int) -> list[int]:
        return [receivers[i] for i in range(kk) if mask >> i & 1]

    full = (1 << kk) - 1
    q_rmia: dict[frozenset[int], float] = {}
    q_rep_rmia: dict[tuple[frozenset[int], frozenset[int]], float] = {}
    for omega_mask in range(1, full + 1):
        omega = mask_members(omega_mask)
        rest = mask_members(full ^ omega_mask)
        fs_omega = frozenset(omega)
        base_rest = product(fail[j] for j in rest)
        q_rmia[fs_omega] = float(
            (product(decode[j] for j in omega) * base_rest).sum()
        )
        # Every split of omega into REP-decoders and accumulation-only.
        sub = omega_mask
        while True:
            psi = mask_members(sub)
            term = (
                product(decode_rep[j] for j in psi)
                * product(decode_acc[j] for j in set(omega) - set(psi))
                * base_rest
            )
            q_rep_rmia[(frozenset(psi), fs_omega)] = float(term.sum())
            if sub == 0:
                break
            sub = (sub - 1) & omega_mask

    q_rep: dict[frozenset[int], float] = {}
    f1 = {k: float(tables[k].at_h0(1)) for k in receivers}
    for psi_mask in range(1, full + 1):
        psi = mask_members(psi_mask)
        p = 1.0
        for k in receivers:
            p *= (1.0 - f1[k]) if k in psi else f1[k]
        q_rep[frozenset(psi)] = p

    et = expected_epoch_length(tables)
    return DecodeSetProbs(
        receivers=receivers,
        q_rmia=q_rmia,
        q_rep=q_rep,
        q_rep_rmia=q_rep_rmia,
        beta_rmia=1.0 / et.slots,
        expected_epoch=et.slots,
    )


def phi_from_decode_sets(probs: DecodeSetProbs, ranking: tuple[int, ...]) -> dict[int, float]:
    """phi via the decode-set route: phi[k] = sum of q_rmia over the sets
    whose top-priority member under the ranking is k.  Cross-module identity
    tying the per-receiver series to the set-indexed ones."""
    pos = {k: i for i, k in enumerate(ranking)}
    out = {k: 0.0 for k in ranking}
    for s, v in probs.q_rmia.items():
        out[min(s, key=pos.__getitem__)] += v
    return out


# ---------------------------------------------------------------------------
# Monte-Carlo epoch oracle (simulation side of the dual-route checks)
# ---------------------------------------------------------------------------


@dataclass
class EpochSample:
    """Raw outcomes of independently simulated epochs of one transmitter."""

    receivers: tuple[int, ...]
    lengths: np.ndarray  # (n,) epoch lengths in slots
    omega: np.ndarray  # (n, K) decoded by the final slot
    psi: np.ndarray  # (n, K) final slot alone carried >= h0

    @property
    def count(self) -> int:
        return len(self.lengths)

    def q_rmia_hat(self) -> dict[frozenset[int], float]:
        return self._set_freq(self.omega)

    def q_rep_rmia_hat(self) -> dict[tuple[frozenset[int], frozenset[int]], float]:
        out: dict[tuple[frozenset[int], frozenset[int]], int] = {}
        for om, ps in zip(self.omega, self.psi):
            key = (
                frozenset(np.compress(ps, self.receivers)),
                frozenset(np.compress(om, self.receivers)),
            )
            out[key] = out.get(key, 0) + 1
        return {k: v / self.count for k, v in out.items()}

    def q_rep_hat(self) -> dict[frozenset[int], float]:
        """Per-slot REP success-set frequencies.  Single-slot successes can
        only occur in an epoch's final slot (any earlier one would have ended
        the epoch), so mid-epoch slots all contribute the empty set."""
        total = int(self.lengths.sum())
        out: dict[frozenset[int], int] = {}
        for ps in self.psi:
            if ps.any():
                key = frozenset(np.compress(ps, self.receivers))
                out[key] = out.get(key, 0) + 1
        return {k: v / total for k, v in out.items()}

    def phi_hat(self, ranking: tuple[int, ...]) -> dict[int, float]:
        pos = np.array([ranking.index(k) for k in self.receivers])
        out = {k: 0 for k in ranking}
        for om in self.omega:
            cand = pos[om]
            out[ranking[cand.min()]] += 1
        return {k: v / self.count for k, v in out.items()}

    def mean_length(self) -> float:
        return float(self.lengths.mean())

    def _set_freq(self, masks: np.ndarray) -> dict[frozenset[int], float]:
        out: dict[frozenset[int], int] = {}
        for row in masks:
            key = frozenset(np.compress(row, self.receivers))
            out[key] = out.get(key, 0) + 1
        return {k: v / self.count for k, v in out.items()}


def simulate_epochs(
    models: dict[int, ChannelModel],
    h0: float,
    n_epochs: int,
    rng: np.random.Generator,
    batch: int = 20000,
    chunk_slots: int = 32,
) -> EpochSample:
    """Brute-force epochs: draw per-slot rates for every receiver until the
    first slot some accumulated sum reaches h0.  Independent of the series
    evaluation path (it consumes only the samplers)."""
    receivers = tuple(sorted(models))
    kk = len(receivers)
    lengths = np.empty(n_epochs, dtype=np.int64)
    omega = np.empty((n_epochs, kk), dtype=bool)
    psi = np.empty((n_epochs, kk), dtype=bool)
    done = 0
    while done < n_epochs:
        b = min(batch, n_epochs - done)
        cum = np.zeros((b, kk))
        active = np.arange(b)
        consumed = 0
        while active.size:
            a = active.size
            draws = np.empty((a, chunk_slots, kk))
            for i, k in enumerate(receivers):
                draws[:, :, i] = models[k].sample(rng, size=(a, chunk_slots))
            csum = np.cumsum(draws, axis=1) + cum[active, None, :]
            decoded = csum >= h0
            any_slot = decoded.any(axis=2)
            hit = any_slot.any(axis=1)
            first = np.argmax(any_slot, axis=1)
            rows = np.flatnonzero(hit)
            idx = active[rows]
            t = first[rows]
            lengths[done + idx] = consumed + t + 1
            omega[done + idx] = decoded[rows, t]
            psi[done + idx] = draws[rows, t] >= h0
            keep = ~hit
            cum[active[keep]] = csum[keep, -1]
            active = active[keep]
            consumed += chunk_slots
        done += b
    return EpochSample(receivers=receivers, lengths=lengths, omega=omega, psi=psi)


# ---------------------------------------------------------------------------
# Policy transforms (REP -> RMIA) and the capacity-gap witness
# ---------------------------------------------------------------------------


def derive_rmia_policy(
    rep_policy: StationaryPolicy,
    probs_by_node: dict[int, DecodeSetProbs],
) -> StationaryPolicy:
    """Map a stationary REP policy to the RMIA policy that reproduces its
    per-link time-average flow rates.

    Conditioned on the first successful receiver set S, the new forwarding
    probability to k collects every way the final slot's REP success set P
    could have contained k, weighted by q_rep_rmia(P, S) / q_rmia(S).
    """
    if rep_policy.scheme is not Scheme.REP:
        raise ValueError("derive_rmia_policy expects a REP stationary policy")
    commodities = sorted({c for _, c in rep_policy.alpha})
    theta1: dict[tuple[int, int, frozenset[int]], dict[int, float]] = {}
    for n, probs in probs_by_node.items():
        by_omega: dict[frozenset[int], list[tuple[frozenset[int], float]]] = {}
        for (psi, om), v in probs.q_rep_rmia.items():
            by_omega.setdefault(om, []).append((psi, v))
        for om, splits in by_omega.items():
            q_om = probs.q_rmia[om]
            if q_om <= 0.0:
                if any(v > 0.0 for _, v in splits):
                    raise ArithmeticError(
                        f"first-successful-set probability vanished for {sorted(om)} "
                        f"at node {n} while joint mass did not"
                    )
                continue
            for c in commodities:
                dist: dict[int, float] = {}
                for psi, v in splits:
                    if not psi:
                        continue
                    rep_dist = rep_policy.theta.get((n, c, psi), {})
                    for k, p in rep_dist.items():
                        if k in psi and p > 0.0:
                            dist[k] = dist.get(k, 0.0) + v / q_om * p
                if dist:
                    total = sum(dist.values())
                    if total > 1.0 + 1e-9:
                        raise ArithmeticError(
                            f"derived forwarding probabilities sum to {total} > 1 "
                            f"at node {n}, set {sorted(om)}"
                        )
                    theta1[(n, c, om)] = dist
    return StationaryPolicy(
        alpha=dict(rep_policy.alpha), theta=theta1, scheme=Scheme.RMIA
    )


def rmia_gain(probs: DecodeSetProbs, alpha: float, k: int) -> float:
    """Supportable flow-rate increase on one link when the transmitter stops
    wasting the epochs whose final successful set would have been empty
    under REP: alpha * beta * sum over S containing k of q_rep_rmia(empty, S)."""
    empty = frozenset()
    gain = sum(
        v
        for (psi, om), v in probs.q_rep_rmia.items()
        if psi == empty and k in om
    )
    return alpha * probs.beta_rmia * gain


def uniform_stationary_policy(
    topo: Topology,
    alpha_total: float = 0.9,
    scheme: Scheme = Scheme.REP,
) -> StationaryPolicy:
    """Simple valid stationary policy: split alpha_total evenly across
    commodities at every node with receivers, and forward uniformly over the
    successful set.  A convenient concrete Policy** for transform checks."""
    commodities = topo.commodities
    alpha: dict[tuple[int, int], float] = {}
    theta: dict[tuple[int, int, frozenset[int]], dict[int, float]] = {}
    for n in range(topo.node_count):
        recv = topo.neighbors(n)
        if not recv:
            continue
        for c in commodities:
            alpha[(n, c)] = alpha_total / len(commodities)
            for mask in range(1, 1 << len(recv)):
                subset = frozenset(
                    recv[i] for i in range(len(recv)) if mask >> i & 1
                )
                theta[(n, c, subset)] = {k: 1.0 / len(subset) for k in subset}
    return StationaryPolicy(alpha=alpha, theta=theta, scheme=scheme)


# ---------------------------------------------------------------------------
# Flow feasibility certificates
# ---------------------------------------------------------------------------


@dataclass
class FeasibilityReport:
    feasible: bool
    violations: list[str]
    slack: dict[tuple[int, int], float]  # (node, commodity) -> out - in - lambda


def check_feasibility(
    lam: dict[tuple[int, int], float],
    flows: dict[tuple[int, int, int], float],
    topo: Topology,
    tol: float = 1e-9,
) -> FeasibilityReport:
    """Certify a time-average flow-rate matrix against the capacity-region
    constraints: nonnegative flows, nothing out of a commodity's destination
    or over self-loops, and per-(node, commodity) conservation with slack."""
    violations: list[str] = []
    for (n, k, c), b in sorted(flows.items()):
        if b < -tol:
            violations.append(f"negative flow b[{n}->{k}]({c}) = {b}")
        if n == c and b > tol:
            violations.append(f"flow out of destination: b[{n}->{k}]({c}) = {b}")
        if n == k and b > tol:
            violations.append(f"self-loop flow b[{n}->{k}]({c}) = {b}")
    slack: dict[tuple[int, int], float] = {}
    for c in topo.commodities:
        for n in range(topo.node_count):
            if n == c:
                continue
            out = sum(flows.get((n, k, c), 0.0) for k in topo.neighbors(n))
            inc = sum(
                flows.get((k, n, c), 0.0)
                for k in range(topo.node_count)
                if (k, n) in topo.links
            )
            s = out - inc - lam.get((n, c), 0.0)
            slack[(n, c)] = s
            if s < -tol:
                violations.append(
                    f"conservation violated at node {n} commodity {c}: "
                    f"deficit {-s:.6g}"
                )
    return FeasibilityReport(
        feasible=not violations, violations=violations, slack=slack
    )


# ---------------------------------------------------------------------------
# Empirical stability
# ---------------------------------------------------------------------------


class Verdict(Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"
    INCONCLUSIVE = "inconclusive"


@dataclass
class MetricsSeries:
    """Per-slot occupancy and cumulative deliveries of one run."""

    occupancy: np.ndarray  # (slots,) total CPQ backlog at end of slot
    delivered: dict[tuple[int, int], np.ndarray]  # (source, commodity) -> cum
    slots: int
    # per-(node, commodity) backlog series; populated only when requested
    backlogs: dict[tuple[int, int], np.ndarray] | None = None

    @property
    def time_avg_occupancy(self) -> float:
        return float(self.occupancy.mean()) if self.slots else 0.0

    def delivered_rate(self, source: int, commodity: int) -> float:
        series = self.delivered.get((source, commodity))
        if series is None or self.slots == 0:
            return 0.0
        return float(series[-1]) / self.slots

    def delivered_rates(self) -> dict[tuple[int, int], float]:
        return {key: self.delivered_rate(*key) for key in self.delivered}


@dataclass
class StabilityReport:
    verdict: Verdict
    occupancy_ratio: float
    min_delivery_margin: float  # min over pairs of rate / (0.98 * lambda)
    slope: float
    slope_tstat: float


MIN_VERDICT_SLOTS = 10_000


def stability_verdict(
    series: MetricsSeries, lam: dict[tuple[int, int], float]
) -> StabilityReport:
    """Empirical surrogate for rate stability.

    Stable: late-window occupancy has stopped growing (last quarter mean at
    most 1.1x the third quarter's) and every commodity stream delivered at
    least 98% of its arrival rate.  Unstable: positively trending occupancy
    over the second half with t-statistic above 4.  Anything else (including
    short series) is inconclusive.
    """
    t = series.slots
    occ = series.occupancy
    if t < MIN_VERDICT_SLOTS:
        return StabilityReport(Verdict.INCONCLUSIVE, math.nan, math.nan, math.nan, math.nan)
    q3 = float(occ[t // 2 : 3 * t // 4].mean())
    q4 = float(occ[3 * t // 4 :].mean())
    ratio = q4 / q3 if q3 > 0.0 else (math.inf if q4 > 0.0 else 1.0)
    occupancy_ok = q4 <= 1.1 * q3 + 1e-12

    margin = math.inf
    for key, rate in lam.items():
        if rate <= 0.0:
            continue
        need = 0.98 * rate
        margin = min(margin, series.delivered_rate(*key) / need)
    delivery_ok = margin >= 1.0 or margin == math.inf

    x = np.arange(t // 2, t, dtype=float)
    y = occ[t // 2 :].astype(float)
    xc = x - x.mean()
    denom = float((xc * xc).sum())
    slope = float((xc * y).sum()) / denom
    resid = y - y.mean() - slope * xc
    dof = max(len(y) - 2, 1)
    se = math.sqrt(float((resid * resid).sum()) / dof / denom)
    tstat = slope / se if se > 0.0 else (math.inf if slope > 0.0 else 0.0)

    if occupancy_ok and delivery_ok:
        verdict = Verdict.STABLE
    elif slope > 0.0 and tstat > 4.0:
        verdict = Verdict.UNSTABLE
    else:
        verdict = Verdict.INCONCLUSIVE
    return StabilityReport(verdict, ratio, margin, slope, tstat)


# ---------------------------------------------------------------------------
# Maximum stable rate search
# ---------------------------------------------------------------------------


@dataclass
class ProbeRow:
    policy: str
    multiplier: float
    replica: int
    seed: int
    slots: int
    lam_effective: float
    time_avg_occupancy: float
    delivered_rates: dict[tuple[int, int], float]
    verdict: Verdict


@dataclass
class SearchResult:
    policy: str
    multiplier: float
    probes: list[ProbeRow]


def _probe_worker(args) -> tuple[float, dict, str]:
    config, lam_eff = args
    from . import engine  # deferred: engine depends on this module

    result = engine.run(config)
    report = stability_verdict(result.series, lam_eff)
    return (
        result.series.time_avg_occupancy,
        result.series.delivered_rates(),
        report.verdict.value,
    )


def probe_multiplier(
    scenario: Scenario,
    policy: Policy,
    multiplier: float,
    slots: int,
    seed: int,
    replicas: int = 3,
    arrival_process: str = "bernoulli_batch",
    executor=None,
) -> list[ProbeRow]:
    """Run `replicas` coupled-seed simulations at one arrival multiplier and
    attach stability verdicts.  Replica i uses seed + i."""
    from . import engine

    lam_eff = scenario.topology.scaled_arrivals(multiplier)
    scn = with_arrivals(scenario, lam_eff)
    name = policy_name(policy)
    tasks = []
    for i in range(replicas):
        config = engine.SimConfig(
            topology=scn.topology,
            policy=policy,
            slots=slots,
            seed=seed + i,
            arrival_process=arrival_process,
        )
        tasks.append((config, lam_eff))
    if executor is None:
        outcomes = [_probe_worker(t) for t in tasks]
    else:
        outcomes = list(executor.map(_probe_worker, tasks))
    rows = []
    total = sum(lam_eff.values())
    for i, (occ, rates, verdict) in enumerate(outcomes):
        rows.append(
            ProbeRow(
                policy=name,
                multiplier=multiplier,
                replica=i,
                seed=seed + i,
                slots=slots,
                lam_effective=total,
                time_avg_occupancy=occ,
                delivered_rates=rates,
                verdict=Verdict(verdict),
            )
        )
    return rows


def max_stable_rate_search(
    scenario: Scenario,
    policy: Policy,
    hi: float = 2.0,
    iterations: int = 8,
    replicas: int = 3,
    slots: int = 200_000,
    seed: int | None = None,
    arrival_process: str = "bernoulli_batch",
    executor=None,
) -> SearchResult:
    """Bisect the largest scalar multiplier of the arrival-rate matrix that
    the policy keeps stable.  A multiplier counts as stable when a majority
    of its replicas report Stable; non-stable verdicts push the search down.
    Resolution after `iterations` halvings is hi / 2**iterations."""
    if seed is None:
        seed = scenario.seed
    lo = 0.0
    high = hi
    probes: list[ProbeRow] = []
    majority = replicas // 2 + 1
    for _ in range(iterations):
        mid = 0.5 * (lo + high)
        rows = probe_multiplier(
            scenario,
            policy,
            mid,
            slots=slots,
            seed=seed,
            replicas=replicas,
            arrival_process=arrival_process,
            executor=executor,
        )
        probes.extend(rows)
        stable = sum(r.verdict is Verdict.STABLE for r in rows) >= majority
        if stable:
            lo = mid
        else:
            high = mid
    return SearchResult(policy=policy_name(policy), multiplier=lo, probes=probes)


def policy_name(policy: Policy) -> str:
    if isinstance(policy, StationaryPolicy):
        return f"stationary-{policy.scheme.value}"
    return policy.scheme.value


def tables_for_node(
    topo: Topology,
    n: int,
    grid_step: float | None = None,
    max_order: int | None = None,
) -> dict[int, CdfTable]:
    kwargs = {}
    if max_order is not None:
        kwargs["max_order"] = max_order
    return {
        k: build_cdf_table(topo.links[(n, k)], topo.h0, grid_step, **kwargs)
        for k in topo.neighbors(n)
    }
