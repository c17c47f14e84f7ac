"""Network description and scenario files.

A scenario is a JSON document:

    {
      "nodes": 10,
      "h0_bits": 2.0,
      "a_max": 4,
      "seed": 12345,
      "slots": 200000,
      "links": [{"from": 0, "to": 2, "mean_snr_db": 6.0}, ...],
      "arrivals": [{"source": 0, "commodity": 8, "rate": 0.25}, ...]
    }

Links are directed; a bidirectional radio link is two entries.  Channel
models per link: ``mean_snr`` (linear) or ``mean_snr_db`` for Rayleigh
fading, or ``atoms``: [[rate, prob], ...] for a discrete test channel.
Serialization is canonical (sorted links/arrivals, linear SNR, fixed key
order) so parse -> serialize is a fixed point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .channel import ChannelModel, DiscreteTest, RayleighFading
from .errors import ConfigError


@dataclass(frozen=True)
class Topology:
    node_count: int
    links: dict[tuple[int, int], ChannelModel]
    commodities: tuple[int, ...]
    arrival_rates: dict[tuple[int, int], float]  # (source, commodity) -> pkts/slot
    a_max: int
    h0: float
    _neighbors: dict[int, tuple[int, ...]] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )

    def __post_init__(self):
        nbrs: dict[int, list[int]] = {n: [] for n in range(self.node_count)}
        for (a, b) in self.links:
            nbrs[a].append(b)
        object.__setattr__(
            self, "_neighbors", {n: tuple(sorted(ks)) for n, ks in nbrs.items()}
        )

    def neighbors(self, n: int) -> tuple[int, ...]:
        """Receiver set of node n, in ascending id order (the tie-break
        order used everywhere downstream)."""
        if n not in self._neighbors:
            raise ValueError(f"unknown node {n}")
        return self._neighbors[n]

    def rate(self, source: int, commodity: int) -> float:
        return self.arrival_rates.get((source, commodity), 0.0)

    def scaled_arrivals(self, multiplier: float) -> dict[tuple[int, int], float]:
        return {k: v * multiplier for k, v in self.arrival_rates.items()}


def validate(topo: Topology) -> list[str]:
    """Every invariant violation in the topology, as human-readable strings.

    Violations are data, not exceptions: callers decide whether to abort.
    """
    bad: list[str] = []
    if topo.node_count < 1:
        bad.append(f"node count must be >= 1, got {topo.node_count}")
    if not (topo.h0 > 0.0):
        bad.append(f"h0 must be positive, got {topo.h0}")
    if topo.a_max < 1:
        bad.append(f"a_max must be >= 1, got {topo.a_max}")
    for (a, b) in sorted(topo.links):
        if a == b:
            bad.append(f"self-link ({a},{b})")
        for end in (a, b):
            if not 0 <= end < topo.node_count:
                bad.append(f"link ({a},{b}) endpoint {end} out of range")
    for c in topo.commodities:
        if not 0 <= c < topo.node_count:
            bad.append(f"commodity {c} is not a node id")
    per_node: dict[int, float] = {}
    for (n, c), lam in sorted(topo.arrival_rates.items()):
        if n == c and lam > 0.0:
            bad.append(f"destination self-traffic: arrivals ({n},{c}) rate {lam}")
        if lam < 0.0:
            bad.append(f"negative arrival rate at ({n},{c})")
        if c not in topo.commodities:
            bad.append(f"arrival ({n},{c}) references unknown commodity")
        per_node[n] = per_node.get(n, 0.0) + lam
    for n, total in sorted(per_node.items()):
        if total > topo.a_max + 1e-12:
            bad.append(f"node {n} total arrival rate {total} exceeds a_max {topo.a_max}")
        if total > 0.0 and 0 <= n < topo.node_count and not topo.neighbors(n):
            bad.append(f"source {n} has no outgoing link")
    return bad


@dataclass(frozen=True)
class Scenario:
    topology: Topology
    seed: int
    slots: int
    description: str = ""


def _parse_channel(entry: dict) -> ChannelModel:
    keys = {"mean_snr", "mean_snr_db", "atoms"} & entry.keys()
    if len(keys) != 1:
        raise ConfigError(
            f"link {entry.get('from')}->{entry.get('to')} needs exactly one of "
            "mean_snr / mean_snr_db / atoms"
        )
    if "atoms" in entry:
        return DiscreteTest(tuple((float(r), float(p)) for r, p in entry["atoms"]))
    if "mean_snr_db" in entry:
        return RayleighFading(10.0 ** (float(entry["mean_snr_db"]) / 10.0))
    return RayleighFading(float(entry["mean_snr"]))


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        node_count = int(doc["nodes"])
        h0 = float(doc["h0_bits"])
        a_max = int(doc.get("a_max", 4))
        seed = int(doc.get("seed", 0))
        slots = int(doc.get("slots", 10000))
        link_entries = doc.get("links", [])
        arrival_entries = doc.get("arrivals", [])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed scenario: {exc}") from exc

    links: dict[tuple[int, int], ChannelModel] = {}
    for entry in link_entries:
        key = (int(entry["from"]), int(entry["to"]))
        if key in links:
            raise ConfigError(f"duplicate link {key}")
        links[key] = _parse_channel(entry)

    arrivals: dict[tuple[int, int], float] = {}
    for entry in arrival_entries:
        key = (int(entry["source"]), int(entry["commodity"]))
        if key in arrivals:
            raise ConfigError(f"duplicate arrival entry {key}")
        arrivals[key] = float(entry["rate"])

    commodities = tuple(sorted({c for _, c in arrivals}))
    topo = Topology(
        node_count=node_count,
        links=links,
        commodities=commodities,
        arrival_rates=arrivals,
        a_max=a_max,
        h0=h0,
    )
    if slots < 1:
        raise ConfigError(f"slots must be >= 1, got {slots}")
    return Scenario(
        topology=topo,
        seed=seed,
        slots=slots,
        description=str(doc.get("description", "")),
    )


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return scenario_from_dict(doc)


def scenario_to_dict(scn: Scenario) -> dict:
    topo = scn.topology
    links = []
    for (a, b) in sorted(topo.links):
        model = topo.links[(a, b)]
        entry: dict = {"from": a, "to": b}
        if isinstance(model, RayleighFading):
            entry["mean_snr"] = model.mean_snr
        else:
            entry["atoms"] = [[r, p] for r, p in model.atoms]
        links.append(entry)
    arrivals = [
        {"source": n, "commodity": c, "rate": topo.arrival_rates[(n, c)]}
        for (n, c) in sorted(topo.arrival_rates)
    ]
    out = {
        "nodes": topo.node_count,
        "h0_bits": topo.h0,
        "a_max": topo.a_max,
        "seed": scn.seed,
        "slots": scn.slots,
        "links": links,
        "arrivals": arrivals,
    }
    if scn.description:
        out["description"] = scn.description
    return out


def scenario_to_json(scn: Scenario) -> str:
    return json.dumps(scenario_to_dict(scn), indent=2, sort_keys=False) + "\n"


def save_scenario(scn: Scenario, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(scenario_to_json(scn))


def make_scenario(
    links: dict[tuple[int, int], ChannelModel],
    arrivals: dict[tuple[int, int], float],
    h0: float,
    node_count: int | None = None,
    a_max: int = 4,
    seed: int = 0,
    slots: int = 10000,
) -> Scenario:
    """Programmatic scenario builder (mostly for tests and sweeps)."""
    if node_count is None:
        ids = [n for pair in links for n in pair] + [n for pair in arrivals for n in pair]
        node_count = max(ids) + 1 if ids else 1
    commodities = tuple(sorted({c for _, c in arrivals}))
    topo = Topology(
        node_count=node_count,
        links=dict(links),
        commodities=commodities,
        arrival_rates=dict(arrivals),
        a_max=a_max,
        h0=h0,
    )
    return Scenario(topology=topo, seed=seed, slots=slots)


def with_h0(scn: Scenario, h0: float) -> Scenario:
    topo = scn.topology
    new_topo = Topology(
        node_count=topo.node_count,
        links=topo.links,
        commodities=topo.commodities,
        arrival_rates=topo.arrival_rates,
        a_max=topo.a_max,
        h0=h0,
    )
    return Scenario(
        topology=new_topo, seed=scn.seed, slots=scn.slots, description=scn.description
    )


def with_arrivals(scn: Scenario, arrivals: dict[tuple[int, int], float]) -> Scenario:
    topo = scn.topology
    new_topo = Topology(
        node_count=topo.node_count,
        links=topo.links,
        commodities=tuple(sorted({c for _, c in arrivals})) or topo.commodities,
        arrival_rates=dict(arrivals),
        a_max=topo.a_max,
        h0=topo.h0,
    )
    return Scenario(
        topology=new_topo, seed=scn.seed, slots=scn.slots, description=scn.description
    )
