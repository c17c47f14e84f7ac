"""Command-line entry point: single runs, rate sweeps, verification suites.

Output formats (all versioned with a leading comment line `# divbar-sim v1`):

  metrics CSV   one row per slot: slot, occupancy_total, per-(node,commodity)
                backlogs (wide), cumulative deliveries per tracked stream.
  sweep CSV     one row per (policy, multiplier, replica): policy,
                rate_multiplier, lambda_effective, time_avg_occupancy,
                delivered rates per stream, verdict, seed, slots.
  trace         one event per line: slot,node,event,commodity,packet,detail.

Exit codes: 0 success, 2 configuration/validation problems, 3 integrity
fault inside a run.  Floats are printed with 9 significant digits so replay
comparisons can be byte-exact.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import analytics, engine
from .analytics import (
    ProbeRow,
    SearchResult,
    compute_decode_set_probs,
    derive_rmia_policy,
    expected_epoch_length,
    max_stable_rate_search,
    probe_multiplier,
    simulate_epochs,
    tables_for_node,
    uniform_stationary_policy,
)
from .channel import DiscreteTest, build_cdf_table
from .errors import ConfigError, IntegrityError
from .policy import DIVBAR_MIA, DIVBAR_REP, DIVBAR_RMIA, phi as phi_series
from .queueing import Scheme
from .topology import Scenario, load_scenario, validate, with_h0

FORMAT_VERSION = "# divbar-sim v1"

POLICIES = {"rep": DIVBAR_REP, "rmia": DIVBAR_RMIA, "mia": DIVBAR_MIA}


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _open_scenario(path: str, h0: float | None) -> Scenario:
    scn = load_scenario(path)
    if h0 is not None:
        scn = with_h0(scn, h0)
    problems = validate(scn.topology)
    if problems:
        raise ConfigError(f"{path}: " + "; ".join(problems))
    return scn


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    scn = _open_scenario(args.scenario, args.h0)
    policy = POLICIES[args.policy]
    config = engine.SimConfig(
        topology=scn.topology,
        policy=policy,
        slots=args.slots or scn.slots,
        seed=args.seed if args.seed is not None else scn.seed,
        arrival_process=args.arrivals,
        trace=args.trace is not None,
        record_backlogs=True,
    )
    result = engine.run(config)
    _write_metrics_csv(args.out, result, scn)
    if args.trace is not None:
        _write_trace(args.trace, result.trace)
    print(
        f"{args.policy}: {config.slots} slots, "
        f"avg occupancy {_fmt(result.series.time_avg_occupancy)}, "
        f"{result.packets_delivered} delivered"
    )
    return 0


def _write_metrics_csv(path: str, result: engine.RunResult, scn: Scenario) -> None:
    series = result.series
    topo = scn.topology
    pairs = sorted(series.delivered)
    backlog_keys = sorted(series.backlogs) if series.backlogs else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(FORMAT_VERSION + "\n")
        writer = csv.writer(fh)
        header = (
            ["slot", "occupancy_total"]
            + [f"occ_n{n}_c{c}" for (n, c) in backlog_keys]
            + [f"delivered_n{n}_c{c}" for (n, c) in pairs]
        )
        writer.writerow(header)
        for t in range(series.slots):
            row = [t, int(series.occupancy[t])]
            row += [int(series.backlogs[k][t]) for k in backlog_keys]
            row += [int(series.delivered[k][t]) for k in pairs]
            writer.writerow(row)
    _ = topo


def _write_trace(path: str, trace: list[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(FORMAT_VERSION + "\n")
        fh.write("slot,node,event,commodity,packet,detail\n")
        for slot, node, event, commodity, packet, detail in trace:
            fh.write(f"{slot},{node},{event},{commodity},{packet},{detail}\n")


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _parse_multipliers(text: str) -> list[float]:
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError("multiplier range must be start:stop:step")
        start, stop, step = (float(p) for p in parts)
        out = []
        m = start
        while m <= stop + 1e-12:
            out.append(round(m, 12))
            m += step
        return out
    return [float(p) for p in text.split(",") if p]


def cmd_sweep(args) -> int:
    scn = _open_scenario(args.scenario, args.h0)
    names = [p.strip() for p in args.policies.split(",") if p.strip()]
    if not names:
        raise ConfigError("empty policy list")
    for name in names:
        if name not in POLICIES:
            raise ConfigError(f"unknown policy {name!r}")
    seed = args.seed if args.seed is not None else scn.seed
    slots = args.slots
    executor = None
    if args.workers > 1:
        executor = ProcessPoolExecutor(max_workers=args.workers)
    try:
        rows: list[ProbeRow] = []
        summaries: list[SearchResult] = []
        for name in names:
            policy = POLICIES[name]
            if args.bisect:
                res = max_stable_rate_search(
                    scn,
                    policy,
                    hi=args.hi,
                    iterations=args.iterations,
                    replicas=args.replicas,
                    slots=slots,
                    seed=seed,
                    executor=executor,
                )
                rows.extend(res.probes)
                summaries.append(res)
            else:
                for mult in _parse_multipliers(args.multipliers):
                    rows.extend(
                        probe_multiplier(
                            scn,
                            policy,
                            mult,
                            slots=slots,
                            seed=seed,
                            replicas=args.replicas,
                            executor=executor,
                        )
                    )
    finally:
        if executor is not None:
            executor.shutdown()
    write_sweep_csv(args.out, rows, scn)
    for res in summaries:
        print(f"{res.policy}: max stable multiplier {_fmt(res.multiplier)}")
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def write_sweep_csv(path: str, rows: list[ProbeRow], scn: Scenario) -> None:
    pairs = sorted(k for k, v in scn.topology.arrival_rates.items() if v > 0.0)
    rows = sorted(
        rows, key=lambda r: (r.policy, r.multiplier, r.replica)
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(FORMAT_VERSION + "\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["policy", "rate_multiplier", "lambda_effective", "time_avg_occupancy"]
            + [f"delivered_rate_n{n}_c{c}" for (n, c) in pairs]
            + ["verdict", "seed", "slots", "replica"]
        )
        for r in rows:
            writer.writerow(
                [
                    r.policy,
                    _fmt(r.multiplier),
                    _fmt(r.lam_effective),
                    _fmt(r.time_avg_occupancy),
                ]
                + [_fmt(r.delivered_rates.get(p, 0.0)) for p in pairs]
                + [r.verdict.value, r.seed, r.slots, r.replica]
            )


def read_sweep_csv(path: str) -> tuple[list[str], list[dict]]:
    """Parse a sweep CSV back into dict rows (used by tests and tools)."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return list(reader.fieldnames or []), list(reader)


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(args) -> int:
    scn = _open_scenario(args.scenario, args.h0)
    suites = {
        "lemma1": _verify_lemma1,
        "phi": _verify_phi,
        "qprobs": _verify_qprobs,
        "epochlen": _verify_epochlen,
        "theta1": _verify_theta1,
        "coupling": _verify_coupling,
    }
    if args.suite not in suites:
        print(f"unknown suite {args.suite!r}; choose from {sorted(suites)}", file=sys.stderr)
        return 2
    ok = suites[args.suite](scn, args)
    print(f"suite {args.suite}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def _verify_lemma1(scn: Scenario, args) -> bool:
    topo = scn.topology
    ok = True
    seen = set()
    for lk in sorted(topo.links):
        model = topo.links[lk]
        if model in seen:
            continue
        seen.add(model)
        if isinstance(model, DiscreteTest):
            print(f"link {lk}: skipped: discrete channel")
            continue
        table = build_cdf_table(model, topo.h0, max_order=12)
        f = table.failure_at_h0
        f1 = float(f[1])
        good = True
        worst = float("inf")
        for m in range(2, 11):
            # threshold 1e-9, floored at half the bound for underflowing tails
            for bound in (f[m - 1] * f1, f1**m, f[m - 1]):
                margin = bound - f[m]
                good &= margin > min(1e-9, 0.5 * bound)
                worst = min(worst, margin)
        ok &= good
        print(f"link {lk}: min strictness margin {worst:.3e} {'ok' if good else 'VIOLATED'}")
    return ok


def _verify_phi(scn: Scenario, args) -> bool:
    topo = scn.topology
    rng = np.random.default_rng(scn.seed)
    ok = True
    for n in range(topo.node_count):
        recv = topo.neighbors(n)
        if not recv:
            continue
        tables = tables_for_node(topo, n)
        worst = 0.0
        for _ in range(100):
            perm = tuple(rng.permutation(recv).tolist())
            total = sum(phi_series(tables, perm).values())
            worst = max(worst, abs(total - 1.0))
        good = worst <= 1e-6
        ok &= good
        print(f"node {n}: max |sum(phi) - 1| over 100 rankings = {worst:.3e} "
              f"{'ok' if good else 'VIOLATED'}")
    return ok


def _verify_qprobs(scn: Scenario, args) -> bool:
    topo = scn.topology
    ok = True
    rng = np.random.default_rng(scn.seed + 7)
    for n in range(topo.node_count):
        recv = topo.neighbors(n)
        if not recv or len(recv) > analytics.MAX_ENUMERATED_RECEIVERS:
            continue
        tables = tables_for_node(topo, n)
        probs = compute_decode_set_probs(tables)
        total = sum(probs.q_rmia.values())
        ident1 = max(
            abs(
                probs.q_rmia[om]
                - sum(v for (ps, o), v in probs.q_rep_rmia.items() if o == om)
            )
            for om in probs.q_rmia
        )
        ident2 = max(
            abs(
                probs.q_rep[ps]
                - probs.beta_rmia
                * sum(v for (p, o), v in probs.q_rep_rmia.items() if p == ps)
            )
            for ps in probs.q_rep
        )
        analytic_ok = abs(total - 1.0) <= 1e-6 and ident1 <= 1e-6 and ident2 <= 1e-6
        models = {k: topo.links[(n, k)] for k in recv}
        sample = simulate_epochs(models, topo.h0, args.epochs, rng)
        hats = sample.q_rmia_hat()
        worst_z = 0.0
        for om, qv in probs.q_rmia.items():
            hat = hats.get(om, 0.0)
            sigma = max(np.sqrt(qv * (1.0 - qv) / args.epochs), 1e-12)
            worst_z = max(worst_z, abs(hat - qv) / sigma)
        mc_ok = worst_z <= 3.0
        ok &= analytic_ok and mc_ok
        print(
            f"node {n}: sum q_rmia = {total:.9f}, identity gaps "
            f"{ident1:.2e}/{ident2:.2e}, worst MC z = {worst_z:.2f} "
            f"{'ok' if analytic_ok and mc_ok else 'VIOLATED'}"
        )
    return ok


def _verify_epochlen(scn: Scenario, args) -> bool:
    topo = scn.topology
    rng = np.random.default_rng(scn.seed + 13)
    ok = True
    for n in range(topo.node_count):
        recv = topo.neighbors(n)
        if not recv:
            continue
        tables = tables_for_node(topo, n)
        est = expected_epoch_length(tables)
        models = {k: topo.links[(n, k)] for k in recv}
        sample = simulate_epochs(models, topo.h0, args.epochs, rng)
        rel = abs(sample.mean_length() - est.slots) / est.slots
        good = rel <= 0.01
        ok &= good
        print(
            f"node {n}: E[T] analytic {est.slots:.6f} (tail <= {est.tail_bound:.1e}) "
            f"vs simulated {sample.mean_length():.6f}, rel err {rel:.4%} "
            f"{'ok' if good else 'VIOLATED'}"
        )
    return ok


def _verify_theta1(scn: Scenario, args) -> bool:
    topo = scn.topology
    rep_policy = uniform_stationary_policy(topo, scheme=Scheme.REP)
    probs_by_node = {}
    for n in range(topo.node_count):
        if topo.neighbors(n):
            probs_by_node[n] = compute_decode_set_probs(tables_for_node(topo, n))
    rmia_policy = derive_rmia_policy(rep_policy, probs_by_node)
    worst = 0.0
    for (n, c, om), dist in rmia_policy.theta.items():
        worst = max(worst, sum(dist.values()))
    ok = worst <= 1.0 + 1e-9
    print(f"max sum theta1 over forwarding sets = {worst:.9f} "
          f"{'ok' if ok else 'VIOLATED'}")
    gains = []
    for n, probs in sorted(probs_by_node.items()):
        for k in probs.receivers:
            gains.append(analytics.rmia_gain(probs, 1.0, k))
    continuous = all(
        not isinstance(m, DiscreteTest) for m in topo.links.values()
    )
    if continuous:
        gain_ok = min(gains) > 0.0
        ok &= gain_ok
        print(f"min per-link flow-rate gain = {min(gains):.3e} "
              f"{'ok (positive)' if gain_ok else 'VIOLATED'}")
    return ok


def _verify_coupling(scn: Scenario, args) -> bool:
    slots = min(scn.slots, 20000)
    decode = engine.link_decode_slots(scn.topology, slots, scn.seed)
    ok = True
    for lk, (rep_slot, acc_slot) in sorted(decode.items()):
        good = acc_slot <= rep_slot
        ok &= good
        print(
            f"link {lk}: first decodable slot accumulation {acc_slot} "
            f"<= repetition {rep_slot} {'ok' if good else 'VIOLATED'}"
        )
    # determinism: identical config twice must give identical traces
    config = engine.SimConfig(
        topology=scn.topology,
        policy=DIVBAR_RMIA,
        slots=min(scn.slots, 5000),
        seed=scn.seed,
        trace=True,
    )
    t1 = engine.run(config).trace
    t2 = engine.run(config).trace
    det = t1 == t2
    ok &= det
    print(f"replay determinism over {config.slots} slots: "
          f"{'identical' if det else 'DIVERGED'}")
    return ok


# ---------------------------------------------------------------------------
# table dump
# ---------------------------------------------------------------------------


def cmd_table(args) -> int:
    scn = _open_scenario(args.scenario, args.h0)
    try:
        a, b = (int(x) for x in args.link.split(","))
    except ValueError as exc:
        raise ConfigError(f"--link must be 'from,to', got {args.link!r}") from exc
    model = scn.topology.links.get((a, b))
    if model is None:
        raise ConfigError(f"no link ({a},{b}) in scenario")
    table = build_cdf_table(model, scn.topology.h0, max_order=args.max_order)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        fh.write(FORMAT_VERSION + "\n")
        writer = csv.writer(fh)
        writer.writerow(["x"] + [f"m{m}" for m in range(table.max_order + 1)])
        for i in range(table.cells + 1):
            x = i * table.grid_step
            writer.writerow([_fmt(x)] + [_fmt(float(v)) for v in table.values[:, i]])
    print(f"wrote {table.cells + 1} grid rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="divbar-sim",
        description="Backpressure routing simulator with mutual information accumulation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one scenario and write per-slot metrics")
    p.add_argument("scenario")
    p.add_argument("--policy", choices=sorted(POLICIES), default="rmia")
    p.add_argument("--slots", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--h0", type=float, default=None)
    p.add_argument("--arrivals", choices=["bernoulli_batch", "poisson"],
                   default="bernoulli_batch")
    p.add_argument("--out", default="metrics.csv")
    p.add_argument("--trace", default=None, help="also write an event trace")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="occupancy vs input rate over multipliers")
    p.add_argument("scenario")
    p.add_argument("--policies", default="rep,rmia,mia")
    p.add_argument("--multipliers", default="0.2:1.0:0.2",
                   help="start:stop:step or comma list")
    p.add_argument("--bisect", action="store_true",
                   help="bisection search for the max stable multiplier")
    p.add_argument("--hi", type=float, default=2.0)
    p.add_argument("--iterations", type=int, default=8)
    p.add_argument("--replicas", type=int, default=3)
    p.add_argument("--slots", type=int, default=200_000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--h0", type=float, default=None)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run one oracle/invariant suite")
    p.add_argument("scenario")
    p.add_argument("--suite", required=True)
    p.add_argument("--epochs", type=int, default=100_000)
    p.add_argument("--h0", type=float, default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("table", help="dump one link's decode-failure table")
    p.add_argument("scenario")
    p.add_argument("--link", required=True, help="'from,to'")
    p.add_argument("--max-order", type=int, default=16)
    p.add_argument("--h0", type=float, default=None)
    p.add_argument("--out", default="table.csv")
    p.set_defaults(func=cmd_table)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except IntegrityError as exc:
        print(f"integrity fault: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
