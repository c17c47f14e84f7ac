"""Render occupancy-vs-input-rate curves from sweep CSV files.

Consumes only the simulator's sweep CSV (its external interface) and renders
one curve per policy: replica means with a min/max band, no smoothing or
interpolation.  The exact plotted series are embedded verbatim in the SVG's
Description metadata as JSON, so tests and tooling can recover the numbers
from the figure file without rasterizing it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field


@dataclass
class PlotSpec:
    input_csv_paths: list[str]
    output_image_path: str
    x_column: str = "rate_multiplier"
    y_column: str = "time_avg_occupancy"
    group_column: str = "policy"
    log_y: bool = False


@dataclass
class SeriesData:
    """Replica-aggregated curve for one group value."""

    x: list[float] = field(default_factory=list)
    mean: list[float] = field(default_factory=list)
    min: list[float] = field(default_factory=list)
    max: list[float] = field(default_factory=list)


def read_rows(paths: list[str]) -> list[dict]:
    rows: list[dict] = []
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        rows.extend(csv.DictReader(lines))
    return rows


def aggregate(rows: list[dict], spec: PlotSpec) -> dict[str, SeriesData]:
    """Group rows, then reduce replicas at each x to mean/min/max.

    The mean is a plain arithmetic average of the replica values; nothing is
    smoothed and no point is dropped.
    """
    missing = [
        col
        for col in (spec.x_column, spec.y_column, spec.group_column)
        if rows and col not in rows[0]
    ]
    if missing:
        raise KeyError(f"missing columns in sweep CSV: {missing}")
    buckets: dict[str, dict[float, list[float]]] = {}
    for row in rows:
        group = row[spec.group_column]
        x = float(row[spec.x_column])
        y = float(row[spec.y_column])
        buckets.setdefault(group, {}).setdefault(x, []).append(y)
    out: dict[str, SeriesData] = {}
    for group in sorted(buckets):
        series = SeriesData()
        for x in sorted(buckets[group]):
            ys = buckets[group][x]
            series.x.append(x)
            series.mean.append(sum(ys) / len(ys))
            series.min.append(min(ys))
            series.max.append(max(ys))
        out[group] = series
    return out


def render_sweep(spec: PlotSpec) -> dict[str, SeriesData]:
    """Write the figure and return the plotted series."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_rows(spec.input_csv_paths)
    if not rows:
        raise ValueError(f"no data rows in {spec.input_csv_paths}")
    groups = aggregate(rows, spec)

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for name, series in groups.items():
        if len(series.x) == 1:
            ax.plot(series.x, series.mean, "o", label=name)
            continue
        ax.plot(series.x, series.mean, marker="o", markersize=3, label=name)
        if series.min != series.mean or series.max != series.mean:
            ax.fill_between(series.x, series.min, series.max, alpha=0.2)
    ax.set_xlabel(spec.x_column)
    ax.set_ylabel(spec.y_column)
    if spec.log_y:
        ax.set_yscale("log")
    ax.legend(title=spec.group_column)
    ax.grid(True, alpha=0.3)

    payload = {
        "x_column": spec.x_column,
        "y_column": spec.y_column,
        "group_column": spec.group_column,
        "series": {
            name: {"x": s.x, "mean": s.mean, "min": s.min, "max": s.max}
            for name, s in groups.items()
        },
    }
    fig.savefig(
        spec.output_image_path,
        format="svg",
        metadata={"Description": json.dumps(payload)},
    )
    plt.close(fig)
    return groups


def extract_embedded_series(svg_path: str) -> dict:
    """Recover the exact plotted data from a rendered SVG."""
    import xml.etree.ElementTree as ET

    tree = ET.parse(svg_path)
    ns = {"dc": "http://purl.org/dc/elements/1.1/"}
    node = tree.getroot().find(".//dc:description", ns)
    if node is None or not node.text:
        raise ValueError(f"{svg_path} carries no embedded series payload")
    return json.loads(node.text)


def main(argv: list[str] | None = None) -> int:
    import argparse
    import sys

    parser = argparse.ArgumentParser(
        prog="plots/render",
        description="plot sweep CSV occupancy curves per policy into an SVG",
    )
    parser.add_argument("--in", dest="inputs", action="append", required=True,
                        help="sweep CSV (repeatable)")
    parser.add_argument("--out", required=True, help="output SVG path")
    parser.add_argument("--x", default="rate_multiplier")
    parser.add_argument("--y", default="time_avg_occupancy")
    parser.add_argument("--group", default="policy")
    parser.add_argument("--log-y", action="store_true")
    args = parser.parse_args(argv)
    spec = PlotSpec(
        input_csv_paths=args.inputs,
        output_image_path=args.out,
        x_column=args.x,
        y_column=args.y,
        group_column=args.group,
        log_y=args.log_y,
    )
    try:
        groups = render_sweep(spec)
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return 2
    except (KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {args.out} with {len(groups)} curves")
    return 0


if __name__ == "__main__":
    import sys

    sys.exit(main())
