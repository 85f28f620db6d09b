"""Render simulator sweep CSVs as log-scale error curves.

Consumes the public CSV schema (sweep_value, vote_order, mean_error,
std_error, aborts, trials, verify) and a small JSON plot spec:

    {
      "csv": "fig3a.csv",
      "output": "fig3a.png",
      "series_column": "vote_order",      # one series per distinct value
      "x_label": "mode shift (rad/s)",    # optional
      "y_label": "mean error",            # optional
      "x_scale": "linear",                # optional: linear | log
      "title": "..."                      # optional
    }

The y axis is always logarithmic with standard-error bars; series are
drawn in ascending order of the grouping value (numeric when possible).
Rows whose mean error is not positive cannot appear on a log axis and are
skipped. Rendering is deterministic: the same inputs produce byte-identical
image files.
"""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

REQUIRED_COLUMNS = ("sweep_value", "mean_error", "std_error")


class PlotInputError(ValueError):
    """Malformed spec or CSV input."""


@dataclass(frozen=True)
class PlotSpec:
    csv_path: str
    output: str
    series_column: str = "vote_order"
    x_label: str = "sweep value"
    y_label: str = "mean error"
    x_scale: str = "linear"
    title: str = ""

    @classmethod
    def from_json_file(cls, path: str) -> "PlotSpec":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise PlotInputError(f"cannot read plot spec: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise PlotInputError(f"plot spec is not valid JSON: {exc}") from exc
        unknown = set(doc) - {"csv", "output", "series_column", "x_label",
                              "y_label", "x_scale", "title"}
        if unknown:
            raise PlotInputError(f"unknown plot spec keys: {sorted(unknown)}")
        for key in ("csv", "output"):
            if key not in doc:
                raise PlotInputError(f"plot spec needs a '{key}' entry")
        if doc.get("x_scale", "linear") not in ("linear", "log"):
            raise PlotInputError("x_scale must be 'linear' or 'log'")
        return cls(
            csv_path=doc["csv"],
            output=doc["output"],
            series_column=doc.get("series_column", "vote_order"),
            x_label=doc.get("x_label", "sweep value"),
            y_label=doc.get("y_label", "mean error"),
            x_scale=doc.get("x_scale", "linear"),
            title=doc.get("title", ""),
        )


def load_rows(csv_path: str, series_column: str) -> list[dict]:
    try:
        with open(csv_path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise PlotInputError(f"{csv_path} is empty")
            missing = [c for c in (*REQUIRED_COLUMNS, series_column)
                       if c not in reader.fieldnames]
            if missing:
                raise PlotInputError(
                    f"{csv_path} is missing required column(s) "
                    f"{', '.join(missing)}; found {reader.fieldnames}")
            rows = []
            for i, row in enumerate(reader, start=2):
                try:
                    rows.append({
                        "x": float(row["sweep_value"]),
                        "y": float(row["mean_error"]),
                        "err": float(row["std_error"]),
                        "series": row[series_column],
                    })
                except (TypeError, ValueError) as exc:
                    raise PlotInputError(
                        f"{csv_path} line {i}: bad numeric field ({exc})")
    except OSError as exc:
        raise PlotInputError(f"cannot read {csv_path}: {exc}") from exc
    if not rows:
        raise PlotInputError(f"{csv_path} has a header but no data rows")
    return rows


def _series_order(keys) -> list:
    def sort_key(k):
        try:
            return (0, float(k), "")
        except ValueError:
            return (1, 0.0, str(k))

    return sorted(keys, key=sort_key)


def render(spec: PlotSpec) -> list:
    """Draw the plot and write the image; returns the plotted series keys."""
    rows = load_rows(spec.csv_path, spec.series_column)
    keys = _series_order({r["series"] for r in rows})

    fig, ax = plt.subplots(figsize=(5.2, 3.6), dpi=150)
    plotted = []
    for key in keys:
        sub = sorted((r for r in rows if r["series"] == key),
                     key=lambda r: r["x"])
        x = np.array([r["x"] for r in sub])
        y = np.array([r["y"] for r in sub])
        err = np.array([r["err"] for r in sub])
        positive = y > 0.0  # log axis cannot show zero-error points
        if not np.any(positive):
            continue
        ax.errorbar(x[positive], y[positive], yerr=err[positive],
                    marker="o", markersize=3.5, capsize=2.0, linewidth=1.2,
                    label=f"{spec.series_column} = {key}")
        plotted.append(key)
    ax.set_yscale("log")
    ax.set_xscale(spec.x_scale)
    ax.set_xlabel(spec.x_label)
    ax.set_ylabel(spec.y_label)
    if spec.title:
        ax.set_title(spec.title)
    if plotted:
        ax.legend(frameon=False, fontsize=8)
    ax.grid(True, which="both", alpha=0.25, linewidth=0.4)
    fig.tight_layout()
    # pinned metadata keeps re-renders byte-identical
    fig.savefig(spec.output, metadata={"Software": "qlsim-plots"})
    plt.close(fig)
    return plotted


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1 or argv[0] in ("-h", "--help"):
        print("usage: qlsim-plot <spec.json>", file=sys.stderr)
        return 2
    try:
        spec = PlotSpec.from_json_file(argv[0])
        plotted = render(spec)
    except PlotInputError as exc:
        print(f"plot error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {spec.output} ({len(plotted)} series)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
