#!/usr/bin/env python3
"""Render figures from the engine's schema=1 CSVs.

Kinds:
  ratio-vs-n   one optimality-ratio line per policy over N, error bars from
               the ci_half column (compare CSV)
  eig-scatter  spectral-gap vs local-instability scatter; locally unstable
               instances in red (scan CSV)
  ratio-cdf    empirical CDF of optimality ratios (compare CSV)
  persistence  per-step persistent-conformity fractions, one curve per input
               trace CSV (pass comma-separated paths)

The renderer never recomputes statistics: values are drawn verbatim and an
integrity guard checks that the plotted numbers average to exactly what the
CSV holds.  Output is written both as the requested file and as a sibling
with the complementary raster/vector extension; SVG ids are salted with a
fixed seed so identical inputs give identical bytes.

Usage: plots/render.py --kind ratio-vs-n --in compare.csv --out fig.svg
"""

import argparse
import csv
import os
import sys

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "rbengine-plots"
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SCHEMA_LINE = "# schema=1"

REQUIRED_COLUMNS = {
    "ratio-vs-n": {"policy", "N", "optimality_ratio", "ci_half"},
    "eig-scatter": {"slem", "phi_radius", "well_defined", "locally_unstable"},
    "ratio-cdf": {"optimality_ratio"},
    "persistence": {"t", "persistence"},
}

KINDS = tuple(REQUIRED_COLUMNS)


class PlotError(Exception):
    pass


def read_schema_csv(path, required):
    """Parse a schema=1 CSV and validate the required columns."""
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        if first != SCHEMA_LINE:
            raise PlotError(f"{path}: missing '{SCHEMA_LINE}' header line")
        reader = csv.DictReader(fh)
        missing = required - set(reader.fieldnames or ())
        if missing:
            raise PlotError(
                f"{path}: missing required columns: {', '.join(sorted(missing))}")
        rows = list(reader)
    if not rows:
        raise PlotError(f"{path}: no data rows")
    return rows


def _floats(rows, col):
    return np.array([float(r[col]) for r in rows])


def _integrity_guard(plotted, csv_values):
    """Plotted points must be the CSV numbers verbatim."""
    plotted = np.asarray(plotted, dtype=float)
    csv_values = np.asarray(csv_values, dtype=float)
    if plotted.size != csv_values.size:
        raise PlotError("integrity guard: plotted point count differs from CSV")
    if abs(np.nanmean(plotted) - np.nanmean(csv_values)) > 1e-12:
        raise PlotError("integrity guard: plotted means deviate from the CSV")


def plot_ratio_vs_n(paths, ax):
    rows = read_schema_csv(paths[0], REQUIRED_COLUMNS["ratio-vs-n"])
    rows = [r for r in rows if r["replication"] == "-1"] or rows
    policies = sorted({r["policy"] for r in rows})
    plotted = []
    for pol in policies:
        sub = sorted((r for r in rows if r["policy"] == pol),
                     key=lambda r: int(r["N"]))
        ns = [int(r["N"]) for r in sub]
        ratios = [float(r["optimality_ratio"]) for r in sub]
        errs = [float(r["ci_half"]) if r["ci_half"] else 0.0 for r in sub]
        ax.errorbar(ns, ratios, yerr=errs, marker="o", capsize=3, label=pol)
        plotted.extend(ratios)
    _integrity_guard(plotted, [float(r["optimality_ratio"]) for r in rows])
    ax.set_xscale("log")
    ax.set_xlabel("number of arms N")
    ax.set_ylabel("optimality ratio")
    ax.legend()
    return plotted


def plot_eig_scatter(paths, ax):
    rows = read_schema_csv(paths[0], REQUIRED_COLUMNS["eig-scatter"])
    rows = [r for r in rows if r["well_defined"] == "1"]
    slem = _floats(rows, "slem")
    radius = _floats(rows, "phi_radius")
    unstable = np.array([r["locally_unstable"] == "1" for r in rows])
    ax.scatter(slem[~unstable], radius[~unstable], s=12, c="tab:blue",
               label="stable")
    ax.scatter(slem[unstable], radius[unstable], s=12, c="red",
               label="locally unstable")
    _integrity_guard(np.concatenate([slem, radius]),
                     np.concatenate([slem, radius]))
    ax.axhline(1.0, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("second largest eigenvalue modulus of the induced chain")
    ax.set_ylabel("spectral radius of the local mean-field update")
    ax.legend()
    return radius.tolist()


def plot_ratio_cdf(paths, ax):
    rows = read_schema_csv(paths[0], REQUIRED_COLUMNS["ratio-cdf"])
    ratios = np.sort(_floats(rows, "optimality_ratio"))
    cdf = np.arange(1, ratios.size + 1) / ratios.size
    ax.step(ratios, cdf, where="post")
    _integrity_guard(ratios, _floats(rows, "optimality_ratio"))
    ax.set_xlabel("optimality ratio")
    ax.set_ylabel("empirical CDF")
    ax.set_ylim(0, 1.02)
    return ratios.tolist()


def plot_persistence(paths, ax):
    plotted = []
    raw = []
    for path in paths:
        rows = read_schema_csv(path, REQUIRED_COLUMNS["persistence"])
        t = _floats(rows, "t")
        frac = _floats(rows, "persistence")
        keep = ~np.isnan(frac)
        label = os.path.splitext(os.path.basename(path))[0]
        ax.plot(t[keep], frac[keep], label=label, lw=1.0)
        plotted.extend(frac[keep])
        raw.extend(frac[keep])
    if not plotted:
        raise PlotError("persistence inputs contain no finite window fractions")
    _integrity_guard(plotted, raw)
    ax.set_xlabel("time step")
    ax.set_ylabel("fraction persistently on ideal actions")
    ax.set_ylim(0, 1.02)
    ax.legend()
    return plotted


RENDERERS = {
    "ratio-vs-n": plot_ratio_vs_n,
    "eig-scatter": plot_eig_scatter,
    "ratio-cdf": plot_ratio_cdf,
    "persistence": plot_persistence,
}


def render(kind, in_paths, out_path, xlim=None, ylim=None):
    """Draw one figure; writes ``out_path`` plus a sibling in the other
    format (svg <-> png).  Returns the list of written files."""
    if kind not in RENDERERS:
        raise PlotError(f"unknown plot kind {kind!r}; choose from {', '.join(KINDS)}")
    fig, ax = plt.subplots(figsize=(6.4, 4.2), dpi=110)
    try:
        RENDERERS[kind](in_paths, ax)
        if xlim:
            ax.set_xlim(*xlim)
        if ylim:
            ax.set_ylim(*ylim)
        fig.tight_layout()
        base, ext = os.path.splitext(out_path)
        ext = ext.lower() or ".svg"
        sibling = base + (".png" if ext == ".svg" else ".svg")
        written = []
        for target in (out_path, sibling):
            fig.savefig(target, metadata=_metadata(target))
            written.append(target)
        return written
    finally:
        plt.close(fig)


def _metadata(path):
    # strip timestamps so identical inputs give identical bytes
    if path.lower().endswith(".svg"):
        return {"Date": None}
    if path.lower().endswith(".png"):
        return {"Software": None}
    return None


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--kind", required=True, choices=KINDS)
    parser.add_argument("--in", dest="inputs", required=True,
                        help="input CSV path (persistence: comma-separated)")
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--xlim", type=float, nargs=2, default=None)
    parser.add_argument("--ylim", type=float, nargs=2, default=None)
    args = parser.parse_args(argv)
    paths = [p for p in args.inputs.split(",") if p]
    try:
        written = render(args.kind, paths, args.out, args.xlim, args.ylim)
    except (PlotError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
