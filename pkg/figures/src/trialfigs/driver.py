"""Rebuild the full figure set from an engine results directory.

Usage: render_figures <results_dir> <figures_dir> [--formats png,svg]

Looks for bands.csv / verdicts.csv / trace*.csv in the results directory
and renders every figure kind whose inputs are present. Rendering is
read-only over the inputs and deterministic, so reruns overwrite the same
files byte-stably.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bands, cdfs, monitor_trace
from .io import FigureSpec, SchemaError

_RENDERERS = {
    "monitor_trace": monitor_trace.render,
    "status_bands": bands.render,
    "drop_bands": bands.render,
    "allocation_cdf": cdfs.render,
    "posterior_prob_cdf": cdfs.render,
}


def render(spec: FigureSpec) -> Path:
    _RENDERERS[spec.figure_kind](spec)
    return spec.output


def build_all(results_dir: Path, figures_dir: Path, formats=("png",)) -> list[Path]:
    results_dir = Path(results_dir)
    figures_dir = Path(figures_dir)
    figures_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    failures: list[str] = []

    def attempt(kind: str, inputs: dict, stem: str, options=None):
        for fmt in formats:
            spec = FigureSpec(kind, inputs, figures_dir / f"{stem}.{fmt}",
                              options or {})
            try:
                written.append(render(spec))
            except SchemaError as exc:
                failures.append(f"{kind}: {exc}")
                return

    bands_csv = results_dir / "bands.csv"
    verdicts_csv = results_dir / "verdicts.csv"
    if bands_csv.exists():
        attempt("status_bands", {"bands": bands_csv}, "status_bands")
        attempt("drop_bands", {"bands": bands_csv}, "drop_bands")
    if verdicts_csv.exists():
        attempt("allocation_cdf", {"verdicts": verdicts_csv}, "allocation_cdf")
        attempt("posterior_prob_cdf", {"verdicts": verdicts_csv}, "posterior_prob_cdf")
    for trace_csv in sorted(results_dir.glob("trace*.csv")):
        attempt("monitor_trace", {"trace": trace_csv},
                f"monitor_{trace_csv.stem}", {"title": trace_csv.stem})
    if failures and not written:
        raise SchemaError("; ".join(failures))
    for f in failures:
        print(f"skipped {f}", file=sys.stderr)
    return written


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="render_figures", description=__doc__)
    parser.add_argument("results_dir")
    parser.add_argument("figures_dir")
    parser.add_argument("--formats", default="png",
                        help="comma-separated image formats (png, svg, pdf)")
    args = parser.parse_args(argv)
    formats = tuple(f.strip() for f in args.formats.split(",") if f.strip())
    try:
        written = build_all(Path(args.results_dir), Path(args.figures_dir), formats)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not written:
        print("error: no renderable inputs found", file=sys.stderr)
        return 1
    for path in written:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
