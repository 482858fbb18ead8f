"""Stacked probability bands over the number of treated patients.

One renderer serves both the activity-status family (active/dormant
combinations, or "arm k maximal with control out") and the drop-time
family; widths are validated to total 1 before drawing.
"""

from __future__ import annotations

import matplotlib.pyplot as plt
import numpy as np

from .io import BAND_FAMILIES, FigureSpec, SchemaError, load_bands, save_figure


def _family_of(events) -> str:
    for marker, family in BAND_FAMILIES.items():
        if marker in events:
            return family
    raise SchemaError(f"unrecognized band events: {events}")


def render(spec: FigureSpec) -> None:
    want_drop = spec.figure_kind == "drop_bands"
    cells = load_bands(spec.inputs["bands"])
    chosen = {}
    for key, (events, grid, probs) in cells.items():
        family = _family_of(events)
        if want_drop == (family == "dropped_status"):
            chosen[key] = (events, grid, probs)
    if not chosen:
        raise SchemaError(
            f"{spec.inputs['bands']}: no {'drop' if want_drop else 'status'} bands")

    n = len(chosen)
    ncol = min(2, n)
    nrow = -(-n // ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(6 * ncol, 3.6 * nrow),
                             squeeze=False)
    for ax, (key, (events, grid, probs)) in zip(axes.flat, sorted(chosen.items())):
        stacked = np.cumsum(probs, axis=1)
        lower = np.zeros(grid.size)
        for j, event in enumerate(events):
            ax.fill_between(grid, lower, stacked[:, j], label=event, alpha=0.85)
            lower = stacked[:, j]
        ax.set_xlim(grid[0], grid[-1])
        ax.set_ylim(0, 1)
        ax.set_title(f"{key[0]} / {key[1]}", fontsize=9)
        ax.set_xlabel("treated patients i")
        ax.set_ylabel("probability")
        ax.legend(fontsize=6, loc="center right")
    for ax in axes.flat[n:]:
        ax.axis("off")
    fig.tight_layout()
    save_figure(fig, spec.output)
    plt.close(fig)
