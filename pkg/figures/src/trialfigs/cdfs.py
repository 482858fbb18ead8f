"""Empirical CDF figures from the per-replicate verdict rows.

allocation_cdf: distribution of the number of patients on the
experimental arms and of the total successes at each analysis point.
posterior_prob_cdf: distribution of the two final-test statistics.
CDFs are drawn as right-continuous steps, exactly as computed.
"""

from __future__ import annotations

import matplotlib.pyplot as plt
import numpy as np

from .io import FigureSpec, SchemaError, ecdf, load_verdicts, save_figure

_PANELS = {
    "allocation_cdf": (("n1", "patients on experimental arm(s)"),
                       ("s", "total successes")),
    "posterior_prob_cdf": (("p_pos", "P(control within margin of best)"),
                           ("p_neg", "P(experimental best)")),
}


def render(spec: FigureSpec) -> None:
    cells = load_verdicts(spec.inputs["verdicts"])
    panels = _PANELS[spec.figure_kind]
    points = sorted({i for (_, _, i) in cells})
    scenarios = sorted({s for (_, s, _) in cells})
    if not points:
        raise SchemaError(f"{spec.inputs['verdicts']}: no analysis points")
    i_sel = spec.options.get("i", points[-1])

    fig, axes = plt.subplots(len(panels), len(scenarios),
                             figsize=(5.5 * len(scenarios), 3.4 * len(panels)),
                             squeeze=False)
    drew = 0
    for row, (col_name, label) in enumerate(panels):
        for col, scenario in enumerate(scenarios):
            ax = axes[row][col]
            for (design, sc, i), data in sorted(cells.items()):
                if sc != scenario or i != i_sel or col_name not in data:
                    continue
                x, f = ecdf(data[col_name])
                ax.step(np.concatenate([[x[0]], x]), np.concatenate([[0.0], f]),
                        where="post", lw=1.1, label=design)
                drew += 1
            ax.set_title(f"{scenario} @ i={i_sel}", fontsize=9)
            ax.set_xlabel(label)
            ax.set_ylabel("CDF")
            ax.set_ylim(0, 1.005)
            if ax.get_legend_handles_labels()[0]:
                ax.legend(fontsize=6)
    if drew == 0:
        plt.close(fig)
        raise SchemaError(f"{spec.inputs['verdicts']}: no usable columns for "
                          f"{spec.figure_kind}")
    fig.tight_layout()
    save_figure(fig, spec.output)
    plt.close(fig)
