"""Two-panel monitoring plot of a single replicate's trace.

Top: comparative posterior probabilities and posterior means against the
number of treated patients, with spans where the control was not active
shaded. Bottom: cumulative activity per arm and cumulative successes.
"""

from __future__ import annotations

import matplotlib.pyplot as plt
import numpy as np

from .io import FigureSpec, load_trace, save_figure


def render(spec: FigureSpec) -> None:
    tr = load_trace(spec.inputs["trace"])
    i = tr["i"]
    m = tr["statuses"].shape[1]
    means = tr["alpha"] / (tr["alpha"] + tr["beta"])

    fig, (ax_top, ax_bot) = plt.subplots(2, 1, figsize=(9, 7), sharex=True)
    ctrl_inactive = tr["statuses"][:, 0] != 0
    for start, stop in _spans(ctrl_inactive):
        ax_top.axvspan(i[start], i[stop], color="0.85", zorder=0)
        ax_bot.axvspan(i[start], i[stop], color="0.85", zorder=0)

    ax_top.plot(i, tr["p_ctrl"], label="P(control within margin)", lw=1.2)
    for k in range(1, m):
        ax_top.plot(i, tr["p_max"][:, k], label=f"P(arm {k} best)", lw=1.2)
    for k in range(m):
        ax_top.plot(i, means[:, k], ls="--", lw=1.0, label=f"E[theta_{k}]")
    ax_top.set_ylim(-0.02, 1.02)
    ax_top.set_ylabel("posterior probability / mean")
    ax_top.legend(fontsize=7, ncol=2)

    for k in range(m):
        ax_bot.step(i, np.cumsum(tr["arm"] == k), where="post",
                    label=f"patients on arm {k}")
    successes = np.cumsum(tr["outcome"] == 1)
    ax_bot.step(i, successes, where="post", ls=":", color="k", label="successes")
    ax_bot.set_xlabel("treated patients i")
    ax_bot.set_ylabel("cumulative count")
    ax_bot.legend(fontsize=7)
    fig.suptitle(spec.options.get("title", "trial monitoring"))
    fig.tight_layout()
    save_figure(fig, spec.output)
    plt.close(fig)


def _spans(mask: np.ndarray):
    spans = []
    start = None
    for j, flag in enumerate(mask):
        if flag and start is None:
            start = j
        elif not flag and start is not None:
            spans.append((start, j - 1))
            start = None
    if start is not None:
        spans.append((start, mask.size - 1))
    return spans
