"""CSV emission and ingestion for the experiment harness.

Schemas (reals printed with 9 significant digits, rows sorted):
  summary.csv: design,scenario,metric,i,value,std_error
  verdicts.csv: design,scenario,replicate,i,verdict,p_pos,p_neg,n1,s,
                n_last_0..n_last_K
  bands.csv: design,scenario,event,i,probability
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .analysis import OperatingCharacteristics


def _g(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return format(float(x), ".9g")


def write_summary(path: Path, ocs: dict[tuple[str, str], OperatingCharacteristics]):
    rows = []
    for (design, scenario), oc in sorted(ocs.items()):
        for i, rates in sorted(oc.verdict_rates.items()):
            for name in ("positive", "negative", "inconclusive"):
                v, se = rates[name]
                rows.append((design, scenario, f"rate_{name}", i, _g(v), _g(se)))
        for i in oc.analysis_points:
            if i in oc.n1_values:
                v, se = oc.imbalance_prob(i)
                rows.append((design, scenario, "imbalance_prob", i, _g(v), _g(se)))
                v, se = oc.mean_successes(i)
                rows.append((design, scenario, "mean_successes", i, _g(v), _g(se)))
        if oc.postmean_curves is not None:
            for k in range(oc.num_arms):
                for i in range(1, oc.n_max + 1):
                    rows.append((design, scenario, f"mean_posterior_mean_{k}", i,
                                 _g(oc.postmean_curves[i - 1, k]), ""))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["design", "scenario", "metric", "i", "value", "std_error"])
        w.writerows(sorted(rows, key=lambda r: (r[0], r[1], r[2], int(r[3]))))


def write_verdicts(path: Path, ocs: dict[tuple[str, str], OperatingCharacteristics]):
    num_arms = max(oc.num_arms for oc in ocs.values())
    header = ["design", "scenario", "replicate", "i", "verdict", "p_pos", "p_neg",
              "n1", "s"] + [f"n_last_{k}" for k in range(num_arms)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for (design, scenario), oc in sorted(ocs.items()):
            points = [i for i in oc.analysis_points
                      if i in oc.verdicts or i in oc.n1_values]
            for i in points:
                verdicts = oc.verdicts.get(i)
                pp = oc.p_pos_values.get(i)
                pn = oc.p_neg_values.get(i)
                n1 = oc.n1_values.get(i)
                s = oc.s_values.get(i)
                for r in range(oc.replicates):
                    row = [design, scenario, r, i,
                           verdicts[r].value if verdicts is not None else "",
                           _g(pp[r]) if pp is not None else "",
                           _g(pn[r]) if pn is not None else "",
                           int(n1[r]) if n1 is not None else "",
                           int(s[r]) if s is not None else ""]
                    for k in range(num_arms):
                        if oc.drop_i is not None and k < oc.num_arms and oc.drop_i[r, k] >= 0:
                            row.append(int(oc.drop_i[r, k]))
                        else:
                            row.append("")
                    w.writerow(row)


def write_bands(path: Path, ocs: dict[tuple[str, str], OperatingCharacteristics]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["design", "scenario", "event", "i", "probability"])
        for (design, scenario), oc in sorted(ocs.items()):
            if oc.band_probs is None or not oc.band_events:
                continue
            for j, event in enumerate(oc.band_events):
                for i in range(1, oc.n_max + 1):
                    w.writerow([design, scenario, event, i, _g(oc.band_probs[i - 1, j])])


def read_summary(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
