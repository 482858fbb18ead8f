"""Allocation and selection policies.

Implements the dormancy rule (comparative posterior probabilities against
threshold epsilon), the selection rule (additional drop thresholds
epsilon1 for the minimum-required-response branch and epsilon2 for the
comparative branch, with the dropped state absorbing), fractional
Thompson weights, burn-in suppression, and the skip-dormant walk over the
randomization list. All threshold comparisons are strict (<): equality
keeps an arm in its better state.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .randomization import RandomizationList

POLICIES = ("rule1", "rule2", "thompson", "fixed_block")
FINAL_VARIANTS = ("original", "no_control_margin", "symmetric_margin")


class ArmStatus(IntEnum):
    ACTIVE = 0
    DORMANT = 1
    DROPPED = 2


class DeadlockError(RuntimeError):
    """No active arm found while scanning two full randomization blocks."""


@dataclass
class DropRecord:
    arm: int
    n_last: int      # list index at which the arm was dropped
    i_last: int      # number of patients treated at that point


@dataclass
class ComparativeProbs:
    """Probability values consumed by the rules at one data state.

    p_best[k]: P(theta_k is best over the candidate set | data)
    p_control_margin: P(theta_0 + delta >= best over candidate set | data)
    p_mrt[k] / p_control_mrt: minimum-required-response probabilities,
    only needed when epsilon1 > 0.
    """

    p_best: dict[int, float]
    p_control_margin: float | None = None
    p_mrt: dict[int, float] | None = None
    p_control_mrt: float | None = None


@dataclass
class DesignParams:
    """All thresholds steering one design."""

    policy: str = "rule1"
    label: str = ""
    epsilon: float = 0.0
    epsilon1: float = 0.0
    epsilon2: float = 0.0
    delta: float = 0.0
    theta_low: float = 0.0
    kappa: float = 1.0
    burn_in: int = 0
    final_epsilon0: float = 0.05
    final_delta0: float = 0.05
    final_variant: str = "original"
    rho: float = 1.0            # hazard-scale safety margin (time-to-event)
    theta_high: float = 0.0     # hazard-scale futility bound (time-to-event)
    continue_after_control_drop: bool = True
    eval_interval: int = 1      # rule evaluation thinning; 1 = every outcome

    def __post_init__(self):
        if not self.label:
            self.label = self.policy

    def validate(self, num_arms: int) -> None:
        """Check every invariant; raises ValueError naming the field."""
        if self.policy not in POLICIES:
            raise ValueError(f"policy: unknown policy {self.policy!r}")
        for name in ("epsilon", "epsilon1", "epsilon2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name}: must be in [0, 1), got {v}")
        if self.delta < 0:
            raise ValueError(f"delta: must be >= 0, got {self.delta}")
        if not 0.0 <= self.theta_low <= 1.0:
            raise ValueError(f"theta_low: must be in [0, 1], got {self.theta_low}")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa: must be in [0, 1], got {self.kappa}")
        if self.burn_in < 0:
            raise ValueError(f"burn_in: must be >= 0, got {self.burn_in}")
        if not 0.0 < self.final_epsilon0 < 0.5:
            raise ValueError(
                f"final_epsilon0: must be in (0, 0.5) so at most one final-test "
                f"criterion can fire, got {self.final_epsilon0}")
        if self.final_delta0 < 0:
            raise ValueError(f"final_delta0: must be >= 0, got {self.final_delta0}")
        if self.final_variant not in FINAL_VARIANTS:
            raise ValueError(f"final_variant: unknown variant {self.final_variant!r}")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho: must be in (0, 1], got {self.rho}")
        if self.theta_high < 0:
            raise ValueError(f"theta_high: must be >= 0, got {self.theta_high}")
        if self.eval_interval < 1:
            raise ValueError(f"eval_interval: must be >= 1, got {self.eval_interval}")
        if self.policy in ("rule1", "rule2"):
            bound = 1.0 / num_arms
            if self.epsilon >= bound:
                raise ValueError(
                    f"epsilon: {self.epsilon} >= 1/{num_arms}; an all-dormant "
                    f"deadlock would be possible")
            if self.policy == "rule2" and self.epsilon2 >= bound:
                raise ValueError(
                    f"epsilon2: {self.epsilon2} >= 1/{num_arms}; an all-dormant "
                    f"deadlock would be possible")
        if (self.policy == "rule2" and self.epsilon > 0.0
                and (self.epsilon <= self.epsilon1 or self.epsilon <= self.epsilon2)):
            warnings.warn(
                f"design {self.label!r}: epsilon <= epsilon1 or epsilon2 rules out "
                f"the dormant state", stacklevel=2)


def rule1_update(probs: ComparativeProbs, num_arms: int, epsilon: float) -> np.ndarray:
    """Active/dormant statuses from the comparative probabilities."""
    statuses = np.full(num_arms, ArmStatus.ACTIVE, dtype=np.int8)
    for k in range(1, num_arms):
        if probs.p_best[k] < epsilon:
            statuses[k] = ArmStatus.DORMANT
    if probs.p_control_margin < epsilon:
        statuses[0] = ArmStatus.DORMANT
    return statuses


def rule2_update(probs: ComparativeProbs, statuses: np.ndarray, active_set: set[int],
                 params: DesignParams, n: int, patient_count: int,
                 ) -> tuple[np.ndarray, set[int], list[DropRecord]]:
    """One selection-rule pass: per-arm drop / dormant / active decisions.

    Probabilities must have been computed with the best taken over the
    current active_set only. Experimental arms are evaluated before the
    control, in ascending index; dropped is absorbing.
    """
    statuses = statuses.copy()
    active_set = set(active_set)
    drops: list[DropRecord] = []
    e, e1, e2 = params.epsilon, params.epsilon1, params.epsilon2

    def mrt(p: float | None) -> float:
        if e1 > 0.0 and p is None:
            raise ValueError("epsilon1 > 0 requires MRT probabilities")
        return p if p is not None else 1.0

    for k in sorted(active_set - {0}):
        if mrt(None if probs.p_mrt is None else probs.p_mrt.get(k)) < e1 \
                or probs.p_best[k] < e2:
            statuses[k] = ArmStatus.DROPPED
            active_set.discard(k)
            drops.append(DropRecord(k, n, patient_count))
        elif probs.p_best[k] < e:
            statuses[k] = ArmStatus.DORMANT
        else:
            statuses[k] = ArmStatus.ACTIVE
    if 0 in active_set:
        p_ctrl = probs.p_control_margin
        if mrt(probs.p_control_mrt) < e1 or p_ctrl < e2:
            statuses[0] = ArmStatus.DROPPED
            active_set.discard(0)
            drops.append(DropRecord(0, n, patient_count))
        elif p_ctrl < e:
            statuses[0] = ArmStatus.DORMANT
        else:
            statuses[0] = ArmStatus.ACTIVE
    return statuses, active_set, drops


def thompson_weights(p_best: np.ndarray, kappa: float) -> np.ndarray:
    """Assignment probabilities p_k^kappa / sum, with 0^0 = 1."""
    if not 0.0 <= kappa <= 1.0:
        raise ValueError(f"kappa must be in [0, 1], got {kappa}")
    p = np.asarray(p_best, dtype=float)
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    w = p ** kappa
    total = w.sum()
    if total <= 0:
        raise ValueError("all weights vanished; probabilities must not be all zero")
    return w / total


def next_assignment(rlist: RandomizationList, n: int, statuses: np.ndarray,
                    ) -> tuple[int, int]:
    """Smallest list index n' >= n whose arm is Active, and that arm.

    Scans at most two full blocks, which is guaranteed to visit every arm;
    failure therefore means no arm is Active at all.
    """
    limit = 2 * rlist.num_arms
    for off in range(limit):
        arm = rlist.arm_at(n + off)
        if statuses[arm] == ArmStatus.ACTIVE:
            return n + off, arm
    raise DeadlockError(
        f"no Active arm in {limit} consecutive list positions from n={n}")


def apply_burn_in(i: int, params: DesignParams, statuses: np.ndarray) -> np.ndarray:
    """All-Active statuses while patient i is inside the burn-in phase."""
    if i <= params.burn_in:
        return np.full(statuses.shape, ArmStatus.ACTIVE, dtype=np.int8)
    return statuses
