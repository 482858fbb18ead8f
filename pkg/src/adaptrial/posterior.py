"""Conjugate posterior arithmetic and comparative posterior probabilities.

Two-distribution comparisons are computed deterministically: Beta pairs by
fixed-order Gauss-Legendre quadrature (split at the integrand's kink, with
a Gauss-Jacobi fallback when an endpoint density is unbounded), Gamma
pairs exactly through the Beta identity
P(G_a <= c G_b) = I_{lam/(1+lam)}(shape_a, shape_b), lam = c rate_a/rate_b.
Comparisons across three or more arms use Monte Carlo with a common draw
matrix per data state, so the per-arm "is best" estimates sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import numpy as np
from scipy.special import betainc, betaln, gammainc, roots_jacobi, roots_legendre


@dataclass(frozen=True)
class BetaPosterior:
    """Beta(alpha, beta) posterior for a Bernoulli response rate."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"Beta parameters must be positive, got ({self.alpha}, {self.beta})")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


@dataclass(frozen=True)
class GammaPosterior:
    """Gamma(shape, rate) posterior for an exponential event intensity."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError(f"Gamma parameters must be positive, got ({self.shape}, {self.rate})")

    @property
    def mean(self) -> float:
        return self.shape / self.rate


@dataclass(frozen=True)
class ProbabilityEstimate:
    """A posterior probability value plus how it was obtained."""

    value: float
    method: str  # "quadrature" (deterministic) or "monte_carlo"
    draws: int = 0
    std_error: float = 0.0

    def __post_init__(self):
        if not (-1e-12 <= self.value <= 1 + 1e-12):
            raise ValueError(f"probability out of range: {self.value}")
        object.__setattr__(self, "value", min(max(self.value, 0.0), 1.0))


@dataclass
class EstimatorConfig:
    """How comparative probabilities are computed.

    method "auto" uses quadrature whenever the comparison involves at most
    two distributions and Monte Carlo otherwise; "monte_carlo" forces MC
    everywhere. Supply ``rng`` for reproducible MC draws.
    """

    method: str = "auto"
    draws: int = 16384
    quadrature_nodes: int = 128
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.method not in ("auto", "quadrature", "monte_carlo"):
            raise ValueError(f"unknown estimator method {self.method!r}")
        if self.draws < 1:
            raise ValueError("draws must be >= 1")
        if self.quadrature_nodes < 2:
            raise ValueError("quadrature_nodes must be >= 2")

    def generator(self) -> np.random.Generator:
        if self.rng is None:
            self.rng = np.random.default_rng()
        return self.rng


def update_beta(post: BetaPosterior, successes: int, failures: int) -> BetaPosterior:
    if successes < 0 or failures < 0:
        raise ValueError("counts must be non-negative")
    return BetaPosterior(post.alpha + successes, post.beta + failures)


def update_gamma(post: GammaPosterior, event_count: int, total_time_on_test: float) -> GammaPosterior:
    if event_count < 0:
        raise ValueError("event_count must be non-negative")
    if total_time_on_test < 0:
        raise ValueError("total_time_on_test must be non-negative")
    return GammaPosterior(post.shape + event_count, post.rate + total_time_on_test)


@lru_cache(maxsize=8)
def _gl_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = roots_legendre(n)
    return x, w


def _beta_logpdf(a, b, t):
    return (a - 1.0) * np.log(t) + (b - 1.0) * np.log1p(-t) - betaln(a, b)


def beta_pairwise_values(alpha_a, beta_a, alpha_b, beta_b, shift: float,
                         nodes: int = 128) -> np.ndarray:
    """Vectorized P(theta_a + shift >= theta_b) for Beta parameter arrays.

    Requires alpha_a >= 1 and beta_a >= 1 (bounded density on the
    integration side); the scalar front end handles the singular cases.
    """
    alpha_a = np.asarray(alpha_a, dtype=float)
    beta_a = np.asarray(beta_a, dtype=float)
    alpha_b = np.asarray(alpha_b, dtype=float)
    beta_b = np.asarray(beta_b, dtype=float)
    if shift >= 1.0:
        return np.ones(np.broadcast(alpha_a, alpha_b).shape)
    if shift <= -1.0:
        return np.zeros(np.broadcast(alpha_a, alpha_b).shape)
    x, w = _gl_rule(nodes)
    lo = max(0.0, -shift)
    hi = min(1.0, 1.0 - shift)
    t = lo + (hi - lo) * (x + 1.0) / 2.0
    wt = w * (hi - lo) / 2.0
    fa = np.exp(_beta_logpdf(alpha_a[..., None], beta_a[..., None], t))
    Fb = betainc(alpha_b[..., None], beta_b[..., None], t + shift)
    val = np.sum(wt * fa * Fb, axis=-1)
    if shift > 0.0:
        val = val + 1.0 - betainc(alpha_a, beta_a, hi)
    return np.clip(val, 0.0, 1.0)


def _pairwise_jacobi(post_a: BetaPosterior, post_b: BetaPosterior, shift: float,
                     nodes: int) -> float:
    # Weight t^(aa-1)(1-t)^(ba-1) folded into the rule; handles aa or ba < 1.
    aa, ba = post_a.alpha, post_a.beta
    x, w = roots_jacobi(nodes, ba - 1.0, aa - 1.0)
    t = (x + 1.0) / 2.0
    g = betainc(post_b.alpha, post_b.beta, np.clip(t + shift, 0.0, 1.0))
    scale = np.exp((1.0 - aa - ba) * np.log(2.0) - betaln(aa, ba))
    return float(np.clip(np.sum(w * g) * scale, 0.0, 1.0))


def pairwise_prob(post_a: BetaPosterior, post_b: BetaPosterior, shift: float,
                  nodes: int = 128) -> ProbabilityEstimate:
    """P(theta_a + shift >= theta_b), deterministic."""
    if not -1.0 <= shift <= 1.0:
        raise ValueError(f"shift must be in [-1, 1], got {shift}")
    if post_a.alpha >= 1.0 and post_a.beta >= 1.0:
        val = float(beta_pairwise_values(post_a.alpha, post_a.beta,
                                         post_b.alpha, post_b.beta, shift, nodes))
    elif post_b.alpha >= 1.0 and post_b.beta >= 1.0:
        # Integrate in theta_b instead: P = F_b(s) + int f_b(t) (1-F_a(t-s)) dt.
        x, w = _gl_rule(nodes)
        lo = max(0.0, shift)
        hi = min(1.0, 1.0 + shift)
        t = lo + (hi - lo) * (x + 1.0) / 2.0
        wt = w * (hi - lo) / 2.0
        fb = np.exp(_beta_logpdf(post_b.alpha, post_b.beta, t))
        Sa = 1.0 - betainc(post_a.alpha, post_a.beta, np.clip(t - shift, 0.0, 1.0))
        val = float(np.sum(wt * fb * Sa))
        if shift > 0.0:
            val += float(betainc(post_b.alpha, post_b.beta, lo))
        val = min(max(val, 0.0), 1.0)
    else:
        val = _pairwise_jacobi(post_a, post_b, shift, nodes)
    return ProbabilityEstimate(val, "quadrature")


def prob_exceeds(post: BetaPosterior, theta_low: float) -> ProbabilityEstimate:
    """Exact upper tail P(theta >= theta_low)."""
    if not 0.0 <= theta_low <= 1.0:
        raise ValueError(f"theta_low must be in [0, 1], got {theta_low}")
    return ProbabilityEstimate(float(1.0 - betainc(post.alpha, post.beta, theta_low)),
                               "quadrature")


def _mc_beta_matrix(posteriors: Mapping[int, BetaPosterior], arms: list[int],
                    rng: np.random.Generator, draws: int) -> np.ndarray:
    a = np.array([posteriors[k].alpha for k in arms])
    b = np.array([posteriors[k].beta for k in arms])
    return rng.beta(a, b, size=(draws, len(arms)))


def mc_state_probs(matrix: np.ndarray, arms: list[int], candidate_set: set[int],
                   delta: float | None = None) -> tuple[dict[int, float], float | None]:
    """Per-arm is-best fractions and the control-margin fraction from one
    common draw matrix (columns ordered as ``arms``).

    Argmax ties go to the smallest arm index. Arms outside candidate_set
    get probability 0. The margin probability is computed when ``delta``
    is given and arm 0 is a column.
    """
    col = {k: j for j, k in enumerate(arms)}
    cand_cols = [col[k] for k in sorted(candidate_set)]
    sub = matrix[:, cand_cols]
    winners = np.argmax(sub, axis=1)
    counts = np.bincount(winners, minlength=len(cand_cols))
    p_best = {k: 0.0 for k in arms}
    for j, k in enumerate(sorted(candidate_set)):
        p_best[k] = counts[j] / matrix.shape[0]
    p_ctrl = None
    if delta is not None and 0 in col:
        cmax = sub.max(axis=1)
        p_ctrl = float(np.mean(matrix[:, col[0]] + delta >= cmax))
    return p_best, p_ctrl


def prob_is_max_all(posteriors: Mapping[int, BetaPosterior], candidate_set: set[int],
                    estimator: EstimatorConfig) -> dict[int, ProbabilityEstimate]:
    """P(theta_k is the largest over candidate_set) for every k, sharing
    one draw matrix so the Monte Carlo values sum to exactly 1."""
    if not candidate_set:
        raise ValueError("candidate_set must be nonempty")
    if not candidate_set <= set(posteriors):
        raise ValueError("candidate_set must be a subset of the posterior map")
    cand = sorted(candidate_set)
    if len(cand) == 1 and estimator.method != "monte_carlo":
        return {cand[0]: ProbabilityEstimate(1.0, "quadrature")}
    if len(cand) == 2 and estimator.method != "monte_carlo":
        k0, k1 = cand
        p = pairwise_prob(posteriors[k1], posteriors[k0], 0.0, estimator.quadrature_nodes)
        return {k1: p, k0: ProbabilityEstimate(1.0 - p.value, "quadrature")}
    arms = sorted(posteriors)
    matrix = _mc_beta_matrix(posteriors, arms, estimator.generator(), estimator.draws)
    p_best, _ = mc_state_probs(matrix, arms, candidate_set)
    out = {}
    for k in cand:
        p = p_best[k]
        se = float(np.sqrt(p * (1.0 - p) / estimator.draws))
        out[k] = ProbabilityEstimate(p, "monte_carlo", estimator.draws, se)
    return out


def prob_is_max(posteriors: Mapping[int, BetaPosterior], k: int, candidate_set: set[int],
                estimator: EstimatorConfig) -> ProbabilityEstimate:
    """P(theta_k = max over candidate_set | data)."""
    if k not in candidate_set:
        raise ValueError(f"arm {k} not in candidate_set")
    return prob_is_max_all(posteriors, candidate_set, estimator)[k]


def prob_control_within_margin(posteriors: Mapping[int, BetaPosterior], delta: float,
                               candidate_set: set[int],
                               estimator: EstimatorConfig) -> ProbabilityEstimate:
    """P(theta_0 + delta >= max over candidate_set of theta_l | data)."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if 0 not in posteriors:
        raise ValueError("control posterior (arm 0) required")
    others = sorted(candidate_set - {0})
    if not others:
        return ProbabilityEstimate(1.0, "quadrature")
    if len(others) == 1 and estimator.method != "monte_carlo":
        return pairwise_prob(posteriors[0], posteriors[others[0]], delta,
                             estimator.quadrature_nodes)
    arms = sorted(posteriors)
    matrix = _mc_beta_matrix(posteriors, arms, estimator.generator(), estimator.draws)
    _, p_ctrl = mc_state_probs(matrix, arms, candidate_set, delta)
    se = float(np.sqrt(p_ctrl * (1.0 - p_ctrl) / estimator.draws))
    return ProbabilityEstimate(p_ctrl, "monte_carlo", estimator.draws, se)


# --- Gamma-scale comparisons (exponential time-to-event model) ---

def gamma_prob_less_scaled(post_a: GammaPosterior, post_b: GammaPosterior,
                           scale: float) -> float:
    """Exact P(theta_a <= scale * theta_b) for independent Gamma posteriors."""
    if scale <= 0:
        return 0.0
    lam = scale * post_a.rate / post_b.rate
    return float(betainc(post_a.shape, post_b.shape, lam / (1.0 + lam)))


def prob_hazard_min(posteriors: Mapping[int, GammaPosterior], rho: float,
                    candidate_set: set[int],
                    estimator: EstimatorConfig) -> ProbabilityEstimate:
    """P(rho * theta_0 <= min over candidate_set of theta_l | data)."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    others = sorted(candidate_set - {0})
    if not others:
        return ProbabilityEstimate(1.0, "quadrature")
    if len(others) == 1 and estimator.method != "monte_carlo":
        # P(rho th0 <= thj) = 1 - P(thj < rho th0)
        return ProbabilityEstimate(
            1.0 - gamma_prob_less_scaled(posteriors[others[0]], posteriors[0], rho),
            "quadrature")
    arms = sorted(posteriors)
    matrix = _mc_gamma_matrix(posteriors, arms, estimator.generator(), estimator.draws)
    col = {k: j for j, k in enumerate(arms)}
    cmin = matrix[:, [col[k] for k in sorted(candidate_set)]].min(axis=1)
    p = float(np.mean(rho * matrix[:, col[0]] <= cmin))
    se = float(np.sqrt(p * (1.0 - p) / estimator.draws))
    return ProbabilityEstimate(p, "monte_carlo", estimator.draws, se)


def _mc_gamma_matrix(posteriors: Mapping[int, GammaPosterior], arms: list[int],
                     rng: np.random.Generator, draws: int) -> np.ndarray:
    shp = np.array([posteriors[k].shape for k in arms])
    rate = np.array([posteriors[k].rate for k in arms])
    return rng.standard_gamma(np.broadcast_to(shp, (draws, len(arms)))) / rate


def prob_is_min_all(posteriors: Mapping[int, GammaPosterior], candidate_set: set[int],
                    estimator: EstimatorConfig) -> dict[int, ProbabilityEstimate]:
    """P(theta_k is the smallest intensity over candidate_set) per arm."""
    if not candidate_set:
        raise ValueError("candidate_set must be nonempty")
    cand = sorted(candidate_set)
    if len(cand) == 1 and estimator.method != "monte_carlo":
        return {cand[0]: ProbabilityEstimate(1.0, "quadrature")}
    if len(cand) == 2 and estimator.method != "monte_carlo":
        k0, k1 = cand
        p = gamma_prob_less_scaled(posteriors[k0], posteriors[k1], 1.0)
        return {k0: ProbabilityEstimate(p, "quadrature"),
                k1: ProbabilityEstimate(1.0 - p, "quadrature")}
    arms = sorted(posteriors)
    matrix = _mc_gamma_matrix(posteriors, arms, estimator.generator(), estimator.draws)
    col = {k: j for j, k in enumerate(arms)}
    sub = matrix[:, [col[k] for k in cand]]
    winners = np.argmin(sub, axis=1)
    counts = np.bincount(winners, minlength=len(cand))
    out = {}
    for j, k in enumerate(cand):
        p = counts[j] / estimator.draws
        se = float(np.sqrt(p * (1.0 - p) / estimator.draws))
        out[k] = ProbabilityEstimate(p, "monte_carlo", estimator.draws, se)
    return out


def prob_is_min(posteriors: Mapping[int, GammaPosterior], k: int, candidate_set: set[int],
                estimator: EstimatorConfig) -> ProbabilityEstimate:
    if k not in candidate_set:
        raise ValueError(f"arm {k} not in candidate_set")
    return prob_is_min_all(posteriors, candidate_set, estimator)[k]


def prob_below(post: GammaPosterior, theta_high: float) -> ProbabilityEstimate:
    """Exact lower tail P(theta <= theta_high) for a Gamma posterior."""
    if theta_high < 0:
        raise ValueError("theta_high must be >= 0")
    return ProbabilityEstimate(float(gammainc(post.shape, post.rate * theta_high)),
                               "quadrature")


def prob_vaccine_efficacy(control: GammaPosterior, vaccine: GammaPosterior,
                          ve_star: float,
                          estimator: EstimatorConfig | None = None) -> ProbabilityEstimate:
    """P(1 - theta_vaccine/theta_control >= ve_star) under independent Gammas."""
    if not 0.0 <= ve_star < 1.0:
        raise ValueError(f"ve_star must be in [0, 1), got {ve_star}")
    return ProbabilityEstimate(
        gamma_prob_less_scaled(vaccine, control, 1.0 - ve_star), "quadrature")
