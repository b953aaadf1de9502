"""Closed-form action correction under linearized safety constraints.

Given a proposed action ``mu``, current signals ``c``, thresholds ``C`` and
sensitivity rows ``G`` (one per constraint), the layer solves

    min_a  0.5 * ||a - mu||^2   s.t.   c_i + G_i . a <= C_i   for all i

assuming at most one constraint is active, in which case the answer is a
single projection onto the dominant constraint's hyperplane.

The dominant constraint is by default the violated one farthest from ``mu``
(largest ``lambda_i * |g_i|``). When several constraints are violated and their
rows differ in norm, this is the choice that agrees with the exact QP; the
largest raw multiplier (``dominant="multiplier"``) can pick a row whose
projection leaves another constraint violated.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

DEGENERATE_NORM_SQ = 1e-8
KINK_MARGIN = 1e-3
DOMINANT_RULES = ("distance", "multiplier")


@dataclass
class CorrectionResult:
    corrected_action: np.ndarray
    multipliers: np.ndarray
    dominant_index: int | None
    jacobian: np.ndarray
    clipped: bool
    unclipped_action: np.ndarray

    @property
    def active(self) -> bool:
        return self.dominant_index is not None

    def to_dict(self) -> dict:
        return {
            "corrected_action": self.corrected_action.tolist(),
            "unclipped_action": self.unclipped_action.tolist(),
            "multipliers": self.multipliers.tolist(),
            "dominant_index": self.dominant_index,
            "jacobian": self.jacobian.tolist(),
            "clipped": self.clipped,
        }


def _validate(mu, signals, thresholds, G) -> tuple[np.ndarray, ...]:
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    signals = np.asarray(signals, dtype=np.float64).reshape(-1)
    thresholds = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    G = np.asarray(G, dtype=np.float64)
    if G.ndim == 1:
        G = G.reshape(1, -1)
    k = signals.shape[0]
    if G.shape != (k, mu.shape[0]) or thresholds.shape != (k,):
        raise ValueError(
            f"shape mismatch: mu {mu.shape}, signals {signals.shape}, "
            f"thresholds {thresholds.shape}, G {G.shape}"
        )
    for name, arr in (("mu", mu), ("signals", signals), ("thresholds", thresholds), ("G", G)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {name}")
    return mu, signals, thresholds, G


def multipliers(mu, signals, thresholds, G) -> np.ndarray:
    """Per-constraint ``[(g.mu + c - C) / g.g]^+``, zero for degenerate rows."""
    mu, signals, thresholds, G = _validate(mu, signals, thresholds, G)
    return _multipliers(mu, signals, thresholds, G)


def _multipliers(mu, signals, thresholds, G) -> np.ndarray:
    gg = np.einsum("kd,kd->k", G, G)
    ok = gg >= DEGENERATE_NORM_SQ
    excess = G @ mu + signals - thresholds
    lam = np.zeros_like(excess)
    lam[ok] = np.maximum(excess[ok] / gg[ok], 0.0)
    return lam


def _dominance(lam: np.ndarray, G: np.ndarray, dominant: str) -> np.ndarray:
    """Score whose argmax picks the dominant constraint (last axis indexes constraints)."""
    if dominant == "distance":
        return lam * np.sqrt(np.einsum("...kd,...kd->...k", G, G))
    if dominant == "multiplier":
        return lam
    raise ValueError(f"dominant must be one of {DOMINANT_RULES}, got {dominant!r}")


def correct_action(
    mu, signals, thresholds, G, clip: float | None = 1.0, dominant: str = "distance"
) -> CorrectionResult:
    """Project ``mu`` onto the dominant violated constraint, then clamp to ``[-clip, clip]``."""
    mu, signals, thresholds, G = _validate(mu, signals, thresholds, G)
    lam = _multipliers(mu, signals, thresholds, G)
    score = _dominance(lam, G, dominant)
    d = mu.shape[0]
    if lam.size and lam.max() > 0.0:
        i_star = int(np.argmax(score))  # first index wins ties
        g = G[i_star]
        a = mu - lam[i_star] * g
        jac = np.eye(d) - np.outer(g, g) / float(g @ g)
    else:
        i_star = None
        a = mu.copy()
        jac = np.eye(d)
    unclipped = a.copy()
    clipped = False
    if clip is not None:
        a = np.clip(a, -clip, clip)
        moved = a != unclipped
        if moved.any():
            clipped = True
            jac[moved, :] = 0.0
    return CorrectionResult(a, lam, i_star, jac, clipped, unclipped)


@dataclass
class QpSolution:
    status: str  # "optimal" or "infeasible"
    action: np.ndarray | None
    active_set: tuple[int, ...]
    multipliers: np.ndarray | None

    @property
    def feasible(self) -> bool:
        return self.status == "optimal"


def qp_oracle(mu, signals, thresholds, G, tol: float = 1e-10) -> QpSolution:
    """Exact minimizer by enumerating every active set (K <= 8).

    Each active set S gives the least-norm correction ``a = mu - G_S^T nu`` with
    ``G_S a = C_S - c_S``. Among candidates satisfying all constraints the one
    closest to ``mu`` wins; smaller active sets are preferred on ties.
    """
    mu, signals, thresholds, G = _validate(mu, signals, thresholds, G)
    k = signals.shape[0]
    if k > 8:
        raise ValueError(f"qp_oracle enumerates 2^K active sets; K={k} exceeds 8")
    rhs_all = thresholds - signals
    gram_all = G @ G.T
    excess_all = G @ mu - rhs_all
    best: QpSolution | None = None
    best_dist = np.inf
    for size in range(k + 1):
        for subset in itertools.combinations(range(k), size):
            idx = list(subset)
            if size == 0:
                a = mu.copy()
                nu = np.zeros(0)
            else:
                gram = gram_all[np.ix_(idx, idx)]
                eig = np.linalg.eigvalsh(gram)
                if eig[0] <= 1e-12 * max(eig[-1], 1.0):
                    continue  # linearly dependent rows
                nu = np.linalg.solve(gram, excess_all[idx])
                a = mu - G[idx].T @ nu
            slack = G @ a - rhs_all
            scale = 1.0 + np.abs(rhs_all) + np.abs(G) @ np.abs(a)
            if np.any(slack > tol * scale):
                continue
            dist = float(np.sum((a - mu) ** 2))
            if best is None or dist < best_dist - tol * (1.0 + best_dist):
                lam = np.zeros(k)
                lam[idx] = nu
                best = QpSolution("optimal", a, tuple(idx), lam)
                best_dist = dist
    if best is None:
        return QpSolution("infeasible", None, (), None)
    return best


def _on_kink(mu, signals, thresholds, G, clip: float | None, dominant: str = "distance") -> str | None:
    gg = np.einsum("kd,kd->k", G, G)
    ok = gg >= DEGENERATE_NORM_SQ
    ratio = np.where(ok, (G @ mu + signals - thresholds) / np.where(ok, gg, 1.0), -np.inf)
    # any multiplier within KINK_MARGIN of switching on/off
    near_zero = ok & (np.abs(ratio) < KINK_MARGIN)
    if near_zero.any():
        return f"multiplier of constraint {int(np.argmax(near_zero))} is within {KINK_MARGIN} of 0"
    lam = np.maximum(ratio, 0.0)
    if (lam > 0).sum() >= 2:
        top2 = np.sort(_dominance(lam, G, dominant))[-2:]
        if top2[1] - top2[0] < KINK_MARGIN:
            return "two multipliers tie for the dominant constraint"
    if clip is not None:
        res = correct_action(mu, signals, thresholds, G, clip=None, dominant=dominant)
        if np.any(np.abs(np.abs(res.corrected_action) - clip) < KINK_MARGIN):
            return "corrected action sits on the clamp boundary"
    return None


def jacobian_check(
    mu, signals, thresholds, G, h: float = 1e-6, clip: float | None = 1.0, dominant: str = "distance"
) -> float:
    """Max relative error of the analytic Jacobian against central differences in ``mu``.

    Inputs at a non-differentiable point (a multiplier near zero, a tie for the
    dominant constraint, or a component on the clamp boundary) are rejected.
    """
    mu, signals, thresholds, G = _validate(mu, signals, thresholds, G)
    reason = _on_kink(mu, signals, thresholds, G, clip, dominant)
    if reason is not None:
        raise ValueError(f"input lies on a kink of the correction map: {reason}")
    analytic = correct_action(mu, signals, thresholds, G, clip=clip, dominant=dominant).jacobian
    d = mu.shape[0]
    numeric = np.zeros((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        plus = correct_action(mu + e, signals, thresholds, G, clip=clip, dominant=dominant).corrected_action
        minus = correct_action(mu - e, signals, thresholds, G, clip=clip, dominant=dominant).corrected_action
        numeric[:, j] = (plus - minus) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(err.max())


def correct_actions_batch(
    mu, signals, thresholds, G, clip: float | None = 1.0, dominant: str = "distance"
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``correct_action`` for ``mu (B, d)``, ``signals (B, K)``, ``G (B, K, d)``.

    Returns corrected actions ``(B, d)`` and Jacobians ``(B, d, d)``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    signals = np.asarray(signals, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    n, d = mu.shape
    if signals.shape != (n, thresholds.size) or G.shape != (n, thresholds.size, d):
        raise ValueError(f"shape mismatch: mu {mu.shape}, signals {signals.shape}, G {G.shape}")
    gg = np.einsum("bkd,bkd->bk", G, G)
    ok = gg >= DEGENERATE_NORM_SQ
    excess = np.einsum("bkd,bd->bk", G, mu) + signals - thresholds
    lam = np.where(ok, np.maximum(excess / np.where(ok, gg, 1.0), 0.0), 0.0)
    i_star = np.argmax(_dominance(lam, G, dominant), axis=1)
    rows = np.arange(n)
    lam_star = lam[rows, i_star]
    g = G[rows, i_star]
    active = lam_star > 0.0
    a = np.where(active[:, None], mu - lam_star[:, None] * g, mu)
    jac = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    if active.any():
        ga = g[active]
        jac[active] -= np.einsum("bi,bj->bij", ga, ga) / np.einsum("bd,bd->b", ga, ga)[:, None, None]
    if clip is not None:
        clipped = np.clip(a, -clip, clip)
        moved = clipped != a
        jac[moved] = 0.0
        a = clipped
    return a, jac
