"""L0-constrained least squares by projected gradient descent.

Minimises ``||Y - X b||^2`` over binary ``b`` with exactly ``r`` ones.  Each
iteration takes a gradient step in the full coefficient space, projects back
onto ``r``-sparse vectors with a relaxed probabilistic projection, and rescales
the sparse vector by the scalar that best fits ``Y``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class BudgetError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    pass


@dataclass
class SolverConfig:
    eta: float | None = None  # None: 2 / (largest + smallest eigenvalue of X^T X)
    iters: int = 50
    r0: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.eta is not None and not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if self.r0 < 0:
            raise ValueError(f"r0 must be >= 0, got {self.r0}")


@dataclass
class PruneMask:
    beta: np.ndarray  # last coefficient vector from the gradient step
    beta_L0: np.ndarray  # binary, exactly r ones
    r: int
    r0: int
    j: int = 0
    loss: float = float("nan")  # ||Y - alpha X beta_L0||^2 at the optimal alpha
    alpha: float = 1.0
    history: list = field(default_factory=list)  # best-so-far loss after each iteration

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.beta_L0)


def candidate_order(beta_abs: np.ndarray) -> np.ndarray:
    """Indices by descending magnitude, ties broken by ascending index."""
    return np.lexsort((np.arange(beta_abs.size), -beta_abs))


def rpp(beta: np.ndarray, r: int, r0: int, rng) -> np.ndarray:
    """Relaxed probabilistic projection of ``beta`` onto vectors with ``r`` nonzeros.

    The ``r + r0`` largest-magnitude entries form the candidate set.  Rounds
    then repeat until ``r`` entries are admitted: selection probabilities are
    the candidates' magnitudes normalised over those still remaining, and
    candidate ``i`` (visited in ascending index order) is admitted when its
    probability beats a fresh uniform draw.  Admitted entries keep their
    signed value from ``beta``.
    """
    beta = np.asarray(beta, dtype=np.float64)
    n = beta.size
    if not 1 <= r <= n:
        raise BudgetError(f"budget r={r} must lie in [1, {n}]")
    r0 = min(int(r0), n - r)
    rng = np.random.default_rng(rng)

    beta_abs = np.abs(beta)
    if not beta_abs.any():
        candidates = np.arange(r + r0)
    else:
        candidates = candidate_order(beta_abs)[:r + r0]
    remaining = np.zeros(n, dtype=bool)
    remaining[candidates] = True

    chosen = np.zeros(n, dtype=bool)
    count = 0
    while count < r:
        weight = np.where(remaining, beta_abs, 0.0)
        total = weight.sum()
        if total > 0:
            prob = weight / total
        else:
            prob = remaining / remaining.sum()
        for i in np.flatnonzero(remaining):
            if prob[i] > rng.random():
                chosen[i] = True
                remaining[i] = False
                count += 1
                if count == r:
                    break

    out = np.zeros(n)
    out[chosen] = beta[chosen]
    # zero-valued picks only happen when magnitudes ran out; keep them nonzero
    zero_picks = chosen & (out == 0)
    if zero_picks.any():
        nz = np.abs(out[chosen & ~zero_picks])
        out[zero_picks] = nz.min() if nz.size else 1.0
    return out


def lgd_step(beta_L0: np.ndarray, X: np.ndarray, Y: np.ndarray, eta: float) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        gram, xty = X.T @ X, X.T @ Y
    return _step(np.asarray(beta_L0, dtype=np.float64), gram, xty, eta)


def _step(beta_L0, gram, xty, eta):
    with np.errstate(over="ignore", invalid="ignore"):
        beta = beta_L0 - eta * (gram @ beta_L0 - xty)
    if not np.all(np.isfinite(beta)):
        raise DivergenceError(f"gradient step produced non-finite values; reduce eta (was {eta:g})")
    return beta


def optimal_alpha(Z: np.ndarray, Y: np.ndarray) -> float:
    zz = float(Z @ Z)
    if zz < 1e-12 * float(Y @ Y) or zz == 0.0:
        return 1.0
    return float(Z @ Y) / zz


def alpha_rescale(beta_L0: np.ndarray, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Scale ``beta_L0`` by the least-squares optimal scalar for ``Y ~ alpha * X beta_L0``."""
    beta_L0 = np.asarray(beta_L0, dtype=np.float64)
    if not beta_L0.any():
        log.warning("alpha_rescale called with an all-zero vector; returning it unchanged")
        return beta_L0.copy()
    Z = np.asarray(X, dtype=np.float64) @ beta_L0
    return optimal_alpha(Z, np.asarray(Y, dtype=np.float64)) * beta_L0


def mask_loss(mask: np.ndarray, X: np.ndarray, Y: np.ndarray) -> tuple[float, float]:
    """Loss of a binary mask with its optimal scalar, returned as ``(loss, alpha)``."""
    Z = X @ mask
    alpha = optimal_alpha(Z, Y)
    res = Y - alpha * Z
    return float(res @ res), alpha


def default_eta(X: np.ndarray) -> float:
    """Optimal constant step for the quadratic, ``2 / (lambda_max + lambda_min)``."""
    ev = np.linalg.eigvalsh(X.T @ X)
    denom = ev[-1] + max(ev[0], 0.0)
    return 2.0 / denom if denom > 0 else 1.0


def lgd(X: np.ndarray, Y: np.ndarray, r: int, config: SolverConfig | None = None, j: int = 0,
        rng=None) -> PruneMask:
    """Binary mask with ``r`` ones approximately minimising ``||Y - alpha X mask||^2``.

    Runs exactly ``config.iters`` iterations and returns the best mask seen.
    ``rng`` overrides ``config.seed`` when given.
    """
    config = config or SolverConfig()
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    I = X.shape[1]
    if not 1 <= r <= I:
        raise BudgetError(f"budget r={r} must lie in [1, {I}]")
    r0 = min(config.r0, I - r)
    rng = np.random.default_rng(config.seed if rng is None else rng)
    eta = config.eta if config.eta is not None else default_eta(X)
    gram, xty = X.T @ X, X.T @ Y

    beta_L0 = rpp(rng.standard_normal(I), r, r0, rng)
    best_mask, best_loss, best_alpha = None, np.inf, 1.0
    beta = beta_L0
    history = []
    for _ in range(config.iters):
        beta = _step(beta_L0, gram, xty, eta)
        beta_L0 = rpp(beta, r, r0, rng)
        mask = (beta_L0 != 0).astype(np.float64)
        loss, alpha = mask_loss(mask, X, Y)
        if best_mask is None or loss < best_loss:
            best_mask, best_loss, best_alpha = mask, loss, alpha
        history.append(best_loss)
        beta_L0 = alpha_rescale(beta_L0, X, Y)

    return PruneMask(beta=beta, beta_L0=best_mask, r=r, r0=r0, j=j, loss=best_loss,
                     alpha=best_alpha, history=history)
