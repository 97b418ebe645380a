"""Smoothness/Lipschitz estimates and the group-FL convergence bound."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import models
from .errors import ConvergenceError, DomainError

log = logging.getLogger(__name__)

ANALYSIS_RIDGE = 1e-6


@dataclass(frozen=True)
class Constants:
    rho_hat: float
    beta_hat: float
    omega_hat: float
    method: str = "pair_sampling"


def _sample_points(trajectory: np.ndarray, num_pairs: int, rng: np.random.Generator):
    """Pairs drawn one at a time so a longer run extends a shorter one with the same seed."""
    traj = np.asarray(trajectory, dtype=np.float64)
    sigma = traj.std(axis=0) if len(traj) > 1 else np.full(traj.shape[1], 0.1)
    sigma = np.where(sigma > 0, sigma, 1e-3)
    for _ in range(num_pairs):
        pts = []
        for _ in range(2):
            a, b = rng.integers(len(traj), size=2)
            lam = rng.uniform()
            base = lam * traj[a] + (1 - lam) * traj[b]
            pts.append(base + sigma * rng.standard_normal(traj.shape[1]))
        yield pts[0], pts[1]


def pair_ratios(spec: models.ModelSpec, X, y, trajectory, num_pairs: int, seed: int):
    """Largest loss and gradient difference quotients over trajectory pairs plus sampled pairs."""
    traj = np.asarray(trajectory, dtype=np.float64)
    rng = np.random.default_rng(seed)
    rho = beta = 0.0
    pairs = list(zip(traj[:-1], traj[1:])) + list(_sample_points(traj, num_pairs, rng))
    used = 0
    for w1, w2 in pairs:
        dist = float(np.linalg.norm(w1 - w2))
        if dist == 0.0:
            continue
        used += 1
        rho = max(rho, abs(models.loss(spec, w1, X, y) - models.loss(spec, w2, X, y)) / dist)
        g = models.gradient(spec, w1, X, y) - models.gradient(spec, w2, X, y)
        beta = max(beta, float(np.linalg.norm(g)) / dist)
    if used == 0:
        raise DomainError("no pair with nonzero distance to sample")
    return rho, beta


def estimate_constants(spec: models.ModelSpec, X, y, w_star: np.ndarray, trajectory, num_pairs: int = 1000,
                       seed: int = 0, interval_starts=None) -> Constants:
    """Estimate rho, beta (max difference quotients) and omega (``1 / max ||v - w_star||^2`` over interval starts ``v``).

    ``interval_starts`` are the global model at the start of every global
    interval; by default every trajectory point is used.
    """
    traj = np.atleast_2d(np.asarray(trajectory, dtype=np.float64))
    if traj.shape[0] == 0:
        raise DomainError("empty trajectory")
    rho, beta = pair_ratios(spec, X, y, traj, num_pairs, seed)
    starts = traj if interval_starts is None else np.atleast_2d(interval_starts)
    far = max(float(np.sum((v - w_star) ** 2)) for v in starts)
    omega = 1.0 / far if far > 0 else math.inf
    return Constants(rho, beta, omega, "pair_sampling")


def solve_centralized(spec: models.ModelSpec, X, y, tol: float = 1e-8, max_iters: int = 20000,
                      init: np.ndarray | None = None) -> np.ndarray:
    """Minimizer of the pooled loss, to gradient norm ``tol``.

    Quasi-Newton descent followed by Newton-CG polishing; raises
    :class:`ConvergenceError` if the gradient norm target is missed.
    """
    if spec.kind != models.SOFTMAX:
        raise DomainError("the optimum oracle needs the convex (softmax regression) model")
    w0 = np.zeros(spec.param_count) if init is None else np.array(init, dtype=np.float64)

    def f(w):
        return models.loss(spec, w, X, y)

    def g(w):
        return models.gradient(spec, w, X, y)

    def hessp(w, v):
        eps = 1e-6 / max(1.0, float(np.linalg.norm(v)))
        return (g(w + eps * v) - g(w - eps * v)) / (2 * eps)

    w = w0
    if np.linalg.norm(g(w)) > tol:
        res = optimize.minimize(f, w, jac=g, method="L-BFGS-B",
                                options={"maxiter": max_iters, "gtol": tol * 0.1, "ftol": 0.0, "maxcor": 50})
        w = res.x
    for _ in range(5):
        if np.linalg.norm(g(w)) <= tol:
            break
        res = optimize.minimize(f, w, jac=g, hessp=hessp, method="trust-ncg",
                                options={"gtol": tol * 0.1, "maxiter": 200})
        w = res.x
    gn = float(np.linalg.norm(g(w)))
    if gn > tol:
        raise ConvergenceError("centralized solve did not reach the gradient tolerance", gn)
    return w


def convergence_bound_terms(rho, beta, omega, delta, Delta, eta, tau1, tau2):
    """The two additive parts of the bound: optimization term and divergence term."""
    if tau1 <= 0 or tau2 <= 0:
        raise DomainError("tau1 and tau2 must be positive")
    if beta <= 0 or eta <= 0 or omega <= 0:
        raise DomainError("beta, eta and omega must be positive")
    g = eta * beta + 1.0
    opt = 1.0 / (2.0 * tau1 * tau2 * eta * omega)
    div = rho * (delta / beta * (g ** tau1 - 1.0) + Delta / beta * (g ** (tau1 * tau2) - 1.0))
    return opt, div


def convergence_bound(constants: Constants, delta: float, Delta: float, eta: float, tau1: int, tau2: int) -> float:
    """Upper bound on ``F(w(T)) - F(w*)`` for group FL; ``inf`` (with a warning) if ``eta > 1/beta``."""
    if tau1 <= 0 or tau2 <= 0:
        raise DomainError("tau1 and tau2 must be positive")
    if constants.beta_hat <= 0:
        raise DomainError("beta estimate must be positive")
    if eta > 1.0 / constants.beta_hat:
        warnings.warn(f"eta={eta} exceeds 1/beta={1 / constants.beta_hat:.4g}; bound does not apply",
                      RuntimeWarning, stacklevel=2)
        return math.inf
    opt, div = convergence_bound_terms(constants.rho_hat, constants.beta_hat, constants.omega_hat,
                              delta, Delta, eta, tau1, tau2)
    return opt + div
