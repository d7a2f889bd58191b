"""Maximum likelihood over a black-box log-likelihood evaluator.

The evaluator is anything with ``evaluate(params) -> float``: a
``Federation`` running the secure protocol or a pooled reference. Each
objective call is one full evaluation, so evaluation counts are the cost
model here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from .errors import ConfigError, CovarianceNotPD, DomainError
from .mvn import ParameterSet

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    method: str = "nelder_mead"
    max_evals: int = 20_000
    x_tol: float = 1e-8
    f_tol: float = 1e-10
    fd_step: float = 1e-5        # relative step for gradients
    hess_step: float = 1e-3      # relative step for the standard-error Hessian
    start: str | Sequence[float] = "default"
    initial_step: float = 0.5
    restarts: int = 2
    compute_se: bool = True
    variance_floor: float = 1e-6
    max_condition: float = 1e10
    # repeated evaluations of the start point; their spread sets a floor under f_tol
    floor_probes: int = 3

    def __post_init__(self):
        if self.method not in ("nelder_mead", "bfgs_numeric"):
            raise ConfigError(f"unknown optimizer method {self.method!r}")
        if self.max_evals < 1:
            raise ConfigError("max_evals must be at least 1")
        for name in ("x_tol", "f_tol", "fd_step", "hess_step", "initial_step"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.floor_probes < 1:
            raise ConfigError("floor_probes must be at least 1")
        if self.restarts < 0:
            raise ConfigError("restarts must be non-negative")


@dataclass
class FitResult:
    theta: np.ndarray
    params: ParameterSet
    ll: float
    evals: int
    converged: bool
    natural: np.ndarray
    natural_names: list[str]
    se: np.ndarray | None = None         # natural scale
    se_theta: np.ndarray | None = None
    boundary: bool = False
    message: str = ""
    hessian_evals: int = 0
    start_ll: float = float("nan")
    f_tol_used: float = float("nan")
    history: list[float] = field(default_factory=list)  # best-so-far LL after each evaluation

    def to_dict(self) -> dict:
        def arr(x):
            return None if x is None else [float(v) for v in x]

        return {
            "theta": arr(self.theta),
            "natural": dict(zip(self.natural_names, arr(self.natural))),
            "se": None if self.se is None else dict(zip(self.natural_names, arr(self.se))),
            "loglik": float(self.ll),
            "evaluations": int(self.evals),
            "hessian_evaluations": int(self.hessian_evals),
            "converged": bool(self.converged),
            "boundary": bool(self.boundary),
            "message": self.message,
            "mean": arr(self.params.mean),
            "cov": [arr(r) for r in self.params.cov],
        }


class _Objective:
    """Negative log-likelihood with evaluation counting and best-so-far tracking."""

    def __init__(self, model, evaluator, budget: int):
        self.model = model
        self.evaluator = evaluator
        self.budget = budget
        self.count = 0
        self.best_x = None
        self.best_f = np.inf
        self.history: list[float] = []

    def __call__(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        self.count += 1
        try:
            params = self.model.realize(theta)
        except (CovarianceNotPD, DomainError):
            f = np.inf
        else:
            f = -self.evaluator.evaluate(params)
        if not np.isfinite(f):
            f = np.inf
        if f < self.best_f:
            self.best_f, self.best_x = f, theta.copy()
        self.history.append(-self.best_f)
        return f

    @property
    def remaining(self) -> int:
        return self.budget - self.count


def start_point(model, config: OptimizerConfig) -> np.ndarray:
    if isinstance(config.start, str):
        if config.start != "default":
            raise ConfigError(f"unknown start {config.start!r}; give 'default' or a parameter vector")
        return np.asarray(model.default_start(), dtype=float)
    theta = np.asarray(config.start, dtype=float).reshape(-1)
    if theta.size != model.n_params:
        raise ConfigError(f"start has {theta.size} entries, model has {model.n_params}")
    return theta


def _simplex(x0: np.ndarray, step: float) -> np.ndarray:
    sim = np.tile(x0, (x0.size + 1, 1))
    for i in range(x0.size):
        sim[i + 1, i] += step * max(1.0, abs(x0[i]))
    return sim


def _nelder_mead(obj: _Objective, x0: np.ndarray, config: OptimizerConfig, f_tol: float) -> tuple[bool, str]:
    x, step = x0, config.initial_step
    converged, message = False, ""
    for attempt in range(config.restarts + 1):
        if obj.remaining <= 0:
            return False, "evaluation budget exhausted"
        before = obj.best_f
        res = optimize.minimize(
            obj, x, method="Nelder-Mead",
            options={"initial_simplex": _simplex(x, step), "xatol": config.x_tol, "fatol": f_tol,
                     "maxfev": obj.remaining, "adaptive": x.size > 4},
        )
        converged, message = bool(res.success), str(res.message)
        x = obj.best_x
        # a restart that found nothing better confirms the optimum
        if attempt > 0 and before - obj.best_f <= max(f_tol, 1e-12 * abs(before)):
            break
        step = max(config.initial_step * 0.1, 1e-3) if attempt == 0 else step * 0.5
    return converged, message


def fd_gradient(f, theta: np.ndarray, step: float) -> np.ndarray:
    g = np.empty_like(theta)
    for i in range(theta.size):
        h = step * max(1.0, abs(theta[i]))
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        g[i] = (f(up) - f(down)) / (2 * h)
    return g


def _bfgs(obj: _Objective, x0: np.ndarray, config: OptimizerConfig, f_tol: float) -> tuple[bool, str]:
    res = optimize.minimize(
        obj, x0, method="BFGS", jac=lambda t: fd_gradient(obj, t, config.fd_step),
        options={"gtol": max(f_tol, 1e-6) ** 0.5, "maxiter": max(1, config.max_evals // (2 * x0.size + 2))},
    )
    if res.success:
        return True, str(res.message)
    # lost precision at the noise floor: accept if the gradient is small
    grad = fd_gradient(obj, obj.best_x, config.fd_step)
    ok = res.status == 2 and float(np.max(np.abs(grad))) < 1e-3
    return ok, str(res.message)


def numeric_hessian(f, theta: np.ndarray, step: float) -> np.ndarray:
    """Central-difference Hessian of ``f``; ``2 m^2 + 1`` evaluations."""
    theta = np.asarray(theta, dtype=float)
    m = theta.size
    h = step * np.maximum(1.0, np.abs(theta))
    f0 = f(theta)
    H = np.empty((m, m))

    def at(*moves):
        t = theta.copy()
        for i, s in moves:
            t[i] += s * h[i]
        return f(t)

    for i in range(m):
        H[i, i] = (at((i, 1)) - 2 * f0 + at((i, -1))) / h[i] ** 2
        for j in range(i):
            v = at((i, 1), (j, 1)) - at((i, 1), (j, -1)) - at((i, -1), (j, 1)) + at((i, -1), (j, -1))
            H[i, j] = H[j, i] = v / (4 * h[i] * h[j])
    return H


@dataclass
class StandardErrors:
    se_theta: np.ndarray | None
    se: np.ndarray | None
    boundary: bool
    reason: str = ""


def standard_errors(model, theta: np.ndarray, hessian: np.ndarray, variance_floor: float = 1e-6,
                    max_condition: float = 1e10) -> StandardErrors:
    """Delta-method standard errors from the Hessian of the negative log-likelihood.

    Flags a boundary solution (and withholds SEs) when the Hessian is not
    positive definite or badly conditioned, or when a fitted variance sits
    below ``variance_floor`` times the largest one.
    """
    natural = model.natural(theta)
    var_idx = model.variance_indices()
    if var_idx:
        variances = natural[var_idx]
        if np.min(variances) < variance_floor * max(np.max(variances), 1e-300):
            return StandardErrors(None, None, True, "a variance estimate is at the boundary")
    eig = np.linalg.eigvalsh(0.5 * (hessian + hessian.T))
    if not np.all(np.isfinite(eig)) or eig[0] <= 0:
        return StandardErrors(None, None, True, "Hessian is not positive definite")
    if eig[-1] / eig[0] > max_condition:
        return StandardErrors(None, None, True, "Hessian is ill-conditioned")
    cov_theta = np.linalg.inv(hessian)
    cov_theta = 0.5 * (cov_theta + cov_theta.T)
    jac = model.natural_jacobian(theta)
    cov_nat = jac @ cov_theta @ jac.T
    return StandardErrors(np.sqrt(np.diag(cov_theta)), np.sqrt(np.clip(np.diag(cov_nat), 0, None)), False)


def fit(model, evaluator, config: OptimizerConfig | None = None) -> FitResult:
    """Maximize the evaluator's log-likelihood over the model's free parameters."""
    config = config or OptimizerConfig()
    obj = _Objective(model, evaluator, config.max_evals)
    x0 = start_point(model, config)
    probes = [obj(x0) for _ in range(config.floor_probes)]
    f0 = probes[0]
    if not np.isfinite(f0):
        raise DomainError("the start point does not give a finite log-likelihood")
    # each secure evaluation carries fresh masks, so repeated values scatter at the
    # rounding level of the masked totals; tolerances below that never trigger
    floor = max(probes) - min(probes)
    f_tol = max(config.f_tol, 10.0 * floor)
    if config.method == "nelder_mead":
        converged, message = _nelder_mead(obj, x0, config, f_tol)
    else:
        converged, message = _bfgs(obj, x0, config, f_tol)
    theta = obj.best_x
    evals = obj.count
    history = list(obj.history)
    result = FitResult(theta=theta, params=model.realize(theta), ll=-obj.best_f, evals=evals,
                       converged=converged, natural=model.natural(theta),
                       natural_names=list(model.natural_names), message=message, start_ll=-f0, history=history, f_tol_used=f_tol)
    if converged and config.compute_se:
        hess_obj = _Objective(model, evaluator, np.inf)
        H = numeric_hessian(hess_obj, theta, config.hess_step)
        se = standard_errors(model, theta, H, config.variance_floor, config.max_condition)
        result.se, result.se_theta, result.boundary = se.se, se.se_theta, se.boundary
        result.hessian_evals = hess_obj.count
        if se.reason:
            result.message = f"{message}; {se.reason}"
    log.info("fit finished: ll=%.6f evals=%d converged=%s", result.ll, evals, converged)
    return result
