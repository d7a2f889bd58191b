"""Free parameter vectors mapped to model-implied means and covariances.

All covariance parameters go through a log-Cholesky factor so any finite
parameter vector yields a positive-definite covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NotRepresentable, ShapeError
from .mvn import ParameterSet, cholesky


def _check_theta(theta, size: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape[0] != size:
        raise ShapeError(f"expected {size} parameters, got {theta.shape[0]}")
    if not np.all(np.isfinite(theta)):
        raise DomainError("parameter vector has non-finite entries")
    return theta


def tril_from_log_cholesky(values: np.ndarray, p: int) -> np.ndarray:
    """Row-wise lower triangle with exponentiated diagonal."""
    L = np.zeros((p, p))
    L[np.tril_indices(p)] = values
    L[np.diag_indices(p)] = np.exp(np.diag(L))
    return L


def log_cholesky_from_cov(cov: np.ndarray) -> np.ndarray:
    L = cholesky(cov).copy()
    L[np.diag_indices_from(L)] = np.log(np.diag(L))
    return L[np.tril_indices(L.shape[0])]


def _d_cov_d_tril(L: np.ndarray) -> np.ndarray:
    """Derivative of ``L L^T`` with respect to each log-Cholesky coordinate.

    Returns an array of shape ``(m, p, p)`` ordered like ``np.tril_indices``.
    """
    p = L.shape[0]
    rows, cols = np.tril_indices(p)
    out = np.zeros((rows.size, p, p))
    for k, (i, j) in enumerate(zip(rows, cols)):
        dL = np.zeros((p, p))
        dL[i, j] = L[i, j] if i == j else 1.0
        d = dL @ L.T
        out[k] = d + d.T
    return out


class SaturatedModel:
    """Unrestricted mean and covariance for ``p`` variables.

    Layout: ``p`` means followed by the row-wise lower triangle of the
    Cholesky factor, diagonal entries stored as logs.
    """

    kind = "saturated"

    def __init__(self, p: int, var_names: tuple[str, ...] = ()):
        if p < 1:
            raise ShapeError("saturated model needs at least one variable")
        self.p = p
        self.var_names = tuple(var_names) or tuple(f"x{i}" for i in range(p))
        self.n_params = p + p * (p + 1) // 2

    def realize(self, theta) -> ParameterSet:
        theta = _check_theta(theta, self.n_params)
        L = tril_from_log_cholesky(theta[self.p:], self.p)
        return ParameterSet(theta[: self.p], L @ L.T, self.var_names)

    def encode(self, params: ParameterSet) -> np.ndarray:
        if params.p != self.p:
            raise ShapeError(f"parameters have dimension {params.p}, model has {self.p}")
        return np.concatenate([params.mean, log_cholesky_from_cov(params.cov)])

    def default_start(self) -> np.ndarray:
        return np.zeros(self.n_params)

    @property
    def natural_names(self) -> list[str]:
        names = [f"mean[{v}]" for v in self.var_names]
        rows, cols = np.triu_indices(self.p)
        names += [f"cov[{self.var_names[i]},{self.var_names[j]}]" for i, j in zip(rows, cols)]
        return names

    def natural(self, theta) -> np.ndarray:
        params = self.realize(theta)
        return np.concatenate([params.mean, params.cov[np.triu_indices(self.p)]])

    def natural_jacobian(self, theta) -> np.ndarray:
        theta = _check_theta(theta, self.n_params)
        p = self.p
        L = tril_from_log_cholesky(theta[p:], p)
        dcov = _d_cov_d_tril(L)
        rows, cols = np.triu_indices(p)
        jac = np.zeros((self.n_params, self.n_params))
        jac[:p, :p] = np.eye(p)
        jac[p:, p:] = dcov[:, rows, cols].T
        return jac

    def variance_indices(self) -> list[int]:
        """Positions in ``natural`` holding variances (for boundary checks)."""
        rows, cols = np.triu_indices(self.p)
        return [self.p + k for k, (i, j) in enumerate(zip(rows, cols)) if i == j]


class LatentGrowthModel:
    """Linear latent growth curve with intercept and slope factors.

    Wave ``j`` (0-based) loads 1 on the intercept and ``j`` on the slope, the
    residual variance is common across waves, and observed means are
    ``loadings @ factor_means``.

    Layout: ``(log l11, l21, log l22, log residual_var, mean_intercept,
    mean_slope)`` where ``l`` is the Cholesky factor of the 2x2 factor
    covariance.
    """

    kind = "lgm"
    n_params = 6
    natural_names = [
        "var_intercept",
        "cov_intercept_slope",
        "var_slope",
        "var_residual",
        "mean_intercept",
        "mean_slope",
    ]

    def __init__(self, waves: int, var_names: tuple[str, ...] = ()):
        if waves < 3:
            raise ShapeError("an intercept/slope growth model needs at least 3 waves")
        self.waves = waves
        self.p = waves
        self.var_names = tuple(var_names) or tuple(f"wave{j + 1}" for j in range(waves))
        self.loadings = np.column_stack([np.ones(waves), np.arange(waves, dtype=float)])

    def _factor_chol(self, theta: np.ndarray) -> np.ndarray:
        return np.array([[np.exp(theta[0]), 0.0], [theta[1], np.exp(theta[2])]])

    def realize(self, theta) -> ParameterSet:
        theta = _check_theta(theta, self.n_params)
        L = self._factor_chol(theta)
        lam = self.loadings
        cov = lam @ (L @ L.T) @ lam.T + np.exp(theta[3]) * np.eye(self.waves)
        return ParameterSet(lam @ theta[4:6], cov, self.var_names)

    def encode(self, params: ParameterSet) -> np.ndarray:
        if params.p != self.waves:
            raise ShapeError(f"parameters have dimension {params.p}, model has {self.waves} waves")
        lam = self.loadings
        iu = np.triu_indices(self.waves, 1)
        # off-diagonal entries are linear in (phi11, phi12, phi22)
        design = np.column_stack([np.ones(iu[0].size), iu[0] + iu[1], iu[0] * iu[1]]).astype(float)
        coef, *_ = np.linalg.lstsq(design, params.cov[iu], rcond=None)
        phi = np.array([[coef[0], coef[1]], [coef[1], coef[2]]])
        resid_var = float(np.mean(np.diag(params.cov - lam @ phi @ lam.T)))
        fmean, *_ = np.linalg.lstsq(lam, params.mean, rcond=None)
        scale = max(1.0, float(np.max(np.abs(params.cov))))
        rebuilt_cov = lam @ phi @ lam.T + resid_var * np.eye(self.waves)
        if (
            resid_var <= 0
            or np.max(np.abs(rebuilt_cov - params.cov)) > 1e-9 * scale
            or np.max(np.abs(lam @ fmean - params.mean)) > 1e-9 * max(1.0, float(np.max(np.abs(params.mean))))
        ):
            raise NotRepresentable("parameters do not have latent growth structure")
        try:
            lc = log_cholesky_from_cov(phi)
        except ValueError as exc:
            raise NotRepresentable("implied factor covariance is not positive definite") from exc
        return np.concatenate([lc, [np.log(resid_var)], fmean])

    def default_start(self) -> np.ndarray:
        return np.array([0.0, 0.0, np.log(0.1), 0.0, 0.0, 0.0])

    def natural(self, theta) -> np.ndarray:
        theta = _check_theta(theta, self.n_params)
        L = self._factor_chol(theta)
        phi = L @ L.T
        return np.array([phi[0, 0], phi[0, 1], phi[1, 1], np.exp(theta[3]), theta[4], theta[5]])

    def natural_jacobian(self, theta) -> np.ndarray:
        theta = _check_theta(theta, self.n_params)
        L = self._factor_chol(theta)
        dphi = _d_cov_d_tril(L)
        jac = np.zeros((6, 6))
        jac[0, :3] = dphi[:, 0, 0]
        jac[1, :3] = dphi[:, 0, 1]
        jac[2, :3] = dphi[:, 1, 1]
        jac[3, 3] = np.exp(theta[3])
        jac[4, 4] = jac[5, 5] = 1.0
        return jac

    def variance_indices(self) -> list[int]:
        return [0, 2, 3]

    def moments_start(self, wave_means: np.ndarray, wave_vars: np.ndarray) -> np.ndarray:
        """Crude start from per-wave means and variances (no cross-wave moments)."""
        fmean, *_ = np.linalg.lstsq(self.loadings, np.asarray(wave_means, float), rcond=None)
        v = max(float(np.mean(wave_vars)), 1e-6)
        return np.array([np.log(np.sqrt(v / 2)), 0.0, np.log(np.sqrt(v) / (4 * self.waves)), np.log(v / 2), *fmean])


@dataclass
class CommonMeanModel:
    """One free parameter: a mean shared by every variable, covariance fixed."""

    cov: np.ndarray
    kind = "common_mean"
    n_params = 1
    natural_names = ("mean",)

    def __post_init__(self):
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        self.p = self.cov.shape[0]

    def realize(self, theta) -> ParameterSet:
        theta = _check_theta(theta, 1)
        return ParameterSet(np.full(self.p, theta[0]), self.cov)

    def encode(self, params: ParameterSet) -> np.ndarray:
        if not np.allclose(params.mean, params.mean[0]) or not np.allclose(params.cov, self.cov):
            raise NotRepresentable("parameters are not a common-mean model with this covariance")
        return np.array([params.mean[0]])

    def default_start(self) -> np.ndarray:
        return np.zeros(1)

    def natural(self, theta) -> np.ndarray:
        return _check_theta(theta, 1).copy()

    def natural_jacobian(self, theta) -> np.ndarray:
        return np.eye(1)

    def variance_indices(self) -> list[int]:
        return []


def make_model(kind: str, p: int, var_names: tuple[str, ...] = (), waves: int | None = None):
    if kind == "saturated":
        return SaturatedModel(p, var_names)
    if kind == "lgm":
        waves = waves or p
        if waves != p:
            raise ShapeError(f"lgm with {waves} waves does not match {p} variables")
        return LatentGrowthModel(waves, var_names)
    raise ShapeError(f"unknown model kind {kind!r}")
