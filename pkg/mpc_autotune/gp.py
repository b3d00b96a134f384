"""Matérn-5/2 GP surrogate with SAAS shrinkage priors.

Inputs live in the unit cube, outputs are standardized, the mean function is
zero and the noise variance is fixed. The sampler works on the unconstrained
vector ``z = [log tau, log rho_1..rho_D, log outputscale]`` where
``rho_d = 1 / lengthscale_d**2`` is the inverse squared lengthscale:

    tau   ~ HalfCauchy(0.1)
    rho_d ~ HalfCauchy(tau)
    log outputscale ~ Normal(0, 1)
"""

from dataclasses import dataclass, field
from functools import cached_property
import json
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.stats import halfcauchy, norm

from .config import tuner_config
from .log import logger
from .nuts import NutsSampler
from .utils.core import ErrorCode, TunerException

SQRT5 = np.sqrt(5.0)
NU = 2.5


class TrialDataset:
    """Observations (theta in [0, 1]^D, y) with standardized outputs."""

    def __init__(self, inputs, outputs):
        X = np.atleast_2d(np.asarray(inputs, dtype=float))
        y = np.asarray(outputs, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise TunerException(
                f"{X.shape[0]} inputs but {y.shape[0]} outputs", code=ErrorCode.DIMENSION_MISMATCH
            )
        if X.size and (X.min() < 0.0 or X.max() > 1.0):
            raise TunerException("inputs must lie in the unit cube", code=ErrorCode.INVALID_PARAMETER)
        if not np.all(np.isfinite(y)):
            raise TunerException("outputs must be finite", code=ErrorCode.INVALID_PARAMETER)
        self.X = X
        self.y = y
        self.y_mean = float(np.mean(y)) if y.size else 0.0
        std = float(np.std(y)) if y.size else 1.0
        self.y_scale = std if std > 0.0 else 1.0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def standardize(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_scale

    def unstandardize(self, y_std):
        return np.asarray(y_std, dtype=float) * self.y_scale + self.y_mean

    @cached_property
    def y_std(self) -> np.ndarray:
        return self.standardize(self.y)

    @cached_property
    def sq_diffs(self) -> np.ndarray:
        """(D, n, n) per-dimension squared input differences."""
        diff = self.X.T[:, :, None] - self.X.T[:, None, :]
        return diff**2

    def require_fit(self) -> None:
        if self.n < 2:
            raise TunerException("at least 2 observations are needed to fit", code=ErrorCode.SURROGATE_FIT_FAILED)


@dataclass(frozen=True, eq=False)
class KernelHyperparams:
    outputscale: float
    lengthscales: np.ndarray
    noise: float = tuner_config.GP_NOISE
    nu: float = field(default=NU, init=False)

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=float).reshape(-1)
        object.__setattr__(self, "lengthscales", ls)
        if not self.outputscale > 0 or not np.all(ls > 0) or not self.noise > 0:
            raise TunerException("kernel hyperparameters must be positive", code=ErrorCode.INVALID_PARAMETER)

    @property
    def inverse_sq_lengthscales(self) -> np.ndarray:
        return self.lengthscales**-2


@dataclass(frozen=True, eq=False)
class PosteriorSamples:
    hypers: list[KernelHyperparams]
    taus: np.ndarray
    divergences: int = 0
    step_size: float = float("nan")

    def __post_init__(self):
        if not self.hypers:
            raise TunerException("posterior sample set is empty", code=ErrorCode.SURROGATE_FIT_FAILED)

    def __len__(self) -> int:
        return len(self.hypers)

    def lengthscale_medians(self) -> np.ndarray:
        return np.median(np.array([h.lengthscales for h in self.hypers]), axis=0)

    def to_json(self, labels: list[str] | None = None) -> dict:
        data = {
            "outputscale": [h.outputscale for h in self.hypers],
            "lengthscales": [h.lengthscales.tolist() for h in self.hypers],
            "tau": [float(t) for t in self.taus],
            "lengthscale_median": self.lengthscale_medians().tolist(),
            "divergences": self.divergences,
        }
        if labels is not None:
            data["labels"] = list(labels)
        return data

    def dump(self, path: str | Path, labels: list[str] | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_json(labels), indent=2), encoding="utf-8")


# --------------------------------------------------------------------------
# kernel and exact GP
# --------------------------------------------------------------------------


def _matern_from_r(r: np.ndarray, outputscale: float) -> np.ndarray:
    return outputscale * (1.0 + SQRT5 * r + (5.0 / 3.0) * r**2) * np.exp(-SQRT5 * r)


def matern52(theta_a, theta_b, hyper: KernelHyperparams) -> float:
    """Matérn-5/2 covariance of two points."""
    a, b = np.asarray(theta_a, dtype=float), np.asarray(theta_b, dtype=float)
    if a.shape != b.shape or a.shape[-1] != hyper.lengthscales.shape[0]:
        raise TunerException("point dimensions do not match the lengthscales", code=ErrorCode.DIMENSION_MISMATCH)
    r = np.sqrt(np.sum(((a - b) / hyper.lengthscales) ** 2))
    return float(_matern_from_r(r, hyper.outputscale))


def kernel_matrix(A: np.ndarray, B: np.ndarray, hyper: KernelHyperparams) -> np.ndarray:
    diff = (A[:, None, :] - B[None, :, :]) / hyper.lengthscales
    r = np.sqrt(np.sum(diff**2, axis=-1))
    return _matern_from_r(r, hyper.outputscale)


def _cholesky(K: np.ndarray):
    """Cholesky with jitter escalation up to the configured maximum."""
    jitter = 0.0
    max_jitter = tuner_config.GP_MAX_JITTER
    while True:
        try:
            factor = cho_factor(K + jitter * np.eye(K.shape[0]), lower=True)
            return factor, jitter
        except np.linalg.LinAlgError as e:
            jitter = 1e-10 if jitter == 0.0 else jitter * 10.0
            if jitter > max_jitter:
                raise TunerException(
                    "kernel matrix not positive-definite within the jitter budget",
                    code=ErrorCode.KERNEL_NOT_PD,
                    cause=e,
                ) from e


class _Fit:
    """Factorization of K + noise I for one hyperparameter setting."""

    def __init__(self, data: TrialDataset, hyper: KernelHyperparams):
        self.data, self.hyper = data, hyper
        K = kernel_matrix(data.X, data.X, hyper) + hyper.noise * np.eye(data.n)
        self.factor, self.jitter = _cholesky(K)
        self.alpha = cho_solve(self.factor, data.y_std)

    def predict(self, X_query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        K_s = kernel_matrix(X_query, self.data.X, self.hyper)
        mean = K_s @ self.alpha
        v = solve_triangular(self.factor[0], K_s.T, lower=True)
        var = self.hyper.outputscale - np.sum(v**2, axis=0)
        return mean, np.maximum(var, 0.0)


def _as_query(data: TrialDataset, theta_query) -> tuple[np.ndarray, bool]:
    Xq = np.asarray(theta_query, dtype=float)
    single = Xq.ndim == 1
    Xq = np.atleast_2d(Xq)
    if Xq.shape[1] != data.dim:
        raise TunerException(f"query has {Xq.shape[1]} dims, data has {data.dim}", code=ErrorCode.DIMENSION_MISMATCH)
    return Xq, single


def gp_posterior(data: TrialDataset, hyper: KernelHyperparams, theta_query):
    """Posterior mean and variance (standardized units); a 1-D query returns scalars."""
    Xq, single = _as_query(data, theta_query)
    mean, var = _Fit(data, hyper).predict(Xq)
    return (float(mean[0]), float(var[0])) if single else (mean, var)


class MixturePosterior:
    """Per-sample factorizations kept for repeated queries (acquisition search)."""

    def __init__(self, samples: PosteriorSamples, data: TrialDataset):
        self.data = data
        self.fits = [_Fit(data, hyper) for hyper in samples.hypers]

    def predict(self, theta_query):
        Xq, single = _as_query(self.data, theta_query)
        means, second = [], []
        for fit in self.fits:
            m, v = fit.predict(Xq)
            means.append(m)
            second.append(v + m**2)
        mean = np.mean(means, axis=0)
        var = np.maximum(np.mean(second, axis=0) - mean**2, 0.0)
        return (float(mean[0]), float(var[0])) if single else (mean, var)


def predict_mixture(samples: PosteriorSamples, data: TrialDataset, theta_query):
    """Moments of the equal-weight mixture over hyperparameter samples."""
    return MixturePosterior(samples, data).predict(theta_query)


# --------------------------------------------------------------------------
# likelihood, priors and their gradients
# --------------------------------------------------------------------------


def log_marginal_likelihood_and_grad(
    data: TrialDataset, rho: np.ndarray, outputscale: float, noise: float | None = None
) -> tuple[float, np.ndarray, float]:
    """log p(y | rho, outputscale) and its gradient in (log rho, log outputscale)."""
    noise = tuner_config.GP_NOISE if noise is None else noise
    D2 = data.sq_diffs
    r2 = np.einsum("d,dij->ij", rho, D2)
    r = np.sqrt(np.maximum(r2, 0.0))
    e = np.exp(-SQRT5 * r)
    K_signal = outputscale * (1.0 + SQRT5 * r + (5.0 / 3.0) * r2) * e
    dK_dr2 = -(5.0 / 6.0) * outputscale * (1.0 + SQRT5 * r) * e
    n = data.n
    factor, _ = _cholesky(K_signal + noise * np.eye(n))
    L = factor[0]
    alpha = cho_solve(factor, data.y_std)
    lml = -0.5 * data.y_std @ alpha - np.sum(np.log(np.diag(np.tril(L)))) - 0.5 * n * np.log(2 * np.pi)
    K_inv = cho_solve(factor, np.eye(n))
    W = np.outer(alpha, alpha) - K_inv
    grad_log_rho = 0.5 * rho * np.einsum("ij,dij->d", W * dK_dr2, D2)
    grad_log_outputscale = 0.5 * float(np.sum(W * K_signal))
    return float(lml), grad_log_rho, grad_log_outputscale


def log_marginal_likelihood(data: TrialDataset, hyper: KernelHyperparams) -> float:
    return log_marginal_likelihood_and_grad(data, hyper.inverse_sq_lengthscales, hyper.outputscale, hyper.noise)[0]


def log_prior(hyper: KernelHyperparams, tau_saas: float) -> float:
    """SAAS prior density in the natural parameters (no change-of-variables term)."""
    scale = tuner_config.SAAS_TAU_SCALE
    value = halfcauchy.logpdf(tau_saas, scale=scale)
    value += np.sum(halfcauchy.logpdf(hyper.inverse_sq_lengthscales, scale=tau_saas))
    value += norm.logpdf(np.log(hyper.outputscale))
    return float(value)


def _unpack_z(z: np.ndarray) -> tuple[float, np.ndarray, float]:
    return float(np.exp(z[0])), np.exp(z[1:-1]), float(np.exp(z[-1]))


def pack_z(hyper: KernelHyperparams, tau_saas: float) -> np.ndarray:
    return np.concatenate([[np.log(tau_saas)], np.log(hyper.inverse_sq_lengthscales), [np.log(hyper.outputscale)]])


def unpack_z(z: np.ndarray, noise: float | None = None) -> tuple[KernelHyperparams, float]:
    tau, rho, outputscale = _unpack_z(np.asarray(z, dtype=float))
    noise = tuner_config.GP_NOISE if noise is None else noise
    return KernelHyperparams(outputscale, rho**-0.5, noise), tau


def log_density_and_grad(z: np.ndarray, data: TrialDataset) -> tuple[float, np.ndarray]:
    """Unnormalized log posterior over z, including the log-transform Jacobian."""
    z = np.asarray(z, dtype=float)
    tau, rho, outputscale = _unpack_z(z)
    scale = tuner_config.SAAS_TAU_SCALE
    lml, g_rho, g_out = log_marginal_likelihood_and_grad(data, rho, outputscale)

    u_tau = (tau / scale) ** 2
    u_rho = (rho / tau) ** 2
    log_p = lml
    log_p += np.log(2.0 / (np.pi * scale)) - np.log1p(u_tau) + z[0]
    log_p += np.sum(np.log(2.0 / (np.pi * tau)) - np.log1p(u_rho) + z[1:-1])
    log_p += -0.5 * z[-1] ** 2 - 0.5 * np.log(2 * np.pi)

    grad = np.empty_like(z)
    grad[0] = 1.0 - 2.0 * u_tau / (1.0 + u_tau) + np.sum(-1.0 + 2.0 * u_rho / (1.0 + u_rho))
    grad[1:-1] = g_rho + 1.0 - 2.0 * u_rho / (1.0 + u_rho)
    grad[-1] = g_out - z[-1]
    return float(log_p), grad


def log_posterior_density(data: TrialDataset, hyper: KernelHyperparams, tau_saas: float) -> float:
    """Log posterior (up to a constant) in the log-space parameterization used for sampling."""
    if tau_saas <= 0:
        raise TunerException("tau must be positive", code=ErrorCode.INVALID_PARAMETER)
    value, _ = log_density_and_grad(pack_z(hyper, tau_saas), data)
    if not np.isfinite(value):
        raise TunerException("log posterior density is not finite", code=ErrorCode.SURROGATE_FIT_FAILED)
    return value


def sample_hyperparams(
    data: TrialDataset,
    warmup: int | None = None,
    samples: int | None = None,
    thin: int | None = None,
    seed: int = 0,
) -> PosteriorSamples:
    """NUTS over the SAAS posterior; keeps every ``thin``-th draw."""
    data.require_fit()
    d_warm, d_samp, d_thin = tuner_config.get_nuts_counts()
    warmup = d_warm if warmup is None else warmup
    samples = d_samp if samples is None else samples
    thin = d_thin if thin is None else thin
    if samples < thin:
        raise TunerException("need at least one retained sample", code=ErrorCode.INVALID_PARAMETER)

    z0 = np.concatenate([[np.log(tuner_config.SAAS_TAU_SCALE)], np.zeros(data.dim), [0.0]])
    sampler = NutsSampler(lambda z: log_density_and_grad(z, data), z0.size)
    try:
        draws, stats = sampler.run(z0, warmup, samples, seed)
    except TunerException:
        raise
    except (ValueError, np.linalg.LinAlgError) as e:
        raise TunerException(f"NUTS failed: {e}", code=ErrorCode.SURROGATE_FIT_FAILED, cause=e) from e

    if stats.divergence_rate > tuner_config.NUTS_DIVERGENCE_WARN:
        logger.warning(
            f"NUTS divergence rate {stats.divergence_rate:.1%} exceeds "
            f"{tuner_config.NUTS_DIVERGENCE_WARN:.0%}",
            command="surrogate",
        )
    kept = draws[thin - 1 :: thin]
    hypers, taus = [], []
    for z in kept:
        hyper, tau = unpack_z(z)
        hypers.append(hyper)
        taus.append(tau)
    logger.debug(
        f"NUTS kept {len(hypers)} draws, step size {stats.step_size:.3g}, "
        f"mean depth {stats.mean_tree_depth:.1f}",
        command="surrogate",
    )
    return PosteriorSamples(hypers, np.array(taus), stats.divergences, stats.step_size)
