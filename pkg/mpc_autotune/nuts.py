"""No-U-Turn sampler on R^d with a diagonal metric.

Slice-variable tree doubling with uniform candidate selection, dual-averaging
step-size adaptation and one windowed estimate of the diagonal mass during
warmup. The target supplies ``log_prob_and_grad(z) -> (float, ndarray)``.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import tuner_config

LogProbGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]

DELTA_MAX = 1000.0
# warmup split: step size only / step size + mass window / step size only
_INIT_BUFFER = 0.15
_TERM_BUFFER = 0.10


@dataclass
class NutsStats:
    step_size: float
    mass_diag: np.ndarray
    divergences: int
    mean_accept: float
    mean_tree_depth: float
    n_samples: int

    @property
    def divergence_rate(self) -> float:
        return self.divergences / self.n_samples if self.n_samples else 0.0


@dataclass
class _Tree:
    z_minus: np.ndarray
    r_minus: np.ndarray
    g_minus: np.ndarray
    z_plus: np.ndarray
    r_plus: np.ndarray
    g_plus: np.ndarray
    z_prop: np.ndarray
    logp_prop: float
    g_prop: np.ndarray
    n_valid: int
    keep_going: bool
    alpha_sum: float
    n_alpha: int
    divergent: bool


class DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    def __init__(self, step_size: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * step_size)
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.h_bar = 0.0
        self.log_eps_bar = 0.0
        self.count = 0

    def update(self, accept: float) -> float:
        self.count += 1
        m = self.count
        w = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept)
        log_eps = self.mu - np.sqrt(m) / self.gamma * self.h_bar
        eta = m**-self.kappa
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar
        return float(np.exp(log_eps))

    @property
    def final_step_size(self) -> float:
        return float(np.exp(self.log_eps_bar))


class NutsSampler:
    def __init__(
        self,
        log_prob_and_grad: LogProbGrad,
        dim: int,
        max_tree_depth: int | None = None,
        target_accept: float | None = None,
    ):
        self.log_prob_and_grad = log_prob_and_grad
        self.dim = dim
        self.max_tree_depth = max_tree_depth or tuner_config.NUTS_MAX_TREE_DEPTH
        self.target_accept = target_accept or tuner_config.NUTS_TARGET_ACCEPT
        self.inv_mass = np.ones(dim)

    def _logp(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        logp, grad = self.log_prob_and_grad(z)
        if not np.isfinite(logp) or not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros_like(z)
        return float(logp), grad

    def _kinetic(self, r: np.ndarray) -> float:
        return 0.5 * float(r @ (self.inv_mass * r))

    def _leapfrog(self, z, r, g, eps):
        r = r + 0.5 * eps * g
        z = z + eps * self.inv_mass * r
        logp, g = self._logp(z)
        r = r + 0.5 * eps * g
        return z, r, g, logp

    def _initial_step_size(self, z, logp, g, rng) -> float:
        eps = 1.0
        r = rng.standard_normal(self.dim) / np.sqrt(self.inv_mass)
        joint0 = logp - self._kinetic(r)
        _, r1, _, logp1 = self._leapfrog(z, r, g, eps)
        log_ratio = logp1 - self._kinetic(r1) - joint0
        direction = 1.0 if (np.isfinite(log_ratio) and log_ratio > np.log(0.5)) else -1.0
        for _ in range(50):
            _, r1, _, logp1 = self._leapfrog(z, r, g, eps)
            log_ratio = logp1 - self._kinetic(r1) - joint0
            if not np.isfinite(log_ratio):
                log_ratio = -np.inf
            if direction * log_ratio <= direction * np.log(0.5):
                break
            eps *= 2.0**direction
        return float(eps)

    def _no_u_turn(self, z_minus, z_plus, r_minus, r_plus) -> bool:
        dz = z_plus - z_minus
        return bool(dz @ (self.inv_mass * r_minus) >= 0 and dz @ (self.inv_mass * r_plus) >= 0)

    def _build_tree(self, z, r, g, log_u, direction, depth, eps, joint0, rng) -> _Tree:
        if depth == 0:
            z1, r1, g1, logp1 = self._leapfrog(z, r, g, direction * eps)
            joint = logp1 - self._kinetic(r1)
            if not np.isfinite(joint):
                joint = -np.inf
            n_valid = int(log_u <= joint)
            keep_going = bool(log_u < joint + DELTA_MAX)
            alpha = float(np.exp(min(0.0, joint - joint0))) if np.isfinite(joint) else 0.0
            return _Tree(z1, r1, g1, z1, r1, g1, z1, logp1, g1, n_valid, keep_going, alpha, 1, not keep_going)

        inner = self._build_tree(z, r, g, log_u, direction, depth - 1, eps, joint0, rng)
        if not inner.keep_going:
            return inner
        if direction < 0:
            outer = self._build_tree(
                inner.z_minus, inner.r_minus, inner.g_minus, log_u, direction, depth - 1, eps, joint0, rng
            )
            inner.z_minus, inner.r_minus, inner.g_minus = outer.z_minus, outer.r_minus, outer.g_minus
        else:
            outer = self._build_tree(
                inner.z_plus, inner.r_plus, inner.g_plus, log_u, direction, depth - 1, eps, joint0, rng
            )
            inner.z_plus, inner.r_plus, inner.g_plus = outer.z_plus, outer.r_plus, outer.g_plus
        total = inner.n_valid + outer.n_valid
        if total > 0 and rng.random() < outer.n_valid / total:
            inner.z_prop, inner.logp_prop, inner.g_prop = outer.z_prop, outer.logp_prop, outer.g_prop
        inner.n_valid = total
        inner.alpha_sum += outer.alpha_sum
        inner.n_alpha += outer.n_alpha
        inner.divergent = inner.divergent or outer.divergent
        inner.keep_going = outer.keep_going and self._no_u_turn(
            inner.z_minus, inner.z_plus, inner.r_minus, inner.r_plus
        )
        return inner

    def _transition(self, z, logp, g, eps, rng):
        r0 = rng.standard_normal(self.dim) / np.sqrt(self.inv_mass)
        joint0 = logp - self._kinetic(r0)
        log_u = joint0 + np.log(1.0 - rng.random())
        z_minus = z_plus = z
        r_minus = r_plus = r0
        g_minus = g_plus = g
        z_new, logp_new, g_new = z, logp, g
        n_valid, depth = 1, 0
        alpha_sum, n_alpha, divergent = 0.0, 0, False
        keep_going = True
        while keep_going and depth < self.max_tree_depth:
            direction = 1 if rng.random() < 0.5 else -1
            if direction < 0:
                tree = self._build_tree(z_minus, r_minus, g_minus, log_u, -1, depth, eps, joint0, rng)
                z_minus, r_minus, g_minus = tree.z_minus, tree.r_minus, tree.g_minus
            else:
                tree = self._build_tree(z_plus, r_plus, g_plus, log_u, 1, depth, eps, joint0, rng)
                z_plus, r_plus, g_plus = tree.z_plus, tree.r_plus, tree.g_plus
            if tree.keep_going and rng.random() < min(1.0, tree.n_valid / n_valid):
                z_new, logp_new, g_new = tree.z_prop, tree.logp_prop, tree.g_prop
            n_valid += tree.n_valid
            alpha_sum += tree.alpha_sum
            n_alpha += tree.n_alpha
            divergent = divergent or tree.divergent
            keep_going = tree.keep_going and self._no_u_turn(z_minus, z_plus, r_minus, r_plus)
            depth += 1
        accept = alpha_sum / max(n_alpha, 1)
        return z_new, logp_new, g_new, accept, divergent, depth

    def run(self, z0: np.ndarray, warmup: int, samples: int, seed: int) -> tuple[np.ndarray, NutsStats]:
        rng = np.random.default_rng(seed)
        z = np.asarray(z0, dtype=float).copy()
        logp, g = self._logp(z)
        if not np.isfinite(logp):
            raise ValueError("initial point has non-finite log density")
        eps = self._initial_step_size(z, logp, g, rng)
        adapt = DualAveraging(eps, self.target_accept)

        window_start = int(_INIT_BUFFER * warmup)
        window_end = int((1.0 - _TERM_BUFFER) * warmup)
        window: list[np.ndarray] = []
        draws = np.empty((samples, self.dim))
        divergences = 0
        accepts, depths = [], []

        for it in range(warmup + samples):
            z, logp, g, accept, divergent, depth = self._transition(z, logp, g, eps, rng)
            if it < warmup:
                eps = adapt.update(accept)
                if window_start <= it < window_end:
                    window.append(z)
                if it == window_end - 1 and len(window) > 2:
                    var = np.var(np.array(window), axis=0)
                    n_win = len(window)
                    # shrink toward unit scale as Stan does for short windows
                    self.inv_mass = (n_win / (n_win + 5.0)) * var + 1e-3 * (5.0 / (n_win + 5.0))
                    adapt = DualAveraging(eps, self.target_accept)
                if it == warmup - 1:
                    eps = adapt.final_step_size
            else:
                draws[it - warmup] = z
                divergences += int(divergent)
                accepts.append(accept)
                depths.append(depth)

        stats = NutsStats(
            step_size=eps,
            mass_diag=1.0 / self.inv_mass,
            divergences=divergences,
            mean_accept=float(np.mean(accepts)) if accepts else 0.0,
            mean_tree_depth=float(np.mean(depths)) if depths else 0.0,
            n_samples=samples,
        )
        return draws, stats
