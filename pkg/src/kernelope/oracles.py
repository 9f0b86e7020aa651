"""Ground-truth oracles for the linear-Gaussian environment.

Because the transition is linear, the reward quadratic, and the policy linear,
every q-function is an exact quadratic form in (s, a) and every state marginal
is Gaussian. This module computes those closed forms (and their derivatives in
theta) by backward/forward recursion, alongside Monte Carlo value and
finite-difference gradient oracles that do not share that algebra.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .envs import BehaviorModel, DeterministicPolicy, EnvConfig, rollout_returns
from .kernels import KernelSpec


class NoAnalyticOracle(ValueError):
    """The environment/policy pair has no closed-form oracle."""


@dataclass(frozen=True)
class QuadraticForm:
    """q(s, a) = c0 + cs s + ca a + css s^2 + caa a^2 + csa s a."""

    c0: float = 0.0
    cs: float = 0.0
    ca: float = 0.0
    css: float = 0.0
    caa: float = 0.0
    csa: float = 0.0

    def __call__(self, s, a):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        return (
            self.c0
            + self.cs * s
            + self.ca * a
            + self.css * s * s
            + self.caa * a * a
            + self.csa * s * a
        )

    def da(self, s, a):
        """Partial derivative in the action."""
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        return self.ca + 2.0 * self.caa * a + self.csa * s

    def daa(self):
        """Second action derivative (constant for a quadratic)."""
        return 2.0 * self.caa

    def coeffs_in_a(self, s):
        """Per-state coefficients of a -> q(s, a): shape (len(s), 3)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return np.stack(
            [self.c0 + self.cs * s + self.css * s * s, self.ca + self.csa * s, np.full_like(s, self.caa)],
            axis=-1,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.c0, self.cs, self.ca, self.css, self.caa, self.csa])


@dataclass(frozen=True)
class _VForm:
    """v(s) = a0 + a1 s + a2 s^2."""

    a0: float = 0.0
    a1: float = 0.0
    a2: float = 0.0

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        return self.a0 + self.a1 * s + self.a2 * s * s


def _require_analytic(env: EnvConfig, policy: DeterministicPolicy) -> None:
    if env.transition != "linear_gaussian" or env.reward != "neg_square":
        raise NoAnalyticOracle(
            "no analytic oracle: requires linear_gaussian transition and neg_square reward"
        )
    if policy.form != "linear":
        raise NoAnalyticOracle("no analytic oracle: requires the linear policy form")


def _backward_chain(env: EnvConfig, theta: float, kappa: float):
    """Backward recursion for q_t/v_t and their theta-derivatives.

    kappa is the variance of the policy's action around tau(s): 0 for the
    deterministic policy, h^2/2 for the Gaussian-kernelized policy.
    Returns lists indexed by t = 1..H+1 (entry 0 unused, entry H+1 zero):
    (q, dq, v, dv) where dq/dv hold the coefficientwise theta-derivatives.
    """
    H = env.horizon
    ca_e, cs_e, sig2 = env.coeff_a, env.coeff_s, env.noise_std**2
    q: list[QuadraticForm] = [QuadraticForm()] * (H + 2)
    dq: list[QuadraticForm] = [QuadraticForm()] * (H + 2)
    v: list[_VForm] = [_VForm()] * (H + 2)
    dv: list[_VForm] = [_VForm()] * (H + 2)
    for t in range(H, 0, -1):
        A, B, C = v[t + 1].a0, v[t + 1].a1, v[t + 1].a2
        dA, dB, dC = dv[t + 1].a0, dv[t + 1].a1, dv[t + 1].a2
        q[t] = QuadraticForm(
            c0=A + (C - 1.0) * sig2,
            cs=B * cs_e,
            ca=B * ca_e,
            css=(C - 1.0) * cs_e**2,
            caa=(C - 1.0) * ca_e**2,
            csa=2.0 * (C - 1.0) * ca_e * cs_e,
        )
        dq[t] = QuadraticForm(
            c0=dA + dC * sig2,
            cs=dB * cs_e,
            ca=dB * ca_e,
            css=dC * cs_e**2,
            caa=dC * ca_e**2,
            csa=2.0 * dC * ca_e * cs_e,
        )
        g = q[t]
        dg = dq[t]
        v[t] = _VForm(
            a0=g.c0 + g.caa * kappa,
            a1=g.cs + g.ca * theta,
            a2=g.css + g.caa * theta**2 + g.csa * theta,
        )
        dv[t] = _VForm(
            a0=dg.c0 + dg.caa * kappa,
            a1=dg.cs + dg.ca * theta + g.ca,
            a2=dg.css + dg.caa * theta**2 + 2.0 * g.caa * theta + dg.csa * theta + g.csa,
        )
    return q, dq, v, dv


def analytic_q(env: EnvConfig, policy: DeterministicPolicy, t: int) -> QuadraticForm:
    """Exact quadratic coefficients of q_t under the deterministic policy."""
    _require_analytic(env, policy)
    if not 1 <= t <= env.horizon + 1:
        raise ValueError(f"t must be in 1..{env.horizon + 1}")
    q, _, _, _ = _backward_chain(env, policy.theta, kappa=0.0)
    return q[t]


def analytic_value(env: EnvConfig, policy: DeterministicPolicy, kappa: float = 0.0) -> float:
    """Exact J = E[v_1(s_1)] (kappa > 0 gives the kernelized-policy value)."""
    _require_analytic(env, policy)
    _, _, v, _ = _backward_chain(env, policy.theta, kappa)
    m, var = env.init_moments()
    return v[1].a0 + v[1].a1 * m + v[1].a2 * (m * m + var)


def analytic_gradient(env: EnvConfig, policy: DeterministicPolicy, kappa: float = 0.0) -> float:
    """Exact dJ/dtheta from the coefficient-derivative recursion."""
    _require_analytic(env, policy)
    _, _, _, dv = _backward_chain(env, policy.theta, kappa)
    m, var = env.init_moments()
    return dv[1].a0 + dv[1].a1 * m + dv[1].a2 * (m * m + var)


def oracle_value(
    env: EnvConfig, policy: DeterministicPolicy, n_mc: int, seed: int
) -> tuple[float, float]:
    """On-policy Monte Carlo estimate of J with its standard error."""
    if n_mc < 2:
        raise ValueError("n_mc must be at least 2")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    returns = rollout_returns(env, policy, n_mc, rng)
    return float(returns.mean()), float(returns.std(ddof=1) / math.sqrt(n_mc))


def oracle_gradient(
    env: EnvConfig,
    policy: DeterministicPolicy,
    n_mc: int,
    seed: int,
    delta: float = 1e-2,
) -> np.ndarray:
    """Central finite difference of oracle_value with common random numbers."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    j_plus, _ = oracle_value(env, policy.with_theta(policy.theta + delta), n_mc, seed)
    j_minus, _ = oracle_value(env, policy.with_theta(policy.theta - delta), n_mc, seed)
    return np.array([(j_plus - j_minus) / (2.0 * delta)])


# ---------------------------------------------------------------------------
# Gaussian state-marginal chains and the exact nuisance bundle
# ---------------------------------------------------------------------------


def _marginal_chain_behavior(env: EnvConfig, behavior: BehaviorModel):
    """Means/variances of s_t under the behavior policy, t = 1..H."""
    m, var = env.init_moments()
    coef = env.coeff_a * behavior.mean_coeff + env.coeff_s
    shock = env.coeff_a**2 * behavior.std**2 + env.noise_std**2
    means, variances = [m], [var]
    for _ in range(env.horizon - 1):
        m = coef * m
        var = coef**2 * var + shock
        means.append(m)
        variances.append(var)
    return np.array(means), np.array(variances)


def _marginal_chain_eval(env: EnvConfig, theta: float, kappa: float):
    """Means/variances of s_t under the (kernelized) evaluation policy plus
    their theta-derivatives, t = 1..H."""
    m, var = env.init_moments()
    dm, dvar = 0.0, 0.0
    shock = env.coeff_a**2 * kappa + env.noise_std**2
    means, variances, dmeans, dvariances = [m], [var], [dm], [dvar]
    for _ in range(env.horizon - 1):
        coef = env.coeff_a * theta + env.coeff_s
        m_new = coef * m
        dm_new = env.coeff_a * m + coef * dm
        var_new = coef**2 * var + shock
        dvar_new = 2.0 * coef * env.coeff_a * var + coef**2 * dvar
        m, dm, var, dvar = m_new, dm_new, var_new, dvar_new
        means.append(m)
        variances.append(var)
        dmeans.append(dm)
        dvariances.append(dvar)
    return np.array(means), np.array(variances), np.array(dmeans), np.array(dvariances)


def _normal_pdf(x, mean, var):
    return np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2.0 * math.pi * var)


class LinearGaussianBundle:
    """Exact nuisance functions for the linear-Gaussian environment.

    Implements the nuisance interface the estimators consume (q, q_a, dq, v,
    dv, w, dw, pib, pib_da, q_conv_kh, q_conv_kh1) from the closed-form
    recursions, for either the kernelized ("kernelized") or the plug-in
    deterministic ("deterministic") nuisance convention. Gaussian kernel only:
    the kernelized q stays quadratic only for a Gaussian action kernel.
    """

    def __init__(
        self,
        env: EnvConfig,
        behavior: BehaviorModel,
        policy: DeterministicPolicy,
        spec: KernelSpec,
        h: float,
        mode: str = "kernelized",
    ):
        if spec.family != "gaussian":
            raise NoAnalyticOracle("exact nuisance bundle requires the gaussian kernel")
        if mode not in ("kernelized", "deterministic"):
            raise ValueError(f"bad mode {mode!r}")
        _require_analytic(env, policy)
        self.env = env
        self.behavior = behavior
        self.policy = policy
        self.spec = spec
        self.h = float(h)
        self.mode = mode
        self.horizon = env.horizon
        self._conv_kappa = 0.5 * self.h * self.h
        kappa = self._conv_kappa if mode == "kernelized" else 0.0
        self._q, self._dq, self._v, self._dv = _backward_chain(env, policy.theta, kappa)
        mk, vk, dmk, dvk = _marginal_chain_eval(env, policy.theta, kappa)
        mb, vb = _marginal_chain_behavior(env, behavior)
        self._eval_marginal = (mk, vk, dmk, dvk)
        self._behavior_marginal = (mb, vb)

    # -- value-side nuisances --

    def q(self, t: int, s, a):
        return self._q[t](s, a)

    def q_a(self, t: int, s, a):
        return self._q[t].da(s, a)

    def dq(self, t: int, s, a):
        return self._dq[t](s, a)

    def v(self, t: int, s):
        return self._v[t](s)

    def dv(self, t: int, s):
        return self._dv[t](s)

    def q_conv_kh(self, t: int, s):
        """int q_t(s, a) K_h(a - tau(s)) da, exact (A ~ N(tau, h^2/2))."""
        g = self._q[t]
        tau = self.policy.tau(s)
        return g(s, tau) + g.caa * self._conv_kappa

    def q_conv_kh1(self, t: int, s):
        """int q_t(s, a) K1_h(a - tau(s)) da = E[q_a(s, A)] = q_a(s, tau)."""
        tau = self.policy.tau(s)
        return self._q[t].da(s, tau)

    def dq_conv_kh(self, t: int, s):
        g = self._dq[t]
        tau = self.policy.tau(s)
        return g(s, tau) + g.caa * self._conv_kappa

    # -- weight-side nuisances --

    def w(self, t: int, s):
        s = np.asarray(s, dtype=float)
        mk, vk, _, _ = self._eval_marginal
        mb, vb = self._behavior_marginal
        if t == 1:
            return np.ones_like(s)
        if vk[t - 1] <= 0 or vb[t - 1] <= 0:
            raise NoAnalyticOracle("degenerate state marginal; w undefined")
        return _normal_pdf(s, mk[t - 1], vk[t - 1]) / _normal_pdf(s, mb[t - 1], vb[t - 1])

    def dw(self, t: int, s):
        s = np.asarray(s, dtype=float)
        if t == 1:
            return np.zeros_like(s)
        mk, vk, dmk, dvk = self._eval_marginal
        m, var, dm, dvar = mk[t - 1], vk[t - 1], dmk[t - 1], dvk[t - 1]
        dlog = (s - m) / var * dm + (-0.5 / var + 0.5 * (s - m) ** 2 / var**2) * dvar
        return self.w(t, s) * dlog

    # -- behavior policy --

    def pib(self, t: int, s, a):
        return self.behavior.density(s, a)

    def pib_da(self, t: int, s, a):
        return self.behavior.density_da(s, a)
