"""Cross-fitted nuisance estimation via polynomial sieve ridge regressions.

Implements the backward fitted-q recursion, its theta-gradient analogue, and
the marginal-ratio regressions (w and its theta-gradient), all per fold and
per timestep, plus an optional Gaussian conditional model for the behavior
policy. Fitted nuisances are exposed to the estimators through bundle objects
with a common duck-typed interface:

    q(t, s, a), q_a(t, s, a), dq(t, s, a)        value nuisances
    v(t, s), dv(t, s)                            policy-averaged values (t up to H+1)
    q_conv_kh(t, s), q_conv_kh1(t, s)            kernel convolutions of q
    w(t, s), dw(t, s)                            marginal density ratios
    pib(t, s, a), pib_da(t, s, a)                behavior density and its a-derivative

plus ``mode`` ("kernelized" or "deterministic") and ``horizon`` attributes.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .envs import BehaviorModel, Dataset, DeterministicPolicy
from .kernels import (
    KernelSpec,
    compact_poly_conv,
    gaussian_poly_conv,
    gaussian_poly_conv_quadrature,
    kh,
    kh1,
)

DENSITY_FLOOR = 1e-3   # lower clip for any density used in a denominator
W_CLIP = (0.0, 1e3)    # range for predicted marginal ratios


class SingularFitError(np.linalg.LinAlgError):
    """Normal equations are singular; refit with ridge > 0."""


def _state_action_exponents(degree: int) -> list[tuple[int, int]]:
    return [(g - j, j) for g in range(degree + 1) for j in range(g + 1)]


@dataclass
class SieveModel:
    """Polynomial least-squares model in s or (s, a) with an optional ridge."""

    degree: int
    arity: str  # "state" | "state_action"
    coefficients: np.ndarray
    ridge: float

    @property
    def exponents(self) -> list:
        if self.arity == "state":
            return list(range(self.degree + 1))
        return _state_action_exponents(self.degree)

    @classmethod
    def n_terms(cls, degree: int, arity: str) -> int:
        if arity == "state":
            return degree + 1
        return (degree + 1) * (degree + 2) // 2

    @classmethod
    def features(cls, degree: int, arity: str, s, a=None) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        s_pow = np.vander(s, degree + 1, increasing=True)
        if arity == "state":
            return s_pow
        a = np.asarray(a, dtype=float)
        a_pow = np.vander(a, degree + 1, increasing=True)
        cols = [s_pow[:, i] * a_pow[:, j] for i, j in _state_action_exponents(degree)]
        return np.stack(cols, axis=1)

    @classmethod
    def fit(cls, degree: int, arity: str, y, s, a=None, ridge: float = 0.0) -> "SieveModel":
        X = cls.features(degree, arity, s, a)
        y = np.asarray(y, dtype=float)
        p = X.shape[1]
        gram = X.T @ X
        if ridge > 0.0:
            gram = gram + ridge * np.eye(p)
        elif np.linalg.matrix_rank(X) < p:
            raise SingularFitError(
                "singular normal equations with ridge=0; refit with ridge > 0"
            )
        try:
            beta = np.linalg.solve(gram, X.T @ y)
        except np.linalg.LinAlgError as exc:
            raise SingularFitError(
                "singular normal equations with ridge=0; refit with ridge > 0"
            ) from exc
        return cls(degree, arity, beta, float(ridge))

    @classmethod
    def constant(cls, value: float, degree: int, arity: str) -> "SieveModel":
        beta = np.zeros(cls.n_terms(degree, arity))
        beta[0] = value
        return cls(degree, arity, beta, 0.0)

    def predict(self, s, a=None) -> np.ndarray:
        X = self.features(self.degree, self.arity, s, a)
        return X @ self.coefficients

    def predict_da(self, s, a) -> np.ndarray:
        """Partial derivative in the action (state_action models only)."""
        if self.arity != "state_action":
            raise ValueError("predict_da requires a state_action model")
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        out = np.zeros_like(s)
        for beta, (i, j) in zip(self.coefficients, self.exponents):
            if j >= 1:
                out = out + beta * j * s**i * a ** (j - 1)
        return out

    def coeffs_in_a(self, s) -> np.ndarray:
        """Coefficients of the action polynomial a -> f(s, a), shape (n, degree+1)."""
        if self.arity != "state_action":
            raise ValueError("coeffs_in_a requires a state_action model")
        s = np.atleast_1d(np.asarray(s, dtype=float))
        s_pow = np.vander(s, self.degree + 1, increasing=True)
        out = np.zeros((len(s), self.degree + 1))
        for beta, (i, j) in zip(self.coefficients, self.exponents):
            out[:, j] += beta * s_pow[:, i]
        return out


FittedOrKnownBehavior = Union[BehaviorModel, "FittedBehavior"]


@dataclass(frozen=True)
class FittedBehavior:
    """Gaussian conditional a | s ~ N(mean(s), std^2) with a polynomial mean."""

    mean_model: SieveModel
    std: float
    known: bool = False

    def mean(self, s):
        return self.mean_model.predict(s)

    def density(self, s, a):
        z = (np.asarray(a, dtype=float) - self.mean(s)) / self.std
        return np.exp(-0.5 * z * z) / (self.std * math.sqrt(2.0 * math.pi))

    def density_da(self, s, a):
        a = np.asarray(a, dtype=float)
        return self.density(s, a) * (self.mean(s) - a) / (self.std**2)


def default_ridge(n_fit: int) -> float:
    return 1e-6 * n_fit


def crossfold_split(data: Dataset, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random disjoint two-fold split of trajectory indices, |fold1| = ceil(n/2)."""
    if data.n < 2:
        raise ValueError("cross-fitting requires at least 2 trajectories")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    perm = rng.permutation(data.n)
    cut = (data.n + 1) // 2
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def _conv(model: SieveModel, s, tau, spec: KernelSpec, h: float, order: int, method: str):
    coeffs = model.coeffs_in_a(s)
    if spec.family == "gaussian":
        if method == "analytic":
            return gaussian_poly_conv(coeffs, tau, h, order)
        return gaussian_poly_conv_quadrature(coeffs, tau, h, order)
    return compact_poly_conv(coeffs, tau, h, spec, order)


def fit_q(
    data: Dataset,
    idx: np.ndarray,
    policy: DeterministicPolicy,
    mode: str,
    spec: KernelSpec,
    h: float,
    degree: int = 2,
    ridge: Optional[float] = None,
    integral_method: str = "analytic",
) -> list[SieveModel]:
    """Backward fitted-q pass; models[t-1] is q_t, regressed on (s_t, a_t)."""
    if degree < 1:
        raise ValueError("degree must be at least 1")
    S, A, R = data.states[idx], data.actions[idx], data.rewards[idx]
    H = data.horizon
    lam = default_ridge(len(idx)) if ridge is None else ridge
    models: list[Optional[SieveModel]] = [None] * H
    for t in range(H, 0, -1):
        if t == H:
            v_next = 0.0
        else:
            s_next = S[:, t]
            nxt = models[t]  # q_{t+1}
            if mode == "kernelized":
                v_next = _conv(nxt, s_next, policy.tau(s_next), spec, h, 0, integral_method)
            else:
                v_next = nxt.predict(s_next, policy.tau(s_next))
        y = R[:, t - 1] + v_next
        models[t - 1] = SieveModel.fit(degree, "state_action", y, S[:, t - 1], A[:, t - 1], lam)
    return models


def fit_dq(
    data: Dataset,
    idx: np.ndarray,
    q_models: list[SieveModel],
    policy: DeterministicPolicy,
    mode: str,
    spec: KernelSpec,
    h: float,
    degree: int = 2,
    ridge: Optional[float] = None,
    integral_method: str = "analytic",
) -> list[SieveModel]:
    """Backward pass for the theta-gradient of q, regressing dv_{t+1} targets."""
    S, A = data.states[idx], data.actions[idx]
    H = data.horizon
    lam = default_ridge(len(idx)) if ridge is None else ridge
    models: list[Optional[SieveModel]] = [None] * H
    for t in range(H, 0, -1):
        if t == H:
            target = np.zeros(len(idx))
        else:
            s_next = S[:, t]
            tau_next = policy.tau(s_next)
            gtau_next = policy.grad_tau(s_next)
            if mode == "kernelized":
                target = _conv(models[t], s_next, tau_next, spec, h, 0, integral_method) + (
                    _conv(q_models[t], s_next, tau_next, spec, h, 1, integral_method) * gtau_next
                )
            else:
                target = models[t].predict(s_next, tau_next) + q_models[t].predict_da(
                    s_next, tau_next
                ) * gtau_next
        models[t - 1] = SieveModel.fit(degree, "state_action", target, S[:, t - 1], A[:, t - 1], lam)
    return models


def _stepwise_ratios(
    data: Dataset,
    idx: np.ndarray,
    policy: DeterministicPolicy,
    spec: KernelSpec,
    h: float,
    behavior: FittedOrKnownBehavior,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-(trajectory, t) kernel ratio K_h(a - tau(s)) / pib(a | s) and residual u."""
    S, A = data.states[idx], data.actions[idx]
    u = A - policy.tau(S)
    dens = np.maximum(behavior.density(S, A), DENSITY_FLOOR)
    return kh(spec, h, u) / dens, u


def fit_w(
    data: Dataset,
    idx: np.ndarray,
    policy: DeterministicPolicy,
    spec: KernelSpec,
    h: float,
    behavior: FittedOrKnownBehavior,
    degree: int = 2,
    ridge: Optional[float] = None,
) -> list[SieveModel]:
    """Marginal-ratio regressions: lambda_{j-1} on s_j monomials; w_1 is 1."""
    S = data.states[idx]
    H = data.horizon
    lam_ridge = default_ridge(len(idx)) if ridge is None else ridge
    ratios, _ = _stepwise_ratios(data, idx, policy, spec, h, behavior)
    cum = np.cumprod(ratios, axis=1)
    models: list[SieveModel] = [SieveModel.constant(1.0, degree, "state")]
    for j in range(2, H + 1):
        models.append(SieveModel.fit(degree, "state", cum[:, j - 2], S[:, j - 1], ridge=lam_ridge))
    return models


def fit_dw(
    data: Dataset,
    idx: np.ndarray,
    policy: DeterministicPolicy,
    spec: KernelSpec,
    h: float,
    behavior: FittedOrKnownBehavior,
    degree: int = 2,
    ridge: Optional[float] = None,
) -> list[SieveModel]:
    """Score-weighted ratio regressions for the theta-gradient of w; dw_1 is 0.

    The kernelized policy score is K1_h(u)/K_h(u) * grad_tau(s) with the K_h
    denominator floored at DENSITY_FLOOR.
    """
    S = data.states[idx]
    H = data.horizon
    lam_ridge = default_ridge(len(idx)) if ridge is None else ridge
    ratios, u = _stepwise_ratios(data, idx, policy, spec, h, behavior)
    cum = np.cumprod(ratios, axis=1)
    scores = kh1(spec, h, u) / np.maximum(kh(spec, h, u), DENSITY_FLOOR)
    scores = scores * policy.grad_tau(S)
    score_cum = np.cumsum(scores, axis=1)
    models: list[SieveModel] = [SieveModel.constant(0.0, degree, "state")]
    for j in range(2, H + 1):
        target = cum[:, j - 2] * score_cum[:, j - 2]
        models.append(SieveModel.fit(degree, "state", target, S[:, j - 1], ridge=lam_ridge))
    return models


def fit_behavior(
    data: Dataset,
    idx: np.ndarray,
    degree: int = 1,
    ridge: Optional[float] = None,
) -> FittedBehavior:
    """Gaussian conditional density: polynomial mean, pooled residual std."""
    s = data.states[idx].ravel()
    a = data.actions[idx].ravel()
    lam = default_ridge(len(s)) if ridge is None else ridge
    mean_model = SieveModel.fit(degree, "state", a, s, ridge=lam)
    resid = a - mean_model.predict(s)
    dof = max(len(s) - SieveModel.n_terms(degree, "state"), 1)
    var = float(resid @ resid) / dof
    if var <= 0.0:
        raise ValueError("zero residual variance; cannot form a conditional density")
    return FittedBehavior(mean_model, math.sqrt(var))


class SieveBundle:
    """Nuisance interface backed by fitted sieve models (one fold's models)."""

    def __init__(
        self,
        horizon: int,
        mode: str,
        spec: KernelSpec,
        h: float,
        policy: DeterministicPolicy,
        behavior: FittedOrKnownBehavior,
        q_models: list[SieveModel],
        dq_models: Optional[list[SieveModel]] = None,
        w_models: Optional[list[SieveModel]] = None,
        dw_models: Optional[list[SieveModel]] = None,
        integral_method: str = "analytic",
    ):
        if mode not in ("kernelized", "deterministic"):
            raise ValueError(f"bad mode {mode!r}")
        self.horizon = horizon
        self.mode = mode
        self.spec = spec
        self.h = float(h)
        self.policy = policy
        self.behavior = behavior
        self.q_models = q_models
        self.dq_models = dq_models
        self.w_models = w_models
        self.dw_models = dw_models
        self.integral_method = integral_method
        self.clip_counts = {"w": 0}

    def _require(self, models, name: str):
        if models is None:
            raise ValueError(f"nuisance family {name!r} was not fitted")
        return models

    def q(self, t, s, a):
        return self.q_models[t - 1].predict(s, a)

    def q_a(self, t, s, a):
        return self.q_models[t - 1].predict_da(s, a)

    def dq(self, t, s, a):
        return self._require(self.dq_models, "dq")[t - 1].predict(s, a)

    def q_conv_kh(self, t, s):
        return _conv(self.q_models[t - 1], s, self.policy.tau(s), self.spec, self.h, 0, self.integral_method)

    def q_conv_kh1(self, t, s):
        return _conv(self.q_models[t - 1], s, self.policy.tau(s), self.spec, self.h, 1, self.integral_method)

    def v(self, t, s):
        s = np.asarray(s, dtype=float)
        if t == self.horizon + 1:
            return np.zeros_like(s)
        if self.mode == "kernelized":
            return self.q_conv_kh(t, s)
        return self.q_models[t - 1].predict(s, self.policy.tau(s))

    def dv(self, t, s):
        s = np.asarray(s, dtype=float)
        if t == self.horizon + 1:
            return np.zeros_like(s)
        dq_models = self._require(self.dq_models, "dq")
        tau = self.policy.tau(s)
        gtau = self.policy.grad_tau(s)
        if self.mode == "kernelized":
            return (
                _conv(dq_models[t - 1], s, tau, self.spec, self.h, 0, self.integral_method)
                + self.q_conv_kh1(t, s) * gtau
            )
        return dq_models[t - 1].predict(s, tau) + self.q_models[t - 1].predict_da(s, tau) * gtau

    def w(self, t, s):
        s = np.asarray(s, dtype=float)
        if t == 1:
            return np.ones_like(s)
        raw = self._require(self.w_models, "w")[t - 1].predict(s)
        clipped = np.clip(raw, *W_CLIP)
        self.clip_counts["w"] += int(np.sum(clipped != raw))
        return clipped

    def dw(self, t, s):
        s = np.asarray(s, dtype=float)
        if t == 1:
            return np.zeros_like(s)
        return self._require(self.dw_models, "dw")[t - 1].predict(s)

    def pib(self, t, s, a):
        return self.behavior.density(s, a)

    def pib_da(self, t, s, a):
        return self.behavior.density_da(s, a)


@dataclass
class NuisanceSet:
    """Cross-fitted nuisances: bundle k evaluates fold k, trained on the other fold."""

    folds: tuple[np.ndarray, np.ndarray]
    bundles: tuple
    train_indices: tuple[np.ndarray, np.ndarray]
    mode: str
    h: float
    spec: KernelSpec
    degree: int = 2
    seed: int = 0

    @property
    def horizon(self) -> int:
        return self.bundles[0].horizon

    def check_crossfit(self) -> None:
        """Assert the cross-fitting contract: no bundle saw its evaluation fold."""
        for k in range(2):
            overlap = np.intersect1d(self.folds[k], self.train_indices[k])
            if overlap.size:
                raise AssertionError(
                    f"cross-fitting violated: fold {k + 1} shares indices {overlap[:5]} with its training set"
                )

    @classmethod
    def fit(
        cls,
        data: Dataset,
        policy: DeterministicPolicy,
        behavior: Optional[BehaviorModel],
        spec: KernelSpec,
        h: float,
        mode: str,
        degree: int = 2,
        ridge: Optional[float] = None,
        seed: int = 0,
        with_dq: bool = True,
        with_w: bool = True,
        integral_method: str = "analytic",
    ) -> "NuisanceSet":
        """Two-fold cross-fit of all requested nuisance families.

        ``behavior=None`` fits the behavior density per fold; otherwise the
        known model is used. In deterministic mode w/dw are still the
        kernelized-ratio fits (marginal ratios of the deterministic policy are
        estimated by their kernelized counterparts).
        """
        if mode not in ("kernelized", "deterministic"):
            raise ValueError(f"bad mode {mode!r}")
        fold1, fold2 = crossfold_split(data, seed)
        folds = (fold1, fold2)
        bundles = []
        trains = []
        for k in range(2):
            train = folds[1 - k]
            trains.append(train)
            beh = behavior if behavior is not None else fit_behavior(data, train)
            q_models = fit_q(data, train, policy, mode, spec, h, degree, ridge, integral_method)
            dq_models = (
                fit_dq(data, train, q_models, policy, mode, spec, h, degree, ridge, integral_method)
                if with_dq
                else None
            )
            w_models = (
                fit_w(data, train, policy, spec, h, beh, degree, ridge) if with_w else None
            )
            dw_models = (
                fit_dw(data, train, policy, spec, h, beh, degree, ridge) if with_w else None
            )
            bundles.append(
                SieveBundle(
                    data.horizon,
                    mode,
                    spec,
                    h,
                    policy,
                    beh,
                    q_models,
                    dq_models,
                    w_models,
                    dw_models,
                    integral_method,
                )
            )
        return cls(folds, tuple(bundles), tuple(trains), mode, float(h), spec, degree, seed)

    @classmethod
    def shared(cls, bundle, n: int) -> "NuisanceSet":
        """Wrap a single (e.g. exact) bundle so estimators apply it to all rows."""
        all_idx = np.arange(n)
        empty = np.array([], dtype=int)
        return cls(
            folds=(all_idx, empty),
            bundles=(bundle, bundle),
            train_indices=(empty, empty),
            mode=bundle.mode,
            h=bundle.h,
            spec=bundle.spec,
        )

    # -- structured text serialization (sieve-backed sets only) --

    def to_text(self) -> str:
        out = io.StringIO()
        out.write("kernelope-nuisances v1\n")
        out.write(f"mode={self.mode}\n")
        out.write(f"h={self.h:.17g}\n")
        out.write(f"kernel={self.spec.family}\n")
        out.write(f"degree={self.degree}\n")
        out.write(f"seed={self.seed}\n")
        b0 = self.bundles[0]
        out.write(f"horizon={b0.horizon}\n")
        out.write(f"theta={b0.policy.theta:.17g}\n")
        out.write(f"integral_method={b0.integral_method}\n")
        for k in range(2):
            out.write(
                f"fold k={k + 1} eval={_ints(self.folds[k])} train={_ints(self.train_indices[k])}\n"
            )
        for k, bundle in enumerate(self.bundles):
            beh = bundle.behavior
            if isinstance(beh, BehaviorModel):
                out.write(
                    f"behavior fold={k + 1} known=1 mean_coeff={beh.mean_coeff:.17g} std={beh.std:.17g}\n"
                )
            else:
                out.write(
                    f"behavior fold={k + 1} known=0 std={beh.std:.17g} "
                    f"degree={beh.mean_model.degree} coeffs={_floats(beh.mean_model.coefficients)}\n"
                )
            for kind in ("q", "dq", "w", "dw"):
                models = getattr(bundle, f"{kind}_models")
                if models is None:
                    continue
                for t, model in enumerate(models, start=1):
                    out.write(
                        f"model fold={k + 1} kind={kind} t={t} arity={model.arity} "
                        f"degree={model.degree} ridge={model.ridge:.17g} "
                        f"coeffs={_floats(model.coefficients)}\n"
                    )
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "NuisanceSet":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "kernelope-nuisances v1":
            raise ValueError("bad nuisance dump header")
        header: dict[str, str] = {}
        folds: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        behaviors: dict[int, FittedOrKnownBehavior] = {}
        models: dict[tuple[int, str], dict[int, SieveModel]] = {}
        for line in lines[1:]:
            if line.startswith("fold "):
                kv = _kvparse(line[5:])
                k = int(kv["k"])
                folds[k] = (_parse_ints(kv["eval"]), _parse_ints(kv["train"]))
            elif line.startswith("behavior "):
                kv = _kvparse(line[9:])
                k = int(kv["fold"])
                if kv["known"] == "1":
                    behaviors[k] = BehaviorModel(float(kv["mean_coeff"]), float(kv["std"]))
                else:
                    mean = SieveModel(
                        int(kv["degree"]), "state", _parse_floats(kv["coeffs"]), 0.0
                    )
                    behaviors[k] = FittedBehavior(mean, float(kv["std"]))
            elif line.startswith("model "):
                kv = _kvparse(line[6:])
                model = SieveModel(
                    int(kv["degree"]), kv["arity"], _parse_floats(kv["coeffs"]), float(kv["ridge"])
                )
                models.setdefault((int(kv["fold"]), kv["kind"]), {})[int(kv["t"])] = model
            else:
                key, _, value = line.partition("=")
                header[key] = value
        spec = KernelSpec(header["kernel"])
        policy = DeterministicPolicy(float(header["theta"]))
        horizon = int(header["horizon"])
        bundles = []
        for k in (1, 2):
            kinds = {}
            for kind in ("q", "dq", "w", "dw"):
                table = models.get((k, kind))
                if table is None:
                    kinds[kind] = None
                    continue
                kinds[kind] = [table[t] for t in range(1, max(table) + 1)]
            bundles.append(
                SieveBundle(
                    horizon,
                    header["mode"],
                    spec,
                    float(header["h"]),
                    policy,
                    behaviors[k],
                    kinds["q"],
                    kinds["dq"],
                    kinds["w"],
                    kinds["dw"],
                    header.get("integral_method", "analytic"),
                )
            )
        return cls(
            folds=(folds[1][0], folds[2][0]),
            bundles=tuple(bundles),
            train_indices=(folds[1][1], folds[2][1]),
            mode=header["mode"],
            h=float(header["h"]),
            spec=spec,
            degree=int(header["degree"]),
            seed=int(header.get("seed", "0")),
        )


def _ints(arr) -> str:
    return ",".join(str(int(i)) for i in arr) if len(arr) else "-"


def _parse_ints(text: str) -> np.ndarray:
    if text == "-":
        return np.array([], dtype=int)
    return np.array([int(x) for x in text.split(",")], dtype=int)


def _floats(arr) -> str:
    return ",".join(format(float(x), ".17g") for x in arr)


def _parse_floats(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.split(",")])


def _kvparse(text: str) -> dict[str, str]:
    return dict(part.split("=", 1) for part in text.split())
