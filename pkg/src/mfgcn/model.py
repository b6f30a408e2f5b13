"""Game specification: coefficients, objective, control grid, and benchmarks.

Coefficient conventions (all builtin models follow them and user models must
too): ``x`` is a batch ``(N, d)``; ``a`` is a single action vector
``(dim_A,)``; ``mu`` is an EmpiricalMeasure on R^d.  ``b`` returns ``(N, d)``,
``f`` and ``g`` return ``(N,)``, and the volatilities return either constant
matrices ``(d, m)`` / ``(d, m0)`` or batches ``(N, d, m)``.  Functions must be
pure: same inputs, same outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .measures import EmpiricalMeasure, empirical_moment

BUILTIN_NAMES = ("bounded_demo", "lq_tracking", "lq_counterexample", "monotone_demo")


@dataclass(frozen=True)
class Flags:
    A_holds: bool = True
    B_holds: bool = False
    C_convexity: bool = False
    D_linear_convex: bool = False
    U_monotone: bool = False


@dataclass(frozen=True)
class ModelSpec:
    """Data of one mean-field game with common noise."""

    name: str
    d: int
    m: int
    m0: int
    T: float
    p: float
    p_prime: float
    p_sigma: float
    b: Callable
    f: Callable
    g: Callable
    sigma: Callable
    sigma0: Callable
    lambda_sampler: Callable
    A_grid: np.ndarray
    flags: Flags = field(default_factory=Flags)
    c1: float | None = None
    c2: float | None = None
    c3: float | None = None
    # uniform coefficient bounds used by the closed-form moment constant
    b_bound: float | None = None
    sigma_bound: float | None = None
    sigma0_bound: float | None = None
    # initial law parameters (normal), used by the moment-bound script
    lambda_mean: float | None = None
    lambda_std: float | None = None
    # (f1, f2) with f = f1(t,x,a) + f2(t,x,mu); required by monotonicity checks
    f_parts: tuple[Callable, Callable] | None = None

    def __post_init__(self):
        if min(self.d, self.m, self.m0) < 1:
            raise ValueError("dimensions must be >= 1")
        if self.T <= 0:
            raise ValueError("horizon must be positive")
        if not (self.p_prime >= self.p >= max(1.0, self.p_sigma)):
            raise ValueError("exponents must satisfy p' >= p >= max(1, p_sigma)")
        if not 0.0 <= self.p_sigma <= 2.0:
            raise ValueError("p_sigma must lie in [0, 2]")
        a = np.asarray(self.A_grid, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if a.shape[0] < 1 or not np.all(np.isfinite(a)):
            raise ValueError("A_grid must be a nonempty finite set")
        a.flags.writeable = False
        object.__setattr__(self, "A_grid", a)

    @property
    def dim_a(self) -> int:
        return self.A_grid.shape[1]

    @property
    def n_actions(self) -> int:
        return self.A_grid.shape[0]


@dataclass
class GrowthReport:
    """Worst observed ratio per inequality, checked against 1."""

    ratios: dict[str, float]
    passed: dict[str, bool]
    pure: bool
    sample_count: int

    @property
    def all_passed(self) -> bool:
        return self.pure and all(self.passed.values())

    def __post_init__(self):
        if any(r < 0 for r in self.ratios.values()):
            raise ValueError("ratios must be nonnegative")


def _vol_norm(s: np.ndarray, n: int) -> np.ndarray:
    """Frobenius norm per batch row for a (N,d,m) or constant (d,m) matrix."""
    s = np.asarray(s, dtype=float)
    if s.ndim == 2:
        return np.full(n, np.linalg.norm(s))
    return np.linalg.norm(s.reshape(s.shape[0], -1), axis=1)


def validate_growth(model: ModelSpec, sample_count: int = 200, seed: int = 0) -> GrowthReport:
    """Sample-based check of the Lipschitz/growth inequalities.

    Draws heavy-tailed states, random empirical measures, and grid actions,
    then reports the worst LHS/RHS ratio for each inequality at the model's
    documented constants.  A ratio above 1 is a failure.
    """
    if model.c1 is None or model.c2 is None or model.c3 is None:
        raise ValueError("validate_growth requires constants c1, c2, c3 on the model")
    rng = np.random.default_rng(seed)
    c1, c2, c3 = model.c1, model.c2, model.c3
    p, pp, ps = model.p, model.p_prime, model.p_sigma
    names = ["lipschitz", "a4_drift", "a4_vol", "a5_g", "a5_f_upper", "a5_f_lower", "b5"]
    if model.flags.B_holds:
        names.append("b1_bounded")
    worst = {k: 0.0 for k in names}

    for _ in range(sample_count):
        t = rng.uniform(0, model.T)
        x = rng.standard_t(3, size=(1, model.d)) * 2.0
        y = rng.standard_t(3, size=(1, model.d)) * 2.0
        k = rng.integers(1, 9)
        mu = EmpiricalMeasure.from_samples(rng.standard_t(3, size=(k, model.d)) * 2.0)
        a = model.A_grid[rng.integers(model.n_actions)]
        mp = empirical_moment(mu, p)
        ax = float(np.linalg.norm(a))

        bx = model.b(t, x, mu, a)
        by = model.b(t, y, mu, a)
        sx = np.concatenate(
            [_vol_norm(model.sigma(t, x, mu), 1), _vol_norm(model.sigma0(t, x, mu), 1)]
        )
        sy = np.concatenate(
            [_vol_norm(model.sigma(t, y, mu), 1), _vol_norm(model.sigma0(t, y, mu), 1)]
        )
        dxy = float(np.linalg.norm(x - y))
        if dxy > 1e-12:
            lhs = float(np.linalg.norm(bx - by)) + float(np.linalg.norm(sx - sy))
            worst["lipschitz"] = max(worst["lipschitz"], lhs / (c1 * dxy))

        b0 = model.b(t, np.zeros((1, model.d)), mu, a)
        worst["a4_drift"] = max(
            worst["a4_drift"],
            float(np.linalg.norm(b0)) / (c1 * (1 + mp ** (1.0 / p) + ax)),
        )
        vol2 = float(_vol_norm(model.sigma(t, x, mu), 1)[0] ** 2
                     + _vol_norm(model.sigma0(t, x, mu), 1)[0] ** 2)
        xn = float(np.linalg.norm(x))
        worst["a4_vol"] = max(
            worst["a4_vol"], vol2 / (c1 * (1 + xn**ps + mp ** (ps / p)))
        )

        gv = float(model.g(x, mu)[0])
        fv = float(model.f(t, x, mu, a)[0])
        base = c2 * (1 + xn**p + mp)
        worst["a5_g"] = max(worst["a5_g"], abs(gv) / base)
        worst["a5_f_upper"] = max(worst["a5_f_upper"], (fv + c3 * ax**pp) / base)
        worst["a5_f_lower"] = max(
            worst["a5_f_lower"], -fv / (c2 * (1 + xn**p + mp + ax**pp))
        )
        worst["b5"] = max(worst["b5"], (abs(fv) + abs(gv)) / base)

        if model.flags.B_holds:
            if model.b_bound is None or model.sigma_bound is None or model.sigma0_bound is None:
                raise ValueError("B-flagged model must document b/sigma bounds")
            r = max(
                float(np.linalg.norm(bx)) / model.b_bound,
                float(_vol_norm(model.sigma(t, x, mu), 1)[0]) / max(model.sigma_bound, 1e-300),
                float(_vol_norm(model.sigma0(t, x, mu), 1)[0]) / max(model.sigma0_bound, 1e-300),
            )
            worst["b1_bounded"] = max(worst["b1_bounded"], r)

    # purity spot check: double evaluation must agree bit for bit
    t = 0.5 * model.T
    x = np.ones((2, model.d))
    mu = EmpiricalMeasure.from_samples(np.zeros((1, model.d)))
    a = model.A_grid[0]
    pure = np.array_equal(model.f(t, x, mu, a), model.f(t, x, mu, a)) and np.array_equal(
        model.b(t, x, mu, a), model.b(t, x, mu, a)
    )

    worst = {k: max(v, 0.0) for k, v in worst.items()}
    passed = {k: v <= 1.0 + 1e-9 for k, v in worst.items()}
    return GrowthReport(ratios=worst, passed=passed, pure=bool(pure), sample_count=sample_count)


def documented_c4(model: ModelSpec, gamma: float) -> float:
    """Closed-form constant for the pathwise moment bound.

    For bounded drift and volatilities,
    ||X||_T <= |X0| + b_max T + ||I_sigma||_T + ||I_sigma0||_T,
    the reflection principle bounds E||M||_T^gamma <= 2 (s^2 T)^{gamma/2} m_gamma
    for a martingale with quadratic variation at most s^2 T, and the power-mean
    inequality combines the four terms.  Any flow/control terms on the
    right-hand side of the moment inequality only help, so the constant
    returned here is a valid c4.
    """
    if not model.p <= gamma <= model.p_prime:
        raise ValueError("gamma must lie in [p, p']")
    for attr in ("b_bound", "sigma_bound", "sigma0_bound", "lambda_mean", "lambda_std"):
        if getattr(model, attr) is None:
            raise ValueError(f"documented_c4 requires model.{attr}")
    if model.d != 1:
        raise ValueError("the closed-form bound script covers d = 1 models")
    mu0, sd0 = model.lambda_mean, model.lambda_std

    def integrand(z):
        return abs(mu0 + sd0 * z) ** gamma * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)

    x0_moment, _ = quad(integrand, -12, 12, limit=200)
    m_gamma = 2.0 ** (gamma / 2.0) * math.gamma((gamma + 1) / 2.0) / math.sqrt(math.pi)
    T = model.T
    terms = (
        x0_moment
        + (model.b_bound * T) ** gamma
        + 2.0 * (model.sigma_bound**2 * T) ** (gamma / 2.0) * m_gamma
        + 2.0 * (model.sigma0_bound**2 * T) ** (gamma / 2.0) * m_gamma
    )
    return 4.0 ** (gamma - 1.0) * terms


# --- builtin benchmark models -------------------------------------------------

def _normal_sampler(mean: float, std: float, d: int = 1):
    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.normal(mean, std, size=(n, d))

    return sample


def _const_matrix(value: float) -> np.ndarray:
    out = np.array([[value]])
    out.flags.writeable = False
    return out


def _drift_is_action(t, x, mu, a):
    return np.broadcast_to(np.asarray(a, dtype=float), x.shape)


def _bounded_demo(T=1.0, sigma=0.5, sigma0=0.3, lambda_mean=0.0, lambda_std=1.0,
                  a_grid=None) -> ModelSpec:
    acts = np.linspace(-1.0, 1.0, 9) if a_grid is None else np.asarray(a_grid, float)
    s_mat, s0_mat = _const_matrix(sigma), _const_matrix(sigma0)

    def f(t, x, mu, a):
        dev = x[:, 0] - mu.mean()[0]
        return -0.5 * float(a[0]) ** 2 - np.tanh(dev) ** 2

    def g(x, mu):
        dev = x[:, 0] - mu.mean()[0]
        return -np.tanh(dev) ** 2

    return ModelSpec(
        name="bounded_demo", d=1, m=1, m0=1, T=T, p=1.0, p_prime=2.0, p_sigma=0.0,
        b=_drift_is_action, f=f, g=g,
        sigma=lambda t, x, mu: s_mat, sigma0=lambda t, x, mu: s0_mat,
        lambda_sampler=_normal_sampler(lambda_mean, lambda_std), A_grid=acts,
        flags=Flags(A_holds=True, B_holds=True, C_convexity=True),
        c1=1.0, c2=1.5, c3=0.5,
        b_bound=float(np.max(np.abs(acts))), sigma_bound=sigma, sigma0_bound=sigma0,
        lambda_mean=lambda_mean, lambda_std=lambda_std,
    )


def _lq_tracking(T=1.0, sigma=0.2, sigma0=0.3, lambda_mean=1.0, lambda_std=1.0,
                 a_grid=None, f_tilde=None) -> ModelSpec:
    """Tracking game: drift equals the control, reward a*f~(t, mean) - a^2/2.

    The optimal feedback is f~ evaluated at the conditional population mean,
    independently of the private state; the conditional mean then follows
    dy = f~(t, y) dt + sigma0 dB.
    """
    acts = np.linspace(-1.0, 1.0, 41) if a_grid is None else np.asarray(a_grid, float)
    ft = f_tilde if f_tilde is not None else (lambda t, y: math.tanh(y))
    s_mat, s0_mat = _const_matrix(sigma), _const_matrix(sigma0)

    def f(t, x, mu, a):
        av = float(a[0])
        return np.full(x.shape[0], av * ft(t, float(mu.mean()[0])) - 0.5 * av * av)

    def g(x, mu):
        return np.zeros(x.shape[0])

    model = ModelSpec(
        name="lq_tracking", d=1, m=1, m0=1, T=T, p=1.0, p_prime=2.0, p_sigma=0.0,
        b=_drift_is_action, f=f, g=g,
        sigma=lambda t, x, mu: s_mat, sigma0=lambda t, x, mu: s0_mat,
        lambda_sampler=_normal_sampler(lambda_mean, lambda_std), A_grid=acts,
        flags=Flags(A_holds=True, B_holds=True, C_convexity=True, D_linear_convex=True),
        c1=1.0, c2=1.5, c3=0.25,
        b_bound=float(np.max(np.abs(acts))), sigma_bound=sigma, sigma0_bound=sigma0,
        lambda_mean=lambda_mean, lambda_std=lambda_std,
    )
    object.__setattr__(model, "f_tilde", ft)
    return model


def _lq_counterexample(T=2.0, sigma=0.3, sigma0=0.3, lambda_mean=1.0, lambda_std=1.0,
                       a_grid=None, c=None) -> ModelSpec:
    """Linear-quadratic game with terminal cost -(x + c mean)^2 and p' = p = 2."""
    if abs(T - 1.0) < 1e-12:
        raise ValueError("the counterexample requires T != 1")
    c_val = (1.0 - T) / T if c is None else float(c)
    acts = np.linspace(-3.0, 3.0, 25) if a_grid is None else np.asarray(a_grid, float)
    s_mat, s0_mat = _const_matrix(sigma), _const_matrix(sigma0)

    def f(t, x, mu, a):
        av = float(a[0])
        return np.full(x.shape[0], -av * av)

    def f2(t, x, mu):
        return np.zeros(x.shape[0])

    def g(x, mu):
        return -((x[:, 0] + c_val * mu.mean()[0]) ** 2)

    model = ModelSpec(
        name="lq_counterexample", d=1, m=1, m0=1, T=T, p=2.0, p_prime=2.0, p_sigma=0.0,
        b=_drift_is_action, f=f, g=g,
        sigma=lambda t, x, mu: s_mat, sigma0=lambda t, x, mu: s0_mat,
        lambda_sampler=_normal_sampler(lambda_mean, lambda_std), A_grid=acts,
        flags=Flags(A_holds=True, B_holds=True, C_convexity=True, D_linear_convex=True),
        c1=1.0, c2=9.0, c3=1.0,
        b_bound=float(np.max(np.abs(acts))), sigma_bound=sigma, sigma0_bound=sigma0,
        lambda_mean=lambda_mean, lambda_std=lambda_std,
        f_parts=(lambda t, x, a: np.full(x.shape[0], -float(a[0]) ** 2), f2),
    )
    object.__setattr__(model, "c", c_val)
    return model


def _monotone_demo(T=1.0, sigma=0.4, sigma0=0.4, lambda_mean=0.0, lambda_std=1.0,
                   a_grid=None, sign=-1.0) -> ModelSpec:
    """Monotone game: f2(t,x,mu) = sign * x * mean, g = sign * x * mean.

    With sign = -1 the mean-field coupling satisfies the monotonicity
    inequality (the pairing integrates to -(1 + T)(mean difference)^2 for
    time-constant flows); sign = +1 violates it.
    """
    acts = np.linspace(-1.0, 1.0, 21) if a_grid is None else np.asarray(a_grid, float)
    s_mat, s0_mat = _const_matrix(sigma), _const_matrix(sigma0)

    def f1(t, x, a):
        av = float(a[0])
        return -av * av + av * np.tanh(x[:, 0])

    def f2(t, x, mu):
        return sign * x[:, 0] * mu.mean()[0]

    def f(t, x, mu, a):
        return f1(t, x, a) + f2(t, x, mu)

    def g(x, mu):
        return sign * x[:, 0] * mu.mean()[0]

    return ModelSpec(
        name="monotone_demo", d=1, m=1, m0=1, T=T, p=2.0, p_prime=3.0, p_sigma=0.0,
        b=_drift_is_action, f=f, g=g,
        sigma=lambda t, x, mu: s_mat, sigma0=lambda t, x, mu: s0_mat,
        lambda_sampler=_normal_sampler(lambda_mean, lambda_std), A_grid=acts,
        flags=Flags(A_holds=True, B_holds=True, C_convexity=True,
                    U_monotone=(sign < 0)),
        c1=1.0, c2=2.0, c3=1.0,
        b_bound=float(np.max(np.abs(acts))), sigma_bound=sigma, sigma0_bound=sigma0,
        lambda_mean=lambda_mean, lambda_std=lambda_std,
        f_parts=(f1, f2),
    )


_BUILTIN_FACTORIES = {
    "bounded_demo": _bounded_demo,
    "lq_tracking": _lq_tracking,
    "lq_counterexample": _lq_counterexample,
    "monotone_demo": _monotone_demo,
}


def builtin(name: str, **overrides) -> ModelSpec:
    """Construct a builtin benchmark model, optionally overriding parameters."""
    if name not in _BUILTIN_FACTORIES:
        raise ValueError(f"unknown builtin model '{name}'; choose from {BUILTIN_NAMES}")
    return _BUILTIN_FACTORIES[name](**overrides)


def from_config(cfg: dict) -> ModelSpec:
    """Model from flat config keys: model plus optional builtin overrides."""
    name = cfg.get("model", "bounded_demo")
    overrides = {}
    for key in ("T", "sigma", "sigma0", "lambda_mean", "lambda_std", "c", "sign"):
        if key in cfg:
            overrides[key] = float(cfg[key])
    if "a_grid_min" in cfg or "a_grid_max" in cfg or "a_grid_count" in cfg:
        lo = float(cfg.get("a_grid_min", -1.0))
        hi = float(cfg.get("a_grid_max", 1.0))
        n = int(cfg.get("a_grid_count", 9))
        overrides["a_grid"] = np.linspace(lo, hi, n)
    return builtin(name, **overrides)
