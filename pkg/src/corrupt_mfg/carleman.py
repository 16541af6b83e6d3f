"""Numerical checks of weighted (Carleman-type) energy inequalities.

Test functions are finite sums ``sum_l A_l X_{k_l}(x) Y_{j_l}(y) tau_l(t)`` with
``X_k = cos((k + 1/2) pi x)`` and ``Y_j = cos(j pi y)``.  They vanish on
``x = 1`` and have zero normal derivative on the other faces, so they belong to
the admissible class of the inequalities.  All derivatives are closed-form;
only the integrals are numerical.

Space integrals of products are precomputed as Gram matrices (trapezoid rule on
a uniform grid, which is exact for these cosine products with constant
coefficients), so every space integral at time ``t`` is a small quadratic
form in the time factors.  Time integrals use composite Gauss-Legendre panels
that cluster where the weight ``exp(2 lambda (t+2)^s)`` lives.  Every weighted
quantity is multiplied by ``exp(-2 lambda (T+2)^s)`` so nothing overflows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .grid import Grid
from .model import Expression, ModelParams

THEOREMS = ("5.1", "5.2", "7.1")
TERMINAL_VARIANTS = ("power", "square")
TIME_FACTORS = {
    "one": (lambda t: np.ones_like(t), lambda t: np.zeros_like(t)),
    "t": (lambda t: t, lambda t: np.ones_like(t)),
    "exp_neg": (lambda t: np.exp(-t), lambda t: -np.exp(-t)),
    "exp": (np.exp, np.exp),
    "sin": (np.sin, np.cos),
}
MAX_MODE = 4
_GL_ORDER = 8


@dataclass(frozen=True)
class CarlemanParams:
    lam: float
    s: float

    def __post_init__(self) -> None:
        if not self.lam >= 1:
            raise ValueError(f"lambda must be >= 1, got {self.lam}")
        if not self.s > 1:
            raise ValueError(f"s must be > 1, got {self.s}")


def log_cwf(t, cp: CarlemanParams) -> NDArray:
    """Logarithm of the weight, ``lambda (t + 2)^s``."""
    return cp.lam * (np.asarray(t, dtype=float) + 2.0) ** cp.s


def cwf(t, cp: CarlemanParams, T: float | None = None) -> NDArray:
    """The weight ``exp(lambda (t + 2)^s)``.

    Raises ``OverflowError`` when ``lambda (T + 2)^s > 700`` (``T`` defaults to
    the largest requested time); use :func:`log_cwf` in that regime.
    """
    t = np.asarray(t, dtype=float)
    top = float(np.max(t)) if T is None else T
    if cp.lam * (top + 2.0) ** cp.s > 700:
        raise OverflowError("weight exponent exceeds 700; work with log_cwf instead")
    return np.exp(log_cwf(t, cp))


@dataclass(frozen=True)
class TestFunction:
    """Separable test function; each term is ``(k, j, time_factor, amplitude)``."""

    __test__ = False  # not a pytest class

    terms: tuple[tuple[int, int, str, float], ...]

    def __post_init__(self) -> None:
        for k, j, kind, _ in self.terms:
            if not (0 <= k <= MAX_MODE and 0 <= j <= MAX_MODE):
                raise ValueError(f"mode indices must lie in [0, {MAX_MODE}]")
            if kind not in TIME_FACTORS:
                raise ValueError(f"unknown time factor {kind!r}; allowed: {sorted(TIME_FACTORS)}")

    @classmethod
    def mode(cls, k: int, j: int, kind: str = "one", amplitude: float = 1.0) -> TestFunction:
        return cls(((k, j, kind, float(amplitude)),))

    @classmethod
    def zero(cls) -> TestFunction:
        return cls(())

    def scaled(self, c: float) -> TestFunction:
        return TestFunction(tuple((k, j, kind, c * a) for k, j, kind, a in self.terms))

    def __add__(self, other: TestFunction) -> TestFunction:
        return TestFunction(self.terms + other.terms)

    def time_coefficients(self, t: NDArray) -> tuple[NDArray, NDArray]:
        """``(A_l tau_l(t), A_l tau_l'(t))`` with shape ``(n_terms, len(t))``."""
        t = np.asarray(t, dtype=float)
        f = np.array([a * TIME_FACTORS[kind][0](t) for _, _, kind, a in self.terms]).reshape(-1, t.size)
        df = np.array([a * TIME_FACTORS[kind][1](t) for _, _, kind, a in self.terms]).reshape(-1, t.size)
        return f, df

    def __call__(self, x, y, t) -> NDArray:
        total = np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y), np.shape(t)))
        for k, j, kind, a in self.terms:
            total = total + a * np.cos((k + 0.5) * np.pi * x) * np.cos(j * np.pi * y) * TIME_FACTORS[kind][0](
                np.asarray(t, dtype=float)
            )
        return total


def random_suite(n: int = 20, seed: int = 0, max_terms: int = 3) -> list[TestFunction]:
    rng = np.random.default_rng(seed)
    kinds = list(TIME_FACTORS)
    suite = []
    for _ in range(n):
        count = int(rng.integers(1, max_terms + 1))
        terms = tuple(
            (
                int(rng.integers(0, MAX_MODE + 1)),
                int(rng.integers(0, MAX_MODE + 1)),
                kinds[int(rng.integers(len(kinds)))],
                float(rng.normal()),
            )
            for _ in range(count)
        )
        suite.append(TestFunction(terms))
    return suite


@dataclass(frozen=True)
class DiagonalOperator:
    """``L u = (a1 u_x)_x + (a2 u_y)_y`` (divergence) or ``a1 u_xx + a2 u_yy``."""

    a1: Expression = field(default_factory=lambda: Expression(0.1))
    a2: Expression = field(default_factory=lambda: Expression(0.1))
    divergence: bool = True

    def __post_init__(self) -> None:
        for name in ("a1", "a2"):
            value = getattr(self, name)
            if not isinstance(value, Expression):
                object.__setattr__(self, name, Expression(value))

    @classmethod
    def constant(cls, a1: float = 0.1, a2: float | None = None, divergence: bool = True) -> DiagonalOperator:
        return cls(Expression(a1), Expression(a1 if a2 is None else a2), divergence)

    @classmethod
    def from_params(cls, params: ModelParams) -> DiagonalOperator:
        """Principal part ``sigma1^2/2 u_xx + sigma2^2/2 u_yy`` of the PDE system."""
        return cls(
            Expression(f"0.5*({params.sigma1_sq.source})"),
            Expression(f"0.5*({params.sigma2_sq.source})"),
            divergence=False,
        )

    def coefficients(self, grid: Grid) -> tuple[NDArray, NDArray]:
        X, Y = grid.mesh()
        a1 = np.broadcast_to(self.a1(X, Y), grid.shape).copy()
        a2 = np.broadcast_to(self.a2(X, Y), grid.shape).copy()
        if np.any(a1 <= 0) or np.any(a2 <= 0):
            raise ValueError("operator coefficients must be positive (ellipticity)")
        return a1, a2

    def bounds(self, grid: Grid | None = None) -> tuple[float, float]:
        """Ellipticity constants ``(mu1, mu2)`` (sampled on the grid)."""
        a1, a2 = self.coefficients(grid or Grid.square(65))
        return float(min(a1.min(), a2.min())), float(max(a1.max(), a2.max()))


class _SpatialGrams:
    """Gram matrices of the spatial factors and their derivatives."""

    def __init__(self, u: TestFunction, op: DiagonalOperator, n: int):
        grid = Grid.square(n)
        X, Y = grid.mesh()
        w = grid.weights()
        a1, a2 = op.coefficients(grid)
        nb = len(u.terms)
        S = np.empty((nb, *grid.shape))
        Sx, Sy, Sxx, Syy, Sxy = (np.empty_like(S) for _ in range(5))
        for l, (k, j, _, _) in enumerate(u.terms):
            p, q = (k + 0.5) * np.pi, j * np.pi
            cx, sx = np.cos(p * X), np.sin(p * X)
            cy, sy = np.cos(q * Y), np.sin(q * Y)
            S[l] = cx * cy
            Sx[l] = -p * sx * cy
            Sy[l] = -q * cx * sy
            Sxx[l] = -p * p * S[l]
            Syy[l] = -q * q * S[l]
            Sxy[l] = p * q * sx * sy
        LS = a1 * Sxx + a2 * Syy
        if op.divergence and not (op.a1.is_constant() and op.a2.is_constant()):
            a1x = np.gradient(a1, grid.hx, axis=1, edge_order=2)
            a2y = np.gradient(a2, grid.hy, axis=0, edge_order=2)
            LS = LS + a1x * Sx + a2y * Sy

        def gram(F, H, weight=None):
            ww = w if weight is None else w * weight
            return np.einsum("lji,mji,ji->lm", F, H, ww)

        self.SS = gram(S, S)
        self.SL = gram(S, LS)
        self.LL = gram(LS, LS)
        self.GG = gram(Sx, Sx) + gram(Sy, Sy)
        self.aG = gram(Sx, Sx, a1) + gram(Sy, Sy, a2)
        self.HH = gram(Sxx, Sxx) + gram(Sxy, Sxy) + gram(Syy, Syy)


def _qf(A: NDArray, M: NDArray, B: NDArray) -> NDArray:
    return np.einsum("lt,lm,mt->t", A, M, B)


def time_nodes(cp: CarlemanParams, T: float, dz: float = 0.5, panels: int = 20, z_max: float = 80.0):
    """Gauss-Legendre nodes and log-scaled weights on ``[0, T]``.

    Panel breaks combine a uniform mesh with points where the normalised
    weight ``exp(2 lambda ((t+2)^s - (T+2)^s))`` drops by ``e^{-dz}``.
    Returns ``(t, w, logw)`` where ``w`` are plain quadrature weights and
    ``logw`` the normalised log weight at each node.
    """
    gT = 2 * cp.lam * (T + 2.0) ** cp.s
    g0 = 2 * cp.lam * 2.0**cp.s
    zs = np.arange(0.0, min(gT - g0, z_max), dz)
    tz = ((gT - zs) / (2 * cp.lam)) ** (1.0 / cp.s) - 2.0
    breaks = np.unique(np.concatenate([np.linspace(0.0, T, panels + 1), tz[(tz > 0) & (tz < T)]]))
    xg, wg = np.polynomial.legendre.leggauss(_GL_ORDER)
    a, b = breaks[:-1, None], breaks[1:, None]
    t = (0.5 * (b - a) * xg + 0.5 * (a + b)).ravel()
    w = (0.5 * (b - a) * wg).ravel()
    logw = 2 * cp.lam * (t + 2.0) ** cp.s - gT
    return t, w, logw


@dataclass
class CarlemanReport:
    theorem: str
    lam: float
    s: float
    variant: str
    lhs: float
    positive_rhs_terms: dict[str, float]
    boundary_allowance: dict[str, float]
    margin: float
    empirical_C: float | None
    scale: float
    valid: bool = True
    variant_margins: dict[str, float] = field(default_factory=dict)

    @property
    def normalized_margin(self) -> float:
        return self.margin / self.scale if self.scale > 0 else 0.0

    def passes(self, tol: float = 1e-9) -> bool:
        return self.normalized_margin >= -tol

    def to_dict(self) -> dict:
        return {
            "theorem": self.theorem,
            "lambda": self.lam,
            "s": self.s,
            "variant": self.variant,
            "lhs": self.lhs,
            "positive_rhs_terms": self.positive_rhs_terms,
            "boundary_allowance": self.boundary_allowance,
            "margin": self.margin,
            "normalized_margin": self.normalized_margin,
            "variant_margins": self.variant_margins,
            "empirical_C": self.empirical_C,
            "scale": self.scale,
            "valid": self.valid,
        }


class _Integrals:
    """Weighted time integrals of the spatial quadratic forms for one (u, cp)."""

    def __init__(self, u: TestFunction, grams: _SpatialGrams, cp: CarlemanParams, T: float, dz: float, panels: int):
        t, wq, logw = time_nodes(cp, T, dz=dz, panels=panels)
        self.cp, self.T = cp, T
        self.tau = t + 2.0
        self.w = wq * np.exp(logw)
        A, B = u.time_coefficients(t)
        g = grams
        self.u2 = _qf(A, g.SS, A)
        self.ut2 = _qf(B, g.SS, B)
        self.cross = _qf(B, g.SL, A)
        self.Lu2 = _qf(A, g.LL, A)
        self.grad2 = _qf(A, g.GG, A)
        self.hess2 = _qf(A, g.HH, A)
        ends = np.array([0.0, T])
        Ae, _ = u.time_coefficients(ends)
        self.u2_ends = _qf(Ae, g.SS, Ae)
        self.grad2_ends = _qf(Ae, g.GG, Ae)

    def integral(self, values: NDArray, power: float = 0.0) -> float:
        return float(np.sum(self.w * self.tau**power * values))


def _grams(u: TestFunction, op: DiagonalOperator, n: int) -> _SpatialGrams:
    return _SpatialGrams(u, op, n)


def _report_51(I: _Integrals, theorem: str, variant: str, grad_coef: float) -> CarlemanReport:
    cp, T = I.cp, I.T
    lam, s = cp.lam, cp.s
    lhs = I.integral(I.ut2 + 2 * I.cross + I.Lu2)
    rhs = {
        "ut2_quarter": 0.25 * I.integral(I.ut2),
        "u2_weighted": 0.5 * lam**2 * s**2 * I.integral(I.u2, 2 * s - 2),
    }
    if theorem == "5.1":
        rhs["Lu2"] = I.integral(I.Lu2)
    tauT = T + 2.0
    allow_u = lam * s * tauT ** (s - 1) * float(I.u2_ends[1])
    margins = {}
    allow_g = {}
    for v in TERMINAL_VARIANTS:
        shift = 0.0 if v == "power" else 2 * lam * (tauT**2 - tauT**s)
        allow_g[v] = grad_coef * math.exp(shift) * float(I.grad2_ends[1])
        margins[v] = lhs + allow_u + allow_g[v] - sum(rhs.values())
    allowance = {"terminal_u2": allow_u, "terminal_grad2": allow_g[variant]}
    margin = margins[variant]
    if theorem == "5.1":
        denom = lam * s * I.integral(I.grad2, s - 1)
    else:
        denom = I.integral(I.hess2)
    scale = max(abs(lhs), *(abs(v) for v in rhs.values()), *(abs(v) for v in allowance.values()))
    emp = margin / denom if denom > 0 else None
    return CarlemanReport(theorem, lam, s, variant, lhs, rhs, allowance, margin, emp, scale, True, margins)


def _report_52(I: _Integrals, mu1: float, mu2: float):
    cp, T = I.cp, I.T
    lam, s = cp.lam, cp.s
    lhs = I.integral(I.ut2 - 2 * I.cross + I.Lu2)
    rhs = {"grad2_sqrt_s": mu1 * math.sqrt(s) * I.integral(I.grad2)}
    tauT = T + 2.0
    init_scale = math.exp(2 * lam * (2.0 ** s - tauT**s))
    allowance = {
        "terminal_u2": lam * s * tauT ** (s - 1) * float(I.u2_ends[1]),
        "initial": init_scale * float(mu2 * I.grad2_ends[0] + 0.5 * math.sqrt(s) * I.u2_ends[0]),
    }
    margin = lhs + sum(allowance.values()) - sum(rhs.values())
    denom = lam * s**2 * I.integral(I.u2, s - 1)
    scale = max(abs(lhs), *(abs(v) for v in rhs.values()), *(abs(v) for v in allowance.values()))
    emp = margin / denom if denom > 0 else None
    return CarlemanReport("5.2", lam, s, "power", lhs, rhs, allowance, margin, emp, scale, True, {"power": margin})


def _check(theorem, u, op, cp, T, variant, n, builder):
    if variant not in TERMINAL_VARIANTS:
        raise ValueError(f"variant must be one of {TERMINAL_VARIANTS}")
    if not u.terms:
        zeros = {"power": 0.0, "square": 0.0}
        return CarlemanReport(theorem, cp.lam, cp.s, variant, 0.0, {}, {}, 0.0, None, 0.0, True, zeros)
    coarse = builder(_Integrals(u, _grams(u, op, n), cp, T, dz=0.5, panels=20))
    fine = builder(_Integrals(u, _grams(u, op, 2 * n - 1), cp, T, dz=0.25, panels=40))
    fine.valid = _stable(coarse, fine)
    return fine


def _stable(a: CarlemanReport, b: CarlemanReport, rtol: float = 1e-3) -> bool:
    pairs = [(a.lhs, b.lhs)]
    pairs += [(a.positive_rhs_terms[k], b.positive_rhs_terms[k]) for k in a.positive_rhs_terms]
    pairs += [(a.boundary_allowance[k], b.boundary_allowance[k]) for k in a.boundary_allowance]
    floor = 1e-12 * max(b.scale, 1e-300)
    return all(abs(x - y) <= rtol * abs(y) + floor for x, y in pairs)


def check_thm51(
    u: TestFunction,
    L: DiagonalOperator,
    cp: CarlemanParams,
    T: float = 2.0,
    variant: str = "power",
    n: int = 33,
) -> CarlemanReport:
    """Weakened estimate for ``u_t + L u`` (the ``C``-weighted gradient term dropped).

    ``empirical_C`` is the margin divided by ``lambda s int |grad u|^2 (t+2)^{s-1} phi^2``.
    """
    mu1, _ = L.bounds()
    return _check("5.1", u, L, cp, T, variant, n, lambda I: _report_51(I, "5.1", variant, mu1))


def check_thm52(u: TestFunction, L: DiagonalOperator, cp: CarlemanParams, T: float = 2.0, n: int = 33) -> CarlemanReport:
    """Weakened estimate for ``u_t - L u`` (the ``C lambda s^2`` term dropped)."""
    mu1, mu2 = L.bounds()
    return _check("5.2", u, L, cp, T, "power", n, lambda I: _report_52(I, mu1, mu2))


def check_thm71(
    u: TestFunction,
    params: ModelParams,
    cp: CarlemanParams,
    T: float | None = None,
    variant: str = "power",
    n: int = 33,
) -> CarlemanReport:
    """Weakened estimate for ``u_t + L0 u`` with ``L0`` the principal part of the PDEs.

    The terminal gradient allowance uses ``sigma0^2`` with
    ``sigma0 = min(sigma1^2, sigma2^2) / 2``; ``empirical_C`` is the margin over
    the weighted second-derivative block.
    """
    op = DiagonalOperator.from_params(params)
    sigma0, _ = op.bounds()
    T = params.T if T is None else T
    return _check("7.1", u, op, cp, T, variant, n, lambda I: _report_51(I, "7.1", variant, sigma0**2))


def ibp_identity(u: TestFunction, L: DiagonalOperator, T: float = 2.0, n: int = 33, nt: int = 400) -> tuple[float, float]:
    """Both sides of ``int_Q 2 (L v) v_t = -[int a |grad v|^2]_0^T`` for ``v = u``."""
    if not u.terms:
        return 0.0, 0.0
    g = _grams(u, L, n)
    xg, wg = np.polynomial.legendre.leggauss(_GL_ORDER)
    breaks = np.linspace(0.0, T, nt // _GL_ORDER + 1)
    a, b = breaks[:-1, None], breaks[1:, None]
    t = (0.5 * (b - a) * xg + 0.5 * (a + b)).ravel()
    w = (0.5 * (b - a) * wg).ravel()
    A, B = u.time_coefficients(t)
    lhs = float(np.sum(w * 2.0 * _qf(B, g.SL, A)))
    Ae, _ = u.time_coefficients(np.array([0.0, T]))
    energy = _qf(Ae, g.aG, Ae)
    rhs = float(-(energy[1] - energy[0]))
    return lhs, rhs


@dataclass
class ThresholdTable:
    theorem: str
    rows: list[dict]
    threshold: float | None
    reports: list[CarlemanReport] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"theorem": self.theorem, "rows": self.rows, "threshold": self.threshold}


def _run_one(theorem, u, lam, s, variant, L, params, T):
    cp = CarlemanParams(lam, s)
    if theorem == "5.1":
        return check_thm51(u, L, cp, T, variant)
    if theorem == "5.2":
        return check_thm52(u, L, cp, T)
    return check_thm71(u, params, cp, T, variant)


def scan_thresholds(
    suite: list[TestFunction],
    theorem: str,
    lambdas,
    s_list,
    L: DiagonalOperator | None = None,
    params: ModelParams | None = None,
    T: float = 2.0,
    tol: float = 1e-9,
    executor=None,
) -> ThresholdTable:
    """Minimal normalised margin over the suite for every ``(lambda, s)``.

    The threshold is the least tested ``s`` from which on every margin (both
    terminal-weight variants where they apply, all ``lambda``) is at least
    ``-tol``.  ``executor`` (e.g. a thread pool) may be given to map cells.
    """
    if not suite:
        raise ValueError("suite must be nonempty")
    if theorem not in THEOREMS:
        raise ValueError(f"theorem must be one of {THEOREMS}")
    L = L or DiagonalOperator()
    params = params or ModelParams()
    variants = ("power",) if theorem == "5.2" else TERMINAL_VARIANTS
    s_sorted = sorted(s_list)
    cells = [(lam, s, u) for s in s_sorted for lam in lambdas for u in suite]
    runner = (lambda c: _run_one(theorem, c[2], c[0], c[1], "power", L, params, T))
    reports = list(executor.map(runner, cells)) if executor is not None else [runner(c) for c in cells]
    rows = []
    by_cell: dict[tuple, list[CarlemanReport]] = {}
    for (lam, s, _), rep in zip(cells, reports):
        by_cell.setdefault((lam, s), []).append(rep)
    ok_at_s = {}
    for (lam, s), reps in by_cell.items():
        row = {"lambda": lam, "s": s, "valid": all(r.valid for r in reps)}
        for v in variants:
            vals = [r.variant_margins[v] / r.scale if r.scale > 0 else 0.0 for r in reps]
            row[f"min_margin_{v}"] = float(min(vals))
        emps = [r.empirical_C for r in reps if r.empirical_C is not None]
        row["min_empirical_C"] = float(min(emps)) if emps else None
        rows.append(row)
        ok = all(row[f"min_margin_{v}"] >= -tol for v in variants)
        ok_at_s[s] = ok_at_s.get(s, True) and ok
    threshold = None
    for s in reversed(s_sorted):
        if not ok_at_s[s]:
            break
        threshold = s
    return ThresholdTable(theorem, rows, threshold, reports)
