"""Exact generating functions and degree formulas.

Series have nonnegative rational exponents and integer coefficients. All
parameters measured "in units of pi" are Fractions, so membership in the
critical sets is decided exactly.
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

from .errors import CriticalParameter, InvalidArgument


def as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        raise InvalidArgument("exact rationals required; got a float")
    return Fraction(value)


@dataclass(frozen=True)
class GeneralizedSeries:
    """Truncated series sum_j c_j x^{a_j} with rational a_j < truncation_bound."""

    terms: tuple[tuple[Fraction, int], ...]
    truncation_bound: Fraction

    @classmethod
    def from_dict(cls, terms: dict, bound) -> GeneralizedSeries:
        bound = as_fraction(bound)
        cleaned = {}
        for e, c in terms.items():
            e = as_fraction(e)
            if e < 0:
                raise InvalidArgument("exponents must be nonnegative")
            if e < bound and c:
                cleaned[e] = cleaned.get(e, 0) + int(c)
        items = tuple(sorted((e, c) for e, c in cleaned.items() if c))
        return cls(items, bound)

    @classmethod
    def one(cls, bound) -> GeneralizedSeries:
        return cls.from_dict({Fraction(0): 1}, bound)

    def as_dict(self) -> dict[Fraction, int]:
        return dict(self.terms)

    def coeff(self, exponent) -> int:
        return self.as_dict().get(as_fraction(exponent), 0)

    @property
    def exponents(self) -> list[Fraction]:
        return [e for e, _ in self.terms]

    def truncate(self, bound) -> GeneralizedSeries:
        bound = min(as_fraction(bound), self.truncation_bound)
        return GeneralizedSeries.from_dict(self.as_dict(), bound)

    def __add__(self, other: GeneralizedSeries) -> GeneralizedSeries:
        out = self.as_dict()
        for e, c in other.terms:
            out[e] = out.get(e, 0) + c
        return GeneralizedSeries.from_dict(out, min(self.truncation_bound, other.truncation_bound))

    def __mul__(self, other: GeneralizedSeries) -> GeneralizedSeries:
        bound = min(self.truncation_bound, other.truncation_bound)
        out: dict[Fraction, int] = {}
        for e1, c1 in self.terms:
            for e2, c2 in other.terms:
                e = e1 + e2
                if e < bound:
                    out[e] = out.get(e, 0) + c1 * c2
        return GeneralizedSeries.from_dict(out, bound)

    def partial_sum(self, below) -> int:
        """Sum of coefficients with exponent strictly below ``below``."""
        below = as_fraction(below)
        if below > self.truncation_bound:
            raise InvalidArgument("partial sum requested beyond the truncation bound")
        return sum(c for e, c in self.terms if e < below)

    def to_json(self) -> str:
        return json.dumps([{"exponent": str(e), "coeff": str(c)} for e, c in self.terms])

    @classmethod
    def from_json(cls, text: str, bound) -> GeneralizedSeries:
        return cls.from_dict({Fraction(t["exponent"]): int(t["coeff"]) for t in json.loads(text)}, bound)


def binomial_general(top: int, k: int) -> int:
    """C(top, k) for any integer top via the falling factorial."""
    if k < 0:
        return 0
    num = 1
    for i in range(k):
        num *= top - i
    den = 1
    for i in range(2, k + 1):
        den *= i
    return num // den


def one_minus_x_power(exponent: int, bound) -> GeneralizedSeries:
    """(1 - x)^exponent for an integer exponent (negative allowed)."""
    bound = as_fraction(bound)
    terms = {}
    k = 0
    while k < bound:
        c = binomial_general(exponent, k) * (-1) ** k
        if c:
            terms[Fraction(k)] = c
        if exponent >= 0 and k >= exponent:
            break
        k += 1
    return GeneralizedSeries.from_dict(terms, bound)


def binomial_monomial(exponent, bound) -> GeneralizedSeries:
    """1 - x^exponent."""
    return GeneralizedSeries.from_dict({Fraction(0): 1, as_fraction(exponent): -1}, bound)


@dataclass(frozen=True)
class SingularData:
    chi: int
    alphas: tuple[Fraction, ...] = ()
    betas: tuple[Fraction, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "chi", int(self.chi))
        object.__setattr__(self, "alphas", tuple(as_fraction(a) for a in self.alphas))
        object.__setattr__(self, "betas", tuple(as_fraction(b) for b in self.betas))
        if any(a < 0 for a in self.alphas) or any(b < 0 for b in self.betas):
            raise InvalidArgument("vortex weights must be nonnegative")


@dataclass(frozen=True)
class CriticalSet:
    values: tuple[Fraction, ...] = field(default=())

    def __contains__(self, value) -> bool:
        return as_fraction(value) in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)


def expand_xi0(data: SingularData, bound) -> GeneralizedSeries:
    """(1 - x)^{chi - |S_1|} times prod_q (1 - x^{1 + alpha_q}), truncated at ``bound``."""
    bound = as_fraction(bound)
    if bound <= 0:
        raise InvalidArgument("truncation bound must be positive")
    work = bound + 1
    series = one_minus_x_power(data.chi - len(data.alphas), work)
    for a in data.alphas:
        series = series * binomial_monomial(1 + a, work)
    return series.truncate(bound)


def expand_xi1(data: SingularData, bound) -> GeneralizedSeries:
    return (expand_xi0(data, as_fraction(bound) + 1) * one_minus_x_power(-1, as_fraction(bound) + 1)).truncate(bound)


def expand_xi2(chi: int, bound) -> GeneralizedSeries:
    """[1 - chi (1 + x)] (1 - x)^{chi - 1}, the Toda generating function."""
    bound = as_fraction(bound)
    work = bound + 1
    factor = GeneralizedSeries.from_dict({Fraction(0): 1 - chi, Fraction(1): -chi}, work)
    return (factor * one_minus_x_power(chi - 1, work)).truncate(bound)


def _sums_over_subsets(weights: Iterable[Fraction]) -> set[Fraction]:
    weights = list(weights)
    sums = {Fraction(0)}
    for w in weights:
        sums |= {s + w for s in sums}
    return sums


def critical_sets(data: SingularData, bound, s_alphas: Iterable = ()) -> tuple[CriticalSet, CriticalSet, CriticalSet]:
    """Critical values (in units of pi) up to ``bound``.

    Returns (Sigma, Sigma_1, Sigma_2). ``s_alphas`` are the weights of the
    fixed singular points S entering Sigma_2 together with the betas.
    """
    bound = as_fraction(bound)
    if bound <= 0:
        raise InvalidArgument("bound must be positive")
    subset_sums = _sums_over_subsets(8 * (1 + a) for a in data.alphas)
    sigma = set()
    for s in subset_sums:
        n = 0
        while 8 * n + s <= bound:
            v = 8 * n + s
            if v > 0:
                sigma.add(v)
            n += 1
    sigma1 = {Fraction(4 * n) for n in range(1, int(bound // 4) + 1)}
    shift = 4 * sum((1 + b for b in itertools.chain(data.betas, map(as_fraction, s_alphas))), Fraction(0))
    sigma2 = set()
    n = 1
    while 4 * n + shift <= bound:
        sigma2.add(4 * n + shift)
        n += 1
    return tuple(CriticalSet(tuple(sorted(s))) for s in (sigma, sigma1, sigma2))


def mean_field_degree(data: SingularData, rho) -> int:
    """Leray-Schauder degree of the mean field equation at rho (units of pi)."""
    rho = as_fraction(rho)
    if rho <= 0:
        raise InvalidArgument("rho must be positive")
    sigma, _, _ = critical_sets(data, rho)
    if rho in sigma:
        raise CriticalParameter(f"critical parameter: rho = {rho}*pi lies in Sigma")
    target = rho / 8
    return expand_xi0(data, target + 1).partial_sum(target)


def b_coeff(chi: int, k: int) -> int:
    """Coefficient of x^k in (1 - x)^{chi - 1}, i.e. C(k - chi, k); zero for k = -1."""
    if k < -1:
        raise InvalidArgument("k must be >= -1")
    if k == -1:
        return 0
    return binomial_general(k - chi, k)


class Rho1Window(enum.Enum):
    LOW = "(0,4pi)"
    HIGH = "(4pi,8pi)"

    @classmethod
    def parse(cls, value) -> Rho1Window:
        if isinstance(value, cls):
            return value
        text = str(value).replace(" ", "").replace("π", "pi")
        for w in cls:
            if text == w.value or text.lower() == w.name.lower():
                return w
        raise InvalidArgument(f"unknown rho1 window {value!r}")

    @classmethod
    def of(cls, rho1) -> Rho1Window:
        rho1 = as_fraction(rho1)
        if 0 < rho1 < 4:
            return cls.LOW
        if 4 < rho1 < 8:
            return cls.HIGH
        raise CriticalParameter(f"critical parameter: rho1 = {rho1}*pi outside (0,4pi) U (4pi,8pi)")


def toda_degree(chi: int, rho1_window, k: int) -> int:
    """Degree of the Toda system for rho2 in (4k pi, 4(k+1) pi)."""
    if k < 0:
        raise InvalidArgument("k must be >= 0")
    window = Rho1Window.parse(rho1_window)
    bk = b_coeff(chi, k)
    if window is Rho1Window.LOW:
        return bk
    return bk - chi * (bk + b_coeff(chi, k - 1))


def dirichlet_toda_degree(chi_domain: int, rho1_window, k: int) -> int:
    """Same counting with the Euler characteristic of a bounded domain."""
    return toda_degree(chi_domain, rho1_window, k)


def shadow_degree(chi: int, k: int) -> int:
    if k < 0:
        raise InvalidArgument("k must be >= 0")
    return chi * (b_coeff(chi, k) + b_coeff(chi, k - 1))


def rho2_window_index(rho2) -> int:
    """k with rho2 in (4k pi, 4(k+1) pi); rho2 in units of pi."""
    rho2 = as_fraction(rho2)
    if rho2 <= 0:
        raise InvalidArgument("rho2 must be positive")
    if rho2 % 4 == 0:
        raise CriticalParameter(f"critical parameter: rho2 = {rho2}*pi is a multiple of 4pi")
    return int(rho2 // 4)
