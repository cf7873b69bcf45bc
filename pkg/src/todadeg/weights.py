"""Positive weight functions given as finite trigonometric expressions.

A weight is ``const + sum coef * f(2 pi kx x1) * g(2 pi ky x2)`` with f, g
each cos or sin. Values and derivatives are exact. ``SpectralFunction``
offers the same interface for a sampled field via its trigonometric
interpolant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .torus import TorusField, TorusGrid

_PHASE = {"cos": 0.0, "sin": -math.pi / 2}


@dataclass(frozen=True)
class TrigTerm:
    coef: float
    x: str = "cos"
    kx: int = 0
    y: str = "cos"
    ky: int = 0

    def __post_init__(self):
        if self.x not in _PHASE or self.y not in _PHASE:
            raise InvalidArgument("trig factors must be 'cos' or 'sin'")

    def _factor(self, t, kind, k, order):
        a = 2.0 * math.pi * k
        return a**order * np.cos(a * t + _PHASE[kind] + order * math.pi / 2)

    def derivative(self, x1, x2, a=0, b=0):
        return self.coef * self._factor(x1, self.x, self.kx, a) * self._factor(x2, self.y, self.ky, b)


class _SmoothMixin:
    def _split(self, points):
        pts = np.asarray(points, dtype=float)
        return pts[..., 0], pts[..., 1]

    def value(self, points):
        return self.derivative(points, 0, 0)

    def grad(self, points):
        return np.stack([self.derivative(points, 1, 0), self.derivative(points, 0, 1)], -1)

    def hess(self, points):
        hxx = self.derivative(points, 2, 0)
        hxy = self.derivative(points, 1, 1)
        hyy = self.derivative(points, 0, 2)
        return np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)

    def log_grad(self, points):
        return self.grad(points) / self.value(points)[..., None]

    def log_hess(self, points):
        v = self.value(points)[..., None, None]
        g = self.grad(points)
        return self.hess(points) / v - g[..., :, None] * g[..., None, :] / v**2

    def log_laplacian(self, points):
        h = self.log_hess(points)
        return h[..., 0, 0] + h[..., 1, 1]


@dataclass(frozen=True)
class TrigWeight(_SmoothMixin):
    const: float = 1.0
    terms: tuple[TrigTerm, ...] = ()

    def derivative(self, points, a=0, b=0):
        x1, x2 = self._split(points)
        out = np.full(np.shape(x1), self.const if a == b == 0 else 0.0)
        for t in self.terms:
            out = out + t.derivative(x1, x2, a, b)
        return out

    def field(self, grid: TorusGrid) -> TorusField:
        x1, x2 = grid.coords()
        vals = self.derivative(np.stack([x1, x2], -1))
        if np.any(vals <= 0):
            raise InvalidArgument("weight function must be positive on the grid")
        return TorusField(grid, vals)

    def to_dict(self) -> dict:
        return {"const": self.const, "terms": [dict(coef=t.coef, x=t.x, kx=t.kx, y=t.y, ky=t.ky) for t in self.terms]}

    @classmethod
    def from_dict(cls, d) -> TrigWeight:
        if isinstance(d, (int, float)):
            return cls(float(d))
        return cls(float(d.get("const", 0.0)), tuple(TrigTerm(**t) for t in d.get("terms", ())))

    @classmethod
    def cos_cos(cls, amp: float, k: int = 1) -> TrigWeight:
        return cls(1.0, (TrigTerm(amp, "cos", k, "cos", k),))


@dataclass
class SpectralFunction(_SmoothMixin):
    """A sampled field seen through its trigonometric interpolant."""

    field: TorusField

    def derivative(self, points, a=0, b=0):
        pts = np.asarray(points, dtype=float)
        flat = pts.reshape(-1, 2)
        return self.field.eval_at(flat, (a, b)).reshape(pts.shape[:-1])

    def field_on(self, grid: TorusGrid) -> TorusField:
        if grid != self.field.grid:
            raise InvalidArgument("sampled weight lives on a different grid")
        return self.field


def as_smooth(obj):
    if isinstance(obj, (TrigWeight, SpectralFunction)):
        return obj
    if isinstance(obj, TorusField):
        return SpectralFunction(obj)
    if isinstance(obj, (int, float)):
        return TrigWeight(float(obj))
    if isinstance(obj, dict):
        return TrigWeight.from_dict(obj)
    raise InvalidArgument(f"cannot interpret {type(obj).__name__} as a weight")


def sample(obj, grid: TorusGrid) -> TorusField:
    s = as_smooth(obj)
    if isinstance(s, SpectralFunction):
        return s.field_on(grid)
    return s.field(grid)
