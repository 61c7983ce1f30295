"""Built-in manufactured control problems on the unit square."""

from __future__ import annotations

import enum

import numpy as np

from .ipdg import EllipticCoeffs
from .ocp import Box, ExactSolution, IntegralLowerBound, LowerBound, ProblemSpec

PI = np.pi


class ExampleId(str, enum.Enum):
    EX1 = "ex1"     # lower bound u >= 0
    EX2 = "ex2"     # box 0 <= u <= 1, cubic control cost
    EX3 = "ex3"     # integral constraint, smooth control

    @classmethod
    def parse(cls, value) -> "ExampleId":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(e.value for e in cls)
            raise ValueError(f"unknown example {value!r}; expected one of {names}") from None


def _xy(pts):
    pts = np.asarray(pts, dtype=float)
    return pts[..., 0], pts[..., 1]


def adjoint_exact(pts):
    x, y = _xy(pts)
    return np.sin(PI * x) * np.sin(PI * y)


def adjoint_exact_grad(pts):
    x, y = _xy(pts)
    return PI * np.stack([np.cos(PI * x) * np.sin(PI * y),
                          np.sin(PI * x) * np.cos(PI * y)], axis=-1)


def state_exact(pts):
    return 2 * PI ** 2 * adjoint_exact(pts)


def state_exact_grad(pts):
    return 2 * PI ** 2 * adjoint_exact_grad(pts)


def cubic_shift(p):
    """Root ``s`` of ``s + 4 s |s| = p / 2``."""
    p = np.asarray(p, dtype=float)
    a = np.abs(p)
    s = a / (1 + np.sqrt(1 + 8 * a))    # = (-1 + sqrt(1 + 8a)) / 8, cancellation-free
    return np.sign(p) * s


def _tracking(y, pts):
    return y


def _tracking_cost(y, pts):
    return 0.5 * y * y


def _zero(pts):
    return np.zeros(np.shape(pts)[:-1])


def _ex1():
    def ud(pts):
        x, y = _xy(pts)
        return 1 - np.sin(PI * x / 2) - np.sin(PI * y / 2)

    def u_exact(pts):
        return np.maximum(ud(pts) - adjoint_exact(pts), 0.0)

    def f(pts):
        return 4 * PI ** 4 * adjoint_exact(pts) - u_exact(pts)

    spec = ProblemSpec(
        coeffs=EllipticCoeffs(source=f, boundary=_zero),
        g_prime=_tracking, g=_tracking_cost,
        j_prime=lambda u, pts: u - ud(pts),
        j=lambda u, pts: 0.5 * (u - ud(pts)) ** 2,
        c_B=1.0, alpha=1.0, beta=1.0, constraint=LowerBound(0.0),
        exact=ExactSolution(state_exact, u_exact, adjoint_exact, state_exact_grad,
                            adjoint_exact_grad),
        u_d=ud, name="ex1")
    return spec


def _ex2():
    def ud(pts):
        x, y = _xy(pts)
        return 1.5 - x - y

    def u_exact(pts):
        return np.clip(ud(pts) - cubic_shift(adjoint_exact(pts)), 0.0, 1.0)

    def f(pts):
        return 4 * PI ** 4 * adjoint_exact(pts) - 0.5 * u_exact(pts)

    def jp(u, pts):
        v = u - ud(pts)
        return v + 4 * v * np.abs(v)

    def j(u, pts):
        v = u - ud(pts)
        return 0.5 * v * v + 4.0 / 3.0 * np.abs(v) ** 3

    spec = ProblemSpec(
        coeffs=EllipticCoeffs(source=f, boundary=_zero),
        g_prime=_tracking, g=_tracking_cost, j_prime=jp, j=j,
        c_B=0.5, alpha=1.0, beta=1.0, constraint=Box(0.0, 1.0),
        exact=ExactSolution(state_exact, u_exact, adjoint_exact, state_exact_grad,
                            adjoint_exact_grad),
        u_d=ud, name="ex2")
    return spec


# mean of u_d - p over the unit square for the integral-constraint example
EX3_MEAN = -1.0 - 4.0 / PI ** 2


def _ex3():
    def ud(pts):
        x, y = _xy(pts)
        return 1 - 2 * x - 2 * y

    def u_exact(pts):
        return ud(pts) - adjoint_exact(pts) - min(0.0, EX3_MEAN)

    def f(pts):
        return 4 * PI ** 4 * adjoint_exact(pts) - u_exact(pts)

    spec = ProblemSpec(
        coeffs=EllipticCoeffs(source=f, boundary=_zero),
        g_prime=_tracking, g=_tracking_cost,
        j_prime=lambda u, pts: u - ud(pts),
        j=lambda u, pts: 0.5 * (u - ud(pts)) ** 2,
        c_B=1.0, alpha=1.0, beta=1.0, constraint=IntegralLowerBound(0.0),
        exact=ExactSolution(state_exact, u_exact, adjoint_exact, state_exact_grad,
                            adjoint_exact_grad),
        u_d=ud, name="ex3")
    return spec


_BUILDERS = {ExampleId.EX1: _ex1, ExampleId.EX2: _ex2, ExampleId.EX3: _ex3}

# step sizes that converge for each example; the cubic cost in ex2 makes
# j' much stiffer than the identity
DEFAULT_RHO = {ExampleId.EX1: 1.0, ExampleId.EX2: 0.1, ExampleId.EX3: 1.0}


def make_example(example) -> ProblemSpec:
    """Problem data and exact solution of a built-in example."""
    return _BUILDERS[ExampleId.parse(example)]()
