"""Benchmark PIDE instances with known exact solutions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .stochastic import ConstantVector, Exponential, JumpLaw, Normal

__all__ = ["PROBLEMS", "ProblemSpec", "highdim", "make_problem", "pide_residual", "pure_jump_1d", "robustness_1d"]

Array = np.ndarray


@dataclass(frozen=True)
class ProblemSpec:
    """A PIDE ``u_t + b.grad u + 1/2 Tr(s s^T H u) + A u + f = 0`` with ``u(T) = g``.

    All callables act on row batches: ``x`` has shape (M, d). ``compensator(x)``
    is the jump-law expectation of ``jump_coef(x, Z)`` (without the intensity).
    ``oracle`` maps an input tensor of (t, x) rows to the exact pair
    (u, non-local term) using engine ops, so it can stand in for the network.
    """

    name: str
    d: int
    T: float
    xi: Array
    lam: float
    law: JumpLaw
    drift: Callable[[Array], Array]
    sigma: Callable[[Array], Array]
    jump_coef: Callable[[Array, Array], Array]
    compensator: Callable[[Array], Array]
    driver: Callable
    terminal: Callable[[Array], Array]
    terminal_grad: Callable[[Array], Array]
    exact: Optional[Callable[[float, Array], Array]] = None
    nonlocal_exact: Optional[Callable[[float, Array], Array]] = None
    oracle: Optional[Callable[[ad.Tensor], ad.Tensor]] = None
    diffusion_const: Optional[Array] = None
    driver_uses_z: bool = False
    params: dict = field(default_factory=dict)

    def diffuse(self, x: Array, dW: Array) -> Array:
        """Rows of sigma(x) @ dW."""
        if self.diffusion_const is not None:
            return dW @ self.diffusion_const.T
        return np.einsum("mij,mj->mi", self.sigma(x), dW)

    @property
    def has_diffusion(self) -> bool:
        return self.diffusion_const is None or bool(np.any(self.diffusion_const))

    @property
    def y0_exact(self) -> float:
        if self.exact is None:
            raise ValueError(f"problem {self.name!r} has no exact solution")
        return float(self.exact(0.0, self.xi[None, :])[0])


def _lognormal_jump(x, z):
    return x * np.expm1(z)


def _constant_sigma(d: int, value: float):
    mat = value * np.eye(d)

    def sigma(x):
        return np.broadcast_to(mat, (x.shape[0], d, d))

    return sigma, mat


def _scalar_jump_problem(name, *, T, lam, law, eps, theta, params) -> ProblemSpec:
    """1-D family with u = x, b = eps x, sigma = theta, G = x (e^z - 1), f = -eps x."""
    if law.dim != 1 or not law.scalar:
        raise ValueError(f"{name} needs a scalar jump law, got {law!r}")
    kappa = law.exp_moment_minus_one()
    sigma, mat = _constant_sigma(1, theta)

    def oracle(inputs):
        x = inputs[:, 1:2]
        return ad.concat([x, x * (lam * kappa)], axis=1)

    return ProblemSpec(
        name=name,
        d=1,
        T=T,
        xi=np.ones(1),
        lam=lam,
        law=law,
        drift=lambda x: eps * x,
        sigma=sigma,
        jump_coef=_lognormal_jump,
        compensator=lambda x: x * kappa,
        driver=lambda t, x, y, z: -eps * x[:, 0],
        terminal=lambda x: x[:, 0].copy(),
        terminal_grad=lambda x: np.ones_like(x),
        exact=lambda t, x: x[:, 0].copy(),
        nonlocal_exact=lambda t, x: lam * kappa * x[:, 0],
        oracle=oracle,
        diffusion_const=mat,
        params=params,
    )


def pure_jump_1d(lam: float = 0.3, mu: float = 0.4, sigma_jump: float = 0.25, T: float = 1.0) -> ProblemSpec:
    """Pure-jump problem with normal log-jumps; exact solution u(t, x) = x."""
    return _scalar_jump_problem(
        "pure_jump_1d",
        T=T,
        lam=lam,
        law=Normal(mu, sigma_jump),
        eps=0.0,
        theta=0.0,
        params={"lam": lam, "mu": mu, "sigma_jump": sigma_jump, "T": T},
    )


def robustness_1d(
    epsilon: float = 0.25,
    theta: float = 0.0,
    lam: float = 0.3,
    law: JumpLaw | None = None,
    T: float = 1.0,
) -> ProblemSpec:
    """Drift, Brownian and jump terms together; exact solution u(t, x) = x."""
    law = Normal(0.4, 0.25) if law is None else law
    if isinstance(law, Exponential):
        law.exp_moment_minus_one()  # rejects rate <= 1
    return _scalar_jump_problem(
        "robustness_1d",
        T=T,
        lam=lam,
        law=law,
        eps=epsilon,
        theta=theta,
        params={"epsilon": epsilon, "theta": theta, "lam": lam, "law": law, "T": T},
    )


def highdim(
    d: int = 100,
    epsilon: float = 0.0,
    theta: float = 0.3,
    lam: float = 0.3,
    c: float = 0.1,
    T: float = 1.0,
) -> ProblemSpec:
    """Point-mass jumps of (c, ..., c) in d dimensions; exact u = |x|^2 / d.

    Starts from (1, ..., 1) so the exact initial value is 1.
    """
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    law = ConstantVector(c, d)
    sigma, mat = _constant_sigma(d, theta)
    shift = np.full(d, float(c))
    source = lam * c * c + theta * theta

    def driver(t, x, y, z):
        return -(source + (epsilon / d) * np.sum(x * x, axis=1))

    def u(t, x):
        return np.sum(x * x, axis=1) / d

    def nonlocal_exact(t, x):
        return lam * (2 * c * np.sum(x, axis=1) + d * c * c) / d

    def oracle(inputs):
        x = inputs[:, 1:]
        n = x.shape[0]
        val = ad.sum(x * x, axis=1) / d
        jump = ad.sum(x, axis=1) * (2 * c * lam / d) + lam * c * c
        return ad.concat([ad.reshape(val, (n, 1)), ad.reshape(jump, (n, 1))], axis=1)

    return ProblemSpec(
        name="highdim",
        d=d,
        T=T,
        xi=np.ones(d),
        lam=lam,
        law=law,
        drift=lambda x: 0.5 * epsilon * x,
        sigma=sigma,
        jump_coef=lambda x, z: np.broadcast_to(z, x.shape).copy(),
        compensator=lambda x: np.broadcast_to(shift, x.shape),
        driver=driver,
        terminal=lambda x: u(T, x),
        terminal_grad=lambda x: 2.0 * x / d,
        exact=u,
        nonlocal_exact=nonlocal_exact,
        oracle=oracle,
        diffusion_const=mat,
        params={"d": d, "epsilon": epsilon, "theta": theta, "lam": lam, "c": c, "T": T},
    )


PROBLEMS: dict[str, Callable[..., ProblemSpec]] = {
    "pure_jump_1d": pure_jump_1d,
    "robustness_1d": robustness_1d,
    "highdim": highdim,
}


def make_problem(name: str, **kwargs) -> ProblemSpec:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(**kwargs)


def pide_residual(problem: ProblemSpec, t: float, x: Array, h: float = 1e-3) -> float:
    """Residual of the exact solution at one point, by finite differences and quadrature."""
    if problem.exact is None:
        raise ValueError(f"problem {problem.name!r} has no exact solution")
    x = np.asarray(x, dtype=np.float64)
    d = problem.d

    def u(tt, pts):
        return problem.exact(tt, np.atleast_2d(pts))

    u0 = float(u(t, x)[0])
    u_t = float(u(t + h, x)[0] - u(t - h, x)[0]) / (2 * h)
    eye = np.eye(d)
    grad = np.array([(u(t, x + h * e)[0] - u(t, x - h * e)[0]) / (2 * h) for e in eye])

    sig = problem.sigma(x[None, :])[0]
    a = sig @ sig.T
    second = 0.0
    for i, j in zip(*np.nonzero(a)):
        if i == j:
            hij = (u(t, x + h * eye[i])[0] - 2 * u0 + u(t, x - h * eye[i])[0]) / h**2
        else:
            hij = (
                u(t, x + h * (eye[i] + eye[j]))[0]
                - u(t, x + h * (eye[i] - eye[j]))[0]
                - u(t, x - h * (eye[i] - eye[j]))[0]
                + u(t, x - h * (eye[i] + eye[j]))[0]
            ) / (4 * h * h)
        second += a[i, j] * hij

    def integrand(z):
        jump = problem.jump_coef(x[None, :], np.reshape(z, (1, -1)))[0]
        return float(u(t, x + jump)[0] - u0 - jump @ grad)

    nonlocal_term = problem.lam * problem.law.integrate(integrand)
    drift = problem.drift(x[None, :])[0] @ grad
    z = sig.T @ grad
    f = float(problem.driver(t, x[None, :], np.array([u0]), z[None, :])[0])
    return u_t + drift + 0.5 * second + nonlocal_term + f
