"""Compound-Poisson jumps, Brownian increments and the discretised forward state."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Union

import numpy as np
from scipy import integrate

if TYPE_CHECKING:
    from .problems import ProblemSpec

__all__ = [
    "Bernoulli",
    "ConstantVector",
    "DivergentIntegralError",
    "Exponential",
    "JumpLaw",
    "JumpRecord",
    "Normal",
    "PathBatch",
    "SimulationDiverged",
    "Uniform",
    "UnsupportedLawError",
    "compensator_exp_moment",
    "compensator_mean",
    "law_from_name",
    "sample_jump_size",
    "sample_jump_times",
    "simulate_batch",
    "trajectory_seed",
]

# stream purposes, first entry of every spawn key
PATHS, INITIAL_BUFFER, EXPORT, NET_INIT = 0, 1, 2, 3


class DivergentIntegralError(ValueError):
    pass


class UnsupportedLawError(ValueError):
    pass


class SimulationDiverged(ArithmeticError):
    def __init__(self, trajectory: int, step: int):
        super().__init__(f"forward state became non-finite on trajectory {trajectory} at step {step}")
        self.trajectory = trajectory
        self.step = step


class JumpLaw:
    """Distribution of a single jump size."""

    dim: int = 1
    scalar: bool = True

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """One draw of shape ``(dim,)``, or ``size`` draws of shape ``(size, dim)``."""
        n = 1 if size is None else size
        draws = self._draw(rng, n).reshape(n, self.dim)
        return draws[0] if size is None else draws

    def _draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def mean(self):
        raise NotImplementedError

    def exp_moment_minus_one(self) -> float:
        """E[exp(Z)] - 1."""
        raise NotImplementedError

    def integrate(self, fn: Callable[[np.ndarray | float], float]) -> float:
        """E[fn(Z)]."""
        raise NotImplementedError


@dataclass(frozen=True)
class Normal(JumpLaw):
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"Normal jump law needs sigma > 0, got {self.sigma}")

    def _draw(self, rng, n):
        return rng.normal(self.mu, self.sigma, size=n)

    def mean(self):
        return self.mu

    def exp_moment_minus_one(self):
        return math.exp(self.mu + 0.5 * self.sigma**2) - 1.0

    def integrate(self, fn):
        def weighted(z):
            return fn(z) * math.exp(-0.5 * ((z - self.mu) / self.sigma) ** 2)

        lo, hi = self.mu - 40 * self.sigma, self.mu + 40 * self.sigma
        val, _ = integrate.quad(weighted, lo, hi, points=[self.mu], epsabs=1e-13, epsrel=1e-13, limit=200)
        return val / (math.sqrt(2 * math.pi) * self.sigma)


@dataclass(frozen=True)
class Uniform(JumpLaw):
    """Uniform on [-delta, delta]."""

    delta: float

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"Uniform jump law needs delta > 0, got {self.delta}")

    def _draw(self, rng, n):
        return rng.uniform(-self.delta, self.delta, size=n)

    def mean(self):
        return 0.0

    def exp_moment_minus_one(self):
        d = self.delta
        return math.sinh(d) / d - 1.0

    def integrate(self, fn):
        val, _ = integrate.quad(fn, -self.delta, self.delta, epsabs=1e-13, epsrel=1e-13, limit=200)
        return val / (2 * self.delta)


@dataclass(frozen=True)
class Exponential(JumpLaw):
    """Density ``rate * exp(-rate * z)`` on z >= 0."""

    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"Exponential jump law needs rate > 0, got {self.rate}")

    def _draw(self, rng, n):
        return rng.exponential(1.0 / self.rate, size=n)

    def mean(self):
        return 1.0 / self.rate

    def exp_moment_minus_one(self):
        if self.rate <= 1:
            raise DivergentIntegralError(
                f"E[exp(Z)] is infinite for an exponential law with rate {self.rate} <= 1"
            )
        return self.rate / (self.rate - 1.0) - 1.0

    def integrate(self, fn):
        val, _ = integrate.quad(
            lambda z: fn(z) * self.rate * math.exp(-self.rate * z),
            # the tail past 80 / rate carries probability e^-80
            0.0, 80.0 / self.rate, epsabs=1e-13, epsrel=1e-13, limit=200,
        )
        return val


@dataclass(frozen=True)
class Bernoulli(JumpLaw):
    """Two-point law: ``a1`` with probability ``p``, else ``a2``."""

    a1: float
    a2: float
    p: float

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise ValueError(f"Bernoulli jump law needs 0 <= p <= 1, got {self.p}")

    def _draw(self, rng, n):
        return np.where(rng.random(n) < self.p, self.a1, self.a2)

    def mean(self):
        return self.p * self.a1 + (1 - self.p) * self.a2

    def exp_moment_minus_one(self):
        return self.p * math.exp(self.a1) + (1 - self.p) * math.exp(self.a2) - 1.0

    def integrate(self, fn):
        return self.p * fn(self.a1) + (1 - self.p) * fn(self.a2)


@dataclass(frozen=True)
class ConstantVector(JumpLaw):
    """Point mass at ``(c, ..., c)`` in dimension ``d``."""

    c: float
    d: int = 1
    scalar: bool = field(default=False, init=False, repr=False)

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"ConstantVector jump law needs d >= 1, got {self.d}")

    @property
    def dim(self):  # type: ignore[override]
        return self.d

    def _draw(self, rng, n):
        return np.full((n, self.d), float(self.c))

    def mean(self):
        return np.full(self.d, float(self.c))

    def exp_moment_minus_one(self):
        raise UnsupportedLawError("the constant vector law pairs with G(x, z) = z; use compensator_mean")

    def integrate(self, fn):
        return fn(np.full(self.d, float(self.c)))


_LAWS = {
    "normal": (Normal, (0.4, 0.25)),
    "uniform": (Uniform, (0.4,)),
    "exponential": (Exponential, (3.0,)),
    "bernoulli": (Bernoulli, (-0.2, 0.4, 0.7)),
    "constant": (ConstantVector, (0.1,)),
}


def law_from_name(name: str, params=None, d: int = 1) -> JumpLaw:
    """Build a law from a CLI-style name; ``params=None`` gives the benchmark defaults."""
    key = name.lower()
    if key not in _LAWS:
        raise ValueError(f"unknown jump law {name!r}; choose from {sorted(_LAWS)}")
    cls, defaults = _LAWS[key]
    args = tuple(float(v) for v in (defaults if params is None or len(params) == 0 else params))
    if len(args) != len(defaults):
        raise ValueError(f"jump law {name!r} takes {len(defaults)} parameters, got {len(args)}")
    if cls is ConstantVector:
        return ConstantVector(args[0], d)
    return cls(*args)


def compensator_exp_moment(law: JumpLaw) -> float:
    """E[exp(Z)] - 1, the compensator factor for G(x, z) = x (exp(z) - 1)."""
    return law.exp_moment_minus_one()


def compensator_mean(law: JumpLaw):
    """E[Z], the compensator for G(x, z) = z."""
    return law.mean()


def sample_jump_size(law: JumpLaw, rng: np.random.Generator) -> np.ndarray:
    return law.sample(rng)


def sample_jump_times(lam: float, T: float, rng: np.random.Generator) -> np.ndarray:
    """Poisson arrival times in (0, T] from cumulated Exponential(lam) gaps."""
    if lam < 0:
        raise ValueError(f"jump intensity must be >= 0, got {lam}")
    if not T > 0:
        raise ValueError(f"horizon must be > 0, got {T}")
    if lam == 0:
        return np.empty(0)
    scale = 1.0 / lam
    times = []
    t = rng.exponential(scale)
    while t <= T:
        times.append(t)
        t += rng.exponential(scale)
    return np.asarray(times, dtype=np.float64)


@dataclass(frozen=True)
class JumpRecord:
    time: float
    size: np.ndarray


SeedLike = Union[int, np.random.SeedSequence]


def trajectory_seed(seed: SeedLike, j: int) -> np.random.SeedSequence:
    """Independent stream for trajectory ``j`` below ``seed``."""
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.SeedSequence(base.entropy, spawn_key=tuple(base.spawn_key) + (j,))


@dataclass(frozen=True)
class PathBatch:
    """M simulated trajectories on a uniform grid of N intervals.

    Jumps are stored flat: ``jump_traj[i]`` and ``jump_step[i]`` locate jump
    ``i``, which falls in ``(t_step, t_{step+1}]``.
    """

    T: float
    states: np.ndarray
    brownian: np.ndarray
    jump_traj: np.ndarray
    jump_step: np.ndarray
    jump_time: np.ndarray
    jump_size: np.ndarray

    @property
    def M(self) -> int:
        return self.states.shape[0]

    @property
    def N(self) -> int:
        return self.brownian.shape[1]

    @property
    def d(self) -> int:
        return self.states.shape[2]

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    @property
    def jumps(self) -> list[list[JumpRecord]]:
        out: list[list[JumpRecord]] = [[] for _ in range(self.M)]
        for j, t, z in zip(self.jump_traj, self.jump_time, self.jump_size):
            out[j].append(JumpRecord(float(t), z))
        return out

    def jump_counts(self) -> np.ndarray:
        return np.bincount(self.jump_traj, minlength=self.M)

    def jump_flags(self) -> np.ndarray:
        """(M, N) boolean: at least one jump inside interval n."""
        flags = np.zeros((self.M, self.N), dtype=bool)
        flags[self.jump_traj, self.jump_step] = True
        return flags

    def step_jumps(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Trajectory indices and sizes of the jumps in interval n."""
        lo, hi = np.searchsorted(self.jump_step, [n, n + 1])
        return self.jump_traj[lo:hi], self.jump_size[lo:hi]


def _draw_trajectory(problem: ProblemSpec, N: int, dt: float, seq: np.random.SeedSequence):
    rng = np.random.Generator(np.random.PCG64(seq))
    dW = rng.normal(0.0, math.sqrt(dt), size=(N, problem.d))
    times = sample_jump_times(problem.lam, problem.T, rng)
    sizes = problem.law.sample(rng, len(times))
    return dW, times, sizes


def _step_index(times: np.ndarray, dt: float, N: int) -> np.ndarray:
    # left-open bins: a jump exactly at t_n belongs to (t_{n-1}, t_n]
    return np.clip(np.ceil(times / dt).astype(np.int64) - 1, 0, N - 1)


def simulate_batch(
    problem: ProblemSpec,
    M: int,
    N: int,
    rng: SeedLike,
    workers: int = 1,
) -> PathBatch:
    """Simulate the compensated forward process for M trajectories.

    Each trajectory draws from its own stream derived from ``rng``, so the
    result does not depend on ``workers``.
    """
    if M < 1 or N < 1:
        raise ValueError(f"need M >= 1 and N >= 1, got M={M}, N={N}")
    dt = problem.T / N
    seqs = [trajectory_seed(rng, j) for j in range(M)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            draws = list(pool.map(lambda s: _draw_trajectory(problem, N, dt, s), seqs))
    else:
        draws = [_draw_trajectory(problem, N, dt, s) for s in seqs]

    d = problem.d
    brownian = np.stack([dw for dw, _, _ in draws])
    counts = np.array([len(t) for _, t, _ in draws], dtype=np.int64)
    jump_traj = np.repeat(np.arange(M), counts)
    jump_time = np.concatenate([t for _, t, _ in draws]) if counts.sum() else np.empty(0)
    jump_size = (
        np.concatenate([z for _, _, z in draws])
        if counts.sum()
        else np.empty((0, problem.law.dim))
    )
    jump_step = _step_index(jump_time, dt, N)
    order = np.argsort(jump_step, kind="stable")
    jump_traj, jump_step = jump_traj[order], jump_step[order]
    jump_time, jump_size = jump_time[order], jump_size[order]

    states = np.empty((M, N + 1, d))
    states[:, 0] = problem.xi
    bounds = np.searchsorted(jump_step, np.arange(N + 1))
    for n in range(N):
        x = states[:, n]
        nxt = (
            x
            + problem.drift(x) * dt
            + problem.diffuse(x, brownian[:, n])
            - dt * problem.lam * problem.compensator(x)
        )
        lo, hi = bounds[n], bounds[n + 1]
        if hi > lo:
            idx = jump_traj[lo:hi]
            np.add.at(nxt, idx, problem.jump_coef(x[idx], jump_size[lo:hi]))
        bad = ~np.isfinite(nxt).all(axis=1)
        if bad.any():
            raise SimulationDiverged(int(np.argmax(bad)), n)
        states[:, n + 1] = nxt

    return PathBatch(
        T=problem.T,
        states=states,
        brownian=brownian,
        jump_traj=jump_traj,
        jump_step=jump_step,
        jump_time=jump_time,
        jump_size=jump_size,
    )
