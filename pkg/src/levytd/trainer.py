"""Temporal-difference training of the two-output network along simulated paths."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .network import NetConfig, ResidualNet
from .problems import ProblemSpec
from .stochastic import INITIAL_BUFFER, NET_INIT, PATHS, PathBatch, simulate_batch

__all__ = [
    "LossBreakdown",
    "MetricsRecord",
    "StepInfo",
    "TrainConfig",
    "TrainResult",
    "TrainState",
    "TrainingDiverged",
    "adam_step",
    "init_state",
    "learning_rate",
    "loss1",
    "loss2",
    "loss3",
    "loss4",
    "td_error",
    "train",
    "window_loss",
    "y0_estimate",
]

logger = logging.getLogger(__name__)

Model = Callable[[ad.Tensor], ad.Tensor]


MARTINGALE_LOSSES = ("abs", "square")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    M: int = 1000
    N: int = 50
    iterations: int = 400
    td_step: int = 1
    lr0: float = 5e-5
    lr_drop_every: int = 5000
    lr_drop_factor: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 2023
    log_every: int = 500
    # differentiate through n1 at the far end of the TD pair
    target_grad: bool = True
    # False: n1's jump increments enter loss4 as constants, so it steers n2 only
    martingale_n1_grad: bool = True
    # "abs": |mean|, whose gradient settles at the batch median; "square": mean**2
    martingale_loss: str = "square"
    timing: bool = False
    workers: int = 1

    def validate(self) -> None:
        for name in ("M", "N", "td_step", "lr_drop_every", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.N % self.td_step:
            raise ValueError(f"td_step {self.td_step} does not divide N={self.N}")
        if not self.lr0 > 0 or not self.lr_drop_factor > 0:
            raise ValueError("lr0 and lr_drop_factor must be positive")
        if self.martingale_loss not in MARTINGALE_LOSSES:
            raise ValueError(f"martingale_loss must be one of {MARTINGALE_LOSSES}, got {self.martingale_loss!r}")


@dataclass(frozen=True)
class LossBreakdown:
    loss1: float
    loss2: float
    loss3: float
    loss4: float

    @property
    def total(self) -> float:
        return self.loss1 + self.loss2 + self.loss3 + self.loss4


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    update: int
    y0_estimate: float
    y0_rel_error: float
    loss1: float
    loss2: float
    loss3: float
    loss4: float
    lr: float
    seconds: float


@dataclass(frozen=True)
class StepInfo:
    iteration: int
    start: int
    k: int
    update_count: int
    losses: LossBreakdown
    buffer_versions: tuple[int, ...]
    lr: float


def learning_rate(update_count: int, lr0: float = 5e-5, every: int = 5000, factor: float = 5.0) -> float:
    return lr0 / factor ** (update_count // every)


@dataclass
class TrainState:
    net: ResidualNet
    m: list[np.ndarray]
    v: list[np.ndarray]
    terminal_buffer: np.ndarray
    update_count: int = 0
    iteration: int = 0
    # iteration whose X_T fills the buffer; -1 for the initial simulation
    buffer_version: int = -1
    lr0: float = 5e-5
    lr_drop_every: int = 5000
    lr_drop_factor: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    @property
    def lr(self) -> float:
        return learning_rate(self.update_count, self.lr0, self.lr_drop_every, self.lr_drop_factor)


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[MetricsRecord] = field(default_factory=list)


def init_state(problem: ProblemSpec, config: TrainConfig, net: ResidualNet | None = None) -> TrainState:
    """Fresh network and optimiser moments; the terminal buffer comes from one
    untrained simulation of the forward process."""
    config.validate()
    if net is None:
        net = ResidualNet.init(
            NetConfig.for_dimension(problem.d),
            np.random.SeedSequence(config.seed, spawn_key=(NET_INIT,)),
        )
    seq = np.random.SeedSequence(config.seed, spawn_key=(INITIAL_BUFFER,))
    buffer = simulate_batch(problem, config.M, config.N, seq, workers=config.workers).states[:, -1].copy()
    params = net.parameters()
    return TrainState(
        net=net,
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
        terminal_buffer=buffer,
        lr0=config.lr0,
        lr_drop_every=config.lr_drop_every,
        lr_drop_factor=config.lr_drop_factor,
        beta1=config.beta1,
        beta2=config.beta2,
        adam_eps=config.adam_eps,
    )


def adam_step(state: TrainState, grads: Sequence[np.ndarray]) -> TrainState:
    """One bias-corrected Adam update at the scheduled learning rate."""
    params = state.net.parameters()
    if len(grads) != len(params):
        raise ValueError(f"{len(grads)} gradients for {len(params)} parameters")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {p.name} at update {state.update_count}")
    lr = state.lr
    b1, b2 = state.beta1, state.beta2
    step = state.update_count + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.adam_eps)
    state.update_count = step
    return state


class _Rows:
    """Collects (t, x) rows for one batched network evaluation."""

    def __init__(self):
        self.t: list[np.ndarray] = []
        self.x: list[np.ndarray] = []
        self.n = 0

    def add(self, t: float, x: np.ndarray) -> slice:
        start = self.n
        self.t.append(np.full(x.shape[0], t))
        self.x.append(x)
        self.n += x.shape[0]
        return slice(start, self.n)

    def evaluate(self, model: Model, tape: ad.Tape, with_grad: bool):
        if self.n == 0:
            return None, None, None
        inputs = ad.Tensor(
            np.column_stack([np.concatenate(self.t), np.concatenate(self.x)]),
            requires_grad=with_grad,
        )
        out = model(inputs)
        n1, n2 = out[:, 0], out[:, 1]
        gx = None
        if with_grad:
            (g,) = tape.gradient(ad.sum(n1), [inputs], create_graph=True)
            gx = g[:, 1:]
        return n1, n2, gx


@dataclass
class _Window:
    total: ad.Tensor
    losses: LossBreakdown
    td: ad.Tensor
    martingale: list[ad.Tensor]


def window_loss(
    model: Model,
    problem: ProblemSpec,
    batch: PathBatch,
    start: int,
    k: int,
    buffers: Sequence[tuple[np.ndarray, int]],
    tape: ad.Tape,
    target_grad: bool = True,
    martingale_n1_grad: bool = True,
    martingale_loss: str = "square",
) -> _Window:
    """Loss over the TD pair (t_start, t_{start+k}), recorded on ``tape``.

    ``buffers`` lists (terminal states, number of steps in the window that
    use them); the terminal losses are weighted by count / N.
    """
    M, N, dt = batch.M, batch.N, batch.dt
    times = batch.times
    need_z = problem.has_diffusion or problem.driver_uses_z
    steps = range(start, start + k)

    graded, plain = _Rows(), _Rows()
    cur = {m: (graded if need_z else plain).add(times[m], batch.states[:, m]) for m in steps}
    end = plain.add(times[start + k], batch.states[:, start + k])
    jumps = {}
    for m in steps:
        idx, sizes = batch.step_jumps(m)
        if idx.size:
            x = batch.states[idx, m]
            jumps[m] = (idx, plain.add(times[m], x + problem.jump_coef(x, sizes)))
    term = [graded.add(problem.T, buf) for buf, _ in buffers]

    g1, g2, ggx = graded.evaluate(model, tape, with_grad=True)
    p1, p2, _ = plain.evaluate(model, tape, with_grad=False)
    src1, src2 = (g1, g2) if need_z else (p1, p2)

    reward = None
    martingale = []
    loss4 = None
    for m in steps:
        n1_m, n2_m = src1[cur[m]], src2[cur[m]]
        mart = mart4 = -dt * n2_m
        if m in jumps:
            idx, rows = jumps[m]
            counts = np.bincount(idx, minlength=M).astype(np.float64)
            increments = ad.segment_sum(p1[rows], idx, M) - n1_m * counts
            mart = mart + increments
            mart4 = mart4 + (increments if martingale_n1_grad else increments.detach())
        martingale.append(mart)
        mean4 = ad.mean(mart4)
        a4 = ad.abs(mean4) if martingale_loss == "abs" else mean4 * mean4
        loss4 = a4 if loss4 is None else loss4 + a4

        x_m = batch.states[:, m]
        z = None
        if need_z:
            z = ad.batched_matvec(ggx[cur[m]], _sigma(problem, x_m))
        f = problem.driver(times[m], x_m, n1_m, z)
        r = mart - dt * (f if isinstance(f, ad.Tensor) else ad.Tensor(f))
        if problem.has_diffusion:
            r = r + ad.sum(z * batch.brownian[:, m], axis=1)
        reward = r if reward is None else reward + r

    far = p1[end]
    if not target_grad:
        far = far.detach()
    td = reward + src1[cur[start]] - far
    loss1 = ad.mean(td * td)

    loss2 = loss3 = None
    for (buf, count), rows in zip(buffers, term):
        w = count / N
        diff = g1[rows] - problem.terminal(buf)
        l2 = ad.mean(diff * diff) * w
        gdiff = ggx[rows] - problem.terminal_grad(buf)
        l3 = ad.mean(ad.sum(gdiff * gdiff, axis=1)) * w
        loss2 = l2 if loss2 is None else loss2 + l2
        loss3 = l3 if loss3 is None else loss3 + l3
    if loss2 is None:
        loss2 = loss3 = ad.Tensor(0.0)

    total = loss1 + loss2 + loss3 + loss4
    losses = LossBreakdown(loss1.item(), loss2.item(), loss3.item(), loss4.item())
    return _Window(total=total, losses=losses, td=td, martingale=martingale)


def _sigma(problem: ProblemSpec, x: np.ndarray) -> np.ndarray:
    return problem.diffusion_const if problem.diffusion_const is not None else problem.sigma(x)


def td_error(model: Model, problem: ProblemSpec, batch: PathBatch, n: int) -> np.ndarray:
    """Per-trajectory one-step TD error at step n."""
    with ad.Tape() as tape:
        w = window_loss(model, problem, batch, n, 1, [], tape)
    return w.td.data.copy()


def loss1(td) -> float:
    td = td.data if isinstance(td, ad.Tensor) else np.asarray(td)
    return float(np.mean(td * td))


def loss4(model: Model, problem: ProblemSpec, batch: PathBatch, n: int, form: str = "abs") -> float:
    """|batch mean of (jump increments of n1 - dt * n2)| at step n, or its square."""
    with ad.Tape() as tape:
        w = window_loss(model, problem, batch, n, 1, [], tape, martingale_loss=form)
    return w.losses.loss4


def _terminal_terms(model: Model, buffer: np.ndarray, problem: ProblemSpec, N: int) -> tuple[float, float]:
    rows = _Rows()
    rows.add(problem.T, np.asarray(buffer, dtype=np.float64))
    with ad.Tape() as tape:
        n1, _, gx = rows.evaluate(model, tape, with_grad=True)
    diff = n1.data - problem.terminal(buffer)
    gdiff = gx.data - problem.terminal_grad(buffer)
    return float(np.mean(diff**2)) / N, float(np.mean(np.sum(gdiff**2, axis=1))) / N


def loss2(model: Model, buffer: np.ndarray, problem: ProblemSpec, N: int) -> float:
    return _terminal_terms(model, buffer, problem, N)[0]


def loss3(model: Model, buffer: np.ndarray, problem: ProblemSpec, N: int) -> float:
    return _terminal_terms(model, buffer, problem, N)[1]


def y0_estimate(model: Model, problem: ProblemSpec) -> float:
    with ad.no_record():
        out = model(ad.Tensor(np.concatenate([[0.0], problem.xi])[None, :]))
    return float(out.data[0, 0])


def train(
    problem: ProblemSpec,
    config: TrainConfig,
    state: TrainState | None = None,
    callback: Optional[Callable[[StepInfo], None]] = None,
    on_record: Optional[Callable[[MetricsRecord], None]] = None,
) -> TrainResult:
    """Run ``config.iterations`` passes over freshly simulated paths.

    Each pass takes one optimiser step per ``td_step`` transitions. Metrics
    are emitted every ``log_every`` updates and after the final update.
    """
    config.validate()
    if state is None:
        state = init_state(problem, config)
    net = state.net
    params = net.parameters()
    N, k = config.N, config.td_step
    y0_true = problem.y0_exact if problem.exact is not None else math.nan
    metrics: list[MetricsRecord] = []
    clock = time.monotonic()
    first_iteration = state.iteration

    def emit(losses: LossBreakdown, lr: float) -> None:
        y0 = y0_estimate(net, problem)
        rel = abs(y0 - y0_true) / abs(y0_true) if y0_true == y0_true else math.nan
        rec = MetricsRecord(
            iteration=state.iteration,
            update=state.update_count,
            y0_estimate=y0,
            y0_rel_error=rel,
            loss1=losses.loss1,
            loss2=losses.loss2,
            loss3=losses.loss3,
            loss4=losses.loss4,
            lr=lr,
            seconds=time.monotonic() - clock if config.timing else math.nan,
        )
        metrics.append(rec)
        if on_record is not None:
            on_record(rec)
        logger.info("update %d  y0 %.6f  rel.err %.3e  loss %.3e", rec.update, y0, rel, losses.total)

    losses = None
    lr = state.lr
    for it in range(first_iteration, first_iteration + config.iterations):
        state.iteration = it
        batch = simulate_batch(
            problem, config.M, N, np.random.SeedSequence(config.seed, spawn_key=(PATHS, it)), workers=config.workers
        )
        for start in range(0, N, k):
            if start + k == N:
                old = N - 1 - start
                buffers = [(state.terminal_buffer, old)] if old else []
                versions = [state.buffer_version] * old
                state.terminal_buffer = batch.states[:, -1].copy()
                state.buffer_version = it
                buffers.append((state.terminal_buffer, 1))
                versions.append(it)
            else:
                buffers = [(state.terminal_buffer, k)]
                versions = [state.buffer_version] * k

            with ad.Tape() as tape:
                window = window_loss(
                    net,
                    problem,
                    batch,
                    start,
                    k,
                    buffers,
                    tape,
                    target_grad=config.target_grad,
                    martingale_n1_grad=config.martingale_n1_grad,
                    martingale_loss=config.martingale_loss,
                )
            losses = window.losses
            if not math.isfinite(losses.total):
                raise TrainingDiverged(
                    f"non-finite loss {losses} at iteration {it}, step {start}, update {state.update_count}"
                )
            grads = tape.gradient(window.total, params)
            lr = state.lr
            adam_step(state, [g.data for g in grads])
            if callback is not None:
                callback(StepInfo(it, start, k, state.update_count, losses, tuple(versions), lr))
            if state.update_count % config.log_every == 0:
                emit(losses, lr)
    if losses is not None and state.update_count % config.log_every:
        emit(losses, lr)
    state.iteration = first_iteration + config.iterations
    return TrainResult(state=state, metrics=metrics)
