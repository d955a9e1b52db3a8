"""Experiment runner: ``levytd run`` and ``levytd sweep``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .network import save_checkpoint
from .problems import PROBLEMS, ProblemSpec, make_problem
from .stochastic import EXPORT, SimulationDiverged, law_from_name, simulate_batch
from .trainer import MARTINGALE_LOSSES, MetricsRecord, TrainConfig, TrainingDiverged, train

__all__ = ["ConfigError", "RunConfig", "main", "read_config_file", "run", "sweep"]

logger = logging.getLogger("levytd")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

METRICS_HEADER = ["iteration", "update", "y0_estimate", "y0_rel_error", "loss1", "loss2", "loss3", "loss4", "lr", "seconds"]
TRAJECTORY_HEADER = ["trajectory", "step", "time", "coord_index", "x_value", "n1_value", "exact_value", "jump_flag"]
SWEEP_HEADER = ["axis", "value", "y0_rel_error", "seconds", "status"]

# training sizes used in the benchmark experiments
PROBLEM_DEFAULTS = {
    "pure_jump_1d": dict(M=1000, N=50, iterations=400, jump="normal", epsilon=0.0, theta=0.0),
    "robustness_1d": dict(M=250, N=50, iterations=400, jump="normal", epsilon=0.25, theta=0.0),
    "highdim": dict(M=500, N=50, iterations=400, jump="constant", epsilon=0.0, theta=0.3, d=100),
}


class ConfigError(ValueError):
    pass


def fmt(value: float) -> str:
    return f"{value:.17g}"


@dataclass
class RunConfig:
    """One experiment. ``None`` fields take the problem's benchmark default."""

    problem: str = "pure_jump_1d"
    d: int | None = None
    M: int | None = None
    N: int | None = None
    iterations: int | None = None
    td_step: int = 1
    T: float = 1.0
    lam: float = 0.3
    jump: str | None = None
    jump_params: tuple[float, ...] | None = None
    epsilon: float | None = None
    theta: float | None = None
    lr0: float = 5e-5
    lr_drop_every: int = 5000
    lr_drop_factor: float = 5.0
    seed: int = 2023
    out_dir: str | None = None
    log_every: int = 500
    trajectories: int = 30
    timing: bool = False
    target_grad: bool = TrainConfig.target_grad
    martingale_loss: str = TrainConfig.martingale_loss

    def resolved(self) -> RunConfig:
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}; choose from {sorted(PROBLEMS)}")
        filled = dataclasses.replace(self)
        for key, value in PROBLEM_DEFAULTS[self.problem].items():
            if getattr(filled, key) is None:
                setattr(filled, key, value)
        if filled.d is None:
            filled.d = 1
        if filled.out_dir is None:
            filled.out_dir = os.environ.get("LEVYTD_OUT", "levytd_out")
        filled.validate()
        return filled

    def validate(self) -> None:
        for name in ("d", "M", "N", "td_step", "lr_drop_every", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.iterations < 0 or self.trajectories < 0:
            raise ConfigError("iterations and trajectories must be >= 0")
        if self.N % self.td_step:
            raise ConfigError(f"td_step {self.td_step} does not divide N={self.N}")
        if not (self.T > 0 and self.lam >= 0 and self.lr0 > 0 and self.lr_drop_factor > 0):
            raise ConfigError("T, lr0 and lr_drop_factor must be positive and lambda non-negative")
        if self.martingale_loss not in MARTINGALE_LOSSES:
            raise ConfigError(f"martingale_loss must be one of {MARTINGALE_LOSSES}, got {self.martingale_loss!r}")

    def make_problem(self) -> ProblemSpec:
        """Build the PIDE instance; call on a resolved config."""
        params = list(self.jump_params) if self.jump_params else None
        try:
            if self.problem == "highdim":
                if self.jump != "constant":
                    raise ConfigError("highdim only supports the constant jump law")
                c = law_from_name("constant", params, self.d).c
                return make_problem("highdim", d=self.d, epsilon=self.epsilon, theta=self.theta, lam=self.lam, c=c, T=self.T)
            if self.d != 1:
                raise ConfigError(f"{self.problem} is one-dimensional, got d={self.d}")
            law = law_from_name(self.jump, params)
            if self.problem == "pure_jump_1d":
                if self.jump != "normal":
                    raise ConfigError("pure_jump_1d only supports the normal jump law")
                if self.epsilon or self.theta:
                    raise ConfigError("pure_jump_1d has no drift or diffusion; use robustness_1d")
                return make_problem("pure_jump_1d", lam=self.lam, mu=law.mu, sigma_jump=law.sigma, T=self.T)
            return make_problem(
                "robustness_1d", epsilon=self.epsilon, theta=self.theta, lam=self.lam, law=law, T=self.T
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            M=self.M,
            N=self.N,
            iterations=self.iterations,
            td_step=self.td_step,
            lr0=self.lr0,
            lr_drop_every=self.lr_drop_every,
            lr_drop_factor=self.lr_drop_factor,
            seed=self.seed,
            log_every=self.log_every,
            timing=self.timing,
            target_grad=self.target_grad,
            martingale_loss=self.martingale_loss,
        )


_FIELDS = {f.name: f for f in fields(RunConfig)}
# flag and config-file spellings that differ from the field name
_ALIASES = {"lambda": "lam", "out": "out_dir"}


def _field_name(key: str) -> str:
    key = key.strip().replace("-", "_")
    key = _ALIASES.get(key, key)
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    return key


def parse_value(name: str, text: str):
    """Convert a string to the type of RunConfig field ``name``."""
    kind = str(_FIELDS[name].type)
    text = text.strip()
    try:
        if name == "jump_params":
            return tuple(float(v) for v in text.replace(",", " ").split())
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
        if kind.startswith("bool"):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None
    return text


def read_config_file(path: str | os.PathLike) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        name = _field_name(key)
        values[name] = parse_value(name, value)
    return values


# --- artifacts ---------------------------------------------------------------


class MetricsWriter:
    """Append metrics rows as they arrive so partial runs keep their history."""

    def __init__(self, path: Path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(METRICS_HEADER)
        self._fh.flush()

    def __call__(self, rec: MetricsRecord) -> None:
        row = [rec.iteration, rec.update]
        row += [fmt(getattr(rec, name)) for name in METRICS_HEADER[2:]]
        self._writer.writerow(row)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def write_trajectories(path: Path, net, problem: ProblemSpec, cfg: RunConfig) -> None:
    """Sample paths with network and exact values; ``jump_flag`` marks a jump in the segment ending at ``step``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAJECTORY_HEADER)
        if cfg.trajectories == 0:
            return
        batch = simulate_batch(problem, cfg.trajectories, cfg.N, np.random.SeedSequence(cfg.seed, spawn_key=(EXPORT,)))
        times = batch.times
        flags = np.zeros((batch.M, batch.N + 1), dtype=int)
        flags[:, 1:] = batch.jump_flags()
        n1 = np.stack([net.forward(t, batch.states[:, n])[0] for n, t in enumerate(times)], axis=1)
        if problem.exact is not None:
            exact = np.stack([problem.exact(t, batch.states[:, n]) for n, t in enumerate(times)], axis=1)
        else:
            exact = np.full_like(n1, math.nan)
        for j in range(batch.M):
            for n, t in enumerate(times):
                for i in range(problem.d):
                    x = batch.states[j, n, i]
                    writer.writerow([j, n, fmt(t), i, fmt(x), fmt(n1[j, n]), fmt(exact[j, n]), flags[j, n]])


def _write_summary(path: Path, lines: dict) -> None:
    text = "".join(f"{key}: {value}\n" for key, value in lines.items())
    path.write_text(text)


def run(cfg: RunConfig) -> tuple[int, dict]:
    """Train one configuration and write its artifacts; returns (exit status, summary)."""
    cfg = cfg.resolved()
    problem = cfg.make_problem()
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc

    writer = MetricsWriter(out / "metrics.csv")
    clock = time.monotonic()
    summary = {"problem": problem.name, "status": "ok"}
    status = EXIT_OK
    result = None
    try:
        result = train(problem, cfg.train_config(), on_record=writer)
    except (TrainingDiverged, SimulationDiverged) as exc:
        summary["status"] = f"diverged: {exc}"
        status = EXIT_DIVERGED
    finally:
        writer.close()
    seconds = time.monotonic() - clock

    y0_exact = problem.y0_exact if problem.exact is not None else math.nan
    if result is not None:
        net = result.state.net
        y0 = float(net.forward(0.0, problem.xi[None, :])[0][0])
        rel = abs(y0 - y0_exact) / abs(y0_exact)
        summary.update(
            y0_estimate=fmt(y0),
            y0_exact=fmt(y0_exact),
            y0_rel_error=fmt(rel),
            y0_rel_error_percent=f"{100 * rel:.3f}%",
            updates=result.state.update_count,
        )
        write_trajectories(out / "trajectories.csv", net, problem, cfg)
        save_checkpoint(net, out / "model.ckpt")
    else:
        summary.update(y0_estimate="nan", y0_exact=fmt(y0_exact), y0_rel_error="nan")
    summary["runtime_seconds"] = f"{seconds:.3f}"
    _write_summary(out / "summary.txt", summary)
    return status, summary


def sweep(template: RunConfig, axis: str, values: list[str]) -> int:
    """Run ``template`` once per value of ``axis`` and collect ``sweep.csv``."""
    name = _field_name(axis)
    if name in ("out_dir", "problem"):
        raise ConfigError(f"cannot sweep over {axis!r}")
    parsed = [parse_value(name, v) for v in values]
    base = template.resolved()
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        fh.flush()
        for text, value in zip(values, parsed):
            cfg = dataclasses.replace(template, out_dir=str(out / f"{name}={text.strip()}"))
            setattr(cfg, name, value)
            if name == "jump":
                cfg.jump_params = None
            clock = time.monotonic()
            try:
                code, summary = run(cfg)
                rel = summary["y0_rel_error"]
                row_status = "ok" if code == EXIT_OK else summary["status"]
            except ConfigError as exc:
                code, rel, row_status = EXIT_CONFIG, "nan", f"error: {exc}"
            seconds = time.monotonic() - clock
            if code != EXIT_OK:
                status = EXIT_DIVERGED
                logger.warning("sweep %s=%s failed: %s", name, text, row_status)
            writer.writerow([name, text.strip(), rel, f"{seconds:.3f}", row_status])
            fh.flush()
    return status


# --- command line --------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--problem", choices=sorted(PROBLEMS))
    p.add_argument("--d", type=int)
    p.add_argument("--M", type=int, help="trajectories per iteration")
    p.add_argument("--N", type=int, help="time intervals")
    p.add_argument("--iterations", type=int)
    p.add_argument("--td-step", type=int)
    p.add_argument("--T", type=float)
    p.add_argument("--lambda", dest="lam", type=float, help="Poisson intensity")
    p.add_argument("--jump", choices=["normal", "uniform", "exponential", "bernoulli", "constant"])
    p.add_argument("--jump-params", help="comma separated law parameters")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--lr0", type=float)
    p.add_argument("--lr-drop-every", type=int)
    p.add_argument("--lr-drop-factor", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="out_dir", help="output directory (default $LEVYTD_OUT or ./levytd_out)")
    p.add_argument("--log-every", type=int)
    p.add_argument("--trajectories", type=int, help="sample paths in trajectories.csv")
    p.add_argument("--timing", action="store_true", default=None, help="record wall-clock seconds in metrics.csv")
    p.add_argument("--target-grad", help="true: differentiate through N1 at the far end of the TD pair")
    p.add_argument("--martingale-loss", choices=MARTINGALE_LOSSES, help="form of the loss on N2")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="levytd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("run", help="train one configuration"))
    sw = sub.add_parser("sweep", help="train one configuration per axis value")
    _add_run_flags(sw)
    sw.add_argument("--axis", required=True, help="RunConfig field to vary, e.g. lambda or td_step")
    sw.add_argument("--values", nargs="*", default=[], help="values, space or comma separated")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    for name in _FIELDS:
        flag = getattr(args, name, None)
        if flag is None:
            continue
        values[name] = parse_value(name, flag) if name in ("jump_params", "target_grad") else flag
    return RunConfig(**values)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "run":
            status, summary = run(cfg)
            for key, value in summary.items():
                print(f"{key}: {value}")
            return status
        values = [v for chunk in args.values for v in chunk.split(",") if v.strip()]
        return sweep(cfg, args.axis, values)
    except ConfigError as exc:
        print(f"levytd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
