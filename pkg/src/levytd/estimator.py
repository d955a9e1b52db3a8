"""scikit-learn style wrapper around problem construction and training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .problems import ProblemSpec, make_problem
from .trainer import TrainConfig, train

__all__ = ["LevyTDSolver"]


class LevyTDSolver(BaseEstimator):
    """Solve a benchmark PIDE by temporal-difference training.

    The solver simulates its own training paths, so ``fit`` ignores ``X``
    and ``y``. After fitting, ``predict`` maps rows of ``(t, x_1, ..., x_d)``
    to the network's approximation of ``u(t, x)``.

    Parameters
    ----------
    problem : str or ProblemSpec
        Registered problem name or a ready-made problem.
    problem_params : dict, optional
        Keyword arguments for the problem factory when ``problem`` is a name.
    M, N, iterations, td_step, lr0, lr_drop_every, lr_drop_factor, seed, log_every
        Forwarded to :class:`~levytd.trainer.TrainConfig`.
    target_grad, martingale_n1_grad, martingale_loss
        Gradient-flow and loss-form switches, also forwarded.

    Attributes
    ----------
    problem_ : ProblemSpec
    net_ : ResidualNet
    state_ : TrainState
    metrics_ : list of MetricsRecord
    y0_ : float
        Network estimate of ``u(0, xi)``.
    y0_rel_error_ : float
        Relative error of ``y0_`` when the exact solution is known, else NaN.
    """

    def __init__(
        self,
        problem="pure_jump_1d",
        problem_params=None,
        M=1000,
        N=50,
        iterations=400,
        td_step=1,
        lr0=5e-5,
        lr_drop_every=5000,
        lr_drop_factor=5.0,
        seed=2023,
        log_every=500,
        target_grad=True,
        martingale_n1_grad=True,
        martingale_loss="square",
    ):
        self.problem = problem
        self.problem_params = problem_params
        self.M = M
        self.N = N
        self.iterations = iterations
        self.td_step = td_step
        self.lr0 = lr0
        self.lr_drop_every = lr_drop_every
        self.lr_drop_factor = lr_drop_factor
        self.seed = seed
        self.log_every = log_every
        self.target_grad = target_grad
        self.martingale_n1_grad = martingale_n1_grad
        self.martingale_loss = martingale_loss

    def _make_problem(self) -> ProblemSpec:
        if isinstance(self.problem, ProblemSpec):
            if self.problem_params:
                raise ValueError("problem_params only apply when problem is given by name")
            return self.problem
        return make_problem(self.problem, **(self.problem_params or {}))

    def _config(self) -> TrainConfig:
        config = TrainConfig(
            M=self.M,
            N=self.N,
            iterations=self.iterations,
            td_step=self.td_step,
            lr0=self.lr0,
            lr_drop_every=self.lr_drop_every,
            lr_drop_factor=self.lr_drop_factor,
            seed=self.seed,
            log_every=self.log_every,
            target_grad=self.target_grad,
            martingale_n1_grad=self.martingale_n1_grad,
            martingale_loss=self.martingale_loss,
        )
        config.validate()
        return config

    def fit(self, X=None, y=None, callback=None):
        problem = self._make_problem()
        result = train(problem, self._config(), callback=callback)
        self.problem_ = problem
        self.state_ = result.state
        self.net_ = result.state.net
        self.metrics_ = result.metrics
        self.y0_ = float(self.net_.forward(0.0, problem.xi[None, :])[0][0])
        if problem.exact is not None:
            exact = problem.y0_exact
            self.y0_rel_error_ = abs(self.y0_ - exact) / abs(exact)
        else:
            self.y0_rel_error_ = float("nan")
        return self

    def _inputs(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.problem_.d + 1:
            raise ValueError(f"expected {self.problem_.d + 1} columns (t, x), got {X.shape[1]}")
        return X

    def predict(self, X) -> np.ndarray:
        """Approximate solution ``u(t, x)`` for each row of ``(t, x)``."""
        X = self._inputs(X)
        return self.net_.forward(X[:, 0], X[:, 1:])[0]

    def predict_nonlocal(self, X) -> np.ndarray:
        """Approximate non-local term for each row of ``(t, x)``."""
        X = self._inputs(X)
        return self.net_.forward(X[:, 0], X[:, 1:])[1]
