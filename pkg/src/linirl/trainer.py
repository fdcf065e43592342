"""Maximum-likelihood training in four modes with one shared optimizer.

Modes
-----
full
    Complete trajectories, observed-step likelihood.
composition
    Missing segments scored by their reach probabilities.
connected
    Missing segments dropped; every observed run is scored as a complete
    trajectory ending at its last state.
em_bfs
    EM with breadth-first path enumeration of depth ``bfs_depth``
    (see :mod:`linirl.em`).
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, ValidationError
from .forward import count_solves
from .likelihood import LogLik, compile_dataset, loglik_observed
from .mdp import Mdp
from .missing import composition_loglik

log = logging.getLogger(__name__)

MODES = ("full", "composition", "connected", "em_bfs")
REPORT_SCHEMA = 1


@dataclass
class TrainConfig:
    mode: str = "full"
    theta0: Sequence[float] | None = None
    max_iters: int = 500
    grad_tol: float = 1e-5
    ftol: float = 1e-12
    step0: float = 1.0
    shrink: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 60
    direction: str = "bfgs"
    bfs_depth: int = 5
    em_outer_iters: int = 100
    em_tol: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.grad_tol <= 0:
            raise ValidationError("grad_tol must be positive")
        if self.ftol < 0:
            raise ValidationError("ftol must be non-negative")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be at least 1")
        if not 0 < self.shrink < 1:
            raise ValidationError("shrink must lie in (0, 1)")
        if self.direction not in ("bfgs", "gradient"):
            raise ValidationError("direction must be 'bfgs' or 'gradient'")
        if self.mode == "em_bfs" and self.bfs_depth < 1:
            raise ValidationError("bfs_depth must be at least 1")


@dataclass
class TrainReport:
    theta: np.ndarray
    iterations: int
    loglik: float
    converged: bool
    message: str
    mode: str
    eval_times: list = field(default_factory=list)
    factor_times: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    @property
    def mean_eval_time(self) -> float:
        return float(np.mean(self.eval_times)) if self.eval_times else float("nan")

    def to_json(self) -> dict:
        d = asdict(self)
        d["theta"] = [float(x) for x in self.theta]
        d["schema_version"] = REPORT_SCHEMA
        d["mean_eval_time"] = self.mean_eval_time
        return d


@dataclass
class OptResult:
    theta: np.ndarray
    value: float
    grad: np.ndarray
    iterations: int
    converged: bool
    message: str
    trace: list
    eval_times: list
    factor_times: list


def feature_scale(mdp: Mdp) -> np.ndarray:
    """Root-mean-square magnitude of every feature over the transitions (1 if all zero)."""
    if mdp.k_feat.shape[0] == 0:
        return np.ones(mdp.n_features)
    rms = np.sqrt(np.mean(mdp.k_feat ** 2, axis=0))
    return np.where(rms > 0, rms, 1.0)


def maximize(fun: Callable[[np.ndarray], LogLik], theta0, config: TrainConfig,
             scale=None) -> OptResult:
    """Gradient ascent with Armijo backtracking.

    With ``direction="bfgs"`` the ascent direction is the gradient scaled
    by a BFGS inverse-Hessian estimate; the line search is unchanged.  The
    estimate starts diagonal with entries ``1 / scale**2`` (``scale`` being
    the typical magnitude of each feature), normalized so that the first
    trial step changes the reward of a typical transition by at most
    ``step0``.
    Trial points where the objective cannot be evaluated count as failed
    backtracks.  The search also stops, unconverged, when an accepted step
    raises the objective by at most ``ftol * max(1, |value|)``: progress is
    then at the round-off level of the objective.
    """
    eval_times, factor_times = [], []

    def evaluate(theta):
        t0 = time.perf_counter()
        with count_solves() as stats:
            out = fun(theta)
        eval_times.append(time.perf_counter() - t0)
        factor_times.append(stats.factor_time)
        return out

    theta = np.array(theta0, dtype=float)
    try:
        cur = evaluate(theta)
    except NumericalError as exc:
        raise NumericalError(f"objective cannot be evaluated at theta0={theta.tolist()}: {exc}") from exc
    if not np.isfinite(cur.value) or not np.all(np.isfinite(cur.grad)):
        raise NumericalError(f"non-finite objective at theta0={theta.tolist()} "
                             f"(value {cur.value}, {cur.n_infeasible} infeasible trajectories)")
    n = theta.size

    inv_sq = np.ones(n) if scale is None else 1.0 / np.asarray(scale, dtype=float) ** 2

    def initial_hinv(g):
        if config.direction != "bfgs":
            return np.eye(n)
        # reward change of the first step, measured in typical-transition units
        size = float(np.max(np.abs(inv_sq * g) * np.sqrt(1.0 / inv_sq), initial=0.0))
        return np.diag(inv_sq) / max(1.0, size)

    Hinv = initial_hinv(cur.grad)
    trace = [{"iter": 0, "loglik": cur.value, "grad_inf": float(np.max(np.abs(cur.grad), initial=0)),
              "step": 0.0}]
    message = "max_iters reached"
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        g = cur.grad
        if np.max(np.abs(g), initial=0.0) < config.grad_tol:
            converged = True
            message = "gradient tolerance reached"
            it -= 1
            break
        d = Hinv @ g if config.direction == "bfgs" else g.copy()
        slope = float(g @ d)
        if slope <= 0:
            Hinv = initial_hinv(g)
            d = Hinv @ g
            slope = float(g @ d)
        step = config.step0
        accepted = None
        for _ in range(config.max_backtracks):
            trial = theta + step * d
            try:
                new = evaluate(trial)
                ok = np.isfinite(new.value) and new.value >= cur.value + config.armijo * step * slope
            except NumericalError:
                ok = False
            if ok:
                accepted = (trial, new)
                break
            step *= config.shrink
        if accepted is None:
            message = "line search failed; returning best iterate"
            warnings.warn(message, RuntimeWarning, stacklevel=2)
            it -= 1
            break
        trial, new = accepted
        if config.direction == "bfgs":
            s = trial - theta
            y = cur.grad - new.grad  # gradient difference of the negated objective
            sy = float(s @ y)
            if sy > 1e-12 * max(1.0, float(np.linalg.norm(s) * np.linalg.norm(y))):
                if it == 1:
                    H0 = initial_hinv(g)
                    Hinv = H0 * sy / float(y @ H0 @ y)
                rho = 1.0 / sy
                V = np.eye(n) - rho * np.outer(s, y)
                Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        stalled = new.value - cur.value <= config.ftol * max(1.0, abs(cur.value))
        theta, cur = trial, new
        trace.append({"iter": it, "loglik": cur.value,
                      "grad_inf": float(np.max(np.abs(cur.grad), initial=0)), "step": step})
        if stalled and np.max(np.abs(cur.grad), initial=0.0) >= config.grad_tol:
            message = "objective change below ftol"
            break
    else:
        if np.max(np.abs(cur.grad), initial=0.0) < config.grad_tol:
            converged, message = True, "gradient tolerance reached"
    return OptResult(theta, cur.value, cur.grad, it, converged, message, trace,
                     eval_times, factor_times)


def connected_pieces(trajectories) -> list:
    """Every observed run as its own trajectory; runs without an observed action are dropped."""
    return [piece for traj in trajectories for piece in traj.split() if piece.observed_steps()]


def objective(trajectories, mdp: Mdp, mode: str) -> Callable[[np.ndarray], LogLik]:
    """Log-likelihood callable for the ``full``, ``composition`` or ``connected`` mode."""
    if mode == "full":
        compiled = compile_dataset(trajectories, mdp, gaps="error")
        return lambda theta: loglik_observed(compiled, mdp, theta)
    if mode == "composition":
        compiled = compile_dataset(trajectories, mdp, gaps="include")
        return lambda theta: composition_loglik(compiled, mdp, theta)
    if mode == "connected":
        compiled = compile_dataset(connected_pieces(trajectories), mdp, gaps="error")
        return lambda theta: loglik_observed(compiled, mdp, theta)
    raise ValidationError(f"mode {mode!r} has no direct objective")


def default_theta0(mdp: Mdp, config: TrainConfig) -> np.ndarray:
    if config.theta0 is None:
        return np.zeros(mdp.n_features)
    return mdp.check_theta(config.theta0)


def infeasible_at(trajectories, mdp: Mdp, mode: str, theta) -> tuple:
    """Indices of trajectories with zero likelihood at ``theta`` under ``mode``.

    EM training is checked with the composition objective: a missing
    segment whose endpoints cannot be connected at all has no path to
    enumerate either.
    """
    fun = objective(trajectories, mdp, "composition" if mode == "em_bfs" else mode)
    try:
        return fun(theta).infeasible
    except NumericalError:
        return ()  # reported by the optimizer with more context


def train(trajectories, mdp: Mdp, config: TrainConfig | None = None) -> TrainReport:
    """Fit theta by maximum likelihood in ``config.mode``.

    Trajectories with zero likelihood at ``theta0`` (observations the
    network cannot produce) are left out of training and listed in
    ``TrainReport.excluded``.  Any later trial point that makes a remaining
    trajectory impossible scores ``-inf`` and is rejected by the line search.
    """
    config = config or TrainConfig()
    theta0 = default_theta0(mdp, config)
    trajectories = list(trajectories)
    if config.mode == "connected":
        # indices in ``excluded`` then refer to the split runs
        trajectories = connected_pieces(trajectories)
    excluded = list(infeasible_at(trajectories, mdp, config.mode, theta0))
    if excluded:
        warnings.warn(f"{len(excluded)} trajectories have zero likelihood at theta0 and are "
                      f"excluded from training (first: {excluded[:5]})", RuntimeWarning,
                      stacklevel=2)
        drop = set(excluded)
        trajectories = [t for i, t in enumerate(trajectories) if i not in drop]
    if config.mode == "em_bfs":
        from .em import em_train
        report = em_train(trajectories, mdp, config.bfs_depth, config.em_outer_iters, theta0,
                          config)
        report.excluded = excluded
        return report
    res = maximize(objective(trajectories, mdp, config.mode), theta0, config,
                   scale=feature_scale(mdp))
    log.info("%s: %d iterations, loglik %.6f (%s)", config.mode, res.iterations, res.value,
             res.message)
    return TrainReport(res.theta, res.iterations, res.value, res.converged, res.message,
                       config.mode, res.eval_times, res.factor_times, res.trace, excluded)


def evaluate(theta, full_dataset, mdp: Mdp) -> float:
    """Log-likelihood of a complete dataset at ``theta``."""
    return objective(full_dataset, mdp, "full")(mdp.check_theta(theta)).value
