"""Bayesian search over (learning rate, momentum, L2) with a GP surrogate and expected improvement."""

from __future__ import annotations

import itertools
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.special import ndtr
from scipy.stats import qmc

from .training import Hyperparams

log = logging.getLogger(__name__)

LENGTH_SCALE_GRID = (0.1, 0.2, 0.5, 1.0)
NOISE_GRID = (1e-4, 1e-3, 1e-2)
JITTERS = (0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4)
N_INITIAL = 5
N_CANDIDATES = 2048


class SurrogateError(RuntimeError):
    pass


@dataclass(frozen=True)
class Dim:
    name: str
    low: float
    high: float
    log: bool = False

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"{self.name}: lower bound must be below upper bound")
        if self.log and self.low <= 0:
            raise ValueError(f"{self.name}: log-scaled bounds must be positive")

    def to_unit(self, value):
        lo, hi, v = self.low, self.high, value
        if self.log:
            lo, hi, v = math.log10(lo), math.log10(hi), math.log10(v) if v > 0 else -math.inf
        u = (v - lo) / (hi - lo)
        if not -1e-9 <= u <= 1 + 1e-9:
            raise ValueError(f"{self.name}={value} outside [{self.low}, {self.high}]")
        return min(max(u, 0.0), 1.0)

    def from_unit(self, u):
        u = min(max(float(u), 0.0), 1.0)
        if self.log:
            lo, hi = math.log10(self.low), math.log10(self.high)
            return min(max(10 ** (lo + u * (hi - lo)), self.low), self.high)
        return self.low + u * (self.high - self.low)


@dataclass(frozen=True)
class SearchSpace:
    learning_rate: Dim = Dim("learning_rate", 1e-4, 1e-1, log=True)
    momentum: Dim = Dim("momentum", 0.5, 0.99)
    l2: Dim = Dim("l2", 1e-13, 1e-2, log=True)

    @property
    def dims(self):
        return (self.learning_rate, self.momentum, self.l2)

    def normalize(self, hp: Hyperparams):
        return np.array([self.learning_rate.to_unit(hp.learning_rate),
                         self.momentum.to_unit(hp.momentum),
                         self.l2.to_unit(hp.l2)])

    def denormalize(self, u) -> Hyperparams:
        return Hyperparams(*(d.from_unit(x) for d, x in zip(self.dims, u)))


def normalize_point(hp: Hyperparams, space: SearchSpace = SearchSpace()):
    return space.normalize(hp)


@dataclass
class TrialRecord:
    trial: int
    point: Hyperparams
    objective: float
    status: str = "ok"
    seconds: float = 0.0

    def line(self):
        hp = self.point
        return (f"{self.trial},{hp.learning_rate!r},{hp.momentum!r},{hp.l2!r},"
                f"{self.objective!r},{self.status},{self.seconds:.3f}")

    @classmethod
    def parse(cls, line):
        trial, lr, mom, l2, obj, status, sec = line.strip().split(",")
        return cls(int(trial), Hyperparams(float(lr), float(mom), float(l2)), float(obj), status, float(sec))


# --------------------------------------------------------------------------
# Gaussian process
# --------------------------------------------------------------------------

def se_kernel(a, b, length_scales):
    d = (a[:, None, :] - b[None, :, :]) / np.asarray(length_scales)
    return np.exp(-0.5 * np.sum(d * d, axis=-1))


@dataclass
class Surrogate:
    """GP regression with a squared-exponential ARD kernel on unit-cube inputs.

    Objectives are centred on their mean; ``signal_var`` scales the kernel and
    ``noise`` is the observation variance relative to ``signal_var``.
    """

    x: np.ndarray
    y: np.ndarray
    length_scales: np.ndarray
    signal_var: float
    noise: float
    y_mean: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0
    log_marginal: float = float("nan")

    def predict(self, xq):
        """Posterior mean and standard deviation of the latent objective at rows of ``xq``."""
        xq = np.atleast_2d(np.asarray(xq, dtype=np.float64))
        ks = se_kernel(xq, self.x, self.length_scales)
        mean = self.y_mean + ks @ self.alpha
        v = linalg.solve_triangular(self.chol, ks.T, lower=True)
        var = self.signal_var * (1.0 - np.sum(v * v, axis=0))
        return mean, np.sqrt(np.maximum(var, 0.0))

    @property
    def best_observed(self):
        return float(np.max(self.y))


def _factor(x, yc, ls, noise):
    """Cholesky of K + noise*I with escalating jitter; returns (L, alpha, jitter)."""
    k = se_kernel(x, x, ls) + noise * np.eye(len(yc))
    for jitter in JITTERS:
        try:
            chol = linalg.cholesky(k + jitter * np.eye(len(yc)), lower=True)
        except linalg.LinAlgError:
            continue
        return chol, linalg.cho_solve((chol, True), yc), jitter
    raise SurrogateError("kernel matrix is singular even with maximal jitter")


def gp_fit(x, y, length_scales=None, noise=None, signal_var=None) -> Surrogate:
    """Fit the surrogate; unset kernel hyperparameters are chosen by grid-searched marginal likelihood.

    ``signal_var`` defaults to the sample variance of ``y`` (1.0 when ``y`` is constant).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 2 or x.shape[0] != len(y):
        raise ValueError("gp_fit needs at least two (point, objective) pairs")
    n = len(y)
    y_mean = float(y.mean())
    if signal_var is None:
        signal_var = float(y.var())
        if signal_var < 1e-12:
            signal_var = 1.0
    yc = y - y_mean
    ls_grid = [np.asarray(length_scales, dtype=np.float64)] if length_scales is not None else \
        [np.array(c) for c in itertools.product(LENGTH_SCALE_GRID, repeat=x.shape[1])]
    noise_grid = [noise] if noise is not None else list(NOISE_GRID)
    best = None
    for ls in ls_grid:
        for nz in noise_grid:
            try:
                chol, alpha, jitter = _factor(x, yc, ls, nz)
            except SurrogateError:
                continue
            # log N(yc | 0, signal_var * (K + noise I))
            lml = (-0.5 * float(yc @ alpha) / signal_var
                   - float(np.sum(np.log(np.diag(chol))))
                   - 0.5 * n * math.log(2 * math.pi * signal_var))
            if best is None or lml > best[0]:
                best = (lml, ls, nz, chol, alpha, jitter)
    if best is None:
        raise SurrogateError("kernel matrix is singular even with maximal jitter")
    lml, ls, nz, chol, alpha, jitter = best
    return Surrogate(x, y, ls, signal_var, nz, y_mean, chol, alpha, jitter, lml)


def gp_posterior(s: Surrogate, x):
    mean, std = s.predict(np.atleast_2d(x))
    return float(mean[0]), float(std[0])


def expected_improvement(mean, std, best_so_far):
    """EI for maximization; reduces to ``max(mean - best, 0)`` where ``std == 0``."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    gain = mean - best_so_far
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(std > 0, gain / np.where(std > 0, std, 1.0), 0.0)
        ei = gain * ndtr(z) + std * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    ei = np.where(std > 0, ei, np.maximum(gain, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def candidates(rng, d=3, n=N_CANDIDATES):
    return qmc.Sobol(d, scramble=True, seed=rng).random(n)


def propose_next(s, space: SearchSpace, rng, n_candidates=N_CANDIDATES, best_so_far=None):
    """Maximize EI over quasi-random candidates; ties resolve to the first candidate scanned."""
    cand = candidates(rng, len(space.dims), n_candidates)
    mean, std = s.predict(cand)
    best = s.best_observed if best_so_far is None else best_so_far
    ei = expected_improvement(mean, std, best)
    return space.denormalize(cand[int(np.argmax(ei))])


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

def read_history(path):
    path = Path(path)
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [TrialRecord.parse(line) for line in fh if line.strip()]


def _append(path, record: TrialRecord):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(record.line() + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def initial_design(seed, n=N_INITIAL, d=3):
    return qmc.Halton(d, scramble=True, seed=seed).random(n)


def best_trial(history):
    ok = [r for r in history if r.status == "ok"]
    if not ok:
        return None
    return max(ok, key=lambda r: (r.objective, -r.trial))


def fit_history(history, space: SearchSpace):
    ok = [r for r in history if r.status == "ok"]
    if len(ok) < 2:
        return None
    return gp_fit([space.normalize(r.point) for r in ok], [r.objective for r in ok])


def estimated_objective(history, space: SearchSpace = SearchSpace()):
    """Surrogate mean at the incumbent, or ``None`` with fewer than two successful trials."""
    s = fit_history(history, space)
    best = best_trial(history)
    if s is None or best is None:
        return None
    return gp_posterior(s, space.normalize(best.point))[0]


def run_hpo(objective, space: SearchSpace = SearchSpace(), budget=30, seed=0,
            history_path=None, resume=False, n_initial=N_INITIAL, n_candidates=N_CANDIDATES):
    """Sequential Bayesian optimization of ``objective(Hyperparams) -> float``.

    Trials 1..n_initial come from a scrambled Halton design, later trials maximize
    EI. Each finished trial is appended to ``history_path``; with ``resume`` the
    recorded trials are kept and the run continues after the last one. A trial
    whose objective raises or returns a non-finite value is recorded as failed.
    Returns ``(best TrialRecord, history)``.
    """
    if budget < n_initial:
        raise ValueError(f"budget {budget} is smaller than the initial design ({n_initial})")
    history = []
    if history_path is not None:
        history_path = Path(history_path)
        if resume:
            history = read_history(history_path)
        elif history_path.exists():
            history_path.unlink()
    init = initial_design(seed, n_initial, len(space.dims))
    for t in range(len(history) + 1, budget + 1):
        rng = np.random.default_rng([seed, t])
        if t <= n_initial:
            hp = space.denormalize(init[t - 1])
        else:
            s = fit_history(history, space)
            hp = space.denormalize(rng.random(len(space.dims))) if s is None else \
                propose_next(s, space, rng, n_candidates)
        t0 = time.perf_counter()
        try:
            value = float(objective(hp))
            status = "ok" if math.isfinite(value) else "failed"
        except Exception as e:  # noqa: BLE001 - a failing trial must not stop the search
            log.warning("trial %d failed: %s", t, e)
            value, status = float("nan"), "failed"
        rec = TrialRecord(t, hp, value, status, time.perf_counter() - t0)
        history.append(rec)
        if history_path is not None:
            _append(history_path, rec)
        log.info("trial %d/%d lr=%.4g momentum=%.4f l2=%.3g -> %s %.4f", t, budget,
                 hp.learning_rate, hp.momentum, hp.l2, status, value)
    return best_trial(history), history
