"""Adam warm-up and L-BFGS refinement over one flat parameter vector.

Both routines take ``fun(theta) -> (loss, grad)`` returning a float and a
NumPy array, and keep the last finite iterate if the loss or gradient ever
becomes non-finite.
"""

from __future__ import annotations

import dataclasses
import logging
from collections import deque
from typing import Callable

import numpy as np

from pfxpinn.errors import ConfigError

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
ARMIJO_C = 1e-4
SHRINK = 0.5
MAX_SHRINKS = 50
ROUNDING = 1e-12


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    adam_steps: int = 2000
    adam_lr: float = 1e-3
    lbfgs_max_iters: int = 2000
    lbfgs_memory: int = 20
    grad_tol: float = 1e-10
    loss_tol: float = 1e-12

    def __post_init__(self):
        if self.adam_steps < 0 or self.lbfgs_max_iters < 0:
            raise ConfigError("iteration counts must be >= 0", field="optimizer")
        if not self.adam_lr > 0:
            raise ConfigError("adam_lr must be positive", field="optimizer.adam_lr")
        if self.lbfgs_memory < 1:
            raise ConfigError("lbfgs_memory must be >= 1", field="optimizer.lbfgs_memory")
        if not (self.grad_tol > 0 and self.loss_tol > 0):
            raise ConfigError("tolerances must be positive", field="optimizer")


@dataclasses.dataclass
class TraceRow:
    iteration: int
    loss: float
    grad_inf_norm: float
    stage: str


@dataclasses.dataclass
class OptimizeResult:
    theta: np.ndarray
    loss: float
    trace: list[TraceRow]
    reason: str
    iterations: int

    @property
    def failed(self) -> bool:
        return self.reason == "non_finite"


def _finite(loss, grad):
    return np.isfinite(loss) and bool(np.all(np.isfinite(grad)))


def adam_minimize(fun: Callable, theta0, config: OptimizerConfig, start_iteration: int = 0) -> OptimizeResult:
    """Bias-corrected Adam for ``config.adam_steps`` steps or until ``|dL| < loss_tol``.

    The trace holds the loss at the start of each performed step.
    """
    theta = np.array(theta0, dtype=np.float64, copy=True)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    trace: list[TraceRow] = []
    loss, grad = fun(theta)
    if not _finite(loss, grad):
        return OptimizeResult(theta, float(loss), trace, "non_finite", 0)
    prev = None
    reason = "max_iters"
    lr = config.adam_lr
    for k in range(1, config.adam_steps + 1):
        trace.append(TraceRow(start_iteration + k, float(loss), float(np.max(np.abs(grad), initial=0.0)), "adam"))
        if prev is not None and abs(prev - loss) < config.loss_tol:
            reason = "loss_tol"
            break
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad
        mhat = m / (1.0 - ADAM_BETA1**k)
        vhat = v / (1.0 - ADAM_BETA2**k)
        cand = theta - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        new_loss, new_grad = fun(cand)
        if not _finite(new_loss, new_grad):
            log.warning("adam: non-finite loss at step %d, keeping last good parameters", k)
            return OptimizeResult(theta, float(loss), trace, "non_finite", len(trace))
        prev = loss
        theta, loss, grad = cand, float(new_loss), new_grad
    return OptimizeResult(theta, float(loss), trace, reason, len(trace))


def _two_loop(grad, s_hist, y_hist):
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((a, rho))
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for (a, rho), s, y in zip(reversed(alphas), s_hist, y_hist):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(fun: Callable, theta0, config: OptimizerConfig, start_iteration: int = 0) -> OptimizeResult:
    """Limited-memory BFGS with backtracking Armijo line search.

    Stops when ``max|grad| < grad_tol``, when an accepted step changes the loss
    by less than ``loss_tol``, after ``lbfgs_max_iters`` iterations, or when the
    line search fails to find descent within 50 halvings.  Accepted losses
    never increase.
    """
    theta = np.array(theta0, dtype=np.float64, copy=True)
    loss, grad = fun(theta)
    trace: list[TraceRow] = []
    if not _finite(loss, grad):
        return OptimizeResult(theta, float(loss), trace, "non_finite", 0)
    loss = float(loss)
    s_hist: deque = deque(maxlen=config.lbfgs_memory)
    y_hist: deque = deque(maxlen=config.lbfgs_memory)
    reason = "max_iters"
    for k in range(1, config.lbfgs_max_iters + 1):
        gnorm = float(np.max(np.abs(grad), initial=0.0))
        trace.append(TraceRow(start_iteration + k, loss, gnorm, "lbfgs"))
        if gnorm < config.grad_tol:
            reason = "grad_tol"
            break
        d = _two_loop(grad, list(s_hist), list(y_hist))
        slope = float(grad @ d)
        if not slope < 0.0:
            s_hist.clear()
            y_hist.clear()
            d = -grad
            slope = float(grad @ d)
        step = 1.0
        if not s_hist:
            step = min(1.0, 1.0 / max(float(np.sum(np.abs(grad))), 1e-300))
        accepted = False
        flat = False
        for _ in range(MAX_SHRINKS):
            cand = theta + step * d
            new_loss, new_grad = fun(cand)
            if _finite(new_loss, new_grad):
                # below the rounding level of the loss the Armijo test cannot be resolved;
                # there a non-increasing step that shrinks the gradient is accepted instead
                flat = -step * slope <= ROUNDING * max(abs(loss), np.finfo(float).tiny)
                if new_loss <= loss + ARMIJO_C * step * slope:
                    accepted = True
                    break
                if flat and new_loss <= loss and np.max(np.abs(new_grad)) < gnorm:
                    accepted = True
                    break
            step *= SHRINK
        if not accepted:
            reason = "line_search"
            break
        new_loss = float(new_loss)
        s = cand - theta
        y = new_grad - grad
        if float(y @ s) > 1e-10 * float(np.sqrt((y @ y) * (s @ s))):
            s_hist.append(s)
            y_hist.append(y)
        change = loss - new_loss
        theta, loss, grad = cand, new_loss, new_grad
        if change < config.loss_tol and not flat:
            trace.append(TraceRow(start_iteration + k + 1, loss, float(np.max(np.abs(grad), initial=0.0)), "lbfgs"))
            reason = "loss_tol"
            break
    return OptimizeResult(theta, loss, trace, reason, len(trace))


def minimize(fun: Callable, theta0, config: OptimizerConfig) -> OptimizeResult:
    """Adam warm-up followed by L-BFGS; the trace concatenates both stages."""
    first = adam_minimize(fun, theta0, config)
    if first.failed:
        return first
    second = lbfgs_minimize(fun, first.theta, config, start_iteration=len(first.trace))
    return OptimizeResult(
        second.theta,
        second.loss,
        first.trace + second.trace,
        second.reason,
        first.iterations + second.iterations,
    )
