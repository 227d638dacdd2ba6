"""Full-batch L-BFGS with two-loop recursion and Armijo backtracking."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ._text import fnum
from .mlp import Mlp, flatten_gradient, get_params, loss_and_gradient, mse_loss, set_params

log = logging.getLogger(__name__)


@dataclass
class TrainingCurves:
    train_mse: list = field(default_factory=list)
    test_mse: list = field(default_factory=list)
    fallbacks: int = 0
    converged: bool = False


def _two_loop(grad: np.ndarray, history: deque) -> np.ndarray:
    """L-BFGS direction from the stored (s, y) pairs, gamma-scaled identity seed."""
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(history):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y, _ = history[-1]
    q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(history, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def train_lbfgs(net: Mlp, x_train, y_train, x_test=None, y_test=None,
                epochs: int = 200, history_size: int = 10, seed: int = 0,
                armijo_c1: float = 1e-4, backtrack: float = 0.5,
                initial_step: float = 1.0, max_backtracks: int = 40,
                grad_tol: float = 1e-14) -> TrainingCurves:
    """Minimize the full-batch MSE in place; returns per-epoch loss curves.

    Every accepted step satisfies the Armijo sufficient-decrease condition. If
    the L-BFGS direction fails the line search, the step falls back to steepest
    descent (with a warning); if even that cannot decrease the loss the run
    stops and is marked converged. Fully deterministic for fixed inputs; the
    seed is recorded with the curves but no randomness is consumed here.
    """
    del seed  # the optimizer itself is deterministic; kept for call-site symmetry
    curves = TrainingCurves()
    x = get_params(net)
    history: deque = deque(maxlen=history_size)

    def evaluate(vec):
        set_params(net, vec)
        loss, grads = loss_and_gradient(net, x_train, y_train)
        return loss, flatten_gradient(grads)

    loss, grad = evaluate(x)

    def line_search(d):
        slope = d @ grad
        alpha = initial_step
        for _ in range(max_backtracks):
            x_new = x + alpha * d
            loss_new, grad_new = evaluate(x_new)
            if loss_new <= loss + armijo_c1 * alpha * slope:
                return x_new, loss_new, grad_new
            alpha *= backtrack
        return None

    for _ in range(epochs):
        if not history:
            direction = -grad
        else:
            direction = -_two_loop(grad, history)
        if direction @ grad >= 0:
            direction = -grad

        result = line_search(direction)
        if result is None and not np.array_equal(direction, -grad):
            curves.fallbacks += 1
            log.warning("line search failed along the quasi-Newton direction; "
                        "falling back to steepest descent")
            result = line_search(-grad)
        if result is None:
            set_params(net, x)
            curves.converged = True
            break
        x_new, loss_new, grad_new = result

        s = x_new - x
        y = grad_new - grad
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            history.append((s, y, 1.0 / sy))
        x, loss, grad = x_new, loss_new, grad_new

        curves.train_mse.append(loss)
        if x_test is not None:
            curves.test_mse.append(mse_loss(net, x_test, y_test))
        if np.linalg.norm(grad) < grad_tol:
            curves.converged = True
            break

    set_params(net, x)
    return curves


def write_loss_csv(path, curves: TrainingCurves) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_mse,test_mse\n")
        for i, train in enumerate(curves.train_mse):
            test = curves.test_mse[i] if i < len(curves.test_mse) else float("nan")
            fh.write(f"{i + 1},{fnum(train)},{fnum(test)}\n")
