"""Binary L2-regularised logistic regression.

Minimises ``C * sum_i log(1 + exp(-y_i <w, x_i>)) + 0.5 * ||w||^2`` with a
truncated Newton method: Hessian-vector products feed a conjugate gradient
inner solve and an Armijo backtracking line search guards every step.
There is no bias term; append a constant feature if one is wanted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y


class NumericalError(ArithmeticError):
    """The solver produced non-finite values."""


@dataclass(frozen=True)
class TrainConfig:
    C: float = 1.0
    grad_tol: float = 1e-4
    max_iter: int = 1000

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError(f"C must be positive, got {self.C}")
        if not self.grad_tol > 0:
            raise ValueError(f"grad_tol must be positive, got {self.grad_tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


def _check(w, X, y):
    w = np.asarray(w, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} examples but {y.shape[0]} labels")
    if X.shape[0] < 1:
        raise ValueError("need at least one example")
    if w.shape != (X.shape[1],):
        raise ValueError(f"weights have shape {w.shape}, data has {X.shape[1]} features")
    if not np.all((y == 1) | (y == -1)):
        raise ValueError("labels must be +1 or -1")
    return w, y


def log1pexp(t):
    """Stable ``log(1 + exp(t))`` as ``max(t, 0) + log1p(exp(-|t|))``."""
    t = np.asarray(t, dtype=np.float64)
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def objective(w, X, y, C: float) -> float:
    w, y = _check(w, X, y)
    margins = y * (X @ w)
    return float(C * log1pexp(-margins).sum() + 0.5 * w @ w)


def gradient(w, X, y, C: float) -> np.ndarray:
    w, y = _check(w, X, y)
    margins = y * (X @ w)
    return w - C * (X.T @ (y * expit(-margins)))


def score(w, x) -> np.ndarray | float:
    """Decision value ``<w, x>``; ``x`` may be a vector or a row matrix."""
    w = np.asarray(w, dtype=np.float64)
    if sp.issparse(x):
        if x.shape[-1] != w.shape[0]:
            raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {w.shape[0]}")
        s = np.asarray(x @ w).ravel()
        return float(s[0]) if x.shape[0] == 1 else s
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {w.shape[0]}")
    s = x @ w
    return float(s) if np.ndim(s) == 0 else s


def prob(w, x):
    """Probability of the positive class, ``1 / (1 + exp(-<w, x>))``."""
    return expit(score(w, x))


def train(X, y, cfg: TrainConfig = TrainConfig(), warm_start=None,
          return_info: bool = False):
    """Minimise the regularised logistic objective.

    Stops once ``||grad|| <= grad_tol * max(1, ||grad(0)||)`` or after
    ``max_iter`` Newton steps. The objective is strictly convex, so a unique
    minimiser exists even when every label has the same sign; ``info`` flags
    that case as ``single_class`` so callers can decide what to do with it.

    Returns
    -------
    w : ndarray
    info : dict, only when ``return_info`` is true
        ``n_iter``, ``converged``, ``single_class``, ``grad_norm`` and
        ``objective_trace`` (one value per iterate, starting point first).
    """
    X = sp.csr_matrix(X, dtype=np.float64) if sp.issparse(X) else np.asarray(X, dtype=np.float64)
    d = X.shape[1]
    w0 = np.zeros(d) if warm_start is None else np.array(warm_start, dtype=np.float64)
    w, y = _check(w0, X, y)
    C = cfg.C
    XT = X.T

    g_zero = -C * 0.5 * (XT @ y)
    tol = cfg.grad_tol * max(1.0, float(np.linalg.norm(g_zero)))

    z = X @ w
    f = float(C * log1pexp(-y * z).sum() + 0.5 * w @ w)
    trace = [f]
    converged = False
    n_iter = 0
    gnorm = np.inf
    for n_iter in range(cfg.max_iter + 1):
        s = expit(-y * z)
        g = w - C * (XT @ (y * s))
        gnorm = float(np.linalg.norm(g))
        if not np.isfinite(gnorm):
            raise NumericalError("gradient is not finite")
        if gnorm <= tol:
            converged = True
            break
        if n_iter == cfg.max_iter:
            break
        curv = C * s * (1.0 - s)

        def hess_vec(v, curv=curv):
            return v + XT @ (curv * (X @ v))

        H = LinearOperator((d, d), matvec=hess_vec, dtype=np.float64)
        inner_tol = min(0.5, np.sqrt(gnorm))
        step, _ = cg(H, -g, rtol=inner_tol, maxiter=max(10, min(d, 250)))
        slope = float(g @ step)
        if slope >= 0:
            step, slope = -g, -gnorm ** 2

        t = 1.0
        Xs = X @ step
        for _ in range(60):
            w_new = w + t * step
            z_new = z + t * Xs
            f_new = float(C * log1pexp(-y * z_new).sum() + 0.5 * w_new @ w_new)
            if f_new <= f + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            # no acceptable decrease at machine precision
            break
        w, z, f = w_new, z_new, f_new
        trace.append(f)

    if not np.all(np.isfinite(w)):
        raise NumericalError("weights are not finite")
    if not return_info:
        return w
    info = {
        "n_iter": n_iter,
        "converged": converged,
        "single_class": bool(np.all(y == y[0])),
        "grad_norm": gnorm,
        "objective_trace": trace,
    }
    return w, info


class BinaryLogisticRegression(ClassifierMixin, BaseEstimator):
    """Scikit-learn wrapper around :func:`train` for labels in ``{-1, +1}``
    (or any two classes, mapped in sorted order)."""

    def __init__(self, C=1.0, grad_tol=1e-4, max_iter=1000):
        self.C = C
        self.grad_tol = grad_tol
        self.max_iter = max_iter

    def fit(self, X, y):
        X, y = check_X_y(X, y, accept_sparse="csr")
        self.classes_ = np.unique(y)
        if len(self.classes_) > 2:
            raise ValueError("BinaryLogisticRegression needs at most two classes")
        signs = np.where(y == self.classes_[-1], 1.0, -1.0)
        if len(self.classes_) == 1:
            signs = np.ones_like(signs)
        cfg = TrainConfig(self.C, self.grad_tol, self.max_iter)
        self.coef_, self.info_ = train(X, signs, cfg, return_info=True)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, accept_sparse="csr")
        return np.asarray(X @ self.coef_).ravel()

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        s = self.decision_function(X)
        if len(self.classes_) == 1:
            return np.full(s.shape, self.classes_[0])
        return np.where(s >= 0, self.classes_[1], self.classes_[0])
