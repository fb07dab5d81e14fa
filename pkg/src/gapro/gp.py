"""Exact Gaussian-process regression with an RBF kernel.

The labeler fits one GP per pair of competing instances, with the box labels
observed noise-free (a zero-variance Gaussian likelihood), so conditioning
reduces to plain linear algebra on the kernel matrix:

    mean = Ks' K^-1 f
    var  = diag(Kss - Ks' K^-1 Ks)

All solves go through a Cholesky factorization; a diagonal jitter keeps the
factorization alive on near-duplicate inputs, with a single automatic x10
escalation before giving up.  Hyperparameters (length scale l, output scale
s) are optimized by gradient ascent on the exact marginal log likelihood in
log space.
"""

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular
from scipy.special import expit

from gapro._kernels import rbf_kernel_matrix, squared_distances
from gapro.errors import ConditioningError

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GpHyperparams:
    """RBF kernel hyperparameters.

    Parameters
    ----------
    length_scale : float
        Kernel length scale l > 0, in feature units.
    output_scale : float
        Kernel amplitude s > 0; the prior variance is s**2.
    jitter : float
        Non-negative diagonal term added to the training kernel matrix.
    """

    length_scale: float = 0.5
    output_scale: float = 1.0
    jitter: float = 1e-4

    def __post_init__(self):
        if not (math.isfinite(self.length_scale) and self.length_scale > 0.0):
            raise ValueError("length_scale must be positive and finite")
        if not (math.isfinite(self.output_scale) and self.output_scale > 0.0):
            raise ValueError("output_scale must be positive and finite")
        if not (math.isfinite(self.jitter) and self.jitter >= 0.0):
            raise ValueError("jitter must be non-negative and finite")


@dataclass
class GpPosterior:
    """Posterior marginals at the test inputs.

    ``probability`` is the probit-squashed mean, see :func:`probit_squash`.
    """

    mean: np.ndarray
    variance: np.ndarray
    probability: np.ndarray


def _as_points(x, name):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty (n, d) array")
    if not np.isfinite(x).all():
        raise ValueError(f"{name} must be finite")
    return x


def rbf_kernel(x1, x2, params):
    """Evaluate the RBF kernel s^2 exp(-|x1 - x2|^2 / (2 l^2)) rowwise.

    Parameters
    ----------
    x1 : (n1, d) array
    x2 : (n2, d) array
    params : GpHyperparams

    Returns
    -------
    (n1, n2) float64 kernel matrix.  The jitter term is not included.
    """
    a = _as_points(x1, "x1")
    b = a if x2 is x1 else _as_points(x2, "x2")
    if a.shape[1] != b.shape[1]:
        raise ValueError("x1 and x2 must share a feature dimension")
    return rbf_kernel_matrix(a, b, params.length_scale, params.output_scale)


def _factor(train_x, params):
    """Cholesky of K(X, X) + jitter I, with one x10 jitter escalation."""
    k = rbf_kernel(train_x, train_x, params)
    jitter = params.jitter
    for attempt in range(2):
        kj = k if jitter == 0.0 else k + jitter * np.eye(len(k))
        try:
            return cho_factor(kj, lower=True), k
        except LinAlgError:
            if attempt == 0:
                jitter = jitter * 10.0 if jitter > 0.0 else 1e-8
    raise ConditioningError(
        f"kernel matrix not positive definite at jitter {jitter:g}",
        length_scale=params.length_scale,
        output_scale=params.output_scale,
        n_train=len(k),
    )


def _check_training(train_x, train_f):
    x = _as_points(train_x, "train_x")
    f = np.ascontiguousarray(train_f, dtype=np.float64)
    if f.shape != (len(x),):
        raise ValueError("train_f must be 1-d and match train_x rows")
    if not np.isfinite(f).all():
        raise ValueError("train_f must be finite")
    return x, f


def gp_condition(train_x, train_f, test_x, params):
    """Condition a noise-free GP on (train_x, train_f) and query test_x.

    Parameters
    ----------
    train_x : (n1, d) array of training inputs.
    train_f : (n1,) array of observed values.
    test_x : (n2, d) array of query inputs.
    params : GpHyperparams

    Returns
    -------
    GpPosterior with mean, variance (clipped at zero) and probability, each
    of shape (n2,).

    Raises
    ------
    ConditioningError
        If the kernel matrix cannot be factorized after jitter escalation.
    """
    x, f = _check_training(train_x, train_f)
    xs = _as_points(test_x, "test_x")
    if xs.shape[1] != x.shape[1]:
        raise ValueError("test_x feature dimension mismatch")
    (factor, _), _k = _factor(x, params)
    ks = rbf_kernel(x, xs, params)
    alpha = cho_solve((factor, True), f)
    mean = ks.T @ alpha
    v = solve_triangular(factor, ks, lower=True)
    prior = params.output_scale ** 2
    variance = np.maximum(prior - np.einsum("ij,ij->j", v, v), 0.0)
    return GpPosterior(mean, variance, probit_squash(mean, variance))


def marginal_log_likelihood(train_x, train_f, params, with_grad=False):
    """Exact marginal log likelihood of the training data.

        mll = -1/2 f' K^-1 f - 1/2 log det K - n/2 log 2 pi

    with K = K(X, X) + jitter I.

    Parameters
    ----------
    with_grad : bool
        When True, also return the gradient with respect to
        (log length_scale, log output_scale) as a (2,) array, computed from
        the standard identity d mll / d t = 1/2 tr((aa' - K^-1) dK/dt) with
        a = K^-1 f.

    Returns
    -------
    float, or (float, (2,) ndarray) when ``with_grad`` is set.
    """
    x, f = _check_training(train_x, train_f)
    (factor, lower), kexp = _factor(x, params)
    alpha = cho_solve((factor, lower), f)
    mll = (
        -0.5 * float(f @ alpha)
        - float(np.sum(np.log(np.diag(factor))))
        - 0.5 * len(f) * _LOG_2PI
    )
    if not with_grad:
        return mll
    kinv = cho_solve((factor, lower), np.eye(len(f)))
    a = np.outer(alpha, alpha) - kinv
    d2 = squared_distances(x, x)
    # dK/d log l = Kexp * d^2 / l^2 ; dK/d log s = 2 Kexp
    dk_dll = kexp * (d2 / params.length_scale ** 2)
    grad = np.array([
        0.5 * float(np.sum(a * dk_dll)),
        float(np.sum(a * kexp)),
    ])
    return mll, grad


def optimize_hyperparams(train_x, train_f, init, iters=50, lr=0.1):
    """Maximize the marginal log likelihood over (log l, log s) with Adam.

    Runs ``iters`` Adam steps (beta1 0.9, beta2 0.999, eps 1e-8) from
    ``init`` and returns the hyperparameters of the best iterate visited,
    the initial point included, so the result never scores below the start.
    Jitter is carried through unchanged.

    A failed factorization or a non-finite gradient stops the search early
    with a warning; the best iterate seen so far is returned.
    """
    if iters < 0:
        raise ValueError("iters must be non-negative")
    theta = np.log([init.length_scale, init.output_scale])
    best_theta = theta.copy()
    best_mll = -np.inf
    m = np.zeros(2)
    v = np.zeros(2)
    for t in range(iters + 1):
        params = replace(init, length_scale=float(np.exp(theta[0])),
                         output_scale=float(np.exp(theta[1])))
        try:
            if t == iters:
                mll = marginal_log_likelihood(train_x, train_f, params)
                grad = None
            else:
                mll, grad = marginal_log_likelihood(train_x, train_f, params,
                                                    with_grad=True)
        except ConditioningError as exc:
            warnings.warn(f"hyperparameter search stopped early: {exc}")
            break
        if mll > best_mll:
            best_mll = mll
            best_theta = theta.copy()
        if grad is None:
            break
        if not np.isfinite(grad).all():
            warnings.warn("hyperparameter search stopped on non-finite gradient")
            break
        m = 0.9 * m + 0.1 * grad
        v = 0.999 * v + 0.001 * grad * grad
        mhat = m / (1.0 - 0.9 ** (t + 1))
        vhat = v / (1.0 - 0.999 ** (t + 1))
        theta = theta + lr * mhat / (np.sqrt(vhat) + 1e-8)
    return replace(init, length_scale=float(np.exp(best_theta[0])),
                   output_scale=float(np.exp(best_theta[1])))


def probit_squash(mean, variance):
    """Map a Gaussian (mean, variance) through the logistic probit bound.

    Uses the standard moderation sigma(m / sqrt(1 + pi v / 8)), the
    closed-form approximation of the Gaussian-averaged sigmoid.  Accepts
    scalars or arrays; negative variances are rejected.
    """
    m = np.asarray(mean, dtype=np.float64)
    v = np.asarray(variance, dtype=np.float64)
    if (v < 0.0).any():
        raise ValueError("variance must be non-negative")
    out = expit(m / np.sqrt(1.0 + (math.pi / 8.0) * v))
    if np.isscalar(mean) and np.isscalar(variance):
        return float(out)
    return out
