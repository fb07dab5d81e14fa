"""Training losses for consuming the pseudo labels.

Each loss returns a scalar (mean over elements) and, on request, its exact
gradient with respect to the predictions.  Gradients are verified against
central finite differences in the tests.
"""

import numpy as np


def _pair(pred, target):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError("prediction and target shapes must match")
    if p.size == 0:
        raise ValueError("empty inputs")
    return p.ravel(), t.ravel()


def kl_uncertainty_loss(pred_mean, pred_var, target_mean, target_var,
                        with_grad=False):
    """Gaussian KL matching of predicted (mean, variance) to the targets.

    Per element, with targets (e, v) and predictions (e^, v^):

        v > 0:   log(v^ / v) + (v**2 + (e - e^)**2) / (2 v^**2) - 1/2
        v == 0:  (e - e^)**2 + v^**2

    and the result is the mean over elements.  The zero-variance branch is a
    plain squared penalty that drives the prediction onto the point target.

    When ``with_grad`` is set, also returns (d/d pred_mean, d/d pred_var).
    """
    eh, e = _pair(pred_mean, target_mean)
    vh, v = _pair(pred_var, target_var)
    if eh.shape != vh.shape:
        raise ValueError("mean and variance shapes must match")
    if (v < 0.0).any():
        raise ValueError("target variances must be non-negative")
    pos = v > 0.0
    if (vh[pos] <= 0.0).any():
        raise ValueError("predicted variance must be positive where the "
                         "target variance is")
    if (vh[~pos] < 0.0).any():
        raise ValueError("predicted variances must be non-negative")

    n = len(eh)
    diff = e - eh
    vals = np.empty(n)
    vals[pos] = (np.log(vh[pos] / v[pos])
                 + (v[pos] ** 2 + diff[pos] ** 2) / (2.0 * vh[pos] ** 2)
                 - 0.5)
    neg = ~pos
    vals[neg] = diff[neg] ** 2 + vh[neg] ** 2
    loss = float(vals.mean())
    if not with_grad:
        return loss

    g_mean = np.empty(n)
    g_var = np.empty(n)
    g_mean[pos] = -diff[pos] / vh[pos] ** 2
    g_var[pos] = 1.0 / vh[pos] - (v[pos] ** 2 + diff[pos] ** 2) / vh[pos] ** 3
    g_mean[neg] = -2.0 * diff[neg]
    g_var[neg] = 2.0 * vh[neg]
    shape = np.asarray(pred_mean, dtype=np.float64).shape
    return loss, (g_mean.reshape(shape) / n, g_var.reshape(shape) / n)


def dice_loss(pred, target, eps=1e-6, with_grad=False):
    """Soft Dice loss 1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)."""
    p, t = _pair(pred, target)
    num = 2.0 * float(p @ t) + eps
    den = float(p.sum() + t.sum()) + eps
    loss = 1.0 - num / den
    if not with_grad:
        return loss
    grad = -(2.0 * t * den - num) / den ** 2
    return loss, grad.reshape(np.asarray(pred, dtype=np.float64).shape)


def bce_loss(pred, target, with_grad=False):
    """Mean binary cross entropy; predictions must lie strictly in (0, 1)."""
    p, t = _pair(pred, target)
    if (p <= 0.0).any() or (p >= 1.0).any():
        raise ValueError("predictions must lie strictly in (0, 1)")
    loss = float(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean())
    if not with_grad:
        return loss
    grad = (p - t) / (p * (1.0 - p)) / len(p)
    return loss, grad.reshape(np.asarray(pred, dtype=np.float64).shape)
