"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .exceptions import UsageError, ValidationError

REL_FLOOR = 1e-8


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(REL_FLOOR, np.abs(analytic) + np.abs(numeric))


def numerical_gradient(fun, param, eps=1e-5, index=None, pattern=None):
    """Central differences of scalar ``fun()`` w.r.t. ``param`` (perturbed in place).

    ``index`` restricts the sweep to a subset of flat positions; the other
    entries of the result are left as NaN.  If ``pattern`` is given it must
    return a hashable/bytes signature of the piecewise-linear regime (relu
    masks, pooling winners); entries whose signature changes within
    ``+-eps`` straddle a kink and are also left as NaN.
    """
    if not eps > 0:
        raise ValidationError(f"eps must be positive, got {eps!r}")
    flat = param.reshape(-1)
    if not np.shares_memory(flat, param):
        raise UsageError("parameter must be a contiguous array so it can be perturbed in place")
    grad = np.full(flat.shape, np.nan)
    positions = range(flat.size) if index is None else index
    base = pattern() if pattern is not None else None
    for k in positions:
        orig = flat[k]
        flat[k] = orig + eps
        plus = fun()
        kinked = pattern is not None and pattern() != base
        flat[k] = orig - eps
        minus = fun()
        kinked = kinked or (pattern is not None and pattern() != base)
        flat[k] = orig
        if not kinked:
            grad[k] = (plus - minus) / (2 * eps)
    return grad.reshape(param.shape)


class GradCheckReport(dict):
    """``name -> max relative error``; ``skipped`` counts kink-straddling entries."""

    def __init__(self, errors, skipped, checked):
        super().__init__(errors)
        self.skipped = skipped
        self.checked = checked

    @property
    def max_error(self):
        return max(self.values(), default=0.0)


def grad_check_detail(fun, params, eps=1e-5, max_entries=None, seed=0, pattern=None):
    """Per-parameter max relative error between analytic and numeric gradients.

    Parameters
    ----------
    fun : callable
        ``fun()`` returns ``(loss, grads)`` where ``grads`` is keyed like
        ``params``.  It must read the current values of ``params``.
    params : dict of str -> ndarray
        Arrays perturbed in place during the check; restored afterwards.
    eps : float
        Half-width of the central difference.
    max_entries : int, optional
        If given, check at most this many randomly chosen entries per array.
    pattern : callable, optional
        Regime signature used to skip entries that cross a kink; see
        :func:`numerical_gradient`.

    Returns
    -------
    GradCheckReport
    """
    if not eps > 0:
        raise ValidationError(f"eps must be positive, got {eps!r}")
    loss, analytic = fun()
    again, _ = fun()
    if loss != again:
        raise UsageError(f"function is not deterministic: {loss!r} != {again!r}")

    def scalar():
        return fun()[0]

    rng = np.random.default_rng(seed)
    report, skipped, checked = {}, {}, {}
    for name, value in params.items():
        n = value.size
        index = None
        if max_entries is not None and n > max_entries:
            index = np.sort(rng.choice(n, size=max_entries, replace=False))
        numeric = numerical_gradient(scalar, value, eps, index, pattern)
        a = np.asarray(analytic[name]).reshape(-1)
        num = numeric.reshape(-1)
        sel = np.arange(n) if index is None else index
        ok = sel[~np.isnan(num[sel])]
        skipped[name] = len(sel) - len(ok)
        checked[name] = len(ok)
        report[name] = float(relative_error(a[ok], num[ok]).max()) if len(ok) else 0.0
    return GradCheckReport(report, skipped, checked)


def grad_check(fun, params, eps=1e-5, **kwargs):
    """Max relative error over all checked entries; see :func:`grad_check_detail`."""
    if isinstance(params, (list, tuple)):
        params = {str(i): p for i, p in enumerate(params)}
        inner = fun

        def fun():
            loss, grads = inner()
            return loss, {str(i): g for i, g in enumerate(grads)}

    return grad_check_detail(fun, params, eps, **kwargs).max_error
