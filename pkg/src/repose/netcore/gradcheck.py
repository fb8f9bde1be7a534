"""Central finite-difference gradient checking."""
import numpy as np

from . import ops
from .tensor import no_grad


class GradCheckError(FloatingPointError):
    pass


def _reduce(out, weights):
    return float((out.data * weights).sum())


def grad_check(fn, tensors, eps=1e-6, max_elems=None, seed=0, name=None):
    """Max elementwise relative error between analytic and numeric gradients.

    ``fn()`` builds the output from the leaf ``tensors`` (inputs and/or
    parameters, all float64 with ``requires_grad``).  The output is reduced to
    a scalar with fixed random weights so every output element matters.  With
    ``max_elems`` only that many randomly chosen entries per tensor are probed.
    """
    label = name or getattr(fn, "__name__", "op")
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for t in tensors:
        if t.data.dtype != np.float64:
            raise TypeError(f"grad_check({label}): {t.name or 'tensor'} is {t.data.dtype}; use float64")
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    out = fn()
    if not np.all(np.isfinite(out.data)):
        raise GradCheckError(f"grad_check({label}): non-finite forward output")
    weights = rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape)
    ops.weighted_sum(out, weights).backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(analytic)):
            raise GradCheckError(f"grad_check({label}): non-finite analytic gradient for {t.name or 'tensor'}")
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idx = rng.choice(flat.size, size=max_elems, replace=False)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = _reduce(fn(), weights)
                flat[i] = orig - eps
                fm = _reduce(fn(), weights)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"grad_check({label}): non-finite value while probing {t.name or 'tensor'}")
            numeric = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
