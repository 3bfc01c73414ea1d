"""Shared test utilities: directional finite-difference gradient probes."""

import numpy as np

from cardiomotion.nn.tensor import Tensor, no_grad


def directional_probe_check(f, leaves, rng, probes=4, eps=1e-6, rtol=1e-5):
    """Compare reverse-mode gradients of a scalar graph against central FD.

    f maps a list of Tensors (same shapes as ``leaves``) to a scalar Tensor.
    For each random direction d the analytic directional derivative
    sum_i <grad_i, d_i> must match (f(x + eps d) - f(x - eps d)) / (2 eps).
    Returns the worst relative error over all probes.
    """
    base = [np.asarray(a, dtype=np.float64) for a in leaves]
    ts = [Tensor(a.copy(), requires_grad=True) for a in base]
    out = f(ts)
    out.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.values) for t in ts]

    worst = 0.0
    for _ in range(probes):
        ds = [rng.standard_normal(a.shape) for a in base]
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, ds))

        def value(sign):
            with no_grad():
                shifted = [Tensor(a + sign * eps * d) for a, d in zip(base, ds)]
                return f(shifted).item()

        fd = (value(+1.0) - value(-1.0)) / (2.0 * eps)
        denom = max(abs(analytic), abs(fd), 1e-8)
        rel = abs(analytic - fd) / denom
        worst = max(worst, rel)
        assert rel < rtol, f"directional derivative mismatch: {analytic} vs {fd} (rel {rel:.2e})"
    return worst


def keep_away_from(values, points, margin=0.05, nudge=0.1):
    """Nudge entries of ``values`` that sit within ``margin`` of any point.

    Finite differencing a piecewise-linear op across one of its kinks is
    meaningless, so test inputs step clear of them first.
    """
    out = np.asarray(values, dtype=np.float64).copy()
    for p in np.atleast_1d(points):
        close = np.abs(out - p) < margin
        out[close] = out[close] + nudge
    return out


def keep_off_lattice(coords, margin=0.05, nudge=0.1):
    """Push coordinates away from integer lattice lines (bilinear kinks)."""
    out = np.asarray(coords, dtype=np.float64).copy()
    close = np.abs(out - np.round(out)) < margin
    out[close] = out[close] + nudge
    return out
