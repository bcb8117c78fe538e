"""Central finite-difference checks against the reverse-mode gradients."""

import numpy as np


def numerical_grad(fn, tensor, step=1e-5, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. ``tensor.data`` in place.

    ``indices`` restricts the probe to a subset of flat positions; the
    returned array has NaN elsewhere.
    """
    flat = tensor.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn().data)
        flat[i] = orig - step
        down = float(fn().data)
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return out.reshape(tensor.shape)


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is essentially zero from
    turning round-off in the difference quotient into huge ratios.
    """
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def check_gradients(fn, params, step=1e-5, floor=1e-6):
    """Compare backprop against finite differences for every named parameter.

    ``fn`` builds and returns the scalar loss. Returns ``{name: max_rel_err}``.
    """
    for p in params.values():
        p.grad = None
    fn().backward()
    analytic = {name: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for name, p in params.items()}
    report = {}
    for name, p in params.items():
        numeric = numerical_grad(fn, p, step=step)
        report[name] = float(relative_error(analytic[name], numeric, floor).max()) if p.data.size else 0.0
    return report
