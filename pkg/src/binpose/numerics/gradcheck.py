"""Central finite-difference verification of analytic gradients."""
import numpy as np

from .layers import Layer


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


# central-difference stencils: offsets (in units of eps) and weights
_STENCILS = {2: ((1, -1), (0.5, -0.5)),
             4: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12))}


def numeric_gradient(f, x, eps, order=2):
    """Central differences of scalar ``f`` around float64 ``x``.

    ``order=4`` uses the five-point stencil, which tolerates a larger ``eps``
    and so suffers less cancellation.
    """
    if order not in _STENCILS:
        raise ValueError("order must be 2 or 4")
    offsets, weights = _STENCILS[order]
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        acc = 0.0
        for k, w in zip(offsets, weights):
            flat[i] = orig + k * eps
            acc += w * f(x)
        flat[i] = orig
        gflat[i] = acc / eps
    return grad


def _check_layer(layer, x, eps, upstream, rng, order):
    # the oracle runs a float64 copy, so the comparison measures the analytic
    # gradient rather than cancellation noise of the working precision
    out = layer.forward(x)
    if upstream is None:
        upstream = rng.standard_normal(out.shape)
    upstream = np.asarray(upstream)
    for p in layer.params:
        p.zero_grad()
    dx = layer.backward(x, upstream.astype(out.dtype))
    ref = layer.astype(np.float64)
    up64 = upstream.astype(np.float64)

    x64 = np.asarray(x, dtype=np.float64)
    base = ref.forward(x64)

    # projecting the change from the base output keeps the value O(eps), so
    # rounding noise in entries with a zero gradient stays far below tolerance
    def project(y):
        return float(((y - base) * up64).sum())

    errors = [relative_error(dx, numeric_gradient(lambda z: project(ref.forward(z)), x, eps,
                                                  order))]
    for p, p_ref in zip(layer.params, ref.params):
        def f(value, p_ref=p_ref):
            saved = p_ref.value
            p_ref.value = value
            try:
                return project(ref.forward(x64))
            finally:
                p_ref.value = saved
        errors.append(relative_error(p.grad, numeric_gradient(f, p_ref.value, eps, order)))
        p.zero_grad()
    return max(errors)


def grad_check(target, x, eps=1e-3, upstream=None, rng=None, order=2):
    """Maximum element-wise relative error between analytic and numeric gradients.

    ``target`` is either a :class:`Layer` (checked through the random projection
    ``sum(upstream * forward(x))`` for the input and every parameter) or a
    callable ``f(x) -> (loss, grad)``.  Relative error uses the denominator
    ``max(|a|, |b|, 1e-6)``; ``order`` selects the finite-difference stencil.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    if isinstance(target, Layer):
        return _check_layer(target, x, eps, upstream, rng, order)
    _, analytic = target(np.asarray(x))
    numeric = numeric_gradient(lambda z: float(target(z)[0]), x, eps, order)
    return relative_error(analytic, numeric)
