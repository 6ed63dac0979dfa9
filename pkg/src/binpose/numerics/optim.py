import numpy as np

from ..errors import NumericError

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


def adam_step(params, learning_rate, beta1=BETA1, beta2=BETA2, eps=EPSILON):
    """One bias-corrected ADAM update over ``params``; gradients are zeroed afterwards.

    A parameter whose gradient is identically zero keeps its value and moments
    (only ``step_count`` advances), so frozen or unused heads never drift.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        p.step_count += 1
        if not p.grad.any():
            continue
        g = p.grad
        p.m *= beta1
        p.m += (1 - beta1) * g
        p.v *= beta2
        p.v += (1 - beta2) * g * g
        m_hat = p.m / (1 - beta1 ** p.step_count)
        v_hat = p.v / (1 - beta2 ** p.step_count)
        p.value -= (learning_rate * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)
        p.zero_grad()
