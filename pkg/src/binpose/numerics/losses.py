"""Scalar losses returning ``(value, gradient)`` pairs."""
import numpy as np


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()
    grad = np.exp(logp)
    grad[rows, targets] -= 1
    return float(loss), grad / n


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def binary_cross_entropy_with_logits(logits, labels):
    """Mean BCE; ``labels`` in {0, 1}."""
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    loss = np.logaddexp(0, logits) - labels * logits
    grad = (sigmoid(logits) - labels) / n
    return float(loss.mean()), grad.astype(logits.dtype)


def l1_loss(pred, target, normalizer):
    """Sum of absolute differences divided by ``normalizer``."""
    if pred.size == 0:
        return 0.0, np.zeros_like(pred)
    diff = pred - target
    return float(np.abs(diff).sum() / normalizer), (np.sign(diff) / normalizer).astype(pred.dtype)
