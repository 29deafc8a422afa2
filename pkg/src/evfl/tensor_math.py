"""Dense numeric kernels with hand-written backward passes.

Matrices are 2-D float64 arrays (row-major), vectors are 1-D float64 arrays.
Every function is pure except ``outer_into`` and ``axpy``, which write into
their output argument.
"""

import numpy as np
from scipy.linalg.blas import daxpy, dger


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def _shape_error(what, a, b):
    return DimensionError(f"{what}: incompatible shapes {tuple(a)} and {tuple(b)}")


def affine_forward(W, b, x):
    """Return ``W @ x + b``. ``b`` may be None for a bias-free layer."""
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise _shape_error("affine_forward W·x", W.shape, x.shape)
    out = W @ x
    if b is not None:
        if b.shape != (W.shape[0],):
            raise _shape_error("affine_forward bias", W.shape, b.shape)
        out += b
    return out


def affine_backward(W, x, g_out):
    """Gradients of ``g_outᵀ (W x + b)`` w.r.t. W, b and x.

    Returns ``(gW, gb, gx)`` with ``gW = g_out xᵀ``, ``gb = g_out`` and
    ``gx = Wᵀ g_out``.
    """
    if g_out.ndim != 1 or g_out.shape[0] != W.shape[0]:
        raise _shape_error("affine_backward g_out", W.shape, g_out.shape)
    if x.ndim != 1 or x.shape[0] != W.shape[1]:
        raise _shape_error("affine_backward x", W.shape, x.shape)
    return np.outer(g_out, x), g_out.copy(), W.T @ g_out


def outer_into(g, x, out):
    """Write ``g xᵀ`` into the C-contiguous matrix ``out`` (a rank-1 BLAS update).

    Bitwise equal to ``np.outer(g, x)`` and about twice as fast at layer sizes.
    """
    if out.shape != (g.shape[0], x.shape[0]):
        raise _shape_error("outer_into", (g.shape[0], x.shape[0]), out.shape)
    out.fill(0.0)
    # the transpose of a C-ordered matrix is Fortran-ordered, so BLAS writes in place
    dger(1.0, x, g, a=out.T, overwrite_a=1)
    return out


def axpy(a, x, y):
    """In-place ``y += a * x`` for contiguous float64 vectors; returns ``y``."""
    if x.shape != y.shape:
        raise _shape_error("axpy", x.shape, y.shape)
    if y.flags.c_contiguous and y.dtype == np.float64:
        daxpy(x, y, a=a)
    else:  # BLAS would work on a copy
        y += a * x
    return y


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, g_out):
    # subgradient at exactly 0 is 0
    if x.shape != g_out.shape:
        raise _shape_error("relu_backward", x.shape, g_out.shape)
    return np.where(x > 0.0, g_out, 0.0)


def softmax(logits):
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_cross_entropy(logits, label):
    """Cross-entropy of ``softmax(logits)`` against a class index.

    Returns ``(loss, g_logits)`` where ``g_logits = softmax(logits) - onehot(label)``.
    """
    k = logits.shape[0]
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    z = logits - logits.max()
    log_norm = np.log(np.exp(z).sum())
    loss = float(log_norm - z[label])
    g = np.exp(z - log_norm)
    g[label] -= 1.0
    return loss, g


def argmax_lowest(v):
    """Index of the maximum entry; ties resolve to the lowest index."""
    return int(np.argmax(v))
