"""Update rules: plain OGD, static-window SLR and exponentially smoothed DLR.

DLR keeps, per participant, a ring of the last ``l`` raw gradients and steps
along their exponentially weighted average

    (1/W) Σ_{i<l} α^i g_{t-i},   W = Σ_{i<l} α^i.

Missing history (first ``l-1`` rounds) counts as zero gradients and W stays
the full-window normalizer.
"""

import time
from dataclasses import dataclass

import numpy as np

from .tensor_math import DimensionError, axpy

OPTIMIZER_KINDS = ("ogd", "slr", "dlr")


class GradBuffer:
    """Fixed-capacity ring of flat gradients with exponential age weights.

    The weighted sum ``U_t = Σ_{i<l} α^i g_{t-i}`` is maintained incrementally
    as ``U_t = g_t + α (U_{t-1} - α^{l-1} g_{t-l})``, so a push costs O(dim)
    regardless of ``l``.  For ``l = 1`` this is exactly ``g_t``; for larger
    windows earlier rounding error is damped by ``α`` every round.
    :meth:`weighted_sum` recomputes the sum from the ring directly.
    """

    def __init__(self, capacity, alpha, dim):
        if capacity < 1:
            raise ValueError(f"window length must be >= 1, got {capacity}")
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must satisfy 0 < alpha < 1, got {alpha}")
        self.capacity = int(capacity)
        self.alpha = float(alpha)
        self.dim = int(dim)
        self._powers = self.alpha ** np.arange(self.capacity)
        self.normalizer = float(np.sum(self._powers))
        self._tail = float(self._powers[-1])
        self._ring = np.zeros((self.capacity, self.dim))
        self._sum = np.zeros(self.dim)
        self._head = -1
        self.count = 0

    def __len__(self):
        return self.count

    def push(self, grad):
        if grad.shape != (self.dim,):
            raise DimensionError(f"gradient has shape {grad.shape}, buffer holds ({self.dim},)")
        self._head = (self._head + 1) % self.capacity
        slot = self._ring[self._head]  # oldest entry (or zeros), about to be evicted
        axpy(-self._tail, slot, self._sum)
        self._sum *= self.alpha
        axpy(1.0, grad, self._sum)
        slot[...] = grad
        self.count = min(self.count + 1, self.capacity)

    def push_zero(self):
        self._head = (self._head + 1) % self.capacity
        slot = self._ring[self._head]
        axpy(-self._tail, slot, self._sum)
        self._sum *= self.alpha
        slot[...] = 0.0
        self.count = min(self.count + 1, self.capacity)

    def entries(self):
        """Stored gradients, newest first."""
        return [self._ring[(self._head - i) % self.capacity].copy() for i in range(self.count)]

    def weighted_sum(self):
        """``Σ α^i g_{t-i}`` evaluated directly from the ring."""
        # slot s holds the gradient of age (head - s) mod l; unfilled slots are zero
        ages = (self._head - np.arange(self.capacity)) % self.capacity
        return self._powers[ages] @ self._ring

    def smoothed(self):
        if self.count == 0:
            raise ValueError("smoothed gradient of an empty buffer")
        return self._sum / self.normalizer

    def step(self, params, lr):
        """In-place ``params.flat -= lr * smoothed()``."""
        if self.count == 0:
            raise ValueError("smoothed gradient of an empty buffer")
        axpy(-lr / self.normalizer, self._sum, params.flat)


def smoothed_gradient(buf):
    return buf.smoothed()


def ogd_step(params, grad, lr):
    """In-place ``params.flat -= lr * grad``; returns ``params``."""
    if grad.shape != params.flat.shape:
        raise DimensionError(f"gradient shape {grad.shape} != params shape {params.flat.shape}")
    axpy(-lr, grad, params.flat)
    return params


def dlr_participant_step(params, buf, new_grad, lr):
    """Enqueue ``new_grad`` then step along the smoothed gradient."""
    if new_grad.shape != params.flat.shape:
        raise DimensionError(
            f"gradient shape {new_grad.shape} != params shape {params.flat.shape}"
        )
    buf.push(new_grad)
    buf.step(params, lr)
    return params


@dataclass
class SLRWindowResult:
    g_w0: np.ndarray
    g_clients: list
    v_window: list
    losses: list
    predictions: list
    forward_passes: int
    backward_passes: int


def slr_window_gradient(replay, server, clients, window, active=None, timings=None):
    """Static local-regret gradient: window average at the *current* parameters.

    ``replay`` lists the most recent ``min(t, window)`` samples, newest first.
    Sums are divided by ``window`` (missing history counts as zero loss).
    Client gradients are computed for ``active`` clients only (all when None);
    the others get ``None``.  ``v_window[m]`` lists ``∂f^{t-i}/∂h_m`` per
    replayed sample, i.e. the gradient window shipped to client ``m``.
    ``timings``, if given, accumulates nanoseconds per participant
    (index 0 = server, ``m + 1`` = client ``m``).
    """
    if not replay:
        raise ValueError("SLR gradient of an empty replay window")
    clock = time.perf_counter_ns
    if timings is None:
        timings = [0] * (len(clients) + 1)
    active = range(len(clients)) if active is None else active
    g_w0 = np.zeros(server.params.total_dim)
    g_clients = [np.zeros(c.params.total_dim) if m in active else None
                 for m, c in enumerate(clients)]
    v_window = [[] for _ in clients]
    losses, preds = [], []
    fwd = bwd = 0
    for sample in replay:
        outs = []
        for m, (c, x) in enumerate(zip(clients, sample.parts)):
            t0 = clock()
            outs.append(c.forward(x))
            timings[m + 1] += clock() - t0
        t0 = clock()
        loss, pred, tape = server.forward([h for h, _ in outs], sample.label)
        gs, vs = server.backward(tape)
        g_w0 += gs
        timings[0] += clock() - t0
        losses.append(loss)
        preds.append(pred)
        fwd += len(clients) + 1
        bwd += 1
        for m in active:
            t0 = clock()
            g_clients[m] += clients[m].backward(outs[m][1], vs[m])
            timings[m + 1] += clock() - t0
            v_window[m].append(vs[m])
            bwd += 1
    g_w0 /= window
    for g in g_clients:
        if g is not None:
            g /= window
    return SLRWindowResult(g_w0, g_clients, v_window, losses, preds, fwd, bwd)


@dataclass(frozen=True)
class OptimizerSpec:
    """Which update rule and its hyperparameters.

    ``decay`` is ``"constant"`` or ``"inv_sqrt"`` (rate ``lr / sqrt(t + 1)`` at
    0-based round ``t``).
    """

    kind: str = "dlr"
    window: int = 10
    alpha: float = 0.95
    lr_server: float = 0.01
    lr_client: float = 0.01
    decay: str = "constant"

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"optimizer kind must be one of {OPTIMIZER_KINDS}, got {self.kind!r}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must satisfy 0 < alpha < 1, got {self.alpha}")
        if self.lr_server < 0 or self.lr_client < 0:
            raise ValueError("learning rates must be non-negative")
        if self.decay not in ("constant", "inv_sqrt"):
            raise ValueError(f"unknown decay {self.decay!r}")

    def rate(self, base, t):
        if self.decay == "inv_sqrt":
            return base / np.sqrt(t + 1.0)
        return base
