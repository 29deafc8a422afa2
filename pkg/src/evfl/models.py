"""Split VFL model: per-client encoders and the label-holding server head.

Each participant keeps its parameters in a :class:`ParamStore`, a single flat
float64 vector with per-layer matrix/bias views into it.  Optimizer steps act
on the flat vector and the layer views follow automatically.

Forward passes return a *tape* holding the activations needed by the
matching backward pass, so several forwards may be in flight at once (the
static-window baseline replays a whole window at the current parameters).
"""

import struct
from dataclasses import dataclass

import numpy as np

from .tensor_math import (
    DimensionError,
    affine_forward,
    argmax_lowest,
    outer_into,
    relu,
    softmax_cross_entropy,
)


class StaleForwardError(RuntimeError):
    """Backward requested without a matching forward pass."""


class ParamStore:
    """Flat parameter vector plus layer shapes.

    ``shapes`` is a list of ``(out_dim, in_dim, has_bias)``; layer ``i``
    occupies ``out*in`` weights (row-major) followed by ``out`` biases.
    """

    def __init__(self, shapes, flat=None):
        self.shapes = [(int(o), int(i), bool(hb)) for o, i, hb in shapes]
        self.total_dim = sum(o * i + (o if hb else 0) for o, i, hb in self.shapes)
        if flat is None:
            flat = np.zeros(self.total_dim)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.total_dim,):
            raise DimensionError(
                f"flat vector has shape {flat.shape}, expected ({self.total_dim},)"
            )
        self.flat = flat
        self.layers = _layer_views(self.flat, self.shapes)

    @classmethod
    def initialize(cls, shapes, rng):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        store = cls(shapes)
        for (out, fan_in, _), (W, b) in zip(store.shapes, store.layers):
            bound = np.sqrt(1.0 / fan_in)
            W[...] = rng.uniform(-bound, bound, size=(out, fan_in))
            if b is not None:
                b[...] = rng.uniform(-bound, bound, size=out)
        return store

    def flatten(self):
        return self.flat.copy()

    def unflatten(self, vec):
        return ParamStore(self.shapes, np.array(vec, dtype=np.float64))

    def copy(self):
        return ParamStore(self.shapes, self.flat.copy())

    def grad_views(self, grad):
        """Layer views into a gradient vector laid out like ``flat``."""
        return _layer_views(grad, self.shapes)


def _layer_views(flat, shapes):
    views = []
    pos = 0
    for out, fan_in, has_bias in shapes:
        W = flat[pos:pos + out * fan_in].reshape(out, fan_in)
        pos += out * fan_in
        b = None
        if has_bias:
            b = flat[pos:pos + out]
            pos += out
        views.append((W, b))
    return views


def _mlp_shapes(sizes, bias):
    return [(sizes[i + 1], sizes[i], bias) for i in range(len(sizes) - 1)]


def _mlp_forward(params, x, relu_last):
    """Run the layer stack; returns (output, activations, pre-activations)."""
    acts = [x]
    pres = []
    h = x
    n = len(params.layers)
    for i, (W, b) in enumerate(params.layers):
        z = affine_forward(W, b, h)
        pres.append(z)
        h = relu(z) if (i < n - 1 or relu_last) else z
        acts.append(h)
    return h, acts, pres


def _mlp_backward(params, acts, pres, g_out, relu_last, need_input_grad=False, out=None):
    grad = np.empty(params.total_dim) if out is None else out
    gviews = params.grad_views(grad)
    n = len(params.layers)
    g = g_out
    for i in range(n - 1, -1, -1):
        if i < n - 1 or relu_last:
            g = np.where(pres[i] > 0.0, g, 0.0)
        W, _ = params.layers[i]
        gW, gb = gviews[i]
        outer_into(g, acts[i], gW)
        if gb is not None:
            gb[...] = g
        if i > 0 or need_input_grad:
            g = W.T @ g
    return grad, g


@dataclass
class Tape:
    owner: object
    acts: list
    pres: list


class ClientModel:
    """Client encoder ``h_m(w_m; x_m)``: affine layers with ReLU, ReLU on the embedding too.

    ``hidden`` adds extra hidden layers (the SUSY/HIGGS architecture uses
    ``hidden=(32, 64, 98)`` and ``embed_dim=128``).
    """

    def __init__(self, input_dim, embed_dim=64, hidden=(), bias=True,
                 relu_output=True, rng=None, params=None):
        self.input_dim = int(input_dim)
        self.embed_dim = int(embed_dim)
        self.relu_output = relu_output
        shapes = _mlp_shapes([self.input_dim, *hidden, self.embed_dim], bias)
        if params is not None:
            if params.shapes != shapes:
                raise DimensionError(f"param shapes {params.shapes} != {shapes}")
            self.params = params
        elif rng is not None:
            self.params = ParamStore.initialize(shapes, rng)
        else:
            self.params = ParamStore(shapes)
        self._last = None

    def forward(self, x):
        if x.shape != (self.input_dim,):
            raise DimensionError(
                f"client input has shape {x.shape}, expected ({self.input_dim},)"
            )
        h, acts, pres = _mlp_forward(self.params, x, self.relu_output)
        return h, Tape(self, acts, pres)

    def backward(self, tape, v, out=None):
        """``vᵀ ∂h/∂w`` as a flat vector aligned with ``params.flat``.

        ``out`` receives the result in place when given.
        """
        if tape is None or tape.owner is not self:
            raise StaleForwardError("client backward without a matching forward")
        if v.shape != (self.embed_dim,):
            raise DimensionError(
                f"embedding gradient has shape {v.shape}, expected ({self.embed_dim},)"
            )
        grad, _ = _mlp_backward(self.params, tape.acts, tape.pres, v, self.relu_output, out=out)
        return grad


class ServerModel:
    """Fusion head ``f(w0, h_1..h_M; y)``: concatenation, ReLU MLP, softmax cross-entropy."""

    def __init__(self, num_clients, embed_dim=64, hidden=(256,), num_classes=10,
                 rng=None, params=None):
        self.num_clients = int(num_clients)
        self.embed_dim = int(embed_dim)
        self.num_classes = int(num_classes)
        shapes = _mlp_shapes(
            [self.num_clients * self.embed_dim, *hidden, self.num_classes], True
        )
        if params is not None:
            if params.shapes != shapes:
                raise DimensionError(f"param shapes {params.shapes} != {shapes}")
            self.params = params
        elif rng is not None:
            self.params = ParamStore.initialize(shapes, rng)
        else:
            self.params = ParamStore(shapes)

    def _concat(self, embeddings):
        if len(embeddings) != self.num_clients:
            raise DimensionError(
                f"expected {self.num_clients} embeddings, got {len(embeddings)}"
            )
        for m, h in enumerate(embeddings):
            if h.shape != (self.embed_dim,):
                raise DimensionError(
                    f"embedding {m} has shape {h.shape}, expected ({self.embed_dim},)"
                )
        return np.concatenate(embeddings)

    def forward(self, embeddings, y):
        """Returns ``(loss, predicted_class, tape)``."""
        z = self._concat(embeddings)
        logits, acts, pres = _mlp_forward(self.params, z, False)
        loss, g_logits = softmax_cross_entropy(logits, y)
        tape = Tape(self, acts, pres)
        tape.g_logits = g_logits
        return loss, argmax_lowest(logits), tape

    def backward(self, tape, out=None):
        """Returns ``(g_w0, [v_1..v_M])`` with ``v_m = ∂f/∂h_m``."""
        if tape is None or tape.owner is not self:
            raise StaleForwardError("server backward without a matching forward")
        g_w0, g_in = _mlp_backward(
            self.params, tape.acts, tape.pres, tape.g_logits, False, need_input_grad=True,
            out=out,
        )
        d = self.embed_dim
        return g_w0, [g_in[m * d:(m + 1) * d] for m in range(self.num_clients)]


class SumLogisticServer:
    """Convex fusion head: logit ``z = Σ_m h_m + b`` with logistic loss, labels in {0, 1}.

    Paired with bias-free linear scalar encoders the composite loss is convex
    in all parameters jointly.
    """

    num_classes = 2

    def __init__(self, num_clients, params=None):
        self.num_clients = int(num_clients)
        self.embed_dim = 1
        self.params = params if params is not None else ParamStore([(1, 1, False)])

    def forward(self, embeddings, y):
        if len(embeddings) != self.num_clients:
            raise DimensionError(
                f"expected {self.num_clients} embeddings, got {len(embeddings)}"
            )
        z = float(sum(h[0] for h in embeddings) + self.params.flat[0])
        s = 2.0 * y - 1.0
        loss = float(np.logaddexp(0.0, -s * z))
        dz = -s / (1.0 + np.exp(s * z))
        tape = Tape(self, [], [])
        tape.dz = dz
        return loss, int(z > 0.0), tape

    def backward(self, tape, out=None):
        if tape is None or tape.owner is not self:
            raise StaleForwardError("server backward without a matching forward")
        dz = tape.dz
        g = np.array([dz]) if out is None else out
        g[0] = dz
        return g, [np.array([dz]) for _ in range(self.num_clients)]


def linear_client(input_dim, rng=None):
    """Bias-free scalar linear encoder for the convex setting."""
    return ClientModel(input_dim, embed_dim=1, bias=False, relu_output=False, rng=rng)


# Convenience wrappers that keep the last tape on the model.

def client_forward(model, x_m):
    h, tape = model.forward(x_m)
    model._last = (x_m, tape)
    return h


def client_backward(model, x_m, v_m):
    last = model._last
    if last is None or not (last[0] is x_m or np.array_equal(last[0], x_m)):
        raise StaleForwardError("client backward without a matching forward")
    return model.backward(last[1], v_m)


def server_forward(model, embeddings, y):
    loss, pred, tape = model.forward(embeddings, y)
    model._last = tape
    return loss, pred


def server_backward(model, embeddings=None, y=None):
    return model.backward(getattr(model, "_last", None))


# Checkpoints: little-endian header followed by the flat float64 vector.

_CKPT_MAGIC = b"EVFLCKP1"


def save_checkpoint(path, participant_id, params):
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<iI", participant_id, len(params.shapes)))
        for out, fan_in, has_bias in params.shapes:
            f.write(struct.pack("<IIB", out, fan_in, int(has_bias)))
        f.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(participant_id, ParamStore)``."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pid, n = struct.unpack_from("<iI", data, 8)
    pos = 16
    shapes = []
    for _ in range(n):
        shapes.append(struct.unpack_from("<IIB", data, pos))
        pos += 9
    flat = np.frombuffer(data, dtype="<f8", offset=pos).astype(np.float64)
    return pid, ParamStore(shapes, flat)
