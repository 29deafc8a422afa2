"""Synchronous event-driven round loop with simulated, byte-counted transport.

Each round:

1. the stream delivers a sample and the policy picks the active set ``A_t``;
2. active clients push embeddings; the server queries passive clients, which
   push theirs too (passive DLR clients enqueue a zero gradient);
3. the server evaluates loss and prediction on all ``M`` embeddings, takes its
   own step, and sends ``∂f/∂h_m`` to active clients only;
4. active clients apply the chain rule locally and step.

The server learns every round, including rounds where ``A_t`` is empty.
Payload elements are priced at 4 bytes; query messages at 8 bytes.
"""

import csv
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .optimizers import GradBuffer, OptimizerSpec, ogd_step, slr_window_gradient

BYTES_PER_ELEMENT = 4
QUERY_BYTES = 8
MB = 1024 ** 2
SERVER = -1

EMBEDDING_UP = "EmbeddingUp"
QUERY = "Query"
GRADIENT_DOWN = "GradientDown"
EMBEDDING_WINDOW_UP = "EmbeddingWindowUp"
GRADIENT_WINDOW_DOWN = "GradientWindowDown"

UPLINK_KINDS = (EMBEDDING_UP, EMBEDDING_WINDOW_UP)
DOWNLINK_KINDS = (GRADIENT_DOWN, GRADIENT_WINDOW_DOWN)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Message:
    kind: str
    src: int
    dst: int
    round: int
    elements: int = 0

    @property
    def nbytes(self):
        if self.kind == QUERY:
            return QUERY_BYTES
        return self.elements * BYTES_PER_ELEMENT


def window_length(kind, window, t):
    """Samples carried per message at 0-based round ``t``."""
    return min(t + 1, window) if kind == "slr" else 1


def round_plan(t, active, num_clients, embed_dim, kind="dlr", window=1):
    """Messages exchanged in round ``t``, in protocol order."""
    k = window_length(kind, window, t)
    up, down = (EMBEDDING_WINDOW_UP, GRADIENT_WINDOW_DOWN) if kind == "slr" else (
        EMBEDDING_UP, GRADIENT_DOWN)
    act = set(active)
    msgs = [Message(up, m, SERVER, t, k * embed_dim) for m in sorted(act)]
    for m in range(num_clients):
        if m not in act:
            msgs.append(Message(QUERY, SERVER, m, t))
            msgs.append(Message(up, m, SERVER, t, k * embed_dim))
    msgs.extend(Message(down, SERVER, m, t, k * embed_dim) for m in sorted(act))
    return msgs


def round_bytes(t, n_active, num_clients, embed_dim, kind="dlr", window=1):
    """``(bytes_up, bytes_down, bytes_query)`` for one round, without building messages."""
    k = window_length(kind, window, t)
    return (
        num_clients * k * embed_dim * BYTES_PER_ELEMENT,
        n_active * k * embed_dim * BYTES_PER_ELEMENT,
        (num_clients - n_active) * QUERY_BYTES,
    )


def dry_run_accounting(num_clients, embed_dim, num_rounds, kind="dlr", window=1,
                       probs=None, rng=None):
    """Communication totals over ``num_rounds`` with no model math.

    ``probs`` gives per-client Random activation probabilities (None = Full).
    Returns a dict with ``bytes_up``, ``bytes_down``, ``bytes_query`` and
    ``activations`` (per-client activated-round counts).
    """
    T = int(num_rounds)
    if probs is None:
        n_active = np.full(T, num_clients, dtype=np.int64)
        activations = np.full(num_clients, T, dtype=np.int64)
    else:
        activations = np.zeros(num_clients, dtype=np.int64)
        n_active = np.zeros(T, dtype=np.int64)
        chunk = 100_000
        p = np.asarray(probs)
        for start in range(0, T, chunk):
            u = rng.random((min(chunk, T - start), num_clients))
            act = u < p
            activations += act.sum(axis=0)
            n_active[start:start + act.shape[0]] = act.sum(axis=1)
    t = np.arange(T, dtype=np.int64)
    k = np.minimum(t + 1, window) if kind == "slr" else np.ones(T, dtype=np.int64)
    per = embed_dim * BYTES_PER_ELEMENT
    return {
        "bytes_up": int(np.sum(num_clients * k) * per),
        "bytes_down": int(np.sum(n_active * k) * per),
        "bytes_query": int(np.sum(num_clients - n_active) * QUERY_BYTES),
        "activations": activations,
    }


class Transport:
    """Simulated channel: tallies bytes, optionally keeps or logs every message."""

    def __init__(self, keep=False, event_log=None):
        self.keep = keep
        self.messages = []
        self.total_bytes = 0
        self._log = None
        self._log_file = None
        if event_log is not None:
            self._log_file = open(event_log, "w", newline="")
            self._log = csv.writer(self._log_file)
            self._log.writerow(["round", "kind", "from", "to", "bytes"])

    def send(self, msg):
        self.total_bytes += msg.nbytes
        if self.keep:
            self.messages.append(msg)
        if self._log is not None:
            self._log.writerow([msg.round, msg.kind, _name(msg.src), _name(msg.dst), msg.nbytes])
        return msg.nbytes

    def close(self):
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None
            self._log = None


def _name(pid):
    return "server" if pid == SERVER else f"client{pid}"


@dataclass
class RoundRecord:
    round: int
    loss: float
    correct: bool
    active: tuple
    bytes_up: int
    bytes_down: int
    bytes_query: int
    client_ns: tuple
    server_ns: int
    forward_passes: int
    backward_passes: int
    label: int = -1
    predicted: int = -1

    @property
    def empty_activation(self):
        return len(self.active) == 0


class _Participant:
    def __init__(self, model, buffer=None):
        self.model = model
        self.buffer = buffer
        self.clock_ns = 0
        dim = model.params.total_dim
        self.grad = np.zeros(dim)


@dataclass
class Simulation:
    """Server, clients, policy and stream bound into one deterministic round loop.

    ``param_bound`` clips every parameter to ``[-bound, bound]`` after each
    step (projected OGD for the convex audit).  With ``record_trace`` the
    full per-round gradient over ``[w0, w_1..w_M]``, passive clients
    included, is appended to ``trace`` before any update; this is read-only.
    ``on_predict(sim, sample, loss, predicted)`` fires after the server's
    forward pass and before any parameter changes.
    """

    server: object
    clients: list
    optimizer: OptimizerSpec
    policy: object
    stream: object
    activation_rng: np.random.Generator
    param_bound: float = None
    record_trace: bool = False
    transport: Transport = field(default_factory=Transport)
    on_predict: object = None
    on_round: object = None

    def __post_init__(self):
        if len(self.clients) != self.server.num_clients:
            raise ValueError(
                f"server expects {self.server.num_clients} clients, got {len(self.clients)}"
            )
        opt = self.optimizer
        dlr = opt.kind == "dlr"
        self._server = _Participant(
            self.server,
            GradBuffer(opt.window, opt.alpha, self.server.params.total_dim) if dlr else None,
        )
        self._clients = [
            _Participant(c, GradBuffer(opt.window, opt.alpha, c.params.total_dim) if dlr else None)
            for c in self.clients
        ]
        self._replay = deque(maxlen=opt.window) if opt.kind == "slr" else None
        self.trace = [] if self.record_trace else None
        self.embed_dim = self.server.embed_dim

    @property
    def num_clients(self):
        return len(self.clients)

    def _step(self, part, grad, lr):
        if part.buffer is not None:
            part.buffer.push(grad)
            part.buffer.step(part.model.params, lr)
        else:
            ogd_step(part.model.params, grad, lr)
        if self.param_bound is not None:
            np.clip(part.model.params.flat, -self.param_bound, self.param_bound,
                    out=part.model.params.flat)

    def full_gradient(self, sample):
        """Concatenated ``∇f^t`` over all participants at current parameters."""
        outs = [c.forward(x) for c, x in zip(self.clients, sample.parts)]
        _, _, tape = self.server.forward([h for h, _ in outs], sample.label)
        g_w0, vs = self.server.backward(tape)
        parts = [g_w0] + [c.backward(ct, v) for c, (_, ct), v in zip(self.clients, outs, vs)]
        return np.concatenate(parts)

    def run_round(self):
        sample = next(self.stream)
        t = sample.round
        activation = self.policy.decide(sample, self.activation_rng)
        if self.record_trace:
            self.trace.append(self.full_gradient(sample))
        if self.optimizer.kind == "slr":
            loss, pred, fwd, bwd = self._slr_round(sample, activation)
        else:
            loss, pred, fwd, bwd = self._incremental_round(sample, activation)

        up = down = query = 0
        for msg in round_plan(t, activation.active, self.num_clients, self.embed_dim,
                              self.optimizer.kind, self.optimizer.window):
            n = self.transport.send(msg)
            if msg.kind in UPLINK_KINDS:
                up += n
            elif msg.kind in DOWNLINK_KINDS:
                down += n
            else:
                query += n
        rec = RoundRecord(
            round=t, loss=loss, correct=(pred == sample.label), active=activation.active,
            bytes_up=up, bytes_down=down, bytes_query=query,
            client_ns=tuple(p.clock_ns for p in self._clients), server_ns=self._server.clock_ns,
            forward_passes=fwd, backward_passes=bwd, label=sample.label, predicted=pred,
        )
        if self.on_round is not None:
            self.on_round(self, sample, activation, rec)
        return rec

    def _check_loss(self, loss, t):
        if not np.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss {loss} at round {t}")

    def _incremental_round(self, sample, activation):
        t = sample.round
        opt = self.optimizer
        clock = time.perf_counter_ns
        for p in self._clients:
            p.clock_ns = 0
        embeddings = []
        tapes = []
        for p, x in zip(self._clients, sample.parts):
            t0 = clock()
            h, tape = p.model.forward(x)
            p.clock_ns += clock() - t0
            embeddings.append(h)
            tapes.append(tape)

        t0 = clock()
        loss, pred, stape = self.server.forward(embeddings, sample.label)
        self._server.clock_ns = clock() - t0
        self._check_loss(loss, t)
        if self.on_predict is not None:
            self.on_predict(self, sample, loss, pred)

        t0 = clock()
        g_w0, vs = self.server.backward(stape, out=self._server.grad)
        self._step(self._server, g_w0, opt.rate(opt.lr_server, t))
        self._server.clock_ns += clock() - t0

        lr_c = opt.rate(opt.lr_client, t)
        active = set(activation.active)
        for m, p in enumerate(self._clients):
            t0 = clock()
            if m in active:
                self._step(p, p.model.backward(tapes[m], vs[m], out=p.grad), lr_c)
            elif p.buffer is not None:
                p.buffer.push_zero()
            p.clock_ns += clock() - t0
        return loss, pred, self.num_clients + 1, 1 + len(active)

    def _slr_round(self, sample, activation):
        t = sample.round
        opt = self.optimizer
        self._replay.append(sample)
        timings = [0] * (self.num_clients + 1)
        res = slr_window_gradient(
            list(reversed(self._replay)), self.server, self.clients, opt.window,
            active=activation.active, timings=timings,
        )
        loss, pred = res.losses[0], res.predictions[0]
        self._check_loss(loss, t)
        if self.on_predict is not None:
            self.on_predict(self, sample, loss, pred)
        clock = time.perf_counter_ns
        t0 = clock()
        self._step(self._server, res.g_w0, opt.rate(opt.lr_server, t))
        timings[0] += clock() - t0
        lr_c = opt.rate(opt.lr_client, t)
        for m in activation.active:
            t0 = clock()
            self._step(self._clients[m], res.g_clients[m], lr_c)
            timings[m + 1] += clock() - t0
        self._server.clock_ns = timings[0]
        for m, p in enumerate(self._clients):
            p.clock_ns = timings[m + 1]
        return loss, pred, res.forward_passes, res.backward_passes

    def run_session(self, num_rounds, sink=None):
        """Run ``num_rounds`` rounds; records go to ``sink.add`` or are returned."""
        records = [] if sink is None else None
        for _ in range(int(num_rounds)):
            rec = self.run_round()
            if sink is None:
                records.append(rec)
            else:
                sink.add(rec)
        return records if sink is None else sink


def build_simulation(stream, policy, optimizer, num_clients, embed_dim=64,
                     server_hidden=(256,), client_hidden=(), num_classes=10,
                     init_rng=None, activation_rng=None, client_bias=True, **kwargs):
    """Assemble a :class:`Simulation` with ReLU encoders and a softmax MLP head."""
    from .models import ClientModel, ServerModel

    sizes = stream.partition.sizes
    if len(sizes) != num_clients:
        raise ValueError(f"partition has {len(sizes)} slices for {num_clients} clients")
    clients = [ClientModel(d, embed_dim, hidden=client_hidden, bias=client_bias, rng=init_rng)
               for d in sizes]
    server = ServerModel(num_clients, embed_dim, server_hidden, num_classes, rng=init_rng)
    return Simulation(server, clients, optimizer, policy, stream, activation_rng, **kwargs)
