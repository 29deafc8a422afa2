"""Empirical regret audits: dynamic local regret and convex regret.

Both audits are read-only consumers of a finished run.  The DLR audit works
on a :class:`GradientTrace` (the full per-round gradient over server and all
clients, passive ones included), the convex audit on the realized samples
and the online per-round losses.
"""

import csv
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .events import EventActivation, FullActivation
from .models import ClientModel, ServerModel, SumLogisticServer, linear_client
from .optimizers import OptimizerSpec
from .protocol import Simulation
from .streams import (
    ClassSampler,
    DataStream,
    FeaturePartition,
    GaussianClassSource,
    SeparableBinarySource,
)


class OracleNonConvergence(RuntimeError):
    """The offline comparator did not reach tolerance within its iteration cap."""


@dataclass
class GradientTrace:
    """Per-round flat gradients stacked as a ``(rounds, dim)`` array."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"trace must be 2-D (rounds, dim), got shape {self.data.shape}")

    @classmethod
    def from_rows(cls, rows):
        rows = list(rows)
        if not rows:
            return cls(np.zeros((0, 0)))
        return cls(np.vstack(rows))

    def __len__(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]

    def save(self, path):
        """Little-endian ``<QQ`` header (dim, count) followed by ``<f8`` rows."""
        with open(path, "wb") as f:
            f.write(struct.pack("<QQ", self.dim, len(self)))
            f.write(self.data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < 16:
            raise ValueError(f"{path}: trace header truncated")
        dim, count = struct.unpack_from("<QQ", raw, 0)
        if len(raw) - 16 != 8 * dim * count:
            raise ValueError(
                f"{path}: payload has {len(raw) - 16} bytes, header implies {8 * dim * count}"
            )
        data = np.frombuffer(raw, dtype="<f8", offset=16).astype(np.float64)
        return cls(data.reshape(count, dim))


@dataclass
class RegretSeries:
    """``(T, value)`` checkpoints, ``T`` counting rounds from 1."""

    checkpoints: list = field(default_factory=list)

    @property
    def horizons(self):
        return np.array([T for T, _ in self.checkpoints], dtype=np.float64)

    @property
    def values(self):
        return np.array([v for _, v in self.checkpoints], dtype=np.float64)


def _resolve_checkpoints(checkpoints, T):
    if checkpoints is None:
        return list(range(1, T + 1))
    out = sorted(int(c) for c in checkpoints)
    if out and (out[0] < 1 or out[-1] > T):
        raise ValueError(f"checkpoints must lie in [1, {T}], got {out}")
    return out


def empirical_dlr(trace, l, alpha, checkpoints=None):
    """``DLR_l(T) = Σ_{t≤T} ||∇S_t||²`` evaluated directly from the trace.

    ``∇S_t = (1/W_t) Σ_{i<min(t,l)} α^i ∇f^{t-i}`` where ``W_t`` sums the
    weights of the terms present, so the first round contributes
    ``||∇f^1||²`` unscaled.  All checkpoints by default.
    """
    G = trace.data if isinstance(trace, GradientTrace) else np.asarray(trace, dtype=np.float64)
    T = G.shape[0]
    if T == 0:
        raise ValueError("empirical DLR of an empty trace")
    if l < 1:
        raise ValueError(f"window length must be >= 1, got {l}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must satisfy 0 < alpha < 1, got {alpha}")
    U = G.copy()
    for i in range(1, min(l, T)):
        U[i:] += alpha ** i * G[:T - i]
    weights = np.cumsum(alpha ** np.arange(min(l, T)))
    norm = np.full(T, weights[-1])
    norm[:weights.size] = weights
    per_round = np.einsum("ij,ij->i", U, U) / norm ** 2
    cum = np.cumsum(per_round)
    return RegretSeries([(T_, float(cum[T_ - 1])) for T_ in _resolve_checkpoints(checkpoints, T)])


def sublinearity_slope(series):
    """Least-squares slope of ``log(value)`` against ``log(T)``.

    Non-positive values are dropped with a warning; at least four usable
    checkpoints spanning a decade are required.
    """
    T = series.horizons
    v = series.values
    keep = v > 0
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} non-positive checkpoint value(s)")
    T, v = T[keep], v[keep]
    if T.size < 4:
        raise ValueError(f"slope needs >= 4 positive checkpoints, got {T.size}")
    if T.max() < 10 * T.min():
        raise ValueError(f"checkpoints must span a decade, got {T.min():g}..{T.max():g}")
    slope, _ = np.polyfit(np.log(T), np.log(v), 1)
    return float(slope)


def write_series_csv(path, series, value_name):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["T", value_name])
        for T, v in series.checkpoints:
            w.writerow([T, repr(float(v))])


def read_series_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return RegretSeries([(int(r[0]), float(r[1])) for r in rows[1:]])


# Convex setting: bias-free scalar linear encoders plus a summing logistic head,
# so the composite logit is z = Σ_m w_mᵀ x_m + b and the loss is convex.

def logistic_objective(theta, X, s):
    """Mean logistic loss and gradient for ``theta = [b, w]`` with signs ``s = ±1``."""
    z = X @ theta[1:] + theta[0]
    m = -s * z
    loss = np.logaddexp(0.0, m)
    r = -s * np.exp(m - loss)  # -s * sigmoid(m)
    n = X.shape[0]
    grad = np.empty_like(theta)
    grad[0] = r.sum() / n
    grad[1:] = X.T @ r / n
    return float(loss.sum() / n), grad


def logistic_losses(theta, X, s):
    return np.logaddexp(0.0, -s * (X @ theta[1:] + theta[0]))


def offline_oracle(X, y, bound, tol=1e-8, max_iter=10_000, theta0=None):
    """Minimizer of the mean logistic loss over the box ``[-bound, bound]``.

    Converged when the projected gradient's max-norm falls below ``tol``.
    Returns ``(theta, mean_loss)``.
    """
    s = 2.0 * np.asarray(y, dtype=np.float64) - 1.0
    x0 = np.zeros(X.shape[1] + 1) if theta0 is None else np.clip(theta0, -bound, bound)
    res = minimize(
        logistic_objective, x0, args=(X, s), jac=True, method="L-BFGS-B",
        bounds=[(-bound, bound)] * x0.size,
        options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0, "maxfun": 2 * max_iter},
    )
    theta = res.x
    loss, g = logistic_objective(theta, X, s)
    # projected gradient: components pushing outward at an active bound vanish
    pg = np.where(((theta >= bound) & (g < 0)) | ((theta <= -bound) & (g > 0)), 0.0, g)
    if np.max(np.abs(pg)) > tol:
        raise OracleNonConvergence(
            f"projected gradient {np.max(np.abs(pg)):.3e} above {tol:g} after {res.nit} iterations"
        )
    return theta, loss


@dataclass
class ConvexRegretResult:
    series: RegretSeries
    oracle_mean_loss: list
    online_mean_loss: list


def convex_regret(online_losses, X, y, checkpoints, bound, tol=1e-8, max_iter=10_000):
    """``R_T = Σ_{t≤T} f^t(online) - Σ_{t≤T} f^t(θ*_T)`` with a per-prefix comparator.

    ``online_losses[t]`` is round ``t``'s loss at the online parameters
    (scored before the update); ``X``/``y`` are the realized samples with
    features concatenated in client order.
    """
    online_losses = np.asarray(online_losses, dtype=np.float64)
    T = online_losses.size
    if T == 0:
        raise ValueError("convex regret of an empty session")
    online_cum = np.cumsum(online_losses)
    out = ConvexRegretResult(RegretSeries(), [], [])
    theta = None
    for T_ in _resolve_checkpoints(checkpoints, T):
        theta, mean_loss = offline_oracle(X[:T_], y[:T_], bound, tol, max_iter, theta)
        out.series.checkpoints.append((T_, float(online_cum[T_ - 1] - T_ * mean_loss)))
        out.oracle_mean_loss.append(mean_loss)
        out.online_mean_loss.append(float(online_cum[T_ - 1] / T_))
    return out


# Experiment drivers for the two audits.

def sqrt_window_schedule(T, alpha=0.99):
    """Window ``round(√T)`` and constant rate ``T^{-1/4}`` for horizon ``T``."""
    return int(round(math.sqrt(T))), T ** -0.25, alpha


def nonconvex_audit_run(T, seed=0, alpha=0.99, dim=20, num_clients=4, num_classes=4,
                        embed_dim=4, server_hidden=(16,), drift_period=50, policy=None):
    """One DLR session on a drifting Gaussian stream under the horizon-``T`` schedule.

    Returns ``(trace, window, alpha)``.
    """
    window, lr, alpha = sqrt_window_schedule(T, alpha)
    seeds = np.random.SeedSequence(seed).spawn(3)
    data_rng, init_rng, act_rng = (np.random.default_rng(s) for s in seeds)
    source = GaussianClassSource(dim, num_classes, data_rng, separation=1.0, noise=1.0)
    partition = FeaturePartition.even(dim, num_clients)
    stream = DataStream(source, partition, ClassSampler(num_classes, drift_period), data_rng)
    clients = [ClientModel(d, embed_dim, rng=init_rng) for d in partition.sizes]
    server = ServerModel(num_clients, embed_dim, server_hidden, num_classes, rng=init_rng)
    opt = OptimizerSpec("dlr", window, alpha, lr, lr)
    sim = Simulation(server, clients, opt, policy or FullActivation(), stream, act_rng,
                     record_trace=True)
    sim.run_session(T)
    return GradientTrace.from_rows(sim.trace), window, alpha


def dlr_growth_series(horizons=(1_000, 3_000, 10_000, 30_000), seed=0, alpha=0.99,
                          **kwargs):
    """``DLR_l(T)`` at each horizon, each from its own run with that horizon's schedule."""
    series = RegretSeries()
    for T in horizons:
        trace, window, alpha_ = nonconvex_audit_run(T, seed, alpha, **kwargs)
        value = empirical_dlr(trace, window, alpha_, [T]).values[-1]
        series.checkpoints.append((T, float(value)))
    return series


def convex_audit_run(T, checkpoints, seed=0, dim=20, num_clients=4, margin=0.1, lr=2.0,
                     bound=2.0, threshold=0.0, tol=1e-8):
    """OGD-Event on separable data with a linear split model, rate ``lr/√t``.

    Parameters are projected onto ``[-bound, bound]`` after each step and the
    comparator lives in the same box.  Returns a :class:`ConvexRegretResult`.
    """
    seeds = np.random.SeedSequence(seed).spawn(3)
    data_rng, init_rng, act_rng = (np.random.default_rng(s) for s in seeds)
    source = SeparableBinarySource(dim, data_rng, margin)
    partition = FeaturePartition.even(dim, num_clients)
    stream = DataStream(source, partition, ClassSampler(2), data_rng)
    clients = [linear_client(d, init_rng) for d in partition.sizes]
    opt = OptimizerSpec("ogd", lr_server=lr, lr_client=lr, decay="inv_sqrt")
    xs, ys, losses = [], [], []

    def record(sim, sample, loss, pred):
        xs.append(np.concatenate(sample.parts))
        ys.append(sample.label)
        losses.append(loss)

    sim = Simulation(SumLogisticServer(num_clients), clients, opt, EventActivation(threshold),
                     stream, act_rng, param_bound=bound, on_predict=record)
    sim.run_session(T)
    return convex_regret(losses, np.array(xs), np.array(ys), checkpoints, bound, tol)
