"""Prequential error tracking and session summaries.

Every round's prediction is scored before the round's sample is used for
training.  Window error rates are emitted every ``window_size`` rounds; a
trailing partial window is emitted on :meth:`PrequentialWindow.flush` and
flagged ``partial``.

``summary.csv`` holds only quantities that are pure functions of the round
records' deterministic fields; wall-clock compute time goes to
``timing.csv``.
"""

import csv
from dataclasses import dataclass, field

from .protocol import MB, RoundRecord


@dataclass(frozen=True)
class WindowPoint:
    samples_seen: int
    error_rate: float
    partial: bool = False


class PrequentialWindow:
    def __init__(self, window_size=20_000):
        if window_size < 1:
            raise ValueError(f"window_size must be >= 1, got {window_size}")
        self.window_size = int(window_size)
        self.seen = 0
        self.errors_in_window = 0
        self.in_window = 0
        self.points = []

    def record(self, correct):
        self.seen += 1
        self.in_window += 1
        if not correct:
            self.errors_in_window += 1
        if self.in_window == self.window_size:
            return self._emit(False)
        return None

    def _emit(self, partial):
        pt = WindowPoint(self.seen, self.errors_in_window / self.in_window, partial)
        self.points.append(pt)
        self.errors_in_window = 0
        self.in_window = 0
        return pt

    def flush(self):
        """Emit the trailing partial window, if any."""
        if self.in_window:
            return self._emit(True)
        return None


@dataclass
class SessionSummary:
    rounds: int
    errors: int
    accumulated_error_rate: float
    mean_loss: float
    bytes_up: int
    bytes_down: int
    bytes_query: int
    comm_mb_up: float
    comm_mb_down: float
    comm_mb_total: float
    forward_passes: int
    backward_passes: int
    empty_activation_rounds: int
    activation_freq: list
    client_compute_s: list = field(default_factory=list)
    server_compute_s: float = 0.0

    @property
    def total_client_compute_s(self):
        return sum(self.client_compute_s)

    def row(self):
        """Deterministic fields for ``summary.csv``."""
        out = {
            "rounds": self.rounds,
            "errors": self.errors,
            "accumulated_error_rate": repr(self.accumulated_error_rate),
            "mean_loss": repr(self.mean_loss),
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "bytes_query": self.bytes_query,
            "comm_mb_up": repr(self.comm_mb_up),
            "comm_mb_down": repr(self.comm_mb_down),
            "comm_mb_total": repr(self.comm_mb_total),
            "forward_passes": self.forward_passes,
            "backward_passes": self.backward_passes,
            "empty_activation_rounds": self.empty_activation_rounds,
        }
        for m, f in enumerate(self.activation_freq):
            out[f"activation_freq_client{m}"] = repr(f)
        return out

    def timing_row(self):
        out = {"server_compute_s": repr(self.server_compute_s),
               "client_compute_s": repr(self.total_client_compute_s)}
        for m, s in enumerate(self.client_compute_s):
            out[f"client{m}_compute_s"] = repr(s)
        return out


def summarize(records, num_clients, include_query_bytes=False):
    """Aggregate a complete session's round records."""
    if not records:
        raise ValueError("cannot summarize an empty session")
    n = len(records)
    errors = sum(1 for r in records if not r.correct)
    up = sum(r.bytes_up for r in records)
    down = sum(r.bytes_down for r in records)
    query = sum(r.bytes_query for r in records)
    counts = [0] * num_clients
    client_ns = [0] * num_clients
    loss = 0.0
    for r in records:
        loss += r.loss  # sequential, same order as MetricsSink
        for m in r.active:
            counts[m] += 1
        for m, ns in enumerate(r.client_ns):
            client_ns[m] += ns
    total = up + down + (query if include_query_bytes else 0)
    return SessionSummary(
        rounds=n,
        errors=errors,
        accumulated_error_rate=errors / n,
        mean_loss=loss / n,
        bytes_up=up,
        bytes_down=down,
        bytes_query=query,
        comm_mb_up=up / MB,
        comm_mb_down=down / MB,
        comm_mb_total=total / MB,
        forward_passes=sum(r.forward_passes for r in records),
        backward_passes=sum(r.backward_passes for r in records),
        empty_activation_rounds=sum(1 for r in records if not r.active),
        activation_freq=[c / n for c in counts],
        client_compute_s=[ns / 1e9 for ns in client_ns],
        server_compute_s=sum(r.server_ns for r in records) / 1e9,
    )


class MetricsSink:
    """Single-owner consumer of round records.

    Aggregates on the fly so that ``keep_records=False`` sessions of any
    length run in constant memory; :meth:`summary` matches :func:`summarize`
    over the same records.
    """

    def __init__(self, num_clients, window_size=20_000, keep_records=True,
                 include_query_bytes=False):
        self.num_clients = num_clients
        self.window = PrequentialWindow(window_size)
        self.keep_records = keep_records
        self.include_query_bytes = include_query_bytes
        self.records = []
        self._n = self._errors = self._up = self._down = self._query = 0
        self._fwd = self._bwd = self._empty = self._server_ns = 0
        self._loss = 0.0
        self._counts = [0] * num_clients
        self._client_ns = [0] * num_clients

    def add(self, record):
        if self.keep_records:
            self.records.append(record)
        self._n += 1
        self._errors += not record.correct
        self._loss += record.loss
        self._up += record.bytes_up
        self._down += record.bytes_down
        self._query += record.bytes_query
        self._fwd += record.forward_passes
        self._bwd += record.backward_passes
        self._server_ns += record.server_ns
        if not record.active:
            self._empty += 1
        for m in record.active:
            self._counts[m] += 1
        for m, ns in enumerate(record.client_ns):
            self._client_ns[m] += ns
        return self.window.record(record.correct)

    @property
    def points(self):
        return self.window.points

    @property
    def rounds(self):
        return self._n

    def summary(self):
        n = self._n
        if n == 0:
            raise ValueError("cannot summarize an empty session")
        total = self._up + self._down + (self._query if self.include_query_bytes else 0)
        return SessionSummary(
            rounds=n, errors=self._errors, accumulated_error_rate=self._errors / n,
            mean_loss=self._loss / n, bytes_up=self._up, bytes_down=self._down,
            bytes_query=self._query, comm_mb_up=self._up / MB, comm_mb_down=self._down / MB,
            comm_mb_total=total / MB, forward_passes=self._fwd, backward_passes=self._bwd,
            empty_activation_rounds=self._empty,
            activation_freq=[c / n for c in self._counts],
            client_compute_s=[ns / 1e9 for ns in self._client_ns],
            server_compute_s=self._server_ns / 1e9,
        )


def write_runtime_csv(path, points):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["samples_seen", "window_error_rate", "partial"])
        for p in points:
            w.writerow([p.samples_seen, repr(p.error_rate), int(p.partial)])


def read_runtime_csv(path):
    with open(path, newline="") as f:
        return [WindowPoint(int(r["samples_seen"]), float(r["window_error_rate"]),
                            bool(int(r["partial"])))
                for r in csv.DictReader(f)]


def _write_rows(path, rows):
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def write_summary_csv(path, summaries, labels=None):
    rows = []
    for i, s in enumerate(summaries):
        row = {"session": labels[i] if labels else i}
        row.update(s.row())
        rows.append(row)
    _write_rows(path, rows)


def write_timing_csv(path, summaries, labels=None):
    rows = []
    for i, s in enumerate(summaries):
        row = {"session": labels[i] if labels else i}
        row.update(s.timing_row())
        rows.append(row)
    _write_rows(path, rows)


_RECORD_FIELDS = ["round", "loss", "correct", "active", "bytes_up", "bytes_down",
                  "bytes_query", "client_ns", "server_ns", "forward_passes",
                  "backward_passes", "label", "predicted"]


_TIMING_FIELDS = ("client_ns", "server_ns")


def write_records_csv(path, records, include_timing=True):
    """Persist round records losslessly (floats via ``repr``).

    Without timing the file is a pure function of the seeds and config.
    """
    fields = [f for f in _RECORD_FIELDS if include_timing or f not in _TIMING_FIELDS]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(fields)
        for r in records:
            row = {"round": r.round, "loss": repr(r.loss), "correct": int(r.correct),
                   "active": ";".join(map(str, r.active)), "bytes_up": r.bytes_up,
                   "bytes_down": r.bytes_down, "bytes_query": r.bytes_query,
                   "client_ns": ";".join(map(str, r.client_ns)), "server_ns": r.server_ns,
                   "forward_passes": r.forward_passes, "backward_passes": r.backward_passes,
                   "label": r.label, "predicted": r.predicted}
            w.writerow([row[k] for k in fields])


def read_records_csv(path):
    def ints(s):
        return tuple(int(v) for v in s.split(";")) if s else ()

    out = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            out.append(RoundRecord(
                round=int(r["round"]), loss=float(r["loss"]), correct=bool(int(r["correct"])),
                active=ints(r["active"]), bytes_up=int(r["bytes_up"]),
                bytes_down=int(r["bytes_down"]), bytes_query=int(r["bytes_query"]),
                client_ns=ints(r.get("client_ns", "")), server_ns=int(r.get("server_ns", 0)),
                forward_passes=int(r["forward_passes"]),
                backward_passes=int(r["backward_passes"]),
                label=int(r["label"]), predicted=int(r["predicted"]),
            ))
    return out
