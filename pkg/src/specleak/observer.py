"""The network adversary's sensor: traces, features, token-count proxy.

A Trace is the per-session sequence of (inter-arrival, size) observations.
Capture reads nothing but time and length from a transport, matching the
threat model of an eavesdropper on encrypted streaming traffic.
"""

from __future__ import annotations

import csv
import socket
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .stream import HEADER, InProcessTransport, MitigationPolicy

DEFAULT_FEATURE_LEN = 256


@dataclass
class Trace:
    """Ordered (inter_arrival, size) samples for one session."""

    samples: list[tuple[float, int]] = field(default_factory=list)
    label: str | None = None
    complete: bool = True

    def __post_init__(self):
        if any(size <= 0 for _, size in self.samples):
            raise ValueError("packet sizes must be positive")

    @property
    def sizes(self) -> list[int]:
        return [s for _, s in self.samples]


def capture(transport: InProcessTransport, label: str | None = None) -> Trace:
    """One sample per packet; sizes are the observable frame lengths.

    A transport that never closed is a truncated stream and the trace is
    flagged incomplete.
    """
    observations = transport.observations()
    samples = []
    prev = 0.0
    for arrival, size in observations:
        samples.append((arrival - prev, size))
        prev = arrival
    return Trace(samples=samples, label=label, complete=transport.closed)


def capture_tcp(host: str, port: int, label: str | None = None,
                timeout: float = 30.0) -> Trace:
    """Connect to a loopback server and record (wall-clock arrival, L)."""
    samples = []
    complete = True
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.settimeout(timeout)
        prev = time.monotonic()
        while True:
            header = _read_exact(sock, HEADER.size)
            if header is None:
                break
            if len(header) < HEADER.size:
                complete = False
                break
            (length,) = HEADER.unpack(header)
            body = _read_exact(sock, length)
            if body is None or len(body) < length:
                complete = False
                break
            now = time.monotonic()
            samples.append((now - prev, length))
            prev = now
    return Trace(samples=samples, label=label, complete=complete)


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    if n == 0:
        return b""
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None if not buf else buf
        buf += chunk
    return buf


def featurize(trace: Trace, length: int = DEFAULT_FEATURE_LEN) -> np.ndarray:
    """Fixed-length feature vector: sizes truncated or zero-padded to L."""
    if length < 1:
        raise ValueError("feature length must be >= 1")
    values = np.zeros(length, dtype=float)
    sizes = trace.sizes[:length]
    values[:len(sizes)] = sizes
    return values


@dataclass(frozen=True)
class TokenCountEstimate:
    counts: list[int]
    reliable: bool


def estimate_token_counts(trace: Trace, mean_token_bytes: float,
                          policy: MitigationPolicy | None = None) -> TokenCountEstimate:
    """Per-packet token-count estimates from the size proxy.

    Only meaningful on unpadded, unaggregated sessions; estimates from a
    mitigated session are flagged unreliable.
    """
    if mean_token_bytes <= 0:
        raise ValueError("mean_token_bytes must be positive")
    reliable = policy is None or policy.is_none
    counts = [max(1, round(size / mean_token_bytes)) for size in trace.sizes]
    return TokenCountEstimate(counts=counts, reliable=reliable)


CSV_COLUMNS = ("trace_id", "label", "seq", "inter_arrival", "size")


def save_traces_csv(traces: list[Trace], path) -> None:
    """Dataset interchange format: one row per packet."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for tid, trace in enumerate(traces):
            for seq, (gap, size) in enumerate(trace.samples):
                writer.writerow([tid, trace.label or "", seq,
                                 repr(float(gap)), size])


def load_traces_csv(path) -> list[Trace]:
    rows_by_id: dict[int, list[tuple[int, float, int, str]]] = {}
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
            raise ValueError(f"{path}: expected columns {CSV_COLUMNS}")
        for row in reader:
            rows_by_id.setdefault(int(row["trace_id"]), []).append(
                (int(row["seq"]), float(row["inter_arrival"]),
                 int(row["size"]), row["label"]))
    traces = []
    for tid in sorted(rows_by_id):
        rows = sorted(rows_by_id[tid])
        label = rows[0][3] or None
        traces.append(Trace(samples=[(gap, size) for _, gap, size, _ in rows],
                            label=label))
    return traces
