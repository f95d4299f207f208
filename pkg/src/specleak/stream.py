"""Packet framing, mitigation policies, transports, and session serving.

Wire format, bit-exact: per packet a 4-byte big-endian unsigned length L,
then L opaque bytes (detokenized payload followed by zero padding). An
observer on the transport sees only (arrival time, L); it cannot tell pad
from payload, which models TLS length leakage without encryption.

Timestamps default to a simulated clock advancing one tick per decode
iteration, so sessions are fully deterministic; the TCP transport can
instead be observed under wall-clock time.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .engines import (DecodeIteration, DraftPairConfig, LookaheadConfig,
                      RetrievalDatastore, decode_autoregressive,
                      decode_draft_pair, decode_lookahead, decode_retrieval)
from .errors import ConfigError, PaddingOverflowError, SessionError
from .lm import NGramModel, SamplerConfig, Vocab, detokenize

HEADER = struct.Struct(">I")
SEPARATOR = " "


@dataclass(frozen=True)
class Packet:
    """One framed response unit; observable size is payload_len + pad_len."""

    seq: int
    payload_len: int
    pad_len: int
    sent_at: float
    tokens: tuple[int, ...] = ()
    payload: bytes = b""

    @property
    def observable_size(self) -> int:
        return self.payload_len + self.pad_len

    def wire_bytes(self) -> bytes:
        body = self.payload + b"\x00" * self.pad_len
        return HEADER.pack(len(body)) + body


@dataclass(frozen=True)
class MitigationPolicy:
    """none / constant pad / variable pad / aggregate, or aggregate+pad.

    Aggregation merges the payload bytes of k consecutive iterations into
    one packet; padding then inflates each emitted packet. The composed
    form is an extension over evaluating them separately and is flagged
    as such in reports.
    """

    variant: str = "none"
    target_size: int = 0        # constant pad
    max_pad: int = 0            # variable pad upper bound D
    pad_seed: int = 0
    aggregate_k: int = 1

    @classmethod
    def none(cls) -> "MitigationPolicy":
        return cls()

    @classmethod
    def constant_pad(cls, target_size: int = 1024) -> "MitigationPolicy":
        if target_size < 1:
            raise ConfigError("constant pad target must be >= 1")
        return cls(variant="constant_pad", target_size=target_size)

    @classmethod
    def variable_pad(cls, max_pad: int, seed: int = 0) -> "MitigationPolicy":
        if max_pad < 0:
            raise ConfigError("variable pad bound must be >= 0")
        return cls(variant="variable_pad", max_pad=max_pad, pad_seed=seed)

    @classmethod
    def aggregate(cls, k: int) -> "MitigationPolicy":
        if k < 1:
            raise ConfigError("aggregation granularity must be >= 1")
        return cls(variant="aggregate", aggregate_k=k)

    @classmethod
    def aggregate_then_pad(cls, k: int, pad: "MitigationPolicy") -> "MitigationPolicy":
        if k < 1:
            raise ConfigError("aggregation granularity must be >= 1")
        if pad.variant not in ("constant_pad", "variable_pad"):
            raise ConfigError("composition requires a pad variant")
        return cls(variant=f"aggregate+{pad.variant}", target_size=pad.target_size,
                   max_pad=pad.max_pad, pad_seed=pad.pad_seed, aggregate_k=k)

    @property
    def is_none(self) -> bool:
        return self.variant == "none"

    def describe(self) -> dict:
        d = {"variant": self.variant}
        if "constant_pad" in self.variant:
            d["target_size"] = self.target_size
        if "variable_pad" in self.variant:
            d["max_pad"] = self.max_pad
            d["pad_seed"] = self.pad_seed
        if self.aggregate_k != 1 or "aggregate" in self.variant:
            d["aggregate_k"] = self.aggregate_k
        return d


def frame_iteration(iteration: DecodeIteration, vocab: Vocab,
                    sent_at: float | None = None) -> Packet:
    """Frame one iteration: payload is its detokenized text, unpadded."""
    text = detokenize(iteration.tokens, vocab, SEPARATOR)
    payload = text.encode("utf-8")
    return Packet(seq=iteration.index, payload_len=len(payload), pad_len=0,
                  sent_at=float(iteration.index + 1) if sent_at is None else sent_at,
                  tokens=iteration.tokens, payload=payload)


def apply_mitigation(packets: list[Packet],
                     policy: MitigationPolicy) -> list[Packet]:
    """Transform packet sizes/boundaries per policy; token text is untouched."""
    out = list(packets)
    if policy.aggregate_k > 1:
        merged = []
        k = policy.aggregate_k
        for i in range(0, len(out), k):
            group = out[i:i + k]
            payload = b"".join(p.payload for p in group)
            merged.append(Packet(
                seq=len(merged),
                payload_len=sum(p.payload_len for p in group),
                pad_len=0,
                sent_at=group[-1].sent_at,
                tokens=tuple(t for p in group for t in p.tokens),
                payload=payload,
            ))
        out = merged

    if "constant_pad" in policy.variant:
        padded = []
        for p in out:
            if p.payload_len > policy.target_size:
                raise PaddingOverflowError(p.seq, p.payload_len, policy.target_size)
            padded.append(Packet(p.seq, p.payload_len,
                                 policy.target_size - p.payload_len,
                                 p.sent_at, p.tokens, p.payload))
        out = padded
    elif "variable_pad" in policy.variant:
        rng = np.random.Generator(np.random.Philox(policy.pad_seed))
        out = [Packet(p.seq, p.payload_len,
                      int(rng.integers(0, policy.max_pad + 1)),
                      p.sent_at, p.tokens, p.payload)
               for p in out]
    return out


@dataclass
class SessionLog:
    """Server-side ground truth for one served session."""

    engine: str
    engine_params: dict
    prompt_tokens: tuple[int, ...]
    policy: MitigationPolicy
    sampler: SamplerConfig
    iterations: list[DecodeIteration] = field(default_factory=list)
    packets: list[Packet] = field(default_factory=list)

    @property
    def token_counts(self) -> list[int]:
        return [len(it.tokens) for it in self.iterations]

    @property
    def output_tokens(self) -> list[int]:
        return [t for it in self.iterations for t in it.tokens]

    def transcript(self, vocab: Vocab) -> str:
        return detokenize(self.output_tokens, vocab, SEPARATOR)

    def overhead_vs_unpadded(self) -> float:
        """Total observable bytes under this policy over unpadded bytes."""
        raw = sum(p.payload_len for p in self.packets)
        padded = sum(p.observable_size for p in self.packets)
        return padded / raw if raw else 1.0


class InProcessTransport:
    """Default loopback: a queue of frames plus the observer's view.

    Observation exposes only (arrival time, frame length); payload bytes
    stay private to the server side.
    """

    def __init__(self):
        self._frames: list[tuple[float, bytes]] = []
        self.closed = False

    def write(self, packet: Packet) -> None:
        if self.closed:
            raise SessionError("transport already closed")
        self._frames.append((packet.sent_at, packet.wire_bytes()))

    def close(self) -> None:
        self.closed = True

    def observations(self) -> list[tuple[float, int]]:
        return [(t, len(frame) - HEADER.size) for t, frame in self._frames]


class FailingTransport(InProcessTransport):
    """Test double: fails after a fixed number of writes."""

    def __init__(self, fail_after: int):
        super().__init__()
        self.fail_after = fail_after

    def write(self, packet: Packet) -> None:
        if len(self._frames) >= self.fail_after:
            raise OSError("injected transport failure")
        super().write(packet)


@dataclass(frozen=True)
class SessionConfig:
    """Everything needed to serve one decoding session."""

    engine: str
    model: NGramModel
    prompt_tokens: tuple[int, ...]
    max_tokens: int
    sampler: SamplerConfig
    policy: MitigationPolicy = MitigationPolicy.none()
    lookahead: LookaheadConfig | None = None
    store: RetrievalDatastore | None = None
    draft_pair: DraftPairConfig | None = None


def run_engine(cfg: SessionConfig) -> list[DecodeIteration]:
    if cfg.engine == "autoregressive":
        return decode_autoregressive(cfg.model, cfg.prompt_tokens,
                                     cfg.max_tokens, cfg.sampler)
    if cfg.engine == "lookahead":
        if cfg.lookahead is None:
            raise ConfigError("lookahead engine requires a LookaheadConfig")
        return decode_lookahead(cfg.model, cfg.prompt_tokens, cfg.max_tokens,
                                cfg.lookahead, cfg.sampler)
    if cfg.engine == "retrieval":
        if cfg.store is None:
            raise ConfigError("retrieval engine requires a datastore")
        return decode_retrieval(cfg.model, cfg.prompt_tokens, cfg.max_tokens,
                                cfg.store, cfg.sampler)
    if cfg.engine == "draft_pair":
        if cfg.draft_pair is None:
            raise ConfigError("draft_pair engine requires a DraftPairConfig")
        return decode_draft_pair(cfg.model, cfg.prompt_tokens, cfg.max_tokens,
                                 cfg.draft_pair, cfg.sampler)
    raise ConfigError(f"unknown engine {cfg.engine!r}")


def _engine_params(cfg: SessionConfig) -> dict:
    if cfg.engine == "lookahead" and cfg.lookahead:
        return {"N": cfg.lookahead.ngram_size, "G": cfg.lookahead.guess_set_size}
    if cfg.engine == "retrieval" and cfg.store:
        p = cfg.store.params
        return {"max_match_len": p.max_match_len, "top_k": p.top_k,
                "draft_len": p.draft_len, "sequences": len(cfg.store)}
    if cfg.engine == "draft_pair" and cfg.draft_pair:
        return {"draft_len": cfg.draft_pair.draft_len,
                "fallback_threshold": cfg.draft_pair.fallback_threshold,
                "rollback_threshold": cfg.draft_pair.rollback_threshold}
    return {}


def serve(cfg: SessionConfig, transport: InProcessTransport | None = None,
          on_packet: Callable[[Packet], None] | None = None) -> SessionLog:
    """Run the engine, frame and mitigate, and write packets to a transport.

    Raises SessionError on transport failure, preserving the partial log.
    """
    iterations = run_engine(cfg)
    raw = [frame_iteration(it, cfg.model.vocab) for it in iterations]
    packets = apply_mitigation(raw, cfg.policy)
    log = SessionLog(engine=cfg.engine, engine_params=_engine_params(cfg),
                     prompt_tokens=tuple(cfg.prompt_tokens), policy=cfg.policy,
                     sampler=cfg.sampler, iterations=iterations)
    if transport is None:
        transport = InProcessTransport()
    for pkt in packets:
        try:
            transport.write(pkt)
        except OSError as exc:
            raise SessionError(f"transport failure at packet {pkt.seq}: {exc}",
                               partial_log=log) from exc
        log.packets.append(pkt)
        if on_packet is not None:
            on_packet(pkt)
    transport.close()
    return log


def serve_tcp(cfg: SessionConfig, host: str = "127.0.0.1",
              port: int = 0) -> tuple["_TcpServerHandle", int]:
    """Serve one session over a loopback TCP socket, one client, then stop.

    Returns (handle, bound port); the session runs when a client connects
    and the handle joins to the completed SessionLog.
    """
    import threading

    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    bound_port = srv.getsockname()[1]
    handle = _TcpServerHandle()

    def _run():
        try:
            conn, _ = srv.accept()
            with conn:
                iterations = run_engine(cfg)
                raw = [frame_iteration(it, cfg.model.vocab) for it in iterations]
                packets = apply_mitigation(raw, cfg.policy)
                log = SessionLog(engine=cfg.engine,
                                 engine_params=_engine_params(cfg),
                                 prompt_tokens=tuple(cfg.prompt_tokens),
                                 policy=cfg.policy, sampler=cfg.sampler,
                                 iterations=iterations, packets=packets)
                for pkt in packets:
                    conn.sendall(pkt.wire_bytes())
                handle.log = log
        except OSError as exc:
            handle.error = exc
        finally:
            srv.close()

    handle.thread = threading.Thread(target=_run, daemon=True)
    handle.thread.start()
    return handle, bound_port


class _TcpServerHandle:
    thread = None
    log: SessionLog | None = None
    error: OSError | None = None

    def join(self, timeout: float = 30.0) -> SessionLog:
        self.thread.join(timeout)
        if self.error is not None:
            raise SessionError(f"tcp serve failed: {self.error}")
        if self.log is None:
            raise SessionError("tcp serve did not complete")
        return self.log
