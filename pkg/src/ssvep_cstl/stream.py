"""Simulated online loop: TCP sample stream in, UDP feedback datagrams out.

Frame: u32 payload bytes, u32 trial_id, u32 chunk_index, u16 n_channels,
u16 n_chunk_samples, then float32 samples channel-major (all little-endian).
Feedback: ``RESULT <trial_id> <class_index> <confidence> <inference_ms>\\n``.
"""

from __future__ import annotations

import logging
import math
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .evaluation import accuracy
from .fuzzy import FuzzyModel, decode_input, logits, predict_logits
from .signal_core import Epoch, FrequencyTable, StimulusSpec

log = logging.getLogger(__name__)

FRAME_HEADER = struct.Struct("<IIIHH")


class StreamError(RuntimeError):
    pass


@dataclass(frozen=True)
class StreamFrame:
    trial_id: int
    chunk_index: int
    payload: np.ndarray      # (n_channels, n_chunk_samples) float32

    def to_bytes(self) -> bytes:
        data = np.ascontiguousarray(self.payload, dtype="<f4")
        n_ch, n_s = data.shape
        return FRAME_HEADER.pack(data.nbytes, self.trial_id, self.chunk_index, n_ch, n_s) + data.tobytes()


@dataclass(frozen=True)
class FeedbackMsg:
    trial_id: int
    class_index: int
    confidence: float
    inference_ms: float

    def to_line(self) -> str:
        return f"RESULT {self.trial_id} {self.class_index} {self.confidence:.4f} {self.inference_ms:.2f}\n"

    @classmethod
    def parse(cls, line: str | bytes) -> "FeedbackMsg":
        if isinstance(line, bytes):
            line = line.decode("ascii")
        parts = line.split()
        if len(parts) != 5 or parts[0] != "RESULT":
            raise ValueError(f"not a feedback line: {line!r}")
        return cls(int(parts[1]), int(parts[2]), float(parts[3]), float(parts[4]))


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1"), int(port)


def chunk_samples(fs: float, chunk_ms: float) -> int:
    return max(1, int(round(fs * chunk_ms / 1000.0)))


def frames_for(e: Epoch, chunk_ms: float = 40.0) -> list[StreamFrame]:
    n = chunk_samples(e.fs_hz, chunk_ms)
    data = e.data.astype(np.float32)
    return [StreamFrame(e.trial_id, i, data[:, s:s + n]) for i, s in enumerate(range(0, e.n_samples, n))]


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None if not buf else bytes(buf)
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> StreamFrame | None:
    """Next frame, or None at end of stream. Raises ValueError for a malformed frame
    after consuming its payload, so the stream stays aligned."""
    head = _recv_exact(sock, FRAME_HEADER.size)
    if head is None or len(head) < FRAME_HEADER.size:
        return None
    nbytes, trial_id, chunk_index, n_ch, n_s = FRAME_HEADER.unpack(head)
    payload = _recv_exact(sock, nbytes) if nbytes else b""
    if payload is None or len(payload) < nbytes:
        return None
    if nbytes != 4 * n_ch * n_s or n_ch == 0:
        raise ValueError(f"frame for trial {trial_id}: {nbytes} payload bytes for {n_ch}x{n_s} samples")
    data = np.frombuffer(payload, dtype="<f4").reshape(n_ch, n_s)
    if not np.all(np.isfinite(data)):
        raise ValueError(f"frame for trial {trial_id} carries non-finite samples")
    return StreamFrame(trial_id, chunk_index, data)


# --------------------------------------------------------------------------- producer

@dataclass
class SessionStats:
    frames: int = 0
    bytes: int = 0
    trials: int = 0


def stream_producer(epochs: Sequence[Epoch], endpoint: tuple[str, int], chunk_ms: float = 40.0,
                    realtime: bool = False, cue_s: float = 0.0, rest_s: float = 0.0,
                    connect_timeout_s: float = 5.0) -> SessionStats:
    """Send every trial as ordered frames over one TCP connection, then close it."""
    stats = SessionStats()
    deadline = time.monotonic() + connect_timeout_s
    while True:
        try:
            sock = socket.create_connection(endpoint, timeout=connect_timeout_s)
            break
        except ConnectionRefusedError:
            if time.monotonic() > deadline:
                raise StreamError(f"connection to {endpoint} refused before the first trial") from None
            time.sleep(0.05)
    with sock:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        for pos, e in enumerate(epochs):
            if realtime and cue_s > 0:
                time.sleep(cue_s)
            t0 = time.monotonic()
            for f in frames_for(e, chunk_ms):
                if realtime:
                    due = t0 + (f.chunk_index + 1) * f.payload.shape[1] / e.fs_hz
                    time.sleep(max(0.0, due - time.monotonic()))
                raw = f.to_bytes()
                try:
                    sock.sendall(raw)
                except OSError as exc:
                    raise StreamError(f"send failed at trial {pos} (id {e.trial_id}), "
                                      f"chunk {f.chunk_index}: {exc}") from exc
                stats.frames += 1
                stats.bytes += len(raw)
            stats.trials += 1
            if realtime and rest_s > 0:
                time.sleep(rest_s)
    return stats


# --------------------------------------------------------------------------- decode service

def decode_segment(model: FuzzyModel, segment: Epoch) -> tuple[np.ndarray, float]:
    """Logits for one raw trial segment plus the wall time spent, in milliseconds."""
    t0 = time.perf_counter()
    tokens = decode_input(segment, model.decoder)
    out = logits(tokens, model)
    return out, (time.perf_counter() - t0) * 1000.0


def offline_segment(model: FuzzyModel, e: Epoch) -> Epoch:
    """The raw samples the service would decode for this trial, at wire precision."""
    n = model.decoder.segment_samples
    if e.n_samples < n:
        raise StreamError(f"trial {e.trial_id} has {e.n_samples} samples, decoding needs {n}")
    return e.with_data(e.data[:, :n].astype(np.float32).astype(np.float64))


def offline_predict(model: FuzzyModel, e: Epoch) -> tuple[int, float, np.ndarray]:
    out, _ = decode_segment(model, offline_segment(model, e))
    k, conf = predict_logits(model, out)
    return k, conf, out


class DecodeService:
    """Buffers each trial until one decode segment is complete, classifies it and sends feedback.

    A receive thread reads frames into per-trial buffers and hands full
    segments to a classify thread through a bounded queue.
    """

    def __init__(self, model: FuzzyModel, table: FrequencyTable, listen: tuple[str, int],
                 feedback: tuple[str, int] | None, window_s: float | None = None, queue_size: int = 4):
        if model.n_classes != len(table):
            raise StreamError(f"model predicts {model.n_classes} classes, table has {len(table)}")
        if window_s is not None and not math.isclose(window_s, model.decoder.window_s):
            raise StreamError(f"model was built for {model.decoder.window_s} s windows, not {window_s} s")
        if queue_size < 2:
            raise StreamError("hand-off queue must hold at least two windows")
        self.model = model
        self.table = table
        self.feedback = feedback
        self.need = model.decoder.segment_samples
        self.results: dict[int, tuple[FeedbackMsg, np.ndarray]] = {}
        self.frames_received = 0
        self.malformed = 0
        self._queue: queue.Queue = queue.Queue(maxsize=queue_size)
        self._server = socket.create_server(listen)
        self.address = self._server.getsockname()[:2]
        self._udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._threads: list[threading.Thread] = []

    def start(self) -> "DecodeService":
        self._threads = [threading.Thread(target=self._receive, name="receive", daemon=True),
                         threading.Thread(target=self._classify, name="classify", daemon=True)]
        for t in self._threads:
            t.start()
        return self

    def join(self, timeout: float | None = None):
        for t in self._threads:
            t.join(timeout)

    def run(self):
        self.start()
        self.join()

    def _receive(self):
        buffers: dict[int, list[np.ndarray]] = {}
        counts: dict[int, int] = {}
        done: set[int] = set()
        try:
            conn, _ = self._server.accept()
            with conn:
                while True:
                    try:
                        frame = read_frame(conn)
                    except ValueError as exc:
                        self.malformed += 1
                        log.warning("skipping malformed frame: %s", exc)
                        continue
                    if frame is None:
                        break
                    self.frames_received += 1
                    tid = frame.trial_id
                    if tid in done:
                        continue
                    buffers.setdefault(tid, []).append(frame.payload)
                    counts[tid] = counts.get(tid, 0) + frame.payload.shape[1]
                    if counts[tid] >= self.need:
                        data = np.concatenate(buffers.pop(tid), axis=1)[:, :self.need]
                        done.add(tid)
                        self._queue.put((tid, data))
        finally:
            self._server.close()
            self._queue.put(None)

    def _classify(self):
        unknown = StimulusSpec(self.table[0].freq_hz, 0.0, 0)
        while True:
            item = self._queue.get()
            if item is None:
                break
            tid, data = item
            seg = Epoch(data.astype(np.float64), self.model.decoder.fs_hz, unknown, tid)
            out, ms = decode_segment(self.model, seg)
            k, conf = predict_logits(self.model, out)
            msg = FeedbackMsg(tid, k, conf, ms)
            self.results[tid] = (msg, out)
            if self.feedback is not None:
                try:
                    self._udp.sendto(msg.to_line().encode("ascii"), self.feedback)
                except OSError as exc:
                    log.warning("feedback for trial %d not sent: %s", tid, exc)
        self._udp.close()


def decode_service(model: FuzzyModel, table: FrequencyTable, listen: tuple[str, int],
                   feedback: tuple[str, int] | None, window_s: float | None = None) -> DecodeService:
    """Serve until the producer closes its connection; returns the finished service."""
    svc = DecodeService(model, table, listen, feedback, window_s)
    svc.run()
    return svc


# --------------------------------------------------------------------------- feedback listener

@dataclass
class ListenSummary:
    received: list[FeedbackMsg] = field(default_factory=list)
    missed: list[int] = field(default_factory=list)
    accuracy: float = float("nan")


class FeedbackListener:
    def __init__(self, endpoint: tuple[str, int] = ("127.0.0.1", 0)):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(endpoint)
        self.address = self.sock.getsockname()[:2]

    def collect(self, expected: Mapping[int, int], timeout_s: float = 10.0) -> ListenSummary:
        """Wait for one result per expected trial; a trial not heard from within
        ``timeout_s`` of the previous datagram counts as a miss (wrong)."""
        got: dict[int, FeedbackMsg] = {}
        self.sock.settimeout(timeout_s)
        try:
            while len(got) < len(expected):
                try:
                    raw, _ = self.sock.recvfrom(4096)
                except socket.timeout:
                    break
                try:
                    msg = FeedbackMsg.parse(raw)
                except ValueError as exc:
                    log.warning("ignoring datagram: %s", exc)
                    continue
                got[msg.trial_id] = msg
        finally:
            self.sock.close()
        ids = list(expected)
        missed = [t for t in ids if t not in got]
        preds = [got[t].class_index if t in got else -1 for t in ids]
        acc = accuracy(preds, [expected[t] for t in ids]) if ids else float("nan")
        return ListenSummary([got[t] for t in ids if t in got], missed, acc)


def feedback_listener(endpoint: tuple[str, int], expected: Mapping[int, int], timeout_s: float = 10.0) -> ListenSummary:
    return FeedbackListener(endpoint).collect(expected, timeout_s)


def expected_labels(epochs: Iterable[Epoch]) -> dict[int, int]:
    return {e.trial_id: e.label for e in epochs}
