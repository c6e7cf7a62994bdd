"""Device/edge split execution over a byte-stream transport.

The device-side client runs the encoder and entropy coder locally and ships
the coded latent in an INFER_REQ frame; the edge-side server decodes it with
tables derived from the shared checkpoint, runs decoder+tail, and replies
with class probabilities. Channel cost is modeled analytically, not measured.
"""

from __future__ import annotations

import os
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import coder as C
from . import layers as Ly
from . import tensor as T
from .nets import SplitModel
from .tensor import Tensor

MAGIC = b"SC2\x00"
VERSION = 1
DEFAULT_PORT_ENV = "SC2_PORT"
FALLBACK_PORT = 47310

HELLO, INFER_REQ, INFER_RESP, STATS, ERROR = 1, 2, 3, 4, 5
_MSG_TYPES = (HELLO, INFER_REQ, INFER_RESP, STATS, ERROR)


class ProtocolError(ValueError):
    pass


class BadMagicError(ProtocolError):
    pass


class VersionError(ProtocolError):
    pass


class TruncatedFrameError(ProtocolError):
    pass


class ModelMismatchError(ProtocolError):
    pass


class TransportError(ConnectionError):
    """Retriable transport failure (peer closed, connect refused)."""


@dataclass(frozen=True)
class Frame:
    msg_type: int
    model_id: bytes  # 16-byte checkpoint digest
    shape: tuple[int, ...]
    payload: bytes

    def __post_init__(self):
        if self.msg_type not in _MSG_TYPES:
            raise ProtocolError(f"unknown message type {self.msg_type}")
        if len(self.model_id) != 16:
            raise ProtocolError("model_id must be a 16-byte digest")
        if len(self.shape) > 255 or any(not 0 <= d <= 0xFFFF for d in self.shape):
            raise ProtocolError("shape must have rank <= 255 with u16 extents")


def serialize_frame(f: Frame) -> bytes:
    head = MAGIC + struct.pack("<BB", VERSION, f.msg_type) + f.model_id
    head += struct.pack("<B", len(f.shape)) + b"".join(struct.pack("<H", d) for d in f.shape)
    return head + struct.pack("<I", len(f.payload)) + f.payload


def parse_frame(data: bytes) -> Frame:
    f, used = _parse_prefix(data)
    if used != len(data):
        raise ProtocolError(f"{len(data) - used} trailing bytes after frame")
    return f


def _parse_prefix(data: bytes) -> tuple[Frame, int]:
    if len(data) < 4:
        raise TruncatedFrameError("frame shorter than magic")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    if len(data) < 23:
        raise TruncatedFrameError("frame header truncated")
    version, msg_type = struct.unpack_from("<BB", data, 4)
    if version != VERSION:
        raise VersionError(f"unsupported protocol version {version}")
    model_id = data[6:22]
    rank = data[22]
    pos = 23
    if len(data) < pos + 2 * rank + 4:
        raise TruncatedFrameError("frame shape/length fields truncated")
    shape = struct.unpack_from(f"<{rank}H", data, pos) if rank else ()
    pos += 2 * rank
    (plen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + plen:
        raise TruncatedFrameError(f"payload truncated: header declares {plen} bytes")
    return Frame(msg_type, model_id, tuple(shape), data[pos : pos + plen]), pos + plen


def default_port() -> int:
    return int(os.environ.get(DEFAULT_PORT_ENV, FALLBACK_PORT))


# ---------------------------------------------------------------------------
# channel model


@dataclass(frozen=True)
class ChannelModel:
    bandwidth_bps: float  # bits per second
    overhead_bytes: int = 0

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise ProtocolError("channel bandwidth must be > 0")


def simulate_channel(n_bytes: int, ch: ChannelModel) -> float:
    if n_bytes < 0:
        raise ProtocolError("byte count must be >= 0")
    return (n_bytes + ch.overhead_bytes) * 8.0 / ch.bandwidth_bps


# ---------------------------------------------------------------------------
# socket plumbing


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("peer closed the connection mid-frame")
        buf += chunk
    return buf


def read_frame(sock: socket.socket) -> Frame:
    head = _recv_exact(sock, 23)
    if head[:4] != MAGIC:
        raise BadMagicError(f"bad magic {head[:4]!r}")
    if head[4] != VERSION:
        raise VersionError(f"unsupported protocol version {head[4]}")
    rank = head[22]
    rest = _recv_exact(sock, 2 * rank + 4)
    (plen,) = struct.unpack_from("<I", rest, 2 * rank)
    payload = _recv_exact(sock, plen) if plen else b""
    return parse_frame(head + rest + payload)


# ---------------------------------------------------------------------------
# server


class _Session(socketserver.BaseRequestHandler):
    def handle(self):
        srv: SplitServer = self.server.owner  # type: ignore[attr-defined]
        model = srv.model
        requests = bytes_in = bytes_out = 0

        def reply(frame: Frame) -> None:
            nonlocal bytes_out
            data = serialize_frame(frame)
            bytes_out += len(data)
            self.request.sendall(data)

        def error(msg: str) -> None:
            reply(Frame(ERROR, srv.model_id, (), msg.encode()))

        try:
            hello = read_frame(self.request)
            bytes_in += len(serialize_frame(hello))
            if hello.msg_type != HELLO:
                error("expected HELLO")
                return
            if hello.model_id != srv.model_id:
                error("model_id mismatch: endpoint runs a different checkpoint")
                return
            reply(Frame(HELLO, srv.model_id, (), b""))
            while True:
                try:
                    frame = read_frame(self.request)
                except TransportError:
                    return  # client done
                bytes_in += len(serialize_frame(frame))
                if frame.msg_type == STATS:
                    reply(Frame(STATS, srv.model_id, (),
                                struct.pack("<QQQ", requests, bytes_in, bytes_out)))
                    continue
                if frame.msg_type != INFER_REQ:
                    error(f"unexpected message type {frame.msg_type}")
                    continue
                requests += 1
                try:
                    z_q = model.decode_latent(frame.payload)
                except C.CoderError as exc:
                    error(f"payload rejected: {exc}")
                    continue
                probs = srv.infer_tail(z_q)
                reply(Frame(INFER_RESP, srv.model_id, probs.shape,
                            probs.astype("<f8").tobytes()))
        except ProtocolError as exc:
            try:
                error(str(exc))
            except OSError:
                pass


class SplitServer:
    """Edge-side endpoint: decoder + tail behind the frame protocol."""

    def __init__(self, model: SplitModel, host: str = "127.0.0.1", port: int | None = None):
        self.model = model
        self.model_id = model.model_id()
        port = default_port() if port is None else port
        self._tcp = socketserver.ThreadingTCPServer((host, port), _Session,
                                                    bind_and_activate=False)
        self._tcp.allow_reuse_address = True
        self._tcp.daemon_threads = True
        self._tcp.owner = self
        self._tcp.server_bind()
        self._tcp.server_activate()
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()

    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]

    def infer_tail(self, z_q: np.ndarray) -> np.ndarray:
        # the model graph is shared read-only; serialize inference passes
        with self._lock:
            h = Ly.run_layers(self.model.decoder_layers, Tensor(z_q[None]))
            logits = Ly.run_layers(self.model.tail_layers, h)
            return np.exp(T.log_softmax(logits).data[0])

    def start(self) -> "SplitServer":
        self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()
        if self._thread is not None:
            self._thread.join()


def serve(model: SplitModel, endpoint: str | None = None) -> SplitServer:
    """Start a server on host:port (default 127.0.0.1 and $SC2_PORT)."""
    host, port = "127.0.0.1", None
    if endpoint:
        host, _, p = endpoint.rpartition(":")
        host = host or "127.0.0.1"
        port = int(p)
    return SplitServer(model, host, port).start()


# ---------------------------------------------------------------------------
# client


class SplitClient:
    """Device-side endpoint: encoder + entropy coder in front of a socket."""

    def __init__(self, model: SplitModel, endpoint: str | tuple[str, int],
                 channel: ChannelModel | None = None):
        self.model = model
        self.model_id = model.model_id()
        self.channel = channel
        if isinstance(endpoint, str):
            host, _, p = endpoint.rpartition(":")
            endpoint = (host or "127.0.0.1", int(p) if p else default_port())
        try:
            self._sock = socket.create_connection(endpoint, timeout=30)
        except OSError as exc:
            raise TransportError(f"cannot connect to {endpoint}: {exc}") from None
        self._send(Frame(HELLO, self.model_id, (), b""))
        resp = read_frame(self._sock)
        if resp.msg_type == ERROR:
            raise ModelMismatchError(resp.payload.decode())
        if resp.msg_type != HELLO:
            raise ProtocolError(f"unexpected HELLO reply type {resp.msg_type}")

    def _send(self, frame: Frame) -> None:
        try:
            self._sock.sendall(serialize_frame(frame))
        except OSError as exc:
            raise TransportError(str(exc)) from None

    def infer(self, x: np.ndarray) -> tuple[np.ndarray, int, float]:
        """Run one sample through the split pipeline.

        Returns (class probabilities, sent payload bytes, simulated seconds).
        sent_bytes counts the INFER_REQ payload only; frame headers are
        transport framing, not compressed-representation size.
        """
        z = self.model.latent(Tensor(np.asarray(x, dtype=np.float64)[None])).data[0]
        payload, _, _ = self.model.encode_latent(z)
        self._send(Frame(INFER_REQ, self.model_id, self.model.latent_shape, payload))
        resp = read_frame(self._sock)
        if resp.msg_type == ERROR:
            raise ProtocolError(resp.payload.decode())
        probs = np.frombuffer(resp.payload, dtype="<f8").reshape(resp.shape)
        latency = simulate_channel(len(payload), self.channel) if self.channel else 0.0
        return probs, len(payload), latency

    def stats(self) -> tuple[int, int, int]:
        """Server-side counters: (requests, bytes_in, bytes_out)."""
        self._send(Frame(STATS, self.model_id, (), b""))
        resp = read_frame(self._sock)
        if resp.msg_type != STATS:
            raise ProtocolError(f"unexpected STATS reply type {resp.msg_type}")
        return struct.unpack("<QQQ", resp.payload)

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
