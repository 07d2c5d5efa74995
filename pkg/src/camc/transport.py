"""Framed wire protocol linking the device and server ends for online
training: CRC-protected frames over loopback queues or TCP, with seeded
channel noise injected at the receiver boundary."""

from __future__ import annotations

import os
import queue
import socket
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .numcore import Tensor, backward
from .rng import stream
from .splittrain import LinkNoiseSpec, Optimizer, OptimizerConfig

FRAME_VERSION = 1

KIND_HELLO = 0
KIND_ACK = 1
KIND_EMBED = 2
KIND_LABEL = 3
KIND_GRAD = 4
KIND_BYE = 5

KIND_NAMES = {KIND_HELLO: "HELLO", KIND_ACK: "ACK", KIND_EMBED: "EMBED",
              KIND_LABEL: "LABEL", KIND_GRAD: "GRAD", KIND_BYE: "BYE"}

_HEADER = struct.Struct("<BBQI")            # version, kind, step, payload_len
HEADER_LEN = _HEADER.size                   # 14 bytes
CRC_LEN = 4

DEFAULT_BIND = "127.0.0.1:47600"

REASON_DIM_MISMATCH = "DIM_MISMATCH"
REASON_VERSION_MISMATCH = "VERSION_MISMATCH"


class FrameError(ValueError):
    pass


class TransportError(IOError):
    pass


class HandshakeError(TransportError):
    def __init__(self, reason: str):
        super().__init__(f"session refused: {reason}")
        self.reason = reason


# ---------------------------------------------------------------------------
# frame codec

@dataclass
class WireFrame:
    kind: int
    step: int
    payload: np.ndarray
    version: int = FRAME_VERSION


def encode_frame(kind: int, step: int, payload=None) -> bytes:
    data = np.asarray([] if payload is None else payload,
                      dtype="<f4").reshape(-1).tobytes()
    head = _HEADER.pack(FRAME_VERSION, kind, step, len(data))
    body = head + data
    return body + struct.pack("<I", zlib.crc32(body))


def decode_frame(buf: bytes) -> WireFrame:
    if len(buf) < HEADER_LEN + CRC_LEN:
        raise FrameError(f"frame too short: {len(buf)} bytes")
    version, kind, step, payload_len = _HEADER.unpack_from(buf)
    if len(buf) != HEADER_LEN + payload_len + CRC_LEN:
        raise FrameError(f"length mismatch: header says {payload_len} payload bytes")
    (crc,) = struct.unpack_from("<I", buf, HEADER_LEN + payload_len)
    if zlib.crc32(buf[:HEADER_LEN + payload_len]) != crc:
        raise FrameError("crc mismatch")
    if kind not in KIND_NAMES:
        raise FrameError(f"unknown frame kind {kind}")
    payload = np.frombuffer(buf[HEADER_LEN:HEADER_LEN + payload_len], dtype="<f4").copy()
    return WireFrame(kind=kind, step=step, payload=payload, version=version)


# ---------------------------------------------------------------------------
# channels

class LoopbackChannel:
    """In-process duplex message channel; create both ends with pair()."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self.send_hook = None        # tests may corrupt/drop outgoing frames

    @classmethod
    def pair(cls):
        a2b, b2a = queue.Queue(), queue.Queue()
        return cls(b2a, a2b), cls(a2b, b2a)

    def send(self, frame_bytes: bytes):
        if self.send_hook is not None:
            frame_bytes = self.send_hook(frame_bytes)
            if frame_bytes is None:
                return
        self._outbox.put(frame_bytes)

    def recv(self, timeout: float) -> bytes:
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportError("receive timeout") from None

    def close(self):
        pass


class SocketChannel:
    """Frame-at-a-time reads over a TCP stream."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self.send_hook = None

    def send(self, frame_bytes: bytes):
        if self.send_hook is not None:
            frame_bytes = self.send_hook(frame_bytes)
            if frame_bytes is None:
                return
        self._sock.sendall(frame_bytes)

    def _read_exact(self, n: int, timeout: float) -> bytes:
        self._sock.settimeout(timeout)
        chunks = b""
        while len(chunks) < n:
            try:
                got = self._sock.recv(n - len(chunks))
            except socket.timeout:
                raise TransportError("receive timeout") from None
            if not got:
                raise TransportError("connection closed")
            chunks += got
        return chunks

    def recv(self, timeout: float) -> bytes:
        head = self._read_exact(HEADER_LEN, timeout)
        _, _, _, payload_len = _HEADER.unpack(head)
        rest = self._read_exact(payload_len + CRC_LEN, timeout)
        return head + rest

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


def bind_address(addr: str | None = None) -> tuple[str, int]:
    addr = addr or os.environ.get("CAMC_BIND", DEFAULT_BIND)
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def connect_tcp(addr: str | None = None, timeout: float = 5.0) -> SocketChannel:
    host, port = bind_address(addr)
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketChannel(sock)


def listen_tcp(addr: str | None = None):
    """Bind a listening socket; returns (socket, (host, port))."""
    host, port = bind_address(addr)
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    return srv, srv.getsockname()


def accept_tcp(listener: socket.socket, timeout: float = 10.0) -> SocketChannel:
    listener.settimeout(timeout)
    try:
        conn, _ = listener.accept()
    except socket.timeout:
        raise TransportError("accept timeout") from None
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketChannel(conn)


# ---------------------------------------------------------------------------
# reliable exactly-once endpoint

@dataclass
class SessionState:
    n: int = 0
    m: int = 0
    committed: int = 0            # last committed data-frame step
    role: str = ""
    noise: LinkNoiseSpec = field(default_factory=LinkNoiseSpec)
    seed: int = 0
    established: bool = False


class Endpoint:
    """One side of a session: reliable send (single retry) and deduplicated
    receive with per-frame acknowledgement."""

    def __init__(self, channel, role: str, timeout: float = 5.0):
        self.channel = channel
        self.timeout = timeout
        self.state = SessionState(role=role)
        self.dropped_frames = 0

    # -- sending ----------------------------------------------------------
    def send_reliable(self, kind: int, step: int, payload=None):
        frame = encode_frame(kind, step, payload)
        for attempt in range(2):
            self.channel.send(frame)
            try:
                while True:
                    ack = self._recv_frame()
                    if ack.kind == KIND_ACK and ack.step == step:
                        # both directions share one step sequence, so a
                        # successful send commits the step on this side too
                        self.state.committed = max(self.state.committed, step)
                        return
                    # stale ACKs and duplicate data frames from earlier
                    # retransmissions carry no new information; keep waiting
            except TransportError:
                if attempt == 0:
                    continue
                raise TransportError(
                    f"no acknowledgement for {KIND_NAMES[kind]} step {step}")

    # -- receiving --------------------------------------------------------
    def _recv_frame(self) -> WireFrame:
        while True:
            buf = self.channel.recv(self.timeout)
            try:
                return decode_frame(buf)
            except FrameError:
                # corrupted frame: drop silently; the sender's missing ACK
                # triggers its single retransmission
                self.dropped_frames += 1

    def recv_data(self, expected_kinds) -> WireFrame:
        """Receive the next new data frame, ACKing duplicates and the frame
        itself; out-of-order future steps are rejected by re-ACKing the last
        committed step so the sender can resynchronize."""
        while True:
            frame = self._recv_frame()
            if frame.kind == KIND_ACK:
                continue                      # stale ACK from a retried send
            if frame.kind == KIND_HELLO:
                self._ack(0)                  # replayed handshake: state unchanged
                continue
            if frame.step <= self.state.committed:
                self._ack(frame.step)         # duplicate: re-ACK, do not re-apply
                continue
            if frame.step > self.state.committed + 1:
                self._ack(self.state.committed)
                continue
            if frame.kind not in expected_kinds:
                raise TransportError(
                    f"unexpected {KIND_NAMES.get(frame.kind, '?')} frame "
                    f"at step {frame.step}")
            self.state.committed = frame.step
            self._ack(frame.step)
            return frame

    def _ack(self, step: int):
        self.channel.send(encode_frame(KIND_ACK, step))


# ---------------------------------------------------------------------------
# handshake

def _hello_payload(n, m, n_bat, n_samples, epochs_worth, seed, noise):
    if seed >= 2 ** 24:
        raise ValueError("session seed must fit a float32 mantissa (< 2^24)")
    return np.array([n, m, n_bat, n_samples, epochs_worth, seed,
                     noise.fwd_snr_db, noise.bwd_snr_db], dtype=np.float32)


def handshake_device(ep: Endpoint, n, m, n_bat, n_samples, seed,
                     noise: LinkNoiseSpec) -> SessionState:
    payload = _hello_payload(n, m, n_bat, n_samples, 1, seed, noise)
    frame = encode_frame(KIND_HELLO, 0, payload)
    for attempt in range(2):
        ep.channel.send(frame)
        try:
            reply = ep._recv_frame()
        except TransportError:
            if attempt == 0:
                continue
            raise
        if reply.kind == KIND_ACK and reply.step == 0:
            break
        if reply.kind == KIND_BYE:
            raise HandshakeError(_reason_from_code(int(reply.payload[0])))
    st = ep.state
    st.n, st.m, st.seed, st.noise = n, m, seed, noise
    st.established = True
    return st


_REASON_CODES = {1: REASON_DIM_MISMATCH, 2: REASON_VERSION_MISMATCH}


def _reason_from_code(code: int) -> str:
    return _REASON_CODES.get(code, f"UNKNOWN_{code}")


def handshake_server(ep: Endpoint, expect_n, expect_m) -> tuple[SessionState, dict]:
    """Wait for HELLO; refuse on dimension mismatch with a reason code."""
    while True:
        frame = ep._recv_frame()
        if frame.kind != KIND_HELLO:
            continue
        if frame.version != FRAME_VERSION:
            ep.channel.send(encode_frame(KIND_BYE, 0, [2.0]))
            raise HandshakeError(REASON_VERSION_MISMATCH)
        n, m, n_bat, n_samples, _, seed, fwd, bwd = (float(v) for v in frame.payload)
        if int(n) != expect_n or int(m) != expect_m:
            ep.channel.send(encode_frame(KIND_BYE, 0, [1.0]))
            raise HandshakeError(REASON_DIM_MISMATCH)
        st = ep.state
        st.n, st.m, st.seed = int(n), int(m), int(seed)
        st.noise = LinkNoiseSpec(fwd_snr_db=fwd, bwd_snr_db=bwd)
        st.established = True
        ep._ack(0)
        return st, {"n_bat": int(n_bat), "n_samples": int(n_samples)}


def _batch_sizes(n_samples: int, n_bat: int) -> list[int]:
    sizes = [n_bat] * (n_samples // n_bat)
    if n_samples % n_bat:
        sizes.append(n_samples % n_bat)
    return sizes


# ---------------------------------------------------------------------------
# online training loops

def run_online_device(channel, sscnet, X: np.ndarray, onehot: np.ndarray,
                      noise: LinkNoiseSpec, config: OptimizerConfig,
                      timeout: float = 5.0) -> list[float | None]:
    """Device side of online training over an established channel.

    Streams per-sample embeddings and labels, receives per-sample embedding
    gradients back, adds the seeded backward-link noise at batch granularity
    and updates the encoder.  Mirrors the offline simulation exactly when
    the seeds match.  Returns the per-batch losses reported via GRAD steps
    (None for batches skipped after a transport timeout).
    """
    ep = Endpoint(channel, "device", timeout)
    n = sscnet.config.N
    handshake_device(ep, n, onehot.shape[1], config.batch, len(X),
                     config.seed, noise)

    opt = Optimizer(config)
    drop_dev = stream(config.seed, "dropout/device")
    bwd_rng = stream(config.seed, "link/bwd")
    losses: list[float | None] = []
    step = 0
    pos = 0
    for size in _batch_sizes(len(X), config.batch):
        xb = X[pos:pos + size]
        pos += size
        sscnet.params.zero_grad()
        x_s = sscnet.forward(Tensor(xb), "train", drop_dev)
        try:
            for i in range(size):
                step += 1
                ep.send_reliable(KIND_EMBED, step, x_s.data[i])
                step += 1
                ep.send_reliable(KIND_LABEL, step, onehot[pos - size + i])
            u = np.empty((size, n), dtype=np.float32)
            for i in range(size):
                frame = ep.recv_data({KIND_GRAD})
                u[i] = frame.payload[:n]
                step = frame.step
            batch_loss = float(frame.payload[n]) if frame.payload.size > n else None
        except TransportError:
            losses.append(None)          # step skipped, parameters untouched
            continue
        v = u + noise.sample(u, noise.bwd_snr_db, bwd_rng)
        backward(x_s, seed_grad=v)
        opt.step(sscnet.params)
        losses.append(batch_loss)
    ep.send_reliable(KIND_BYE, step + 1)
    return losses


def run_online_server(channel, mcnet, config: OptimizerConfig,
                      timeout: float = 5.0) -> list[float]:
    """Server side: accumulate a batch of embeddings and labels, inject the
    seeded forward-link noise, train the classifier and return the embedding
    gradients (clean) for the device to corrupt and back-propagate."""
    ep = Endpoint(channel, "server", timeout)
    st, meta = handshake_server(ep, mcnet.config.N, mcnet.config.M)
    n, m = st.n, st.m
    noise = st.noise

    from .numcore import functional as F    # local import avoids cycle at module load
    opt = Optimizer(OptimizerConfig(rule=config.rule, eta=config.eta,
                                    batch=meta["n_bat"], epochs=config.epochs,
                                    seed=st.seed))
    drop_srv = stream(st.seed, "dropout/server")
    fwd_rng = stream(st.seed, "link/fwd")
    losses = []
    step = 0
    for size in _batch_sizes(meta["n_samples"], meta["n_bat"]):
        xs = np.empty((size, n), dtype=np.float32)
        onehot = np.empty((size, m), dtype=np.float32)
        for i in range(size):
            frame = ep.recv_data({KIND_EMBED})
            if frame.payload.size != n:
                raise TransportError(REASON_DIM_MISMATCH)
            xs[i] = frame.payload
            frame = ep.recv_data({KIND_LABEL})
            onehot[i] = frame.payload
            step = frame.step

        mcnet.params.zero_grad()
        w = noise.sample(xs, noise.fwd_snr_db, fwd_rng)
        y = Tensor(xs + w, requires_grad=True)
        logits = mcnet.forward(y, "train", drop_srv)
        loss = F.softmax_cce(logits, onehot)
        loss_val = float(loss.data)
        backward(loss)
        u = y.grad
        opt.step(mcnet.params)
        losses.append(loss_val)
        for i in range(size):
            step += 1
            payload = np.concatenate([u[i], [loss_val]]).astype(np.float32)
            ep.send_reliable(KIND_GRAD, step, payload)
    ep.recv_data({KIND_BYE})
    return losses
