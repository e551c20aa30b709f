"""TCP service for the TMF1 protocol, plus checkpoints.

The server runs two contexts: an acceptor thread that takes registrations
(0x04 hello frames) and hands the sockets over through a queue, and the
round executor (the caller's thread), which alone owns the coordinator.
Rounds never overlap.
"""

from __future__ import annotations

import logging
import math
import os
import queue
import signal
import socket
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ExperimentConfig
from .federation import (
    ClientWorker,
    Coordinator,
    EvalRecord,
    Evaluator,
    RoundFailed,
    RoundRecord,
    RunResult,
    StaleUpdate,
)
from .nn import deserialize_weights, serialize_weights
from .protocol import DecodeError, Hello, MsgType, Shutdown, decode, encode, peek_type, read_frame, write_frame

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.tmfc"
_CKPT = struct.Struct("<4sBIQ32s")
_CKPT_MAGIC = b"TMFC"
_CKPT_VERSION = 1


def parse_address(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return (host or default_host, int(port))


# ---- checkpoints -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Checkpoint:
    phi: np.ndarray
    round: int
    seed: int
    config_digest: bytes


def save_checkpoint(path: str | Path, phi: np.ndarray, round: int, seed: int, config_digest: bytes) -> None:
    """Write atomically: temp file, fsync, rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = _CKPT.pack(_CKPT_MAGIC, _CKPT_VERSION, round, seed, config_digest) + serialize_weights(phi)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _CKPT.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, rnd, seed, digest = _CKPT.unpack_from(data)
    if magic != _CKPT_MAGIC or version != _CKPT_VERSION:
        raise ValueError(f"{path}: not a version {_CKPT_VERSION} checkpoint")
    return Checkpoint(deserialize_weights(data[_CKPT.size :]), rnd, seed, digest)


# ---- server ------------------------------------------------------------------


@dataclass
class Peer:
    client_id: int
    sock: socket.socket
    family: str


@dataclass
class SocketEndpoint:
    role: str
    bytes_sent: int = 0
    bytes_received: int = 0
    wire_bytes: int = 0  # including the 4-byte length prefixes


class Server:
    """Round executor for one experiment over TCP."""

    def __init__(
        self,
        cfg: ExperimentConfig,
        bind: tuple[str, int] = ("127.0.0.1", 0),
        checkpoint_dir: str | Path | None = None,
        evaluate: bool = False,
        resume: bool = True,
        idle_timeout: float = 60.0,
    ):
        self.cfg = cfg.validated()
        self.checkpoint_path = Path(checkpoint_dir) / CHECKPOINT_NAME if checkpoint_dir else None
        phi, start = None, 0
        if resume and self.checkpoint_path and self.checkpoint_path.exists():
            ckpt = load_checkpoint(self.checkpoint_path)
            if ckpt.config_digest == self.cfg.digest():
                phi, start = ckpt.phi, ckpt.round
                log.info("resuming from %s at round %d", self.checkpoint_path, start)
            else:
                log.warning("ignoring checkpoint %s written for a different config", self.checkpoint_path)
        self.coord = Coordinator(self.cfg, phi, start)
        self.evaluator = Evaluator(self.cfg) if evaluate else None
        self.idle_timeout = idle_timeout
        self.endpoint = SocketEndpoint("server")
        self.stop = threading.Event()
        self._sock = socket.create_server(bind)
        self._sock.settimeout(0.2)
        self.address = self._sock.getsockname()[:2]
        self._incoming: queue.Queue[Peer] = queue.Queue()
        self._peers: dict[int, Peer] = {}
        self._cooldown: dict[int, float] = {}
        self._acceptor = threading.Thread(target=self._accept_loop, name="tmf-acceptor", daemon=True)
        self._acceptor.start()

    # acceptor context -----------------------------------------------------

    def _accept_loop(self) -> None:
        while not self.stop.is_set():
            try:
                conn, addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            try:
                conn.settimeout(5.0)
                data = read_frame(conn)
                msg = decode(data)
            except (OSError, ConnectionError, DecodeError) as exc:
                log.warning("bad registration from %s: %s", addr, exc)
                conn.close()
                continue
            if isinstance(msg, Shutdown):
                log.info("shutdown requested by %s", addr)
                conn.close()
                self.stop.set()
                break
            if not isinstance(msg, Hello) or msg.family != self.cfg.family:
                log.warning("rejecting registration from %s: %r", addr, msg)
                conn.close()
                continue
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._incoming.put(Peer(msg.client_id, conn, msg.family))

    # executor context -----------------------------------------------------

    def _drain_registrations(self, wait: float = 0.0) -> None:
        try:
            peer = self._incoming.get(timeout=wait) if wait > 0 else self._incoming.get_nowait()
        except queue.Empty:
            return
        while True:
            old = self._peers.pop(peer.client_id, None)
            if old is not None:
                old.sock.close()
            self._peers[peer.client_id] = peer
            self._cooldown.pop(peer.client_id, None)
            log.info("client %d registered", peer.client_id)
            try:
                peer = self._incoming.get_nowait()
            except queue.Empty:
                return

    def available(self) -> set[int]:
        now = time.monotonic()
        return {cid for cid in self._peers if self._cooldown.get(cid, 0.0) <= now}

    def wait_for_clients(self, n: int, timeout: float = 30.0) -> None:
        deadline = time.monotonic() + timeout
        while len(self._peers) < n:
            left = deadline - time.monotonic()
            if left <= 0 or self.stop.is_set():
                raise TimeoutError(f"only {len(self._peers)} of {n} clients registered")
            self._drain_registrations(wait=min(left, 0.2))

    def _drop(self, cid: int, why: str) -> None:
        log.warning("client %d unavailable for %.1fs: %s", cid, self.cfg.cooldown, why)
        peer = self._peers.pop(cid, None)
        if peer is not None:
            peer.sock.close()
        self._cooldown[cid] = time.monotonic() + self.cfg.cooldown

    def _send(self, sock: socket.socket, data: bytes) -> None:
        self.endpoint.wire_bytes += write_frame(sock, data)
        self.endpoint.bytes_sent += len(data)

    def _recv(self, sock: socket.socket, deadline: float) -> bytes:
        while True:
            left = deadline - time.monotonic()
            if left <= 0:
                raise socket.timeout("round timed out")
            if self.stop.is_set():
                raise InterruptedError("server stopping")
            sock.settimeout(min(left, 0.2))
            try:
                data = read_frame(sock)
            except socket.timeout:
                continue
            self.endpoint.bytes_received += len(data)
            self.endpoint.wire_bytes += len(data) + 4
            return data

    def _exchange(self, cid: int) -> RoundRecord | None:
        """One round with client ``cid``; raises on transport trouble."""
        sock = self._peers[cid].sock
        started = time.perf_counter()
        down = self.coord.downlink(cid)
        for frame in down:
            self._send(sock, frame)
        deadline = time.monotonic() + self.cfg.timeout
        while True:
            up = [self._recv(sock, deadline), self._recv(sock, deadline)]
            if peek_type(up[0]) is MsgType.SHUTDOWN:
                raise ConnectionError("client is shutting down")
            try:
                rec = self.coord.accept(cid, down, up)
            except StaleUpdate as exc:
                log.info("ignoring stale update from client %d: %s", cid, exc)
                continue
            if rec is not None:
                rec.wall_ms = (time.perf_counter() - started) * 1000.0
            return rec

    def checkpoint(self) -> None:
        if self.checkpoint_path is not None:
            save_checkpoint(self.checkpoint_path, self.coord.phi, self.coord.round, self.cfg.seed, self.cfg.digest())

    def run(
        self,
        on_record: Callable[[RoundRecord], None] | None = None,
        on_eval: Callable[[EvalRecord], None] | None = None,
    ) -> RunResult:
        records: list[RoundRecord] = []
        evals: list[EvalRecord] = []
        total_bytes = 0
        coord = self.coord

        def maybe_eval():
            if self.evaluator is not None and self.evaluator.due(coord.round):
                rec = self.evaluator(coord.round, coord.phi, total_bytes)
                evals.append(rec)
                if on_eval:
                    on_eval(rec)

        try:
            maybe_eval()
            attempt = 0
            idle_since = None
            while not coord.done and not self.stop.is_set():
                self._drain_registrations()
                avail = self.available()
                if not avail:
                    idle_since = idle_since or time.monotonic()
                    if time.monotonic() - idle_since > self.idle_timeout:
                        raise RuntimeError(f"no client available for {self.idle_timeout:.0f}s")
                    self._drain_registrations(wait=0.2)
                    continue
                idle_since = None
                cid = coord.select(attempt, avail)
                attempt += 1
                if cid is None:
                    continue
                t = coord.round
                try:
                    rec = self._exchange(cid)
                except InterruptedError:
                    break
                except (OSError, ConnectionError, DecodeError) as exc:
                    self._drop(cid, str(exc) or type(exc).__name__)
                    continue
                except RoundFailed as exc:
                    log.warning("round %d failed: %s", t, exc)
                    rec = RoundRecord(t, cid, 0, 0, math.nan, math.nan, coord.server.rate, "failed")
                    records.append(rec)
                    if on_record:
                        on_record(rec)
                    continue
                if rec is None:
                    continue
                records.append(rec)
                if on_record:
                    on_record(rec)
                total_bytes += rec.bytes_up + rec.bytes_down
                attempt = 0
                maybe_eval()
                if coord.round % self.cfg.checkpoint_every == 0:
                    self.checkpoint()
        finally:
            self.checkpoint()
            self.close()
        return RunResult(coord.phi.copy(), records, evals)

    def close(self) -> None:
        self.stop.set()
        bye = encode(Shutdown())
        for peer in list(self._peers.values()):
            try:
                self._send(peer.sock, bye)
            except OSError:
                pass
            peer.sock.close()
        self._peers.clear()
        self._sock.close()
        self._acceptor.join(timeout=2.0)


def serve(
    bind: tuple[str, int],
    cfg: ExperimentConfig,
    checkpoint_dir: str | Path | None = None,
    evaluate: bool = False,
    wait_for: int = 0,
    on_record=None,
    on_eval=None,
    ready: Callable[[tuple[str, int]], None] | None = None,
) -> RunResult:
    """Run the server loop until all rounds finish, a 0x05 arrives or SIGINT/SIGTERM."""
    server = Server(cfg, bind, checkpoint_dir, evaluate)
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: server.stop.set())
    log.info("serving on %s:%d", *server.address)
    if ready:
        ready(server.address)
    if wait_for:
        server.wait_for_clients(wait_for)
    return server.run(on_record, on_eval)


def request_shutdown(address: tuple[str, int]) -> None:
    with socket.create_connection(address, timeout=5.0) as sock:
        write_frame(sock, encode(Shutdown()))


# ---- client ------------------------------------------------------------------


def client_agent(
    address: tuple[str, int],
    cfg: ExperimentConfig,
    client_id: int,
    task_seed: int | None = None,
    stop: threading.Event | None = None,
    max_backoff: float = 30.0,
    give_up_after: float | None = None,
    tap: Callable[[str, bytes], None] | None = None,
) -> int:
    """Register with the server and answer round assignments until told to stop.

    Returns the number of rounds served. Lost connections are retried with
    exponential backoff capped at ``max_backoff`` seconds.
    """
    worker = ClientWorker(cfg, client_id, task_seed)
    endpoint = SocketEndpoint("client")
    stop = stop or threading.Event()
    served = 0
    backoff = 0.1
    last_contact = time.monotonic()

    def send(sock, data):
        if tap:
            tap("up", data)
        endpoint.wire_bytes += write_frame(sock, data)
        endpoint.bytes_sent += len(data)

    def recv(sock):
        data = read_frame(sock)
        if tap:
            tap("down", data)
        endpoint.bytes_received += len(data)
        return data

    while not stop.is_set():
        try:
            with socket.create_connection(address, timeout=5.0) as sock:
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.settimeout(None)
                send(sock, encode(Hello(client_id, cfg.family)))
                backoff = 0.1
                while not stop.is_set():
                    first = recv(sock)
                    last_contact = time.monotonic()
                    kind = peek_type(first)
                    if kind is MsgType.SHUTDOWN:
                        return served
                    if kind is not MsgType.ASSIGN:
                        raise DecodeError(f"unexpected {kind.name} frame")
                    second = recv(sock)
                    for frame in worker.handle([first, second]):
                        send(sock, frame)
                    served += 1
        except (OSError, ConnectionError, DecodeError) as exc:
            if give_up_after is not None and time.monotonic() - last_contact > give_up_after:
                log.info("client %d giving up: %s", client_id, exc)
                return served
            log.info("client %d reconnecting in %.1fs: %s", client_id, backoff, exc)
            stop.wait(backoff)
            backoff = min(backoff * 2, max_backoff)
    return served


def run_tcp(
    cfg: ExperimentConfig,
    evaluate: bool = False,
    checkpoint_dir: str | Path | None = None,
    on_record=None,
    on_eval=None,
) -> RunResult:
    """Whole experiment over loopback TCP: server here, one thread per client."""
    server = Server(cfg, ("127.0.0.1", 0), checkpoint_dir, evaluate, resume=False)
    stop = threading.Event()
    threads = [
        threading.Thread(
            target=client_agent,
            args=(server.address, server.cfg, cid),
            kwargs={"stop": stop, "give_up_after": 10.0},
            daemon=True,
        )
        for cid in range(cfg.clients)
    ]
    for th in threads:
        th.start()
    try:
        server.wait_for_clients(cfg.clients)
        return server.run(on_record, on_eval)
    finally:
        stop.set()
        server.close()
        for th in threads:
            th.join(timeout=5.0)
