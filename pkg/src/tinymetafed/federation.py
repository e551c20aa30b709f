"""The federated round engine and its in-process simulator.

:class:`Coordinator` is the server side of the protocol and
:class:`ClientWorker` the device side. Both only exchange encoded TMF1
messages, so the same objects drive the in-memory simulator here and the
TCP service in :mod:`tinymetafed.transport`.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import algorithms as alg
from .config import ExperimentConfig
from .nn import DTYPE, init_weights
from .protocol import (
    DecodeError,
    DenseWeights,
    MsgType,
    RoundAssignment,
    RoundReport,
    decode,
    encode,
)
from .sparse import SparseDelta
from .tasks import CLIENT_SELECTION, EPISODES, INIT_WEIGHTS, Episode, rng_for, seed_key

log = logging.getLogger(__name__)

UPLINK_TYPE = {
    "tinymetafed": MsgType.SPARSE,
    "tinyreptile": MsgType.DENSE,
    "reptile_serial": MsgType.DENSE,
    "fedsgd": MsgType.DENSE,
}


@dataclass
class RoundRecord:
    """One client exchange. Byte counts cover the model payload messages only
    (dense downlink and the uplink update), not control or report frames."""

    round: int
    client_id: int
    bytes_up: int
    bytes_down: int
    support_loss: float
    query_loss: float
    rate: float
    status: str = "ok"
    wall_ms: float | None = None

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class EvalRecord:
    round: int
    mean_loss: float
    std_loss: float
    mean_accuracy: float | None
    cumulative_bytes: int

    def as_row(self) -> dict:
        return asdict(self)


class RunResult(NamedTuple):
    phi: np.ndarray
    records: list[RoundRecord]
    evals: list[EvalRecord]


class RoundFailed(Exception):
    """An uplink could not be used; the server state is unchanged."""


class StaleUpdate(RoundFailed):
    """An uplink for a round other than the current one (late or duplicate)."""


def initial_weights(cfg: ExperimentConfig) -> np.ndarray:
    return init_weights(cfg.network(), seed_key(cfg.seed, INIT_WEIGHTS))


class Coordinator:
    """Server-side protocol state for one experiment."""

    def __init__(self, cfg: ExperimentConfig, phi: np.ndarray | None = None, round: int = 0):
        self.cfg = cfg
        self.spec = cfg.network()
        self.partition = cfg.partition_for(self.spec)
        self.schedule = alg.ScheduleSpec(cfg.eta_max, cfg.eta_min, cfg.rounds, cfg.schedule)
        phi = initial_weights(cfg) if phi is None else np.asarray(phi, dtype=DTYPE)
        self.server = alg.ServerState(phi, self.partition, self.schedule, round)
        self.devices_per_round = cfg.reptile_devices if cfg.algorithm == "reptile_serial" else 1
        self._pending: list[tuple[DenseWeights, RoundReport, int, int, int]] = []

    @property
    def round(self) -> int:
        return self.server.round

    @property
    def done(self) -> bool:
        return self.server.round >= self.cfg.rounds

    @property
    def phi(self) -> np.ndarray:
        return self.server.phi

    def select(self, attempt: int, available=None) -> int | None:
        """Client drawn uniformly for (round, attempt); None if it is unavailable."""
        cid = int(rng_for(self.cfg.seed, CLIENT_SELECTION, self.round, attempt).integers(self.cfg.clients))
        if available is not None and cid not in available:
            return None
        return cid

    def downlink(self, client_id: int) -> list[bytes]:
        return [
            encode(RoundAssignment(self.round, client_id)),
            encode(self.server.downlink()),
        ]

    def accept(self, client_id: int, down: list[bytes], up: list[bytes]) -> RoundRecord | None:
        """Apply a client's reply.

        Returns the round's record once the round completes, ``None`` while
        a multi-device round still waits for devices. Raises
        :class:`RoundFailed` without touching server state on a bad reply.
        """
        if len(up) != 2:
            raise RoundFailed(f"expected update and report frames, got {len(up)} frames")
        try:
            update = decode(up[0])
            report = decode(up[1])
        except DecodeError as exc:
            raise RoundFailed(f"undecodable uplink from client {client_id}: {exc}") from None
        want = UPLINK_TYPE[self.cfg.algorithm]
        if not isinstance(update, SparseDelta if want is MsgType.SPARSE else DenseWeights):
            raise RoundFailed(f"client {client_id} sent {type(update).__name__}, expected {want.name}")
        if not isinstance(report, RoundReport) or report.round != update.round:
            raise RoundFailed(f"missing or mismatched round report from client {client_id}")
        if update.round != self.round:
            raise StaleUpdate(f"update for round {update.round}, server is at round {self.round}")

        rate = self.server.rate
        t = self.round
        try:
            if self.cfg.algorithm == "tinymetafed":
                self.server = alg.server_aggregate(self.server, update)
            elif self.cfg.algorithm == "fedsgd":
                self.server = alg.server_sgd(self.server, update, self.cfg.fedsgd_lr)
            else:
                alg.check_round(self.server, update.round)
                if update.values.shape != self.server.phi.shape:
                    raise ValueError("full-model update has the wrong length")
                self._pending.append((update, report, client_id, len(down[1]), len(up[0])))
                if len(self._pending) < self.devices_per_round:
                    return None
                pending, self._pending = self._pending, []
                self.server = alg.server_interpolate(self.server, [p[0] for p in pending])
                return RoundRecord(
                    t,
                    pending[0][2],
                    sum(p[4] for p in pending),
                    sum(p[3] for p in pending),
                    _mean(p[1].support_loss for p in pending),
                    _mean(p[1].query_loss for p in pending),
                    rate,
                )
        except ValueError as exc:
            raise RoundFailed(str(exc)) from None
        return RoundRecord(t, client_id, len(up[0]), len(down[1]), report.support_loss, report.query_loss, rate)


def _mean(values) -> float:
    vals = list(values)
    return float(np.mean(vals)) if vals else math.nan


class ClientWorker:
    """Device side: rebuilds its task and episodes from the seed, holds no round state."""

    def __init__(self, cfg: ExperimentConfig, client_id: int, task_seed: int | None = None):
        self.cfg = cfg
        self.client_id = client_id
        self.task_seed = cfg.seed if task_seed is None else task_seed
        self.spec = cfg.network()
        partition = cfg.partition_for(self.spec)
        self.sampler = cfg.task_split(self.task_seed).training
        self.task = self.sampler.task(client_id)
        self.state = alg.ClientState(
            client_id,
            self.task,
            partition,
            k=cfg.k,
            beta=cfg.beta,
            top_p=cfg.top_p,
            local_init=partition.local_values(initial_weights(cfg)),
            retain_local=cfg.retain_local,
        )

    def episode(self, rnd: int) -> Episode:
        key = seed_key(self.task_seed, EPISODES, self.client_id, rnd)
        return self.sampler.episode(self.task, self.cfg.support_size, self.cfg.query_size, key, self.client_id)

    def handle(self, frames: list[bytes]) -> list[bytes]:
        assignment, downlink = (decode(f) for f in frames)
        if not isinstance(assignment, RoundAssignment) or not isinstance(downlink, DenseWeights):
            raise DecodeError("expected a round assignment followed by dense weights")
        if assignment.client_id != self.client_id or assignment.round != downlink.round:
            raise DecodeError("assignment does not match this client or round")
        episode = self.episode(assignment.round)
        c = self.cfg
        if c.algorithm == "tinymetafed":
            update, report = alg.tinymetafed_client_update(self.state, downlink, episode)
        elif c.algorithm == "tinyreptile":
            update, report = alg.tinyreptile_client_update(self.state, downlink, episode, c.tinyreptile_stream)
        elif c.algorithm == "reptile_serial":
            update, report = alg.reptile_client_update(
                self.state, downlink, episode, c.reptile_epochs, c.reptile_batch_size
            )
        else:
            update, report = alg.fedsgd_client_update(self.state, downlink, episode)
        return [encode(update), encode(report)]


@dataclass
class Endpoint:
    role: str
    bytes_sent: int = 0
    bytes_received: int = 0


@dataclass
class InMemoryChannel:
    """Byte pipe between one server endpoint and the simulated clients.

    ``tap(direction, data)`` sees every message; ``tamper(direction, data)``
    may replace it (fault injection). Direction is ``"down"`` or ``"up"``.
    """

    tap: Callable[[str, bytes], None] | None = None
    tamper: Callable[[str, bytes], bytes] | None = None
    server: Endpoint = field(default_factory=lambda: Endpoint("server"))
    client: Endpoint = field(default_factory=lambda: Endpoint("client"))
    _queues: dict = field(default_factory=lambda: {"down": deque(), "up": deque()})

    def send(self, direction: str, data: bytes) -> None:
        if self.tamper is not None:
            data = self.tamper(direction, data)
        if self.tap is not None:
            self.tap(direction, data)
        src, dst = (self.server, self.client) if direction == "down" else (self.client, self.server)
        src.bytes_sent += len(data)
        dst.bytes_received += len(data)
        self._queues[direction].append(data)

    def recv(self, direction: str, n: int) -> list[bytes]:
        q = self._queues[direction]
        return [q.popleft() for _ in range(n)]


def simulate_round_trip(
    coord: Coordinator, worker: ClientWorker, channel: InMemoryChannel
) -> RoundRecord | None:
    """One exchange with ``worker`` through ``channel``.

    A reply that fails to decode or apply yields a record with status
    ``failed`` and leaves the coordinator unchanged.
    """
    down = coord.downlink(worker.client_id)
    for frame in down:
        channel.send("down", frame)
    received = channel.recv("down", len(down))
    t, rate = coord.round, coord.server.rate
    try:
        up = worker.handle(received)
    except DecodeError as exc:
        log.warning("round %d: client %d rejected downlink: %s", t, worker.client_id, exc)
        return RoundRecord(t, worker.client_id, 0, len(down[1]), math.nan, math.nan, rate, "failed")
    for frame in up:
        channel.send("up", frame)
    replies = channel.recv("up", len(up))
    try:
        return coord.accept(worker.client_id, down, replies)
    except RoundFailed as exc:
        log.warning("round %d failed: %s", t, exc)
        return RoundRecord(t, worker.client_id, len(replies[0]), len(down[1]), math.nan, math.nan, rate, "failed")


class Evaluator:
    """Held-out evaluation of the server model on testing tasks."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.spec = cfg.network()
        self.testing = cfg.task_split().testing

    def due(self, t: int) -> bool:
        return t % self.cfg.eval_every == 0 or t == self.cfg.rounds

    def __call__(self, t: int, phi: np.ndarray, cumulative_bytes: int) -> EvalRecord:
        c = self.cfg
        res = alg.evaluate_initialization(
            self.spec, phi, self.testing, c.fine_tune_steps, c.support_size,
            c.eval_query_size, c.beta, c.eval_repeats, seed=c.seed,
        )
        return EvalRecord(t, res.mean_loss, res.std_loss, res.mean_accuracy, cumulative_bytes)


def run_federated(
    cfg: ExperimentConfig,
    seed: int | None = None,
    *,
    evaluate: bool | Evaluator = False,
    channel: InMemoryChannel | None = None,
    on_record: Callable[[RoundRecord], None] | None = None,
    on_eval: Callable[[EvalRecord], None] | None = None,
    max_failures: int = 1000,
) -> RunResult:
    """Run ``cfg.rounds`` sequential rounds on the in-process transport."""
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    cfg = cfg.validated()
    coord = Coordinator(cfg)
    channel = channel or InMemoryChannel()
    evaluator = Evaluator(cfg) if evaluate is True else (evaluate or None)
    workers: dict[int, ClientWorker] = {}
    records: list[RoundRecord] = []
    evals: list[EvalRecord] = []
    total_bytes = 0
    failures = 0

    def maybe_eval():
        if evaluator is not None and evaluator.due(coord.round):
            rec = evaluator(coord.round, coord.phi, total_bytes)
            evals.append(rec)
            if on_eval:
                on_eval(rec)

    maybe_eval()
    attempt = 0
    while not coord.done:
        cid = coord.select(attempt)
        attempt += 1
        if cid not in workers:
            workers[cid] = ClientWorker(cfg, cid)
        rec = simulate_round_trip(coord, workers[cid], channel)
        if rec is None:
            continue
        records.append(rec)
        if on_record:
            on_record(rec)
        total_bytes += rec.bytes_up + rec.bytes_down
        if rec.status != "ok":
            failures += 1
            if failures > max_failures:
                raise RuntimeError(f"giving up after {failures} failed rounds")
            continue
        attempt = 0
        maybe_eval()
    return RunResult(coord.phi.copy(), records, evals)


def run_tinymetafed(cfg: ExperimentConfig, seed: int | None = None, **kw) -> RunResult:
    return run_federated(cfg.replace(algorithm="tinymetafed"), seed, **kw)


def run_tinyreptile(cfg: ExperimentConfig, seed: int | None = None, **kw) -> RunResult:
    return run_federated(cfg.replace(algorithm="tinyreptile"), seed, **kw)


def run_reptile_serial(cfg: ExperimentConfig, seed: int | None = None, **kw) -> RunResult:
    return run_federated(cfg.replace(algorithm="reptile_serial"), seed, **kw)


def run_fedsgd(cfg: ExperimentConfig, seed: int | None = None, **kw) -> RunResult:
    return run_federated(cfg.replace(algorithm="fedsgd"), seed, **kw)
