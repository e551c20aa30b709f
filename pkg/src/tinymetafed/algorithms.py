"""Client and server procedures for TinyMetaFed and its baselines.

Everything here is plain arithmetic on weight vectors; message transport
and the round loop live in :mod:`tinymetafed.federation`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .nn import DTYPE, Loss, NetworkSpec, Sample, TrainMask, backward, forward, loss_value, sgd_step
from .partition import Partition
from .protocol import DenseWeights, RoundReport
from .sparse import SparseDelta, apply_delta, top_p_select
from .tasks import EVAL_EPISODES, Episode, SampleStream, TaskSampler, Task, seed_key, sample_stream


class StaleRoundError(ValueError):
    """An update names a round other than the server's current one."""


@dataclass(frozen=True)
class ScheduleSpec:
    eta_max: float = 1.0
    eta_min: float = 0.0
    T_max: int = 1
    shape: str = "cosine"

    def __post_init__(self):
        if not 0 <= self.eta_min <= self.eta_max <= 1:
            raise ValueError("need 0 <= eta_min <= eta_max <= 1")
        if self.T_max < 0:
            raise ValueError("T_max must be >= 0")
        if self.shape not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule shape {self.shape!r}")


def schedule_value(s: ScheduleSpec, t: int) -> float:
    """Server interpolation rate for round ``t``.

    Cosine annealing from ``eta_max`` at t=0 to ``eta_min`` at t=T_max.
    """
    if not 0 <= t <= s.T_max:
        raise ValueError(f"round {t} outside [0, {s.T_max}]")
    if s.shape == "constant" or t == 0:
        return s.eta_max
    if t == s.T_max:
        return s.eta_min
    value = s.eta_min + 0.5 * (s.eta_max - s.eta_min) * (1.0 + math.cos(math.pi * t / s.T_max))
    return min(max(value, s.eta_min), s.eta_max)


@dataclass
class ClientState:
    client_id: int
    task: Task
    partition: Partition
    k: int = 5
    beta: float = 0.01
    top_p: float = 50.0
    local_init: np.ndarray | None = None
    retain_local: bool = False
    retained: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must be in [0, 1)")
        if self.local_init is None:
            self.local_init = np.zeros(self.partition.local_count, dtype=DTYPE)
        if self.local_init.shape != (self.partition.local_count,):
            raise ValueError("local_init does not match the partition")

    @property
    def spec(self) -> NetworkSpec:
        return self.partition.spec


@dataclass(frozen=True, eq=False)
class ServerState:
    """Full model held by the server; only its global coordinates ever change."""

    phi: np.ndarray
    partition: Partition
    schedule: ScheduleSpec
    round: int = 0

    def __post_init__(self):
        if self.round > self.schedule.T_max:
            raise ValueError("round beyond T_max")
        if not np.all(np.isfinite(self.phi)):
            raise ValueError("server weights are not finite")

    @property
    def global_weights(self) -> np.ndarray:
        return self.partition.global_values(self.phi)

    @property
    def T_max(self) -> int:
        return self.schedule.T_max

    @property
    def rate(self) -> float:
        return schedule_value(self.schedule, min(self.round, self.schedule.T_max))

    def downlink(self) -> DenseWeights:
        return DenseWeights(self.round, self.global_weights)

    def advance(self, phi: np.ndarray) -> "ServerState":
        return replace(self, phi=phi, round=self.round + 1)


class PhaseResult(NamedTuple):
    values: np.ndarray
    loss: float


def online_sgd(
    spec: NetworkSpec,
    w: np.ndarray,
    stream: SampleStream | Iterable[Sample],
    k: int,
    beta: float,
    mask: TrainMask | None = None,
) -> tuple[np.ndarray, float]:
    """``k`` online passes over ``stream``, one SGD step per sample as it arrives.

    Passes after the first replay the stream from its source, so nothing is
    stored. A plain iterator only supports ``k == 1``. Returns the weights and
    the loss seen at the final step.
    """
    if k > 1 and not isinstance(stream, SampleStream):
        raise TypeError("k > 1 needs a replayable SampleStream")
    loss = math.nan
    seen = False
    for p in range(k):
        for sample in stream if p == 0 else stream.replay():
            seen = True
            loss, grad = backward(spec, w, sample, mask)
            w = sgd_step(w, grad, beta)
        if not seen:
            raise ValueError("empty sample stream")
    return w, loss


def local_weights_reconstruction(client: ClientState, g: np.ndarray, support: Iterable[Sample]) -> PhaseResult:
    """Fit the local weights on the support stream with the global weights frozen.

    Local weights start from ``client.local_init`` every round.
    """
    p = client.partition
    if p.local_count == 0:
        return PhaseResult(np.zeros(0, dtype=DTYPE), math.nan)
    w = p.assemble(np.asarray(g, dtype=DTYPE), client.local_init)
    w, loss = online_sgd(p.spec, w, support, client.k, client.beta, p.train_local())
    return PhaseResult(p.local_values(w), loss)


def global_weights_update(
    client: ClientState, g: np.ndarray, l: np.ndarray, query: Iterable[Sample]
) -> PhaseResult:
    """Train the global weights on the query stream with the local weights frozen."""
    p = client.partition
    w = p.assemble(np.asarray(g, dtype=DTYPE), np.asarray(l, dtype=DTYPE))
    w, loss = online_sgd(p.spec, w, query, client.k, client.beta, p.train_global())
    return PhaseResult(p.global_values(w), loss)


def tinymetafed_client_update(
    client: ClientState, downlink: DenseWeights, episode: Episode
) -> tuple[SparseDelta, RoundReport]:
    g = downlink.values
    local = local_weights_reconstruction(client, g, episode.support)
    updated = global_weights_update(client, g, local.values, episode.query)
    if client.retain_local:
        client.retained = local.values
    delta = top_p_select(g, updated.values, client.top_p, round=downlink.round)
    return delta, RoundReport(downlink.round, local.loss, updated.loss)


def tinyreptile_client_update(
    client: ClientState, downlink: DenseWeights, episode: Episode, stream: str = "episode"
) -> tuple[DenseWeights, RoundReport]:
    """One learning phase of ``k`` online passes over the whole episode (or only its query half).

    All weights are trainable.
    """
    source = episode.chain() if stream == "episode" else episode.query
    w, loss = online_sgd(client.spec, downlink.values, source, client.k, client.beta)
    return DenseWeights(downlink.round, w), RoundReport(downlink.round, math.nan, loss)


def batch_gradient(spec: NetworkSpec, w: np.ndarray, batch: Sequence[Sample]) -> tuple[float, np.ndarray]:
    """Mean loss and gradient over a stored batch."""
    total = np.zeros_like(w)
    loss = 0.0
    for sample in batch:
        l, g = backward(spec, w, sample)
        total += g
        loss += l
    return loss / len(batch), total / w.dtype.type(len(batch))


def reptile_client_update(
    client: ClientState, downlink: DenseWeights, episode: Episode, epochs: int = 1, batch_size: int = 1
) -> tuple[DenseWeights, RoundReport]:
    """Batch SGD on the stored episode (support then query order), one step per batch."""
    data = episode.support.materialize() + episode.query.materialize()
    spec = client.spec
    w = downlink.values
    loss = math.nan
    for _ in range(epochs):
        for start in range(0, len(data), batch_size):
            loss, grad = batch_gradient(spec, w, data[start : start + batch_size])
            w = sgd_step(w, grad, client.beta)
    return DenseWeights(downlink.round, w), RoundReport(downlink.round, math.nan, loss)


def fedsgd_client_update(
    client: ClientState, downlink: DenseWeights, episode: Episode
) -> tuple[DenseWeights, RoundReport]:
    """Gradient of the episode loss at the received model; no local adaptation.

    Samples are folded into a running sum as they arrive, so nothing is stored.
    """
    spec = client.spec
    w = downlink.values
    total = np.zeros_like(w)
    loss, n = 0.0, 0
    for sample in episode.chain():
        l, g = backward(spec, w, sample)
        total += g
        loss += l
        n += 1
    return DenseWeights(downlink.round, total / DTYPE(n)), RoundReport(downlink.round, math.nan, loss / n)


def check_round(server: ServerState, rnd: int) -> None:
    if rnd != server.round:
        raise StaleRoundError(f"update for round {rnd}, server is at round {server.round}")
    if server.round >= server.T_max:
        raise StaleRoundError(f"server already finished {server.T_max} rounds")


def server_aggregate(server: ServerState, delta: SparseDelta) -> ServerState:
    """g <- g + f(t) * delta on the delta's coordinates; all others keep their value."""
    check_round(server, delta.round)
    p = server.partition
    if delta.global_count != p.global_count:
        raise ValueError(f"delta covers {delta.global_count} global weights, server has {p.global_count}")
    g = apply_delta(server.global_weights, delta, server.rate)
    phi = server.phi.copy()
    phi[p.global_indices] = g
    return server.advance(phi)


def server_interpolate(server: ServerState, updates: Sequence[DenseWeights]) -> ServerState:
    """phi <- phi + f(t) * (mean(w) - phi) over full-model updates."""
    for u in updates:
        check_round(server, u.round)
        if u.values.shape != server.phi.shape:
            raise ValueError("full-model update has the wrong length")
    if len(updates) == 1:
        target = updates[0].values
    else:
        target = (np.sum([u.values for u in updates], axis=0) / DTYPE(len(updates))).astype(DTYPE)
    phi = server.phi + DTYPE(server.rate) * (target - server.phi)
    return server.advance(phi)


def server_sgd(server: ServerState, gradient: DenseWeights, lr: float) -> ServerState:
    check_round(server, gradient.round)
    if gradient.values.shape != server.phi.shape:
        raise ValueError("gradient has the wrong length")
    return server.advance(sgd_step(server.phi, gradient.values, lr))


def sample_buffer(algorithm: str, support_size: int, query_size: int) -> int:
    """Largest number of training samples a client holds at once."""
    if algorithm == "reptile_serial":
        return support_size + query_size
    return 1


@dataclass(frozen=True)
class EvalResult:
    mean_loss: float
    std_loss: float
    mean_accuracy: float | None
    losses: tuple[float, ...]


def fine_tune(spec: NetworkSpec, w: np.ndarray, support: Sequence[Sample], steps: int, beta: float) -> np.ndarray:
    """``steps`` per-sample SGD steps cycling through ``support``."""
    for s in range(steps):
        _, grad = backward(spec, w, support[s % len(support)])
        w = sgd_step(w, grad, beta)
    return w


def evaluate_initialization(
    spec: NetworkSpec,
    phi: np.ndarray,
    testing: TaskSampler,
    fine_tune_steps: int,
    support_size: int,
    query_size: int,
    beta: float,
    repeats: int,
    seed: int = 0,
) -> EvalResult:
    """Fine-tune copies of ``phi`` on unseen tasks and score them on fresh query data.

    Repeat ``j`` always uses testing task ``j`` and the same episode draw, so
    evaluations at different rounds (or of different runs) see identical data.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    losses, accs = [], []
    for j in range(repeats):
        task = testing.task(j)
        key = seed_key(seed, EVAL_EPISODES, j)
        support = sample_stream(task, support_size, seed_key(key, 0), testing.sine.x).materialize()
        query = sample_stream(task, query_size, seed_key(key, 1), testing.sine.x).materialize()
        w = fine_tune(spec, np.array(phi, dtype=DTYPE), support, fine_tune_steps, beta)
        xs = np.stack([s.input for s in query])
        ys = np.stack([s.target for s in query])
        out, _ = forward(spec, w, xs)
        losses.append(loss_value(spec, out, ys))
        if spec.loss is Loss.CROSS_ENTROPY:
            accs.append(float(np.mean(out.argmax(axis=1) == ys.argmax(axis=1))))
    arr = np.asarray(losses)
    return EvalResult(
        float(arr.mean()),
        float(arr.std()),
        float(np.mean(accs)) if accs else None,
        tuple(losses),
    )
