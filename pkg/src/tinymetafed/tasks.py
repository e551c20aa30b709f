"""Task distributions and streaming episodes.

Every random draw is a pure function of an integer key, so a client can
rebuild its task and episode from (seed, client id, round) without any
shared state. Training and testing tasks come from disjoint key streams.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence, Union

import numpy as np

from .nn import DTYPE, Sample

SeedLike = Union[int, Sequence[int]]

MIN_EPISODE_SIZE = 1
MAX_EPISODE_SIZE = 16

# key-stream tags
TRAIN_TASKS = 1
TEST_TASKS = 2
EPISODES = 3
CLIENT_SELECTION = 4
EVAL_EPISODES = 5
CLASS_POOL = 6
INIT_WEIGHTS = 7


def seed_key(*parts: SeedLike) -> list[int]:
    key: list[int] = []
    for p in parts:
        key.extend([int(p)] if np.isscalar(p) else [int(v) for v in p])
    return key


def rng_for(*parts: SeedLike) -> np.random.Generator:
    return np.random.default_rng(seed_key(*parts))


@dataclass(frozen=True)
class SineRanges:
    amplitude: tuple[float, float] = (0.1, 5.0)
    frequency: tuple[float, float] = (0.8, 1.2)
    phase: tuple[float, float] = (0.0, math.pi)
    x: tuple[float, float] = (-5.0, 5.0)


@dataclass(frozen=True)
class SineTask:
    a: float
    b: float
    c: float

    def __call__(self, x):
        return self.a * np.sin(self.b * np.asarray(x, dtype=np.float64) + self.c)


@dataclass(frozen=True)
class ClassRanges:
    dim: int = 16
    classes: int = 5
    pool_size: int = 64
    noise_sigma: float = 0.3
    pool_seed: int = 0


@dataclass(frozen=True, eq=False)
class SyntheticClassTask:
    """Few-shot classification over ``M`` Gaussian clusters."""

    class_centers: np.ndarray
    noise_sigma: float

    def __post_init__(self):
        centers = np.asarray(self.class_centers, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[0] < 2:
            raise ValueError("need at least two class centers")
        if len({c.tobytes() for c in centers}) != centers.shape[0]:
            raise ValueError("class centers must be pairwise distinct")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be positive")
        object.__setattr__(self, "class_centers", centers)

    @property
    def M(self) -> int:
        return self.class_centers.shape[0]

    @property
    def dim(self) -> int:
        return self.class_centers.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, SyntheticClassTask)
            and self.noise_sigma == other.noise_sigma
            and np.array_equal(self.class_centers, other.class_centers)
        )

    __hash__ = None


Task = Union[SineTask, SyntheticClassTask]


class SampleStream:
    """Single-pass iterator over samples produced on demand.

    There is no indexing and no rewinding; code that needs a sample twice
    must keep its own copy. ``replay()`` opens a new pass over the same
    sequence by regenerating it at the source (a sensor sending the episode
    again), so repeated passes need no storage on the consumer side.
    ``reads`` counts samples handed out by this pass and ``total_reads``
    those of every pass opened from the same source.
    """

    def __init__(self, open_source: Callable[[], Iterator[Sample]], length: int, _counter=None):
        self._open = open_source
        self._it = open_source()
        self._length = length
        self._counter = _counter if _counter is not None else [0]
        self.reads = 0

    def __len__(self) -> int:
        return self._length

    def __iter__(self) -> Iterator[Sample]:
        return self

    def __next__(self) -> Sample:
        if self.reads >= self._length:
            raise StopIteration
        sample = next(self._it)
        self.reads += 1
        self._counter[0] += 1
        return sample

    @property
    def remaining(self) -> int:
        return self._length - self.reads

    @property
    def total_reads(self) -> int:
        return self._counter[0]

    def replay(self) -> "SampleStream":
        return SampleStream(self._open, self._length, self._counter)

    def materialize(self) -> list[Sample]:
        """Drain the rest of the stream into a list (explicit storage)."""
        return list(self)


def concat(first: SampleStream, second: SampleStream) -> SampleStream:
    """One stream delivering ``first`` then ``second``, replayable like its parts."""
    return SampleStream(
        lambda: itertools.chain(first.replay(), second.replay()), len(first) + len(second)
    )


@dataclass
class Episode:
    support: SampleStream
    query: SampleStream
    task_id: object = None

    def chain(self) -> SampleStream:
        """Support then query as one fresh stream."""
        return concat(self.support, self.query)


def sample_sine_task(seed: SeedLike, ranges: SineRanges = SineRanges()) -> SineTask:
    rng = rng_for(seed)
    a = rng.uniform(*ranges.amplitude)
    b = rng.uniform(*ranges.frequency)
    c = rng.uniform(*ranges.phase)
    return SineTask(float(a), float(b), float(c))


def class_pool(ranges: ClassRanges) -> np.ndarray:
    """Fixed pool of cluster centers that tasks choose their classes from."""
    return rng_for(CLASS_POOL, ranges.pool_seed).standard_normal((ranges.pool_size, ranges.dim))


def sample_class_task(seed: SeedLike, ranges: ClassRanges = ClassRanges(), pool=None) -> SyntheticClassTask:
    pool = class_pool(ranges) if pool is None else pool
    rng = rng_for(seed)
    chosen = rng.choice(pool.shape[0], size=ranges.classes, replace=False)
    return SyntheticClassTask(pool[chosen], ranges.noise_sigma)


def _check_size(name: str, n: int) -> None:
    if not MIN_EPISODE_SIZE <= n <= MAX_EPISODE_SIZE:
        raise ValueError(f"{name} must be in [{MIN_EPISODE_SIZE}, {MAX_EPISODE_SIZE}], got {n}")


def sample_stream(task: Task, n: int, seed: SeedLike, x_range=(-5.0, 5.0)) -> SampleStream:
    """Lazy stream of ``n`` samples from ``task``; no size limit."""
    key = seed_key(seed)
    if isinstance(task, SineTask):

        def source():
            rng = rng_for(key)
            for _ in range(n):
                # target from the stored (rounded) input so the pair is exact
                x = DTYPE(rng.uniform(*x_range))
                yield Sample(np.array([x], dtype=DTYPE), np.array([task(x)], dtype=DTYPE))

    else:
        eye = np.eye(task.M, dtype=DTYPE)

        def source():
            rng = rng_for(key)
            for _ in range(n):
                label = rng.integers(task.M)
                x = task.class_centers[label] + rng.normal(0.0, task.noise_sigma, size=task.dim)
                yield Sample(x.astype(DTYPE), eye[label])

    return SampleStream(source, n)


def draw_episode(
    task: Task,
    support_size: int,
    query_size: int,
    seed: SeedLike,
    x_range=(-5.0, 5.0),
    task_id=None,
) -> Episode:
    _check_size("support_size", support_size)
    _check_size("query_size", query_size)
    return Episode(
        support=sample_stream(task, support_size, seed_key(seed, 0), x_range),
        query=sample_stream(task, query_size, seed_key(seed, 1), x_range),
        task_id=task_id,
    )


@dataclass(frozen=True)
class TaskSampler:
    """Indexed task source: ``task(i)`` is a pure function of (key, i)."""

    family: str
    key: tuple[int, ...]
    sine: SineRanges = SineRanges()
    classes: ClassRanges = ClassRanges()
    _pool: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.family not in ("sine", "synthetic_class"):
            raise ValueError(f"unknown task family {self.family!r}")
        if self.family == "synthetic_class" and self._pool is None:
            object.__setattr__(self, "_pool", class_pool(self.classes))

    def task(self, i: int) -> Task:
        if self.family == "sine":
            return sample_sine_task(seed_key(self.key, i), self.sine)
        return sample_class_task(seed_key(self.key, i), self.classes, self._pool)

    def episode(self, task: Task, support_size: int, query_size: int, seed: SeedLike, task_id=None) -> Episode:
        return draw_episode(task, support_size, query_size, seed, self.sine.x, task_id)


@dataclass(frozen=True)
class TaskSplit:
    training: TaskSampler
    testing: TaskSampler


def make_task_split(
    family: str,
    seed: int,
    sine: SineRanges = SineRanges(),
    classes: ClassRanges = ClassRanges(),
) -> TaskSplit:
    return TaskSplit(
        training=TaskSampler(family, (int(seed), TRAIN_TASKS), sine, classes),
        testing=TaskSampler(family, (int(seed), TEST_TASKS), sine, classes),
    )
