"""Experiment configuration.

Configs are INI files: ``[section]`` headers with ``key = value`` lines.
Each key belongs to exactly one section (see ``section`` in the field
metadata below). Missing keys take the dataclass defaults, which are the
sine-wave experiment defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .nn import NetworkSpec
from .partition import Partition
from .tasks import ClassRanges, SineRanges, make_task_split, TaskSplit

ALGORITHMS = ("tinymetafed", "tinyreptile", "reptile_serial", "fedsgd")
FAMILIES = ("sine", "synthetic_class")

# hyperparameter ranges explored for the published experiments
TOP_P_RANGE = (10.0, 80.0)
BETA_RANGE = (0.001, 0.02)
EPISODE_RANGE = (1, 16)


def _f(default, section, **kw):
    return field(default=default, metadata={"section": section, **kw})


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = _f("tinymetafed", "experiment")
    seed: int = _f(0, "experiment")
    rounds: int = _f(10_000, "experiment")
    clients: int = _f(100, "experiment")

    family: str = _f("sine", "task")
    amplitude_min: float = _f(0.1, "task")
    amplitude_max: float = _f(5.0, "task")
    frequency_min: float = _f(0.8, "task")
    frequency_max: float = _f(1.2, "task")
    phase_min: float = _f(0.0, "task")
    phase_max: float = _f(math.pi, "task")
    x_min: float = _f(-5.0, "task")
    x_max: float = _f(5.0, "task")
    class_dim: int = _f(16, "task")
    classes: int = _f(5, "task")
    class_pool: int = _f(64, "task")
    noise_sigma: float = _f(0.3, "task")

    layers: tuple[int, ...] = _f((1, 16, 16, 16, 1), "network")
    hidden_activation: str = _f("tanh", "network")

    partition: str = _f("last_layer_local", "federated")
    top_p: float = _f(50.0, "federated")
    k: int = _f(5, "federated")
    beta: float = _f(0.01, "federated")
    support_size: int = _f(10, "federated")
    query_size: int = _f(10, "federated")
    retain_local: bool = _f(False, "federated")

    schedule: str = _f("cosine", "schedule")
    eta_max: float = _f(1.0, "schedule")
    eta_min: float = _f(0.0, "schedule")

    tinyreptile_stream: str = _f("episode", "baselines")
    reptile_epochs: int = _f(5, "baselines")
    reptile_batch_size: int = _f(1, "baselines")
    reptile_devices: int = _f(1, "baselines")
    fedsgd_lr: float = _f(0.01, "baselines")

    eval_every: int = _f(200, "eval")
    eval_repeats: int = _f(20, "eval")
    fine_tune_steps: int = _f(32, "eval")
    eval_query_size: int = _f(100, "eval")

    timeout: float = _f(30.0, "transport")
    cooldown: float = _f(5.0, "transport")
    checkpoint_every: int = _f(100, "transport")

    # ---- derived objects -------------------------------------------------

    def network(self) -> NetworkSpec:
        loss = "mse" if self.family == "sine" else "cross_entropy"
        return NetworkSpec.dense(self.layers, self.hidden_activation, loss)

    def partition_for(self, spec: NetworkSpec | None = None) -> Partition:
        """The partition the selected algorithm runs with; baselines are all-global."""
        spec = spec or self.network()
        if self.algorithm != "tinymetafed":
            return Partition.all_global(spec)
        return Partition.from_policy(spec, self.partition)

    def sine_ranges(self) -> SineRanges:
        return SineRanges(
            (self.amplitude_min, self.amplitude_max),
            (self.frequency_min, self.frequency_max),
            (self.phase_min, self.phase_max),
            (self.x_min, self.x_max),
        )

    def class_ranges(self) -> ClassRanges:
        return ClassRanges(self.class_dim, self.classes, self.class_pool, self.noise_sigma)

    def task_split(self, seed: int | None = None) -> TaskSplit:
        return make_task_split(
            self.family, self.seed if seed is None else seed, self.sine_ranges(), self.class_ranges()
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # ---- text form -------------------------------------------------------

    def to_text(self) -> str:
        sections: dict[str, list[str]] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(map(str, value))
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            sections.setdefault(f.metadata["section"], []).append(f"{f.name} = {value}")
        return "\n".join(f"[{name}]\n" + "\n".join(lines) + "\n" for name, lines in sections.items())

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode()).digest()

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        values, problems = _parse(text, source)
        if problems:
            raise ConfigError(problems)
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), str(path))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    # ---- validation ------------------------------------------------------

    def check(self) -> "ValidationReport":
        return _check(self)

    def validated(self) -> "ExperimentConfig":
        report = self.check()
        if report.errors:
            raise ConfigError(report.errors)
        return self


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def __bool__(self) -> bool:
        return bool(self.errors or self.warnings)

    def lines(self) -> list[str]:
        return [f"error: {e}" for e in self.errors] + [f"warning: {w}" for w in self.warnings]


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _convert(f: dataclasses.Field, raw: str):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    raw = raw.strip()
    if kind.startswith("tuple"):
        return tuple(int(v) for v in raw.replace("[", "").replace("]", "").split(",") if v.strip())
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def _parse(text: str, source: str) -> tuple[dict, list[str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        return {}, [f"{source}: {exc}"]
    lines = text.splitlines()

    def where(section: str, key: str) -> str:
        current = None
        for n, line in enumerate(lines, 1):
            s = line.strip()
            if s.startswith("[") and s.endswith("]"):
                current = s[1:-1].strip()
            elif current == section and s.split("=", 1)[0].strip() == key:
                return f"{source}:{n}"
        return source

    values, problems = {}, []
    for section in parser.sections():
        for key, raw in parser.items(section):
            f = _FIELDS.get(key)
            if f is None:
                problems.append(f"{where(section, key)}: unknown key [{section}] {key}")
                continue
            if f.metadata["section"] != section:
                problems.append(
                    f"{where(section, key)}: key {key} belongs in [{f.metadata['section']}], not [{section}]"
                )
                continue
            try:
                values[key] = _convert(f, raw)
            except ValueError as exc:
                problems.append(f"{where(section, key)}: [{section}] {key}: {exc}")
    return values, problems


def _check(c: ExperimentConfig) -> ValidationReport:
    r = ValidationReport()
    err, warn = r.errors.append, r.warnings.append

    if c.algorithm not in ALGORITHMS:
        err(f"experiment.algorithm: {c.algorithm!r} is not one of {', '.join(ALGORITHMS)}")
    if c.rounds < 0:
        err("experiment.rounds: must be >= 0")
    if c.clients < 1:
        err("experiment.clients: must be >= 1")
    if c.seed < 0:
        err("experiment.seed: must be >= 0")

    if c.family not in FAMILIES:
        err(f"task.family: {c.family!r} is not one of {', '.join(FAMILIES)}")
    for lo, hi in (("amplitude_min", "amplitude_max"), ("frequency_min", "frequency_max"),
                   ("phase_min", "phase_max"), ("x_min", "x_max")):
        if getattr(c, lo) > getattr(c, hi):
            err(f"task.{lo}/{hi}: empty range")
    if c.classes < 2:
        err("task.classes: need at least 2 classes")
    if c.class_pool < c.classes:
        err("task.class_pool: pool smaller than classes per task")
    if not c.noise_sigma > 0:
        err("task.noise_sigma: must be > 0")

    spec = None
    try:
        spec = c.network()
    except ValueError as exc:
        err(f"network: {exc}")
    if spec is not None and c.family in FAMILIES:
        want_in, want_out = (1, 1) if c.family == "sine" else (c.class_dim, c.classes)
        if spec.input_dim != want_in or spec.output_dim != want_out:
            err(f"network.layers: {c.family} needs {want_in} inputs and {want_out} outputs")
        try:
            Partition.from_policy(spec, c.partition)
        except ValueError as exc:
            err(f"federated.partition: {exc}")

    if not 0 < c.top_p <= 100:
        err(f"federated.top_p: {c.top_p} outside (0, 100]")
    elif not TOP_P_RANGE[0] <= c.top_p <= TOP_P_RANGE[1] and c.top_p != 100:
        warn(f"federated.top_p: {c.top_p} outside the explored range {TOP_P_RANGE[0]:g}%-{TOP_P_RANGE[1]:g}%")
    if c.k < 1:
        err("federated.k: must be >= 1")
    if not 0 <= c.beta < 1:
        err(f"federated.beta: {c.beta} outside [0, 1)")
    elif not BETA_RANGE[0] <= c.beta <= BETA_RANGE[1]:
        warn(f"federated.beta: {c.beta} outside the explored SGD learning-rate range {BETA_RANGE[0]}-{BETA_RANGE[1]}")
    for name in ("support_size", "query_size"):
        v = getattr(c, name)
        if not EPISODE_RANGE[0] <= v <= EPISODE_RANGE[1]:
            err(f"federated.{name}: {v} outside [{EPISODE_RANGE[0]}, {EPISODE_RANGE[1]}]")

    if c.schedule not in ("cosine", "constant"):
        err(f"schedule.schedule: {c.schedule!r} is not 'cosine' or 'constant'")
    if not 0 <= c.eta_min <= c.eta_max <= 1:
        err("schedule: need 0 <= eta_min <= eta_max <= 1")

    if c.tinyreptile_stream not in ("episode", "query"):
        err("baselines.tinyreptile_stream: must be 'episode' or 'query'")
    for name in ("reptile_epochs", "reptile_batch_size", "reptile_devices"):
        if getattr(c, name) < 1:
            err(f"baselines.{name}: must be >= 1")
    if c.fedsgd_lr < 0:
        err("baselines.fedsgd_lr: must be >= 0")

    if c.eval_every < 1:
        err("eval.eval_every: must be >= 1")
    if c.eval_repeats < 1:
        err("eval.eval_repeats: must be >= 1")
    if c.fine_tune_steps < 0:
        err("eval.fine_tune_steps: must be >= 0")
    if c.eval_query_size < 1:
        err("eval.eval_query_size: must be >= 1")

    if not c.timeout > 0:
        err("transport.timeout: must be > 0")
    if c.cooldown < 0:
        err("transport.cooldown: must be >= 0")
    if c.checkpoint_every < 1:
        err("transport.checkpoint_every: must be >= 1")
    return r


def validate_config(path: str | Path) -> ValidationReport:
    """Parse and range-check a config file without side effects.

    Unreadable files raise ``OSError``; everything else lands in the report.
    """
    text = Path(path).read_text()
    values, problems = _parse(text, str(path))
    if problems:
        return ValidationReport(errors=problems)
    try:
        cfg = ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        return ValidationReport(errors=[str(exc)])
    return cfg.check()
