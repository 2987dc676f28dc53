"""Scenario configuration: an INI file checked against a fixed schema.

Every section and key is optional and falls back to the default listed in
``SCHEMA``. Unknown sections or keys and malformed values are reported with
the file name and line number.
"""

from __future__ import annotations

import configparser
import re
from collections.abc import Callable
from dataclasses import dataclass, replace
from pathlib import Path

from .fl import Honest, Lazy, Poisoner, Unreliable, WorkerProfile
from .opinion import WeightConfig
from .orchestrator import Scheme, TrainingConfig


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None):
        self.source = source
        self.line = line
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


def parse_seeds(text: str) -> list[int]:
    """Parse ``"0-4,7,9"`` into ``[0, 1, 2, 3, 4, 7, 9]`` (order kept, duplicates dropped)."""
    seeds: list[int] = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        m = re.fullmatch(r"(\d+)\s*-\s*(\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if lo > hi:
                raise ValueError(f"seed range {part!r} has start > end")
            seeds.extend(range(lo, hi + 1))
        elif re.fullmatch(r"\d+", part):
            seeds.append(int(part))
        else:
            raise ValueError(f"bad seed {part!r}")
    if not seeds:
        raise ValueError("seed list is empty")
    return list(dict.fromkeys(seeds))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    vals = tuple(float(p) for p in text.split(",") if p.strip())
    if not vals:
        raise ValueError("empty list")
    return vals


def _ints(text: str) -> tuple[int, ...]:
    vals = tuple(int(p) for p in text.split(",") if p.strip())
    if not vals:
        raise ValueError("empty list")
    return vals


def _int_pair(text: str) -> tuple[int, int]:
    vals = _ints(text)
    if len(vals) != 2:
        raise ValueError("expected two integers")
    return vals


def _range(text: str) -> tuple[float, float, float]:
    """``start:stop:step`` inclusive of stop."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError("expected start:stop:step")
    start, stop, step = (float(p) for p in parts)
    if start > stop:
        raise ValueError("range start must be <= end")
    if step <= 0:
        raise ValueError("range step must be positive")
    return start, stop, step


def _opt_path(text: str) -> str | None:
    return text.strip() or None


def _opt_int(text: str) -> int | None:
    return int(text) if text.strip() else None


# section -> key -> (parser, default); the published schema
SCHEMA: dict[str, dict[str, tuple[Callable[[str], object], str]]] = {
    "experiment": {
        "seeds": (parse_seeds, "0-19"),
        "out": (str, "results.csv"),
        "scheme": (Scheme.parse, "MSL"),
    },
    "dataset": {
        "source": (str, "synthetic"),
        "n_examples": (int, "12000"),
        "n_test": (int, "2000"),
        "n_classes": (int, "10"),
        "n_features": (int, "50"),
        "separation": (float, "6.0"),
        "validation_fraction": (float, "0.05"),
        "shard_size": (_opt_int, "100"),
        "train_images": (_opt_path, ""),
        "train_labels": (_opt_path, ""),
        "test_images": (_opt_path, ""),
        "test_labels": (_opt_path, ""),
    },
    "roster": {
        "honest": (int, "4"),
        "poisoners": (int, "2"),
        "unreliable": (int, "4"),
        "lazy": (int, "0"),
        "attack_strength": (float, "0.9"),
        "classes_held": (int, "2"),
        "lazy_fraction": (float, "0.4"),
    },
    "training": {
        "rounds": (int, "30"),
        "batch_size": (int, "32"),
        "local_batches": (int, "5"),
        "lr": (float, "0.3"),
        "lr_decay": (_bool, "false"),
        "compute_rate": (float, "1.0"),
        "elapsed_tolerance": (float, "0.1"),
        "roni_epsilon": (float, "0.02"),
        "link_failure_low": (float, "0.0"),
        "link_failure_high": (float, "0.4"),
    },
    "reputation": {
        "gamma": (float, "0.5"),
        "w_recent": (float, "0.8"),
        "w_past": (float, "0.2"),
        "rho_pos": (float, "0.4"),
        "rho_neg": (float, "0.6"),
        "recency_window": (int, "3"),
        "frequency_window": (_opt_int, "20"),
        "threshold": (float, "0.5"),
        "atv_scale": (float, "0.1"),
        "n_publishers": (int, "30"),
        "tasks_per_week": (_int_pair, "20, 40"),
        "miners": (int, "4"),
        "faulty_miners": (int, "0"),
    },
    "grid": {
        "attack_strengths": (_floats, "0, 0.5, 0.9"),
        "emd_settings": (_floats, "0, 1.6"),
        "attacker_counts": (_ints, "1, 2"),
        "workers": (int, "10"),
        "unreliable": (int, "4"),
    },
    "trace": {
        "tasks": (int, "30"),
        "good_tasks": (int, "6"),
        "misbehave_prob": (float, "0.8"),
        "behavior": (str, "poison"),
        "helpers": (int, "4"),
        "rounds": (int, "10"),
    },
    "sweep": {
        "thresholds": (_range, "0.0:0.9:0.05"),
        "warmup_tasks": (int, "6"),
        "schemes": (lambda t: tuple(Scheme.parse(p.strip()) for p in t.split(",") if p.strip()),
                    "MSL, TSL, ATV"),
    },
}


@dataclass(frozen=True)
class DatasetSpec:
    source: str
    n_examples: int
    n_test: int
    n_classes: int
    n_features: int
    separation: float
    validation_fraction: float
    shard_size: int | None
    train_images: str | None
    train_labels: str | None
    test_images: str | None
    test_labels: str | None


@dataclass(frozen=True)
class RosterSpec:
    honest: int
    poisoners: int
    unreliable: int
    lazy: int
    attack_strength: float
    classes_held: int
    lazy_fraction: float

    @property
    def size(self) -> int:
        return self.honest + self.poisoners + self.unreliable + self.lazy

    def profiles(self) -> list[WorkerProfile]:
        """Workers ``w0..`` in the order poisoners, unreliable, lazy, honest."""
        kinds = ([Poisoner(self.attack_strength)] * self.poisoners
                 + [Unreliable(self.classes_held)] * self.unreliable
                 + [Lazy(self.lazy_fraction)] * self.lazy
                 + [Honest()] * self.honest)
        return [WorkerProfile(f"w{i}", b) for i, b in enumerate(kinds)]


@dataclass(frozen=True)
class ReputationSpec:
    weights: WeightConfig
    frequency_window: int | None
    threshold: float
    atv_scale: float
    n_publishers: int
    tasks_per_week: tuple[int, int]
    miners: int
    faulty_miners: int


@dataclass(frozen=True)
class GridSpec:
    attack_strengths: tuple[float, ...]
    emd_settings: tuple[float, ...]
    attacker_counts: tuple[int, ...]
    workers: int
    unreliable: int


@dataclass(frozen=True)
class TraceSpec:
    tasks: int
    good_tasks: int
    misbehave_prob: float
    behavior: str
    helpers: int
    rounds: int


@dataclass(frozen=True)
class SweepSpec:
    thresholds: tuple[float, float, float]
    warmup_tasks: int
    schemes: tuple[Scheme, ...]

    def threshold_values(self) -> list[float]:
        start, stop, step = self.thresholds
        n = int(round((stop - start) / step))
        vals = [round(start + i * step, 10) for i in range(n + 1)]
        return [v for v in vals if v <= stop + 1e-12]


@dataclass(frozen=True)
class ScenarioConfig:
    seeds: tuple[int, ...]
    out: str
    scheme: Scheme
    dataset: DatasetSpec
    roster: RosterSpec
    training: TrainingConfig
    rounds: int
    reputation: ReputationSpec
    grid: GridSpec
    trace: TraceSpec
    sweep: SweepSpec

    def with_seeds(self, seeds) -> ScenarioConfig:
        return replace(self, seeds=tuple(seeds))


def _key_lines(text: str) -> dict[tuple[str, str | None], int]:
    """Line number of every section header and key, for error messages."""
    lines: dict[tuple[str, str | None], int] = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.fullmatch(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            lines.setdefault((section, None), no)
            continue
        m = re.match(r"([^=:\s][^=:]*?)\s*[=:]", line)
        if m and section is not None and not raw[:1].isspace():
            lines.setdefault((section, m.group(1).strip().lower()), no)
    return lines


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def parse_config(text: str, source: str = "<config>") -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside any [section]", source, exc.lineno) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(exc.message.split(": ", 1)[-1], source, exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigError("unparseable line", source, lineno) from None
    where = _key_lines(text)

    values: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", source, where.get((section, None)))
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", source,
                                  where.get((section, key)))
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (conv, default) in keys.items():
            given = parser.has_option(section, key)
            raw = parser.get(section, key) if given else default
            try:
                values[section][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}", source,
                                  where.get((section, key)) if given else None) from None

    def fail(section: str, key: str, message: str):
        raise ConfigError(f"[{section}] {key}: {message}", source, where.get((section, key)))

    return _build(values, fail)


def default_config() -> ScenarioConfig:
    return parse_config("", "<defaults>")


def _build(v: dict[str, dict[str, object]], fail) -> ScenarioConfig:
    ds = DatasetSpec(**v["dataset"])  # type: ignore[arg-type]
    if ds.source not in ("synthetic", "idx"):
        fail("dataset", "source", "must be 'synthetic' or 'idx'")
    if ds.source == "idx" and not (ds.train_images and ds.train_labels
                                   and ds.test_images and ds.test_labels):
        fail("dataset", "source", "idx source needs train/test image and label paths")
    for key in ("n_examples", "n_test", "n_features"):
        if getattr(ds, key) < 1:
            fail("dataset", key, "must be positive")
    if ds.n_classes < 2:
        fail("dataset", "n_classes", "must be at least 2")
    if ds.separation <= 0:
        fail("dataset", "separation", "must be positive")
    if not 0 < ds.validation_fraction < 1:
        fail("dataset", "validation_fraction", "must be in (0, 1)")
    if ds.shard_size is not None and ds.shard_size < 1:
        fail("dataset", "shard_size", "must be positive")

    r = v["roster"]
    for key in ("honest", "poisoners", "unreliable", "lazy"):
        if r[key] < 0:
            fail("roster", key, "count must be non-negative")
    if r["honest"] + r["poisoners"] + r["unreliable"] + r["lazy"] < 1:
        fail("roster", "honest", "roster must contain at least one worker")
    if not 0 <= r["attack_strength"] <= 1:
        fail("roster", "attack_strength", "must be in [0, 1]")
    if not 1 <= r["classes_held"] <= ds.n_classes:
        fail("roster", "classes_held", f"must be in [1, {ds.n_classes}]")
    if not 0 < r["lazy_fraction"] < 1:
        fail("roster", "lazy_fraction", "must be in (0, 1)")
    roster = RosterSpec(**r)  # type: ignore[arg-type]

    t = v["training"]
    for key in ("rounds", "batch_size", "local_batches"):
        if t[key] < 1:
            fail("training", key, "must be positive")
    if t["lr"] < 0:
        fail("training", "lr", "must be non-negative")
    if t["compute_rate"] <= 0:
        fail("training", "compute_rate", "must be positive")
    if not 0 < t["elapsed_tolerance"] < 1:
        fail("training", "elapsed_tolerance", "must be in (0, 1)")
    if not 0 <= t["roni_epsilon"] <= 1:
        fail("training", "roni_epsilon", "must be in [0, 1]")
    if not 0 <= t["link_failure_low"] <= t["link_failure_high"] <= 1:
        fail("training", "link_failure_high", "need 0 <= link_failure_low <= link_failure_high <= 1")
    rounds = t.pop("rounds")
    training = TrainingConfig(**t)  # type: ignore[arg-type]

    rp = v["reputation"]
    try:
        weights = WeightConfig(gamma=rp["gamma"], w_recent=rp["w_recent"], w_past=rp["w_past"],
                               rho_pos=rp["rho_pos"], rho_neg=rp["rho_neg"],
                               recency_window=rp["recency_window"])
    except ValueError as exc:
        fail("reputation", "gamma", str(exc))
    if rp["frequency_window"] is not None and rp["frequency_window"] < 1:
        fail("reputation", "frequency_window", "must be positive or empty")
    if not 0 <= rp["threshold"] <= 1:
        fail("reputation", "threshold", "must be in [0, 1]")
    if rp["atv_scale"] <= 0:
        fail("reputation", "atv_scale", "must be positive")
    if rp["n_publishers"] < 1:
        fail("reputation", "n_publishers", "must be positive")
    lo, hi = rp["tasks_per_week"]
    if not 1 <= lo <= hi:
        fail("reputation", "tasks_per_week", "need 1 <= low <= high")
    if rp["miners"] < 1:
        fail("reputation", "miners", "must be positive")
    if not 0 <= rp["faulty_miners"] < rp["miners"]:
        fail("reputation", "faulty_miners", "must be in [0, miners)")
    reputation = ReputationSpec(weights, rp["frequency_window"], rp["threshold"], rp["atv_scale"],
                                rp["n_publishers"], (lo, hi), rp["miners"], rp["faulty_miners"])

    g = v["grid"]
    if any(not 0 <= s <= 1 for s in g["attack_strengths"]):
        fail("grid", "attack_strengths", "values must be in [0, 1]")
    if any(not 0 <= e < 2 for e in g["emd_settings"]):
        fail("grid", "emd_settings", "values must be in [0, 2)")
    if any(a < 0 for a in g["attacker_counts"]):
        fail("grid", "attacker_counts", "values must be non-negative")
    if g["unreliable"] < 0:
        fail("grid", "unreliable", "must be non-negative")
    if max(g["attacker_counts"]) + g["unreliable"] > g["workers"]:
        fail("grid", "workers", "too few workers for the attackers and unreliable workers")
    grid = GridSpec(**g)  # type: ignore[arg-type]

    tr = v["trace"]
    if tr["tasks"] < 1:
        fail("trace", "tasks", "must be positive")
    if not 0 <= tr["good_tasks"] <= tr["tasks"]:
        fail("trace", "good_tasks", "must be in [0, tasks]")
    if not 0 <= tr["misbehave_prob"] <= 1:
        fail("trace", "misbehave_prob", "must be in [0, 1]")
    if tr["behavior"] not in ("poison", "unreliable", "lazy"):
        fail("trace", "behavior", "must be poison, unreliable or lazy")
    if tr["helpers"] < 0:
        fail("trace", "helpers", "must be non-negative")
    if tr["rounds"] < 1:
        fail("trace", "rounds", "must be positive")
    trace = TraceSpec(**tr)  # type: ignore[arg-type]

    sw = v["sweep"]
    start, stop, _ = sw["thresholds"]
    if start < 0 or stop > 1:
        fail("sweep", "thresholds", "thresholds must lie in [0, 1]")
    if sw["warmup_tasks"] < 0:
        fail("sweep", "warmup_tasks", "must be non-negative")
    if not sw["schemes"]:
        fail("sweep", "schemes", "need at least one scheme")
    sweep = SweepSpec(**sw)  # type: ignore[arg-type]

    e = v["experiment"]
    return ScenarioConfig(seeds=tuple(e["seeds"]), out=e["out"], scheme=e["scheme"],
                          dataset=ds, roster=roster, training=training, rounds=rounds,
                          reputation=reputation, grid=grid, trace=trace, sweep=sweep)
