"""Seeded experiment drivers and CSV output.

Three experiments mirror the evaluation: an accuracy grid over attack
strength, data skew and attacker count without defenses; a reputation
trace of one worker that turns bad after a number of tasks; and a sweep of
the selection threshold after a warm-up that fills the ledger.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import statistics
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ScenarioConfig
from .fl import (
    Dataset, Honest, Lazy, Poisoner, Unreliable, WorkerProfile, gen_synthetic, load_idx,
    partition, poison, rng_for,
)
from .ledger import MinerSet, ReputationLedger, derive_key
from .orchestrator import (
    NoEligibleWorkers, SchemeState, Scheme, TaskEnvironment, TaskSpec, composite_reputation,
    prepare_task, run_task, score_workers, select_workers, settle_task, train_task,
    tsl_reputation,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "fedtrust-metrics/1"
OBSERVER = "observer"

HEADER = ("schema", "experiment", "seed", "scheme", "threshold", "emd_setting",
          "attack_strength", "attacker_count", "round", "status", "accuracy", "reputation",
          "reputations")
SUMMARY_HEADER = ("schema", "experiment", "scheme", "threshold", "emd_setting",
                  "attack_strength", "attacker_count", "round", "n", "accuracy_mean",
                  "accuracy_std", "reputation_mean", "reputation_std")


class MetricRangeError(ValueError):
    pass


@dataclass(frozen=True)
class MetricRow:
    experiment: str
    seed: int
    scheme: str
    round: int
    threshold: float | None = None
    emd_setting: float | None = None
    attack_strength: float | None = None
    attacker_count: int | None = None
    status: str = "ok"
    accuracy: float | None = None
    reputation: float | None = None
    reputations: tuple[tuple[str, float], ...] = ()

    def validate(self) -> None:
        def unit(name, v):
            if v is not None and not (0.0 <= v <= 1.0):
                raise MetricRangeError(f"{name}={v!r} outside [0, 1] in {self}")
        unit("accuracy", self.accuracy)
        unit("reputation", self.reputation)
        unit("threshold", self.threshold)
        unit("attack_strength", self.attack_strength)
        for w, v in self.reputations:
            unit(f"reputation[{w}]", v)
        if self.emd_setting is not None and not (0.0 <= self.emd_setting <= 2.0):
            raise MetricRangeError(f"emd_setting={self.emd_setting!r} outside [0, 2]")
        if self.status == "ok" and self.experiment != "reputation_trace" and self.accuracy is None:
            raise MetricRangeError(f"row without accuracy: {self}")

    def cells(self) -> list[str]:
        return [SCHEMA_VERSION, self.experiment, str(self.seed), self.scheme,
                _real(self.threshold), _real(self.emd_setting), _real(self.attack_strength),
                "" if self.attacker_count is None else str(self.attacker_count),
                str(self.round), self.status, _real(self.accuracy), _real(self.reputation),
                ";".join(f"{w}={v:.6f}" for w, v in self.reputations)]


def _real(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def sub_seed(seed: int, *keys) -> int:
    return int(rng_for(seed, *keys).integers(0, 2**31 - 1))


# -- scenario building -------------------------------------------------------

@dataclass(frozen=True)
class SeedData:
    pool: Dataset
    validation: Dataset
    test: Dataset


def build_data(cfg: ScenarioConfig, seed: int) -> SeedData:
    """Training pool, publisher validation slice and test set for one seed."""
    ds = cfg.dataset
    if ds.source == "idx":
        train = load_idx(ds.train_images, ds.train_labels, ds.n_classes)
        test = load_idx(ds.test_images, ds.test_labels, ds.n_classes)
    else:
        full = gen_synthetic(ds.n_examples + ds.n_test, ds.n_classes, ds.n_features,
                             ds.separation, seed)
        test, train = full.split(ds.n_test / len(full), seed)
    validation, pool = train.split(ds.validation_fraction, sub_seed(seed, "validation"))
    return SeedData(pool, validation, test)


def materialize(profiles: Sequence[WorkerProfile], pool: Dataset, seed: int,
                shard_size: int | None) -> list[WorkerProfile]:
    """Partition the pool and relabel the shards of poisoning workers."""
    out = []
    for p in partition(pool, profiles, seed, shard_size):
        if isinstance(p.behavior, Poisoner):
            p = p.with_shard(poison(p.shard, p.behavior.attack_strength,
                                    sub_seed(seed, "poison", p.worker_id)))
        out.append(p)
    return out


def emd_classes(emd_setting: float, n_classes: int) -> int:
    """Classes held by a skewed worker so its shard sits ``emd_setting`` from uniform."""
    return max(1, min(n_classes, round(n_classes * (1.0 - emd_setting / 2.0))))


def publisher_schedule(cfg: ScenarioConfig, seed: int, n_tasks: int
                       ) -> tuple[list[str], dict[str, float]]:
    """Publisher of each task and its relative activity weight.

    Every simulated week each publisher draws a task count from the
    configured range; the week's tasks are shuffled together. The weight
    of a publisher is its first-week count over the range maximum.
    """
    rep = cfg.reputation
    lo, hi = rep.tasks_per_week
    pubs = [f"p{i}" for i in range(rep.n_publishers)]
    rng = rng_for(seed, "schedule")
    order: list[str] = []
    weights: dict[str, float] = {}
    while len(order) < n_tasks:
        counts = rng.integers(lo, hi + 1, size=len(pubs))
        if not weights:
            weights = {p: int(c) / hi for p, c in zip(pubs, counts)}
        week = np.repeat(np.arange(len(pubs)), counts)
        order.extend(pubs[i] for i in rng.permutation(week))
    return order[:n_tasks], weights


def new_ledger(cfg: ScenarioConfig, seed: int) -> ReputationLedger:
    rep = cfg.reputation
    ledger = ReputationLedger(MinerSet.of_size(rep.miners, range(rep.faulty_miners)))
    for i in range(rep.n_publishers):
        ledger.register_publisher(f"p{i}", derive_key(seed, f"p{i}"))
    return ledger


def make_env(cfg: ScenarioConfig, data: SeedData,
             publisher_weights: dict[str, float] | None = None) -> TaskEnvironment:
    rep = cfg.reputation
    return TaskEnvironment(validation=data.validation, test=data.test, training=cfg.training,
                           weights=rep.weights, frequency_window=rep.frequency_window,
                           publisher_weights=publisher_weights or {}, atv_scale=rep.atv_scale)


def observed_reputation(scheme: Scheme, worker: str, ledger: ReputationLedger | None,
                        state: SchemeState, env: TaskEnvironment, now: int) -> float:
    """Reputation as seen by a publisher with no interaction history of its own."""
    if scheme in (Scheme.ATV, Scheme.NODEFENSE):
        return state.trust_value(worker)
    if scheme is Scheme.TSL:
        return tsl_reputation(OBSERVER, worker, ledger, [], now, env.weights.gamma,
                              env.weights.recency_window).value
    return composite_reputation(OBSERVER, worker, ledger, [], env.weights, now,
                                frequency_window=env.frequency_window).value


class _SchemeRun:
    """Ledger and state of one scheme inside one seeded experiment."""

    def __init__(self, scheme: Scheme, cfg: ScenarioConfig, seed: int):
        self.scheme = scheme
        self.state = SchemeState()
        self.ledger = new_ledger(cfg, seed) if scheme in (Scheme.MSL, Scheme.TSL) else None


def _shared_task(runs: Sequence[_SchemeRun], task_id: str, publisher: str,
                 profiles: Sequence[WorkerProfile], rounds: int, seed: int,
                 env: TaskEnvironment, screen: bool) -> float:
    """One task at threshold 0 settled into several schemes from a single training run.

    At threshold 0 every scheme selects the whole roster, so the training
    run is identical across them and is done once.
    """
    selected = None
    pending = []
    for run in runs:
        spec = TaskSpec(task_id, publisher, reputation_threshold=0.0, rounds=rounds,
                        scheme=run.scheme)
        now, sel, scores = prepare_task(spec, profiles, run.ledger, run.state, env)
        if selected is not None and set(sel) != set(selected):
            raise RuntimeError("schemes disagree on the threshold-0 selection")
        selected = sel
        pending.append((run, spec, now, sel, scores))
    by_id = {p.worker_id: p for p in profiles}
    result = train_task([by_id[w] for w in sorted(selected)], env, rounds, seed, screen=screen)
    for run, spec, now, sel, scores in pending:
        settle_task(spec, run.ledger, run.state, env, now, sel, scores, result, seed)
    return result.accuracy


# -- experiments -------------------------------------------------------------

def accuracy_grid(cfg: ScenarioConfig) -> list[MetricRow]:
    """Final NoDefense accuracy for every (strength, EMD, attackers) cell and seed."""
    g = cfg.grid
    n_classes = cfg.dataset.n_classes
    rows = []
    for seed in cfg.seeds:
        data = build_data(cfg, seed)
        env = make_env(cfg, data)
        for emd_setting in g.emd_settings:
            n_unrel = g.unreliable if emd_setting > 0 else 0
            k = emd_classes(emd_setting, n_classes)
            for attackers in g.attacker_counts:
                for strength in g.attack_strengths:
                    kinds = ([Poisoner(strength)] * attackers + [Unreliable(k)] * n_unrel
                             + [Honest()] * (g.workers - attackers - n_unrel))
                    roster = materialize([WorkerProfile(f"w{i}", b) for i, b in enumerate(kinds)],
                                         data.pool, seed, cfg.dataset.shard_size)
                    spec = TaskSpec(f"grid-{seed}", "p0", rounds=cfg.rounds,
                                    scheme=Scheme.NODEFENSE)
                    report = run_task(spec, roster, None, SchemeState(), seed, env)
                    rows.append(MetricRow("accuracy_grid", seed, Scheme.NODEFENSE.value,
                                          cfg.rounds, emd_setting=emd_setting,
                                          attack_strength=strength, attacker_count=attackers,
                                          accuracy=report.final_accuracy))
                    logger.info("grid seed=%d emd=%.2f attackers=%d strength=%.2f acc=%.4f",
                                seed, emd_setting, attackers, strength, report.final_accuracy)
    return rows


def _trace_roster(cfg: ScenarioConfig, data: SeedData, seed: int
                  ) -> tuple[WorkerProfile, WorkerProfile, list[WorkerProfile]]:
    tr, rs = cfg.trace, cfg.roster
    bad_kind = {"poison": Poisoner(rs.attack_strength), "unreliable": Unreliable(rs.classes_held),
                "lazy": Lazy(rs.lazy_fraction)}[tr.behavior]
    base = [WorkerProfile("w0", Honest()), WorkerProfile("w0-bad", bad_kind)]
    base += [WorkerProfile(f"w{i}", Honest()) for i in range(1, tr.helpers + 1)]
    parted = partition(data.pool, base, seed, cfg.dataset.shard_size)
    good, bad_slot, helpers = parted[0], parted[1], parted[2:]
    if tr.behavior == "poison":
        bad = WorkerProfile("w0", bad_kind, poison(good.shard, rs.attack_strength,
                                                   sub_seed(seed, "poison", "w0")))
    elif tr.behavior == "lazy":
        bad = WorkerProfile("w0", bad_kind, good.shard)
    else:
        bad = WorkerProfile("w0", bad_kind, bad_slot.shard)
    return good, bad, helpers


def reputation_trace(cfg: ScenarioConfig, tracked: str = "w0") -> list[MetricRow]:
    """Per-task reputation of a worker that behaves for a while, then misbehaves at random."""
    tr = cfg.trace
    rows = []
    schemes = (Scheme.MSL, Scheme.TSL, Scheme.ATV, Scheme.NODEFENSE)
    for seed in cfg.seeds:
        data = build_data(cfg, seed)
        good, bad, helpers = _trace_roster(cfg, data, seed)
        order, pub_weights = publisher_schedule(cfg, seed, tr.tasks)
        env = make_env(cfg, data, pub_weights)
        runs = {s: _SchemeRun(s, cfg, seed) for s in schemes}
        defended = [runs[s] for s in schemes if s.screens]
        misbehave_rng = rng_for(seed, "misbehave")
        for s in schemes:
            rows.append(MetricRow("reputation_trace", seed, s.value, 0, threshold=0.0,
                                  reputation=0.5, reputations=((tracked, 0.5),)))
        for k in range(1, tr.tasks + 1):
            misbehaves = k > tr.good_tasks and bool(misbehave_rng.random() < tr.misbehave_prob)
            roster = [bad if misbehaves else good] + helpers
            task_seed = sub_seed(seed, "task", k)
            acc = _shared_task(defended, f"trace-{k}", order[k - 1], roster, tr.rounds,
                               task_seed, env, screen=True)
            nd_acc = _shared_task([runs[Scheme.NODEFENSE]], f"trace-{k}", order[k - 1], roster,
                                  tr.rounds, task_seed, env, screen=False)
            for s in schemes:
                run = runs[s]
                value = observed_reputation(s, tracked, run.ledger, run.state, env, k)
                rows.append(MetricRow("reputation_trace", seed, s.value, k, threshold=0.0,
                                      status="bad" if misbehaves else "ok",
                                      accuracy=nd_acc if s is Scheme.NODEFENSE else acc,
                                      reputation=value, reputations=((tracked, value),)))
    return rows


def _roster_emd(cfg: ScenarioConfig) -> float:
    if cfg.roster.unreliable == 0:
        return 0.0
    return 2.0 * (1.0 - cfg.roster.classes_held / cfg.dataset.n_classes)


def threshold_sweep(cfg: ScenarioConfig) -> list[MetricRow]:
    """Final accuracy against the selection threshold after a ledger warm-up."""
    sw = cfg.sweep
    rows = []
    thresholds = sw.threshold_values()
    emd_setting = _roster_emd(cfg)
    common = dict(emd_setting=emd_setting, attack_strength=cfg.roster.attack_strength,
                  attacker_count=cfg.roster.poisoners)
    for seed in cfg.seeds:
        data = build_data(cfg, seed)
        roster = materialize(cfg.roster.profiles(), data.pool, seed, cfg.dataset.shard_size)
        by_id = {p.worker_id: p for p in roster}
        order, pub_weights = publisher_schedule(cfg, seed, sw.warmup_tasks + 1)
        env = make_env(cfg, data, pub_weights)
        runs = [_SchemeRun(s, cfg, seed) for s in sw.schemes]
        screened = [r for r in runs if r.scheme.screens]
        unscreened = [r for r in runs if not r.scheme.screens]
        for k in range(1, sw.warmup_tasks + 1):
            task_seed = sub_seed(seed, "task", k)
            for group, screen in ((screened, True), (unscreened, False)):
                if group:
                    _shared_task(group, f"warmup-{k}", order[k - 1], roster, cfg.rounds,
                                 task_seed, env, screen)

        publisher = order[sw.warmup_tasks]
        task_seed = sub_seed(seed, "task", sw.warmup_tasks + 1)
        cache: dict[frozenset, float] = {}

        def accuracy_of(selected: Iterable[str]) -> float:
            key = frozenset(selected)
            if key not in cache:
                cache[key] = train_task([by_id[w] for w in sorted(key)], env, cfg.rounds,
                                        task_seed, screen=False).accuracy
            return cache[key]

        base = accuracy_of(by_id)
        rows.append(MetricRow("threshold_sweep", seed, Scheme.NODEFENSE.value, cfg.rounds,
                              threshold=0.0, accuracy=base, **common))
        for run in runs:
            if not run.scheme.screens:
                continue
            now = run.state.clock + 1
            scores = score_workers(run.scheme, publisher, sorted(by_id), run.ledger, run.state,
                                   env, now)
            snapshot = tuple(sorted(scores.items()))
            for th in thresholds:
                spec = TaskSpec(f"sweep-{seed}", publisher, reputation_threshold=th,
                                rounds=cfg.rounds, scheme=run.scheme, screen_updates=False)
                try:
                    selected = select_workers(spec, by_id, scores)
                except NoEligibleWorkers:
                    rows.append(MetricRow("threshold_sweep", seed, run.scheme.value, cfg.rounds,
                                          threshold=th, status="no_eligible",
                                          reputations=snapshot, **common))
                    continue
                rows.append(MetricRow("threshold_sweep", seed, run.scheme.value, cfg.rounds,
                                      threshold=th, accuracy=accuracy_of(selected),
                                      reputations=snapshot, **common))
    return rows


# -- output ------------------------------------------------------------------

def _sort_key(row: MetricRow):
    none_low = lambda v: (-math.inf if v is None else v)  # noqa: E731
    return (row.experiment, row.seed, row.scheme, none_low(row.emd_setting),
            none_low(row.attacker_count), none_low(row.attack_strength),
            none_low(row.threshold), row.round)


def rows_to_csv(rows: Iterable[MetricRow]) -> str:
    rows = sorted(rows, key=_sort_key)
    for r in rows:
        r.validate()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def summarize(rows: Iterable[MetricRow]) -> str:
    """Mean and sample standard deviation over seeds for every non-seed key."""
    groups: dict[tuple, list[MetricRow]] = {}
    for r in rows:
        if r.status == "no_eligible":
            continue
        key = (r.experiment, r.scheme, r.threshold, r.emd_setting, r.attack_strength,
               r.attacker_count, r.round)
        groups.setdefault(key, []).append(r)

    def stats(vals: list[float]) -> tuple[str, str]:
        if not vals:
            return "", ""
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        return f"{statistics.fmean(vals):.6f}", f"{sd:.6f}"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    nl = lambda v: (-math.inf if v is None else v)  # noqa: E731
    for key in sorted(groups, key=lambda k: (k[0], k[1], nl(k[3]), nl(k[5]), nl(k[4]),
                                             nl(k[2]), k[6])):
        members = groups[key]
        exp, scheme, th, emd_s, strength, attackers, rnd = key
        acc = stats([m.accuracy for m in members if m.accuracy is not None])
        rep = stats([m.reputation for m in members if m.reputation is not None])
        w.writerow([SCHEMA_VERSION, exp, scheme, _real(th), _real(emd_s), _real(strength),
                    "" if attackers is None else attackers, rnd, len(members), *acc, *rep])
    return buf.getvalue()


def summary_path(out: str | Path) -> Path:
    out = Path(out)
    return out.with_name(out.stem + ".summary" + (out.suffix or ".csv"))


def write_results(rows: Sequence[MetricRow], out: str | Path) -> tuple[Path, Path]:
    out = Path(out)
    text = rows_to_csv(rows)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    spath = summary_path(out)
    spath.write_text(summarize(rows), encoding="utf-8")
    return out, spath


def with_overrides(cfg: ScenarioConfig, seeds: Sequence[int] | None = None,
                   scheme: Scheme | None = None, out: str | None = None) -> ScenarioConfig:
    changes = {}
    if seeds is not None:
        changes["seeds"] = tuple(seeds)
    if scheme is not None:
        changes["scheme"] = scheme
    if out is not None:
        changes["out"] = out
    return replace(cfg, **changes)
