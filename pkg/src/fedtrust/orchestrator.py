"""Task lifecycle: admission, reputation-based selection, screened federated
training, interaction recording and opinion publication.

Four schemes share the same task loop and differ only in how a worker's
reputation is computed:

* ``MSL`` multi-weight subjective logic (timeliness, effect and frequency weights)
* ``TSL`` the same pipeline with all weights equal
* ``ATV`` an aggregated trust value accumulating weighted event offsets
* ``NODEFENSE`` no screening and no reputation filter; its trust value
  accumulates offsets of the undetected (all-positive) outcomes
"""

from __future__ import annotations

import enum
import logging
import math
from collections.abc import Hashable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .fl import (
    Dataset, ElapsedVerdict, EmptyAccepted, Lazy, LocalUpdate, ModelState, RoniVerdict, WorkerProfile,
    aggregate, elapsed_check, evaluate, init_model, local_sgd, roni_filter,
)
from .fl.data import rng_for
from .fl.model import correct_count
from .ledger import CommitFailure, InteractionSummary, LedgerError, ReputationLedger
from .opinion import (
    VACUOUS, AllZeroWeights, InteractionRecord, Opinion, Outcome, ReputationScore, WeightConfig,
    combine_opinions, frequency_weight, fuse_recommended, local_opinion, mean_link_failure,
    reputation_value, weighted_counts,
)

logger = logging.getLogger(__name__)

INITIAL_TRUST = 0.5


class Scheme(enum.Enum):
    MSL = "MSL"
    TSL = "TSL"
    ATV = "ATV"
    NODEFENSE = "NoDefense"

    @classmethod
    def parse(cls, name: str) -> Scheme:
        for s in cls:
            if s.value.lower() == name.lower() or s.name.lower() == name.lower():
                return s
        raise ValueError(f"unknown scheme {name!r}")

    @property
    def screens(self) -> bool:
        return self is not Scheme.NODEFENSE


class NoEligibleWorkers(RuntimeError):
    pass


class NoEvents(ValueError):
    pass


class LedgerUpdateFailed(CommitFailure):
    """Opinion commit failed after training; the finished report is attached."""

    def __init__(self, message: str, report: TaskReport):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    publisher_id: str
    min_data_size: int = 0
    reputation_threshold: float = 0.5
    rounds: int = 30
    scheme: Scheme = Scheme.MSL
    # False: detectors still judge and record every update, but aggregation uses all of them
    screen_updates: bool = True

    def __post_init__(self) -> None:
        if not (0.0 <= self.reputation_threshold <= 1.0):
            raise ValueError("reputation_threshold must be in [0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.min_data_size < 0:
            raise ValueError("min_data_size must be non-negative")


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 32
    local_batches: int = 5
    lr: float = 0.3
    lr_decay: bool = False
    compute_rate: float = 1.0
    elapsed_tolerance: float = 0.1
    roni_epsilon: float = 0.02
    link_failure_low: float = 0.0
    link_failure_high: float = 0.4
    init_scale: float = 0.01

    def lr_at(self, round_no: int) -> float:
        return self.lr / math.sqrt(round_no) if self.lr_decay else self.lr


@dataclass
class TaskEnvironment:
    """Everything a publisher brings to a task besides the roster."""

    validation: Dataset
    test: Dataset
    training: TrainingConfig = field(default_factory=TrainingConfig)
    weights: WeightConfig = field(default_factory=WeightConfig)
    frequency_window: int | None = None
    publisher_weights: Mapping[str, float] = field(default_factory=dict)
    atv_scale: float = 0.1


@dataclass
class SchemeState:
    histories: dict[tuple[Hashable, Hashable], list[InteractionRecord]] = field(default_factory=dict)
    trust: dict[Hashable, float] = field(default_factory=dict)
    clock: int = 0

    def history(self, publisher, worker) -> list[InteractionRecord]:
        return self.histories.get((publisher, worker), [])

    def record(self, rec: InteractionRecord) -> None:
        hist = self.histories.setdefault((rec.publisher_id, rec.worker_id), [])
        if hist and rec.task_index < hist[-1].task_index:
            raise ValueError("interaction records must arrive in task order")
        hist.append(rec)

    def trust_value(self, worker) -> float:
        return self.trust.get(worker, INITIAL_TRUST)

    def n_records(self) -> int:
        return sum(len(h) for h in self.histories.values())


@dataclass(frozen=True)
class RoundLog:
    round: int
    accepted: tuple[str, ...]
    rejected: tuple[str, ...]
    lazy: tuple[str, ...]
    skipped: bool = False


@dataclass
class TaskReport:
    task_id: str
    publisher_id: str
    scheme: Scheme
    task_index: int
    threshold: float
    selected: list[str]
    scores: dict[str, float]
    final_accuracy: float
    rounds: list[RoundLog]
    outcome_counts: dict[str, tuple[int, int]]
    ledger_committed: bool | None = None

    REPORT_HEADER = ("task_id", "publisher", "scheme", "task_index", "round", "worker",
                     "verdict", "score", "final_accuracy")

    def rows(self) -> list[tuple]:
        """Flat records: one per (round, selected worker)."""
        out = []
        for log in self.rounds:
            verdicts = {w: "accept" for w in log.accepted}
            verdicts.update({w: "reject" for w in log.rejected})
            verdicts.update({w: "lazy" for w in log.lazy})
            for w in sorted(verdicts):
                out.append((self.task_id, self.publisher_id, self.scheme.value, self.task_index,
                            log.round, w, verdicts[w], f"{self.scores.get(w, float('nan')):.6f}",
                            f"{self.final_accuracy:.6f}"))
        return out


@dataclass
class TrainingResult:
    model: ModelState
    accuracy: float
    rounds: list[RoundLog]
    verdicts: dict[str, list[bool]]  # worker -> per-round positive flags


# -- stage helpers -----------------------------------------------------------

def admit_candidates(spec: TaskSpec, candidates: Sequence[WorkerProfile]) -> list[str]:
    return [p.worker_id for p in candidates
            if p.shard is not None and len(p.shard) >= spec.min_data_size]


def select_workers(spec: TaskSpec, admitted: Iterable[str], scores: Mapping[str, float]) -> list[str]:
    admitted = list(admitted)
    missing = [w for w in admitted if w not in scores]
    if missing:
        raise KeyError(f"no score for {missing}")
    chosen = [w for w in admitted if scores[w] >= spec.reputation_threshold]
    if not chosen:
        raise NoEligibleWorkers(
            f"task {spec.task_id}: no candidate at or above {spec.reputation_threshold}")
    return sorted(chosen, key=lambda w: (-scores[w], w))


def atv_update(state: SchemeState, worker, pos_count: int, neg_count: int, weight: float,
               scale: float = 0.1) -> float:
    """Add a weighted trust offset ``(pos - neg) / (pos + neg)`` and clamp to [0, 1]."""
    total = pos_count + neg_count
    if total <= 0:
        raise NoEvents(f"no interaction events for {worker}")
    if not (0.0 < weight <= 1.0):
        raise ValueError("weight must be in (0, 1]")
    offset = (pos_count - neg_count) / total
    value = min(1.0, max(0.0, state.trust_value(worker) + weight * offset * scale))
    state.trust[worker] = value
    return value


def _recommender_weight(ledger: ReputationLedger, recommender: str, worker: str,
                        task_index: int, now: int, cfg: WeightConfig,
                        frequency_window: int | None, counts_cache: dict) -> float:
    counts = counts_cache.get(recommender)
    if counts is None:
        since = None if frequency_window is None else now - frequency_window + 1
        counts = counts_cache[recommender] = ledger.tx_counts(recommender, since=since)
    others = [c for w, c in counts.items() if w != worker]
    mean_others = sum(others) / len(others) if others else 0.0
    return frequency_weight(counts.get(worker, 0), mean_others) * cfg.timeliness(task_index, now)


def composite_reputation(publisher: str, worker: str, ledger: ReputationLedger,
                         history: Sequence[InteractionRecord], cfg: WeightConfig, now: int, *,
                         frequency_window: int | None = None,
                         uniform_recommenders: bool = False,
                         _counts_cache: dict | None = None) -> ReputationScore:
    """Combine the publisher's local opinion with recommendations from the ledger.

    Each other publisher's latest opinion is weighted by its interaction
    frequency with the worker and by how recent the opinion is, unless
    ``uniform_recommenders`` is set. With no usable recommendation the
    local opinion stands alone.
    """
    if not ledger.verify():
        raise LedgerError(f"ledger fails verification at block {ledger.first_bad()}")
    local = local_opinion(history, now, cfg, mean_link_failure(history))
    recs = {p: v for p, v in ledger.latest_opinions(worker).items() if p != publisher}
    cache = {} if _counts_cache is None else _counts_cache
    weighted = []
    for rec_pub in sorted(recs):
        op, ti = recs[rec_pub]
        if uniform_recommenders:
            w = 1.0
        else:
            w = _recommender_weight(ledger, rec_pub, worker, ti, now, cfg, frequency_window, cache)
        weighted.append((op, w))
    try:
        recommended = fuse_recommended(weighted)
    except AllZeroWeights:
        recommended = VACUOUS
    final = combine_opinions(local, recommended)
    return ReputationScore(worker, reputation_value(final, cfg.gamma), final, now)


def tsl_reputation(publisher: str, worker: str, ledger: ReputationLedger,
                   history: Sequence[InteractionRecord], now: int, gamma: float = 0.5,
                   recency_window: int = 3) -> ReputationScore:
    return composite_reputation(publisher, worker, ledger, history,
                                WeightConfig.traditional(gamma, recency_window), now,
                                uniform_recommenders=True)


def scheme_weights(scheme: Scheme, env: TaskEnvironment) -> WeightConfig:
    if scheme is Scheme.TSL:
        return WeightConfig.traditional(env.weights.gamma, env.weights.recency_window)
    return env.weights


def score_workers(scheme: Scheme, publisher: str, workers: Iterable[str],
                  ledger: ReputationLedger | None, state: SchemeState, env: TaskEnvironment,
                  now: int) -> dict[str, float]:
    workers = list(workers)
    if scheme in (Scheme.ATV, Scheme.NODEFENSE):
        return {w: state.trust_value(w) for w in workers}
    cache: dict = {}
    out = {}
    for w in workers:
        hist = state.history(publisher, w)
        if scheme is Scheme.TSL:
            s = tsl_reputation(publisher, w, ledger, hist, now, env.weights.gamma,
                               env.weights.recency_window)
        else:
            s = composite_reputation(publisher, w, ledger, hist, env.weights, now,
                                     frequency_window=env.frequency_window, _counts_cache=cache)
        out[w] = s.value
    return out


def _round_seed(seed: int, round_no: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, round_no]).generate_state(1)[0])


def train_task(profiles: Sequence[WorkerProfile], env: TaskEnvironment, rounds: int, seed: int,
               *, screen: bool = True, filter_updates: bool = True) -> TrainingResult:
    """Federated training with optional update screening.

    With ``screen`` the elapsed-time check runs first and RONI judges the
    survivors; every worker gets one verdict per round. ``filter_updates``
    decides whether rejected updates are left out of the average.
    """
    tc = env.training
    shard0 = profiles[0].shard
    model = init_model(shard0.n_classes, shard0.n_features, seed, tc.init_scale)
    logs = []
    verdicts: dict[str, list[bool]] = {p.worker_id: [] for p in profiles}
    for r in range(1, rounds + 1):
        rseed = _round_seed(seed, r)
        lr = tc.lr_at(r)
        updates: list[LocalUpdate] = []
        for p in profiles:
            frac = p.behavior.fraction_trained if isinstance(p.behavior, Lazy) else 1.0
            updates.append(local_sgd(model, p.shard, tc.batch_size, tc.local_batches, lr, rseed,
                                     worker_id=p.worker_id, compute_rate=tc.compute_rate,
                                     fraction_trained=frac))
        accepted, rejected, lazy = [], [], []
        if screen:
            base = correct_count(model, env.validation)
            for u in updates:
                if elapsed_check(u, tc.compute_rate, tc.elapsed_tolerance) is ElapsedVerdict.LAZY:
                    lazy.append(u)
                elif roni_filter(model, u, env.validation, tc.roni_epsilon,
                                 baseline_correct=base) is RoniVerdict.REJECT:
                    rejected.append(u)
                else:
                    accepted.append(u)
        else:
            accepted = list(updates)
        ok_ids = {u.worker_id for u in accepted}
        for p in profiles:
            verdicts[p.worker_id].append(p.worker_id in ok_ids)
        pool = accepted if filter_updates else updates
        skipped = False
        try:
            model = aggregate(model, pool)
        except EmptyAccepted:
            logger.info("round %d: no accepted update, global model unchanged", r)
            skipped = True
        logs.append(RoundLog(r, tuple(sorted(ok_ids)),
                             tuple(sorted(u.worker_id for u in rejected)),
                             tuple(sorted(u.worker_id for u in lazy)), skipped))
    return TrainingResult(model, evaluate(model, env.test), logs, verdicts)


def record_outcomes(state: SchemeState, publisher: str, task_index: int, seed: int,
                    verdicts: Mapping[str, Sequence[bool]], tc: TrainingConfig) -> None:
    """One record per worker per round; link failure drawn per record."""
    for w in sorted(verdicts):
        flags = verdicts[w]
        link = rng_for(seed, "link", w).uniform(tc.link_failure_low, tc.link_failure_high,
                                                size=len(flags))
        for ok, u in zip(flags, link):
            state.record(InteractionRecord(publisher, w, task_index,
                                           Outcome.POSITIVE if ok else Outcome.NEGATIVE,
                                           float(u)))


def publish_opinions(ledger: ReputationLedger, state: SchemeState, publisher: str,
                     workers: Iterable[str], cfg: WeightConfig, now: int) -> None:
    txs = []
    for w in sorted(workers):
        hist = state.history(publisher, w)
        op = local_opinion(hist, now, cfg, mean_link_failure(hist))
        alpha, beta = weighted_counts(hist, now, cfg)
        txs.append(ledger.sign(publisher, w, op, InteractionSummary(alpha, beta, now)))
    if txs:
        ledger.commit(txs)


def prepare_task(spec: TaskSpec, profiles: Sequence[WorkerProfile], ledger: ReputationLedger | None,
                 state: SchemeState, env: TaskEnvironment) -> tuple[int, list[str], dict[str, float]]:
    """Advance the clock, admit candidates, score and select them.

    Returns ``(task_index, selected, scores)``. NoDefense selects every
    admitted candidate regardless of the threshold.
    """
    state.clock += 1
    now = state.clock
    admitted = admit_candidates(spec, profiles)
    scores = score_workers(spec.scheme, spec.publisher_id, admitted, ledger, state, env, now)
    if spec.scheme is Scheme.NODEFENSE:
        if not admitted:
            raise NoEligibleWorkers(f"task {spec.task_id}: no admitted candidate")
        return now, sorted(admitted), scores
    return now, select_workers(spec, admitted, scores), scores


def settle_task(spec: TaskSpec, ledger: ReputationLedger | None, state: SchemeState,
                env: TaskEnvironment, now: int, selected: Sequence[str], scores: dict[str, float],
                result: TrainingResult, seed: int) -> TaskReport:
    """Record per-round outcomes and update the scheme's reputation store."""
    record_outcomes(state, spec.publisher_id, now, seed, result.verdicts, env.training)
    counts = {w: (sum(v), len(v) - sum(v)) for w, v in result.verdicts.items()}
    report = TaskReport(spec.task_id, spec.publisher_id, spec.scheme, now,
                        spec.reputation_threshold, list(selected), scores, result.accuracy,
                        result.rounds, counts)
    if spec.scheme in (Scheme.ATV, Scheme.NODEFENSE):
        weight = env.publisher_weights.get(spec.publisher_id, 1.0)
        for w in selected:
            atv_update(state, w, *counts[w], weight=weight, scale=env.atv_scale)
    elif ledger is not None:
        try:
            publish_opinions(ledger, state, spec.publisher_id, selected,
                             scheme_weights(spec.scheme, env), now)
            report.ledger_committed = True
        except CommitFailure as exc:
            report.ledger_committed = False
            logger.warning("task %s: ledger update failed: %s", spec.task_id, exc)
            raise LedgerUpdateFailed(str(exc), report) from exc
    return report


def run_task(spec: TaskSpec, profiles: Sequence[WorkerProfile], ledger: ReputationLedger | None,
             state: SchemeState, seed: int, env: TaskEnvironment) -> TaskReport:
    """Run one task end to end and update reputation state.

    The task takes the next index of ``state.clock``. MSL and TSL publish a
    fresh local opinion per selected worker to ``ledger``; ATV and NoDefense
    update the per-worker trust accumulator in ``state``.
    """
    now, selected, scores = prepare_task(spec, profiles, ledger, state, env)
    by_id = {p.worker_id: p for p in profiles}
    result = train_task([by_id[w] for w in selected], env, spec.rounds, seed,
                        screen=spec.scheme.screens, filter_updates=spec.screen_updates)
    return settle_task(spec, ledger, state, env, now, selected, scores, result, seed)


def opinion_of(ledger: ReputationLedger, publisher: str, worker: str) -> Opinion | None:
    entry = ledger.latest_opinions(worker).get(publisher)
    return None if entry is None else entry[0]
