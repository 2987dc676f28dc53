"""In-process consortium ledger for reputation opinions.

Publishers sign opinion transactions with a keyed hash (HMAC-SHA256 over a
canonical binary serialization). Pending transactions are batched into
hash-chained blocks that a simulated miner set commits with a three-phase,
vote-counting PBFT round. Digests are SHA-256 throughout, so a chain built
from the same inputs is bit-identical across runs.

Chain files are line-delimited JSON: a header line carrying the publisher
key registry, then one block per line with hex digests.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import json
import logging
import struct
import threading
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .opinion import Opinion

logger = logging.getLogger(__name__)

DIGEST_SIZE = 32
GENESIS_PREV = bytes(DIGEST_SIZE)
CHAIN_FORMAT = "fedtrust-chain"
CHAIN_VERSION = 1


class LedgerError(Exception):
    pass


class UnknownPublisher(LedgerError):
    pass


class InvalidTx(LedgerError):
    pass


class CommitFailure(LedgerError):
    pass


class ChainFormatError(LedgerError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


# -- canonical serialization -------------------------------------------------

def _enc_str(s: str) -> bytes:
    raw = s.encode("utf-8", "surrogateescape")
    return struct.pack(">I", len(raw)) + raw


def _enc_int(i: int) -> bytes:
    return struct.pack(">q", i)


def _enc_float(x: float) -> bytes:
    return struct.pack(">d", x)


def _enc_bytes(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


@dataclass(frozen=True)
class InteractionSummary:
    alpha_eff: float
    beta_eff: float
    task_index: int


@dataclass(frozen=True)
class OpinionTx:
    publisher_id: str
    worker_id: str
    opinion: Opinion
    summary: InteractionSummary
    signature: bytes = b""

    def content_bytes(self) -> bytes:
        op, s = self.opinion, self.summary
        return b"".join([
            b"OTX1",
            _enc_str(self.publisher_id),
            _enc_str(self.worker_id),
            _enc_float(op.belief), _enc_float(op.distrust), _enc_float(op.uncertainty),
            _enc_float(s.alpha_eff), _enc_float(s.beta_eff), _enc_int(s.task_index),
        ])

    def to_bytes(self) -> bytes:
        return self.content_bytes() + _enc_bytes(self.signature)


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    txs: tuple[OpinionTx, ...]
    proposer: str
    block_hash: bytes

    @staticmethod
    def compute_hash(height: int, prev_hash: bytes, txs: Sequence[OpinionTx],
                     proposer: str) -> bytes:
        h = hashlib.sha256()
        h.update(b"BLK1")
        h.update(_enc_int(height))
        h.update(_enc_bytes(prev_hash))
        h.update(_enc_int(len(txs)))
        for tx in txs:
            h.update(_enc_bytes(tx.to_bytes()))
        h.update(_enc_str(proposer))
        return h.digest()

    @classmethod
    def build(cls, height: int, prev_hash: bytes, txs: Sequence[OpinionTx],
              proposer: str) -> Block:
        txs = tuple(txs)
        return cls(height, prev_hash, txs, proposer,
                   cls.compute_hash(height, prev_hash, txs, proposer))

    def hash_ok(self) -> bool:
        return hmac.compare_digest(
            self.block_hash,
            self.compute_hash(self.height, self.prev_hash, self.txs, self.proposer))


def genesis_block() -> Block:
    return Block.build(0, GENESIS_PREV, (), "genesis")


# -- signatures --------------------------------------------------------------

def sign_tx(tx: OpinionTx, key: bytes) -> OpinionTx:
    sig = hmac.new(key, tx.content_bytes(), hashlib.sha256).digest()
    return OpinionTx(tx.publisher_id, tx.worker_id, tx.opinion, tx.summary, sig)


def verify_tx(tx: OpinionTx, key: bytes | None) -> bool:
    if key is None:
        return False
    expected = hmac.new(key, tx.content_bytes(), hashlib.sha256).digest()
    return hmac.compare_digest(expected, tx.signature)


def derive_key(seed: int, publisher_id: str) -> bytes:
    """Deterministic per-publisher key so that seeded runs reproduce chains."""
    return hashlib.sha256(f"fedtrust-key:{seed}:{publisher_id}".encode()).digest()


# -- miners and PBFT ---------------------------------------------------------

class MinerFault(enum.Enum):
    ABSTAIN = "abstain"
    EQUIVOCATE = "equivocate"


@dataclass(frozen=True)
class MinerSet:
    miners: tuple[str, ...]
    faulty: Mapping[str, MinerFault] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.miners) < 1:
            raise ValueError("miner set is empty")
        if len(set(self.miners)) != len(self.miners):
            raise ValueError("duplicate miner ids")
        unknown = set(self.faulty) - set(self.miners)
        if unknown:
            raise ValueError(f"faulty miners not in set: {sorted(unknown)}")

    @classmethod
    def of_size(cls, n: int, faulty: Iterable[int] = (),
                fault: MinerFault = MinerFault.ABSTAIN) -> MinerSet:
        ids = tuple(f"miner-{i}" for i in range(n))
        return cls(ids, {ids[i]: fault for i in faulty})

    @property
    def f(self) -> int:
        return (len(self.miners) - 1) // 3

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    @property
    def honest(self) -> tuple[str, ...]:
        return tuple(m for m in self.miners if m not in self.faulty)


def _vote(miner: str, miners: MinerSet, digest: bytes, phase: bytes) -> bytes | None:
    fault = miners.faulty.get(miner)
    if fault is MinerFault.ABSTAIN:
        return None
    if fault is MinerFault.EQUIVOCATE:
        return hashlib.sha256(phase + miner.encode() + digest).digest()
    return digest


def pbft_commit(chain: list[Block], pending: Sequence[OpinionTx], miners: MinerSet,
                proposer: str, keys: Mapping[str, bytes]) -> Block:
    """Run one pre-prepare/prepare/commit round and append the block.

    Votes are counted rather than exchanged: a faulty miner either abstains
    or votes for a different digest. The block is appended iff at least
    ``2f + 1`` miners send matching commit votes; otherwise ``chain`` is left
    untouched and :class:`CommitFailure` is raised.
    """
    if proposer not in miners.miners:
        raise ValueError(f"proposer {proposer!r} is not a miner")
    if not pending:
        raise ValueError("nothing to commit")
    for tx in pending:
        if not verify_tx(tx, keys.get(tx.publisher_id)):
            raise InvalidTx(f"bad signature on tx {tx.publisher_id}->{tx.worker_id}")

    tip = chain[-1]
    candidate = Block.build(tip.height + 1, tip.block_hash, pending, proposer)
    digest = candidate.block_hash

    # pre-prepare: every miner receives the candidate and checks it independently
    prepares = {}
    for m in miners.miners:
        if m in miners.faulty:
            prepares[m] = _vote(m, miners, digest, b"prepare")
            continue
        valid = (candidate.prev_hash == tip.block_hash and candidate.hash_ok()
                 and all(verify_tx(tx, keys.get(tx.publisher_id)) for tx in candidate.txs))
        prepares[m] = digest if valid else None
    n_prepare = sum(1 for v in prepares.values() if v == digest)

    commits = {}
    for m in miners.miners:
        if m in miners.faulty:
            commits[m] = _vote(m, miners, digest, b"commit")
        else:
            # an honest miner is prepared once it has seen a prepare quorum
            commits[m] = digest if (prepares[m] == digest and n_prepare >= miners.quorum) else None
    n_commit = sum(1 for v in commits.values() if v == digest)

    if n_commit < miners.quorum:
        logger.info("commit failed at height %d: %d/%d commit votes",
                    candidate.height, n_commit, miners.quorum)
        raise CommitFailure(f"{n_commit} commit votes, quorum is {miners.quorum}")
    chain.append(candidate)
    return candidate


# -- verification and queries ------------------------------------------------

def _opinion_ok(op: Opinion) -> bool:
    try:
        Opinion(op.belief, op.distrust, op.uncertainty)
    except (ValueError, TypeError):
        return False
    return True


def first_bad_block(chain: Sequence[Block], keys: Mapping[str, bytes]) -> int | None:
    """Index of the first block that fails verification, or None."""
    if not chain:
        return 0
    for i, blk in enumerate(chain):
        if blk.height != i:
            return i
        expected_prev = GENESIS_PREV if i == 0 else chain[i - 1].block_hash
        if blk.prev_hash != expected_prev or not blk.hash_ok():
            return i
        for tx in blk.txs:
            if not _opinion_ok(tx.opinion) or not verify_tx(tx, keys.get(tx.publisher_id)):
                return i
    return None


def verify_chain(chain: Sequence[Block], keys: Mapping[str, bytes]) -> bool:
    return first_bad_block(chain, keys) is None


def latest_opinions(chain: Sequence[Block], worker_id: str) -> dict[str, tuple[Opinion, int]]:
    """Most recent opinion per publisher about ``worker_id``.

    Later task index wins; ties go to the later block, then the later
    position inside the block.
    """
    best: dict[str, tuple[Opinion, int]] = {}
    for blk in chain:
        for tx in blk.txs:
            if tx.worker_id != worker_id:
                continue
            prev = best.get(tx.publisher_id)
            if prev is None or tx.summary.task_index >= prev[1]:
                best[tx.publisher_id] = (tx.opinion, tx.summary.task_index)
    return best


# -- ledger state machine ----------------------------------------------------

class ReputationLedger:
    """Single-writer ledger: commits serialize through one lock."""

    def __init__(self, miners: MinerSet | None = None,
                 keys: Mapping[str, bytes] | None = None,
                 chain: Sequence[Block] | None = None):
        self.miners = miners or MinerSet.of_size(4)
        self.keys: dict[str, bytes] = dict(keys or {})
        self.chain: list[Block] = list(chain) if chain else [genesis_block()]
        self._lock = threading.Lock()
        self._verified = 0
        # worker -> publisher -> [(task_index, height, pos, tx)]
        self._index: dict[str, dict[str, list[tuple[int, int, int, OpinionTx]]]] = {}
        if chain:
            if not self.verify():
                raise LedgerError(f"chain fails verification at block {self.first_bad()}")
        for blk in self.chain:
            self._index_block(blk)

    def register_publisher(self, publisher_id: str, key: bytes) -> None:
        self.keys[publisher_id] = key

    def sign(self, publisher_id: str, worker_id: str, opinion: Opinion,
             summary: InteractionSummary) -> OpinionTx:
        key = self.keys.get(publisher_id)
        if key is None:
            raise UnknownPublisher(publisher_id)
        return sign_tx(OpinionTx(publisher_id, worker_id, opinion, summary), key)

    def commit(self, pending: Sequence[OpinionTx], proposer: str | None = None) -> Block:
        with self._lock:
            if proposer is None:
                proposer = self.miners.miners[len(self.chain) % len(self.miners.miners)]
            blk = pbft_commit(self.chain, pending, self.miners, proposer, self.keys)
            self._verified = len(self.chain)
            self._index_block(blk)
            return blk

    def _index_block(self, blk: Block) -> None:
        for pos, tx in enumerate(blk.txs):
            (self._index.setdefault(tx.worker_id, {})
             .setdefault(tx.publisher_id, [])
             .append((tx.summary.task_index, blk.height, pos, tx)))

    def verify(self, full: bool = False) -> bool:
        """Verify the chain.

        Blocks appended through :meth:`commit` are checked on entry, so unless
        ``full`` is set a clean ledger is not re-hashed on every query.
        """
        if not full and self._verified and self._verified == len(self.chain):
            return True
        ok = verify_chain(self.chain, self.keys)
        if ok:
            self._verified = len(self.chain)
        return ok

    def first_bad(self) -> int | None:
        return first_bad_block(self.chain, self.keys)

    @property
    def height(self) -> int:
        return self.chain[-1].height

    def latest_opinions(self, worker_id: str) -> dict[str, tuple[Opinion, int]]:
        out = {}
        for pub, entries in self._index.get(worker_id, {}).items():
            ti, _, _, tx = max(entries, key=lambda e: e[:3])
            out[pub] = (tx.opinion, ti)
        return out

    def tx_counts(self, publisher_id: str, since: int | None = None) -> dict[str, int]:
        """Number of transactions ``publisher_id`` wrote about each worker.

        Only transactions with ``task_index >= since`` are counted when
        ``since`` is given.
        """
        counts = {}
        for worker, pubs in self._index.items():
            n = sum(1 for e in pubs.get(publisher_id, ()) if since is None or e[0] >= since)
            if n:
                counts[worker] = n
        return counts

    def export(self, path: str | Path) -> None:
        write_chain(path, self.chain, self.keys)

    @classmethod
    def load(cls, path: str | Path, miners: MinerSet | None = None) -> ReputationLedger:
        chain, keys = read_chain(path)
        return cls(miners=miners, keys=keys, chain=chain)


# -- chain files -------------------------------------------------------------

def _tx_to_dict(tx: OpinionTx) -> dict:
    return {
        "publisher": tx.publisher_id,
        "worker": tx.worker_id,
        "opinion": [tx.opinion.belief, tx.opinion.distrust, tx.opinion.uncertainty],
        "alpha_eff": tx.summary.alpha_eff,
        "beta_eff": tx.summary.beta_eff,
        "task_index": tx.summary.task_index,
        "signature": tx.signature.hex(),
    }


def block_to_dict(blk: Block) -> dict:
    return {
        "height": blk.height,
        "prev_hash": blk.prev_hash.hex(),
        "proposer": blk.proposer,
        "txs": [_tx_to_dict(tx) for tx in blk.txs],
        "block_hash": blk.block_hash.hex(),
    }


class _UncheckedOpinion(Opinion):
    """Opinion loaded from disk; validity is judged by verification, not on load."""

    def __post_init__(self) -> None:
        pass


def block_from_dict(d: Mapping) -> Block:
    txs = []
    for t in d["txs"]:
        b, dis, u = (float(x) for x in t["opinion"])
        try:
            op = Opinion(b, dis, u)
        except ValueError:
            op = _UncheckedOpinion(b, dis, u)
        txs.append(OpinionTx(
            str(t["publisher"]), str(t["worker"]), op,
            InteractionSummary(float(t["alpha_eff"]), float(t["beta_eff"]), int(t["task_index"])),
            bytes.fromhex(t["signature"]),
        ))
    return Block(int(d["height"]), bytes.fromhex(d["prev_hash"]), tuple(txs),
                 str(d["proposer"]), bytes.fromhex(d["block_hash"]))


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_chain(path: str | Path, chain: Sequence[Block], keys: Mapping[str, bytes]) -> None:
    header = {"format": CHAIN_FORMAT, "version": CHAIN_VERSION,
              "keys": {p: k.hex() for p, k in sorted(keys.items())}}
    lines = [_dumps(header)] + [_dumps(block_to_dict(b)) for b in chain]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_chain(path: str | Path) -> tuple[list[Block], dict[str, bytes]]:
    """Parse a chain file. Raises OSError for IO problems, ChainFormatError otherwise."""
    text = Path(path).read_text(encoding="utf-8", errors="surrogateescape")
    lines = text.splitlines()
    if not lines:
        raise ChainFormatError("empty chain file", line=1)
    try:
        header = json.loads(lines[0])
        if header.get("format") != CHAIN_FORMAT:
            raise ChainFormatError("not a chain file", line=1)
        keys = {str(p): bytes.fromhex(k) for p, k in header["keys"].items()}
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise ChainFormatError(f"bad header: {exc}", line=1) from exc
    chain = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            chain.append(block_from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise ChainFormatError(f"malformed block: {exc}", line=lineno) from exc
    return chain, keys
