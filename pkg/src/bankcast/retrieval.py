"""Time-aware memory bank and retrieval.

Bank entries are (context, true history, future, hour) windows from a source
train split. Queries and keys share one encoder that fuses a context branch
with a temporal branch (history concatenated with an hour embedding) and
normalizes the output to the unit sphere. Retrieval filters candidates to the
query's hour, scores by inner product, keeps the top K (ties to the smaller
entry index), softmax-weights them, and averages the stored futures into a
prior.

Scoring and selection run against the bank's cached key matrix; only the
alignment loss re-encodes its selected entries so gradients can reach the
key-side encoder.
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import numerics
from .autodiff import ParamStore, Var
from .backbone import glorot
from .data import ForecastInstance
from .errors import DataError, VersionMismatchError


@dataclass
class BankEntry:
    region_id: int
    anchor: int
    context: np.ndarray  # (d_c,)
    history: np.ndarray  # (W,) true, unmasked, raw scale
    future: np.ndarray  # (H,) raw scale
    hour: int


@dataclass
class RetrieverParams:
    context_proj: Var  # (d_ec, d_c)
    temporal_proj: Var  # (d_ex, W + d_h)
    hour_table: Var  # (24, d_h)
    psi_w1: Var  # (psi_hidden, d_ec + d_ex)
    psi_b1: Var
    psi_w2: Var  # (d_r, psi_hidden)
    psi_b2: Var

    @classmethod
    def init(cls, cfg, rng: np.random.Generator, store: ParamStore) -> "RetrieverParams":
        return cls(
            context_proj=store.register("retriever.context_proj", glorot(rng, cfg.d_ec, cfg.d_c)),
            temporal_proj=store.register(
                "retriever.temporal_proj", glorot(rng, cfg.d_ex, cfg.window + cfg.d_h)
            ),
            hour_table=store.register(
                "retriever.hour_table", rng.normal(0.0, 0.1, size=(24, cfg.d_h))
            ),
            psi_w1=store.register(
                "retriever.psi.w1", glorot(rng, cfg.psi_hidden, cfg.d_ec + cfg.d_ex)
            ),
            psi_b1=store.register("retriever.psi.b1", np.zeros((1, cfg.psi_hidden))),
            psi_w2=store.register("retriever.psi.w2", glorot(rng, cfg.d_r, cfg.psi_hidden)),
            # nonzero output bias: a dead ReLU row must not reach the
            # normalizer with an exactly-zero embedding
            psi_b2=store.register("retriever.psi.b2", rng.normal(0.0, 0.05, size=(1, cfg.d_r))),
        )


def encode_retrieval(contexts: Var, histories: Var, hours, params: RetrieverParams) -> Var:
    """Joint context-and-dynamics embedding, one unit-norm row per input row.

    The same map serves queries (masked histories allowed, including all-zero)
    and keys (true histories).
    """
    hours = np.asarray(hours, dtype=np.intp)
    if np.any(hours < 0) or np.any(hours >= 24):
        raise ValueError("hour indices must lie in [0, 24)")
    e_ctx = ad.matmul(contexts, ad.transpose(params.context_proj))
    e_hour = ad.take_rows(params.hour_table, hours)
    e_dyn = ad.matmul(ad.concat([histories, e_hour], axis=1), ad.transpose(params.temporal_proj))
    z = ad.concat([e_ctx, e_dyn], axis=1)
    h = ad.relu(ad.add(ad.matmul(z, ad.transpose(params.psi_w1)), params.psi_b1))
    out = ad.add(ad.matmul(h, ad.transpose(params.psi_w2)), params.psi_b2)
    return ad.l2_normalize_rows(out)


# ---------------------------------------------------------------------------
# the bank


class MemoryBank:
    """Ordered entries plus cached unit-norm key embeddings, partitioned by hour."""

    def __init__(self, entries: list[BankEntry]):
        if not entries:
            raise DataError("memory bank must contain at least one entry")
        self.entries = entries
        self.contexts = np.stack([e.context for e in entries])
        self.histories = np.stack([e.history for e in entries])
        self.futures = np.stack([e.future for e in entries])
        self.hours = np.array([e.hour for e in entries], dtype=np.intp)
        self.hour_index: dict[int, np.ndarray] = {
            h: np.flatnonzero(self.hours == h) for h in range(24)
        }
        # position of each entry inside its hour bucket, for O(1) self-exclusion
        self.pos_in_hour = np.empty(len(entries), dtype=np.intp)
        for idx in self.hour_index.values():
            self.pos_in_hour[idx] = np.arange(idx.size)
        self.entry_lookup = {
            (e.anchor, e.region_id): i for i, e in enumerate(entries)
        }
        self.keys: np.ndarray | None = None
        self.hour_keys: dict[int, np.ndarray] = {}
        self.encoder_version: str | None = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def horizon(self) -> int:
        return self.futures.shape[1]

    def refresh_keys(self, encode_fn, encoder_version: str) -> None:
        """Recompute all key embeddings (retriever parameters drift during training)."""
        keys = np.asarray(encode_fn(self.contexts, self.histories, self.hours))
        if keys.shape[0] != len(self.entries):
            raise DataError("encoder returned wrong number of keys")
        self.install_keys(keys, encoder_version)

    def install_keys(self, keys: np.ndarray, encoder_version: str) -> None:
        norms = np.linalg.norm(keys, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise DataError("bank keys must be unit-norm")
        self.keys = keys
        self.hour_keys = {h: keys[idx] for h, idx in self.hour_index.items() if idx.size}
        self.encoder_version = encoder_version

    def entry_checksum(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(np.int64(e.region_id).tobytes())
            h.update(np.int64(e.anchor).tobytes())
            h.update(np.int64(e.hour).tobytes())
            h.update(e.context.tobytes())
            h.update(e.history.tobytes())
            h.update(e.future.tobytes())
        return h.hexdigest()


def build_bank(
    instances: list[ForecastInstance],
    region_ids: list[int],
    contexts: np.ndarray,
    encode_fn=None,
    encoder_version: str = "",
) -> MemoryBank:
    """One entry per (train window, observable region), ordered by (anchor, region id).

    `contexts` is the full (N, d_c) context matrix indexed by region id;
    `region_ids` restricts entries to regions observable in the source split.
    """
    ids = sorted(region_ids)
    entries = []
    for inst in sorted(instances, key=lambda fi: fi.t):
        for rid in ids:
            entries.append(
                BankEntry(
                    region_id=rid,
                    anchor=inst.t,
                    context=contexts[rid].copy(),
                    history=inst.history[:, rid].copy(),
                    future=inst.future[:, rid].copy(),
                    hour=inst.hour,
                )
            )
    bank = MemoryBank(entries)
    if encode_fn is not None:
        bank.refresh_keys(encode_fn, encoder_version)
    return bank


# ---------------------------------------------------------------------------
# retrieval


@dataclass
class RetrievalRow:
    """Selected entries for one region: indices, normalized weights, future prior."""

    indices: np.ndarray  # entry indices into the bank, <= K of them
    weights: np.ndarray  # same length, nonnegative, sums to 1
    prior: np.ndarray  # (H,) weighted average of stored futures, raw scale
    valid: bool  # False when the hour bucket had no candidates


RetrievalResult = list[RetrievalRow]


def _excluded_position(bank: MemoryBank, hour: int, exclude: tuple[int, int] | None) -> int:
    """Position of the excluded entry inside the hour bucket, or -1."""
    if exclude is None:
        return -1
    eidx = bank.entry_lookup.get((exclude[0], exclude[1]))
    if eidx is None or bank.hours[eidx] != hour:
        return -1
    return int(bank.pos_in_hour[eidx])


def _topk_from_scores(scores: np.ndarray, k: int, skip: int) -> np.ndarray:
    # stable argsort on -scores keeps ascending entry-index order among ties
    order = np.argsort(-scores, kind="stable")
    if skip >= 0:
        order = order[order != skip]
    return order[:k]


def select_top_entries(
    bank: MemoryBank,
    query: np.ndarray,
    hour: int,
    k: int,
    exclude: tuple[int, int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Top-k candidate entry indices and their scores; ties go to the smaller index."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if bank.keys is None:
        raise DataError("bank has no keys; call refresh_keys first")
    cand = bank.hour_index.get(hour, np.empty(0, dtype=np.intp))
    if cand.size == 0:
        return cand, np.empty(0)
    scores = bank.hour_keys[hour] @ query
    order = _topk_from_scores(scores, k, _excluded_position(bank, hour, exclude))
    return cand[order], scores[order]


def select_top_batch(
    bank: MemoryBank,
    queries: np.ndarray,
    hour: int,
    k: int,
    excludes: list[tuple[int, int] | None] | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """select_top_entries for many queries sharing one hour, with a single score GEMM."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if bank.keys is None:
        raise DataError("bank has no keys; call refresh_keys first")
    n = queries.shape[0]
    cand = bank.hour_index.get(hour, np.empty(0, dtype=np.intp))
    if cand.size == 0:
        return [(cand, np.empty(0))] * n
    all_scores = queries @ bank.hour_keys[hour].T
    out = []
    for i in range(n):
        exclude = excludes[i] if excludes is not None else None
        order = _topk_from_scores(all_scores[i], k, _excluded_position(bank, hour, exclude))
        out.append((cand[order], all_scores[i][order]))
    return out


def retrieve(
    query: np.ndarray,
    bank: MemoryBank,
    hour: int,
    k: int,
    temperature: float,
    exclude: tuple[int, int] | None = None,
) -> RetrievalRow:
    """Hour-filtered top-k retrieval with temperature-softmax weights and future prior."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    idx, scores = select_top_entries(bank, query, hour, k, exclude)
    if idx.size == 0:
        return RetrievalRow(
            indices=idx, weights=np.empty(0), prior=np.zeros(bank.horizon), valid=False
        )
    weights = numerics.row_softmax(scores[None, :], temperature)[0]
    prior = weights @ bank.futures[idx]
    return RetrievalRow(indices=idx, weights=weights, prior=prior, valid=True)


def future_nearest(bank: MemoryBank, candidate_idx: np.ndarray, true_future: np.ndarray) -> int:
    """Among candidates, the entry whose stored future is L2-closest to the target.

    Ties break to the smaller entry index.
    """
    diff = bank.futures[candidate_idx] - true_future[None, :]
    d2 = np.einsum("ij,ij->i", diff, diff)
    best = min(zip(d2, candidate_idx.tolist()))
    return int(best[1])


def future_nearest_batch(
    bank: MemoryBank, selected: list[np.ndarray], rows: list[int], true_futures: np.ndarray
) -> list[int]:
    """future_nearest for several regions at once; true_futures is (H, n) raw."""
    flat = np.concatenate([selected[i] for i in rows])
    counts = [selected[i].size for i in rows]
    rep = np.repeat(rows, counts)
    diff = bank.futures[flat] - true_futures.T[rep]
    d2 = np.einsum("ij,ij->i", diff, diff)
    best, off = [], 0
    for c in counts:
        seg = slice(off, off + c)
        best.append(int(min(zip(d2[seg], flat[seg].tolist()))[1]))
        off += c
    return best


def alignment_loss(queries: Var, keys: Var) -> Var:
    """Mean (1 - q . k) over matched rows of unit-norm queries and keys."""
    cos = ad.reduce_sum(ad.mul(queries, keys), axis=1, keepdims=True)
    return ad.mean(ad.sub(ad.constant(np.ones_like(cos.value)), cos))


# ---------------------------------------------------------------------------
# persistence (keys are never stored; they are recomputed from the checkpoint)


def save_bank(bank: MemoryBank, path: str | Path, config_hash: str | None = None) -> None:
    header = {
        "format": "bankcast-bank-v1",
        "encoder_version": bank.encoder_version,
        "entry_checksum": bank.entry_checksum(),
        "n_entries": len(bank),
    }
    if config_hash is not None:
        header["config_hash"] = config_hash
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for e in bank.entries:
            f.write(
                json.dumps(
                    {
                        "region_id": e.region_id,
                        "anchor": e.anchor,
                        "hour": e.hour,
                        "context": e.context.tolist(),
                        "history": e.history.tolist(),
                        "future": e.future.tolist(),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_bank(path: str | Path, expected_encoder_version: str | None = None) -> tuple[MemoryBank, dict]:
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError:
        raise DataError(f"bank file not found: {path}")
    if not lines:
        raise DataError(f"bank file {path} is empty")
    header = json.loads(lines[0])
    entries = []
    for line in lines[1:]:
        d = json.loads(line)
        entries.append(
            BankEntry(
                region_id=d["region_id"],
                anchor=d["anchor"],
                context=np.array(d["context"], dtype=np.float64),
                history=np.array(d["history"], dtype=np.float64),
                future=np.array(d["future"], dtype=np.float64),
                hour=d["hour"],
            )
        )
    bank = MemoryBank(entries)
    if header.get("n_entries") != len(bank):
        raise DataError(f"bank file {path} header disagrees with entry count")
    if bank.entry_checksum() != header.get("entry_checksum"):
        raise VersionMismatchError(f"bank file {path} content does not match its checksum")
    if (
        expected_encoder_version is not None
        and header.get("encoder_version") != expected_encoder_version
    ):
        raise VersionMismatchError(
            "bank was built with different retriever parameters than the checkpoint"
        )
    return bank, header
