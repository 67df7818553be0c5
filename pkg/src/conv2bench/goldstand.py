"""Gold-standard validation: stratified sampling of (response, requirement)
pairs, durable human label storage, and judge profiling against those labels.

Sampling is balanced across subject models (per-model counts differ by at
most one) so no architecture dominates the gold set.  Labels live in an
append-only log with periodic snapshot compaction; every committed label
survives a crash.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .judging import VerdictTable
from .stats import JudgeProfileMetrics, f1_profile
from .synthesis import Checklist

logger = logging.getLogger(__name__)

SUBSTANTIAL_KAPPA = 0.6


class GoldStandardError(Exception):
    pass


class ItemNotFound(GoldStandardError):
    pass


class ProfileError(GoldStandardError):
    pass


# ---------------------------------------------------------------------------
# Items and batches
# ---------------------------------------------------------------------------


@dataclass
class AnnotationItem:
    conv_id: str
    item_id: int
    subject_model_id: str
    response_text: str
    question: str
    source: str  # "instruction" | "feedback"
    feedback_id: int | None = None

    @property
    def key(self) -> str:
        return f"{self.conv_id}::{self.item_id}::{self.subject_model_id}"

    def to_record(self) -> dict[str, Any]:
        return {
            "conv_id": self.conv_id,
            "item_id": self.item_id,
            "subject_model_id": self.subject_model_id,
            "response_text": self.response_text,
            "question": self.question,
            "source": self.source,
            "feedback_id": self.feedback_id,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "AnnotationItem":
        return cls(
            conv_id=rec["conv_id"],
            item_id=int(rec["item_id"]),
            subject_model_id=rec["subject_model_id"],
            response_text=rec["response_text"],
            question=rec["question"],
            source=rec["source"],
            feedback_id=rec.get("feedback_id"),
        )


@dataclass
class AnnotationBatch:
    batch_id: str
    items: list[AnnotationItem]
    quota_per_model: int
    seed: int

    def __post_init__(self):
        keys = [item.key for item in self.items]
        if len(keys) != len(set(keys)):
            raise GoldStandardError("duplicate item keys in batch")

    def per_model_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for item in self.items:
            counts[item.subject_model_id] = counts.get(item.subject_model_id, 0) + 1
        return counts

    def to_record(self) -> dict[str, Any]:
        return {
            "batch_id": self.batch_id,
            "quota_per_model": self.quota_per_model,
            "seed": self.seed,
            "items": [i.to_record() for i in self.items],
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "AnnotationBatch":
        return cls(
            batch_id=rec["batch_id"],
            items=[AnnotationItem.from_record(i) for i in rec["items"]],
            quota_per_model=int(rec["quota_per_model"]),
            seed=int(rec["seed"]),
        )


def build_annotation_pool(
    tables: Sequence[VerdictTable],
    checklists: dict[str, Checklist],
    responses: dict[tuple[str, str], str],
) -> list[AnnotationItem]:
    """Expand verdict tables into annotatable (response, requirement) pairs.

    `responses` maps (conv_id, subject_model_id) to the response text shown
    to annotators.  Rows without a stored response are skipped with a warning.
    """
    pool: list[AnnotationItem] = []
    for table in tables:
        for conv_id in sorted(table.rows):
            checklist = checklists.get(conv_id)
            if checklist is None:
                logger.warning("no checklist for %s; skipping", conv_id)
                continue
            text = responses.get((conv_id, table.subject_model_id))
            if text is None:
                logger.warning(
                    "no response for (%s, %s); skipping", conv_id, table.subject_model_id
                )
                continue
            by_id = {item.item_id: item for item in checklist.items}
            for meta in table.item_meta[conv_id]:
                item = by_id.get(meta["item_id"])
                if item is None:
                    continue
                pool.append(AnnotationItem(
                    conv_id=conv_id,
                    item_id=item.item_id,
                    subject_model_id=table.subject_model_id,
                    response_text=text,
                    question=item.question,
                    source=item.source,
                    feedback_id=item.feedback_id,
                ))
    return pool


def stratified_sample(
    pool: Sequence[AnnotationItem],
    total_n: int,
    seed: int = 0,
    batch_id: str = "batch-0",
) -> AnnotationBatch:
    """Sample total_n items balanced across subject models.

    Quotas are total_n // k with the remainder spread over the models in
    sorted-name order, then uniform without replacement within each stratum.
    A stratum smaller than its quota contributes everything it has and the
    shortfall moves to models with spare items.
    """
    if total_n < 1:
        raise GoldStandardError("total_n must be >= 1")
    if total_n > len(pool):
        raise GoldStandardError(
            f"requested {total_n} items but only {len(pool)} are available"
        )
    strata: dict[str, list[AnnotationItem]] = {}
    for item in pool:
        strata.setdefault(item.subject_model_id, []).append(item)
    models = sorted(strata)
    k = len(models)

    base, rem = divmod(total_n, k)
    quotas = {m: base + (1 if i < rem else 0) for i, m in enumerate(models)}

    # Shift quota away from strata that cannot fill it.
    short = sum(max(0, quotas[m] - len(strata[m])) for m in models)
    if short:
        logger.warning("stratum shortfall of %d items; redistributing", short)
    for m in models:
        quotas[m] = min(quotas[m], len(strata[m]))
    while short > 0:
        moved = False
        for m in models:
            if short == 0:
                break
            if quotas[m] < len(strata[m]):
                quotas[m] += 1
                short -= 1
                moved = True
        if not moved:  # unreachable given the total_n precondition
            raise GoldStandardError("cannot satisfy quotas from the available pool")

    rng = np.random.Generator(np.random.Philox(key=seed))
    chosen: list[AnnotationItem] = []
    for m in models:
        members = sorted(strata[m], key=lambda item: item.key)
        quota = quotas[m]
        if quota == len(members):
            chosen.extend(members)
        elif quota > 0:
            idx = rng.choice(len(members), size=quota, replace=False)
            chosen.extend(members[i] for i in sorted(idx))
    return AnnotationBatch(
        batch_id=batch_id, items=chosen, quota_per_model=base, seed=seed
    )


# ---------------------------------------------------------------------------
# Durable label storage
# ---------------------------------------------------------------------------


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class LabelState:
    """All labels recorded for one item, one per annotator."""

    labels: dict[str, bool]
    conflict: bool

    @property
    def effective(self) -> bool | None:
        if self.conflict or not self.labels:
            return None
        return next(iter(set(self.labels.values())))


class BatchStore:
    """Annotation batch plus its label log, bound to one directory.

    Layout: batch.json (immutable), labels.log (append-only JSONL, fsynced
    per write), snapshot.json (compaction point).  Opening a store replays
    the snapshot then the log, so a crash between writes loses nothing that
    was committed.
    """

    BATCH_FILE = "batch.json"
    LOG_FILE = "labels.log"
    SNAPSHOT_FILE = "snapshot.json"

    def __init__(self, directory: str | Path, batch: AnnotationBatch,
                 labels: dict[str, dict[str, bool]]):
        self.directory = Path(directory)
        self.batch = batch
        self._labels = labels  # item key -> annotator -> label
        self._index = {item.key: i for i, item in enumerate(batch.items)}
        self._lock = threading.Lock()
        self._log_fh = (self.directory / self.LOG_FILE).open("a", encoding="utf-8")

    # -- lifecycle ----------------------------------------------------------

    @classmethod
    def create(cls, directory: str | Path, batch: AnnotationBatch) -> "BatchStore":
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        batch_path = directory / cls.BATCH_FILE
        if batch_path.exists():
            raise GoldStandardError(f"batch already exists in {directory}")
        batch_path.write_text(
            json.dumps(batch.to_record(), ensure_ascii=False, indent=2), encoding="utf-8"
        )
        return cls(directory, batch, {})

    @classmethod
    def open(cls, directory: str | Path) -> "BatchStore":
        directory = Path(directory)
        batch_path = directory / cls.BATCH_FILE
        if not batch_path.exists():
            raise GoldStandardError(f"no batch.json in {directory}")
        batch = AnnotationBatch.from_record(
            json.loads(batch_path.read_text(encoding="utf-8"))
        )
        labels: dict[str, dict[str, bool]] = {}
        snap_path = directory / cls.SNAPSHOT_FILE
        if snap_path.exists():
            snap = json.loads(snap_path.read_text(encoding="utf-8"))
            labels = {k: dict(v) for k, v in snap["labels"].items()}
        log_path = directory / cls.LOG_FILE
        if log_path.exists():
            with log_path.open(encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError:
                        logger.warning("skipping torn log line in %s", log_path)
                        continue
                    labels.setdefault(rec["item_key"], {})[rec["annotator_id"]] = bool(
                        rec["label"]
                    )
        return cls(directory, batch, labels)

    def close(self) -> None:
        self._log_fh.close()

    # -- queries ------------------------------------------------------------

    @property
    def total(self) -> int:
        return len(self.batch.items)

    def item_state(self, key: str) -> LabelState:
        labels = dict(self._labels.get(key, {}))
        return LabelState(labels=labels, conflict=len(set(labels.values())) > 1)

    def next_unlabeled(self, annotator_id: str) -> tuple[AnnotationItem, int] | None:
        """Next item (with its 1-based position) this annotator has not labeled."""
        with self._lock:
            for i, item in enumerate(self.batch.items):
                if annotator_id not in self._labels.get(item.key, {}):
                    return item, i + 1
        return None

    def item_at(self, position: int) -> AnnotationItem:
        """1-based positional access (the UI's jump-to-index control)."""
        if not 1 <= position <= self.total:
            raise ItemNotFound(f"position {position} out of range 1..{self.total}")
        return self.batch.items[position - 1]

    def progress(self) -> dict[str, int]:
        with self._lock:
            labeled = sum(
                1 for item in self.batch.items if self._labels.get(item.key)
            )
            conflicts = sum(
                1 for item in self.batch.items
                if len(set(self._labels.get(item.key, {}).values())) > 1
            )
        return {
            "total": self.total,
            "labeled": labeled,
            "remaining": self.total - labeled,
            "conflicts": conflicts,
        }

    def effective_labels(self) -> dict[str, bool]:
        """Consensus labels for all labeled, non-conflicted items."""
        out = {}
        with self._lock:
            for item in self.batch.items:
                state = self.item_state(item.key)
                if state.effective is not None:
                    out[item.key] = state.effective
        return out

    # -- mutations ----------------------------------------------------------

    def record_label(self, item_key: str, label: bool, annotator_id: str) -> LabelState:
        """Persist one binary label.

        Relabeling by the same annotator overwrites; a disagreeing second
        annotator flags the item for adjudication (it stays out of profiles
        until the disagreement is resolved by overwriting).
        """
        if not annotator_id.strip():
            raise GoldStandardError("annotator_id must be non-empty")
        with self._lock:
            if item_key not in self._index:
                raise ItemNotFound(f"unknown item: {item_key}")
            rec = {
                "item_key": item_key,
                "label": bool(label),
                "annotator_id": annotator_id,
                "ts": _now_iso(),
            }
            self._log_fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            self._log_fh.flush()
            os.fsync(self._log_fh.fileno())
            self._labels.setdefault(item_key, {})[annotator_id] = bool(label)
            state = self.item_state(item_key)
            if state.conflict:
                logger.warning("item %s flagged for adjudication", item_key)
            return state

    def compact(self) -> None:
        """Fold the log into snapshot.json and truncate it."""
        with self._lock:
            snap = {"labels": {k: dict(v) for k, v in self._labels.items()}}
            snap_path = self.directory / self.SNAPSHOT_FILE
            tmp = snap_path.with_suffix(".tmp")
            tmp.write_text(json.dumps(snap, ensure_ascii=False), encoding="utf-8")
            os.replace(tmp, snap_path)
            self._log_fh.close()
            self._log_fh = (self.directory / self.LOG_FILE).open("w", encoding="utf-8")
            self._log_fh.flush()
            os.fsync(self._log_fh.fileno())


# ---------------------------------------------------------------------------
# Judge profiling
# ---------------------------------------------------------------------------


@dataclass
class JudgeProfileReport:
    judge_model_id: str
    overall: JudgeProfileMetrics
    instruction: JudgeProfileMetrics | None
    feedback: JudgeProfileMetrics | None
    substantial_agreement: bool
    n_used: int
    n_conflicted: int

    def to_record(self) -> dict[str, Any]:
        return {
            "judge_model_id": self.judge_model_id,
            "overall": self.overall.to_record(),
            "instruction": self.instruction.to_record() if self.instruction else None,
            "feedback": self.feedback.to_record() if self.feedback else None,
            "substantial_agreement": self.substantial_agreement,
            "n_used": self.n_used,
            "n_conflicted": self.n_conflicted,
        }


def _judge_verdict(table: VerdictTable | None, conv_id: str, item_id: int) -> bool | None:
    if table is None:
        return None
    row = table.rows.get(conv_id)
    if row is None:
        return None
    for meta, verdict in zip(table.item_meta[conv_id], row.verdicts):
        if meta["item_id"] == item_id:
            return verdict
    return None


def judge_profile(
    store: BatchStore,
    judge_tables: VerdictTable | Sequence[VerdictTable],
) -> JudgeProfileReport:
    """Agreement of one judge with the human labels, overall and split by
    requirement source.

    A batch spans several subject models while verdict tables are
    per-subject, so this takes all of one judge's tables.  Requires every
    non-conflicted item to be labeled; conflicted items are excluded.  A
    source stratum with no items is reported absent, not zero.
    """
    if isinstance(judge_tables, VerdictTable):
        judge_tables = [judge_tables]
    judges = {t.judge_model_id for t in judge_tables}
    if len(judges) != 1:
        raise ProfileError(f"verdict tables span multiple judges: {sorted(judges)}")
    by_subject = {t.subject_model_id: t for t in judge_tables}

    human: list[bool] = []
    judge: list[bool] = []
    sources: list[str] = []
    unlabeled: list[str] = []
    missing_verdicts: list[str] = []
    n_conflicted = 0

    for item in store.batch.items:
        state = store.item_state(item.key)
        if state.conflict:
            n_conflicted += 1
            continue
        if state.effective is None:
            unlabeled.append(item.key)
            continue
        verdict = _judge_verdict(
            by_subject.get(item.subject_model_id), item.conv_id, item.item_id
        )
        if verdict is None:
            missing_verdicts.append(item.key)
            continue
        human.append(state.effective)
        judge.append(verdict)
        sources.append(item.source)

    if unlabeled:
        raise ProfileError(
            f"{len(unlabeled)} items still unlabeled: {', '.join(unlabeled[:10])}"
            + ("..." if len(unlabeled) > 10 else "")
        )
    if missing_verdicts:
        raise ProfileError(
            f"judge verdicts missing for: {', '.join(missing_verdicts[:10])}"
        )
    if not human:
        raise ProfileError("no usable items (all conflicted?)")

    overall = f1_profile(human, judge)

    def _subset(source: str) -> JudgeProfileMetrics | None:
        pairs = [(h, j) for h, j, s in zip(human, judge, sources) if s == source]
        if not pairs:
            return None
        return f1_profile([p[0] for p in pairs], [p[1] for p in pairs])

    return JudgeProfileReport(
        judge_model_id=judges.pop(),
        overall=overall,
        instruction=_subset("instruction"),
        feedback=_subset("feedback"),
        substantial_agreement=overall.kappa > SUBSTANTIAL_KAPPA,
        n_used=len(human),
        n_conflicted=n_conflicted,
    )
