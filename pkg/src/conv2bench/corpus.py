"""Ingest raw chat logs into canonical conversation records and pre-filter them.

Canonical on-disk format is JSONL, one conversation per line:

    {"conv_id": "abc", "source": "wildchat", "language": "en", "toxic": false,
     "messages": [{"id": 0, "role": "user", "text": "..."},
                  {"id": 1, "role": "assistant", "text": "..."}]}

Source corpora use their own schemas; per-source adapters map foreign field
names onto this one.  Records that cannot be repaired into a valid dialogue
(>= 2 messages, user speaks first, strictly alternating roles) are dropped
and counted.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

logger = logging.getLogger(__name__)

ROLE_ALIASES = {
    "user": "user",
    "human": "user",
    "assistant": "assistant",
    "ai": "assistant",
    "bot": "assistant",
    "model": "assistant",
    "gpt": "assistant",
}

# Source metadata sometimes spells out the language name instead of a tag.
LANGUAGE_ALIASES = {
    "english": "en",
    "german": "de",
    "french": "fr",
    "spanish": "es",
    "portuguese": "pt",
    "chinese": "zh",
    "russian": "ru",
    "japanese": "ja",
}


class CorpusError(Exception):
    """Fatal corpus-level failure (unreadable file, unknown adapter)."""


@dataclass
class Message:
    """One turn in a dialogue. ids are consecutive from 0, roles alternate."""

    id: int
    role: str  # "user" | "assistant"
    text: str


@dataclass
class Conversation:
    conv_id: str
    messages: list[Message]
    language: str
    toxic: bool
    source: str

    @property
    def first_user_text(self) -> str:
        return self.messages[0].text

    def user_message_ids(self) -> set[int]:
        return {m.id for m in self.messages if m.role == "user"}

    def to_record(self) -> dict[str, Any]:
        return {
            "conv_id": self.conv_id,
            "source": self.source,
            "language": self.language,
            "toxic": self.toxic,
            "messages": [
                {"id": m.id, "role": m.role, "text": m.text} for m in self.messages
            ],
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "Conversation":
        return cls(
            conv_id=str(rec["conv_id"]),
            messages=[
                Message(id=int(m["id"]), role=m["role"], text=m["text"])
                for m in rec["messages"]
            ],
            language=rec["language"],
            toxic=bool(rec["toxic"]),
            source=rec.get("source", ""),
        )


@dataclass
class CorpusStats:
    """Bookkeeping for an ingest/filter run. kept + sum(dropped) == total."""

    total: int = 0
    kept: int = 0
    dropped_by_reason: dict[str, int] = field(default_factory=dict)

    def drop(self, reason: str) -> None:
        self.dropped_by_reason[reason] = self.dropped_by_reason.get(reason, 0) + 1

    @property
    def dropped(self) -> int:
        return sum(self.dropped_by_reason.values())

    def balanced(self) -> bool:
        return self.kept + self.dropped == self.total

    def to_record(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "kept": self.kept,
            "dropped_by_reason": dict(self.dropped_by_reason),
        }


# ---------------------------------------------------------------------------
# Normalization and repair
# ---------------------------------------------------------------------------


def _normalize_language(raw: Any) -> str:
    lang = str(raw or "").strip().lower()
    return LANGUAGE_ALIASES.get(lang, lang)


def repair_messages(raw: list[tuple[str, str]]) -> list[Message] | None:
    """Turn a raw (role, text) sequence into a valid alternating dialogue.

    Repairs applied, in order: unknown roles and empty texts are dropped,
    leading assistant turns are dropped so the user speaks first, and
    consecutive same-role messages are merged (double-sends happen in real
    logs; dropping them would bias the corpus).  Returns None when fewer
    than two messages survive.
    """
    cleaned: list[tuple[str, str]] = []
    for role_raw, text_raw in raw:
        role = ROLE_ALIASES.get(str(role_raw).strip().lower())
        text = str(text_raw or "").strip()
        if role is None or not text:
            continue
        cleaned.append((role, text))

    while cleaned and cleaned[0][0] != "user":
        cleaned.pop(0)

    merged: list[tuple[str, str]] = []
    for role, text in cleaned:
        if merged and merged[-1][0] == role:
            merged[-1] = (role, merged[-1][1] + "\n\n" + text)
        else:
            merged.append((role, text))

    if len(merged) < 2:
        return None
    return [Message(id=i, role=role, text=text) for i, (role, text) in enumerate(merged)]


# ---------------------------------------------------------------------------
# Source adapters
# ---------------------------------------------------------------------------


def _adapt_canonical(rec: dict[str, Any]) -> tuple[str, list[tuple[str, str]], str, bool]:
    msgs = [(m.get("role", ""), m.get("text", m.get("content", ""))) for m in rec["messages"]]
    return str(rec["conv_id"]), msgs, rec.get("language", ""), bool(rec.get("toxic", False))


def _adapt_wildchat(rec: dict[str, Any]) -> tuple[str, list[tuple[str, str]], str, bool]:
    msgs = [(m.get("role", ""), m.get("content", "")) for m in rec["conversation"]]
    return (
        str(rec["conversation_hash"]),
        msgs,
        rec.get("language", ""),
        bool(rec.get("toxic", False)),
    )


def _adapt_lmsys(rec: dict[str, Any]) -> tuple[str, list[tuple[str, str]], str, bool]:
    msgs = [(m.get("role", ""), m.get("content", "")) for m in rec["conversation"]]
    # LMSYS ships per-message OpenAI moderation results rather than one flag.
    toxic = bool(rec.get("toxic", False))
    if not toxic and isinstance(rec.get("openai_moderation"), list):
        toxic = any(m.get("flagged", False) for m in rec["openai_moderation"])
    return str(rec["conversation_id"]), msgs, rec.get("language", ""), toxic


ADAPTERS: dict[str, Callable[[dict[str, Any]], tuple[str, list[tuple[str, str]], str, bool]]] = {
    "canonical": _adapt_canonical,
    "wildchat": _adapt_wildchat,
    "lmsys": _adapt_lmsys,
}


def resolve_adapter(name: str):
    try:
        return ADAPTERS[name]
    except KeyError:
        raise CorpusError(f"unknown adapter: {name!r} (have {sorted(ADAPTERS)})") from None


# ---------------------------------------------------------------------------
# Ingest / filter / serialize
# ---------------------------------------------------------------------------


def ingest(
    path: str | Path,
    source_name: str,
    adapter: str = "canonical",
    stats: CorpusStats | None = None,
) -> Iterator[Conversation]:
    """Stream canonical Conversations from a newline-delimited log file.

    Malformed records (bad JSON, missing fields, unrepairable dialogues) are
    skipped and counted under dropped_by_reason["malformed"].  An unreadable
    file raises CorpusError.
    """
    path = Path(path)
    adapt = resolve_adapter(adapter)
    if stats is None:
        stats = CorpusStats()
    try:
        fh = path.open(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus file {path}: {exc}") from exc

    seen_ids: set[str] = set()
    with fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            stats.total += 1
            try:
                rec = json.loads(line)
                conv_id, raw_msgs, language, toxic = adapt(rec)
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
                stats.drop("malformed")
                logger.debug("line %d: malformed record (%s)", line_no, exc)
                continue

            messages = repair_messages(raw_msgs) if isinstance(raw_msgs, list) else None
            if messages is None:
                stats.drop("malformed")
                logger.debug("line %d: no valid dialogue after repair", line_no)
                continue
            if conv_id in seen_ids:
                stats.drop("duplicate_id")
                logger.debug("line %d: duplicate conv_id %s", line_no, conv_id)
                continue
            seen_ids.add(conv_id)
            yield Conversation(
                conv_id=conv_id,
                messages=messages,
                language=_normalize_language(language),
                toxic=toxic,
                source=source_name,
            )


def prefilter(
    convs: Iterable[Conversation],
    lang: str = "en",
    allow_toxic: bool = False,
    stats: CorpusStats | None = None,
) -> Iterator[Conversation]:
    """Keep conversations matching the language tag and toxicity policy.

    Language flags come from source metadata; there is no re-detection.
    """
    lang = _normalize_language(lang)
    for conv in convs:
        if conv.language != lang:
            if stats is not None:
                stats.drop("language")
            continue
        if conv.toxic and not allow_toxic:
            if stats is not None:
                stats.drop("toxic")
            continue
        if stats is not None:
            stats.kept += 1
        yield conv


def write_conversations(convs: Iterable[Conversation], path: str | Path) -> int:
    """Serialize conversations to the canonical JSONL format. Returns count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8") as fh:
        for conv in convs:
            fh.write(json.dumps(conv.to_record(), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_conversations(path: str | Path) -> list[Conversation]:
    """Load canonical conversations previously written by write_conversations."""
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Conversation.from_record(json.loads(line)))
    return out
