"""ESConv corpus ingestion, normalization, and seeded fractional splits.

Source files are JSON arrays of conversation records with a ``situation``,
``emotion_type``, ``problem_type``, and a ``dialog`` list of messages. Each
message carries a ``speaker`` ("supporter"/"seeker"), ``content``, and for
supporter messages usually a strategy annotation. Records are normalized into
the immutable data model below; per-message extra fields are kept in an
opaque metadata map and never interpreted.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import CorpusError


class Speaker(Enum):
    SYSTEM = "System"  # supporter
    USER = "User"      # seeker

    @classmethod
    def from_source(cls, raw: str) -> "Speaker":
        norm = raw.strip().lower()
        if norm in ("supporter", "sys", "system"):
            return cls.SYSTEM
        if norm in ("seeker", "usr", "user"):
            return cls.USER
        raise CorpusError(f"unknown speaker role: {raw!r}")


class Strategy(Enum):
    QUESTION = "Question"
    RESTATEMENT = "Restatement or Paraphrasing"
    REFLECTION = "Reflection of Feelings"
    SELF_DISCLOSURE = "Self-disclosure"
    AFFIRMATION = "Affirmation and Reassurance"
    SUGGESTIONS = "Providing Suggestions"
    INFORMATION = "Information"
    OTHERS = "Others"

    @classmethod
    def parse(cls, label: str) -> "Strategy":
        """Match a source label against the closed 8-label set.

        Matching is case-insensitive and ignores surrounding whitespace;
        anything outside the set is a validation error.
        """
        norm = " ".join(label.split()).lower()
        for member in cls:
            if member.value.lower() == norm:
                return member
        raise CorpusError(f"unknown strategy label: {label!r}")


STRATEGY_LABELS = tuple(s.value for s in Strategy)


@dataclass(frozen=True)
class Utterance:
    index: int                      # 1-based position within the dialogue
    speaker: Speaker
    text: str
    strategy: Strategy | None = None
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.index < 1:
            raise CorpusError(f"utterance index must be >= 1, got {self.index}")
        if not self.text:
            raise CorpusError(f"utterance {self.index} has empty text")
        if self.speaker is Speaker.USER and self.strategy is not None:
            raise CorpusError(f"utterance {self.index}: User utterances carry no strategy")


@dataclass(frozen=True)
class Conversation:
    id: str
    situation: str
    emotion_type: str
    problem_type: str
    utterances: tuple[Utterance, ...]
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.utterances) < 2:
            raise CorpusError(f"conversation {self.id}: needs at least 2 utterances")
        for pos, utt in enumerate(self.utterances, start=1):
            if utt.index != pos:
                raise CorpusError(
                    f"conversation {self.id}: utterance indices must be contiguous "
                    f"from 1, got {utt.index} at position {pos}"
                )

    def __len__(self) -> int:
        return len(self.utterances)

    def system_turns(self) -> list[Utterance]:
        return [u for u in self.utterances if u.speaker is Speaker.SYSTEM]


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple[Conversation, ...]
    validation: tuple[Conversation, ...]
    test: tuple[Conversation, ...]
    fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        ids = [c.id for part in (self.train, self.validation, self.test) for c in part]
        if len(ids) != len(set(ids)):
            raise CorpusError("split parts must be disjoint by conversation id")


def _parse_message(msg: dict, index: int, record_index: int) -> Utterance:
    if "speaker" not in msg or "content" not in msg:
        raise CorpusError("message missing speaker/content", record_index)
    speaker = Speaker.from_source(str(msg["speaker"]))
    text = str(msg["content"]).strip()
    if not text:
        raise CorpusError(f"message {index} has empty content", record_index)

    raw_strategy = None
    annotation = msg.get("annotation")
    if isinstance(annotation, dict) and annotation.get("strategy"):
        raw_strategy = annotation["strategy"]
    elif msg.get("strategy"):
        raw_strategy = msg["strategy"]

    strategy = None
    if raw_strategy is not None and speaker is Speaker.SYSTEM:
        strategy = Strategy.parse(str(raw_strategy))

    extras = {k: v for k, v in msg.items() if k not in ("speaker", "content", "strategy")}
    return Utterance(index=index, speaker=speaker, text=text, strategy=strategy,
                     metadata=extras)


_RECORD_FIELDS = ("id", "situation", "emotion_type", "problem_type", "dialog")


def _parse_record(record: dict, record_index: int) -> Conversation:
    dialog = record.get("dialog", [])
    if not dialog:
        raise CorpusError("empty dialog", record_index)
    utterances = tuple(
        _parse_message(msg, i, record_index) for i, msg in enumerate(dialog, start=1)
    )
    return Conversation(
        id=str(record.get("id", f"conv-{record_index:04d}")),
        situation=str(record.get("situation", "")).strip(),
        emotion_type=str(record.get("emotion_type", "")),
        problem_type=str(record.get("problem_type", "")),
        utterances=utterances,
        metadata={k: v for k, v in record.items() if k not in _RECORD_FIELDS},
    )


def load_esconv(path: str | Path) -> list[Conversation]:
    """Load an ESConv-format JSON array into normalized conversations."""
    raw = Path(path).read_text(encoding="utf-8")
    try:
        records = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"malformed JSON: {exc}") from exc
    if not isinstance(records, list):
        raise CorpusError("expected a top-level JSON array of conversation records")
    conversations = []
    for i, record in enumerate(records):
        if not isinstance(record, dict):
            raise CorpusError("record is not an object", i)
        conversations.append(_parse_record(record, i))
    return conversations


def conversation_to_dict(conv: Conversation) -> dict:
    return {
        "id": conv.id,
        "situation": conv.situation,
        "emotion_type": conv.emotion_type,
        "problem_type": conv.problem_type,
        "metadata": conv.metadata,
        "utterances": [
            {
                "index": u.index,
                "speaker": u.speaker.value,
                "text": u.text,
                "strategy": u.strategy.value if u.strategy else None,
                "metadata": u.metadata,
            }
            for u in conv.utterances
        ],
    }


def conversation_from_dict(data: dict) -> Conversation:
    return Conversation(
        id=data["id"],
        situation=data["situation"],
        emotion_type=data["emotion_type"],
        problem_type=data["problem_type"],
        metadata=data.get("metadata", {}),
        utterances=tuple(
            Utterance(
                index=u["index"],
                speaker=Speaker(u["speaker"]),
                text=u["text"],
                strategy=Strategy(u["strategy"]) if u.get("strategy") else None,
                metadata=u.get("metadata", {}),
            )
            for u in data["utterances"]
        ),
    )


def save_jsonl(conversations: list[Conversation], path: str | Path) -> None:
    """Write the normalized corpus, one conversation per line (round-trip exact)."""
    with open(path, "w", encoding="utf-8") as fh:
        for conv in conversations:
            fh.write(json.dumps(conversation_to_dict(conv), ensure_ascii=False) + "\n")


def load_jsonl(path: str | Path) -> list[Conversation]:
    conversations = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                conversations.append(conversation_from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise CorpusError(f"malformed JSONL: {exc}", i) from exc
    return conversations


def standard_split(conversations: list[Conversation], seed: int = 0) -> CorpusSplit:
    """Partition a corpus 70/15/15 into train/validation/test.

    When every record carries its own ``split`` metadata field
    ("train"/"validation"/"test"), the file's partition is respected;
    otherwise a seeded shuffle produces the proportions.
    """
    parts = {"train": [], "validation": [], "test": []}
    markers = {str(c.metadata.get("split", "")).lower() for c in conversations}
    aliases = {"train": "train", "validation": "validation", "valid": "validation",
               "dev": "validation", "test": "test"}
    if conversations and markers <= set(aliases):
        for conv in conversations:
            parts[aliases[str(conv.metadata["split"]).lower()]].append(conv)
    else:
        ordered = list(conversations)
        random.Random(seed).shuffle(ordered)
        n = len(ordered)
        n_train = round(n * 0.70)
        n_valid = round(n * 0.15)
        parts["train"] = ordered[:n_train]
        parts["validation"] = ordered[n_train:n_train + n_valid]
        parts["test"] = ordered[n_train + n_valid:]
    return CorpusSplit(
        train=tuple(parts["train"]),
        validation=tuple(parts["validation"]),
        test=tuple(parts["test"]),
        fraction=1.0,
        seed=seed,
    )


def sample_split(full: CorpusSplit, fraction: float, seed: int,
                 stratify: bool = False) -> CorpusSplit:
    """Take a seeded fractional sample of the training part.

    Sampling shuffles conversation ids with the seed and takes a prefix of
    ``round(fraction * len(train))``, so for a fixed seed any smaller
    fraction's membership is a subset of any larger one's. Validation and
    test parts pass through untouched.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if stratify:
        ordered = _stratified_order(full.train, seed)
    else:
        ordered = list(full.train)
        random.Random(seed).shuffle(ordered)
    take = round(fraction * len(full.train))
    return CorpusSplit(
        train=tuple(ordered[:take]),
        validation=full.validation,
        test=full.test,
        fraction=fraction,
        seed=seed,
    )


def _stratified_order(conversations, seed: int) -> list[Conversation]:
    # Round-robin over problem-type buckets so any prefix stays roughly
    # proportional; each bucket is seed-shuffled for determinism.
    buckets: dict[str, list[Conversation]] = {}
    for conv in conversations:
        buckets.setdefault(conv.problem_type, []).append(conv)
    rng = random.Random(seed)
    for key in sorted(buckets):
        rng.shuffle(buckets[key])
    ordered = []
    keys = sorted(buckets, key=lambda k: -len(buckets[k]))
    cursors = {k: 0 for k in keys}
    total = sum(len(b) for b in buckets.values())
    while len(ordered) < total:
        for key in keys:
            if cursors[key] < len(buckets[key]):
                ordered.append(buckets[key][cursors[key]])
                cursors[key] += 1
    return ordered
