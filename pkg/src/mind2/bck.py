"""Bidirectional cognitive knowledge (BCK) synthesis.

Per utterance, three query-expansion subtasks run over the utterance's
discourse window, one per cognitive component:

* BTM - terms a speaker prioritizes when developing its Theory-of-Mind
  about the other speaker;
* PEU - terms matching each side's psychological expected utility (the
  system's expectation to improve the user's mental state, the user's to
  gain assistance from the system);
* BCR - terms indicating each side's cognitive rationality behind the
  other's immediate cognitive, emotional, and behavioral states.

Terms must occur verbatim in the source window (case-insensitive); anything
else is rejected and logged. The "none" sentinel maps to an empty list.
Results are cached as append-only JSONL keyed by (conversation, utterance,
component, perspective, span, prompt version), so reruns and ablation grids
cost no backend calls.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .backend import Backend, GenerationConfig
from .corpus import Conversation, CorpusSplit, Speaker
from .discourse import ContextWindow, window
from .errors import BackendError, ExtractionError

logger = logging.getLogger(__name__)

NONE_SENTINEL = "none"


class CognitiveComponent(Enum):
    BTM = "BTM"
    PEU = "PEU"
    BCR = "BCR"


class Perspective(Enum):
    SYSTEM_SIDE = "System"
    USER_SIDE = "User"

    @classmethod
    def of_speaker(cls, speaker: Speaker) -> "Perspective":
        return cls.SYSTEM_SIDE if speaker is Speaker.SYSTEM else cls.USER_SIDE


_ROLE_PREAMBLE = {
    CognitiveComponent.BTM: "Cognitive psychologists specializing in Theory-of-Mind.",
    CognitiveComponent.PEU: (
        "Cognitive psychologists specializing in psychological expected utility."
    ),
    CognitiveComponent.BCR: (
        "Cognitive psychologists specializing in cognitive rationality."
    ),
}

# Step 2 wording: one sentence per component with a perspective clause, so
# the two perspectives of a component differ only in that clause.
_SUBTASK = {
    CognitiveComponent.BTM: (
        "extract the terms from the window that {who} prioritizes in developing "
        "its Theory-of-Mind about {whom}"
    ),
    CognitiveComponent.PEU: (
        "extract the terms from the window that comply with {who}'s expectation "
        "to {expectation}"
    ),
    CognitiveComponent.BCR: (
        "extract the terms from the window that indicate {who}'s cognitive "
        "rationality behind {whom}'s immediate cognitive, emotional, and "
        "behavioral states"
    ),
}

_PEU_EXPECTATION = {
    Perspective.SYSTEM_SIDE: "improve the user's mental state",
    Perspective.USER_SIDE: "gain assistance from the system",
}

_OUTPUT_INSTRUCTION = (
    "Return a JSON array of strings, each copied verbatim from the Input. "
    "Accumulate extracted terms that you prioritize to derive the subtask. "
    "If no term is identified, output none."
)


def _subtask_sentence(component: CognitiveComponent, perspective: Perspective) -> str:
    who = "the system" if perspective is Perspective.SYSTEM_SIDE else "the user"
    whom = "the user" if perspective is Perspective.SYSTEM_SIDE else "the system"
    template = _SUBTASK[component]
    if component is CognitiveComponent.PEU:
        return template.format(who=who, expectation=_PEU_EXPECTATION[perspective])
    return template.format(who=who, whom=whom)


@dataclass(frozen=True)
class ExtractionPrompt:
    role_preamble: str
    subtask: CognitiveComponent
    perspective: Perspective
    window_text: str
    output_instruction: str

    @property
    def rendered(self) -> str:
        """Full prompt text: role, Step 1 (window definition), Step 2
        (subtask), Input, Output - in that order."""
        return (
            f"[ROLE]\n{self.role_preamble}\n\n"
            "[TASK]\n"
            "Step 1: Define the discourse context propagation window as exactly "
            "the dialogue excerpt given under Input; use no other context.\n"
            f"Step 2: Perform the subtask: "
            f"{_subtask_sentence(self.subtask, self.perspective)}.\n\n"
            "Input:\n"
            f"{self.window_text}\n\n"
            "Output:\n"
            f"{self.output_instruction}"
        )


def prompt_version() -> str:
    """Digest of every template string; cache keys carry it so template
    edits invalidate stale extractions."""
    material = json.dumps(
        {
            "role": {k.value: v for k, v in _ROLE_PREAMBLE.items()},
            "subtask": {k.value: v for k, v in _SUBTASK.items()},
            "peu": {k.value: v for k, v in _PEU_EXPECTATION.items()},
            "output": _OUTPUT_INSTRUCTION,
        },
        sort_keys=True,
    )
    return hashlib.sha1(material.encode("utf-8")).hexdigest()[:12]


PROMPT_VERSION = prompt_version()


def build_prompt(win: ContextWindow, component: CognitiveComponent,
                 perspective: Perspective) -> ExtractionPrompt:
    if win.is_empty:
        raise ValueError("cannot build an extraction prompt over an empty window")
    return ExtractionPrompt(
        role_preamble=_ROLE_PREAMBLE[component],
        subtask=component,
        perspective=perspective,
        window_text=win.rendered_text,
        output_instruction=_OUTPUT_INSTRUCTION,
    )


@dataclass(frozen=True)
class BckTriplet:
    conversation_id: str
    index: int                       # psi of the utterance this knowledge serves
    perspective: Perspective
    btm_terms: tuple[str, ...]
    peu_terms: tuple[str, ...]
    bcr_terms: tuple[str, ...]
    source_window: ContextWindow

    def __post_init__(self):
        for terms in (self.btm_terms, self.peu_terms, self.bcr_terms):
            for term in terms:
                if term.strip().lower() == NONE_SENTINEL:
                    raise ValueError("the 'none' sentinel is not a storable term")
                if find_occurrence(self.source_window.rendered_text, term) is None:
                    raise ValueError(
                        f"term {term!r} does not occur in its source window "
                        f"({self.conversation_id}#{self.index})"
                    )

    def terms_for(self, component: CognitiveComponent) -> tuple[str, ...]:
        return {
            CognitiveComponent.BTM: self.btm_terms,
            CognitiveComponent.PEU: self.peu_terms,
            CognitiveComponent.BCR: self.bcr_terms,
        }[component]

    @property
    def is_empty(self) -> bool:
        return not (self.btm_terms or self.peu_terms or self.bcr_terms)


def empty_triplet(win: ContextWindow, perspective: Perspective) -> BckTriplet:
    return BckTriplet(
        conversation_id=win.conversation_id,
        index=win.target_index,
        perspective=perspective,
        btm_terms=(),
        peu_terms=(),
        bcr_terms=(),
        source_window=win,
    )


def find_occurrence(text: str, term: str) -> tuple[int, int] | None:
    """Locate a term in window text: case-insensitive, internal whitespace
    normalized, never matching across utterance lines. Returns character
    offsets or None."""
    parts = term.split()
    if not parts:
        return None
    pattern = re.compile(
        r"[^\S\n]+".join(re.escape(p) for p in parts), re.IGNORECASE
    )
    match = pattern.search(text)
    return match.span() if match else None


_FENCE = re.compile(r"^```[a-z]*\n?|\n?```$", re.MULTILINE)


def parse_term_list(raw: str) -> list[str] | None:
    """Parse backend output into a term list.

    Accepts a JSON array of strings; falls back to newline- or
    comma-separated lists. The "none" sentinel yields an empty list. Returns
    None when nothing list-like could be recovered (caller records a
    warning and treats it as empty).
    """
    text = _FENCE.sub("", raw.strip()).strip()
    if not text or text.strip(".").strip().lower() == NONE_SENTINEL:
        return []
    try:
        parsed = json.loads(text)
        if isinstance(parsed, list) and all(isinstance(t, str) for t in parsed):
            return [t for t in (s.strip() for s in parsed)
                    if t and t.lower() != NONE_SENTINEL]
        return None
    except json.JSONDecodeError:
        pass
    sep = "\n" if "\n" in text else ","
    items = [re.sub(r"^[-*\d.)\s]+", "", piece).strip().strip('"').strip("'")
             for piece in text.split(sep)]
    items = [t for t in items if t and t.lower() != NONE_SENTINEL]
    return items or None


def _extract_component(win: ContextWindow, component: CognitiveComponent,
                       perspective: Perspective, backend: Backend,
                       config: GenerationConfig) -> dict:
    """Run one subtask over a window; returns a full extraction record."""
    prompt = build_prompt(win, component, perspective)
    try:
        response = backend.complete(prompt.rendered, config)
    except BackendError as exc:
        raise ExtractionError(
            f"extraction failed for {win.conversation_id}#{win.target_index} "
            f"{component.value}: {exc}",
            conversation_id=win.conversation_id,
            index=win.target_index,
            component=component.value,
        ) from exc
    parsed = parse_term_list(response.text)
    warning = None
    if parsed is None:
        warning = "unparseable term list"
        logger.warning(
            "unparseable term list for %s#%s %s: %.80r",
            win.conversation_id, win.target_index, component.value, response.text,
        )
        parsed = []
    accepted, rejected = [], []
    for term in parsed:
        cleaned = " ".join(term.split())
        if find_occurrence(win.rendered_text, cleaned) is not None:
            accepted.append(cleaned)
        else:
            rejected.append(cleaned)
            logger.info(
                "rejected non-verbatim term %r for %s#%s %s",
                cleaned, win.conversation_id, win.target_index, component.value,
            )
    return {
        "conversation_id": win.conversation_id,
        "index": win.target_index,
        "component": component.value,
        "perspective": perspective.value,
        "span": win.span,
        "prompt_version": PROMPT_VERSION,
        "accepted": accepted,
        "rejected": rejected,
        "raw": response.text,
        "warning": warning,
        "created_at": time.time(),
    }


def extract_triplet(win: ContextWindow, perspective: Perspective,
                    backend: Backend,
                    config: GenerationConfig | None = None) -> BckTriplet:
    """Extract all three components for one window/perspective.

    An empty window short-circuits to an empty triplet with zero backend
    calls. Rejected terms are logged, never fatal.
    """
    if win.is_empty:
        return empty_triplet(win, perspective)
    config = config or GenerationConfig()
    terms = {}
    for component in CognitiveComponent:
        record = _extract_component(win, component, perspective, backend, config)
        terms[component] = tuple(record["accepted"])
    return BckTriplet(
        conversation_id=win.conversation_id,
        index=win.target_index,
        perspective=perspective,
        btm_terms=terms[CognitiveComponent.BTM],
        peu_terms=terms[CognitiveComponent.PEU],
        bcr_terms=terms[CognitiveComponent.BCR],
        source_window=win,
    )


def _record_key(record: dict) -> tuple:
    return (
        record["conversation_id"], record["index"], record["component"],
        record["perspective"], record["span"], record["prompt_version"],
    )


class BckStore:
    """Assembled triplets plus the raw extraction records behind them."""

    def __init__(self):
        self._triplets: dict[tuple[str, int], BckTriplet] = {}
        self._records: dict[tuple, dict] = {}

    def add_triplet(self, triplet: BckTriplet) -> None:
        self._triplets[(triplet.conversation_id, triplet.index)] = triplet

    def add_record(self, record: dict) -> None:
        self._records[_record_key(record)] = record

    def get(self, conversation_id: str, index: int) -> BckTriplet | None:
        return self._triplets.get((conversation_id, index))

    def triplets(self) -> list[BckTriplet]:
        return [self._triplets[k] for k in sorted(self._triplets)]

    def records(self) -> list[dict]:
        return [self._records[k] for k in sorted(self._records)]

    def __len__(self) -> int:
        return len(self._triplets)

    def term_stats(self) -> dict:
        """Share of extractions yielding at least one accepted term, per
        component and per perspective. Empty-window utterances never ran an
        extraction, so they do not enter the denominators."""
        if not self._records:
            raise ValueError("store holds no extraction records")
        counts: dict[str, dict[str, list[int]]] = {}
        for record in self._records.values():
            comp = counts.setdefault(record["component"], {})
            for bucket in ("overall", record["perspective"]):
                got, total = comp.get(bucket, (0, 0))
                comp[bucket] = (got + (1 if record["accepted"] else 0), total + 1)
        return {
            component: {
                bucket: got / total
                for bucket, (got, total) in sorted(buckets.items())
            }
            for component, buckets in sorted(counts.items())
        }


class BckCache:
    """Append-only JSONL cache of extraction records, safe for concurrent
    writers (single lock around each appended line)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._known: dict[tuple, dict] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    record = json.loads(line)
                    self._known[_record_key(record)] = record

    def lookup(self, key: tuple) -> dict | None:
        return self._known.get(key)

    def append(self, record: dict) -> None:
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
                fh.flush()
            self._known[_record_key(record)] = record

    def __len__(self) -> int:
        return len(self._known)


def extract_corpus(split: CorpusSplit, n: int, backend: Backend,
                   cache_path: str | Path, part: str = "train",
                   concurrency: int = 1,
                   config: GenerationConfig | None = None) -> BckStore:
    """Extract a triplet for every utterance in the chosen split part.

    The triplet's perspective is the speaker side of the utterance itself.
    Cached keys are skipped, so reruns and interrupted runs resume without
    re-issuing backend calls.
    """
    conversations = getattr(split, part)
    return extract_conversations(conversations, n, backend, cache_path,
                                 concurrency=concurrency, config=config)


def extract_conversations(conversations, n: int, backend: Backend,
                          cache_path: str | Path, concurrency: int = 1,
                          config: GenerationConfig | None = None) -> BckStore:
    config = config or GenerationConfig()
    cache = BckCache(cache_path)
    store = BckStore()

    tasks = []  # (conversation, psi, window, component, perspective, cache key)
    windows: dict[tuple[str, int], ContextWindow] = {}
    for conv in conversations:
        for utt in conv.utterances:
            win = window(conv, utt.index, n)
            windows[(conv.id, utt.index)] = win
            if win.is_empty:
                continue
            perspective = Perspective.of_speaker(utt.speaker)
            for component in CognitiveComponent:
                key = (conv.id, utt.index, component.value, perspective.value,
                       n, PROMPT_VERSION)
                if cache.lookup(key) is None:
                    tasks.append((win, component, perspective))

    def run_task(task):
        win, component, perspective = task
        record = _extract_component(win, component, perspective, backend, config)
        cache.append(record)
        return record

    if tasks:
        if concurrency > 1:
            with ThreadPoolExecutor(max_workers=concurrency) as pool:
                list(pool.map(run_task, tasks))
        else:
            for task in tasks:
                run_task(task)

    # Assemble triplets from cached records (keyed, so completion order is
    # irrelevant). Empty windows contribute empty triplets directly.
    for conv in conversations:
        for utt in conv.utterances:
            win = windows[(conv.id, utt.index)]
            perspective = Perspective.of_speaker(utt.speaker)
            if win.is_empty:
                store.add_triplet(empty_triplet(win, perspective))
                continue
            terms = {}
            for component in CognitiveComponent:
                key = (conv.id, utt.index, component.value, perspective.value,
                       n, PROMPT_VERSION)
                record = cache.lookup(key)
                if record is None:
                    raise ExtractionError(
                        f"missing extraction for {key}",
                        conversation_id=conv.id, index=utt.index,
                        component=component.value,
                    )
                terms[component] = tuple(record["accepted"])
                store.add_record(record)
            store.add_triplet(BckTriplet(
                conversation_id=conv.id,
                index=utt.index,
                perspective=perspective,
                btm_terms=terms[CognitiveComponent.BTM],
                peu_terms=terms[CognitiveComponent.PEU],
                bcr_terms=terms[CognitiveComponent.BCR],
                source_window=win,
            ))
    return store
