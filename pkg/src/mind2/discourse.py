"""Dynamic discourse context propagation window.

The window for the utterance at 1-based position ``psi`` is the span of up
to ``n`` utterances immediately preceding it (never the utterance itself).
All cognitive-knowledge extraction is confined to this window, which is what
makes every extracted term traceable to a concrete stretch of dialogue.
"""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import Conversation, Utterance

DEFAULT_SPAN = 5


@dataclass(frozen=True)
class ContextWindow:
    conversation_id: str
    target_index: int                   # psi, the utterance the window serves
    span: int                           # n, requested width
    members: tuple[Utterance, ...]      # oldest -> newest, excludes target

    @property
    def rendered_text(self) -> str:
        """Role-prefixed member texts, one per line, dialogue order."""
        return "\n".join(f"{u.speaker.value}: {u.text}" for u in self.members)

    @property
    def is_empty(self) -> bool:
        return not self.members

    def member_for_offset(self, offset: int) -> Utterance:
        """Map a character offset in rendered_text to the member line it falls on."""
        pos = 0
        for u in self.members:
            line = f"{u.speaker.value}: {u.text}"
            if pos <= offset < pos + len(line):
                return u
            pos += len(line) + 1  # newline
        raise ValueError(f"offset {offset} outside rendered window")


def window_over(utterances, conversation_id: str, psi: int,
                n: int) -> ContextWindow:
    """Window over an explicit utterance sequence (live transcripts included).

    ``psi`` may point one past the end of the sequence, the slot a response
    about to be generated will occupy.
    """
    utterances = tuple(utterances)
    if not 1 <= psi <= len(utterances) + 1:
        raise ValueError(
            f"target index {psi} out of range 1..{len(utterances) + 1} "
            f"for conversation {conversation_id}"
        )
    if n < 1:
        raise ValueError(f"window span must be >= 1, got {n}")
    width = min(n, psi - 1)
    return ContextWindow(
        conversation_id=conversation_id,
        target_index=psi,
        span=n,
        members=utterances[psi - 1 - width:psi - 1],
    )


def window(conv: Conversation, psi: int, n: int) -> ContextWindow:
    """Return the min(n, psi-1) utterances preceding position psi.

    psi = 1 yields an empty window; n larger than the available history
    truncates at the start of the dialogue.
    """
    if not 1 <= psi <= len(conv.utterances):
        raise ValueError(
            f"target index {psi} out of range 1..{len(conv.utterances)} "
            f"for conversation {conv.id}"
        )
    return window_over(conv.utterances, conv.id, psi, n)
