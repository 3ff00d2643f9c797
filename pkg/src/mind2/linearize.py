"""Special-token sequence linearization and target parsing.

The model-facing input is a single marker-tagged string: start token, then
the situation and role-tagged dialogue history, then one knowledge block per
history utterance. The target grammar is ``[str] <strategy-label> [rsp]
<response>``. Marker strings may never occur inside corpus text; that is
checked here and is a hard error.

Token budgeting at this layer counts whitespace tokens (backbone-agnostic);
subword budgets belong to whatever trainer consumes the exported JSONL.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

from .bck import BckStore, BckTriplet, NONE_SENTINEL
from .corpus import Conversation, CorpusError, Speaker, Strategy, Utterance
from .errors import BudgetError, ExportError, LinearizationError


@dataclass(frozen=True)
class MarkerVocabulary:
    cls: str = "[CLS]"
    syp: str = "[syp]"      # situation synopsis
    spk_sys: str = "[sys]"  # supporter turn
    spk_usr: str = "[usr]"  # seeker turn
    cog: str = "[cog]"      # start of knowledge blocks
    mind: str = "[mind]"    # ToM terms
    util: str = "[util]"    # expected-utility terms
    prnt: str = "[prnt]"    # rationality terms
    str_: str = "[str]"     # strategy label
    rsp: str = "[rsp]"      # response text

    def __post_init__(self):
        markers = self.all()
        if len(set(markers)) != len(markers):
            raise ValueError("marker strings must be pairwise distinct")

    def all(self) -> tuple[str, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    def speaker_marker(self, speaker: Speaker) -> str:
        return self.spk_sys if speaker is Speaker.SYSTEM else self.spk_usr


DEFAULT_MARKERS = MarkerVocabulary()


@dataclass(frozen=True)
class AblationMask:
    include_btm: bool = True
    include_peu: bool = True
    include_bcr: bool = True

    @classmethod
    def full(cls) -> "AblationMask":
        return cls(True, True, True)

    @classmethod
    def none(cls) -> "AblationMask":
        return cls(False, False, False)

    @classmethod
    def from_names(cls, names: str) -> "AblationMask":
        """Parse a CLI mask like "btm,peu,bcr" or "none"."""
        cleaned = names.strip().lower()
        if cleaned in ("", "none"):
            return cls.none()
        parts = {p.strip() for p in cleaned.split(",") if p.strip()}
        unknown = parts - {"btm", "peu", "bcr"}
        if unknown:
            raise ValueError(f"unknown mask components: {sorted(unknown)}")
        return cls("btm" in parts, "peu" in parts, "bcr" in parts)

    @property
    def any(self) -> bool:
        return self.include_btm or self.include_peu or self.include_bcr

    def label(self) -> str:
        if self.include_btm and self.include_peu and self.include_bcr:
            return "full"
        if not self.any:
            return "none"
        missing = [name for name, on in (("BTM", self.include_btm),
                                         ("PEU", self.include_peu),
                                         ("BCR", self.include_bcr)) if not on]
        return "w/o " + ", ".join(missing)

    def to_dict(self) -> dict:
        return {"btm": self.include_btm, "peu": self.include_peu,
                "bcr": self.include_bcr}

    @classmethod
    def from_dict(cls, data: dict) -> "AblationMask":
        return cls(bool(data.get("btm", True)), bool(data.get("peu", True)),
                   bool(data.get("bcr", True)))


def standard_ablation_grid() -> list[AblationMask]:
    """The seven component configurations compared in ablation runs, full
    knowledge last."""
    return [
        AblationMask(False, False, True),   # w/o BTM, PEU
        AblationMask(False, True, False),   # w/o BTM, BCR
        AblationMask(True, False, False),   # w/o PEU, BCR
        AblationMask(False, True, True),    # w/o BTM
        AblationMask(True, False, True),    # w/o PEU
        AblationMask(True, True, False),    # w/o BCR
        AblationMask.full(),
    ]


@dataclass(frozen=True)
class LinearizedExample:
    omega: str
    target: str
    conversation_id: str
    target_turn: int


def check_marker_collision(text: str, context: str,
                           markers: MarkerVocabulary = DEFAULT_MARKERS) -> None:
    for marker in markers.all():
        if marker in text:
            raise LinearizationError(
                f"{context} contains the marker string {marker!r}"
            )


def _render_alpha(situation: str, history: tuple[Utterance, ...],
                  markers: MarkerVocabulary) -> str:
    check_marker_collision(situation, "situation synopsis", markers)
    parts = [markers.syp, situation]
    for utt in history:
        check_marker_collision(utt.text, f"utterance {utt.index}", markers)
        parts.append(markers.speaker_marker(utt.speaker))
        parts.append(utt.text)
    return " ".join(parts)


def build_alpha(conv: Conversation, upto: int,
                markers: MarkerVocabulary = DEFAULT_MARKERS) -> str:
    """Situation plus role-tagged history for the turn at position ``upto``."""
    if not 1 <= upto <= len(conv.utterances):
        raise ValueError(f"turn {upto} out of range for conversation {conv.id}")
    return _render_alpha(conv.situation, conv.utterances[:upto - 1], markers)


def build_phi(triplet: BckTriplet, mask: AblationMask,
              markers: MarkerVocabulary = DEFAULT_MARKERS) -> str:
    """Render one utterance's knowledge block under an ablation mask.

    Masked-out components vanish, marker and all; an included component with
    no terms renders its marker followed by the "none" sentinel so the
    downstream model sees explicit absence.
    """
    parts = []
    for include, marker, terms in (
        (mask.include_btm, markers.mind, triplet.btm_terms),
        (mask.include_peu, markers.util, triplet.peu_terms),
        (mask.include_bcr, markers.prnt, triplet.bcr_terms),
    ):
        if not include:
            continue
        parts.append(marker)
        parts.append(", ".join(terms) if terms else NONE_SENTINEL)
    return " ".join(parts)


def assemble_omega(situation: str, history: tuple[Utterance, ...],
                   conversation_id: str, triplet_lookup, mask: AblationMask,
                   budget: int | None = None,
                   markers: MarkerVocabulary = DEFAULT_MARKERS) -> str:
    """Assemble the full input sequence over an explicit history.

    ``triplet_lookup(index) -> BckTriplet`` supplies knowledge per history
    utterance (unused under an all-false mask). When a whitespace-token
    budget is given and exceeded, the oldest (utterance, knowledge-block)
    pairs drop together from the front; the situation and the most recent
    utterance always survive. A budget below even that minimal sequence is
    an error.
    """
    history = tuple(history)
    start = 0
    while True:
        kept = history[start:]
        alpha = _render_alpha(situation, kept, markers)
        parts = [markers.cls, alpha, markers.cog]
        if mask.any:
            for utt in kept:
                triplet = triplet_lookup(utt.index)
                if triplet is None:
                    raise LinearizationError(
                        f"missing knowledge triplet for "
                        f"{conversation_id}#{utt.index}"
                    )
                parts.append(build_phi(triplet, mask, markers))
        omega = " ".join(p for p in parts if p)
        if budget is None or len(omega.split()) <= budget:
            return omega
        if len(kept) <= 1:
            raise BudgetError(
                f"budget {budget} below the minimal sequence "
                f"({len(omega.split())} tokens) for {conversation_id}"
            )
        start += 1


def build_omega(conv: Conversation, psi: int, store: BckStore,
                mask: AblationMask, budget: int | None = None,
                markers: MarkerVocabulary = DEFAULT_MARKERS) -> str:
    """Input sequence for predicting the turn at position ``psi``."""
    if not 1 <= psi <= len(conv.utterances):
        raise ValueError(f"turn {psi} out of range for conversation {conv.id}")
    return assemble_omega(
        conv.situation,
        conv.utterances[:psi - 1],
        conv.id,
        lambda index: store.get(conv.id, index),
        mask,
        budget=budget,
        markers=markers,
    )


def build_target(strategy: Strategy, response: str,
                 markers: MarkerVocabulary = DEFAULT_MARKERS) -> str:
    if not response:
        raise ValueError("response must be non-empty")
    check_marker_collision(response, "response", markers)
    return f"{markers.str_} {strategy.value} {markers.rsp} {response}"


@dataclass(frozen=True)
class ParsedTarget:
    strategy: Strategy
    response: str
    well_formed: bool


def _match_label_prefix(segment: str) -> tuple[Strategy, str] | None:
    """Longest strategy label the segment starts with (case-insensitive),
    plus whatever trails it."""
    norm = " ".join(segment.split())
    lowered = norm.lower()
    best = None
    for strategy in Strategy:
        label = strategy.value.lower()
        if lowered == label or lowered.startswith(label + " "):
            if best is None or len(label) > len(best[0].value):
                best = (strategy, norm[len(label):].strip())
    return best


def parse_target(text: str,
                 markers: MarkerVocabulary = DEFAULT_MARKERS) -> ParsedTarget:
    """Parse generated text against the target grammar, leniently.

    Well-formed means exactly "[str] <label> [rsp] <response>" with a label
    from the closed set. Anything else still parses: a missing or invalid
    strategy falls back to Others, a missing "[rsp]" treats the remainder as
    the response, and the result carries well_formed=False.
    """
    idx_str = text.find(markers.str_)
    idx_rsp = text.find(markers.rsp)

    if idx_str != -1 and idx_rsp != -1 and idx_str < idx_rsp:
        label_segment = text[idx_str + len(markers.str_):idx_rsp].strip()
        response = text[idx_rsp + len(markers.rsp):].removeprefix(" ")
        try:
            strategy = Strategy.parse(label_segment)
            well_formed = text[:idx_str].strip() == ""
            return ParsedTarget(strategy, response, well_formed)
        except CorpusError:
            matched = _match_label_prefix(label_segment)
            strategy = matched[0] if matched else Strategy.OTHERS
            return ParsedTarget(strategy, response, False)

    if idx_rsp != -1:
        response = text[idx_rsp + len(markers.rsp):].removeprefix(" ")
        return ParsedTarget(Strategy.OTHERS, response, False)

    if idx_str != -1:
        segment = text[idx_str + len(markers.str_):].strip()
        matched = _match_label_prefix(segment)
        if matched:
            return ParsedTarget(matched[0], matched[1], False)
        return ParsedTarget(Strategy.OTHERS, segment, False)

    return ParsedTarget(Strategy.OTHERS, text.strip(), False)


def linearize_turn(conv: Conversation, psi: int, store: BckStore,
                   mask: AblationMask, budget: int | None = None,
                   markers: MarkerVocabulary = DEFAULT_MARKERS) -> LinearizedExample:
    """Input/target pair for the supporter turn at position ``psi``.

    Unannotated supporter turns fall back to the Others strategy label.
    """
    target_utt = conv.utterances[psi - 1]
    if target_utt.speaker is not Speaker.SYSTEM:
        raise ValueError(f"turn {psi} of {conv.id} is not a supporter turn")
    omega = build_omega(conv, psi, store, mask, budget=budget, markers=markers)
    strategy = target_utt.strategy or Strategy.OTHERS
    target = build_target(strategy, target_utt.text, markers=markers)
    return LinearizedExample(
        omega=omega, target=target, conversation_id=conv.id, target_turn=psi,
    )


def export_training_jsonl(conversations, store: BckStore, mask: AblationMask,
                          out_path: str | Path, budget: int | None = None,
                          markers: MarkerVocabulary = DEFAULT_MARKERS) -> int:
    """Write one record per supporter turn, in conversation order then turn
    order: {omega, target, conversation_id, turn}. Returns record count."""
    if mask.any:
        missing = []
        for conv in conversations:
            for utt in conv.utterances:
                if store.get(conv.id, utt.index) is None:
                    missing.append((conv.id, utt.index))
        if missing:
            raise ExportError(
                f"missing knowledge triplets for {len(missing)} utterances: "
                f"{missing[:10]}"
            )
    count = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for conv in conversations:
            for utt in conv.utterances:
                if utt.speaker is not Speaker.SYSTEM:
                    continue
                example = linearize_turn(conv, utt.index, store, mask,
                                         budget=budget, markers=markers)
                fh.write(json.dumps(
                    {
                        "omega": example.omega,
                        "target": example.target,
                        "conversation_id": example.conversation_id,
                        "turn": example.target_turn,
                    },
                    ensure_ascii=False,
                ) + "\n")
                count += 1
    return count


def omega_grammar_counts(omega: str, mask: AblationMask,
                         markers: MarkerVocabulary = DEFAULT_MARKERS) -> dict:
    """Token-level grammar audit of an assembled input sequence.

    Checks exactly one start/situation/knowledge marker, ordering, and that
    the speaker-marker count matches the knowledge-block count (zero blocks
    under an all-false mask). Raises LinearizationError on violation;
    returns the counts for further assertions.
    """
    tokens = omega.split()
    if not tokens or tokens[0] != markers.cls:
        raise LinearizationError("sequence must begin with the start marker")
    for marker, expected in ((markers.cls, 1), (markers.syp, 1), (markers.cog, 1)):
        if tokens.count(marker) != expected:
            raise LinearizationError(
                f"expected exactly {expected} {marker!r}, "
                f"found {tokens.count(marker)}"
            )
    if tokens.index(markers.syp) > tokens.index(markers.cog):
        raise LinearizationError("situation must precede the knowledge section")

    speaker_count = sum(tokens.count(m) for m in (markers.spk_sys, markers.spk_usr))
    component_markers = [m for include, m in (
        (mask.include_btm, markers.mind),
        (mask.include_peu, markers.util),
        (mask.include_bcr, markers.prnt),
    ) if include]
    if component_markers:
        block_counts = {m: tokens.count(m) for m in component_markers}
        if len(set(block_counts.values())) != 1:
            raise LinearizationError(
                f"uneven knowledge blocks: {block_counts}"
            )
        block_count = block_counts[component_markers[0]]
        if block_count != speaker_count:
            raise LinearizationError(
                f"{speaker_count} speaker markers vs {block_count} "
                "knowledge blocks"
            )
    else:
        block_count = 0
        for marker in (markers.mind, markers.util, markers.prnt):
            if marker in tokens:
                raise LinearizationError(
                    f"masked-out marker {marker!r} present in sequence"
                )
    excluded = [m for include, m in (
        (mask.include_btm, markers.mind),
        (mask.include_peu, markers.util),
        (mask.include_bcr, markers.prnt),
    ) if not include]
    for marker in excluded:
        if marker in tokens:
            raise LinearizationError(
                f"masked-out marker {marker!r} present in sequence"
            )
    return {"speaker_markers": speaker_count, "phi_blocks": block_count}


def is_token_subsequence(candidate: str, full: str) -> bool:
    """True when candidate's whitespace tokens appear in order within full's."""
    small = candidate.split()
    big = iter(full.split())
    return all(tok in big for tok in small)
