from __future__ import annotations

import hashlib
import json
import random

import pytest

from conftest import make_conversation
from mind2.bck import BckStore, BckTriplet, Perspective, empty_triplet
from mind2.corpus import Speaker, Strategy
from mind2.discourse import window
from mind2.errors import BudgetError, ExportError, LinearizationError
from mind2.linearize import (AblationMask, DEFAULT_MARKERS, MarkerVocabulary,
                             build_alpha, build_omega, build_phi,
                             build_target, export_training_jsonl,
                             is_token_subsequence, linearize_turn,
                             omega_grammar_counts, parse_target,
                             standard_ablation_grid)

FULL = AblationMask.full()
NONE = AblationMask.none()


def two_turn_conversation():
    return make_conversation(
        conv_id="fix-2",
        situation="exam stress",
        turns=[("User", "I failed."),
               ("System", "What happened?", "Question")],
    )


def store_for(conv, n=5, terms=None):
    """Build a store with hand-set accepted terms per utterance index."""
    terms = terms or {}
    store = BckStore()
    for utt in conv.utterances:
        win = window(conv, utt.index, n)
        perspective = Perspective.of_speaker(utt.speaker)
        if win.is_empty:
            store.add_triplet(empty_triplet(win, perspective))
            continue
        per_component = terms.get(utt.index, {})
        store.add_triplet(BckTriplet(
            conversation_id=conv.id,
            index=utt.index,
            perspective=perspective,
            btm_terms=tuple(per_component.get("btm", ())),
            peu_terms=tuple(per_component.get("peu", ())),
            bcr_terms=tuple(per_component.get("bcr", ())),
            source_window=win,
        ))
    return store


class TestMarkerVocabulary:
    def test_defaults_pairwise_distinct(self):
        markers = MarkerVocabulary()
        assert len(set(markers.all())) == 10

    def test_duplicate_markers_rejected(self):
        with pytest.raises(ValueError):
            MarkerVocabulary(mind="[dup]", util="[dup]")


class TestBuildAlpha:
    def test_hand_applied_two_turn_fixture(self):
        conv = two_turn_conversation()
        assert build_alpha(conv, 2) == "[syp] exam stress [usr] I failed."

    def test_empty_history_is_situation_only(self):
        conv = two_turn_conversation()
        assert build_alpha(conv, 1) == "[syp] exam stress"

    def test_three_utterance_history_has_three_speaker_markers(self):
        conv = make_conversation(turns=[
            ("User", "one"), ("System", "two", "Question"), ("User", "three"),
            ("System", "four", "Others"),
        ])
        alpha = build_alpha(conv, 4)
        assert alpha.count("[usr]") == 2
        assert alpha.count("[sys]") == 1
        assert alpha == "[syp] exam stress [usr] one [sys] two [usr] three"

    def test_marker_collision_names_utterance(self):
        conv = make_conversation(turns=[
            ("User", "sneaky [cog] text"), ("System", "ok", "Others"),
        ])
        with pytest.raises(LinearizationError, match="utterance 1"):
            build_alpha(conv, 2)


class TestBuildPhi:
    def _triplet(self):
        conv = make_conversation(
            conv_id="phi-1",
            turns=[("User", "I lost my job and want to gain assistance."),
                   ("System", "Go on.", "Question")],
        )
        win = window(conv, 2, 5)
        return BckTriplet(
            conversation_id="phi-1", index=2,
            perspective=Perspective.SYSTEM_SIDE,
            btm_terms=("lost my job",), peu_terms=("gain assistance",),
            bcr_terms=(), source_window=win,
        )

    def test_full_mask_rendering(self):
        assert build_phi(self._triplet(), FULL) == \
            "[mind] lost my job [util] gain assistance [prnt] none"

    def test_masked_components_vanish_entirely(self):
        mask = AblationMask(include_btm=True, include_peu=False,
                            include_bcr=False)
        assert build_phi(self._triplet(), mask) == "[mind] lost my job"

    def test_all_false_mask_is_empty_string(self):
        assert build_phi(self._triplet(), NONE) == ""

    def test_terms_join_with_comma_space(self):
        conv = make_conversation(
            conv_id="phi-2",
            turns=[("User", "worried about money and about sleep"),
                   ("System", "Go on.", "Question")],
        )
        win = window(conv, 2, 5)
        triplet = BckTriplet(
            conversation_id="phi-2", index=2,
            perspective=Perspective.SYSTEM_SIDE,
            btm_terms=("money", "sleep"), peu_terms=(), bcr_terms=(),
            source_window=win,
        )
        mask = AblationMask(True, False, False)
        assert build_phi(triplet, mask) == "[mind] money, sleep"


class TestBuildOmega:
    def test_two_turn_fixture_hand_constructed(self):
        # History is only the first utterance, whose own window is empty, so
        # its knowledge block renders explicit absence for every component.
        conv = two_turn_conversation()
        omega = build_omega(conv, 2, store_for(conv), FULL)
        assert omega == ("[CLS] [syp] exam stress [usr] I failed. [cog] "
                         "[mind] none [util] none [prnt] none")

    def test_all_false_mask_drops_knowledge_section_content(self):
        conv = two_turn_conversation()
        omega = build_omega(conv, 2, store_for(conv), NONE)
        assert omega == "[CLS] [syp] exam stress [usr] I failed. [cog]"
        for marker in ("[mind]", "[util]", "[prnt]"):
            assert marker not in omega

    def test_budget_drops_oldest_pairs_together(self):
        conv = make_conversation(turns=[
            ("User", "alpha beta gamma delta"),
            ("System", "epsilon zeta eta theta", "Question"),
            ("User", "iota kappa lambda mu"),
            ("System", "nu xi omicron pi", "Others"),
        ])
        store = store_for(conv)
        unbounded = build_omega(conv, 4, store, FULL)
        budget = len(unbounded.split()) - 1
        truncated = build_omega(conv, 4, store, FULL, budget=budget)
        assert "alpha beta gamma delta" not in truncated
        assert "[syp]" in truncated
        assert "iota kappa lambda mu" in truncated  # most recent survives
        counts = omega_grammar_counts(truncated, FULL)
        assert counts["speaker_markers"] == counts["phi_blocks"] == 2

    def test_budget_below_minimal_sequence_errors(self):
        conv = two_turn_conversation()
        with pytest.raises(BudgetError):
            build_omega(conv, 2, store_for(conv), FULL, budget=3)

    def test_missing_triplet_is_error(self):
        conv = two_turn_conversation()
        with pytest.raises(LinearizationError, match="missing knowledge"):
            build_omega(conv, 2, BckStore(), FULL)

    def test_masked_omega_is_subsequence_of_unmasked(self):
        conv = make_conversation(
            conv_id="sub-1",
            turns=[("User", "I cannot sleep at night."),
                   ("System", "How long has this lasted?", "Question"),
                   ("User", "Weeks now, since the layoff."),
                   ("System", "That is a heavy load.", "Reflection of Feelings")],
        )
        store = store_for(conv, terms={
            2: {"btm": ("cannot sleep",)},
            3: {"peu": ("How long",)},
            4: {"bcr": ("layoff",)},
        })
        unmasked = build_omega(conv, 4, store, FULL)
        for mask in standard_ablation_grid():
            masked = build_omega(conv, 4, store, mask)
            assert is_token_subsequence(masked, unmasked)


class TestTargetGrammar:
    def test_build_and_parse_invert_exactly(self):
        target = build_target(Strategy.QUESTION,
                              "How long has this been going on?")
        assert target == "[str] Question [rsp] How long has this been going on?"
        parsed = parse_target(target)
        assert parsed.strategy is Strategy.QUESTION
        assert parsed.response == "How long has this been going on?"
        assert parsed.well_formed

    def test_round_trip_over_randomized_pairs(self):
        rng = random.Random(7)
        vocab = ["sleep", "job", "worry", "friend", "hope", "it's", "okay",
                 "really", "week", "plan."]
        strategies = list(Strategy)
        for _ in range(300):
            strategy = rng.choice(strategies)
            response = " ".join(rng.choices(vocab, k=rng.randint(1, 12)))
            parsed = parse_target(build_target(strategy, response))
            assert parsed.strategy is strategy
            assert parsed.response == response
            assert parsed.well_formed

    def test_parse_no_markers_falls_back_to_others(self):
        parsed = parse_target("no markers at all")
        assert parsed.strategy is Strategy.OTHERS
        assert parsed.response == "no markers at all"
        assert not parsed.well_formed

    def test_parse_well_formed_example(self):
        parsed = parse_target("[str] Self-disclosure [rsp] I felt that way too.")
        assert parsed.strategy is Strategy.SELF_DISCLOSURE
        assert parsed.response == "I felt that way too."
        assert parsed.well_formed

    def test_junk_between_label_and_rsp_discarded(self):
        parsed = parse_target("[str] Question um well [rsp] Are you okay?")
        assert parsed.strategy is Strategy.QUESTION
        assert parsed.response == "Are you okay?"
        assert not parsed.well_formed

    def test_leading_text_before_str_flagged(self):
        parsed = parse_target("Sure! [str] Information [rsp] Here is a fact.")
        assert parsed.strategy is Strategy.INFORMATION
        assert parsed.response == "Here is a fact."
        assert not parsed.well_formed

    def test_rsp_only(self):
        parsed = parse_target("[rsp] Just a reply.")
        assert parsed.strategy is Strategy.OTHERS
        assert parsed.response == "Just a reply."
        assert not parsed.well_formed

    def test_invalid_label_keeps_response(self):
        parsed = parse_target("[str] Exorcism [rsp] calm down")
        assert parsed.strategy is Strategy.OTHERS
        assert parsed.response == "calm down"
        assert not parsed.well_formed

    def test_build_rejects_marker_in_response(self):
        with pytest.raises(LinearizationError):
            build_target(Strategy.OTHERS, "evil [rsp] marker")

    def test_build_rejects_empty_response(self):
        with pytest.raises(ValueError):
            build_target(Strategy.OTHERS, "")


class TestOmegaGrammar:
    def test_counts_on_clean_sequence(self):
        conv = two_turn_conversation()
        omega = build_omega(conv, 2, store_for(conv), FULL)
        counts = omega_grammar_counts(omega, FULL)
        assert counts == {"speaker_markers": 1, "phi_blocks": 1}

    def test_all_false_mask_counts(self):
        conv = two_turn_conversation()
        omega = build_omega(conv, 2, store_for(conv), NONE)
        counts = omega_grammar_counts(omega, NONE)
        assert counts["phi_blocks"] == 0

    def test_detects_missing_cls(self):
        with pytest.raises(LinearizationError):
            omega_grammar_counts("[syp] s [cog]", NONE)

    def test_detects_masked_marker_leak(self):
        with pytest.raises(LinearizationError, match="masked-out"):
            omega_grammar_counts("[CLS] [syp] s [cog] [mind] none",
                                 AblationMask(False, True, True))


class TestAblationGrid:
    def test_seven_configurations_full_last(self):
        grid = standard_ablation_grid()
        assert len(grid) == 7
        assert grid[-1] == AblationMask.full()
        assert len(set(grid)) == 7

    def test_mask_labels(self):
        assert AblationMask.full().label() == "full"
        assert AblationMask.none().label() == "none"
        assert AblationMask(False, True, True).label() == "w/o BTM"
        assert AblationMask(False, False, True).label() == "w/o BTM, PEU"

    def test_from_names(self):
        assert AblationMask.from_names("btm,peu,bcr") == FULL
        assert AblationMask.from_names("none") == NONE
        assert AblationMask.from_names("peu") == AblationMask(False, True, False)
        with pytest.raises(ValueError):
            AblationMask.from_names("btm,telepathy")


class TestExport:
    def test_one_record_per_system_turn(self, tmp_path):
        conv = make_conversation()  # two System turns
        out = tmp_path / "train.jsonl"
        count = export_training_jsonl([conv], store_for(conv), FULL, out)
        assert count == 2
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert [r["turn"] for r in rows] == [2, 4]
        assert all(r["conversation_id"] == conv.id for r in rows)

    def test_rerun_byte_identical(self, tmp_path):
        conv = make_conversation()
        store = store_for(conv)
        first = tmp_path / "a.jsonl"
        second = tmp_path / "b.jsonl"
        export_training_jsonl([conv], store, FULL, first)
        export_training_jsonl([conv], store, FULL, second)
        assert hashlib.sha256(first.read_bytes()).hexdigest() == \
            hashlib.sha256(second.read_bytes()).hexdigest()

    def test_records_satisfy_invariants(self, tmp_path):
        conv = make_conversation()
        out = tmp_path / "train.jsonl"
        export_training_jsonl([conv], store_for(conv), FULL, out)
        for line in out.read_text().splitlines():
            row = json.loads(line)
            assert set(row) == {"omega", "target", "conversation_id", "turn"}
            omega_grammar_counts(row["omega"], FULL)
            assert row["omega"].startswith("[CLS]")
            parsed = parse_target(row["target"])
            assert parsed.well_formed

    def test_missing_triplets_listed(self, tmp_path):
        conv = make_conversation()
        with pytest.raises(ExportError, match=conv.id):
            export_training_jsonl([conv], BckStore(), FULL,
                                  tmp_path / "x.jsonl")

    def test_unannotated_system_turn_exports_others(self, tmp_path):
        conv = make_conversation(turns=[
            ("User", "hello"), ("System", "hi there"),
        ])
        out = tmp_path / "t.jsonl"
        export_training_jsonl([conv], store_for(conv), FULL, out)
        row = json.loads(out.read_text().splitlines()[0])
        assert parse_target(row["target"]).strategy is Strategy.OTHERS

    def test_linearize_turn_rejects_user_turn(self):
        conv = make_conversation()
        with pytest.raises(ValueError, match="not a supporter turn"):
            linearize_turn(conv, 1, store_for(conv), FULL)
