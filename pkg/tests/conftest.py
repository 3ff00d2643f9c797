from __future__ import annotations

import json

import pytest

from mind2.corpus import Conversation, Speaker, Strategy, Utterance


def make_conversation(conv_id="conv-1", situation="exam stress", turns=None,
                      emotion_type="anxiety", problem_type="academic pressure"):
    """Build a conversation from (speaker, text[, strategy]) tuples."""
    turns = turns or [
        ("User", "I failed my statistics exam and I feel lost."),
        ("System", "How long have you been preparing for it?", "Question"),
        ("User", "All semester, that is why it hurts so much."),
        ("System", "That sounds exhausting and disappointing.",
         "Reflection of Feelings"),
    ]
    utterances = []
    for i, turn in enumerate(turns, start=1):
        speaker = Speaker.SYSTEM if turn[0] == "System" else Speaker.USER
        strategy = Strategy.parse(turn[2]) if len(turn) > 2 else None
        utterances.append(Utterance(index=i, speaker=speaker, text=turn[1],
                                    strategy=strategy))
    return Conversation(
        id=conv_id,
        situation=situation,
        emotion_type=emotion_type,
        problem_type=problem_type,
        utterances=tuple(utterances),
    )


def esconv_record(situation="exam stress", dialog=None, **extra):
    if dialog is None:
        dialog = [
            {"speaker": "seeker", "content": "I failed my exam."},
            {"speaker": "supporter", "content": "How are you holding up?",
             "annotation": {"strategy": "Question"}},
        ]
    record = {
        "situation": situation,
        "emotion_type": "anxiety",
        "problem_type": "academic pressure",
        "dialog": dialog,
    }
    record.update(extra)
    return record


@pytest.fixture
def esconv_file(tmp_path):
    def _write(records, name="esconv.json"):
        path = tmp_path / name
        path.write_text(json.dumps(records), encoding="utf-8")
        return path
    return _write


@pytest.fixture
def sample_conversation():
    return make_conversation()


def synthetic_corpus(count, prefix="synth", turns_each=4):
    """Many small distinct conversations, for split and sweep plumbing."""
    topics = ["job crisis", "ongoing depression", "break up with a partner",
              "problems with friends", "academic pressure"]
    conversations = []
    for i in range(count):
        turns = []
        for t in range(turns_each):
            if t % 2 == 0:
                turns.append(("User", f"I keep worrying about issue {i} part {t}."))
            else:
                turns.append(("System", f"Tell me more about issue {i} part {t}.",
                              "Question"))
        conversations.append(make_conversation(
            conv_id=f"{prefix}-{i:04d}",
            situation=f"situation number {i}",
            turns=turns,
            problem_type=topics[i % len(topics)],
        ))
    return conversations
