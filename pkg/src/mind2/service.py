"""Session-oriented HTTP API for live support conversations.

Each posted user message runs the full per-turn pipeline: windowed knowledge
extraction for the incoming utterance, input-sequence assembly for the next
supporter turn, generation, target parsing, then knowledge extraction for
the generated turn. The response carries the parsed strategy, the exact
input sequence sent to the generator, and the extracted knowledge with
character-offset provenance into the source window.

State is an append-only JSONL event log per session under the data
directory; an in-memory index is rebuilt on startup. A turn commits only
after every stage succeeded, so a failed generation leaves the transcript
untouched. Within a session turns are serialized by a lock; distinct
sessions proceed concurrently.
"""

from __future__ import annotations

import json
import os
import threading
import time
import uuid
from pathlib import Path

from fastapi import Depends, FastAPI, HTTPException, Request
from pydantic import BaseModel, Field

from .backend import Backend, GenerationConfig, mock_extraction_backend, \
    mock_generation_backend
from .bck import (BckStore, BckTriplet, Perspective, extract_triplet,
                  find_occurrence)
from .corpus import Speaker, Strategy, Utterance
from .discourse import DEFAULT_SPAN, window_over
from .errors import BackendError, BudgetError, Mind2Error
from .linearize import AblationMask, assemble_omega, parse_target
from .runner import GENERATION_PREAMBLE

ENV_DATA_DIR = "MIND2_DATA_DIR"
ENV_SERVICE_TOKEN = "MIND2_SERVICE_TOKEN"

MAX_MESSAGE_CHARS = 4000


class CreateSessionRequest(BaseModel):
    situation: str = Field(min_length=1)
    window_span: int | None = Field(default=None, ge=1)
    mask: dict | None = None
    generation: dict | None = None


class UpdateSettingsRequest(BaseModel):
    window_span: int | None = Field(default=None, ge=1)
    mask: dict | None = None


class MessageRequest(BaseModel):
    text: str = Field(min_length=1)


def _utterance_json(utt: Utterance) -> dict:
    return {
        "index": utt.index,
        "speaker": utt.speaker.value,
        "text": utt.text,
        "strategy": utt.strategy.value if utt.strategy else None,
    }


def _triplet_json(triplet: BckTriplet) -> dict:
    """Triplet with per-term provenance pointers into the source window."""
    win = triplet.source_window
    components = {}
    for name, terms in (("BTM", triplet.btm_terms),
                        ("PEU", triplet.peu_terms),
                        ("BCR", triplet.bcr_terms)):
        rendered = []
        for term in terms:
            span = find_occurrence(win.rendered_text, term)
            start, end = span if span else (-1, -1)
            rendered.append({
                "text": term,
                "start": start,
                "end": end,
                "utterance_index": (win.member_for_offset(start).index
                                    if span else None),
            })
        components[name] = rendered
    return {
        "index": triplet.index,
        "perspective": triplet.perspective.value,
        "window_text": win.rendered_text,
        "window_members": [u.index for u in win.members],
        "components": components,
    }


class SessionState:
    def __init__(self, session_id: str, situation: str, window_span: int,
                 mask: AblationMask, generation: GenerationConfig,
                 created_at: float):
        self.id = session_id
        self.situation = situation
        self.window_span = window_span
        self.mask = mask
        self.generation = generation
        self.created_at = created_at
        self.utterances: list[Utterance] = []
        self.store = BckStore()
        self.knowledge_entries: list[dict] = []   # one per non-empty window
        self.turn_results: list[dict] = []

    def config_json(self) -> dict:
        return {
            "id": self.id,
            "situation": self.situation,
            "window_span": self.window_span,
            "mask": self.mask.to_dict(),
            "generation": self.generation.to_dict(),
        }

    def session_json(self) -> dict:
        doc = self.config_json()
        doc["created_at"] = self.created_at
        doc["transcript"] = [_utterance_json(u) for u in self.utterances]
        return doc

    def trace_json(self) -> dict:
        return {
            "situation": self.situation,
            "window_span": self.window_span,
            "mask": self.mask.to_dict(),
            "transcript": [_utterance_json(u) for u in self.utterances],
            "knowledge": list(self.knowledge_entries),
            "turns": list(self.turn_results),
        }

    def record_triplet(self, triplet: BckTriplet) -> None:
        self.store.add_triplet(triplet)
        if not triplet.source_window.is_empty:
            self.knowledge_entries.append(_triplet_json(triplet))


class SessionManager:
    def __init__(self, data_dir: str | Path, extraction_backend: Backend,
                 generation_backend: Backend,
                 default_config: GenerationConfig | None = None,
                 default_span: int = DEFAULT_SPAN):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.extraction_backend = extraction_backend
        self.generation_backend = generation_backend
        self.default_config = default_config or GenerationConfig()
        self.default_span = default_span
        self.sessions: dict[str, SessionState] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()
        self._load_existing()

    # -- persistence ------------------------------------------------------

    def _log_path(self, session_id: str) -> Path:
        return self.data_dir / f"{session_id}.jsonl"

    def _append_event(self, session_id: str, event: dict) -> None:
        with open(self._log_path(session_id), "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, ensure_ascii=False) + "\n")
            fh.flush()

    def _load_existing(self) -> None:
        for path in sorted(self.data_dir.glob("*.jsonl")):
            state = None
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    event = json.loads(line)
                    if event["type"] == "session_created":
                        doc = event["session"]
                        state = SessionState(
                            session_id=doc["id"],
                            situation=doc["situation"],
                            window_span=doc["window_span"],
                            mask=AblationMask.from_dict(doc["mask"]),
                            generation=GenerationConfig.from_dict(doc["generation"]),
                            created_at=event.get("ts", 0.0),
                        )
                    elif event["type"] == "settings_updated" and state:
                        state.window_span = event["window_span"]
                        state.mask = AblationMask.from_dict(event["mask"])
                    elif event["type"] == "turn_committed" and state:
                        self._replay_turn(state, event)
            if state:
                self.sessions[state.id] = state
                self._locks[state.id] = threading.Lock()

    def _replay_turn(self, state: SessionState, event: dict) -> None:
        for key in ("user", "system"):
            part = event[key]
            utt = Utterance(
                index=part["utterance"]["index"],
                speaker=Speaker(part["utterance"]["speaker"]),
                text=part["utterance"]["text"],
                strategy=(Strategy(part["utterance"]["strategy"])
                          if part["utterance"]["strategy"] else None),
            )
            prior = tuple(state.utterances)
            state.utterances.append(utt)
            win = window_over(prior, state.id, utt.index, part["span"])
            triplet = BckTriplet(
                conversation_id=state.id,
                index=utt.index,
                perspective=Perspective(part["perspective"]),
                btm_terms=tuple(part["terms"]["BTM"]),
                peu_terms=tuple(part["terms"]["PEU"]),
                bcr_terms=tuple(part["terms"]["BCR"]),
                source_window=win,
            )
            state.record_triplet(triplet)
        state.turn_results.append(event["turn_result"])

    # -- session lifecycle -------------------------------------------------

    def create(self, request: CreateSessionRequest) -> SessionState:
        session_id = uuid.uuid4().hex
        try:
            mask = (AblationMask.from_dict(request.mask)
                    if request.mask is not None else AblationMask.full())
            config = (GenerationConfig.from_dict(request.generation)
                      if request.generation is not None else self.default_config)
        except (ValueError, TypeError) as exc:
            raise HTTPException(400, f"invalid overrides: {exc}") from exc
        state = SessionState(
            session_id=session_id,
            situation=request.situation.strip(),
            window_span=request.window_span or self.default_span,
            mask=mask,
            generation=config,
            created_at=time.time(),
        )
        if not state.situation:
            raise HTTPException(400, "situation must be non-empty")
        with self._registry_lock:
            self.sessions[session_id] = state
            self._locks[session_id] = threading.Lock()
        self._append_event(session_id, {
            "type": "session_created",
            "session": state.config_json(),
            "ts": state.created_at,
        })
        return state

    def get(self, session_id: str) -> SessionState:
        state = self.sessions.get(session_id)
        if state is None:
            raise HTTPException(404, f"unknown session {session_id}")
        return state

    def lock(self, session_id: str) -> threading.Lock:
        return self._locks[session_id]

    def update_settings(self, session_id: str,
                        request: UpdateSettingsRequest) -> SessionState:
        state = self.get(session_id)
        with self.lock(session_id):
            if request.window_span is not None:
                state.window_span = request.window_span
            if request.mask is not None:
                try:
                    state.mask = AblationMask.from_dict(request.mask)
                except (ValueError, TypeError) as exc:
                    raise HTTPException(400, f"invalid mask: {exc}") from exc
            self._append_event(session_id, {
                "type": "settings_updated",
                "window_span": state.window_span,
                "mask": state.mask.to_dict(),
                "ts": time.time(),
            })
        return state

    # -- the per-turn pipeline ----------------------------------------------

    def post_message(self, session_id: str, text: str) -> dict:
        state = self.get(session_id)
        if len(text) > MAX_MESSAGE_CHARS:
            raise HTTPException(413, f"message exceeds {MAX_MESSAGE_CHARS} characters")
        with self.lock(session_id):
            return self._run_turn(state, text.strip())

    def _run_turn(self, state: SessionState, text: str) -> dict:
        if not text:
            raise HTTPException(400, "message must be non-empty")

        # Everything below works on scratch values; the transcript mutates
        # only in the commit step, so any failure rolls the turn back whole.
        prior = tuple(state.utterances)
        user_index = len(prior) + 1
        user_utt = Utterance(index=user_index, speaker=Speaker.USER, text=text)
        try:
            user_window = window_over(prior, state.id, user_index,
                                      state.window_span)
            user_triplet = extract_triplet(user_window, Perspective.USER_SIDE,
                                           self.extraction_backend)

            history = prior + (user_utt,)
            lookup = {u.index: state.store.get(state.id, u.index)
                      for u in prior}
            lookup[user_index] = user_triplet
            omega = assemble_omega(
                state.situation, history, state.id, lookup.get, state.mask,
                budget=state.generation.max_input_tokens,
            )
            response = self.generation_backend.complete(
                GENERATION_PREAMBLE + omega, state.generation,
            )
            parsed = parse_target(response.text)
            if not parsed.response.strip():
                raise BackendError("generator returned an empty response")

            system_index = user_index + 1
            system_utt = Utterance(index=system_index, speaker=Speaker.SYSTEM,
                                   text=parsed.response.strip(),
                                   strategy=parsed.strategy)
            system_window = window_over(history, state.id, system_index,
                                        state.window_span)
            system_triplet = extract_triplet(
                system_window, Perspective.SYSTEM_SIDE, self.extraction_backend,
            )
        except BudgetError as exc:
            raise HTTPException(413, str(exc)) from exc
        except BackendError as exc:
            raise HTTPException(502, f"generation failed: {exc}") from exc
        except Mind2Error as exc:
            raise HTTPException(502, f"turn pipeline failed: {exc}") from exc

        turn_result = {
            "turn": system_index,
            "utterance": _utterance_json(system_utt),
            "strategy": parsed.strategy.value,
            "well_formed": parsed.well_formed,
            "omega": omega,
            "user_knowledge": _triplet_json(user_triplet),
            "system_knowledge": _triplet_json(system_triplet),
        }

        # Commit.
        state.utterances.append(user_utt)
        state.record_triplet(user_triplet)
        state.utterances.append(system_utt)
        state.record_triplet(system_triplet)
        state.turn_results.append(turn_result)
        self._append_event(state.id, {
            "type": "turn_committed",
            "user": {
                "utterance": _utterance_json(user_utt),
                "perspective": user_triplet.perspective.value,
                "span": state.window_span,
                "terms": {"BTM": list(user_triplet.btm_terms),
                          "PEU": list(user_triplet.peu_terms),
                          "BCR": list(user_triplet.bcr_terms)},
            },
            "system": {
                "utterance": _utterance_json(system_utt),
                "perspective": system_triplet.perspective.value,
                "span": state.window_span,
                "terms": {"BTM": list(system_triplet.btm_terms),
                          "PEU": list(system_triplet.peu_terms),
                          "BCR": list(system_triplet.bcr_terms)},
            },
            "turn_result": turn_result,
            "ts": time.time(),
        })
        return turn_result


def create_app(extraction_backend: Backend | None = None,
               generation_backend: Backend | None = None,
               data_dir: str | Path | None = None,
               default_config: GenerationConfig | None = None,
               default_span: int = DEFAULT_SPAN) -> FastAPI:
    """Build the service app; mock backends and a local data dir by default."""
    manager = SessionManager(
        data_dir=data_dir or os.environ.get(ENV_DATA_DIR, "mind2_sessions"),
        extraction_backend=extraction_backend or mock_extraction_backend(),
        generation_backend=generation_backend or mock_generation_backend(),
        default_config=default_config,
        default_span=default_span,
    )
    app = FastAPI(title="mind2 support-dialogue service")
    app.state.manager = manager

    token = os.environ.get(ENV_SERVICE_TOKEN)

    def require_token(request: Request):
        if token and request.headers.get("Authorization") != f"Bearer {token}":
            raise HTTPException(401, "missing or invalid bearer token")

    guarded = [Depends(require_token)]

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/sessions", status_code=201, dependencies=guarded)
    def create_session(request: CreateSessionRequest):
        return manager.create(request).config_json()

    @app.get("/sessions/{session_id}", dependencies=guarded)
    def get_session(session_id: str):
        return manager.get(session_id).session_json()

    @app.patch("/sessions/{session_id}/settings", dependencies=guarded)
    def update_settings(session_id: str, request: UpdateSettingsRequest):
        return manager.update_settings(session_id, request).config_json()

    @app.post("/sessions/{session_id}/messages", dependencies=guarded)
    def post_message(session_id: str, request: MessageRequest):
        return manager.post_message(session_id, request.text)

    @app.get("/sessions/{session_id}/trace", dependencies=guarded)
    def get_trace(session_id: str):
        return manager.get(session_id).trace_json()

    return app
