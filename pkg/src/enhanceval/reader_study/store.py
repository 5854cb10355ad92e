"""Reader-study session state with a crash-safe journal.

Every session appends to ``<journal_dir>/<session_id>.jsonl``: one
``created`` record holding the allocation (case order and presentation
tokens), then one ``response`` record per answer, flushed and fsynced
before the caller gets its acknowledgement.  On completion the state is
compacted into ``<session_id>.snapshot.json``; startup prefers the
snapshot and otherwise replays the journal, so a crash between an
acknowledged response and the next request loses nothing.

Tokens are opaque: clients never see case ids, and the token-to-case map
lives only here, server side.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import EngineError, ValidationError
from ..metrics import (
    balanced_accuracy,
    detection_counts,
    f1,
    precision,
    recall,
)
from ..pipeline import CaseRecord, load_intensity, load_label
from ..stats import bootstrap_multi
from ..volume_io import VoxelGrid

CASES_PER_SESSION = 100
POSITIVES_PER_SESSION = 50


class UnknownSessionError(EngineError):
    pass


class UnknownTokenError(EngineError):
    pass


class OrderingError(EngineError):
    pass


class SessionCompleteError(EngineError):
    pass


class SessionIncompleteError(EngineError):
    pass


class CapacityError(EngineError):
    pass


class DuplicateSessionError(EngineError):
    pass


@dataclass
class ResponseRecord:
    position: int
    token: str
    answer: str
    duration_ms: int
    recorded_at: float


@dataclass
class SessionState:
    session_id: str
    reader_id: str
    seed: int
    case_order: list[str]
    tokens: list[str]
    created_at: float
    cursor: int = 0
    responses: list[ResponseRecord] = field(default_factory=list)

    @property
    def status(self) -> str:
        return "complete" if self.cursor >= CASES_PER_SESSION else "active"

    def to_snapshot(self) -> dict:
        return {
            "session_id": self.session_id,
            "reader_id": self.reader_id,
            "seed": self.seed,
            "case_order": self.case_order,
            "tokens": self.tokens,
            "created_at": self.created_at,
            "cursor": self.cursor,
            "responses": [
                {
                    "position": r.position,
                    "token": r.token,
                    "answer": r.answer,
                    "duration_ms": r.duration_ms,
                    "recorded_at": r.recorded_at,
                }
                for r in self.responses
            ],
        }

    @classmethod
    def from_snapshot(cls, data: dict) -> "SessionState":
        state = cls(
            session_id=data["session_id"],
            reader_id=data["reader_id"],
            seed=data["seed"],
            case_order=data["case_order"],
            tokens=data["tokens"],
            created_at=data["created_at"],
            cursor=data["cursor"],
        )
        state.responses = [ResponseRecord(**r) for r in data["responses"]]
        return state


def _session_id(reader_id: str, seed: int) -> str:
    digest = hashlib.sha256(f"{reader_id}:{seed}".encode()).hexdigest()
    return f"s{digest[:12]}"


class _VolumeCache:
    """Small LRU of parsed intensity volumes shared by slice rendering."""

    def __init__(self, capacity: int = 32):
        self._capacity = capacity
        self._lock = threading.Lock()
        self._entries: dict[str, VoxelGrid] = {}
        self._order: list[str] = []

    def get(self, key: str, loader) -> VoxelGrid:
        with self._lock:
            if key in self._entries:
                self._order.remove(key)
                self._order.append(key)
                return self._entries[key]
        volume = loader()
        with self._lock:
            if key not in self._entries:
                self._entries[key] = volume
                self._order.append(key)
                while len(self._order) > self._capacity:
                    evicted = self._order.pop(0)
                    del self._entries[evicted]
            return self._entries[key]


class ReaderStudyStore:
    """Sessions, responses, and report analytics over one cohort manifest."""

    def __init__(
        self,
        records: list[CaseRecord],
        journal_dir: str | Path,
        min_pred_volume_cm3: float = 0.0,
    ):
        self.records = {r.case_id: r for r in records}
        self.journal_dir = Path(journal_dir)
        self.journal_dir.mkdir(parents=True, exist_ok=True)
        self.min_pred_volume_cm3 = min_pred_volume_cm3
        self._sessions: dict[str, SessionState] = {}
        self._session_locks: dict[str, threading.Lock] = {}
        self._store_lock = threading.Lock()
        self._tokens: dict[str, str] = {}  # token -> case_id
        self._flags: dict[str, tuple[bool, bool]] = {}  # case_id -> (gt+, pred+)
        self._flags_lock = threading.Lock()
        self._volumes = _VolumeCache()
        self._load_existing()

    # -- persistence --------------------------------------------------------

    def _journal_path(self, session_id: str) -> Path:
        return self.journal_dir / f"{session_id}.jsonl"

    def _snapshot_path(self, session_id: str) -> Path:
        return self.journal_dir / f"{session_id}.snapshot.json"

    def _append(self, session_id: str, record: dict) -> None:
        with self._journal_path(session_id).open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def _write_snapshot(self, state: SessionState) -> None:
        path = self._snapshot_path(state.session_id)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(state.to_snapshot(), sort_keys=True))
        tmp.replace(path)

    def _register(self, state: SessionState) -> None:
        self._sessions[state.session_id] = state
        self._session_locks[state.session_id] = threading.Lock()
        for token, case_id in zip(state.tokens, state.case_order):
            self._tokens[token] = case_id

    def _load_existing(self) -> None:
        for snapshot in sorted(self.journal_dir.glob("*.snapshot.json")):
            state = SessionState.from_snapshot(json.loads(snapshot.read_text()))
            self._register(state)
        for journal in sorted(self.journal_dir.glob("*.jsonl")):
            session_id = journal.stem
            if session_id in self._sessions:
                continue
            state = None
            for line in journal.read_text().splitlines():
                if not line.strip():
                    continue
                record = json.loads(line)
                if record["type"] == "created":
                    state = SessionState(
                        session_id=record["session_id"],
                        reader_id=record["reader_id"],
                        seed=record["seed"],
                        case_order=record["case_order"],
                        tokens=record["tokens"],
                        created_at=record["created_at"],
                    )
                elif record["type"] == "response" and state is not None:
                    state.responses.append(
                        ResponseRecord(
                            position=record["position"],
                            token=record["token"],
                            answer=record["answer"],
                            duration_ms=record["duration_ms"],
                            recorded_at=record["recorded_at"],
                        )
                    )
                    state.cursor = record["position"] + 1
            if state is not None:
                self._register(state)

    # -- case metadata ------------------------------------------------------

    def case_flags(self, case_id: str) -> tuple[bool, bool]:
        """(gt_positive, model pred_positive) for one case, cached."""
        with self._flags_lock:
            if case_id in self._flags:
                return self._flags[case_id]
        record = self.records[case_id]
        gt = load_label(record, "gt_labels")
        gt_positive = bool((gt.data == 3).any())
        pred = load_label(record, "pred_labels")
        pred_vol = int(np.count_nonzero(pred.data == 3)) * pred.voxel_volume_mm3 / 1000.0
        pred_positive = pred_vol > self.min_pred_volume_cm3
        with self._flags_lock:
            self._flags[case_id] = (gt_positive, pred_positive)
        return gt_positive, pred_positive

    def _eligible(self) -> tuple[list[str], list[str]]:
        positives, negatives = [], []
        for case_id in sorted(self.records):
            record = self.records[case_id]
            if record.split != "test" or record.paths.get("pred_labels") is None:
                continue
            gt_positive, _ = self.case_flags(case_id)
            (positives if gt_positive else negatives).append(case_id)
        return positives, negatives

    # -- session lifecycle --------------------------------------------------

    def create_session(
        self, reader_id: str, seed: int, force: bool = False
    ) -> SessionState:
        """Allocate a 100-case session: exactly 50 positive, 50 negative."""
        if not reader_id:
            raise ValidationError("reader_id must be non-empty")
        with self._store_lock:
            existing = [
                s for s in self._sessions.values() if s.reader_id == reader_id
            ]
            if existing and not force:
                raise DuplicateSessionError(
                    f"reader {reader_id!r} already has a session "
                    f"({existing[0].session_id}); pass force to replace it"
                )
            positives, negatives = self._eligible()
            half = POSITIVES_PER_SESSION
            if len(positives) < half or len(negatives) < half:
                raise CapacityError(
                    f"need >= {half} positive and >= {half} negative eligible "
                    f"cases, have {len(positives)} and {len(negatives)}"
                )
            rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
            picked_pos = [positives[i] for i in rng.choice(len(positives), half, replace=False)]
            picked_neg = [negatives[i] for i in rng.choice(len(negatives), half, replace=False)]
            case_order = picked_pos + picked_neg
            order = rng.permutation(CASES_PER_SESSION)
            case_order = [case_order[i] for i in order]
            tokens = [rng.bytes(16).hex() for _ in range(CASES_PER_SESSION)]

            session_id = _session_id(reader_id, seed)
            if existing:
                for s in existing:
                    self._retire(s.session_id)
            state = SessionState(
                session_id=session_id,
                reader_id=reader_id,
                seed=int(seed),
                case_order=case_order,
                tokens=tokens,
                created_at=time.time(),
            )
            self._journal_path(session_id).write_text("")
            self._snapshot_path(session_id).unlink(missing_ok=True)
            self._append(session_id, {**state.to_snapshot(), "type": "created"})
            self._register(state)
            return state

    def _retire(self, session_id: str) -> None:
        state = self._sessions.pop(session_id, None)
        self._session_locks.pop(session_id, None)
        if state:
            for token in state.tokens:
                self._tokens.pop(token, None)

    def get_session(self, session_id: str) -> SessionState:
        state = self._sessions.get(session_id)
        if state is None:
            raise UnknownSessionError(f"unknown session {session_id!r}")
        return state

    def next_case(self, session_id: str) -> dict:
        """Descriptor of the case at the cursor, masked behind its token."""
        state = self.get_session(session_id)
        if state.status == "complete":
            raise SessionCompleteError(f"session {session_id} is complete")
        case_id = state.case_order[state.cursor]
        record = self.records[case_id]
        sequences = [s for s in ("t1", "t2", "flair") if record.paths.get(s)]
        volume = self.volume_for_token(state.tokens[state.cursor], sequences[0])
        nx, ny, nz = volume.dims
        return {
            "token": state.tokens[state.cursor],
            "position": state.cursor,
            "total": CASES_PER_SESSION,
            "sequences": sequences,
            "slice_counts": {"sagittal": nx, "coronal": ny, "axial": nz},
        }

    def volume_for_token(self, token: str, sequence: str) -> VoxelGrid:
        case_id = self._tokens.get(token)
        if case_id is None:
            raise UnknownTokenError("unknown presentation token")
        if sequence not in ("t1", "t2", "flair"):
            raise ValidationError(f"unknown sequence {sequence!r}")
        record = self.records[case_id]
        if record.paths.get(sequence) is None:
            raise ValidationError(f"sequence {sequence!r} unavailable for this case")
        key = f"{case_id}:{sequence}"
        return self._volumes.get(key, lambda: load_intensity(record, sequence))

    def record_response(
        self, session_id: str, token: str, answer: str, duration_ms: int
    ) -> tuple[SessionState, bool]:
        """Durably record an answer; returns (state, replayed).

        An exact duplicate of the last recorded response (same token and
        answer) acknowledges again without advancing the cursor.
        """
        if answer not in ("yes", "no"):
            raise ValidationError(f"answer must be 'yes' or 'no', got {answer!r}")
        if duration_ms < 0:
            raise ValidationError("duration_ms must be non-negative")
        state = self.get_session(session_id)
        with self._session_locks[session_id]:
            if state.cursor > 0 and token == state.tokens[state.cursor - 1]:
                last = state.responses[-1]
                if last.answer == answer:
                    return state, True
                raise OrderingError(
                    "token was already answered with a different answer"
                )
            if state.status == "complete":
                raise SessionCompleteError(f"session {session_id} is complete")
            if token != state.tokens[state.cursor]:
                if token in self._tokens:
                    raise OrderingError(
                        "token does not match the case at the cursor; "
                        "responses are strictly sequential"
                    )
                raise UnknownTokenError("unknown presentation token")
            response = ResponseRecord(
                position=state.cursor,
                token=token,
                answer=answer,
                duration_ms=int(duration_ms),
                recorded_at=time.time(),
            )
            self._append(
                session_id,
                {
                    "type": "response",
                    "position": response.position,
                    "token": response.token,
                    "answer": response.answer,
                    "duration_ms": response.duration_ms,
                    "recorded_at": response.recorded_at,
                },
            )
            state.responses.append(response)
            state.cursor += 1
            if state.status == "complete":
                self._write_snapshot(state)
            return state, False

    # -- report -------------------------------------------------------------

    def session_report(self, session_id: str, iterations: int = 1000) -> dict:
        """Reader-vs-model analytics on the session's 100 cases."""
        state = self.get_session(session_id)
        if state.status != "complete":
            raise SessionIncompleteError(
                f"session {session_id} has {state.cursor}/{CASES_PER_SESSION} responses"
            )
        gt, reader, model = [], [], []
        for response in state.responses:
            case_id = state.case_order[response.position]
            gt_positive, pred_positive = self.case_flags(case_id)
            gt.append(gt_positive)
            reader.append(response.answer == "yes")
            model.append(pred_positive)

        def metric_block(predictions: list[bool]) -> dict:
            counts = detection_counts(list(zip(gt, predictions)))
            return {
                "counts": {
                    "tp": counts.tp,
                    "fp": counts.fp,
                    "tn": counts.tn,
                    "fn": counts.fn,
                },
                "balanced_accuracy": balanced_accuracy(counts),
                "sensitivity": recall(counts),
                "specificity": counts.tn / (counts.tn + counts.fp)
                if counts.tn + counts.fp
                else 0.0,
                "precision": precision(counts),
                "f1": f1(counts),
            }

        def boot(predictions: list[bool]) -> dict:
            pairs = np.array(list(zip(gt, predictions)), dtype=bool)

            def ba(resample: np.ndarray) -> float:
                return balanced_accuracy(
                    detection_counts([(bool(g), bool(p)) for g, p in resample])
                )

            summary = bootstrap_multi(
                pairs, {"balanced_accuracy": ba}, iterations=iterations,
                seed=state.seed,
            )["balanced_accuracy"]
            return summary.to_dict()

        cross = {
            "both_right": 0,
            "reader_wrong_model_right": 0,
            "model_wrong_reader_right": 0,
            "both_wrong": 0,
        }
        for g, r, m in zip(gt, reader, model):
            reader_right = r == g
            model_right = m == g
            if reader_right and model_right:
                cross["both_right"] += 1
            elif model_right:
                cross["reader_wrong_model_right"] += 1
            elif reader_right:
                cross["model_wrong_reader_right"] += 1
            else:
                cross["both_wrong"] += 1

        return {
            "session_id": session_id,
            "n": len(gt),
            "reader": metric_block(reader),
            "reader_bootstrap": boot(reader),
            "model": metric_block(model),
            "cross_table": cross,
        }
