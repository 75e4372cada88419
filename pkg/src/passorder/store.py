"""Durable store: content-addressed IR files plus an sqlite database.

Layout under the root directory::

    ir/<sha256>.ll      IR bodies, named by the hash of their canonical text
    passorder.sqlite    ir_artifacts, runtimes, states, transitions, faults,
                        programs, excluded, runs, meta
"""

from __future__ import annotations

import json
import os
import queue
import sqlite3
import tempfile
import threading
import time
from pathlib import Path
from typing import Optional

from .exceptions import IntegrityError
from .state import (ActionHistory, AgentState, Experience, IrArtifact, Origin,
                    TransitionRecord, ir_id)

SCHEMA_VERSION = "1"

_SCHEMA = """
CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT);
CREATE TABLE IF NOT EXISTS ir_artifacts (
    id TEXT PRIMARY KEY, origin TEXT NOT NULL, parent_id TEXT, action_id INTEGER);
CREATE TABLE IF NOT EXISTS runtimes (
    ir_id TEXT PRIMARY KEY, seconds REAL NOT NULL, policy TEXT, measured_at REAL);
CREATE TABLE IF NOT EXISTS states (
    fp TEXT PRIMARY KEY, level TEXT NOT NULL, ir_id TEXT NOT NULL,
    history TEXT NOT NULL, program_id TEXT);
CREATE TABLE IF NOT EXISTS transitions (
    level TEXT NOT NULL, state TEXT NOT NULL, action INTEGER NOT NULL,
    result_ir TEXT NOT NULL, reward REAL NOT NULL, runtime_after REAL NOT NULL,
    measured_at REAL, next_state TEXT NOT NULL, discount REAL NOT NULL,
    terminal INTEGER NOT NULL, PRIMARY KEY (level, state, action));
CREATE TABLE IF NOT EXISTS faults (
    id INTEGER PRIMARY KEY AUTOINCREMENT, level TEXT, state TEXT, action INTEGER,
    task_id TEXT, message TEXT, stderr TEXT, at REAL);
CREATE TABLE IF NOT EXISTS programs (
    program_id TEXT PRIMARY KEY, base_ir TEXT NOT NULL, base_runtime REAL NOT NULL,
    o3_ir TEXT NOT NULL, o3_runtime REAL NOT NULL);
CREATE TABLE IF NOT EXISTS excluded (program_id TEXT PRIMARY KEY, reason TEXT);
CREATE TABLE IF NOT EXISTS runs (
    run_id TEXT PRIMARY KEY, config TEXT NOT NULL, created_at REAL, step INTEGER DEFAULT 0);
"""


class Store:
    def __init__(self, root):
        self.root = Path(root)
        self.ir_dir = self.root / "ir"
        self.ir_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._db = sqlite3.connect(self.root / "passorder.sqlite", check_same_thread=False)
        with self._lock, self._db:
            self._db.executescript(_SCHEMA)
            row = self._db.execute("SELECT value FROM meta WHERE key='schema'").fetchone()
            if row is None:
                self._db.execute("INSERT INTO meta VALUES ('schema', ?)", (SCHEMA_VERSION,))
            elif row[0] != SCHEMA_VERSION:
                raise IntegrityError(f"store schema {row[0]} != supported {SCHEMA_VERSION}")

    def close(self):
        with self._lock:
            self._db.close()

    def _q(self, sql, args=()):
        with self._lock:
            return self._db.execute(sql, args).fetchall()

    def _w(self, sql, args=()):
        with self._lock, self._db:
            self._db.execute(sql, args)

    # -- IR artifacts ----------------------------------------------------

    def ir_path(self, key: str) -> Path:
        return self.ir_dir / f"{key}.ll"

    def has_ir(self, key: str) -> bool:
        return self.ir_path(key).exists()

    def put_ir(self, artifact) -> str:
        if isinstance(artifact, str):
            artifact = IrArtifact.from_body(artifact)
        path = self.ir_path(artifact.id)
        if not path.exists():
            fd, tmp = tempfile.mkstemp(dir=self.ir_dir, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(artifact.body)
            os.replace(tmp, path)
        o = artifact.origin
        self._w("INSERT OR IGNORE INTO ir_artifacts VALUES (?,?,?,?)",
                (artifact.id, o.kind, o.parent_id, o.action_id))
        return artifact.id

    def get_ir(self, key: str) -> str:
        path = self.ir_path(key)
        if not path.exists():
            raise KeyError(key)
        body = path.read_text(encoding="utf-8")
        if ir_id(body) != key:
            raise IntegrityError(f"IR artifact {key} does not match its content hash")
        return body

    def get_artifact(self, key: str) -> IrArtifact:
        row = self._q("SELECT origin, parent_id, action_id FROM ir_artifacts WHERE id=?", (key,))
        origin = Origin(*row[0]) if row else Origin()
        return IrArtifact(key, self.get_ir(key), origin)

    def ir_ids(self) -> list:
        return sorted(p.stem for p in self.ir_dir.glob("*.ll"))

    def verify(self) -> list:
        """Ids whose stored body no longer hashes to the id."""
        bad = []
        for key in self.ir_ids():
            try:
                self.get_ir(key)
            except IntegrityError:
                bad.append(key)
        return bad

    # -- runtimes --------------------------------------------------------

    def put_runtime(self, key: str, seconds: float, policy: Optional[dict] = None) -> None:
        self._w("INSERT OR REPLACE INTO runtimes VALUES (?,?,?,?)",
                (key, float(seconds), json.dumps(policy or {}), time.time()))

    def get_runtime(self, key: str) -> Optional[float]:
        row = self._q("SELECT seconds FROM runtimes WHERE ir_id=?", (key,))
        return row[0][0] if row else None

    def runtimes(self) -> dict:
        return dict(self._q("SELECT ir_id, seconds FROM runtimes"))

    # -- states and transitions -----------------------------------------

    def put_state(self, state: AgentState, level: str) -> None:
        self._w("INSERT OR IGNORE INTO states VALUES (?,?,?,?,?)",
                (state.fingerprint, level, state.ir, json.dumps(state.history.to_dict()),
                 state.program_id))

    def get_state(self, fp: str) -> Optional[AgentState]:
        row = self._q("SELECT ir_id, history, program_id FROM states WHERE fp=?", (fp,))
        if not row:
            return None
        ir, hist, pid = row[0]
        return AgentState(ir, ActionHistory.from_dict(json.loads(hist)), pid)

    def states(self, level: str) -> dict:
        rows = self._q("SELECT fp, ir_id, history, program_id FROM states WHERE level=?", (level,))
        return {fp: AgentState(ir, ActionHistory.from_dict(json.loads(h)), pid)
                for fp, ir, h, pid in rows}

    def upsert_transition(self, record: TransitionRecord, level: str, next_state: str,
                          discount: float, terminal: bool) -> None:
        """Insert or replace the record for ``(state, action)``; refs must exist."""
        if not self.has_ir(record.result_ir):
            raise IntegrityError(f"transition references unknown IR {record.result_ir}")
        for fp in (record.state, next_state):
            if not self._q("SELECT 1 FROM states WHERE fp=?", (fp,)):
                raise IntegrityError(f"transition references unknown state {fp}")
        self._w("INSERT OR REPLACE INTO transitions VALUES (?,?,?,?,?,?,?,?,?,?)",
                (level, record.state, record.action, record.result_ir, record.reward,
                 record.runtime_after, record.measured_at, next_state, float(discount),
                 int(terminal)))

    def lookup(self, key: tuple, level: str) -> Optional[TransitionRecord]:
        rows = self._q("SELECT state, action, result_ir, reward, runtime_after, measured_at "
                       "FROM transitions WHERE level=? AND state=? AND action=?",
                       (level, key[0], int(key[1])))
        return TransitionRecord(*rows[0]) if rows else None

    def transitions(self, level: str) -> list:
        """All ``(record, experience)`` pairs of a level, oldest first."""
        rows = self._q("SELECT state, action, result_ir, reward, runtime_after, measured_at, "
                       "next_state, discount, terminal FROM transitions WHERE level=? "
                       "ORDER BY measured_at, rowid", (level,))
        out = []
        for s, a, ir, r, t, at, nxt, d, term in rows:
            out.append((TransitionRecord(s, a, ir, r, t, at), Experience(s, a, r, nxt, d, bool(term))))
        return out

    def count_transitions(self, level: Optional[str] = None) -> int:
        if level is None:
            return self._q("SELECT COUNT(*) FROM transitions")[0][0]
        return self._q("SELECT COUNT(*) FROM transitions WHERE level=?", (level,))[0][0]

    def put_fault(self, level, state, action, task_id, message, stderr="") -> None:
        self._w("INSERT INTO faults (level, state, action, task_id, message, stderr, at) "
                "VALUES (?,?,?,?,?,?,?)", (level, state, action, task_id, message, stderr, time.time()))

    def faults(self) -> list:
        return self._q("SELECT level, state, action, task_id, message, stderr FROM faults ORDER BY id")

    # -- programs --------------------------------------------------------

    def put_baseline(self, b) -> None:
        base = self.put_ir(IrArtifact.from_body(b.base_ir))
        o3 = self.put_ir(IrArtifact.from_body(b.o3_ir, Origin("o3_baseline", base)))
        self.put_runtime(base, b.base_runtime)
        self.put_runtime(o3, b.o3_runtime)
        self._w("INSERT OR REPLACE INTO programs VALUES (?,?,?,?,?)",
                (b.program_id, base, b.base_runtime, o3, b.o3_runtime))

    def get_baseline(self, program_id: str):
        from .environment import Baseline
        row = self._q("SELECT base_ir, base_runtime, o3_ir, o3_runtime FROM programs "
                      "WHERE program_id=?", (program_id,))
        if not row:
            return None
        base, tb, o3, to3 = row[0]
        return Baseline(program_id, self.get_ir(base), tb, self.get_ir(o3), to3)

    def baseline_ids(self, program_id: str):
        row = self._q("SELECT base_ir, base_runtime, o3_ir, o3_runtime FROM programs "
                      "WHERE program_id=?", (program_id,))
        return row[0] if row else None

    def programs(self) -> list:
        return [r[0] for r in self._q("SELECT program_id FROM programs ORDER BY program_id")]

    def exclude(self, program_id: str, reason: str) -> None:
        self._w("INSERT OR REPLACE INTO excluded VALUES (?,?)", (program_id, reason))

    def excluded(self) -> dict:
        return dict(self._q("SELECT program_id, reason FROM excluded"))

    # -- runs ------------------------------------------------------------

    def put_run(self, run_id: str, config: dict) -> None:
        self._w("INSERT OR IGNORE INTO runs (run_id, config, created_at) VALUES (?,?,?)",
                (run_id, json.dumps(config, sort_keys=True), time.time()))

    def set_run_step(self, run_id: str, step: int) -> None:
        self._w("UPDATE runs SET step=? WHERE run_id=?", (int(step), run_id))

    def get_run(self, run_id: str) -> Optional[dict]:
        row = self._q("SELECT config, step FROM runs WHERE run_id=?", (run_id,))
        if not row:
            return None
        return {"config": json.loads(row[0][0]), "step": row[0][1]}


class BackgroundWriter:
    """Serializes store writes on one thread; ``flush`` waits for the queue."""

    def __init__(self, store: Store):
        self.store = store
        self._q: queue.Queue = queue.Queue()
        self.errors: list = []
        self._thread = threading.Thread(target=self._loop, name="store-writer", daemon=True)
        self._thread.start()

    def submit(self, fn, *args, **kwargs) -> None:
        self._q.put((fn, args, kwargs))

    def _loop(self):
        while True:
            item = self._q.get()
            try:
                if item is None:
                    return
                fn, args, kwargs = item
                try:
                    fn(*args, **kwargs)
                except Exception as e:  # keep the writer alive; surfaced by flush()
                    self.errors.append(e)
            finally:
                self._q.task_done()

    def flush(self) -> None:
        self._q.join()
        if self.errors:
            err, self.errors = self.errors[0], []
            raise err

    def close(self) -> None:
        self._q.put(None)
        self._thread.join()
