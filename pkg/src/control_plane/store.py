"""
Append-only journal with periodic snapshots.

State is a set of named collections of JSON documents. Every mutation is a
journal line ``{"seq": n, "op": "put"|"delete", "collection": c, "key": k,
"doc": {...}}`` written before it is applied; after ``snapshot_every``
entries the whole state is written to ``snapshot.json`` and the journal is
truncated. Loading replays the journal on top of the last snapshot.
"""
import json
import os
import threading
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple

from ..logger import logger, log_action

SNAPSHOT_FILE = "snapshot.json"
JOURNAL_FILE = "journal.jsonl"


class JournaledStore:
    def __init__(self, state_dir: Optional[str] = None, snapshot_every: int = 200):
        self.state_dir = Path(state_dir) if state_dir else None
        self.snapshot_every = max(1, snapshot_every)
        self._lock = threading.RLock()
        self._collections: Dict[str, Dict[str, dict]] = {}
        self._seq = 0
        self._since_snapshot = 0
        self._journal = None
        if self.state_dir is not None:
            self.state_dir.mkdir(parents=True, exist_ok=True)
            self._load()
            self._journal = (self.state_dir / JOURNAL_FILE).open("a", encoding="utf-8")

    @property
    def durable(self) -> bool:
        return self.state_dir is not None

    @property
    def seq(self) -> int:
        return self._seq

    # ---- recovery ----

    def _load(self):
        snapshot = self.state_dir / SNAPSHOT_FILE
        if snapshot.exists():
            data = json.loads(snapshot.read_text(encoding="utf-8"))
            self._seq = data.get("seq", 0)
            self._collections = data.get("collections", {})

        journal = self.state_dir / JOURNAL_FILE
        replayed = 0
        if journal.exists():
            with journal.open(encoding="utf-8") as f:
                for line in f:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        entry = json.loads(line)
                    except json.JSONDecodeError:
                        # torn final write
                        log_action(logger, 'JOURNAL_TRUNCATED', message=f"ignoring unreadable entry after seq {self._seq}")
                        break
                    if entry["seq"] <= self._seq:
                        continue
                    self._apply(entry)
                    self._seq = entry["seq"]
                    replayed += 1
        self._since_snapshot = replayed
        if self._seq:
            log_action(logger, 'STATE_RECOVERED', message=f"seq={self._seq}, {replayed} journal entries replayed")

    # ---- mutation ----

    def _apply(self, entry: dict):
        collection = self._collections.setdefault(entry["collection"], {})
        if entry["op"] == "put":
            collection[entry["key"]] = entry["doc"]
        else:
            collection.pop(entry["key"], None)

    def _write(self, op: str, collection: str, key: str, doc: Optional[dict] = None):
        with self._lock:
            entry = {"seq": self._seq + 1, "op": op, "collection": collection, "key": key}
            if doc is not None:
                entry["doc"] = doc
            if self._journal is not None:
                self._journal.write(json.dumps(entry, separators=(",", ":")) + "\n")
                self._journal.flush()
            self._apply(entry)
            self._seq = entry["seq"]
            self._since_snapshot += 1
            if self._journal is not None and self._since_snapshot >= self.snapshot_every:
                self.snapshot()

    def put(self, collection: str, key: str, doc: dict):
        self._write("put", collection, str(key), doc)

    def delete(self, collection: str, key: str):
        self._write("delete", collection, str(key))

    def snapshot(self):
        """Write the full state and start a fresh journal"""
        if self.state_dir is None:
            return
        with self._lock:
            target = self.state_dir / SNAPSHOT_FILE
            tmp = target.with_suffix(".tmp")
            tmp.write_text(json.dumps({"seq": self._seq, "collections": self._collections}), encoding="utf-8")
            os.replace(tmp, target)
            self._journal.close()
            self._journal = (self.state_dir / JOURNAL_FILE).open("w", encoding="utf-8")
            self._since_snapshot = 0

    # ---- reads ----

    def get(self, collection: str, key: str) -> Optional[dict]:
        with self._lock:
            return self._collections.get(collection, {}).get(str(key))

    def items(self, collection: str) -> Iterator[Tuple[str, dict]]:
        with self._lock:
            return iter(list(self._collections.get(collection, {}).items()))

    def count(self, collection: str) -> int:
        with self._lock:
            return len(self._collections.get(collection, {}))

    def close(self):
        with self._lock:
            if self._journal is not None:
                self._journal.close()
                self._journal = None
