"""Append-only sample log with an in-memory (agent, oid) index.

One JSON object per line. The index keeps only timestamps and file offsets
per stream, so memory stays small while the log grows. A torn final line
(crash mid-write) is cut off when the log is reopened.
"""
from __future__ import annotations

import bisect
import heapq
import json
import os
import threading
from array import array
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .errors import BadFilter
from .metrics import Classification, QoSSample


@dataclass(frozen=True)
class StoredSample:
    sample: QoSSample
    classification: Classification
    report_id: Optional[str] = None


def encode_record(sample: QoSSample, classification: Classification,
                  report_id: Optional[str] = None) -> bytes:
    d = sample.to_dict()
    d["classification"] = classification.value
    if report_id is not None:
        d["report_id"] = report_id
    return json.dumps(d, sort_keys=True, separators=(",", ":"),
                      allow_nan=False).encode("utf-8") + b"\n"


def decode_record(line: bytes) -> StoredSample:
    d = json.loads(line)
    return StoredSample(QoSSample.from_dict(d), Classification(d["classification"]),
                        d.get("report_id"))


class SampleStore:
    def __init__(self, path, fsync: bool = False):
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.Lock()
        self._streams: dict[tuple[str, str], tuple[array, array]] = {}
        self._report_ids: set[str] = set()
        self._count = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._recover()
        self._fh = open(self.path, "ab")

    def _recover(self):
        if not self.path.exists():
            return
        good = 0
        with open(self.path, "rb") as fh:
            while True:
                line = fh.readline()
                if not line:
                    break
                if not line.endswith(b"\n"):
                    break
                try:
                    rec = decode_record(line)
                except (ValueError, KeyError, TypeError):
                    break
                self._index(rec, good)
                good += len(line)
        if good != self.path.stat().st_size:
            with open(self.path, "r+b") as fh:
                fh.truncate(good)

    def _index(self, rec: StoredSample, offset: int):
        s = rec.sample
        key = (s.agent_id, str(s.oid))
        ts, offs = self._streams.setdefault(key, (array("q"), array("q")))
        # samples normally arrive in order; bisect keeps late ones sorted
        if not ts or s.timestamp_utc_ms >= ts[-1]:
            ts.append(s.timestamp_utc_ms)
            offs.append(offset)
        else:
            i = bisect.bisect_right(ts, s.timestamp_utc_ms)
            ts.insert(i, s.timestamp_utc_ms)
            offs.insert(i, offset)
        if rec.report_id is not None:
            self._report_ids.add(rec.report_id)
        self._count += 1

    def append(self, items: Iterable[tuple[QoSSample, Classification]],
               report_id: Optional[str] = None) -> int:
        """Durably append samples; returns how many were written."""
        recs = [(s, c, encode_record(s, c, report_id)) for s, c in items]
        if not recs:
            return 0
        with self._lock:
            start = self._fh.tell()
            self._fh.write(b"".join(r[2] for r in recs))
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
            off = start
            for s, c, raw in recs:
                self._index(StoredSample(s, c, report_id), off)
                off += len(raw)
        return len(recs)

    def has_report(self, report_id: str) -> bool:
        with self._lock:
            return report_id in self._report_ids

    def __len__(self):
        with self._lock:
            return self._count

    def streams(self) -> list[tuple[str, str]]:
        with self._lock:
            return list(self._streams)

    def query(self, agent_id: Optional[str] = None, oid=None, from_ms: Optional[int] = None,
              to_ms: Optional[int] = None,
              classification: Optional[Classification] = None) -> list[StoredSample]:
        """Matching samples in timestamp order (append order among equal stamps)."""
        if from_ms is not None and to_ms is not None and from_ms > to_ms:
            raise BadFilter(f"inverted time range [{from_ms}, {to_ms}]")
        if isinstance(classification, str):
            classification = Classification(classification)
        oid_s = str(oid) if oid is not None else None
        lo_ts = from_ms if from_ms is not None else -(1 << 63)
        hi_ts = to_ms if to_ms is not None else (1 << 63) - 1
        picked = []
        with self._lock:
            for (a, o), (ts, offs) in self._streams.items():
                if (agent_id is not None and a != agent_id) or (oid_s is not None and o != oid_s):
                    continue
                i = bisect.bisect_left(ts, lo_ts)
                j = bisect.bisect_right(ts, hi_ts)
                if i < j:
                    picked.append(list(zip(ts[i:j], offs[i:j])))
        out = []
        with open(self.path, "rb") as fh:
            for _, off in heapq.merge(*picked):
                fh.seek(off)
                rec = decode_record(fh.readline())
                if classification is None or rec.classification is classification:
                    out.append(rec)
        return out

    def close(self):
        with self._lock:
            self._fh.close()
