"""Streaming JSON-lines event log."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Iterator, TextIO

FORMAT_VERSION = 1


@dataclass(frozen=True)
class EventLogRecord:
    time_us: int
    module: str
    tag: str
    payload: dict

    def to_json(self) -> str:
        return json.dumps({"t_us": self.time_us, "module": self.module, "tag": self.tag, **self.payload},
                          separators=(",", ":"), sort_keys=False)


def _plain(v: Any):
    # numpy scalars -> python so json stays stable
    if hasattr(v, "item") and not isinstance(v, (list, dict, str)):
        return v.item()
    return v


class EventLog:
    """Writes each record as it arrives; nothing is buffered beyond the file object.

    ``sink=None`` discards records but still enforces time ordering and keeps
    a count, which is what long runs without an output directory use.
    """

    def __init__(self, sink: TextIO | None = None, trial: int | None = None):
        self.sink = sink
        self.trial = trial
        self.count = 0
        self.last_time = None
        if sink is not None:
            head = {"format_version": FORMAT_VERSION}
            if trial is not None:
                head["trial"] = trial
            sink.write(json.dumps(head) + "\n")

    def record(self, time_us: int, module: str, tag: str, **payload) -> None:
        if self.last_time is not None and time_us < self.last_time:
            raise ValueError(f"event log out of order: {time_us} after {self.last_time}")
        self.last_time = time_us
        self.count += 1
        if self.sink is not None:
            rec = EventLogRecord(int(time_us), module, tag, {k: _plain(v) for k, v in payload.items()})
            self.sink.write(rec.to_json() + "\n")


def read_events(path) -> Iterator[dict]:
    """Yield event dicts from a log file, skipping the header line."""
    with open(path) as fh:
        first = True
        for line in fh:
            d = json.loads(line)
            if first:
                first = False
                if "format_version" in d and "tag" not in d:
                    continue
            yield d
