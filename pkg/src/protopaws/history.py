"""Per-epoch metric records, serialized as JSON lines."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)

    def append(self, **fields) -> None:
        self.records.append(dict(fields))

    def to_jsonl(self, path) -> None:
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def from_jsonl(cls, path) -> "TrainHistory":
        text = Path(path).read_text()
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])

    def last(self, key: str):
        return self.records[-1][key]

    def column(self, key: str) -> list:
        return [r[key] for r in self.records]
