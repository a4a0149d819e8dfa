"""Named scalar results written as ``metric,value,n_samples,config_hash`` CSV."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

HEADER = ["metric", "value", "n_samples", "config_hash"]


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def format_value(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


@dataclass
class MetricReport:
    config: dict = field(default_factory=dict)
    rows: list[tuple[str, float, int]] = field(default_factory=list)

    def add(self, name: str, value: float, n_samples: int) -> None:
        self.rows.append((name, float(value), int(n_samples)))

    def __getitem__(self, name: str) -> float:
        for n, v, _ in self.rows:
            if n == name:
                return v
        raise KeyError(name)

    def write_csv(self, path: str | os.PathLike) -> None:
        h = config_hash(self.config)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HEADER)
            for name, value, n in self.rows:
                w.writerow([name, format_value(value), n, h])
