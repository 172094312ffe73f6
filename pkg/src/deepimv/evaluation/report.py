"""Tabular experiment results with mean and 95% CI per condition."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from ..metrics import mean_ci


@dataclass
class MetricsReport:
    """Rows keyed by condition columns; each row keeps its per-repeat values."""

    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    metric: str = "auroc"
    unit: str = ""
    extras: dict = field(default_factory=dict)

    def add(self, condition: dict, values) -> None:
        values = [float(v) for v in values]
        mean, ci = mean_ci(values)
        self.rows.append({**condition, "values": values, "mean": mean, "ci": ci})

    def get(self, **condition) -> dict:
        for r in self.rows:
            if all(r.get(k) == v for k, v in condition.items()):
                return r
        raise KeyError(condition)

    def mean(self, **condition) -> float:
        return self.get(**condition)["mean"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = self.columns + [f"{self.metric}_mean", f"{self.metric}_ci95", "repeats"]
        if self.unit:
            head.append("unit")
        w.writerow(head)
        for r in self.rows:
            line = [r[c] for c in self.columns] + [repr(r["mean"]), repr(r["ci"]), len(r["values"])]
            if self.unit:
                line.append(self.unit)
            w.writerow(line)
        return buf.getvalue()

    def to_long_csv(self) -> str:
        """One line per (condition, repeat) for plotting."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns + ["repeat", self.metric])
        for r in self.rows:
            for i, v in enumerate(r["values"]):
                w.writerow([r[c] for c in self.columns] + [i, repr(v)])
        return buf.getvalue()

    def write(self, path, long_path=None) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())
        if long_path is not None:
            with open(long_path, "w", encoding="utf-8", newline="") as fh:
                fh.write(self.to_long_csv())

    def format(self) -> str:
        lines = []
        for r in self.rows:
            cond = " ".join(f"{c}={r[c]}" for c in self.columns)
            lines.append(f"{cond}: {r['mean']:.3f} +/- {r['ci']:.3f}")
        return "\n".join(lines)
