"""CSV parsing with schema pinning.

Unknown schema versions are rejected outright; rows flagged with an error
are skipped but counted so callers can warn.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

SWEEP_SCHEMA = "1"
RELPERF_SCHEMA = "1"


class SchemaMismatch(ValueError):
    """The CSV declares a schema this tool does not understand."""


class BadInput(ValueError):
    """The CSV is empty, malformed, or missing required rows."""


@dataclass
class SweepRow:
    config_id: str
    mode: str
    depth: int
    flops_savings: float | None
    mrr_at_10: float
    ndcg_at_10: float


@dataclass
class SweepFrame:
    """Parsed sweep rows grouped by mode, baseline row kept separate."""

    rows: list[SweepRow]
    baseline: SweepRow | None
    skipped_errors: int = 0

    @property
    def modes(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.rows:
            seen.setdefault(r.mode, None)
        return list(seen)

    def by_mode(self, mode: str) -> list[SweepRow]:
        return [r for r in self.rows if r.mode == mode]

    @classmethod
    def read(cls, path) -> "SweepFrame":
        try:
            with open(path, newline="") as f:
                raw = list(csv.DictReader(f))
        except OSError as e:
            raise BadInput(f"cannot read {path}: {e}") from None
        if not raw:
            raise BadInput(f"{path}: no data rows")
        needed = {"schema_version", "config_id", "mode", "depth", "flops_savings",
                  "mrr_at_10", "ndcg_at_10"}
        if not needed <= set(raw[0]):
            raise BadInput(f"{path}: missing columns {sorted(needed - set(raw[0]))}")
        rows: list[SweepRow] = []
        baseline = None
        skipped = 0
        for rec in raw:
            if rec["schema_version"] != SWEEP_SCHEMA:
                raise SchemaMismatch(f"{path}: schema {rec['schema_version']!r}, "
                                     f"this tool reads {SWEEP_SCHEMA!r}")
            if rec.get("error"):
                skipped += 1
                continue
            row = SweepRow(
                config_id=rec["config_id"], mode=rec["mode"],
                depth=int(rec["depth"] or 0),
                flops_savings=float(rec["flops_savings"]) if rec["flops_savings"] else None,
                mrr_at_10=float(rec["mrr_at_10"]), ndcg_at_10=float(rec["ndcg_at_10"]))
            if row.mode == "baseline":
                baseline = row
            else:
                rows.append(row)
        if not rows and baseline is None:
            raise BadInput(f"{path}: only error rows")
        return cls(rows=rows, baseline=baseline, skipped_errors=skipped)


@dataclass
class RelPerfRow:
    variant: str
    mrr_at_10: float
    rel_perf_pct: float


@dataclass
class RelPerfFrame:
    baseline: RelPerfRow
    upperbound: RelPerfRow
    variants: list[RelPerfRow] = field(default_factory=list)

    @classmethod
    def read(cls, path) -> "RelPerfFrame":
        try:
            with open(path, newline="") as f:
                raw = list(csv.DictReader(f))
        except OSError as e:
            raise BadInput(f"cannot read {path}: {e}") from None
        if not raw:
            raise BadInput(f"{path}: no data rows")
        needed = {"schema_version", "variant", "mrr_at_10", "rel_perf_pct"}
        if not needed <= set(raw[0]):
            raise BadInput(f"{path}: missing columns {sorted(needed - set(raw[0]))}")
        baseline = upperbound = None
        variants = []
        for rec in raw:
            if rec["schema_version"] != RELPERF_SCHEMA:
                raise SchemaMismatch(f"{path}: schema {rec['schema_version']!r}, "
                                     f"this tool reads {RELPERF_SCHEMA!r}")
            row = RelPerfRow(rec["variant"], float(rec["mrr_at_10"]),
                             float(rec["rel_perf_pct"]))
            if row.variant == "baseline":
                baseline = row
            elif row.variant == "upperbound":
                upperbound = row
            else:
                variants.append(row)
        if baseline is None or upperbound is None:
            raise BadInput(f"{path}: needs baseline and upperbound rows")
        return cls(baseline=baseline, upperbound=upperbound, variants=variants)
