"""Read-only charting companion for the re-ranker benchmark CSVs.

Consumes the frozen schema-versioned sweep and rel-perf CSVs and renders
metric-versus-savings curves and ablation bar charts. All numbers come from
the harness; the only computation here is re-deriving rel-perf for a label
cross-check.
"""

from .reader import RelPerfFrame, SchemaMismatch, SweepFrame
from .charts import plot_relperf, plot_sweep

__all__ = ["SweepFrame", "RelPerfFrame", "SchemaMismatch", "plot_sweep", "plot_relperf"]
