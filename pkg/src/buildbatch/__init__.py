"""Build-target batching: grouping, cost-bounded batching, learned estimators,
and a simulated build cluster to evaluate batching policies against."""

__version__ = "0.1.0"
