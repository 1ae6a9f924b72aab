"""Deterministic simulator of a distributed database on a hybrid cloud.

The package models a query workload replayed against a topology of private
and public nodes, measures per-query latency, optimizes fragment placement,
and closes a feedback loop that rescales public capacity at run time.
"""

__version__ = "0.1.0"
