"""Hybrid stack unwinding, symbolization and cross-rank straggler diagnosis
for simulated distributed training jobs."""

__version__ = "0.1.0"
