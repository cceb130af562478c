"""Deterministic simulator and library for DAG-ledger asynchronous federated learning."""

__version__ = "0.1.0"
