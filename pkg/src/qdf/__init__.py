"""Quantum deep field: LCAO over learnable GTOs with a DNN energy functional
and a DNN Hohenberg-Kohn map."""

__version__ = "0.1.0"
