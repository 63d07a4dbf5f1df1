"""Measurement toolkit for Ethereum's devp2p network.

Discovery (discv4), RLPx sessions, fork-id checks, a measurement pipeline,
and a deterministic simulated network to exercise all of it offline.
"""

__version__ = "0.1.0"
