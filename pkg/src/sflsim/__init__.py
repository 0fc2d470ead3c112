"""Desk-scale simulator for partitioned federated learning.

Implements four training modes over a shared numpy layer kernel: classic
federated averaging, split training with activation/gradient exchange,
local-loss split training with an auxiliary head, and replay training
(frozen pretrained device stack, periodically transmitted 8-bit activations,
server-side replay buffer). Ships an exact analytic communication and
computation cost model, a first-order network latency simulator, and
convergence diagnostics.
"""

__version__ = "0.1.0"
