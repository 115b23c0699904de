"""
asyncdyna - asynchronous model-based reinforcement learning at desk scale.

Three workers (data collection, model learning, policy improvement) that
talk only through three servers, plus the synchronous and partially
asynchronous baselines and a benchmark harness.
"""

__version__ = "0.1.0"
