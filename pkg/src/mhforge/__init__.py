"""Multi-head CNN forge: build, train, and cost-compare shared-backbone classifier variants."""

__version__ = "0.1.0"
