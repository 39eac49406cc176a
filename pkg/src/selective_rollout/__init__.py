"""Early cutting of zero-variance GRPO rollout groups from in-group divergence."""
from __future__ import annotations

__version__ = "0.1.0"
