"""Shared report record emitted by every pipeline stage."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any


@dataclass
class StageReport:
    """What a stage did: tag, wall time, and stage-specific details.

    duration_seconds is kept out of to_dict() so manifests stay
    bit-identical across reruns; timings travel in a sidecar file.
    """

    stage: str
    duration_seconds: float = 0.0
    details: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"stage": self.stage, "details": self.details}
