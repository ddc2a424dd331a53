"""Structured pass/fail reports for certified checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

__all__ = ["CheckReport"]


def _json_safe(value):
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if hasattr(value, "item") and not hasattr(value, "__len__"):
        return _json_safe(value.item())
    if hasattr(value, "tolist"):
        return _json_safe(value.tolist())
    return value


def _json_revive(value):
    if value == "nan":
        return math.nan
    if value == "inf":
        return math.inf
    if value == "-inf":
        return -math.inf
    if isinstance(value, dict):
        return {k: _json_revive(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_json_revive(v) for v in value]
    return value


@dataclass
class CheckReport:
    """Outcome of one certified inequality or identity check.

    ``worst_margin`` is signed slack: nonnegative means the property held
    with room to spare, negative means it was violated by that amount.
    ``passed`` is true iff the margin clears ``-tolerance`` AND every
    required hypothesis stamp was present; use :meth:`evaluate` to keep that
    invariant, direct construction is for deserialization.
    """

    name: str
    passed: bool
    worst_margin: float
    tolerance: float
    hypotheses_ok: bool = True
    hypotheses: dict[str, Any] = field(default_factory=dict)
    witness: dict[str, Any] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    metrics: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def evaluate(cls, name: str, worst_margin: float, tolerance: float,
                 hypotheses_ok: bool = True, **kw) -> "CheckReport":
        worst_margin = float(worst_margin)
        passed = bool(hypotheses_ok) and (worst_margin >= -float(tolerance))
        return cls(name=name, passed=passed, worst_margin=worst_margin,
                   tolerance=float(tolerance), hypotheses_ok=bool(hypotheses_ok), **kw)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "worst_margin": _json_safe(self.worst_margin),
            "tolerance": _json_safe(self.tolerance),
            "hypotheses_ok": self.hypotheses_ok,
            "hypotheses": _json_safe(self.hypotheses),
            "witness": _json_safe(self.witness),
            "notes": list(self.notes),
            "metrics": _json_safe(self.metrics),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CheckReport":
        return cls(
            name=data["name"],
            passed=bool(data["passed"]),
            worst_margin=float(_json_revive(data["worst_margin"])),
            tolerance=float(_json_revive(data["tolerance"])),
            hypotheses_ok=bool(data.get("hypotheses_ok", True)),
            hypotheses=_json_revive(data.get("hypotheses", {})),
            witness=_json_revive(data.get("witness", {})),
            notes=list(data.get("notes", [])),
            metrics=_json_revive(data.get("metrics", {})),
        )

    def summary_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name}: worst margin {self.worst_margin:.3e} "
                f"(tolerance {self.tolerance:.1e})")
