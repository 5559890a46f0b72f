"""
Certificate records shared by the validation and certification modules.

A certificate is a named numeric check: it passes iff its margin is
strictly positive. Failures are data, not exceptions.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np


def to_plain(value: Any) -> Any:
    """Convert numpy scalars/arrays into JSON-friendly Python values."""
    if isinstance(value, np.ndarray):
        return [to_plain(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    return value


@dataclass(frozen=True)
class Certificate:
    """A named check with its worst-case margin and witness."""

    name: str
    passed: bool
    margin: float
    witness: Optional[Any] = None
    details: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_margin(
        cls,
        name: str,
        margin: float,
        witness: Optional[Any] = None,
        **details: Any,
    ) -> "Certificate":
        """Build a certificate that passes iff margin > 0."""
        margin = float(margin)
        return cls(
            name=name,
            passed=bool(np.isfinite(margin) and margin > 0.0),
            margin=margin,
            witness=to_plain(witness),
            details=to_plain(details),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "check": self.name,
            "pass": self.passed,
            "margin": self.margin,
            "worst_point": self.witness,
            **({"details": self.details} if self.details else {}),
        }


@dataclass(frozen=True)
class CertificateReport:
    """An ordered collection of certificates."""

    title: str
    checks: List[Certificate]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> List[Certificate]:
        return [check for check in self.checks if not check.passed]

    def get(self, name: str) -> Certificate:
        """
        Look up a check by name.

        Raises:
            KeyError: If no check has that name
        """
        for check in self.checks:
            if check.name == name:
                return check
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "title": self.title,
            "pass": self.passed,
            "checks": [check.to_dict() for check in self.checks],
        }
