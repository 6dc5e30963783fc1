"""
Seeded synthetic datasets with a known confidence-to-accuracy relation.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from marshmallow import ValidationError

from .settings import config
from .types import Dataset, MeasurementRecord


LOG = logging.getLogger(__name__)


class ProfileKind(str, Enum):
    identity = "identity"
    overconfident_power = "overconfident_power"
    underconfident_power = "underconfident_power"
    base_rate = "base_rate"


@dataclass(frozen=True)
class MiscalibrationProfile:
    """
    Probability g(c) that a record with confidence c is correct:
    identity c, power profiles c ** gamma, base rate a constant p.
    """

    kind: ProfileKind
    parameter: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ProfileKind(self.kind))
        kind, parameter = self.kind, self.parameter
        if kind is ProfileKind.identity:
            return
        if parameter is None or not np.isfinite(parameter):
            raise ValidationError(
                f"Profile {kind.value} needs a parameter.", field_name="profile"
            )
        if kind is ProfileKind.overconfident_power and not parameter > 1:
            raise ValidationError(
                "Overconfident profile needs gamma > 1.", field_name="profile"
            )
        if kind is ProfileKind.underconfident_power and not 0 < parameter < 1:
            raise ValidationError(
                "Underconfident profile needs 0 < gamma < 1.", field_name="profile"
            )
        if kind is ProfileKind.base_rate and not 0 <= parameter <= 1:
            raise ValidationError(
                "Base rate must be within [0, 1].", field_name="profile"
            )

    @classmethod
    def parse(cls, value: str) -> "MiscalibrationProfile":
        """
        Parse `kind` or `kind:parameter`, e.g. `overconfident_power:2`.
        """
        kind, _, parameter = value.partition(":")
        try:
            profile_kind = ProfileKind(kind.strip())
        except ValueError:
            raise ValidationError(
                f"Unknown profile {kind!r}, use one of "
                f"{', '.join(k.value for k in ProfileKind)}.",
                field_name="profile",
            )
        try:
            number = float(parameter) if parameter else None
        except ValueError:
            raise ValidationError(
                f"Invalid profile parameter {parameter!r}.", field_name="profile"
            )
        return cls(kind=profile_kind, parameter=number)

    def accuracy(self, confidence: np.ndarray) -> np.ndarray:
        confidence = np.asarray(confidence, dtype=np.float64)
        if self.kind is ProfileKind.identity:
            return confidence.copy()
        if self.kind is ProfileKind.base_rate:
            return np.full_like(confidence, self.parameter)
        return confidence ** self.parameter

    def __str__(self) -> str:
        if self.parameter is None:
            return self.kind.value
        return f"{self.kind.value}:{self.parameter:g}"


def generate(
    profile: MiscalibrationProfile,
    n: int,
    epsilon: float,
    seed: int,
    scale_max: float = 100.0,
    name: Optional[str] = None,
) -> Dataset:
    """
    Draw `n` records whose tolerance correctness follows `profile`.

    Correct predictions are uniform within [y - eps, y + eps] clipped to the
    scale. Incorrect ones are uniform over the out-of-tolerance region
    [0, y - eps) U (y + eps, scale_max], using whichever side is feasible.
    """
    if n < 1:
        raise ValidationError("Number of records must be positive.", field_name="n")
    if not 0 < epsilon < scale_max / 2:
        raise ValidationError(
            f"Tolerance must be within (0, {scale_max / 2:g}).", field_name="epsilon"
        )

    rng = np.random.default_rng(seed)
    confidence = rng.uniform(
        config.synth.confidence_low, config.synth.confidence_high, size=n
    )
    y_true = rng.uniform(0, scale_max, size=n)
    accuracy = profile.accuracy(confidence)
    if np.any((accuracy < 0) | (accuracy > 1)):
        raise ValidationError(
            "Profile maps confidence outside [0, 1].", field_name="profile"
        )
    correct = rng.uniform(size=n) < accuracy

    inside = np.clip(y_true + rng.uniform(-epsilon, epsilon, size=n), 0, scale_max)

    left = np.maximum(0.0, y_true - epsilon)
    right = np.maximum(0.0, scale_max - y_true - epsilon)
    u = rng.uniform(size=n) * (left + right)
    outside = np.where(u < left, u, scale_max - (u - left))
    # the draw may hit the exact boundary of an open interval
    outside = np.where(
        np.abs(outside - y_true) > epsilon,
        outside,
        np.where(u < left, 0.0, scale_max),
    )

    y_pred = np.where(correct, inside, outside)
    prefix = name or str(profile).replace(":", "-")
    records = tuple(
        MeasurementRecord(
            id=f"{prefix}-{ix:06d}",
            y_true=float(y_true[ix]),
            y_pred=float(y_pred[ix]),
            confidence=float(confidence[ix]),
        )
        for ix in range(n)
    )
    LOG.info(f"Generated {n} records with profile {profile} (seed {seed}).")
    return Dataset(records=records, name=prefix)
