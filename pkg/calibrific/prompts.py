"""
Prompt templates sent to chat models.
"""
from dataclasses import dataclass

from marshmallow import ValidationError


ACCURACY_ESTIMATE_KEY = "accuracy_estimate"

RATING_TEMPLATE = """\
{text}
Your task: for each attribute below, rate how strongly the provided content manifests it.

BEGIN ATTRIBUTES
{attributes}
END ATTRIBUTES

BEGIN RATING SCALE
Use integers 0-100 (inclusive). low = absent, high = extreme, mid = moderate.
Use the full range and every increment, do not round to 5s/10s.
Extremes are rare, use near 0 only if truly absent and near 100 only if overwhelming.
Use moderate intermediates (e.g., 19, 67, 32) to account for nuance where applicable.
Aim for the rating that serves as the optimal center for a ±{tolerance} point tolerance interval, ensuring the highest probability of capturing the true intensity.
END RATING SCALE

Method (per attribute) pick one exact integer. Stick to provided scale. Double check before choosing extremes. Interpret gradations as  absent→faint→moderate→abundant→extreme. Don't overlook subtlety, don't default to extremes. Consider full spectrum, including intermediate gradations. High accuracy/precision is critical, it needs deep, holistic analysis of content.

Rules:
- Judge each attribute independently and separately from each other
- Absolutely no indirect inference from other attributes or cross attribute leakage
- Only measure the direct signal of each attribute alone in the content, NOT what is implied by other attributes, CRUCIAL each attribute measured independently on its own direct, specifically relevant signal

Output JSON only, in following format:
{{
{output_keys}
  ...
}}"""  # noqa: E501

ACCURACY_ESTIMATE_TEMPLATE = (
    "What is the probability (0-100) that your prediction is within "
    "±{tolerance} points of the true value?"
)

P_TRUE_TEMPLATE = """\
{text}

Attribute: {attribute_name}
Definition: {definition}
Proposed rating (0-100): {proposed_score}

Is the proposed rating within ±{tolerance} points of the true value?
Answer with a single word, True or False.
Answer:"""


@dataclass(frozen=True)
class ConstructPrompt:
    attribute_name: str
    definition_text: str
    tolerance: float = 10.0

    def __post_init__(self):
        if not self.attribute_name.strip():
            raise ValidationError(
                "Attribute name must not be empty.", field_name="attribute_name"
            )
        if not self.definition_text.strip():
            raise ValidationError(
                "Construct definition must not be empty.", field_name="definition_text"
            )
        if not self.tolerance > 0:
            raise ValidationError("Tolerance must be positive.", field_name="tolerance")

    @property
    def tolerance_text(self) -> str:
        return f"{self.tolerance:g}"


def build_prompt(text: str, construct: ConstructPrompt, with_confidence: bool) -> str:
    """
    Render the rating prompt; `with_confidence` adds the accuracy estimate
    as one more attribute to rate.
    """
    if not text.strip():
        raise ValidationError("Text must not be empty.", field_name="text")

    attributes = [f"{construct.attribute_name}: {construct.definition_text}"]
    output_keys = [f'  "{construct.attribute_name}": rating,']
    if with_confidence:
        attributes.append(
            f"{ACCURACY_ESTIMATE_KEY}: "
            + ACCURACY_ESTIMATE_TEMPLATE.format(tolerance=construct.tolerance_text)
        )
        output_keys.append(f'  "{ACCURACY_ESTIMATE_KEY}": rating,')

    return RATING_TEMPLATE.format(
        text=text,
        attributes="\n".join(attributes),
        tolerance=construct.tolerance_text,
        output_keys="\n".join(output_keys),
    )


def build_p_true_prompt(
    text: str, construct: ConstructPrompt, proposed_score: float
) -> str:
    """
    Self-check prompt whose True/False token logits give the P-true confidence.
    """
    if not text.strip():
        raise ValidationError("Text must not be empty.", field_name="text")
    return P_TRUE_TEMPLATE.format(
        text=text,
        attribute_name=construct.attribute_name,
        definition=construct.definition_text,
        proposed_score=f"{proposed_score:g}",
        tolerance=construct.tolerance_text,
    )
