from typing import Any, Dict

from marshmallow import (
    Schema,
    ValidationError,
    fields,
    post_dump,
    post_load,
    pre_load,
    validate,
    validates,
    validates_schema,
)

from .types import (
    CalibrationComparison,
    CalibratorKind,
    CalibratorModel,
    MeasurementRecord,
    ReliabilityBin,
    StudentModel,
)


CONFIDENCE_SCALES = ("unit", "percent")


class MeasurementRecordSchema(Schema):
    """
    Record format shared by JSONL and CSV files.
    Confidence is stored on [0, 1]; `percent` scale divides by 100 on load
    and multiplies by 100 on dump.
    """

    id = fields.String(
        required=True, validate=validate.Length(min=1, error="Id must not be empty.")
    )
    y_true = fields.Float(required=True)
    y_pred = fields.Float(required=True)
    confidence = fields.Float(
        required=True,
        validate=validate.Range(0, 1, error="Confidence must be within 0-1."),
    )
    samples = fields.List(fields.Float(), allow_none=True, load_default=None)
    token_probs = fields.List(
        fields.Float(
            validate=validate.Range(
                0, 1, min_inclusive=False, error="Token probability must be in (0, 1]."
            )
        ),
        allow_none=True,
        load_default=None,
    )
    logit_true = fields.Float(allow_none=True, load_default=None)
    logit_false = fields.Float(allow_none=True, load_default=None)
    group_key = fields.String(allow_none=True, load_default=None)

    def __init__(
        self, *args, confidence_scale: str = "unit", scale_max: float = 100.0, **kwargs
    ):
        if confidence_scale not in CONFIDENCE_SCALES:
            raise ValidationError(
                f"Unknown confidence scale {confidence_scale!r}.",
                field_name="confidence_scale",
            )
        self.confidence_scale = confidence_scale
        self.scale_max = scale_max
        super().__init__(*args, **kwargs)

    @pre_load
    def normalize_confidence(self, data, **kwargs):
        if self.confidence_scale != "percent" or data.get("confidence") is None:
            return data
        try:
            confidence = float(data["confidence"])
        except (TypeError, ValueError):
            # left to the field validation
            return data
        return dict(data, confidence=confidence / 100)

    @validates_schema
    def validate_scores(self, data, **kwargs):
        errors: Dict[str, Any] = {}
        for key in ("y_true", "y_pred"):
            value = data.get(key)
            if value is not None and not 0 <= value <= self.scale_max:
                errors[key] = [f"Score must be within 0-{self.scale_max:g}."]
        for sample in data.get("samples") or ():
            if not 0 <= sample <= self.scale_max:
                errors["samples"] = [f"Samples must be within 0-{self.scale_max:g}."]
                break
        if errors:
            raise ValidationError(errors)

    @post_load
    def make(self, data, **kwargs) -> MeasurementRecord:
        for key in ("samples", "token_probs"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return MeasurementRecord(**data)

    @post_dump
    def denormalize(self, data, **kwargs):
        if self.confidence_scale == "percent":
            data["confidence"] = round(data["confidence"] * 100, 10)
        return {key: value for key, value in data.items() if value is not None}


class ReliabilityBinSchema(Schema):
    lower = fields.Float()
    upper = fields.Float()
    count = fields.Integer()
    mean_confidence = fields.Float(allow_none=True)
    tolerance_accuracy = fields.Float(allow_none=True)

    @post_load
    def make(self, data, **kwargs) -> ReliabilityBin:
        return ReliabilityBin(**data)


class MetricReportSchema(Schema):
    dataset = fields.String(allow_none=True)
    epsilon = fields.Float(allow_none=True)
    t_ece = fields.Float()
    brier = fields.Float()
    mh = fields.Float(allow_none=True)
    mh_error = fields.String(allow_none=True)
    n = fields.Integer()
    bins = fields.Nested(ReliabilityBinSchema, many=True)


class MacroSummarySchema(Schema):
    epsilon = fields.Float(allow_none=True)
    t_ece = fields.Float()
    brier = fields.Float()
    mh = fields.Float(allow_none=True)
    n_datasets = fields.Integer()


class AuditReportSchema(Schema):
    reports = fields.Nested(MetricReportSchema, many=True)
    macro = fields.Nested(MacroSummarySchema, many=True)


class MethodResultSchema(Schema):
    method = fields.String()
    t_ece = fields.Float(allow_none=True)
    brier = fields.Float(allow_none=True)
    nll = fields.Float(allow_none=True)
    spread = fields.Float(allow_none=True)
    collapsed = fields.Boolean()
    error = fields.String(allow_none=True)


class CalibrationComparisonSchema(Schema):
    original = fields.Nested(MethodResultSchema)
    methods = fields.Dict(keys=fields.String(), values=fields.Nested(MethodResultSchema))
    collapsed_methods = fields.Method("get_collapsed_methods")

    def get_collapsed_methods(self, obj: CalibrationComparison):
        return obj.collapsed_methods


class CalibratorModelSchema(Schema):
    kind = fields.Enum(CalibratorKind, by_value=True, required=True)
    params = fields.Dict(keys=fields.String(), values=fields.Float(), load_default=dict)
    knots = fields.List(
        fields.Tuple((fields.Float(), fields.Float())), load_default=list
    )
    clip_delta = fields.Float(load_default=1e-6)

    @validates_schema
    def validate_params(self, data, **kwargs):
        kind = data["kind"]
        params = data.get("params", {})
        required = {
            CalibratorKind.platt: ("A", "B"),
            CalibratorKind.beta: ("a", "b", "c"),
            CalibratorKind.temperature: ("T",),
            CalibratorKind.isotonic: (),
        }[kind]
        missing = [name for name in required if name not in params]
        if missing:
            raise ValidationError(
                f"Missing parameters for {kind.value}: {', '.join(missing)}",
                field_name="params",
            )
        if kind is CalibratorKind.beta and (params["a"] < 0 or params["b"] < 0):
            raise ValidationError(
                "Beta coefficients a and b must be nonnegative.", field_name="params"
            )
        if kind is CalibratorKind.temperature and params["T"] <= 0:
            raise ValidationError("Temperature must be positive.", field_name="params")
        if kind is CalibratorKind.isotonic:
            knots = data.get("knots") or []
            if not knots:
                raise ValidationError("Isotonic model needs knots.", field_name="knots")
            for (x_1, y_1), (x_2, y_2) in zip(knots, knots[1:]):
                if x_2 < x_1 or y_2 < y_1:
                    raise ValidationError(
                        "Isotonic knots must be sorted and nondecreasing.",
                        field_name="knots",
                    )

    @post_load
    def make(self, data, **kwargs) -> CalibratorModel:
        data["knots"] = tuple(tuple(knot) for knot in data["knots"])
        return CalibratorModel(**data)


class RegressionResultSchema(Schema):
    beta = fields.Float()
    intercept = fields.Float()
    se_beta = fields.Float()
    t_stat = fields.Float()
    r_squared = fields.Float()
    n = fields.Integer()


class RegressionConditionSchema(Schema):
    condition = fields.String()
    threshold = fields.Float()
    n_records = fields.Integer()
    tolerance_accuracy = fields.Float(allow_none=True)
    unmatched_keys = fields.List(fields.String())
    result = fields.Nested(RegressionResultSchema)


class RegressionReportSchema(Schema):
    conditions = fields.Nested(RegressionConditionSchema, many=True)


class AttenuationReportSchema(Schema):
    truth = fields.Nested(RegressionResultSchema)
    unfiltered = fields.Nested(RegressionResultSchema)
    filtered = fields.Nested(RegressionResultSchema)


class StudentModelSchema(Schema):
    """
    Weights are stored row-major, `k` rows of `d + 1` values (bias last).
    """

    k = fields.Integer(required=True, validate=validate.Range(min=2))
    d = fields.Integer(required=True, validate=validate.Range(min=0))
    temperature = fields.Float(load_default=1.0)
    weights = fields.Method("dump_weights", deserialize="load_weights", required=True)

    def dump_weights(self, obj):
        return [float(value) for value in obj.weights.ravel()]

    def load_weights(self, value):
        return [float(item) for item in value]

    @validates("weights")
    def validate_weights(self, value, **kwargs):
        if not value:
            raise ValidationError("Weights must not be empty.")

    @post_load
    def make(self, data, **kwargs) -> StudentModel:
        return StudentModel.from_flat(
            data["weights"], k=data["k"], d=data["d"], temperature=data["temperature"]
        )


class DistillReportSchema(Schema):
    k = fields.Integer()
    n_train = fields.Integer()
    n_eval = fields.Integer()
    teacher = fields.Nested(MetricReportSchema)
    student = fields.Nested(MetricReportSchema)
    delta_t_ece = fields.Float()
    delta_brier = fields.Float()
    loss_history = fields.List(fields.Float())


class ElicitItemSchema(Schema):
    id = fields.String(required=True, validate=validate.Length(min=1))
    text = fields.String(required=True, validate=validate.Length(min=1))
    y_true = fields.Float(required=True, validate=validate.Range(0, 100))
