"""
This module contains functions for reading, validating and writing measurement
datasets and their companion files (feature matrices, covariates, texts).
"""
import json
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from marshmallow import ValidationError

from .schema import ElicitItemSchema, MeasurementRecordSchema
from .types import CorrectnessOutcome, Dataset, MeasurementRecord


LOG = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("id", "y_true", "y_pred", "confidence")
ARRAY_COLUMNS = ("samples", "token_probs")
OPTIONAL_COLUMNS = ("logit_true", "logit_false", "group_key")
ARRAY_SEPARATOR = ";"
FORMATS = ("jsonl", "csv")


def tolerance_correct(
    y_pred: float, y_true: float, epsilon: float
) -> CorrectnessOutcome:
    """
    Return 1 if the prediction falls inside the tolerance, i.e.
    |y_pred - y_true| <= epsilon (boundary inclusive), else 0.

    Raises
    ------
    ValidationError
        If any input is not finite or epsilon is not positive.
    """
    if not all(math.isfinite(value) for value in (y_pred, y_true, epsilon)):
        raise ValidationError("Inputs must be finite.", field_name="tolerance")
    if epsilon <= 0:
        raise ValidationError("Tolerance must be positive.", field_name="epsilon")
    return int(abs(y_pred - y_true) <= epsilon)


def correctness(dataset: Dataset, epsilon: float) -> np.ndarray:
    """
    Vectorized `tolerance_correct` over all records, returns 0/1 integers.
    """
    return (np.abs(dataset.y_pred - dataset.y_true) <= epsilon).astype(np.int64)


def infer_format(path: Path, format: Optional[str] = None) -> str:
    if format is not None:
        if format not in FORMATS:
            raise ValidationError(f"Unknown format {format!r}.", field_name="format")
        return format
    suffix = Path(path).suffix.lower()
    if suffix in (".jsonl", ".json", ".ndjson"):
        return "jsonl"
    if suffix == ".csv":
        return "csv"
    raise ValidationError(
        f"Can't infer file format from {str(path)!r}, use jsonl or csv.",
        field_name="format",
    )


def load_dataset(
    path: Path,
    format: Optional[str] = None,
    confidence_scale: str = "unit",
    name: Optional[str] = None,
    scale_max: float = 100.0,
) -> Dataset:
    """
    Read a dataset file and validate every record.

    Raises
    ------
    ValidationError
        If a column is missing, a value is out of range or an id is duplicated.
        Messages are keyed by the line number of the offending row.
    """
    path = Path(path)
    format = infer_format(path, format)
    schema = MeasurementRecordSchema(
        confidence_scale=confidence_scale, scale_max=scale_max
    )

    if format == "jsonl":
        rows = _read_jsonl_rows(path)
    else:
        rows = _read_csv_rows(path)

    records: List[MeasurementRecord] = []
    seen: Dict[str, int] = {}
    for line_no, row in rows:
        try:
            record: MeasurementRecord = schema.load(row)
        except ValidationError as error:
            raise ValidationError({f"line {line_no}": error.messages})

        if record.id in seen:
            raise ValidationError(
                {
                    f"line {line_no}": {
                        "id": [
                            f"Duplicate id {record.id!r} "
                            f"(first seen on line {seen[record.id]})."
                        ]
                    }
                }
            )
        seen[record.id] = line_no
        records.append(record)

    dataset = Dataset(records=tuple(records), name=name or path.stem)
    LOG.info(f"Loaded dataset {dataset.name} with {len(dataset)} records.")
    return dataset


def _read_jsonl_rows(path: Path) -> Iterable[Tuple[int, dict]]:
    with open(path, encoding="utf-8") as lines:
        for line_no, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as error:
                raise ValidationError({f"line {line_no}": [f"Invalid JSON: {error}"]})
            if not isinstance(row, dict):
                raise ValidationError({f"line {line_no}": ["Expected a JSON object."]})
            yield line_no, row


def _read_csv_rows(path: Path) -> Iterable[Tuple[int, dict]]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [column for column in REQUIRED_COLUMNS if column not in frame.columns]
    if missing:
        raise ValidationError(
            {"columns": [f"Missing required columns: {', '.join(missing)}"]}
        )

    for ix, row in enumerate(frame.to_dict(orient="records")):
        # header is line 1
        line_no = ix + 2
        parsed: dict = {column: row[column].strip() for column in REQUIRED_COLUMNS}
        for column in ARRAY_COLUMNS:
            cell = row.get(column, "").strip()
            parsed[column] = (
                [item.strip() for item in cell.split(ARRAY_SEPARATOR)] if cell else None
            )
        for column in OPTIONAL_COLUMNS:
            cell = row.get(column, "").strip()
            parsed[column] = cell or None
        yield line_no, parsed


def dump_dataset(
    dataset: Dataset,
    path: Path,
    format: Optional[str] = None,
    confidence_scale: str = "unit",
) -> None:
    """
    Write `dataset` in the record format read by `load_dataset`.
    """
    path = Path(path)
    format = infer_format(path, format)
    schema = MeasurementRecordSchema(confidence_scale=confidence_scale)
    rows = schema.dump(dataset.records, many=True)

    if format == "jsonl":
        path.write_text(
            "".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8"
        )
    else:
        columns = list(REQUIRED_COLUMNS + ARRAY_COLUMNS + OPTIONAL_COLUMNS)
        frame = pd.DataFrame(
            [
                {
                    column: (
                        ARRAY_SEPARATOR.join(repr(float(item)) for item in row[column])
                        if column in ARRAY_COLUMNS and column in row
                        else row.get(column, "")
                    )
                    for column in columns
                }
                for row in rows
            ],
            columns=columns,
        )
        frame.to_csv(path, index=False)

    LOG.info(f"Dataset {dataset.name} ({len(dataset)} records) written to {path}.")


def stratified_split(
    dataset: Dataset, train_size: float, n_strata: int = 10, seed: int = 0
) -> Tuple[Dataset, Dataset]:
    """
    Split `dataset` into train and test parts, stratified by quantiles of
    the human score so both parts cover the whole scale.
    """
    if not 0 < train_size < 1:
        raise ValidationError(
            "Train size must be a fraction within (0, 1).", field_name="train_size"
        )
    if len(dataset) < 2:
        raise ValidationError(
            "At least two records are required for a split.", field_name="records"
        )

    rng = np.random.default_rng(seed)
    y_true = dataset.y_true
    edges = np.quantile(y_true, np.linspace(0, 1, n_strata + 1)[1:-1])
    strata = np.searchsorted(edges, y_true, side="right")

    train_ix: List[int] = []
    for stratum in np.unique(strata):
        members = rng.permutation(np.flatnonzero(strata == stratum))
        n_train = int(round(train_size * len(members)))
        train_ix.extend(members[:n_train].tolist())

    train_mask = np.zeros(len(dataset), dtype=bool)
    train_mask[train_ix] = True
    if train_mask.all() or not train_mask.any():
        raise ValidationError(
            "Split leaves one part empty, use more records.", field_name="train_size"
        )

    return (
        dataset.subset(np.flatnonzero(train_mask), name=f"{dataset.name}-train"),
        dataset.subset(np.flatnonzero(~train_mask), name=f"{dataset.name}-test"),
    )


def load_features(path: Path, ids: Sequence[str]) -> np.ndarray:
    """
    Read a feature matrix and align its rows with record `ids`.

    CSV files have an `id` column and one column per feature, JSONL files
    carry objects {"id": ..., "features": [...]}.

    Raises
    ------
    ValidationError
        If a record id has no feature row or rows differ in dimension.
    """
    path = Path(path)
    by_id: Dict[str, np.ndarray] = {}

    if infer_format(path) == "csv":
        frame = pd.read_csv(path, dtype={"id": str})
        if "id" not in frame.columns:
            raise ValidationError({"columns": ["Missing required column: id"]})
        values = frame.drop(columns=["id"]).to_numpy(dtype=np.float64)
        for row_id, row in zip(frame["id"], values):
            by_id[str(row_id)] = row
    else:
        for line_no, row in _read_jsonl_rows(path):
            if "id" not in row or not isinstance(row.get("features"), list):
                raise ValidationError(
                    {f"line {line_no}": ["Expected keys id and features."]}
                )
            by_id[str(row["id"])] = np.asarray(row["features"], dtype=np.float64)

    missing = [row_id for row_id in ids if row_id not in by_id]
    if missing:
        raise ValidationError(
            {"features": [f"No feature rows for ids: {', '.join(missing)}"]}
        )
    dims = {by_id[row_id].shape for row_id in ids}
    if len(dims) > 1:
        raise ValidationError({"features": ["Feature rows differ in dimension."]})

    features = np.vstack([by_id[row_id] for row_id in ids]) if ids else np.zeros((0, 0))
    if not np.all(np.isfinite(features)):
        raise ValidationError({"features": ["Features must be finite."]})
    return features


def load_covariates(path: Path) -> Dict[str, float]:
    """
    Read a CSV file with `group_key` and `value` columns.
    """
    frame = pd.read_csv(path, dtype={"group_key": str})
    missing = [column for column in ("group_key", "value") if column not in frame]
    if missing:
        raise ValidationError(
            {"columns": [f"Missing required columns: {', '.join(missing)}"]}
        )
    values = pd.to_numeric(frame["value"], errors="coerce")
    bad = frame["group_key"][~np.isfinite(values)].tolist()
    if bad:
        raise ValidationError({"value": [f"Invalid covariate for: {', '.join(bad)}"]})
    return dict(zip(frame["group_key"].astype(str), values.astype(float)))


def load_texts(path: Path) -> List[Tuple[str, str, float]]:
    """
    Read (id, text, y_true) items to be scored by a model.
    """
    path = Path(path)
    schema = ElicitItemSchema()
    if infer_format(path) == "csv":
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        rows = [(ix + 2, row) for ix, row in enumerate(frame.to_dict(orient="records"))]
    else:
        rows = list(_read_jsonl_rows(path))

    items: List[Tuple[str, str, float]] = []
    for line_no, row in rows:
        try:
            item = schema.load(row, unknown="exclude")
        except ValidationError as error:
            raise ValidationError({f"line {line_no}": error.messages})
        items.append((item["id"], item["text"], item["y_true"]))
    return items


def dump_covariates(covariates: Dict[str, float], path: Path) -> None:
    frame = pd.DataFrame(
        {"group_key": list(covariates), "value": list(covariates.values())}
    )
    frame.to_csv(path, index=False)
    LOG.info(f"{len(frame)} covariates written to {path}.")
