# flake8:noqa
# isort:skip_file
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pytest

from calibrific import settings

settings.setup("test")

from calibrific.dataset_loader import dump_dataset
from calibrific.types import Dataset, MeasurementRecord, ToleranceConfig


@pytest.fixture
def tol() -> ToleranceConfig:
    return ToleranceConfig(epsilon=10.0, num_bins=10)


@pytest.fixture(scope="session")
def make_record():
    def _make_record(ix: int = 0, y_true=50.0, y_pred=50.0, confidence=0.5, **kwargs):
        return MeasurementRecord(
            id=kwargs.pop("id", f"r-{ix:04d}"),
            y_true=y_true,
            y_pred=y_pred,
            confidence=confidence,
            **kwargs,
        )

    return _make_record


@pytest.fixture(scope="session")
def make_dataset(make_record):
    """
    Dataset from confidences and 0/1 outcomes: correct records hit the human
    score exactly, incorrect ones miss it by 30 points.
    """

    def _make_dataset(
        confidence: Sequence[float],
        correct: Sequence[int],
        name: str = "dataset",
        y_true: Optional[Sequence[float]] = None,
    ) -> Dataset:
        if y_true is None:
            y_true = [50.0] * len(confidence)
        records = [
            make_record(
                ix,
                y_true=float(true),
                y_pred=float(true) if ok else float(true) + (30 if true < 50 else -30),
                confidence=float(conf),
            )
            for ix, (conf, ok, true) in enumerate(zip(confidence, correct, y_true))
        ]
        return Dataset(records=tuple(records), name=name)

    return _make_dataset


@pytest.fixture(scope="session")
def bernoulli_dataset(make_dataset):
    """
    Records whose correctness is drawn with probability `accuracy(conf)`.
    """

    def _bernoulli_dataset(accuracy, n: int, seed: int = 0, name: str = "dataset"):
        rng = np.random.default_rng(seed)
        confidence = rng.uniform(0.01, 0.99, size=n)
        correct = (rng.uniform(size=n) < accuracy(confidence)).astype(int)
        return make_dataset(confidence, correct, name=name)

    return _bernoulli_dataset


@pytest.fixture
def write_jsonl(tmp_path: Path):
    def _write_jsonl(rows, name: str = "data.jsonl") -> Path:
        path = tmp_path / name
        path.write_text(
            "".join(
                (row if isinstance(row, str) else json.dumps(row)) + "\n"
                for row in rows
            ),
            encoding="utf-8",
        )
        return path

    return _write_jsonl


@pytest.fixture
def dataset_file(tmp_path: Path):
    def _dataset_file(dataset: Dataset, name: str = "data.jsonl") -> Path:
        path = tmp_path / name
        dump_dataset(dataset, path)
        return path

    return _dataset_file
