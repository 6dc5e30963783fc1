import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Type

import yaml
from dotenv import load_dotenv


BASE_DIR = Path(__file__).parent.parent
DEFAULT_CONFIG = BASE_DIR / "config.yaml"


@dataclass(frozen=True)
class Config:
    tolerance: "ToleranceSection"
    calibration: "CalibrationSection"
    distill: "DistillSection"
    regress: "RegressSection"
    elicit: "ElicitSection"
    synth: "SynthSection"


@dataclass(frozen=True)
class ToleranceSection:
    epsilon: float
    num_bins: int
    scale_max: float


@dataclass(frozen=True)
class CalibrationSection:
    clip_delta: float
    collapse_spread: float
    gradient_tol: float
    max_iter: int
    temperature_log_bound: float
    temperature_xtol: float


@dataclass(frozen=True)
class DistillSection:
    batch_size: int
    epochs: int
    grad_clip: float
    learning_rate: float
    seed: int
    split_fraction: float
    temperature: float
    warmup_fraction: float
    weight_decay: float


@dataclass(frozen=True)
class RegressSection:
    covariate_effect: float
    n_days: int
    noise_sd: float
    sentence_sd: float
    sentences_per_day: int
    threshold: float


@dataclass(frozen=True)
class ElicitSection:
    api_key_env_var: str
    concurrency: int
    endpoint_url: str
    max_tokens: int
    model_name: str
    resamples: int
    retries: int
    retry_wait_max: float
    retry_wait_min: float
    temperature: float
    timeout: float
    top_p: float


@dataclass(frozen=True)
class SynthSection:
    confidence_high: float
    confidence_low: float
    n: int
    seed: int


SECTIONS: Dict[str, Type[Any]] = {
    "tolerance": ToleranceSection,
    "calibration": CalibrationSection,
    "distill": DistillSection,
    "regress": RegressSection,
    "elicit": ElicitSection,
    "synth": SynthSection,
}

ENV_PATTERN = re.compile(
    r"\$\{(?P<name>\w+)(?::(?P<type>\w+))?(?:\|(?P<default>[^}]*))?\}"
)
ENV_TYPES: Dict[str, Callable[[str], Any]] = {
    "bool": lambda value: value.lower().strip() == "true",
    "int": int,
    "float": float,
    "str": str,
}


def setup(section: str) -> None:
    global config
    config = parse_config(section)


def parse_config(
    section: str = "default", path: Path = DEFAULT_CONFIG, tag: str = "!ENV"
) -> Config:
    """
    Load the `default` section of a yaml file, merge `section` over it and
    resolve environment variables. Values tagged with `tag` may reference
    variables as ${NAME}, ${NAME:type} or ${NAME:type|default}.

    For example:
    epsilon: !ENV ${CALIBRIFIC_EPSILON:float|10}
    """
    load_dotenv()
    with open(path, encoding="utf-8") as conf_data:
        data = yaml.load(conf_data, Loader=_env_loader(tag))

    merged = data["default"]
    if section != "default":
        merged = _merged(merged, data[section])

    return Config(**{name: cls(**merged[name]) for name, cls in SECTIONS.items()})


def _env_loader(tag: str) -> Type[yaml.SafeLoader]:
    class EnvLoader(yaml.SafeLoader):
        pass

    EnvLoader.add_implicit_resolver(tag, ENV_PATTERN, None)
    EnvLoader.add_constructor(tag, _resolve_env)
    return EnvLoader


def _resolve_env(loader: yaml.SafeLoader, node: yaml.ScalarNode) -> Any:
    """
    A value made of a single reference keeps the variable's type,
    references inside longer strings are substituted as text.
    """
    value = loader.construct_scalar(node)
    match = ENV_PATTERN.fullmatch(value.strip())
    if match:
        env = os.environ.get(match["name"]) or match["default"]
        if not env:
            return None
        return ENV_TYPES.get(match["type"] or "str", str)(env)

    return ENV_PATTERN.sub(
        lambda ref: os.environ.get(ref["name"]) or ref["default"] or "", value
    )


def _merged(base: dict, child: dict) -> dict:
    result = dict(base)
    for key, value in child.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = _merged(result[key], value)
        else:
            result[key] = value
    return result


def __getattr__(key: str):
    return getattr(config, key)


config = parse_config()
