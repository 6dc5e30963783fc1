"""
This module contains a client for chat-completions style endpoints that
collects (score, verbalized confidence) pairs for a batch of texts.
"""
import asyncio
import json
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from aiohttp import ClientError, ClientSession, ClientTimeout
from marshmallow import ValidationError
from tenacity import (
    AsyncRetrying,
    RetryCallState,
    RetryError,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from .prompts import ACCURACY_ESTIMATE_KEY, ConstructPrompt, build_prompt
from .settings import config
from .types import Dataset, MeasurementRecord


LOG = logging.getLogger(__name__)

FENCE_PATTERN = re.compile(r"```(?:json|JSON)?\s*(.*?)```", re.DOTALL)
SCORE_MIN, SCORE_MAX = 0, 100


class AuthenticationError(Exception):
    """
    Raises when the endpoint rejects the credentials, aborts the whole batch.
    """


class RequestRejectedError(Exception):
    """
    Raises on a non-retryable client error status.
    """


class TransientResponseError(Exception):
    """
    Raises on a rate limit or server error status, the request is retried.
    """

    def __init__(self, status: int):
        self.status = status
        super().__init__(f"Endpoint responded with status {status}.")


class ResponseParseError(ValidationError):
    """
    Raises when a model response can't be read. `body` keeps the raw text.
    """

    def __init__(self, message: str, body: str):
        self.body = body
        super().__init__(message, field_name="response")


@dataclass(frozen=True)
class ElicitConfig:
    endpoint_url: str
    api_key_env_var: str
    model_name: str
    temperature: float = 1.0
    top_p: float = 1.0
    max_tokens: int = 4096
    retries: int = 3
    resamples: int = 20
    concurrency: int = 4
    timeout: float = 60.0
    retry_wait_min: float = 1.0
    retry_wait_max: float = 30.0

    def __post_init__(self):
        if self.retries < 0:
            raise ValidationError("Retries must be nonnegative.", field_name="retries")
        if self.resamples < 1:
            raise ValidationError(
                "Resamples must be at least 1.", field_name="resamples"
            )
        if self.concurrency < 1:
            raise ValidationError(
                "Concurrency must be at least 1.", field_name="concurrency"
            )
        if self.max_tokens < 1:
            raise ValidationError(
                "Max tokens must be positive.", field_name="max_tokens"
            )
        if not self.endpoint_url or not self.model_name or not self.api_key_env_var:
            raise ValidationError(
                "Endpoint, model and API key variable are required.",
                field_name="endpoint_url",
            )

    @classmethod
    def default(cls, **overrides) -> "ElicitConfig":
        section = config.elicit
        values: Dict[str, Any] = dict(
            endpoint_url=section.endpoint_url,
            api_key_env_var=section.api_key_env_var,
            model_name=section.model_name,
            temperature=float(section.temperature),
            top_p=float(section.top_p),
            max_tokens=int(section.max_tokens),
            retries=int(section.retries),
            resamples=int(section.resamples),
            concurrency=int(section.concurrency),
            timeout=float(section.timeout),
            retry_wait_min=float(section.retry_wait_min),
            retry_wait_max=float(section.retry_wait_max),
        )
        values.update({key: val for key, val in overrides.items() if val is not None})
        return cls(**values)

    def api_key(self) -> str:
        """
        Raises
        ------
        ValidationError
            If the environment variable is not set.
        """
        key = os.environ.get(self.api_key_env_var)
        if not key:
            raise ValidationError(
                f"Environment variable {self.api_key_env_var} is not set.",
                field_name="api_key_env_var",
            )
        return key


def _candidate_objects(body: str):
    fenced = FENCE_PATTERN.findall(body)
    decoder = json.JSONDecoder()
    for chunk in [*fenced, body]:
        for match in re.finditer(r"\{", chunk):
            try:
                value, _ = decoder.raw_decode(chunk, match.start())
            except json.JSONDecodeError:
                continue
            if isinstance(value, dict):
                yield value


def _read_rating(data: dict, key: str, body: str) -> float:
    value = data.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ResponseParseError(f"Missing or non-numeric {key!r} in response.", body)
    if not SCORE_MIN <= value <= SCORE_MAX:
        raise ResponseParseError(
            f"{key!r} must be within {SCORE_MIN}-{SCORE_MAX}, got {value}.", body
        )
    return float(value)


def parse_response(
    body: str, with_confidence: bool, attribute_name: Optional[str] = None
) -> Tuple[float, Optional[float]]:
    """
    Read the rating (and the accuracy estimate as a 0-1 confidence) from the
    first JSON object in a model response. Code fences and surrounding prose
    are ignored.

    Raises
    ------
    ResponseParseError
        If there's no JSON object, a key is missing or a value is out of range.
    """
    if not body or not body.strip():
        raise ResponseParseError("Empty response.", body or "")

    data = next(_candidate_objects(body), None)
    if data is None:
        raise ResponseParseError("No JSON object in response.", body)

    if attribute_name is None:
        keys = [key for key in data if key != ACCURACY_ESTIMATE_KEY]
        if not keys:
            raise ResponseParseError("No rating in response.", body)
        attribute_name = keys[0]

    score = _read_rating(data, attribute_name, body)
    confidence = None
    if with_confidence:
        confidence = _read_rating(data, ACCURACY_ESTIMATE_KEY, body) / 100
    return score, confidence


def render_response(
    attribute_name: str, score: float, confidence: Optional[float] = None
) -> str:
    """
    Serialize a rating the way a compliant model answers.
    """
    data: Dict[str, Any] = {attribute_name: score}
    if confidence is not None:
        data[ACCURACY_ESTIMATE_KEY] = round(confidence * 100)
    return json.dumps(data)


class ChatClient:
    """
    Sends prompts to the endpoint with bounded concurrency and retries.
    """

    def __init__(self, session: ClientSession, cfg: ElicitConfig, api_key: str):
        self.session = session
        self.cfg = cfg
        self._api_key = api_key
        self.semaphore = asyncio.Semaphore(cfg.concurrency)
        self.retry_count = 0

    def _before_sleep(self, state: RetryCallState) -> None:
        self.retry_count += 1
        error = state.outcome.exception() if state.outcome else None
        LOG.warning(f"Request attempt {state.attempt_number} failed ({error}), retrying.")

    async def complete(self, prompt: str) -> str:
        """
        Return the content of the first choice.

        Raises
        ------
        RetryError
            If transient failures persist after all retries.
        AuthenticationError
            If the endpoint rejects the credentials.
        """
        content = ""
        async for attempt in AsyncRetrying(
            retry=retry_if_exception_type(
                (ClientError, asyncio.TimeoutError, TransientResponseError)
            ),
            wait=wait_exponential(
                multiplier=self.cfg.retry_wait_min,
                min=self.cfg.retry_wait_min,
                max=self.cfg.retry_wait_max,
            ),
            stop=stop_after_attempt(self.cfg.retries + 1),
            before_sleep=self._before_sleep,
        ):
            with attempt:
                async with self.semaphore:
                    content = await self._post(prompt)
        return content

    async def _post(self, prompt: str) -> str:
        payload = {
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "top_p": self.cfg.top_p,
            "max_tokens": self.cfg.max_tokens,
        }
        async with self.session.post(
            self.cfg.endpoint_url,
            json=payload,
            headers={"Authorization": f"Bearer {self._api_key}"},
            timeout=ClientTimeout(total=self.cfg.timeout),
        ) as response:
            if response.status in (401, 403):
                raise AuthenticationError(
                    f"Endpoint rejected the credentials (status {response.status})."
                )
            if response.status == 429 or response.status >= 500:
                raise TransientResponseError(response.status)
            if response.status >= 400:
                raise RequestRejectedError(
                    f"Endpoint rejected the request (status {response.status})."
                )
            body = await response.text()

        try:
            data = json.loads(body)
        except ValueError:
            raise ResponseParseError("Response body is not JSON.", body)
        try:
            return str(data["choices"][0]["message"]["content"])
        except (KeyError, IndexError, TypeError):
            raise ResponseParseError("Response has no choices[0].message.content.", body)


@dataclass(frozen=True)
class ElicitResult:
    dataset: Dataset
    failures: Dict[str, str] = field(default_factory=dict)
    retries: int = 0


async def _elicit_item(
    client: ChatClient,
    item: Tuple[str, str, float],
    construct: ConstructPrompt,
    collect_samples: bool,
) -> Union[MeasurementRecord, str]:
    """
    Return the record or, if the item failed, the failure description.
    """
    item_id, text, y_true = item
    prompt = build_prompt(text, construct, with_confidence=True)
    n_requests = client.cfg.resamples if collect_samples else 1
    try:
        bodies = await asyncio.gather(
            *(client.complete(prompt) for _ in range(n_requests))
        )
        answers = [
            parse_response(body, True, construct.attribute_name) for body in bodies
        ]
    except RetryError as error:
        cause = error.last_attempt.exception()
        LOG.error(f"Giving up on {item_id} after retries: {cause}")
        return f"Retries exhausted: {cause}"
    except ResponseParseError as error:
        LOG.error(f"Unparsable response for {item_id}: {error}")
        LOG.debug(f"Raw response for {item_id}: {error.body!r}")
        return str(error)
    except RequestRejectedError as error:
        LOG.error(f"Failed to elicit {item_id}: {error}")
        return str(error)

    score, confidence = answers[0]
    return MeasurementRecord(
        id=item_id,
        y_true=y_true,
        y_pred=score,
        confidence=confidence if confidence is not None else 0.0,
        samples=tuple(s for s, _ in answers) if collect_samples else None,
    )


async def elicit_dataset(
    texts: Sequence[Tuple[str, str, float]],
    construct: ConstructPrompt,
    cfg: ElicitConfig,
    collect_samples: bool = False,
    name: str = "elicited",
    session: Optional[ClientSession] = None,
) -> ElicitResult:
    """
    Score every (id, text, y_true) item. With `collect_samples` every item is
    requested `cfg.resamples` times and the scores are kept as samples for the
    resampling proxy; the first answer gives the record's score and confidence.

    Failed items are returned in `failures` and don't stop the batch.
    Records keep the input order.

    Raises
    ------
    AuthenticationError
        If the endpoint rejects the credentials, pending requests are cancelled.
    ValidationError
        If the API key variable is not set.
    """
    api_key = cfg.api_key()
    if session is None:
        async with ClientSession() as own_session:
            return await elicit_dataset(
                texts, construct, cfg, collect_samples, name, own_session
            )

    client = ChatClient(session, cfg, api_key)
    tasks = [
        asyncio.ensure_future(_elicit_item(client, item, construct, collect_samples))
        for item in texts
    ]
    try:
        outcomes = await asyncio.gather(*tasks)
    finally:
        for task in tasks:
            task.cancel()

    records: List[MeasurementRecord] = []
    failures: Dict[str, str] = {}
    for (item_id, _, _), outcome in zip(texts, outcomes):
        if isinstance(outcome, str):
            failures[item_id] = outcome
        else:
            records.append(outcome)

    LOG.info(
        f"Elicited {len(records)} of {len(texts)} texts, {len(failures)} failed, "
        f"{client.retry_count} retries."
    )
    return ElicitResult(
        dataset=Dataset(records=tuple(records), name=name),
        failures=failures,
        retries=client.retry_count,
    )
