#!/usr/bin/env python3
"""
Uniform access to a vision-language model (vlm), a text model (llm) and an embedding model (embedder).

The Gateway enforces structured JSON output on the client side: every response is parsed and validated
against the request's pydantic response model and, on failure, the request is re-issued with a corrective
instruction appended, up to `RetryPolicy.max_attempts` attempts. Transport failures and throttling are
retried with exponential backoff. A token bucket limits requests per minute per provider instance.

Providers:
  - StubProvider : deterministic, offline, fixture-backed completions and trigram-hash embeddings
  - HttpProvider : OpenAI-compatible `/chat/completions` and `/embeddings` endpoints via aiohttp

Usage:
  provider = stub_provider("fixture.json")  # written by stubfixture.py -o fixture.json
  async with Gateway(provider, models=StubProvider.MODEL_IDS) as gateway:
      response = await gateway.complete_structured(request, RetryPolicy())
      vectors = await gateway.embed(["History", "How-To"])

"""
__license__ = "MIT - https://mit-license.org/"

import abc
import asyncio
import dataclasses
import datetime
import enum
import hashlib
import json
import logging
import os
import re
import time
from typing import Any

import aiohttp
import aiohttp_client_cache
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from clipmodel import normalize_category_name

log = logging.getLogger(__name__)

CODE_FENCE = re.compile(r"^\s*```[A-Za-z0-9_-]*\s*\n?(.*?)\n?\s*```\s*$", re.DOTALL)
MALFORMED_RESPONSE = "this is not JSON"  # default stub reply for forced schema failures


class Role(str, enum.Enum):
    VLM = "vlm"
    LLM = "llm"
    EMBEDDER = "embedder"


class GatewayError(Exception):
    """Base class for provider gateway errors."""


class ProviderUnreachable(GatewayError):
    """Transport failure. `retryable` is False for authentication and request errors."""

    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


class RateLimited(GatewayError):
    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class MalformedOutput(GatewayError):
    """Every attempt failed to parse or conform. Carries the last raw text and its violations."""

    def __init__(self, raw_text: str, violations: list[str], attempts: int):
        super().__init__(f"no conforming output after {attempts} attempts: {violations[0] if violations else 'unknown'}")
        self.raw_text = raw_text
        self.violations = list(violations)
        self.attempts = attempts


class EmptyInput(GatewayError):
    pass


class FixtureMiss(GatewayError):
    """The stub fixture has no response for a request key."""

    def __init__(self, key: str):
        super().__init__(f"no stub fixture entry for request key {key}")
        self.key = key


@dataclasses.dataclass(frozen=True)
class Part:
    kind: str  # text | media_ref
    value: str

    @classmethod
    def text(cls, value: str) -> "Part":
        return cls("text", value)

    @classmethod
    def media(cls, uri: str) -> "Part":
        return cls("media_ref", uri)


class ResponseModel(BaseModel):
    """
    Base class for response shapes. Unknown keys are ignored and numbers are accepted as strings.
    Subclasses may define `violations() -> list[str]` for checks beyond the JSON shape.
    """

    model_config = ConfigDict(extra="ignore", coerce_numbers_to_str=True)


@dataclasses.dataclass(frozen=True)
class PromptRequest:
    role: Role
    parts: tuple[Part, ...]
    response_schema: type[BaseModel] | None = None
    temperature: float = 0.0
    max_output_tokens: int = 2048
    corrections: tuple[str, ...] = ()  # corrective instructions appended by the retry loop

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError(f"temperature {self.temperature} < 0")
        if self.max_output_tokens <= 0:
            raise ValueError(f"max_output_tokens {self.max_output_tokens} <= 0")
        if self.role is not Role.VLM and any(part.kind == "media_ref" for part in self.parts):
            raise ValueError(f"{self.role.value} requests must not carry media_ref parts")

    def with_correction(self, instruction: str) -> "PromptRequest":
        return dataclasses.replace(self, corrections=self.corrections + (instruction,))

    def all_parts(self) -> tuple[Part, ...]:
        return self.parts + tuple(Part.text(c) for c in self.corrections)

    @property
    def key(self) -> str:
        return request_key(self.parts)


@dataclasses.dataclass(frozen=True)
class StructuredResponse:
    raw_text: str
    parsed: Any | None
    model_id: str
    attempt_count: int


class RetryPolicy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_attempts: int = Field(default=3, ge=1)
    backoff_base_ms: int = Field(default=500, gt=0)
    backoff_factor: float = Field(default=2.0, ge=1.0)

    def delay_s(self, attempt: int) -> float:
        """Seconds to wait after failed attempt number `attempt` (1-based)."""
        return self.backoff_base_ms * self.backoff_factor ** (attempt - 1) / 1000.0


def request_key(parts: tuple[Part, ...]) -> str:
    """Stable 64-bit BLAKE2b hex digest of the request parts (`kind \\x1f value`, joined by `\\x1e`)."""
    text = "\x1e".join(f"{part.kind}\x1f{part.value}" for part in parts)
    return hashlib.blake2b(text.encode("utf-8"), digest_size=8).hexdigest()


def trigram_embedding(text: str, dimension: int = 256) -> np.ndarray:
    """
    Character-trigram hash embedding of `#normalized text#`.
    Each trigram is hashed with 64-bit BLAKE2b (big-endian) into `dimension` buckets, counted, then L2 normalized.
    """
    padded = f"#{normalize_category_name(text)}#"
    vector = np.zeros(dimension, dtype=np.float64)
    for i in range(len(padded) - 2):
        digest = hashlib.blake2b(padded[i : i + 3].encode("utf-8"), digest_size=8).digest()
        vector[int.from_bytes(digest, "big") % dimension] += 1.0
    norm = np.linalg.norm(vector)
    return vector / norm if norm > 0 else vector


def strip_code_fence(text: str) -> str:
    match = CODE_FENCE.match(text)
    return match.group(1) if match else text.strip()


def parse_structured(raw_text: str, response_schema: type[BaseModel]) -> tuple[Any | None, list[str]]:
    """
    Parses and validates a model reply.

    - returns (parsed, []) when the reply conforms, or (None, violations) otherwise
    """
    try:
        data = json.loads(strip_code_fence(raw_text))
    except json.JSONDecodeError as e:
        return None, [f"invalid JSON: {e.msg} at line {e.lineno} column {e.colno}"]
    try:
        value = response_schema.model_validate(data)
    except ValidationError as e:
        return None, [f"{'.'.join(str(loc) for loc in err['loc']) or '$'}: {err['msg']}" for err in e.errors()]
    check = getattr(value, "violations", None)
    if callable(check):
        violations = list(check())
        if violations:
            return None, violations
    return value.model_dump(mode="json"), []


def correction_for(raw_text: str, violation: str) -> str:
    return (
        "Your previous reply did not match the required JSON structure.\n"
        f"Previous reply:\n{raw_text}\n"
        f"Problem: {violation}\n"
        "Reply again with only the corrected JSON object."
    )


def schema_instruction(response_schema: type[BaseModel]) -> str:
    return "Reply with only a JSON object matching this JSON schema:\n" + json.dumps(response_schema.model_json_schema(), sort_keys=True)


class TokenBucket:
    """
    Requests-per-minute limiter. Holds one token of burst; `acquire()` waits for the next token.
    A rate of None or 0 disables limiting.
    """

    def __init__(self, requests_per_minute: float | None = None, clock=time.monotonic, sleep=asyncio.sleep):
        assert requests_per_minute is None or requests_per_minute >= 0, "requests_per_minute < 0"
        self.rate = (requests_per_minute or 0) / 60.0  # tokens per second
        self.tokens = 1.0
        self.clock = clock
        self.sleep = sleep
        self.updated = clock()
        self.lock = asyncio.Lock()

    async def acquire(self) -> None:
        if self.rate <= 0:
            return
        async with self.lock:
            self._refill()
            if self.tokens < 1.0:
                await self.sleep((1.0 - self.tokens) / self.rate)
                self._refill()
            self.tokens = max(0.0, self.tokens - 1.0)

    def _refill(self) -> None:
        now = self.clock()
        self.tokens = min(1.0, self.tokens + (now - self.updated) * self.rate)
        self.updated = now


class Provider(abc.ABC):
    """A model backend. Implementations return raw reply text and raw vectors; the Gateway does the rest."""

    name = "provider"

    @abc.abstractmethod
    async def complete(self, request: PromptRequest, model_id: str) -> str: ...

    @abc.abstractmethod
    async def embed(self, texts: list[str], model_id: str) -> list[list[float]]: ...

    async def close(self) -> None:
        pass


class StubProvider(Provider):
    """
    Fixture-backed provider for offline, reproducible runs.

    The fixture is a JSON object mapping request keys (see `request_key()`) to reply text, plus an optional
    `schema_failures` list of `{"key": ..., "attempts": n, "response": ...}` entries: the first `n` attempts for
    that key return `response` (default: a non-JSON string). The attempt number is derived from the request's
    corrective instructions, so replies are a pure function of the request.
    """

    name = "stub"
    DIMENSION = 256
    MODEL_IDS = {Role.VLM: "stub-vlm", Role.LLM: "stub-llm", Role.EMBEDDER: "stub-embedder"}

    def __init__(self, fixture: dict):
        self.responses = {}
        for key, reply in fixture.items():
            if key == "schema_failures":
                continue
            self.responses[key] = reply if isinstance(reply, str) else json.dumps(reply, ensure_ascii=False)
        self.failures = {entry["key"]: entry for entry in fixture.get("schema_failures", [])}

    @classmethod
    def from_file(cls, fixture_path: str) -> "StubProvider":
        with open(fixture_path, mode="r", encoding="utf-8") as fh:
            fixture = json.load(fh)
        log.info(f"{fixture_path}: {len(fixture) - ('schema_failures' in fixture)} stub responses")
        return cls(fixture)

    async def complete(self, request: PromptRequest, model_id: str) -> str:
        key = request.key
        attempt = len(request.corrections) + 1
        failure = self.failures.get(key)
        if failure is not None and attempt <= int(failure.get("attempts", 1)):
            reply = failure.get("response", MALFORMED_RESPONSE)
            return reply if isinstance(reply, str) else json.dumps(reply, ensure_ascii=False)
        if key not in self.responses:
            raise FixtureMiss(key)
        return self.responses[key]

    async def embed(self, texts: list[str], model_id: str) -> list[list[float]]:
        return [trigram_embedding(text, self.DIMENSION) for text in texts]


def stub_provider(fixture_path: str) -> StubProvider:
    """Returns a StubProvider loaded from the fixture file."""
    return StubProvider.from_file(fixture_path)


def _retry_after(headers) -> float | None:
    try:
        return float(headers.get("Retry-After"))
    except (TypeError, ValueError):
        return None


class HttpProvider(Provider):
    """
    OpenAI-compatible HTTP provider.
    The API key is read from the environment variable named by `api_key_env` and is never stored.
    """

    name = "http"
    HEADERS = {"Accept": "application/json", "Content-Type": "application/json"}

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "CLIPMINE_API_KEY",
        timeout_s: float = 120.0,
        tcp_limit: int = 8,
        media_part: str = "video_url",
        cache_expiration_s: int = 0,
        cache_name: str = "clipmine-cache",
    ):
        assert base_url, "base_url is empty"
        assert tcp_limit > 0, "tcp_limit <= 0"
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self.tcp_limit = tcp_limit
        self.media_part = media_part
        self.cache_expiration_s = cache_expiration_s
        self.cache_name = cache_name
        self.session = None  # created on first use, inside the running event loop

    def _session(self) -> aiohttp.ClientSession:
        if self.session is not None:
            return self.session
        headers = dict(self.HEADERS)
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        else:
            log.warning(f"${self.api_key_env} is not set; sending requests without credentials")
        connector = aiohttp.TCPConnector(limit=self.tcp_limit, limit_per_host=self.tcp_limit)
        timeout = aiohttp.ClientTimeout(total=self.timeout_s)
        if self.cache_expiration_s > 0:
            cache = aiohttp_client_cache.SQLiteBackend(
                cache_name=self.cache_name,
                expire_after=datetime.timedelta(seconds=self.cache_expiration_s),
                allowed_methods=("GET", "POST"),
                use_temp=False,
                autoclose=True,
            )
            log.info(f"Caching responses for {self.cache_expiration_s} seconds in {self.cache_name}")
            self.session = aiohttp_client_cache.CachedSession(cache=cache, connector=connector, headers=headers, timeout=timeout)
        else:
            self.session = aiohttp.ClientSession(connector=connector, headers=headers, timeout=timeout)
        return self.session

    async def _post(self, path: str, body: dict) -> dict:
        url = f"{self.base_url}{path}"
        log.debug(f"POST {url} model={body.get('model')}")
        try:
            async with self._session().post(url, json=body) as response:
                if response.status == 429:
                    raise RateLimited(f"{url}: 429 Too Many Requests", retry_after=_retry_after(response.headers))
                if response.status in (401, 403):
                    raise ProviderUnreachable(f"{url}: {response.status} check the API key in ${self.api_key_env}", retryable=False)
                if response.status >= 500:
                    raise ProviderUnreachable(f"{url}: {response.status} {(await response.text())[:200]}")
                if response.status >= 400:
                    raise ProviderUnreachable(f"{url}: {response.status} {(await response.text())[:200]}", retryable=False)
                return await response.json(content_type=None)
        except (aiohttp.ClientError, asyncio.TimeoutError) as e:
            raise ProviderUnreachable(f"{url}: {e.__class__.__name__} {e}") from e

    def _content(self, request: PromptRequest) -> list[dict]:
        content = []
        for part in request.all_parts():
            if part.kind == "media_ref":
                content.append({"type": self.media_part, self.media_part: {"url": part.value}})
            else:
                content.append({"type": "text", "text": part.value})
        if request.response_schema is not None:
            content.append({"type": "text", "text": schema_instruction(request.response_schema)})
        return content

    async def complete(self, request: PromptRequest, model_id: str) -> str:
        body = {
            "model": model_id,
            "messages": [{"role": "user", "content": self._content(request)}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.response_schema is not None:
            body["response_format"] = {"type": "json_object"}
        data = await self._post("/chat/completions", body)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as e:
            raise ProviderUnreachable(f"unexpected chat completion response: {str(data)[:200]}", retryable=False) from e

    async def embed(self, texts: list[str], model_id: str) -> list[list[float]]:
        data = await self._post("/embeddings", {"model": model_id, "input": texts})
        try:
            items = sorted(data["data"], key=lambda item: item.get("index", 0))
            return [item["embedding"] for item in items]
        except (KeyError, TypeError) as e:
            raise ProviderUnreachable(f"unexpected embeddings response: {str(data)[:200]}", retryable=False) from e

    async def close(self) -> None:
        if self.session is not None:
            await self.session.close()
            self.session = None


class Gateway:
    """
    Shared by all concurrent tasks of a run. Only the token bucket is serialized.
    """

    def __init__(
        self,
        provider: Provider,
        models: dict[Role, str],
        policy: RetryPolicy = RetryPolicy(),
        requests_per_minute: float | None = None,
        sleep=asyncio.sleep,
    ):
        assert provider is not None, "provider is None"
        missing = [role.value for role in Role if role not in models]
        assert not missing, f"no model id for {missing}"
        self.provider = provider
        self.models = dict(models)
        self.policy = policy
        self.bucket = TokenBucket(requests_per_minute, sleep=sleep)
        self.sleep = sleep
        self.embeddings = {}  # text : unit vector, whole-run cache
        self.dimension = None

    async def __aenter__(self) -> "Gateway":
        return self

    async def __aexit__(self, *exc) -> None:
        await self.close()

    async def close(self) -> None:
        await self.provider.close()

    async def complete_structured(self, req: PromptRequest, policy: RetryPolicy | None = None) -> StructuredResponse:
        """
        Returns the first reply that parses and conforms to `req.response_schema`.

        :raises MalformedOutput: every attempt failed parsing or conformance
        :raises ProviderUnreachable: transport failure on the last attempt (or a non-retryable one)
        :raises RateLimited: throttled on the last attempt
        """
        if req.role is Role.EMBEDDER:
            raise ValueError("complete_structured() requires a vlm or llm request")
        policy = policy or self.policy
        model_id = self.models[req.role]
        request = req
        failure = None
        delay = 0.0
        for attempt in range(1, policy.max_attempts + 1):
            if delay > 0:
                await self.sleep(delay)
            await self.bucket.acquire()
            log.debug(f"{req.role.value} {request.key} attempt {attempt}/{policy.max_attempts}")
            try:
                raw_text = await self.provider.complete(request, model_id)
            except RateLimited as e:
                failure = e
                delay = e.retry_after if e.retry_after is not None else policy.delay_s(attempt)
                log.info(f"⚠ {req.role.value} {request.key} rate limited, retry in {delay:.3f}s")
                continue
            except ProviderUnreachable as e:
                if not e.retryable:
                    raise
                failure = e
                delay = policy.delay_s(attempt)
                log.info(f"⚠ {req.role.value} {request.key} {e}, retry in {delay:.3f}s")
                continue

            if req.response_schema is None:
                return StructuredResponse(raw_text=raw_text, parsed=None, model_id=model_id, attempt_count=attempt)
            parsed, violations = parse_structured(raw_text, req.response_schema)
            if not violations:
                return StructuredResponse(raw_text=raw_text, parsed=parsed, model_id=model_id, attempt_count=attempt)
            log.info(f"⚠ {req.role.value} {request.key} attempt {attempt}: {violations[0]}")
            failure = MalformedOutput(raw_text, violations, attempt)
            request = request.with_correction(correction_for(raw_text, violations[0]))
            delay = 0.0

        if isinstance(failure, MalformedOutput):
            raise failure
        if isinstance(failure, RateLimited):
            raise RateLimited(f"still rate limited after {policy.max_attempts} attempts: {failure}", failure.retry_after)
        raise ProviderUnreachable(f"unreachable after {policy.max_attempts} attempts: {failure}")

    async def embed(self, texts: list[str], policy: RetryPolicy | None = None) -> list[np.ndarray]:
        """
        Returns one unit-norm vector per text, in order. Vectors are cached for the life of the gateway.

        :raises EmptyInput: no texts, or a text that is empty after normalization
        """
        if not texts:
            raise EmptyInput("no texts to embed")
        for text in texts:
            if not normalize_category_name(text):
                raise EmptyInput(f"text {text!r} is empty after normalization")
        missing = [text for text in dict.fromkeys(texts) if text not in self.embeddings]
        if missing:
            vectors = await self._embed_uncached(missing, policy or self.policy)
            for text, vector in zip(missing, vectors):
                self.embeddings[text] = vector
        return [self.embeddings[text] for text in texts]

    async def _embed_uncached(self, texts: list[str], policy: RetryPolicy) -> list[np.ndarray]:
        model_id = self.models[Role.EMBEDDER]
        for attempt in range(1, policy.max_attempts + 1):
            await self.bucket.acquire()
            try:
                raw = await self.provider.embed(texts, model_id)
                break
            except (RateLimited, ProviderUnreachable) as e:
                if attempt == policy.max_attempts or not getattr(e, "retryable", True):
                    raise
                delay = getattr(e, "retry_after", None) or policy.delay_s(attempt)
                log.info(f"⚠ embed {len(texts)} texts: {e}, retry in {delay:.3f}s")
                await self.sleep(delay)
        if len(raw) != len(texts):
            raise ProviderUnreachable(f"asked for {len(texts)} embeddings, got {len(raw)}", retryable=False)

        vectors = []
        for text, values in zip(texts, raw):
            vector = np.asarray(values, dtype=np.float64)
            if self.dimension is None:
                self.dimension = vector.shape[0]
            if vector.shape != (self.dimension,):
                raise GatewayError(f"embedding for {text!r} has dimension {vector.shape}, expected {self.dimension}")
            norm = np.linalg.norm(vector)
            if norm == 0:
                raise GatewayError(f"provider returned a zero vector for {text!r}")
            vectors.append(vector / norm)
        return vectors
