#!/usr/bin/env python3
"""
Pipeline configuration: one JSON (or YAML) document validated by pydantic, plus the gateway and clock it implies.

Settings are merged from 1) CLI flags, 2) environment variables, 3) the config file and 4) static defaults.
Relative paths in a config file resolve against the file's directory; defaults resolve against this repository.
API keys are never configured directly: `provider.api_key_env` names the environment variable that holds the key.

Environment:
  CLIPMINE_CONFIG       config file used when --config is not given
  CLIPMINE_STORE        store root used when --store is not given
  SOURCE_DATE_EPOCH  fixed record timestamps (seconds since the epoch)

Usage:
  config = load_config("data/config/stub.yaml")
  gateway = build_gateway(config)
  clock = build_clock(config)

"""
__license__ = "MIT - https://mit-license.org/"

import datetime
import json
import logging
import os
from typing import Callable, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from clipmodel import EPOCH, utc_now
from gateway import Gateway, HttpProvider, RetryPolicy, Role, StubProvider
from prompts import TEMPLATES_DIR
from workers import MAX_IN_FLIGHT

log = logging.getLogger(__name__)

HERE = os.path.dirname(os.path.abspath(__file__))
DEFAULT_STORE = os.path.join(HERE, "store")
DEFAULT_SCENARIO = os.path.join(HERE, "data", "YAML", "lincoln-scenario.yaml")
ENV_CONFIG = "CLIPMINE_CONFIG"
ENV_STORE = "CLIPMINE_STORE"
ENV_EPOCH = "SOURCE_DATE_EPOCH"


class ConfigError(Exception):
    """Base class for configuration errors."""


class Settings(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProviderConfig(Settings):
    kind: Literal["http", "stub"] = "stub"
    base_url: str | None = None
    api_key_env: str = "CLIPMINE_API_KEY"
    fixture_path: str = DEFAULT_SCENARIO  # a fixture JSON, or a YAML scenario built into one on load
    models: dict[Role, str] = dict(StubProvider.MODEL_IDS)
    requests_per_minute: float | None = Field(default=None, gt=0)
    timeout_s: float = Field(default=120.0, gt=0)
    tcp_limit: int = Field(default=MAX_IN_FLIGHT, ge=1)
    media_part: str = "video_url"
    cache_expiration_s: int = Field(default=0, ge=0)

    @model_validator(mode="before")
    @classmethod
    def no_literal_keys(cls, data):
        if isinstance(data, dict) and "api_key" in data:
            raise ValueError("api_key must not be written in a config file; set provider.api_key_env to the variable that holds it")
        return data

    @model_validator(mode="after")
    def http_needs_url(self):
        if self.kind == "http" and not self.base_url:
            raise ValueError("provider.base_url is required for the http provider")
        return self


class TemplatesConfig(Settings):
    categorize: str = os.path.join(TEMPLATES_DIR, "categorize.txt")
    canonicalize: str = os.path.join(TEMPLATES_DIR, "canonicalize.txt")
    schema_: str = Field(default=os.path.join(TEMPLATES_DIR, "schema.txt"), alias="schema")
    extract: str = os.path.join(TEMPLATES_DIR, "extract.txt")

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    def path(self, name: str) -> str:
        return self.schema_ if name == "schema" else getattr(self, name)


class MatchConfig(Settings):
    jaccard: float = Field(default=0.5, ge=0.0, le=1.0)
    levenshtein: float = Field(default=0.85, ge=0.0, le=1.0)


class PipelineConfig(Settings):
    provider: ProviderConfig = ProviderConfig()
    max_in_flight: int = Field(default=MAX_IN_FLIGHT, ge=1, le=256)
    retry: RetryPolicy = RetryPolicy()
    k_top_categories: int = Field(default=50, ge=1)
    min_similarity: float = Field(default=0.30, ge=-1.0, le=1.0)
    max_examples_inline: int = Field(default=3, ge=0)
    max_schema_entities: int = Field(default=12, ge=1)
    max_schema_attributes: int = Field(default=8, ge=1)
    templates: TemplatesConfig = TemplatesConfig()
    store_root: str = DEFAULT_STORE
    generic_entities: bool = True
    text_sidechannel: bool = True
    max_failure_rate: float = Field(default=0.2, ge=0.0, le=1.0)
    match: MatchConfig = MatchConfig()
    methods: tuple[str, ...] = ("ours", "speech", "ocr", "caption", "yolo")
    entity_types: tuple[str, ...] = ("Person", "Location", "Object")
    type_aliases: dict[str, str] = {}
    fixed_time: datetime.datetime | None = None

    @model_validator(mode="after")
    def ours_is_a_method(self):
        if "ours" not in self.methods:
            raise ValueError("methods must include 'ours'")
        return self


def _resolve(path: str | None, base: str) -> str | None:
    if not path:
        return path
    path = os.path.expanduser(path)
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base, path))


def _resolve_paths(document: dict, base: str) -> dict:
    """Resolves the relative paths of a raw config document against `base`."""
    if "store_root" in document:
        document["store_root"] = _resolve(document["store_root"], base)
    provider = document.get("provider")
    if isinstance(provider, dict) and "fixture_path" in provider:
        provider["fixture_path"] = _resolve(provider["fixture_path"], base)
    templates = document.get("templates")
    if isinstance(templates, dict):
        for name, path in templates.items():
            templates[name] = _resolve(path, base)
    return document


def load_config(path: str = None) -> PipelineConfig:
    """
    Loads and validates the config file at `path`, or $CLIPMINE_CONFIG, or returns the defaults (stub provider).

    :raises ConfigError: unreadable file or invalid settings
    """
    path = path or os.environ.get(ENV_CONFIG)
    if not path:
        log.info("no config file; using defaults")
        return PipelineConfig()
    try:
        with open(path, mode="r", encoding="utf-8") as fh:
            document = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"{path}: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: expected a mapping of settings, not {type(document).__name__}")
    document = _resolve_paths(document, os.path.dirname(os.path.abspath(path)))
    try:
        config = PipelineConfig.model_validate(document)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"{path}: {problems}") from e
    log.info(f"loaded config {path} (provider {config.provider.kind})")
    return config


def apply_overrides(config: PipelineConfig, **overrides) -> PipelineConfig:
    """Returns a copy with the given settings replaced; None values and unknown names are ignored."""
    updates = {name: value for name, value in overrides.items() if value is not None and name in PipelineConfig.model_fields}
    if "store_root" not in updates and os.environ.get(ENV_STORE):
        updates["store_root"] = os.environ[ENV_STORE]
    if not updates:
        return config
    try:
        return PipelineConfig.model_validate({**config.model_dump(by_alias=True), **updates})
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_fixture(config: PipelineConfig) -> dict:
    """The stub fixture: read from JSON, or built from a YAML scenario with this config's prompts."""
    path = config.provider.fixture_path
    if path.endswith((".yaml", ".yml")):
        import asyncio

        from stubfixture import build_fixture, load_scenario  # lazy: stubfixture imports the stage modules

        return asyncio.run(build_fixture(load_scenario(path), config))
    try:
        with open(path, mode="r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e


def build_provider(config: PipelineConfig, fixture: dict = None):
    settings = config.provider
    if settings.kind == "stub":
        return StubProvider(fixture if fixture is not None else load_fixture(config))
    return HttpProvider(
        base_url=settings.base_url,
        api_key_env=settings.api_key_env,
        timeout_s=settings.timeout_s,
        tcp_limit=settings.tcp_limit,
        media_part=settings.media_part,
        cache_expiration_s=settings.cache_expiration_s,
        cache_name=os.path.join(config.store_root, "clipmine-cache"),
    )


def build_gateway(config: PipelineConfig, fixture: dict = None, sleep=None) -> Gateway:
    """
    Returns a Gateway for the configured provider. Must be called outside a running event loop
    when the stub fixture is a YAML scenario.

    :raises ConfigError: a role has no model id
    """
    missing = [role.value for role in Role if role not in config.provider.models]
    if missing:
        raise ConfigError(f"provider.models has no model id for {', '.join(missing)}")
    kwargs = {"sleep": sleep} if sleep is not None else {}
    return Gateway(
        build_provider(config, fixture),
        models=config.provider.models,
        policy=config.retry,
        requests_per_minute=config.provider.requests_per_minute,
        **kwargs,
    )


def build_clock(config: PipelineConfig) -> Callable[[], datetime.datetime]:
    """
    Returns the record timestamp source: `fixed_time`, else $SOURCE_DATE_EPOCH, else the epoch for the stub
    provider, else the current time.
    """
    fixed = config.fixed_time
    if fixed is None and os.environ.get(ENV_EPOCH):
        try:
            fixed = datetime.datetime.fromtimestamp(int(os.environ[ENV_EPOCH]), tz=datetime.timezone.utc)
        except ValueError as e:
            raise ConfigError(f"${ENV_EPOCH} is not an integer: {os.environ[ENV_EPOCH]}") from e
    if fixed is None and config.provider.kind == "stub":
        fixed = EPOCH
    if fixed is None:
        return utc_now
    if fixed.tzinfo is None:
        fixed = fixed.replace(tzinfo=datetime.timezone.utc)
    fixed = fixed.astimezone(datetime.timezone.utc)
    return lambda: fixed
