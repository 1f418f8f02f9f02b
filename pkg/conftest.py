#!/usr/bin/env python3
"""
Shared pytest fixtures: the stub configuration, the Lincoln scenario fixture, scratch stores and a scripted
provider that records every request it is sent.

Placing this file at the repository root puts the root on sys.path, so tests import the scripts directly.

"""
__license__ = "MIT - https://mit-license.org/"

import asyncio
import os

import pytest

from clipmodel import ClipManifestEntry
from config import apply_overrides, load_config
from gateway import Gateway, PromptRequest, Provider, RetryPolicy, StubProvider, trigram_embedding
from store import RecordStore
from stubfixture import build_fixture, load_scenario

HERE = os.path.dirname(os.path.abspath(__file__))
STUB_CONFIG = os.path.join(HERE, "data", "config", "stub.yaml")
SCENARIO = os.path.join(HERE, "data", "YAML", "lincoln-scenario.yaml")
MANIFEST = os.path.join(HERE, "data", "manifests", "fixture-12.jsonl")
EXTRA_MANIFEST = os.path.join(HERE, "data", "manifests", "extra-13.jsonl")
TRUTH = os.path.join(HERE, "data", "eval", "lincoln-truth.jsonl")
BASELINES = os.path.join(HERE, "data", "eval", "lincoln-baselines.jsonl")


async def no_sleep(seconds: float) -> None:
    """Stands in for asyncio.sleep so retries and backoff cost no time."""
    await asyncio.sleep(0)


class ScriptedProvider(Provider):
    """
    Replies from a script and records every request.
    A script item is reply text, an exception to raise, or a callable taking the request.
    The last item repeats once the script runs out.
    """

    name = "scripted"

    def __init__(self, *script, dimension: int = 256):
        assert script, "script is empty"
        self.script = list(script)
        self.requests = []
        self.embedded = []
        self.dimension = dimension

    async def complete(self, request: PromptRequest, model_id: str) -> str:
        self.requests.append(request)
        item = self.script[min(len(self.requests), len(self.script)) - 1]
        if isinstance(item, Exception):
            raise item
        return item(request) if callable(item) else item

    async def embed(self, texts: list[str], model_id: str) -> list[list[float]]:
        self.embedded.append(list(texts))
        return [list(trigram_embedding(text, self.dimension)) for text in texts]


@pytest.fixture
def stub_config(tmp_path, monkeypatch):
    """The shipped stub configuration with its store in a scratch directory."""
    monkeypatch.delenv("CLIPMINE_STORE", raising=False)
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    return apply_overrides(load_config(STUB_CONFIG), store_root=str(tmp_path / "store"))


@pytest.fixture(scope="session")
def scenario_fixture() -> dict:
    """Request-keyed stub replies for the Lincoln scenario, built once per test session."""
    return asyncio.run(build_fixture(load_scenario(SCENARIO), load_config(STUB_CONFIG)))


@pytest.fixture
def store(tmp_path) -> RecordStore:
    return RecordStore(str(tmp_path / "store"), durable=False)


@pytest.fixture
def make_clip():
    def clip(clip_id: str = "clip-001", **fields) -> ClipManifestEntry:
        values = {"media_uri": f"media://test/{clip_id}.mp4", "duration_s": 10.0}
        values.update(fields)
        return ClipManifestEntry(clip_id=clip_id, **values)

    return clip


@pytest.fixture
def scripted_gateway():
    """Factory: a Gateway over a ScriptedProvider that never sleeps."""

    def gateway(*script, policy: RetryPolicy = RetryPolicy(), requests_per_minute: float = None) -> Gateway:
        return Gateway(
            ScriptedProvider(*script),
            models=StubProvider.MODEL_IDS,
            policy=policy,
            requests_per_minute=requests_per_minute,
            sleep=no_sleep,
        )

    return gateway
