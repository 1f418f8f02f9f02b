#!/usr/bin/env python3
"""
Bounded-parallel batch runner shared by the categorize, genschema and extract stages.

Items are queued and pulled by `max_in_flight` worker tasks. Each finished item becomes an Outcome (a result
or the exception raised for it) and outcomes are handed to a single callback strictly in input order, so the
callback can append to a record stream without locking and runs stay deterministic.

Usage:
  async def work(clip):
      return await categorize_clip(clip, gateway, template)

  await run_bounded(clips, work, max_in_flight=8, on_outcome=writer_callback, progress=True, desc="categorize")

"""
__license__ = "MIT - https://mit-license.org/"

import asyncio
import dataclasses
import logging
import sys
from typing import Any, Awaitable, Callable

from tqdm import tqdm

log = logging.getLogger(__name__)

MAX_IN_FLIGHT = 8


@dataclasses.dataclass(frozen=True)
class Outcome:
    index: int  # position in the input
    item: Any
    result: Any = None
    error: Exception | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclasses.dataclass
class BatchCounts:
    """Succeeded and failed item counts of one batch stage."""

    succeeded: int = 0
    failed: int = 0

    @property
    def total(self) -> int:
        return self.succeeded + self.failed

    @property
    def failure_rate(self) -> float:
        return self.failed / self.total if self.total else 0.0


async def run_bounded(
    items: list,
    worker: Callable[[Any], Awaitable[Any]],
    on_outcome: Callable[[Outcome], None],
    max_in_flight: int = MAX_IN_FLIGHT,
    progress: bool = False,
    desc: str = None,
) -> int:
    """
    Runs `worker(item)` for every item with at most `max_in_flight` running at once.

    :param items (list): the inputs
    :param worker (coroutine function): processes one item; exceptions are captured into its Outcome
    :param on_outcome (callable): receives every Outcome in input order
    :param max_in_flight (int): concurrency bound
    :param progress (bool): show a tqdm progress bar on stderr
    - returns (int): the number of outcomes delivered
    """
    assert max_in_flight >= 1, f"max_in_flight {max_in_flight} < 1"
    if not items:
        return 0

    queue = asyncio.Queue(maxsize=max_in_flight * 2)
    finished = {}  # index : Outcome waiting for its turn
    delivered = 0
    sink_errors = []
    bar = tqdm(total=len(items), desc=desc, disable=not progress, file=sys.stderr, leave=False)

    def drain():
        nonlocal delivered
        while delivered in finished:
            outcome = finished.pop(delivered)
            delivered += 1
            bar.update(1)
            if sink_errors:
                continue  # a failed sink stops delivery; remaining work is discarded
            try:
                on_outcome(outcome)
            except Exception as e:
                sink_errors.append(e)

    async def consume():
        while True:
            index, item = await queue.get()  # Get an item or wait if empty
            try:
                try:
                    outcome = Outcome(index, item, result=await worker(item))
                except Exception as e:
                    log.debug(f"item {index} failed: {e.__class__.__name__} {e}")
                    outcome = Outcome(index, item, error=e)
                finished[index] = outcome
                drain()
            finally:
                queue.task_done()  # Notify queue the item is processed

    tasks = [asyncio.create_task(consume()) for _ in range(min(max_in_flight, len(items)))]
    try:
        for index, item in enumerate(items):
            if sink_errors:
                break
            await queue.put((index, item))
        await queue.join()  # Block until all items in queue are processed
    finally:
        [task.cancel() for task in tasks]
        await asyncio.gather(*tasks, return_exceptions=True)
        bar.close()

    if sink_errors:
        raise sink_errors[0]
    return delivered
