"""
Producer-consumer data pipeline.

Producer threads synthesize batches into resolution buckets and push them
through a bounded channel; the trainer pulls them on its own schedule.  A
full channel blocks producers (backpressure), an empty one blocks the
consumer, and closing the channel ends the stream once it is drained.

Payloads are pure functions of ``(seed, item id)``, so `OrderedConsumer`
can hand the trainer the same sequence of batches whatever the number of
producers or the thread interleaving.  Producers never claim an id more
than the channel capacity past the last batch the trainer received, so
the reorder buffer cannot grow past the capacity either.
"""

import abc
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, ValidationError

__all__ = [
    "END_OF_STREAM",
    "BucketKey",
    "Channel",
    "DataPipeline",
    "IdCounter",
    "OrderedConsumer",
    "PipelineConfig",
    "PipelineStats",
    "ProducerPool",
    "QueueChannel",
    "WorkItem",
    "consume_batch",
    "producer_loop",
]

logger = logging.getLogger(__name__)


class _EndOfStream:
    def __repr__(self):
        return "END_OF_STREAM"

    def __bool__(self):
        return False


#: Returned by `consume_batch` once the channel is closed and drained.
END_OF_STREAM = _EndOfStream()


@dataclass(frozen=True, order=True)
class BucketKey:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise DimensionError(
                f"bucket dimensions must be positive, got {self.height}x{self.width}"
            )

    def __str__(self):
        return f"{self.height}x{self.width}"

    @classmethod
    def parse(cls, key):
        """Parse ``"{height}x{width}"``."""
        try:
            height, width = (int(v) for v in str(key).lower().split("x"))
        except ValueError:
            raise ValidationError(
                f"bucket key {key!r} is not of the form HxW"
            ) from None
        return cls(height, width)

    @property
    def shape(self):
        return (self.height, self.width)


@dataclass(eq=False)
class WorkItem:
    id: int
    bucket: BucketKey
    payload: object
    producer: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    """
    Parameters
    ----------
    producers : int
        Producer threads.
    capacity : int
        Channel capacity in items.
    buckets : tuple of BucketKey
        Empty selects the task's default buckets.
    """

    producers: int = 2
    capacity: int = 4
    buckets: tuple = ()

    def __post_init__(self):
        if self.producers < 1:
            raise ValidationError(
                f"pipeline.producers must be >= 1, got {self.producers}"
            )
        if self.capacity < 1:
            raise ValidationError(
                f"pipeline.capacity must be >= 1, got {self.capacity}"
            )
        object.__setattr__(
            self,
            "buckets",
            tuple(
                b if isinstance(b, BucketKey) else BucketKey.parse(b)
                for b in self.buckets
            ),
        )

    @classmethod
    def from_section(cls, section):
        return cls(
            producers=int(section["producers"]),
            capacity=int(section["capacity"]),
            buckets=tuple(section["buckets"] or ()),
        )


@dataclass
class PipelineStats:
    """Counters shared by the producers and the consumer."""

    produced: int = 0
    consumed: int = 0
    blocked_seconds: float = 0.0
    max_depth: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record_put(self, depth, blocked):
        with self._lock:
            self.produced += 1
            self.blocked_seconds += blocked
            self.max_depth = max(self.max_depth, depth)

    def record_get(self):
        with self._lock:
            self.consumed += 1

    def record_wait(self, blocked):
        with self._lock:
            self.blocked_seconds += blocked


class Channel(abc.ABC):
    """
    Transport between producers and the consumer.

    Implementations must block `put` while full and `get` while empty, and
    must transfer ownership of items: a producer does not touch an item
    after a successful `put`.
    """

    @abc.abstractmethod
    def put(self, item, stop=None):
        """
        Enqueue ``item``, blocking while the channel is full.

        Returns False, without enqueueing, if the channel is closed or the
        ``stop`` event is set while waiting.
        """

    @abc.abstractmethod
    def get(self, timeout=None):
        """
        Dequeue the oldest item, blocking while empty.  Returns
        `END_OF_STREAM` once closed and drained.
        """

    @abc.abstractmethod
    def close(self):
        """Refuse further items and wake all waiters."""

    @abc.abstractmethod
    def wake(self):
        """Wake blocked producers so they can observe a stop event."""


class QueueChannel(Channel):
    """In-process bounded FIFO."""

    def __init__(self, capacity, stats=None):
        if capacity < 1:
            raise ValidationError(f"channel capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.stats = stats if stats is not None else PipelineStats()
        self._items = deque()
        self._cond = threading.Condition()
        self._closed = False

    def __len__(self):
        with self._cond:
            return len(self._items)

    @property
    def closed(self):
        return self._closed

    def put(self, item, stop=None):
        start = time.perf_counter()
        with self._cond:
            while len(self._items) >= self.capacity:
                if self._closed or (stop is not None and stop.is_set()):
                    return False
                self._cond.wait()
            if self._closed:
                return False
            self._items.append(item)
            depth = len(self._items)
            self._cond.notify_all()
        self.stats.record_put(depth, time.perf_counter() - start)
        return True

    def get(self, timeout=None):
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self._items:
                if self._closed:
                    return END_OF_STREAM
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TimeoutError(f"no item within {timeout} s")
                self._cond.wait(remaining)
            item = self._items.popleft()
            self._cond.notify_all()
        self.stats.record_get()
        return item

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def wake(self):
        with self._cond:
            self._cond.notify_all()


class IdCounter:
    """
    Thread-safe source of item ids ``0, 1, 2, ...``.

    Parameters
    ----------
    limit : int or None
        Hand out at most this many ids.
    window : int or None
        Hand out id ``i`` only once ``i < base + window``, where ``base`` is
        moved forward by `advance` as the consumer releases items.  This
        bounds everything claimed but not yet released, reorder buffer
        included, to ``window`` items.
    stats : PipelineStats or None
        Time spent waiting on the window is counted as backpressure.
    """

    def __init__(self, limit=None, window=None, stats=None):
        if window is not None and window < 1:
            raise ValidationError(f"id window must be >= 1, got {window}")
        self.limit = limit
        self.window = window
        self.stats = stats
        self._next = 0
        self._base = 0
        self._cond = threading.Condition()

    def next(self, stop=None):
        """The next id, or None once the limit is reached or ``stop`` is set."""
        start = time.perf_counter()
        with self._cond:
            while True:
                if self.limit is not None and self._next >= self.limit:
                    return None
                if stop is not None and stop.is_set():
                    return None
                if self.window is None or self._next < self._base + self.window:
                    break
                self._cond.wait()
            item_id = self._next
            self._next += 1
        if self.stats is not None and self.window is not None:
            self.stats.record_wait(time.perf_counter() - start)
        return item_id

    def advance(self, base):
        """Every id below ``base`` has been released by the consumer."""
        with self._cond:
            if base > self._base:
                self._base = base
                self._cond.notify_all()

    def wake(self):
        """Wake producers waiting on the window so they can observe a stop event."""
        with self._cond:
            self._cond.notify_all()


def producer_loop(make_payload, buckets, channel, ids, stop, producer=0):
    """
    Produce work items until ``stop`` is set or ``ids`` runs out.

    Item ``id`` goes to bucket ``buckets[id % len(buckets)]`` and carries
    ``make_payload(id, bucket)``.  Blocks on a full channel and on a full
    id window.

    Returns
    -------
    int
        Number of items this producer delivered.
    """
    if not buckets:
        raise ValidationError("producer needs at least one bucket")
    delivered = 0
    while not stop.is_set():
        item_id = ids.next(stop)
        if item_id is None:
            break
        bucket = buckets[item_id % len(buckets)]
        item = WorkItem(item_id, bucket, make_payload(item_id, bucket), producer)
        if not channel.put(item, stop):
            break
        delivered += 1
    logger.debug("Producer %d finished after %d items", producer, delivered)
    return delivered


def consume_batch(channel, timeout=None):
    """The next `WorkItem`, or `END_OF_STREAM`."""
    return channel.get(timeout=timeout)


class ProducerPool:
    """
    Runs `producer_loop` on ``producers`` threads sharing one id counter.
    With a ``window``, ids are claimed no further than ``window`` past the
    last id the consumer released (see `IdCounter`).

    The channel is closed when the last producer exits, so a consumer sees
    `END_OF_STREAM` after the final item.  An exception in a producer stops
    the pool and is re-raised from `join`.
    """

    def __init__(
        self,
        make_payload,
        buckets,
        channel,
        producers=1,
        limit=None,
        window=None,
        stats=None,
    ):
        self.make_payload = make_payload
        self.buckets = list(buckets)
        self.channel = channel
        self.producers = producers
        self.ids = IdCounter(limit, window, stats)
        self.stop_event = threading.Event()
        self.delivered = [0] * producers
        self._threads = []
        self._alive = producers
        self._lock = threading.Lock()
        self._error = None

    def _run(self, index):
        try:
            self.delivered[index] = producer_loop(
                self.make_payload,
                self.buckets,
                self.channel,
                self.ids,
                self.stop_event,
                producer=index,
            )
        except BaseException as err:
            logger.error("Producer %d failed: %s", index, err)
            self._error = err
            self.stop_event.set()
            self.ids.wake()
            self.channel.wake()
        finally:
            with self._lock:
                self._alive -= 1
                last = self._alive == 0
            if last:
                self.channel.close()

    def start(self):
        for index in range(self.producers):
            thread = threading.Thread(
                target=self._run, args=(index,), name=f"producer-{index}", daemon=True
            )
            self._threads.append(thread)
            thread.start()
        return self

    def stop(self):
        """Ask producers to finish; blocked producers are woken."""
        self.stop_event.set()
        self.ids.wake()
        self.channel.wake()

    def join(self, timeout=None):
        for thread in self._threads:
            thread.join(timeout)
        if self._error is not None:
            raise self._error

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
        self.channel.close()
        self.join()


class OrderedConsumer:
    """
    Re-sequence items by id.

    Items are pulled from the channel as they arrive and released strictly
    in id order starting at 0.  Given the producers' ``ids`` counter, each
    release advances its window, so the reorder buffer counts against the
    producers' budget.
    """

    def __init__(self, channel, ids=None):
        self.channel = channel
        self.ids = ids
        self.next_id = 0
        self._pending = {}
        self._ended = False

    def get(self, timeout=None):
        while self.next_id not in self._pending and not self._ended:
            item = consume_batch(self.channel, timeout=timeout)
            if item is END_OF_STREAM:
                self._ended = True
                break
            self._pending[item.id] = item
        if self.next_id in self._pending:
            item = self._pending.pop(self.next_id)
            self.next_id += 1
            self._advance()
            return item
        if self._pending:
            # Ids were skipped by a stopped producer; release the rest in order.
            self.next_id = min(self._pending)
            self._advance()
            return self.get(timeout)
        return END_OF_STREAM

    def __iter__(self):
        while (item := self.get()) is not END_OF_STREAM:
            yield item

    def _advance(self):
        if self.ids is not None:
            self.ids.advance(self.next_id)


def payload_rng(seed, item_id):
    """Random stream owned by one work item."""
    return np.random.default_rng([int(seed), int(item_id)])


class DataPipeline:
    """
    Training-batch pipeline for a task.

    Parameters
    ----------
    task : flowdesk.tasks.Task
    config : PipelineConfig
    seed : int
    batch_size : int
    limit : int or None
        Total number of batches to produce.

    Iterating yields ``WorkItem`` objects in id order; each payload is a
    `flowdesk.tasks.Batch` whose shapes match its bucket.
    """

    def __init__(self, task, config, seed, batch_size, limit=None):
        self.task = task
        self.config = config
        self.seed = seed
        self.batch_size = batch_size
        self.buckets = list(config.buckets) or [
            BucketKey(*shape) for shape in task.default_buckets()
        ]
        self.stats = PipelineStats()
        self.channel = QueueChannel(config.capacity, self.stats)
        self.pool = ProducerPool(
            self.make_payload,
            self.buckets,
            self.channel,
            producers=config.producers,
            limit=limit,
            window=config.capacity,
            stats=self.stats,
        )
        self.consumer = OrderedConsumer(self.channel, self.pool.ids)

    def make_payload(self, item_id, bucket):
        return self.task.sample_batch(
            payload_rng(self.seed, item_id), self.batch_size, bucket.shape
        )

    def __enter__(self):
        logger.debug(
            "Starting %d producers, capacity %d, buckets %s",
            self.config.producers,
            self.config.capacity,
            ", ".join(str(b) for b in self.buckets),
        )
        self.pool.start()
        return self

    def __exit__(self, *exc):
        self.pool.__exit__(*exc)
        logger.debug(
            "Pipeline done: %d produced, %d consumed, %.3f s producer backpressure",
            self.stats.produced,
            self.stats.consumed,
            self.stats.blocked_seconds,
        )

    def __iter__(self):
        return iter(self.consumer)
