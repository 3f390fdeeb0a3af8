"""Two ways to drive the same generator-based processes.

Engine and fabric code is written as generators that yield ``Sleep`` (spend
modeled time) or ``WaitFor`` (block until a predicate over shared state holds).
``SimKernel`` runs them single-threaded on a virtual microsecond clock, which
makes whole 4-party runs deterministic.  ``ThreadRuntime`` runs each process
on its own thread against the wall clock; ``Sleep`` only accumulates modeled
time there, since the host CPU is doing the real work.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Generator

log = logging.getLogger(__name__)

Process = Generator[Any, Any, Any]


@dataclass(frozen=True)
class Sleep:
    us: float


@dataclass(frozen=True)
class WaitFor:
    gate: "Gate"
    pred: Callable[[], bool]
    timeout_us: float | None = None


class Task:
    def __init__(self, name: str):
        self.name = name
        self.done = False
        self.value: Any = None
        self.error: BaseException | None = None
        self.modeled_us = 0.0


class Gate:
    """Condition over some shared state.  Mutate the state inside ``with gate:``
    and call :meth:`notify` afterwards."""

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def notify(self) -> None:
        raise NotImplementedError


# --- virtual clock -------------------------------------------------------------

class SimGate(Gate):
    def __init__(self, kernel: "SimKernel"):
        self.kernel = kernel
        self.waiters: list[tuple[Callable[[], bool], Task, Process]] = []

    def notify(self) -> None:
        if not self.waiters:
            return
        still = []
        for pred, task, gen in self.waiters:
            if pred():
                self.kernel.call_soon(lambda t=task, g=gen: self.kernel._step(t, g, None))
            else:
                still.append((pred, task, gen))
        self.waiters = still


class SimKernel:
    """Discrete-event scheduler; events at equal times run in scheduling order."""

    simulated = True

    def __init__(self):
        self.now_us = 0.0
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = itertools.count()
        self.timeline: list[tuple[float, str]] = []
        self.failures: list[tuple[Task, BaseException]] = []

    def now(self) -> float:
        return self.now_us

    def gate(self) -> SimGate:
        return SimGate(self)

    def record(self, label: str) -> None:
        self.timeline.append((round(self.now_us, 6), label))

    def call_at(self, t: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (max(t, self.now_us), next(self._seq), fn))

    def call_soon(self, fn: Callable[[], None]) -> None:
        self.call_at(self.now_us, fn)

    def spawn(self, gen: Process, name: str = "task") -> Task:
        task = Task(name)
        self.call_soon(lambda: self._step(task, gen, None))
        return task

    def _step(self, task: Task, gen: Process, value: Any, exc: BaseException | None = None) -> None:
        try:
            req = gen.throw(exc) if exc else gen.send(value)
        except StopIteration as stop:
            task.done, task.value = True, stop.value
            return
        except Exception as err:  # surfaced by run()
            task.done, task.error = True, err
            self.failures.append((task, err))
            return
        if isinstance(req, Sleep):
            task.modeled_us += req.us
            self.call_at(self.now_us + req.us, lambda: self._step(task, gen, None))
        elif isinstance(req, WaitFor):
            if req.pred():
                self.call_soon(lambda: self._step(task, gen, None))
                return
            req.gate.waiters.append((req.pred, task, gen))
            if req.timeout_us is not None:
                self.call_at(self.now_us + req.timeout_us, lambda: self._expire(req.gate, task, gen))
        else:
            self._step(task, gen, None, TypeError(f"process {task.name} yielded {req!r}"))

    def _expire(self, gate: SimGate, task: Task, gen: Process) -> None:
        for i, (_, t, _) in enumerate(gate.waiters):
            if t is task:
                del gate.waiters[i]
                self._step(task, gen, None, TimeoutError(f"{task.name} timed out"))
                return

    def step(self) -> bool:
        if not self._heap:
            return False
        t, _, fn = heapq.heappop(self._heap)
        self.now_us = t
        fn()
        return True

    def run(self, until: Callable[[], bool] | None = None, raise_failures: bool = True) -> None:
        """Advance until ``until()`` holds or no events remain."""
        while not (until and until()):
            if not self.step():
                break
            if raise_failures and self.failures:
                task, exc = self.failures[0]
                raise RuntimeError(f"simulated task {task.name} failed") from exc

    def wait(self, task: Task, timeout: float | None = None) -> Any:
        self.run(lambda: task.done)
        if not task.done:
            raise TimeoutError(f"{task.name} cannot make progress (deadlock or missing peer)")
        if task.error:
            raise task.error
        return task.value


# --- threads ---------------------------------------------------------------------

class ThreadGate(Gate):
    def __init__(self):
        self.cond = threading.Condition(threading.RLock())

    def __enter__(self):
        self.cond.acquire()
        return self

    def __exit__(self, *exc):
        self.cond.release()
        return False

    def notify(self) -> None:
        with self.cond:
            self.cond.notify_all()


class ThreadRuntime:
    simulated = False

    def __init__(self, default_timeout_s: float = 120.0):
        self._t0 = time.perf_counter()
        self.default_timeout_s = default_timeout_s
        self.timeline: list[tuple[float, str]] = []
        self._tl_lock = threading.Lock()

    def now(self) -> float:
        return (time.perf_counter() - self._t0) * 1e6

    def gate(self) -> ThreadGate:
        return ThreadGate()

    def record(self, label: str) -> None:
        with self._tl_lock:
            self.timeline.append((self.now(), label))

    def call_soon(self, fn: Callable[[], None]) -> None:
        threading.Thread(target=fn, daemon=True).start()

    def spawn(self, gen: Process, name: str = "task") -> Task:
        task = Task(name)
        task._finished = threading.Event()
        threading.Thread(target=self._drive, args=(task, gen), name=name, daemon=True).start()
        return task

    def _drive(self, task: Task, gen: Process) -> None:
        value, exc = None, None
        try:
            while True:
                req = gen.throw(exc) if exc else gen.send(value)
                exc = None
                if isinstance(req, Sleep):
                    task.modeled_us += req.us
                elif isinstance(req, WaitFor):
                    timeout = req.timeout_us / 1e6 if req.timeout_us is not None else None
                    with req.gate.cond:
                        if not req.gate.cond.wait_for(req.pred, timeout):
                            exc = TimeoutError(f"{task.name} timed out")
                else:
                    raise TypeError(f"process {task.name} yielded {req!r}")
        except StopIteration as stop:
            task.value = stop.value
        except Exception as err:
            log.exception("task %s failed", task.name)
            task.error = err
        finally:
            task.done = True
            task._finished.set()

    def wait(self, task: Task, timeout: float | None = None) -> Any:
        if not task._finished.wait(timeout if timeout is not None else self.default_timeout_s):
            raise TimeoutError(f"{task.name} did not finish")
        if task.error:
            raise task.error
        return task.value
