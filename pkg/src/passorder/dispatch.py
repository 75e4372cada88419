"""Task queue with pull-based load balancing, plus local and socket front-ends."""

from __future__ import annotations

import logging
import queue
import socket
import socketserver
import threading
import time
from collections import Counter, deque
from typing import Callable, Optional

from .environment import BenchmarkPolicy
from .exceptions import ProtocolError
from .protocol import (PROTOCOL_VERSION, Message, Task, TaskResult, recv, send)

log = logging.getLogger(__name__)


class TaskQueue:
    """Outstanding tasks; idle workers pull, departed workers' tasks requeue.

    A task whose attempts exceed ``max_retries`` yields a ``failed`` result.
    Every task id produces exactly one result on ``results``.
    """

    def __init__(self, max_retries: int = 2):
        self.max_retries = max_retries
        self._waiting: deque = deque()
        self._tasks: dict = {}
        self._inflight: dict = {}  # task_id -> worker_id
        self._done: set = set()
        self._cond = threading.Condition()
        self.results: queue.Queue = queue.Queue()
        self.pulled = Counter()

    def submit(self, task: Task) -> None:
        with self._cond:
            if task.task_id in self._tasks or task.task_id in self._done:
                return
            self._tasks[task.task_id] = task
            self._waiting.append(task.task_id)
            self._cond.notify()

    def pull(self, worker_id: str, timeout: float = 0.0) -> Optional[Task]:
        deadline = time.monotonic() + timeout
        with self._cond:
            while not self._waiting:
                left = deadline - time.monotonic()
                if left <= 0:
                    return None
                self._cond.wait(left)
            tid = self._waiting.popleft()
            self._inflight[tid] = worker_id
            self.pulled[worker_id] += 1
            return self._tasks[tid]

    def _retry_or_fail(self, tid: str, stderr: str) -> None:
        task = self._tasks[tid]
        task.attempts += 1
        self._inflight.pop(tid, None)
        if task.attempts > self.max_retries:
            del self._tasks[tid]
            self._done.add(tid)
            self.results.put(TaskResult(tid, "failed", stderr=stderr))
        else:
            self._waiting.append(tid)
            self._cond.notify()

    def complete(self, result: TaskResult) -> bool:
        """Record a worker's result; False for unknown or duplicate ids."""
        with self._cond:
            tid = result.task_id
            if tid not in self._tasks:
                log.info("dropping result for unknown or finished task %s", tid)
                return False
            if result.status in ("fault", "retry"):
                self._retry_or_fail(tid, result.stderr)
                return True
            del self._tasks[tid]
            self._inflight.pop(tid, None)
            self._done.add(tid)
        self.results.put(result)
        return True

    def release(self, worker_id: str) -> list:
        """Requeue everything in flight on ``worker_id``."""
        with self._cond:
            tids = [t for t, w in self._inflight.items() if w == worker_id]
            for tid in tids:
                self._retry_or_fail(tid, f"worker {worker_id} left")
            return tids

    def outstanding(self) -> int:
        with self._cond:
            return len(self._tasks)

    def in_flight(self) -> int:
        with self._cond:
            return len(self._inflight)

    def drain_results(self, timeout: float = 0.0) -> list:
        out = []
        try:
            out.append(self.results.get(timeout=timeout) if timeout > 0 else self.results.get_nowait())
            while True:
                out.append(self.results.get_nowait())
        except queue.Empty:
            pass
        return out


class _SyncMixin:
    def run_sync(self, task: Task, timeout: Optional[float] = None) -> TaskResult:
        """Submit ``task`` and block for its result; others are kept for ``poll``."""
        self.queue.submit(task)
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            for r in self._collect(0.05):
                if r.task_id == task.task_id:
                    return r
                self._buffer.append(r)
            if deadline is not None and time.monotonic() > deadline:
                raise TimeoutError(f"task {task.task_id} not finished in {timeout}s")

    def submit(self, tasks) -> None:
        for t in tasks:
            self.queue.submit(t)

    def poll(self, timeout: float = 0.0) -> list:
        out, self._buffer = self._buffer, []
        return out + self._collect(timeout if not out else 0.0)


class LocalDispatcher(_SyncMixin):
    """Runs queued tasks in-process whenever it is polled."""

    def __init__(self, backend, policy: BenchmarkPolicy = BenchmarkPolicy(),
                 body_lookup: Callable[[str], str] = None, max_retries: int = 2):
        from .worker import execute_task
        self._execute = execute_task
        self.backend = backend
        self.policy = policy
        self.body_lookup = body_lookup
        self.queue = TaskQueue(max_retries)
        self.paused = False
        self._buffer: list = []

    def _collect(self, timeout: float) -> list:
        if not self.paused:
            while True:
                task = self.queue.pull("local")
                if task is None:
                    break
                body = self.body_lookup(task.ir_id) if task.kind == "transition" else None
                self.queue.complete(self._execute(self.backend, task, body, self.policy, "local"))
        return self.queue.drain_results()

    def close(self):
        pass


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        mgr: Manager = self.server.manager
        sock: socket.socket = self.request
        sock.settimeout(mgr.heartbeat_timeout)
        wlock = threading.Lock()

        def reply(msg):
            with wlock:
                send(sock, msg)

        worker_id = None
        try:
            try:
                hello = recv(sock)
            except ProtocolError as e:
                reply(Message("error", {"message": str(e)}))
                return
            if hello is None:
                return
            if hello.kind != "hello" or hello.version != PROTOCOL_VERSION:
                reply(Message("error", {"message": f"expected hello v{PROTOCOL_VERSION}"}))
                return
            worker_id = hello.payload.get("worker_id") or f"{self.client_address[0]}:{self.client_address[1]}"
            known: set = set()
            mgr._register(worker_id)
            reply(Message("hello", {"accepted": True, "heartbeat": mgr.heartbeat_period}))
            while not mgr.stopping.is_set():
                try:
                    msg = recv(sock)
                except ProtocolError as e:
                    reply(Message("error", {"message": str(e)}))
                    continue
                if msg is None:
                    break
                if msg.kind == "task_request":
                    task = mgr.queue.pull(worker_id, timeout=mgr.long_poll)
                    if task is None:
                        reply(Message("task", {"task": None, "retry_after": mgr.retry_after}))
                        continue
                    body = None
                    if task.kind == "transition" and task.ir_id not in known:
                        body = mgr.body_lookup(task.ir_id)
                        known.add(task.ir_id)
                    reply(Message("task", {"task": task.to_payload(body)}))
                elif msg.kind == "result":
                    result = TaskResult.from_payload(msg.payload)
                    mgr.queue.complete(result)
                elif msg.kind == "heartbeat":
                    pass
                elif msg.kind == "shutdown":
                    break
                else:
                    reply(Message("error", {"message": f"unexpected {msg.kind} from worker"}))
        except (OSError, socket.timeout) as e:
            log.info("worker %s connection lost: %s", worker_id, e)
        finally:
            if worker_id is not None:
                mgr._unregister(worker_id)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class Manager(_SyncMixin):
    """Serves the task queue to remote workers over TCP."""

    def __init__(self, body_lookup: Callable[[str], str], host: str = "127.0.0.1", port: int = 0,
                 max_retries: int = 2, heartbeat_period: float = 10.0,
                 heartbeat_timeout: float = 30.0):
        self.queue = TaskQueue(max_retries)
        self.body_lookup = body_lookup
        self.heartbeat_period = heartbeat_period
        self.heartbeat_timeout = heartbeat_timeout
        self.long_poll = 0.5
        self.retry_after = 0.05
        self.stopping = threading.Event()
        self.workers: set = set()
        self._wlock = threading.Lock()
        self._buffer: list = []
        self._server = _Server((host, port), _Handler)
        self._server.manager = self
        self._thread = threading.Thread(target=self._server.serve_forever, name="manager", daemon=True)
        self._thread.start()

    @property
    def address(self) -> tuple:
        return self._server.server_address

    @property
    def endpoint(self) -> str:
        h, p = self.address[:2]
        return f"{h}:{p}"

    def _register(self, worker_id):
        with self._wlock:
            self.workers.add(worker_id)
        log.info("worker %s joined", worker_id)

    def _unregister(self, worker_id):
        with self._wlock:
            self.workers.discard(worker_id)
        requeued = self.queue.release(worker_id)
        log.info("worker %s left, requeued %d task(s)", worker_id, len(requeued))

    def _collect(self, timeout: float) -> list:
        return self.queue.drain_results(timeout)

    def close(self):
        self.stopping.set()
        self._server.shutdown()
        self._server.server_close()
