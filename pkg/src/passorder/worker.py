"""Worker side: pull tasks from a manager, optimize + benchmark, report back."""

from __future__ import annotations

import logging
import os
import signal
import socket
import threading
import time
import uuid
from typing import Optional

from .environment import BenchmarkPolicy, measure_runtime
from .exceptions import EnvironmentFault, ProtocolError
from .protocol import PROTOCOL_VERSION, Message, Task, TaskResult, recv, send
from .state import ir_id

log = logging.getLogger(__name__)

ENDPOINT_ENV = "PASSORDER_MANAGER"


class WorkerInterrupted(Exception):
    pass


def execute_task(backend, task: Task, body: Optional[str], policy: BenchmarkPolicy,
                 worker_id: str = "") -> TaskResult:
    if task.policy:
        policy = BenchmarkPolicy.from_dict(task.policy)
    try:
        if task.kind == "baseline":
            base = backend.frontend(task.source or "", task.program_id)
            o3 = backend.o3(base)
            return TaskResult(task.task_id, "ok", worker_id,
                              base_body=base,
                              base_runtime=measure_runtime(backend, base, policy, task.program_id),
                              o3_body=o3,
                              o3_runtime=measure_runtime(backend, o3, policy, task.program_id))
        new = backend.optimize(body, task.get_invocation())
        runtime = measure_runtime(backend, new, policy, task.program_id)
        return TaskResult(task.task_id, "ok", worker_id, ir_body=new, runtime=runtime)
    except EnvironmentFault as e:
        return TaskResult(task.task_id, "fault", worker_id, stderr=f"{e}\n{e.stderr}".strip())


def parse_endpoint(endpoint: str) -> tuple:
    host, _, port = endpoint.rpartition(":")
    return host or "127.0.0.1", int(port)


class Worker:
    def __init__(self, endpoint: str, backend, policy: BenchmarkPolicy = BenchmarkPolicy(),
                 worker_id: Optional[str] = None, max_backoff: float = 5.0):
        self.endpoint = endpoint
        self.backend = backend
        self.policy = policy
        self.worker_id = worker_id or f"{socket.gethostname()}-{os.getpid()}-{uuid.uuid4().hex[:6]}"
        self.max_backoff = max_backoff
        self.stop = threading.Event()
        self.cache: dict = {}  # IR id -> body
        self.tasks_done = 0
        self.connect_attempts = 0

    def run(self, max_tasks: Optional[int] = None) -> None:
        backoff = 0.05
        while not self.stop.is_set():
            self.connect_attempts += 1
            try:
                sock = socket.create_connection(parse_endpoint(self.endpoint), timeout=5.0)
            except OSError as e:
                log.info("manager %s unreachable (%s), retrying in %.2fs", self.endpoint, e, backoff)
                self.stop.wait(backoff)
                backoff = min(backoff * 2, self.max_backoff)
                continue
            backoff = 0.05
            try:
                if self._session(sock, max_tasks) == "done":
                    return
            except (OSError, ConnectionError) as e:
                log.info("connection lost (%s), reconnecting", e)
            finally:
                sock.close()

    def _session(self, sock, max_tasks):
        sock.settimeout(None)
        wlock = threading.Lock()

        def say(msg):
            with wlock:
                send(sock, msg)

        say(Message("hello", {"worker_id": self.worker_id, "backend": type(self.backend).__name__}))
        ack = recv(sock)
        if ack is None:
            raise ConnectionError("manager closed during hello")
        if ack.kind != "hello":
            raise ProtocolError(ack.payload.get("message", "hello refused"))
        period = float(ack.payload.get("heartbeat", 10.0))
        beating = threading.Event()

        def heartbeat():
            while not beating.wait(period):
                try:
                    say(Message("heartbeat", {"worker_id": self.worker_id}))
                except OSError:
                    return

        threading.Thread(target=heartbeat, daemon=True).start()
        try:
            while not self.stop.is_set():
                if max_tasks is not None and self.tasks_done >= max_tasks:
                    say(Message("shutdown", {"worker_id": self.worker_id}))
                    return "done"
                say(Message("task_request", {"worker_id": self.worker_id}))
                msg = recv(sock)
                if msg is None:
                    raise ConnectionError("manager closed the connection")
                if msg.kind == "shutdown":
                    return "done"
                if msg.kind != "task":
                    raise ProtocolError(f"unexpected {msg.kind}")
                payload = msg.payload.get("task")
                if payload is None:
                    time.sleep(float(msg.payload.get("retry_after", 0.1)))
                    continue
                if payload.get("ir_body") is not None:
                    self.cache[payload["ir_id"]] = payload["ir_body"]
                task = Task.from_payload(payload)
                try:
                    result = execute_task(self.backend, task, self.cache.get(task.ir_id),
                                          self.policy, self.worker_id)
                except WorkerInterrupted:
                    say(Message("result", TaskResult(task.task_id, "retry", self.worker_id,
                                                     stderr="worker shut down").to_payload()))
                    say(Message("shutdown", {"worker_id": self.worker_id}))
                    return "done"
                if result.ir_body is not None:
                    self.cache[ir_id(result.ir_body)] = result.ir_body
                say(Message("result", result.to_payload()))
                self.tasks_done += 1
            say(Message("shutdown", {"worker_id": self.worker_id}))
            return "done"
        finally:
            beating.set()


def worker_loop(endpoint: str, backend, policy: BenchmarkPolicy = BenchmarkPolicy(), **kwargs) -> None:
    """Run a worker until the manager shuts it down or SIGTERM/SIGINT arrives."""
    w = Worker(endpoint, backend, policy, **kwargs)

    def on_signal(signum, frame):
        w.stop.set()
        raise WorkerInterrupted()

    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, on_signal)
        signal.signal(signal.SIGINT, on_signal)
    try:
        w.run()
    except WorkerInterrupted:
        pass
