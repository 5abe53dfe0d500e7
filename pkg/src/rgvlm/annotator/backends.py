"""Chat backends: the hermetic oracle, a generic HTTP client, and a disk cache."""

from __future__ import annotations

import base64
import hashlib
import json
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol

import numpy as np

from ..dataset import Trajectory
from ..env import ACTIONS, EnvConfig, TaskSpec, generate_task, shaped_reward
from .errors import BackendError, CacheMissError, TransportError
from .parsing import format_scores
from .windows import Window

API_KEY_ENV = "RGVLM_API_KEY"


@dataclass(frozen=True)
class WindowContext:
    """Side information that travels with a request but is never sent over
    the wire; only the oracle looks at it."""

    trajectory: Trajectory
    window: Window
    scale_max: int = 10


@dataclass(frozen=True)
class ChatRequest:
    model: str
    temperature: float
    messages: tuple[dict, ...]
    stage: int
    context: WindowContext | None = field(default=None, compare=False)

    def body(self) -> dict:
        return {"model": self.model, "temperature": self.temperature, "messages": list(self.messages)}

    def cache_key(self) -> str:
        blob = json.dumps(self.body(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class Completion:
    content: str
    meta: dict


class AnnotatorBackend(Protocol):
    label_source: str

    def complete(self, request: ChatRequest) -> Completion: ...


def text_part(text: str) -> dict:
    return {"kind": "text", "text": text}


def image_part(png: bytes) -> dict:
    return {"kind": "image", "media_type": "image/png", "data_base64": base64.b64encode(png).decode("ascii")}


class _Counter:
    def __init__(self):
        self._lock = threading.Lock()
        self.calls = 0

    def _tick(self) -> None:
        with self._lock:
            self.calls += 1


def round_half_away(x: float) -> int:
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


class OracleBackend(_Counter):
    """Stands in for the vision model: reads ground-truth shaped rewards of
    the window's transitions, adds Gaussian noise in score units, clamps and
    rounds half away from zero.

    Tasks are looked up in ``tasks`` by ``task_id`` or regenerated from the
    seed recorded in the trajectory metadata.
    """

    label_source = "oracle"

    def __init__(
        self,
        noise_std: float = 0.0,
        seed: int = 0,
        tasks: Mapping[str, TaskSpec] | None = None,
        env_config: EnvConfig | None = None,
    ):
        super().__init__()
        if noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {noise_std}")
        self.noise_std = float(noise_std)
        self.seed = int(seed)
        self.tasks = dict(tasks or {})
        self.env_config = env_config
        self._lock_tasks = threading.Lock()

    def task_for(self, trajectory: Trajectory) -> TaskSpec:
        task_id = trajectory.instruction.task_id
        with self._lock_tasks:
            if task_id in self.tasks:
                return self.tasks[task_id]
        meta = trajectory.meta
        if meta.get("seed", -1) < 0:
            raise BackendError(f"oracle cannot recover task {task_id!r}: no seed recorded and no task supplied")
        task = generate_task(int(meta["seed"]), int(meta["num_subtasks"]), self.env_config)
        if task.task_id != task_id:
            raise BackendError(f"oracle regenerated task {task.task_id!r} but the trajectory names {task_id!r}")
        with self._lock_tasks:
            self.tasks[task_id] = task
        return task

    def scores(self, context: WindowContext) -> list[int]:
        task = self.task_for(context.trajectory)
        window = context.window
        rng = np.random.default_rng([self.seed, int(hashlib.sha1(window.trajectory_id.encode()).hexdigest()[:8], 16), window.start_index])
        out = []
        for t in window.transitions:
            x = context.scale_max * shaped_reward(task, t.state, t.action, t.next_state)
            if self.noise_std:
                x += rng.normal(0.0, self.noise_std)
            out.append(round_half_away(min(max(x, 0.0), context.scale_max)))
        return out

    def complete(self, request: ChatRequest) -> Completion:
        if request.context is None:
            raise BackendError("the oracle backend needs the window context")
        self._tick()
        window = request.context.window
        if request.stage == 1:
            lines = [
                f"Action {i} ({ACTIONS[t.action]}): agent moved from {t.state.agent_pos} to {t.next_state.agent_pos}."
                for i, t in enumerate(window.transitions)
            ]
            return Completion("\n".join(lines), {"source": "oracle", "latency": 0.0})
        return Completion(format_scores(self.scores(request.context)), {"source": "oracle", "latency": 0.0})


class HttpBackend(_Counter):
    """POSTs the canonical chat body to ``{base_url}/chat``.

    5xx, 429, timeouts and connection failures raise :class:`TransportError`
    (the caller retries); other non-200 statuses raise :class:`BackendError`.
    """

    label_source = "lvlm"

    def __init__(self, base_url: str, api_key: str | None = None, timeout: float = 60.0, client=None):
        super().__init__()
        import httpx

        self._httpx = httpx
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.client = client or httpx.Client(timeout=timeout)

    def complete(self, request: ChatRequest) -> Completion:
        httpx = self._httpx
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        self._tick()
        start = time.perf_counter()
        try:
            resp = self.client.post(f"{self.base_url}/chat", json=request.body(), headers=headers)
        except httpx.TimeoutException as exc:
            raise TransportError(f"timeout talking to {self.base_url}: {exc}") from None
        except httpx.TransportError as exc:
            raise TransportError(f"transport failure talking to {self.base_url}: {exc}") from None
        latency = time.perf_counter() - start
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"backend returned HTTP {resp.status_code}", status=resp.status_code)
        if resp.status_code != 200:
            raise BackendError(f"backend returned HTTP {resp.status_code}: {resp.text[:200]}", status=resp.status_code)
        try:
            content = resp.json()["content"]
        except (ValueError, KeyError, TypeError):
            raise BackendError("backend response lacks a 'content' string") from None
        if not isinstance(content, str) or not content.strip():
            raise BackendError("backend returned empty content")
        meta: dict[str, Any] = {"source": "http", "latency": latency}
        usage = resp.json().get("usage")
        if isinstance(usage, dict):
            meta["usage"] = usage
        return Completion(content, meta)


class CachingBackend(_Counter):
    """Disk cache in front of another backend, keyed by the SHA-256 of the
    full request body (image bytes included). With ``inner=None`` it only
    replays and a miss is an error."""

    def __init__(self, cache_dir: str | os.PathLike, inner: AnnotatorBackend | None = None, source: str | None = None):
        super().__init__()
        self.source = source
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.inner = inner

    @property
    def label_source(self) -> str:
        if self.source is not None:
            return self.source
        return self.inner.label_source if self.inner is not None else "lvlm"

    def path_for(self, key: str) -> Path:
        return self.cache_dir / f"{key}.json"

    def complete(self, request: ChatRequest) -> Completion:
        self._tick()
        key = request.cache_key()
        path = self.path_for(key)
        if path.exists():
            record = json.loads(path.read_text())
            return Completion(record["response_content"], {"source": "cache", "latency": 0.0})
        if self.inner is None:
            raise CacheMissError(f"no cached response for request {key[:12]} (stage {request.stage})")
        result = self.inner.complete(request)
        record = {"request_hash": key, "stage": request.stage, "response_content": result.content, "timestamp": time.time()}
        fd, tmp = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(record, fh, sort_keys=True)
        os.replace(tmp, path)
        return result
