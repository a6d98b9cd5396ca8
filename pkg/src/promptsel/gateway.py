"""Chat and embedding access with caching, transport retries, rate limiting and a cost ledger.

Backends speak the OpenAI-compatible ``/chat/completions`` and ``/embeddings``
wire format over HTTP, or route to the offline mock oracle when the endpoint
base is ``mock://``. Precomputed embeddings load from ``file://`` JSONL.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import Counter, defaultdict, deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx
import numpy as np
from tenacity import RetryError, Retrying, retry_if_exception, stop_after_attempt, wait_exponential_jitter

from .mock_oracle import mock_embedding, mock_oracle_complete
from .promptgrid import ContextOverflowError, EmbeddingText, PromptText
from .utils import byte_tokens, canonical_json, iter_jsonl, sha256_text

logger = logging.getLogger(__name__)

TRANSPORT_ATTEMPTS = 3


class UpstreamError(Exception):
    """The endpoint could not be reached or answered with an error (CLI exit code 3)."""


class BudgetExceeded(Exception):
    """Cumulative spend reached the configured cap (CLI exit code 4)."""


@dataclass(frozen=True)
class ModelProfile:
    name: str
    kind: str = "chat"
    endpoint_base: str = "mock://"
    temperature: float = 0.3
    price_in: float = 0.0  # USD per 1M tokens
    price_out: float = 0.0
    context_limit: int = 16384
    requests_per_minute: int = 0  # 0 disables the limiter
    max_concurrency: int = 8
    api_key_env: str | None = None
    timeout_s: float = 60.0
    mock_seed: int = 0
    mock_noise: float = 0.0
    mock_failures: int = 0
    embedding_dim: int = 64

    def __post_init__(self):
        if self.kind not in ("chat", "embedding"):
            raise ValueError(f"profile {self.name}: kind must be 'chat' or 'embedding'")
        if self.temperature < 0:
            raise ValueError(f"profile {self.name}: temperature must be >= 0")
        if self.price_in < 0 or self.price_out < 0:
            raise ValueError(f"profile {self.name}: prices must be >= 0")
        if self.context_limit <= 0:
            raise ValueError(f"profile {self.name}: context_limit must be > 0")

    @property
    def is_mock(self) -> bool:
        return self.endpoint_base.startswith("mock://")

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelProfile":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model profile keys: {sorted(unknown)}")
        return cls(**data)

    def cost(self, tokens_in: int, tokens_out: int) -> float:
        return tokens_in * self.price_in / 1e6 + tokens_out * self.price_out / 1e6


@dataclass
class CallRecord:
    model: str
    prompt_hash: str
    attempt: int
    tokens_in: int = 0
    tokens_out: int = 0
    latency_ms: float = 0.0
    cost: float = 0.0
    outcome: str = "ok"  # ok | transport_error | parse_reject
    cached: bool = False
    token_source: str = "estimate"  # usage | estimate
    kind: str = "chat"
    dataset: str = ""
    spec: str = ""
    phase: str = ""
    user_id: str = ""
    started_at: float = 0.0


def drop_partial_line(path: Path) -> int:
    """Truncate a JSONL file after its last newline; returns the bytes removed.

    A process killed mid-write can leave half a record behind, and appending
    to it would fuse that fragment with the next record.
    """
    if not path.exists():
        return 0
    data = path.read_bytes()
    if not data or data.endswith(b"\n"):
        return 0
    keep = data.rfind(b"\n") + 1
    with open(path, "r+b") as fh:
        fh.truncate(keep)
    logger.warning("dropped %d bytes of a partial trailing line in %s", len(data) - keep, path)
    return len(data) - keep


class Ledger:
    """Append-only call log; appends are atomic and optionally mirrored to a JSONL file."""

    def __init__(self, path: str | os.PathLike | None = None, load_existing: bool = False):
        self._lock = threading.Lock()
        self._records: list[CallRecord] = []
        self._total = 0.0
        self.path = Path(path) if path else None
        self._fh = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            drop_partial_line(self.path)
            if load_existing:
                self._records = Ledger.load(self.path)
                self._total = sum(r.cost for r in self._records)
            self._fh = open(self.path, "a", encoding="utf-8", buffering=1)

    def append(self, record: CallRecord) -> None:
        with self._lock:
            self._records.append(record)
            self._total += record.cost
            if self._fh:
                self._fh.write(json.dumps(asdict(record)) + "\n")

    def close(self) -> None:
        with self._lock:
            if self._fh:
                self._fh.close()
                self._fh = None

    def records(self) -> list[CallRecord]:
        with self._lock:
            return list(self._records)

    @property
    def total_cost(self) -> float:
        with self._lock:
            return self._total

    def __len__(self) -> int:
        return len(self._records)

    @staticmethod
    def load(path: str | os.PathLike) -> list[CallRecord]:
        out = []
        if not Path(path).exists():
            return out
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    out.append(CallRecord(**json.loads(line)))
                except (json.JSONDecodeError, TypeError):
                    logger.warning("skipping truncated ledger line in %s", path)
        return out


class ResponseCache:
    """Content-addressed completion cache: memory always, plus files when ``root`` is set."""

    def __init__(self, root: str | os.PathLike | None = None):
        self.root = Path(root) if root else None
        self._mem: dict[str, dict] = {}
        self._lock = threading.Lock()

    @staticmethod
    def key(model: str, prompt: str, temperature: float, attempt: int) -> str:
        return sha256_text(canonical_json([model, sha256_text(prompt), temperature, attempt]))

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict | None:
        with self._lock:
            hit = self._mem.get(key)
        if hit is not None or self.root is None:
            return hit
        path = self._path(key)
        try:
            hit = json.loads(path.read_text("utf-8"))
        except (FileNotFoundError, json.JSONDecodeError):
            return None
        with self._lock:
            self._mem[key] = hit
        return hit

    def put(self, key: str, value: dict) -> None:
        with self._lock:
            self._mem[key] = value
        if self.root is None:
            return
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f"{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_text(json.dumps(value), "utf-8")
        os.replace(tmp, path)


class RateLimiter:
    """Sliding 60-second window: at most ``rpm`` acquisitions per window."""

    def __init__(self, rpm: int, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep, window: float = 60.0):
        self.rpm = rpm
        self.clock = clock
        self.sleep = sleep
        self.window = window
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        if self.rpm <= 0:
            return self.clock()
        with self._lock:
            while True:
                now = self.clock()
                while self._stamps and self._stamps[0] <= now - self.window:
                    self._stamps.popleft()
                if len(self._stamps) < self.rpm:
                    self._stamps.append(now)
                    return now
                self.sleep(self._stamps[0] + self.window - now)


# ---------------------------------------------------------------------------
# backends


def _retryable(exc: BaseException) -> bool:
    if isinstance(exc, httpx.TransportError):
        return True
    if isinstance(exc, httpx.HTTPStatusError):
        code = exc.response.status_code
        return code == 429 or code >= 500
    return False


class HttpBackend:
    """OpenAI-compatible JSON over HTTP with bounded, jittered transport retries."""

    def __init__(self, client: httpx.Client | None = None, sleep: Callable[[float], None] = time.sleep,
                 backoff_initial: float = 1.0, backoff_max: float = 20.0):
        self.client = client or httpx.Client()
        self.sleep = sleep
        self.backoff_initial = backoff_initial
        self.backoff_max = backoff_max

    def _post(self, profile: ModelProfile, path: str, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if profile.api_key_env:
            key = os.environ.get(profile.api_key_env)
            if not key:
                raise UpstreamError(f"environment variable {profile.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        url = profile.endpoint_base.rstrip("/") + path
        retrying = Retrying(
            stop=stop_after_attempt(TRANSPORT_ATTEMPTS),
            wait=wait_exponential_jitter(initial=self.backoff_initial, max=self.backoff_max),
            retry=retry_if_exception(_retryable),
            sleep=self.sleep,
            reraise=True,
        )
        try:
            for attempt in retrying:
                with attempt:
                    resp = self.client.post(url, json=payload, headers=headers, timeout=profile.timeout_s)
                    resp.raise_for_status()
            return resp.json()
        except httpx.HTTPStatusError as exc:
            raise UpstreamError(f"{url}: HTTP {exc.response.status_code}") from exc
        except (httpx.HTTPError, RetryError, ValueError) as exc:
            raise UpstreamError(f"{url}: {exc}") from exc

    def chat(self, profile: ModelProfile, prompt: str, attempt: int) -> tuple[str, dict | None]:
        data = self._post(profile, "/chat/completions", {
            "model": profile.name,
            "temperature": profile.temperature,
            "messages": [{"role": "user", "content": prompt}],
        })
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise UpstreamError(f"malformed chat response: {exc!r}") from exc
        return text, data.get("usage")

    def embed(self, profile: ModelProfile, texts: list[str]) -> tuple[list[np.ndarray], dict | None]:
        data = self._post(profile, "/embeddings", {"model": profile.name, "input": texts})
        try:
            rows = sorted(data["data"], key=lambda d: d.get("index", 0))
            vecs = [np.asarray(r["embedding"], dtype=float) for r in rows]
        except (KeyError, TypeError) as exc:
            raise UpstreamError(f"malformed embedding response: {exc!r}") from exc
        return vecs, data.get("usage")


class MockBackend:
    def chat(self, profile: ModelProfile, prompt: str, attempt: int) -> tuple[str, dict | None]:
        text = mock_oracle_complete(prompt, attempt=attempt, seed=profile.mock_seed,
                                    noise=profile.mock_noise, failures=profile.mock_failures)
        return text, None

    def embed(self, profile: ModelProfile, texts: list[str]) -> tuple[list[np.ndarray], dict | None]:
        return [mock_embedding(t, seed=profile.mock_seed, dim=profile.embedding_dim) for t in texts], None


class PrecomputedEmbeddings:
    """Vectors loaded from JSONL ``{"text": str, "vector": [num]}``."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.table: dict[str, np.ndarray] = {}
        for lineno, rec in iter_jsonl(self.path):
            self.table[str(rec["text"])] = np.asarray(rec["vector"], dtype=float)

    def chat(self, profile, prompt, attempt):
        raise UpstreamError("precomputed embedding provider cannot answer chat prompts")

    def embed(self, profile: ModelProfile, texts: list[str]) -> tuple[list[np.ndarray], dict | None]:
        missing = [t for t in texts if t not in self.table]
        if missing:
            raise KeyError(f"{self.path}: no precomputed vector for {missing[0]!r}")
        return [self.table[t] for t in texts], {"prompt_tokens": 0}


# ---------------------------------------------------------------------------


class Gateway:
    """Shared entry point for all model calls.

    Determinism is keyed on ``(model, prompt, temperature, attempt)``; repeated
    runs with the cache enabled never reach a backend.
    """

    def __init__(
        self,
        cache_dir: str | os.PathLike | None = None,
        use_cache: bool = True,
        ledger: Ledger | None = None,
        budget_usd: float | None = None,
        http_client: httpx.Client | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        tokenizer: Callable[[str], int] = byte_tokens,
        backoff_initial: float = 1.0,
    ):
        self.cache = ResponseCache(cache_dir) if use_cache else None
        self.ledger = ledger if ledger is not None else Ledger()
        self.budget_usd = budget_usd
        self.clock = clock
        self.sleep = sleep
        self.tokenizer = tokenizer
        self.http = HttpBackend(http_client, sleep=sleep, backoff_initial=backoff_initial)
        self.mock = MockBackend()
        self.upstream_calls: Counter = Counter()
        self._precomputed: dict[str, PrecomputedEmbeddings] = {}
        self._limiters: dict[str, RateLimiter] = {}
        self._semaphores: dict[str, threading.BoundedSemaphore] = {}
        self._embed_cache: dict[tuple[str, str], np.ndarray] = {}
        self._lock = threading.Lock()

    def _backend(self, profile: ModelProfile):
        if profile.is_mock:
            return self.mock
        if profile.endpoint_base.startswith("file://"):
            path = profile.endpoint_base[len("file://"):]
            with self._lock:
                if path not in self._precomputed:
                    self._precomputed[path] = PrecomputedEmbeddings(path)
                return self._precomputed[path]
        return self.http

    def _guards(self, profile: ModelProfile) -> tuple[RateLimiter, threading.BoundedSemaphore]:
        with self._lock:
            if profile.name not in self._limiters:
                self._limiters[profile.name] = RateLimiter(profile.requests_per_minute, self.clock, self.sleep)
                self._semaphores[profile.name] = threading.BoundedSemaphore(max(1, profile.max_concurrency))
            return self._limiters[profile.name], self._semaphores[profile.name]

    def _check_budget(self) -> None:
        if self.budget_usd is not None and self.ledger.total_cost >= self.budget_usd:
            raise BudgetExceeded(f"budget of {self.budget_usd} USD reached")

    def chat_complete(
        self,
        profile: ModelProfile,
        prompt: PromptText | str,
        attempt: int = 1,
        *,
        validate: Callable[[str], bool] | None = None,
        tags: Mapping[str, str] | None = None,
    ) -> str:
        """Return the completion text for one protocol attempt and log a CallRecord.

        ``validate`` lets the caller mark syntactically unusable answers as
        ``parse_reject`` in the ledger. Transport failures surviving the
        bounded retries raise :class:`UpstreamError`.
        """
        if profile.kind != "chat":
            raise ValueError(f"profile {profile.name} is not a chat model")
        text = prompt.text if isinstance(prompt, PromptText) else prompt
        est_in = prompt.estimated_tokens if isinstance(prompt, PromptText) else self.tokenizer(text)
        if est_in > profile.context_limit:
            raise ContextOverflowError(getattr(prompt, "spec", None), getattr(prompt, "user_id", ""),
                                       est_in, profile.context_limit)
        tags = dict(tags or {})
        record = CallRecord(model=profile.name, prompt_hash=sha256_text(text), attempt=attempt,
                            dataset=tags.get("dataset", ""), spec=tags.get("spec", ""),
                            phase=tags.get("phase", ""), user_id=tags.get("user_id", ""),
                            started_at=time.time())
        key = ResponseCache.key(profile.name, text, profile.temperature, attempt) if self.cache else None
        hit = self.cache.get(key) if self.cache else None
        if hit is not None:
            record.cached = True
            completion = hit["text"]
        else:
            self._check_budget()
            limiter, sem = self._guards(profile)
            with sem:
                limiter.acquire()
                t0 = time.perf_counter()
                try:
                    with self._lock:
                        self.upstream_calls[profile.name] += 1
                    completion, usage = self._backend(profile).chat(profile, text, attempt)
                except UpstreamError:
                    record.outcome = "transport_error"
                    record.latency_ms = (time.perf_counter() - t0) * 1000
                    self.ledger.append(record)
                    raise
                record.latency_ms = (time.perf_counter() - t0) * 1000
            if usage and "prompt_tokens" in usage:
                record.tokens_in = int(usage.get("prompt_tokens") or 0)
                record.tokens_out = int(usage.get("completion_tokens") or 0)
                record.token_source = "usage"
            else:
                record.tokens_in = est_in
                record.tokens_out = self.tokenizer(completion)
            record.cost = profile.cost(record.tokens_in, record.tokens_out)
            if self.cache:
                self.cache.put(key, {"text": completion, "tokens_in": record.tokens_in,
                                     "tokens_out": record.tokens_out})
        if validate is not None and not validate(completion):
            record.outcome = "parse_reject"
        self.ledger.append(record)
        return completion

    def embed(self, profile: ModelProfile, texts: Sequence[EmbeddingText | str],
              tags: Mapping[str, str] | None = None) -> list[np.ndarray]:
        """One vector per input, order preserved; vectors cached by ``(model, text)``."""
        strings = [t.text if isinstance(t, EmbeddingText) else t for t in texts]
        missing = []
        with self._lock:
            for s in dict.fromkeys(strings):
                if (profile.name, s) not in self._embed_cache:
                    missing.append(s)
        if missing:
            backend = self._backend(profile)
            if backend is self.http:
                self._check_budget()
            limiter, sem = self._guards(profile)
            with sem:
                limiter.acquire()
                t0 = time.perf_counter()
                with self._lock:
                    self.upstream_calls[profile.name] += 1
                vecs, usage = backend.embed(profile, missing)
                latency = (time.perf_counter() - t0) * 1000
            if len(vecs) != len(missing):
                raise UpstreamError(f"embedding endpoint returned {len(vecs)} vectors for {len(missing)} texts")
            tokens = int((usage or {}).get("prompt_tokens") or sum(self.tokenizer(s) for s in missing))
            tags = dict(tags or {})
            self.ledger.append(CallRecord(
                model=profile.name, prompt_hash=sha256_text("\n".join(missing)), attempt=1,
                tokens_in=tokens, latency_ms=latency, cost=profile.cost(tokens, 0),
                token_source="usage" if usage else "estimate", kind="embedding",
                dataset=tags.get("dataset", ""), spec=tags.get("spec", ""), phase=tags.get("phase", ""),
                started_at=time.time(),
            ))
            with self._lock:
                for s, v in zip(missing, vecs):
                    self._embed_cache[(profile.name, s)] = np.asarray(v, dtype=float)
        out = [self._embed_cache[(profile.name, s)] for s in strings]
        dims = {v.shape for v in out}
        if len(dims) > 1:
            raise ValueError(f"embedding dimensions disagree within batch: {sorted(dims)}")
        return out


# ---------------------------------------------------------------------------
# reporting


@dataclass
class CostReport:
    calls: int = 0
    upstream_calls: int = 0
    cached_calls: int = 0
    transport_errors: int = 0
    parse_rejects: int = 0
    tokens_in: int = 0
    tokens_out: int = 0
    usd: float = 0.0
    duration_s: float = 0.0
    breakdown: dict[str, dict] = field(default_factory=dict)
    by_phase: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_markdown(self, timing: bool = True) -> str:
        """Markdown tables; ``timing=False`` drops wall-clock duration for reproducible reports."""
        head = "| calls | upstream | cached | transport errors | parse rejects | tokens in | tokens out | USD |"
        row = (f"| {self.calls} | {self.upstream_calls} | {self.cached_calls} | {self.transport_errors} "
               f"| {self.parse_rejects} | {self.tokens_in} | {self.tokens_out} | {self.usd:.6f} |")
        if timing:
            head += " duration (h) |"
            row += f" {self.duration_s / 3600:.2f} |"
        lines = [head, "|---" * head.count("|", 1) + "|", row]
        if self.by_phase:
            lines += ["", "| phase | calls | tokens in | tokens out | USD |", "|---|---|---|---|---|"]
            for phase, row in sorted(self.by_phase.items()):
                lines.append(f"| {phase or '-'} | {row['calls']} | {row['tokens_in']} | {row['tokens_out']} "
                             f"| {row['usd']:.6f} |")
        return "\n".join(lines) + "\n"


def cost_report(records: Iterable[CallRecord]) -> CostReport:
    records = list(records)
    rep = CostReport()
    if not records:
        return rep
    breakdown: dict[str, dict] = defaultdict(lambda: {"calls": 0, "tokens_in": 0, "tokens_out": 0, "usd": 0.0})
    phases: dict[str, dict] = defaultdict(lambda: {"calls": 0, "tokens_in": 0, "tokens_out": 0, "usd": 0.0})
    for r in records:
        rep.calls += 1
        rep.cached_calls += r.cached
        rep.upstream_calls += not r.cached
        rep.transport_errors += r.outcome == "transport_error"
        rep.parse_rejects += r.outcome == "parse_reject"
        rep.tokens_in += r.tokens_in
        rep.tokens_out += r.tokens_out
        rep.usd += r.cost
        for bucket in (breakdown[f"{r.dataset}/{r.spec}"], phases[r.phase]):
            bucket["calls"] += 1
            bucket["tokens_in"] += r.tokens_in
            bucket["tokens_out"] += r.tokens_out
            bucket["usd"] += r.cost
    start = min(r.started_at for r in records)
    end = max(r.started_at + r.latency_ms / 1000 for r in records)
    rep.duration_s = max(0.0, end - start)
    rep.breakdown = dict(sorted(breakdown.items()))
    rep.by_phase = dict(sorted(phases.items()))
    return rep
