"""Extraction backends: deterministic mock, remote chat-completion client,
response cache, retry/rate-limit plumbing.

The cache key depends only on (model_id, prompt, decode_params), so two
abstracts with identical text share one entry and reruns replay answers
without touching the backend.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import requests

from bpminer.errors import BudgetExhaustedError, EmptyAnswerError, TransportError
from bpminer.extraction import BPExtraction, render_answer

logger = logging.getLogger(__name__)

DEFAULT_CREDENTIAL_ENV = "BPMINER_API_KEY"


@dataclass(frozen=True)
class DecodeParams:
    """Decoding settings; temperature 0 keeps runs deterministic."""

    temperature: float = 0.0
    max_answer_length: int = 256


@dataclass(frozen=True)
class BackendRequest:
    prompt: str
    model_id: str
    decode_params: DecodeParams = DecodeParams()


@dataclass
class BackendAnswer:
    text: str
    backend_id: str
    cached: bool = False


class TransientBackendError(Exception):
    """Retryable transport failure (connection, timeout, 429, 5xx)."""


def cache_key(model_id: str, prompt: str, decode_params: DecodeParams) -> str:
    """Hex digest keying the response cache; pmid deliberately excluded."""
    payload = json.dumps(
        {
            "model_id": model_id,
            "prompt": prompt,
            "temperature": decode_params.temperature,
            "max_answer_length": decode_params.max_answer_length,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ResponseCache:
    """On-disk key-value store of verbatim answers, one JSON file per key.

    Writes are atomic (temp file + rename), so concurrent writers of the
    same key end with one intact value; entries for a key are identical by
    construction, making last-writer-wins safe.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> Optional[dict]:
        path = self._path(key)
        try:
            with path.open("r", encoding="utf-8") as fh:
                return json.load(fh)
        except FileNotFoundError:
            return None
        except json.JSONDecodeError:
            logger.warning("cache: dropping unreadable entry %s", path.name)
            return None

    def put(self, key: str, text: str, backend_id: str) -> None:
        entry = {"text": text, "backend_id": backend_id, "timestamp": time.time()}
        path = self._path(key)
        tmp = path.with_name(f"{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        with tmp.open("w", encoding="utf-8") as fh:
            json.dump(entry, fh, ensure_ascii=False)
        tmp.replace(path)

    def __len__(self) -> int:
        return sum(1 for _ in self.directory.glob("*.json"))


class RateLimiter:
    """Token bucket; acquire() blocks until a token is available."""

    def __init__(self, rate_per_sec: Optional[float], burst: int = 1):
        self.rate = rate_per_sec
        self.burst = max(1, burst)
        self._tokens = float(self.burst)
        self._last = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.rate is None:
            return
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.burst, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


class RequestBudget:
    """Hard cap on non-cached backend calls; spend() raises when exhausted."""

    def __init__(self, max_requests: Optional[int]):
        self.max_requests = max_requests
        self.spent = 0
        self._lock = threading.Lock()

    def spend(self) -> None:
        if self.max_requests is None:
            return
        with self._lock:
            if self.spent >= self.max_requests:
                raise BudgetExhaustedError(self.max_requests)
            self.spent += 1


@dataclass
class BackendTelemetry:
    """Thread-safe per-request accounting (calls, cache hits, retries, latency)."""

    n_calls: int = 0
    n_cache_hits: int = 0
    n_retries: int = 0
    total_latency: float = 0.0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, cached: bool, retries: int = 0, latency: float = 0.0) -> None:
        with self._lock:
            if cached:
                self.n_cache_hits += 1
            else:
                self.n_calls += 1
            self.n_retries += retries
            self.total_latency += latency

    def to_dict(self) -> dict:
        return {
            "backend_calls": self.n_calls,
            "cache_hits": self.n_cache_hits,
            "retries": self.n_retries,
            "total_latency_s": round(self.total_latency, 6),
        }


# --- deterministic mock backend -------------------------------------------

_MALE = r"males?|men|boys"
_FEMALE = r"females?|women|girls"
_NUM = r"\d[\d,]*(?:\.\d+)?"
_SENTENCES = re.compile(r"(?<=[.!?])\s+")
_MALE_TOKEN = re.compile(rf"\b(?:{_MALE})\b", re.IGNORECASE)
_FEMALE_TOKEN = re.compile(rf"\b(?:{_FEMALE})\b", re.IGNORECASE)
_COUNT_MALE = re.compile(rf"\b(\d[\d,]*)\s+(?:{_MALE})\b", re.IGNORECASE)
_COUNT_FEMALE = re.compile(rf"\b(\d[\d,]*)\s+(?:{_FEMALE})\b", re.IGNORECASE)
_BP_STAT = re.compile(
    rf"\b(SBP|systolic(?:\s+blood\s+pressure)?|DBP|diastolic(?:\s+blood\s+pressure)?)\b"
    rf"[^.;:]*?({_NUM})(?:\s*(?:±|\+/-)\s*({_NUM}))?\s*(?:mmHg|mm Hg)",
    re.IGNORECASE,
)


def _mock_number(token: str) -> float:
    return float(token.replace(",", ""))


def mock_extract(abstract_text: str) -> BackendAnswer:
    """Deterministic offline extractor emitting the canonical answer schema.

    A BP value is linked to a sex only when the sentence mentions exactly
    one sex; pooled values ("120/80 mmHg" with no sex token, or sentences
    naming both sexes) are never split. Unmatched fields come out N/A.
    """
    found: dict = {}

    def put(name, value):
        found.setdefault(name, value)

    for sentence in _SENTENCES.split(abstract_text):
        male_count = _COUNT_MALE.search(sentence)
        if male_count:
            put("n_male", int(_mock_number(male_count.group(1))))
        female_count = _COUNT_FEMALE.search(sentence)
        if female_count:
            put("n_female", int(_mock_number(female_count.group(1))))

        has_male = bool(_MALE_TOKEN.search(sentence))
        has_female = bool(_FEMALE_TOKEN.search(sentence))
        if has_male == has_female:  # none, or both: no sex linkage
            continue
        sex = "male" if has_male else "female"
        for match in _BP_STAT.finditer(sentence):
            kind = "sbp" if match.group(1)[0].lower() == "s" else "dbp"
            put(f"{kind}_mean_{sex}", _mock_number(match.group(2)))
            if match.group(3) is not None:
                put(f"{kind}_sd_{sex}", _mock_number(match.group(3)))

    text = render_answer(BPExtraction(**found))
    return BackendAnswer(text=text, backend_id="mock", cached=False)


class MockBackend:
    """Offline stand-in; runs the rule-based extractor over the prompt."""

    backend_id = "mock"

    def complete(self, request: BackendRequest) -> str:
        return mock_extract(request.prompt).text


class RemoteBackend:
    """Chat-completion style HTTPS JSON client.

    The credential comes from an environment variable and is never logged
    or persisted.
    """

    def __init__(self, endpoint_url: str, credential_env: str = DEFAULT_CREDENTIAL_ENV,
                 timeout: float = 60.0, session: Optional[requests.Session] = None):
        self.endpoint_url = endpoint_url
        self.credential_env = credential_env
        self.timeout = timeout
        self._session = session or requests.Session()

    @property
    def backend_id(self) -> str:
        return f"remote:{self.endpoint_url}"

    def complete(self, request: BackendRequest) -> str:
        headers = {"Content-Type": "application/json"}
        credential = os.environ.get(self.credential_env, "")
        if credential:
            headers["Authorization"] = f"Bearer {credential}"
        body = {
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.decode_params.temperature,
            "max_tokens": request.decode_params.max_answer_length,
        }
        try:
            resp = self._session.post(self.endpoint_url, json=body, headers=headers,
                                      timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransientBackendError(f"request failed: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            payload = resp.json()
            return payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed backend response: {exc}") from exc


def query_backend(
    request: BackendRequest,
    backend,
    cache: Optional[ResponseCache] = None,
    *,
    pmid: Optional[str] = None,
    max_retries: int = 3,
    backoff_base: float = 0.5,
    rate_limiter: Optional[RateLimiter] = None,
    budget: Optional[RequestBudget] = None,
    telemetry: Optional[BackendTelemetry] = None,
    sleep=time.sleep,
) -> BackendAnswer:
    """Answer a request, via the cache when possible.

    Cache hits are free (no budget, no rate limit). Misses call the
    backend with bounded retries and exponential backoff, persist the
    answer, and return it. Empty answers raise EmptyAnswerError so the
    caller can skip and count the record.
    """
    key = cache_key(request.model_id, request.prompt, request.decode_params)
    if cache is not None:
        entry = cache.get(key)
        if entry is not None:
            if telemetry:
                telemetry.record(cached=True)
            return BackendAnswer(text=entry["text"],
                                 backend_id=entry.get("backend_id", ""),
                                 cached=True)

    if budget is not None:
        budget.spend()

    retries = 0
    start = time.monotonic()
    while True:
        if rate_limiter is not None:
            rate_limiter.acquire()
        try:
            text = backend.complete(request)
            break
        except TransientBackendError as exc:
            retries += 1
            if retries > max_retries:
                raise TransportError(str(exc), pmid=pmid, retries=retries - 1) from exc
            sleep(backoff_base * (2 ** (retries - 1)))
    latency = time.monotonic() - start

    if not text or not text.strip():
        raise EmptyAnswerError(pmid)
    if cache is not None:
        cache.put(key, text, backend.backend_id)
    if telemetry:
        telemetry.record(cached=False, retries=retries, latency=latency)
    return BackendAnswer(text=text, backend_id=backend.backend_id, cached=False)
