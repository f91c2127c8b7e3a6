"""Single entry point for model calls: HTTP, replay cache, scripted mock, cost ledger."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import httpx

from apcascade.errors import ArgumentError, BackendError, ConfigError
from apcascade.templates import estimate_tokens

log = logging.getLogger(__name__)

PURPOSES = ("instruction_gen", "classification")
DEFAULT_TEMPERATURE = {"classification": 0.0, "instruction_gen": 0.3}
DEFAULT_MAX_TOKENS = 1024
SYSTEM_MESSAGE = "You are a careful assistant. Follow the requested output format exactly."
FIXED_CLOCK = "1970-01-01T00:00:00+00:00"


@dataclass(frozen=True)
class LlmRequest:
    prompt: str
    model_id: str
    temperature: float = 0.0
    max_tokens: int = DEFAULT_MAX_TOKENS
    purpose: str = "classification"

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ArgumentError("prompt must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ArgumentError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens <= 0:
            raise ArgumentError("max_tokens must be positive")
        if self.purpose not in PURPOSES:
            raise ArgumentError(f"purpose must be one of {PURPOSES}")


@dataclass(frozen=True)
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0
    estimated: bool = False


@dataclass(frozen=True)
class LlmResponse:
    text: str
    usage: Usage
    backend: str
    model_id: str
    latency_ms: int = 0
    created_at: str = FIXED_CLOCK
    purpose: str = "classification"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LlmResponse":
        d = dict(d)
        d["usage"] = Usage(**d["usage"])
        return cls(**d)


def cache_key(request: LlmRequest) -> str:
    """SHA-256 over model, sampling parameters and prompt bytes."""
    h = hashlib.sha256()
    header = json.dumps([request.model_id, float(request.temperature).hex(), int(request.max_tokens)])
    h.update(header.encode("utf-8"))
    h.update(b"\x00")
    h.update(request.prompt.encode("utf-8"))
    return h.hexdigest()


class Backend(Protocol):
    name: str

    def send(self, request: LlmRequest) -> LlmResponse: ...


Script = Callable[[LlmRequest], str]


@dataclass
class MockRule:
    contains: tuple[str, ...]
    respond: str
    purpose: str | None = None

    def matches(self, request: LlmRequest) -> bool:
        if self.purpose and request.purpose != self.purpose:
            return False
        return all(c in request.prompt for c in self.contains)


class MockBackend:
    """Scripted backend: first matching keyword rule wins, else ``script`` or ``default``."""

    name = "mock"

    def __init__(
        self,
        rules: Iterable[MockRule] = (),
        default: str | None = None,
        script: Script | None = None,
    ):
        self.rules = list(rules)
        self.default = default
        self.script = script
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "MockBackend":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = []
        for r in data.get("rules", []):
            contains = r["contains"]
            rules.append(
                MockRule(
                    contains=(contains,) if isinstance(contains, str) else tuple(contains),
                    respond=r["respond"],
                    purpose=r.get("purpose"),
                )
            )
        return cls(rules, default=data.get("default"))

    def respond(self, request: LlmRequest) -> str:
        for rule in self.rules:
            if rule.matches(request):
                return rule.respond
        if self.script is not None:
            return self.script(request)
        if self.default is not None:
            return self.default
        return default_mock_reply(request)

    def send(self, request: LlmRequest) -> LlmResponse:
        with self._lock:
            self.calls += 1
        text = self.respond(request)
        return LlmResponse(
            text=text,
            usage=Usage(estimate_tokens(request.prompt), estimate_tokens(text), estimated=True),
            backend=self.name,
            model_id=request.model_id,
            purpose=request.purpose,
        )


_TARGET_RE = re.compile(r"### Target:.*?Attribute definition: ([^\n]*)", re.S)


def default_mock_reply(request: LlmRequest) -> str:
    if request.purpose == "instruction_gen":
        m = _TARGET_RE.search(request.prompt)
        subject = m.group(1).strip() if m else "this attribute"
        return f"instruction: Judge the value against the product data, where the attribute means: {subject}"
    pos = "Applicable" if "'Applicable'" in request.prompt else "Correct"
    return f"reasoning: No contradiction found in the product data.\nprediction: {pos}"


class HttpBackend:
    """JSON chat-completion endpoint with bearer auth and retry on 429/5xx."""

    name = "http"

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        *,
        attempts: int = 3,
        backoff: float = 1.0,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        path: str = "/chat/completions",
    ):
        if attempts < 1:
            raise ConfigError("attempts must be >= 1")
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self.client = httpx.Client(base_url=base_url, headers=headers, timeout=timeout, transport=transport)
        self.attempts = attempts
        self.backoff = backoff
        self.sleep = sleep
        self.path = path
        self.calls = 0
        self._lock = threading.Lock()

    def _payload(self, request: LlmRequest) -> dict:
        return {
            "model": request.model_id,
            "messages": [
                {"role": "system", "content": SYSTEM_MESSAGE},
                {"role": "user", "content": request.prompt},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

    def send(self, request: LlmRequest) -> LlmResponse:
        last: BackendError | None = None
        for attempt in range(self.attempts):
            if attempt:
                delay = self.backoff * 2 ** (attempt - 1)
                if last is not None and last.status_code == 429 and getattr(last, "retry_after", None):
                    delay = max(delay, last.retry_after)  # type: ignore[attr-defined]
                self.sleep(delay)
            with self._lock:
                self.calls += 1
            started = time.monotonic()
            try:
                resp = self.client.post(self.path, json=self._payload(request))
            except httpx.TransportError as exc:
                last = BackendError(f"transport failure: {exc}")
                log.warning("attempt %d/%d failed: %s", attempt + 1, self.attempts, exc)
                continue
            latency = int((time.monotonic() - started) * 1000)
            if resp.status_code == 429 or resp.status_code >= 500:
                last = BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
                last.retry_after = _retry_after(resp)  # type: ignore[attr-defined]
                log.warning("attempt %d/%d got HTTP %d", attempt + 1, self.attempts, resp.status_code)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
            return self._parse(request, resp, latency)
        assert last is not None
        raise BackendError(f"giving up after {self.attempts} attempts: {last}", last.status_code)

    def _parse(self, request: LlmRequest, resp: httpx.Response, latency: int) -> LlmResponse:
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion body: {exc}", resp.status_code) from exc
        usage_raw = body.get("usage") or {}
        if "prompt_tokens" in usage_raw and "completion_tokens" in usage_raw:
            usage = Usage(int(usage_raw["prompt_tokens"]), int(usage_raw["completion_tokens"]))
        elif "input_tokens" in usage_raw and "output_tokens" in usage_raw:
            usage = Usage(int(usage_raw["input_tokens"]), int(usage_raw["output_tokens"]))
        else:
            usage = Usage(estimate_tokens(request.prompt), estimate_tokens(text), estimated=True)
        return LlmResponse(
            text=text,
            usage=usage,
            backend=self.name,
            model_id=request.model_id,
            latency_ms=latency,
            created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            purpose=request.purpose,
        )


def _retry_after(resp: httpx.Response) -> float | None:
    value = resp.headers.get("Retry-After")
    try:
        return float(value) if value is not None else None
    except ValueError:
        return None


class ReplayCache:
    """One JSON file per request digest holding the request and its response."""

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.dir / f"{key}.json"

    def get(self, key: str) -> LlmResponse | None:
        path = self._path(key)
        if not path.exists():
            return None
        data = json.loads(path.read_text(encoding="utf-8"))
        return LlmResponse.from_dict(data["response"])

    def put(self, key: str, request: LlmRequest, response: LlmResponse) -> None:
        path = self._path(key)
        payload = json.dumps({"request": asdict(request), "response": response.to_dict()}, indent=1)
        with self._lock:
            tmp = path.with_suffix(f".{threading.get_ident()}.tmp")
            tmp.write_text(payload, encoding="utf-8")
            os.replace(tmp, path)

    def __len__(self) -> int:
        return sum(1 for _ in self.dir.glob("*.json"))


@dataclass(frozen=True)
class LedgerEntry:
    model_id: str
    purpose: str
    input_tokens: int
    output_tokens: int
    estimated: bool
    backend: str
    cache_key: str


class Gateway:
    """Thread-safe front for a backend: replay cache, in-flight cap, usage ledger.

    With ``offline=True`` a cache miss is an error instead of a backend call;
    with ``read_cache=False`` responses are recorded but never served from cache.
    """

    def __init__(
        self,
        backend: Backend,
        cache: ReplayCache | None = None,
        *,
        max_in_flight: int = 8,
        offline: bool = False,
        read_cache: bool = True,
    ):
        if max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if offline and cache is None:
            raise ConfigError("offline mode needs a replay cache")
        self.backend = backend
        self.cache = cache
        self.offline = offline
        self.read_cache = read_cache
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._ledger: list[LedgerEntry] = []
        self.network_calls = 0
        self.cache_hits = 0

    @property
    def ledger(self) -> list[LedgerEntry]:
        with self._lock:
            return list(self._ledger)

    def complete(self, request: LlmRequest) -> LlmResponse:
        key = cache_key(request)
        response: LlmResponse | None = None
        if self.cache is not None and self.read_cache:
            cached = self.cache.get(key)
            if cached is not None:
                response = _replace_backend(cached, "replay")
                with self._lock:
                    self.cache_hits += 1
            elif self.offline:
                raise BackendError(f"replay cache miss for {key[:12]} in offline mode")
        if response is None:
            with self._slots:
                response = self.backend.send(request)
            with self._lock:
                self.network_calls += 1
            if self.cache is not None:
                self.cache.put(key, request, response)
        entry = LedgerEntry(
            model_id=request.model_id,
            purpose=request.purpose,
            input_tokens=response.usage.input_tokens,
            output_tokens=response.usage.output_tokens,
            estimated=response.usage.estimated,
            backend=response.backend,
            cache_key=key,
        )
        with self._lock:
            self._ledger.append(entry)
        return response

    def calls(self, purpose: str | None = None) -> int:
        return sum(1 for e in self.ledger if purpose is None or e.purpose == purpose)

    def dump_ledger(self, path: str | Path) -> None:
        with Path(path).open("a", encoding="utf-8") as fh:
            for e in self.ledger:
                fh.write(json.dumps(asdict(e)) + "\n")


def _replace_backend(resp: LlmResponse, backend: str) -> LlmResponse:
    d = resp.to_dict()
    d["backend"] = backend
    d["latency_ms"] = 0
    return LlmResponse.from_dict(d)


def read_ledger(path: str | Path) -> list[LedgerEntry]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(LedgerEntry(**json.loads(line)))
    return out


@dataclass(frozen=True)
class Price:
    input_per_million: float
    output_per_million: float

    def __post_init__(self) -> None:
        if self.input_per_million < 0 or self.output_per_million < 0:
            raise ConfigError("prices must be nonnegative")


PriceTable = Mapping[str, Price]


def load_price_table(path: str | Path) -> dict[str, Price]:
    """JSON object: ``{"model": {"input": 3.0, "output": 15.0}}`` in currency per 1M tokens."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return {k: Price(float(v["input"]), float(v["output"])) for k, v in data.items()}
    except (OSError, ValueError, KeyError, TypeError, AttributeError) as exc:
        raise ConfigError(f"cannot read price table {path}: {exc}") from exc


@dataclass
class CostReport:
    total: float
    per_call: float
    calls: int
    input_tokens: int
    output_tokens: int
    zero_calls: bool = False
    estimated_calls: int = 0
    by_model: dict[str, float] = field(default_factory=dict)


def estimate_cost(ledger: Sequence[LedgerEntry | LlmResponse], prices: PriceTable) -> CostReport:
    total = 0.0
    tokens_in = tokens_out = estimated = 0
    by_model: dict[str, float] = {}
    for item in ledger:
        if isinstance(item, LlmResponse):
            model, n_in, n_out, est = item.model_id, item.usage.input_tokens, item.usage.output_tokens, item.usage.estimated
        else:
            model, n_in, n_out, est = item.model_id, item.input_tokens, item.output_tokens, item.estimated
        if model not in prices:
            raise ConfigError(f"no price for model {model!r}")
        price = prices[model]
        cost = (n_in * price.input_per_million + n_out * price.output_per_million) / 1e6
        total += cost
        by_model[model] = by_model.get(model, 0.0) + cost
        tokens_in += n_in
        tokens_out += n_out
        estimated += est
    n = len(ledger)
    return CostReport(
        total=total,
        per_call=total / n if n else 0.0,
        calls=n,
        input_tokens=tokens_in,
        output_tokens=tokens_out,
        zero_calls=n == 0,
        estimated_calls=estimated,
        by_model=by_model,
    )
