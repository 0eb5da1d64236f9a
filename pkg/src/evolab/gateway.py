"""Single chokepoint for all LLM traffic.

Every completion in the package flows through a gateway object so usage and
cost are measured in exactly one place. Three modes:

* ``real``: OpenAI-style HTTP endpoint with bounded retries and exponential
  backoff. Only this mode touches the network, and ``requests`` is imported
  lazily so offline runs never need it.
* ``stub``: deterministic canned responses selected by (tag, prompt hash)
  from a fixture table; unknown prompts get a deterministic synthesized
  response derived from the prompt text.
* ``stub-strict``: like stub but a missing fixture raises FixtureMissError.

Environment: EVOLAB_LLM_MODE, EVOLAB_LLM_BASE_URL, EVOLAB_LLM_API_KEY,
EVOLAB_LLM_MODEL, and optionally EVOLAB_LLM_FIXTURES (fixture JSONL path).
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .jsonutil import append_jsonl, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

MODES = ("real", "stub", "stub-strict")

ENV_MODE = "EVOLAB_LLM_MODE"
ENV_BASE_URL = "EVOLAB_LLM_BASE_URL"
ENV_API_KEY = "EVOLAB_LLM_API_KEY"
ENV_MODEL = "EVOLAB_LLM_MODEL"
ENV_FIXTURES = "EVOLAB_LLM_FIXTURES"

# Counts HttpGateway constructions in this process; offline test runs assert
# it stays at zero.
REAL_GATEWAYS_BUILT = 0


class GatewayError(Exception):
    pass


class FixtureMissError(GatewayError):
    pass


def prompt_hash(prompt: str) -> str:
    """Stable 16-hex-digit digest used to key stub fixtures."""
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


def synthetic_tokens(text: str) -> int:
    """Deterministic token estimate used wherever no real tokenizer runs."""
    return max(1, len(text) // 4) if text else 0


@dataclass(frozen=True)
class PriceTable:
    """USD per million tokens. Defaults to free, so simulated runs report
    token counts as the cost dimension instead of dollars."""

    input_per_million: float = 0.0
    output_per_million: float = 0.0

    def cost(self, tokens_in: int, tokens_out: int) -> float:
        return (
            tokens_in * self.input_per_million / 1_000_000.0
            + tokens_out * self.output_per_million / 1_000_000.0
        )

    @property
    def is_free(self) -> bool:
        return self.input_per_million == 0.0 and self.output_per_million == 0.0


@dataclass(frozen=True)
class CompletionUsage:
    tokens_in: int
    tokens_out: int
    cost_usd: float
    latency: float = 0.0


@dataclass(frozen=True)
class UsageTotals:
    calls: int = 0
    tokens_in: int = 0
    tokens_out: int = 0
    cost_usd: float = 0.0

    @property
    def tokens(self) -> int:
        return self.tokens_in + self.tokens_out

    def __add__(self, other: "UsageTotals") -> "UsageTotals":
        return UsageTotals(
            calls=self.calls + other.calls,
            tokens_in=self.tokens_in + other.tokens_in,
            tokens_out=self.tokens_out + other.tokens_out,
            cost_usd=self.cost_usd + other.cost_usd,
        )

    def __sub__(self, other: "UsageTotals") -> "UsageTotals":
        return UsageTotals(
            calls=self.calls - other.calls,
            tokens_in=self.tokens_in - other.tokens_in,
            tokens_out=self.tokens_out - other.tokens_out,
            cost_usd=self.cost_usd - other.cost_usd,
        )


class UsageLedger:
    """Thread-safe per-tag accumulation of completion usage."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._by_tag: dict[str, UsageTotals] = {}

    def record(self, tag: str, usage: CompletionUsage) -> None:
        entry = UsageTotals(1, usage.tokens_in, usage.tokens_out, usage.cost_usd)
        with self._lock:
            self._by_tag[tag] = self._by_tag.get(tag, UsageTotals()) + entry

    def per_tag(self) -> dict[str, UsageTotals]:
        with self._lock:
            return dict(self._by_tag)

    def total(self) -> UsageTotals:
        with self._lock:
            out = UsageTotals()
            for entry in self._by_tag.values():
                out = out + entry
            return out


class FixtureTable:
    """Canned responses keyed by (tag, prompt hash)."""

    def __init__(self) -> None:
        self._responses: dict[tuple[str, str], str] = {}

    def __len__(self) -> int:
        return len(self._responses)

    def add(self, tag: str, prompt: str, response: str) -> None:
        self._responses[(tag, prompt_hash(prompt))] = response

    def add_hashed(self, tag: str, digest: str, response: str) -> None:
        self._responses[(tag, digest)] = response

    def has(self, tag: str, prompt: str) -> bool:
        return (tag, prompt_hash(prompt)) in self._responses

    def get(self, tag: str, prompt: str) -> str | None:
        return self._responses.get((tag, prompt_hash(prompt)))

    def save(self, path: str | Path) -> None:
        write_jsonl(
            path,
            (
                {"tag": tag, "prompt_hash": digest, "response": resp}
                for (tag, digest), resp in sorted(self._responses.items())
            ),
        )

    @classmethod
    def load(cls, path: str | Path) -> "FixtureTable":
        table = cls()
        for rec in read_jsonl(path):
            table.add_hashed(rec["tag"], rec["prompt_hash"], rec["response"])
        return table


_LOOKUP_RE = re.compile(r"lookup\(([a-z0-9_]+)\)")


def _salient_key(prompt: str) -> str | None:
    """Tool key mentioned in the prompt, preferring a 'solved ...' line."""
    for line in prompt.splitlines():
        if line.lstrip().startswith("solved"):
            match = _LOOKUP_RE.search(line)
            if match:
                return match.group(1)
    match = _LOOKUP_RE.search(prompt)
    return match.group(1) if match else None


def synthesize_response(tag: str, prompt: str) -> str:
    """Deterministic fallback reply for stub mode without a fixture."""
    key = _salient_key(prompt)
    if tag == "encode.tips":
        if key:
            return f"tip: start with lookup({key})\nshortcut: {key} answers this family"
        return f"tip: {prompt.strip()[:80]}"
    if tag == "encode.summary":
        head = prompt.strip().splitlines()[0][:120] if prompt.strip() else "empty episode"
        return f"summary: {head}" + (f" (key lookup({key}))" if key else "")
    if tag == "encode.insight":
        if key:
            return f"insight: lookup({key}) resolves this task family directly"
        return f"insight: {prompt.strip()[:100]}"
    if tag == "encode.workflow":
        if key:
            return f"workflow: recall similar cases; lookup({key}); report the value"
        return "workflow: recall similar cases; probe candidate tools; report the value"
    if tag == "encode.tool":
        if key:
            return f"{key}: probes the {key} register and returns its value"
        return "unnamed_tool: no reusable tool found"
    if tag == "judge":
        # Never invent a passing verdict.
        return "INCORRECT"
    return f"ack: {prompt.strip()[:64]}"


class StubGateway:
    """Offline gateway with deterministic responses and synthetic usage."""

    mode = "stub"

    def __init__(
        self,
        fixtures: FixtureTable | None = None,
        *,
        strict: bool = False,
        price_table: PriceTable | None = None,
    ) -> None:
        self.fixtures = fixtures if fixtures is not None else FixtureTable()
        self.strict = strict
        self.price_table = price_table if price_table is not None else PriceTable()
        self.ledger = UsageLedger()
        if strict:
            self.mode = "stub-strict"

    def has_fixture(self, tag: str, prompt: str) -> bool:
        return self.fixtures.has(tag, prompt)

    def complete(
        self,
        prompt: str,
        *,
        tag: str,
        temperature: float = 0.0,
        max_tokens: int = 512,
    ) -> tuple[str, CompletionUsage]:
        response = self.fixtures.get(tag, prompt)
        if response is None:
            if self.strict:
                raise FixtureMissError(
                    f"no stub fixture for tag {tag!r} (prompt hash {prompt_hash(prompt)})"
                )
            response = synthesize_response(tag, prompt)
        tokens_in = synthetic_tokens(prompt)
        tokens_out = synthetic_tokens(response)
        usage = CompletionUsage(
            tokens_in=tokens_in,
            tokens_out=tokens_out,
            cost_usd=self.price_table.cost(tokens_in, tokens_out),
            latency=0.0,
        )
        self.ledger.record(tag, usage)
        return response, usage


class HttpGateway:
    """OpenAI-style chat-completions client with bounded retries."""

    mode = "real"

    def __init__(
        self,
        base_url: str,
        api_key: str = "",
        model: str = "default",
        *,
        price_table: PriceTable | None = None,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        timeout: float = 60.0,
        post_fn=None,
        sleep_fn=time.sleep,
    ) -> None:
        global REAL_GATEWAYS_BUILT
        REAL_GATEWAYS_BUILT += 1
        if not base_url:
            raise GatewayError("real mode requires a base URL")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.price_table = price_table if price_table is not None else PriceTable()
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.timeout = timeout
        self._post_fn = post_fn
        self._sleep = sleep_fn
        self.ledger = UsageLedger()

    def has_fixture(self, tag: str, prompt: str) -> bool:
        # Real mode can always answer, e.g. for optional narrative prompts.
        return True

    def _post(self, payload: dict) -> dict:
        if self._post_fn is not None:
            return self._post_fn(f"{self.base_url}/chat/completions", payload, self.timeout)
        import requests  # deferred so offline runs never import it

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        resp = requests.post(
            f"{self.base_url}/chat/completions",
            json=payload,
            headers=headers,
            timeout=self.timeout,
        )
        if resp.status_code >= 400:
            raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()

    def complete(
        self,
        prompt: str,
        *,
        tag: str,
        temperature: float = 0.0,
        max_tokens: int = 512,
    ) -> tuple[str, CompletionUsage]:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            start = time.monotonic()
            try:
                data = self._post(payload)
                text = data["choices"][0]["message"]["content"]
                usage_block = data.get("usage", {})
                tokens_in = int(usage_block.get("prompt_tokens", synthetic_tokens(prompt)))
                tokens_out = int(usage_block.get("completion_tokens", synthetic_tokens(text)))
                usage = CompletionUsage(
                    tokens_in=tokens_in,
                    tokens_out=tokens_out,
                    cost_usd=self.price_table.cost(tokens_in, tokens_out),
                    latency=time.monotonic() - start,
                )
                self.ledger.record(tag, usage)
                return text, usage
            except Exception as exc:  # noqa: BLE001 - retry policy wants everything
                last_error = exc
                if attempt < self.max_retries:
                    self._sleep(self.backoff_base * (2**attempt))
        raise GatewayError(f"completion failed after {self.max_retries + 1} attempts: {last_error}")


Gateway = StubGateway | HttpGateway


def gateway_from_env(fixtures_path: str | Path | None = None) -> Gateway:
    """Build the gateway named by EVOLAB_LLM_MODE (default stub)."""
    mode = os.environ.get(ENV_MODE, "stub")
    if mode not in MODES:
        raise GatewayError(f"unknown {ENV_MODE} value {mode!r}; expected one of {MODES}")
    if mode == "real":
        return HttpGateway(
            base_url=os.environ.get(ENV_BASE_URL, ""),
            api_key=os.environ.get(ENV_API_KEY, ""),
            model=os.environ.get(ENV_MODEL, "default"),
        )
    fixtures = None
    path = fixtures_path or os.environ.get(ENV_FIXTURES)
    if path:
        fixtures = FixtureTable.load(path)
    return StubGateway(fixtures, strict=(mode == "stub-strict"))


def usage_log_line(path: str | Path, tag: str, usage: CompletionUsage) -> None:
    append_jsonl(
        path,
        {
            "tag": tag,
            "tokens_in": usage.tokens_in,
            "tokens_out": usage.tokens_out,
            "cost_usd": usage.cost_usd,
        },
    )
