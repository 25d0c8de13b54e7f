"""Uniform interface to text-generation backends.

One ``ModelGateway`` fronts a backend (a hosted HTTP API or the
deterministic :class:`ScriptedBackend`), meters every call into an
append-only :class:`CostLedger`, and enforces a hard token budget.

Money is exact decimal throughout: per-call cost is computed with
:class:`decimal.Decimal` and totals are exact sums, so a ledger of any
size shows zero float drift. The token budget is enforced at admission;
in the default mode a run may overshoot by at most the one call that was
in flight when the budget ran out (strict mode pre-reserves each call's
``max_output_tokens`` instead and never admits a call that could not fit).
"""
from __future__ import annotations

import json
import threading
import time
import urllib.request
from dataclasses import dataclass
from decimal import Decimal
from typing import Callable, Optional, Sequence

MICRO = Decimal(1_000_000)

ROLES = ("solver", "grader", "extractor", "parser", "processor", "judge")


class BudgetExceeded(Exception):
    """Raised when a call is requested after the token budget is spent."""

    def __init__(self, message: str = "token budget exhausted", partial=None):
        super().__init__(message)
        self.partial = partial if partial is not None else []


class BackendFailure(Exception):
    """A backend call failed permanently (after retries)."""


class TransientBackendError(Exception):
    """A backend call failed in a retryable way."""


class ScriptError(Exception):
    """The scripted backend had no rule left for a request."""


@dataclass(frozen=True)
class ModelRequest:
    role: str
    prompt: str
    temperature: float
    max_output_tokens: int
    run_id: str = ""

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class Usage:
    input_tokens: int
    output_tokens: int
    thinking_tokens: int = 0

    def __post_init__(self) -> None:
        if min(self.input_tokens, self.output_tokens, self.thinking_tokens) < 0:
            raise ValueError("token counts must be >= 0")

    @property
    def total(self) -> int:
        return self.input_tokens + self.output_tokens + self.thinking_tokens

    def to_dict(self) -> dict:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "thinking_tokens": self.thinking_tokens,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Usage":
        return cls(
            input_tokens=d["input_tokens"],
            output_tokens=d["output_tokens"],
            thinking_tokens=d.get("thinking_tokens", 0),
        )


@dataclass(frozen=True)
class ModelResponse:
    text: str
    usage: Usage
    backend_id: str
    latency_ms: float = 0.0


@dataclass(frozen=True)
class Price:
    input_usd_per_million: Decimal
    output_usd_per_million: Decimal

    def __post_init__(self) -> None:
        if self.input_usd_per_million < 0 or self.output_usd_per_million < 0:
            raise ValueError("prices must be >= 0")


class PriceTable:
    """Per-backend USD rates per million tokens."""

    def __init__(self, prices: Optional[dict[str, Price]] = None):
        self._prices = dict(prices or {})

    @classmethod
    def from_config(cls, raw: dict[str, dict]) -> "PriceTable":
        prices = {}
        for backend_id, entry in raw.items():
            prices[backend_id] = Price(
                input_usd_per_million=Decimal(str(entry["input_usd_per_million"])),
                output_usd_per_million=Decimal(str(entry["output_usd_per_million"])),
            )
        return cls(prices)

    def get(self, backend_id: str) -> Price:
        if backend_id not in self._prices:
            raise KeyError(f"no price configured for backend {backend_id!r}")
        return self._prices[backend_id]

    def to_dict(self) -> dict:
        return {
            b: {
                "input_usd_per_million": str(p.input_usd_per_million),
                "output_usd_per_million": str(p.output_usd_per_million),
            }
            for b, p in self._prices.items()
        }


# Rates used by the shipped demo profiles. "flat-10" is the generic
# 10 USD/M-token rate that round-number budget estimates are quoted at.
DEFAULT_PRICES = PriceTable(
    {
        "flat-10": Price(Decimal("10"), Decimal("10")),
        "hosted-large": Price(Decimal("1.25"), Decimal("10")),
        "hosted-small": Price(Decimal("0.30"), Decimal("2.50")),
        "hosted-batch": Price(Decimal("0.28"), Decimal("0.42")),
        "scripted": Price(Decimal("10"), Decimal("10")),
    }
)


def cost_of(usage: Usage, price: Price) -> Decimal:
    """Exact decimal cost of one call: in·rate/1e6 + out·rate/1e6."""
    return (
        Decimal(usage.input_tokens) * price.input_usd_per_million
        + Decimal(usage.output_tokens) * price.output_usd_per_million
    ) / MICRO


def estimate_max_budget(
    tokens_per_call: int,
    calls_per_round: int,
    rounds: int,
    parallel_runs: int,
    usd_per_million: Decimal | int | str,
) -> Decimal:
    """Worst-case spend for a looped, parallel pipeline shape.

    tokens/call x calls/round x rounds x parallel runs, priced at a flat
    per-million rate.
    """
    for v in (tokens_per_call, calls_per_round, rounds, parallel_runs):
        if v <= 0:
            raise ValueError("all shape inputs must be positive")
    rate = Decimal(str(usd_per_million))
    if rate <= 0:
        raise ValueError("rate must be positive")
    tokens = Decimal(tokens_per_call) * calls_per_round * rounds * parallel_runs
    return tokens * rate / MICRO


@dataclass(frozen=True)
class CostEntry:
    seq: int
    run_id: str
    role: str
    backend_id: str
    usage: Usage
    usd: Decimal

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "run_id": self.run_id,
            "role": self.role,
            "backend_id": self.backend_id,
            **self.usage.to_dict(),
            "usd": str(self.usd),
        }


class CostLedger:
    """Append-only record of every metered call.

    Totals are always exact decimal sums over the entries; the ledger is
    internally serialized so concurrent callers interleave cleanly.
    """

    def __init__(self) -> None:
        self._entries: list[CostEntry] = []
        self._lock = threading.Lock()

    def append(self, run_id: str, role: str, backend_id: str, usage: Usage, usd: Decimal) -> CostEntry:
        with self._lock:
            entry = CostEntry(
                seq=len(self._entries),
                run_id=run_id,
                role=role,
                backend_id=backend_id,
                usage=usage,
                usd=usd,
            )
            self._entries.append(entry)
            return entry

    def restore(self, entry_dicts: Sequence[dict]) -> None:
        """Replace contents from serialized entries (checkpoint resume)."""
        with self._lock:
            self._entries = [
                CostEntry(
                    seq=d["seq"],
                    run_id=d["run_id"],
                    role=d["role"],
                    backend_id=d["backend_id"],
                    usage=Usage(
                        input_tokens=d["input_tokens"],
                        output_tokens=d["output_tokens"],
                        thinking_tokens=d.get("thinking_tokens", 0),
                    ),
                    usd=Decimal(d["usd"]),
                )
                for d in entry_dicts
            ]

    @property
    def entries(self) -> tuple[CostEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def grand_total(self) -> Decimal:
        return sum((e.usd for e in self.entries), Decimal(0))

    def total_by_role(self) -> dict[str, Decimal]:
        totals: dict[str, Decimal] = {}
        for e in self.entries:
            totals[e.role] = totals.get(e.role, Decimal(0)) + e.usd
        return totals

    def total_by_run(self) -> dict[str, Decimal]:
        totals: dict[str, Decimal] = {}
        for e in self.entries:
            totals[e.run_id] = totals.get(e.run_id, Decimal(0)) + e.usd
        return totals

    def total_tokens(self) -> int:
        return sum(e.usage.total for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "totals": {
                "by_role": {k: str(v) for k, v in sorted(self.total_by_role().items())},
                "by_run": {k: str(v) for k, v in sorted(self.total_by_run().items())},
                "grand": str(self.grand_total()),
            },
        }

    def to_csv(self) -> str:
        lines = ["seq,run_id,role,backend_id,input_tokens,output_tokens,thinking_tokens,usd"]
        for e in self.entries:
            u = e.usage
            lines.append(
                f"{e.seq},{e.run_id},{e.role},{e.backend_id},"
                f"{u.input_tokens},{u.output_tokens},{u.thinking_tokens},{e.usd}"
            )
        for run, total in sorted(self.total_by_run().items()):
            lines.append(f"subtotal,{run},,,,,,{total}")
        lines.append(f"total,,,,,,,{self.grand_total()}")
        return "\n".join(lines) + "\n"


@dataclass
class ScriptRule:
    """One scripted behavior: a role plus optional prompt matcher.

    ``match`` is a substring, a list of substrings that must all be
    present, or None (matches any prompt for the role). ``responses`` are
    consumed in order; with ``repeat_last`` the final response answers all
    further hits, otherwise an exhausted rule is skipped so a later rule
    can take over.
    """

    role: str
    match: str | Sequence[str] | None
    responses: list[dict]
    repeat_last: bool = False
    cursor: int = 0

    def matches(self, req: ModelRequest) -> bool:
        if req.role != self.role:
            return False
        if self.match is None:
            return True
        needles = [self.match] if isinstance(self.match, str) else list(self.match)
        return all(n in req.prompt for n in needles)

    def exhausted(self) -> bool:
        return not self.repeat_last and self.cursor >= len(self.responses)

    def take(self) -> dict:
        idx = min(self.cursor, len(self.responses) - 1) if self.repeat_last else self.cursor
        self.cursor += 1
        return self.responses[idx]

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "match": list(self.match) if isinstance(self.match, (list, tuple)) else self.match,
            "responses": self.responses,
            "repeat_last": self.repeat_last,
        }


def _synthetic_usage(prompt: str, text: str, declared: Optional[dict]) -> Usage:
    if declared:
        return Usage(
            input_tokens=declared.get("input_tokens", max(1, len(prompt) // 4)),
            output_tokens=declared.get("output_tokens", max(1, len(text) // 4)),
            thinking_tokens=declared.get("thinking_tokens", 0),
        )
    return Usage(max(1, len(prompt) // 4), max(1, len(text) // 4), 0)


class ScriptedBackend:
    """Deterministic canned backend: the test and replay oracle.

    Rules are scanned in order; the first non-exhausted match answers.
    The same script driven by the same request sequence always yields the
    same response sequence. Cursor state can be snapshotted and restored,
    which is what makes checkpoint resume bit-identical.
    """

    backend_id = "scripted"

    def __init__(self, rules: Sequence[ScriptRule]):
        self._rules = list(rules)
        self._lock = threading.Lock()

    def complete(self, req: ModelRequest) -> ModelResponse:
        with self._lock:
            for rule in self._rules:
                if rule.matches(req) and not rule.exhausted():
                    entry = rule.take()
                    if entry.get("fail"):
                        raise TransientBackendError(entry.get("text", "scripted failure"))
                    text = entry["text"]
                    return ModelResponse(
                        text=text,
                        usage=_synthetic_usage(req.prompt, text, entry.get("usage")),
                        backend_id=self.backend_id,
                        latency_ms=0.0,
                    )
        raise ScriptError(f"no scripted response for role={req.role!r} prompt={req.prompt[:80]!r}")

    def snapshot(self) -> list[int]:
        with self._lock:
            return [r.cursor for r in self._rules]

    def restore(self, cursors: Sequence[int]) -> None:
        with self._lock:
            if len(cursors) != len(self._rules):
                raise ValueError("cursor snapshot does not match script shape")
            for rule, cur in zip(self._rules, cursors):
                rule.cursor = cur

    def reset(self) -> None:
        self.restore([0] * len(self._rules))

    def to_dict(self) -> dict:
        return {"rules": [r.to_dict() for r in self._rules]}

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptedBackend":
        return cls([ScriptRule(**{**r, "match": r.get("match")}) for r in d["rules"]])

    @classmethod
    def from_file(cls, path) -> "ScriptedBackend":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class HttpBackend:
    """Minimal JSON-over-HTTP chat backend (OpenAI-style request shape).

    Only text in / text out; no streaming, no provider extras.
    """

    def __init__(self, endpoint: str, model: str, api_key: str, backend_id: str = "http"):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.backend_id = backend_id

    def complete(self, req: ModelRequest) -> ModelResponse:
        body = json.dumps(
            {
                "model": self.model,
                "messages": [{"role": "user", "content": req.prompt}],
                "temperature": req.temperature,
                "max_tokens": req.max_output_tokens,
            }
        ).encode("utf-8")
        http_req = urllib.request.Request(
            self.endpoint,
            data=body,
            headers={
                "Content-Type": "application/json",
                "Authorization": f"Bearer {self.api_key}",
            },
        )
        start = time.monotonic()
        try:
            with urllib.request.urlopen(http_req, timeout=600) as resp:
                payload = json.load(resp)
        except Exception as exc:  # noqa: BLE001 - network errors are retryable
            raise TransientBackendError(str(exc)) from exc
        latency = (time.monotonic() - start) * 1000
        usage = payload.get("usage", {})
        return ModelResponse(
            text=payload["choices"][0]["message"]["content"],
            usage=Usage(
                input_tokens=usage.get("prompt_tokens", 0),
                output_tokens=usage.get("completion_tokens", 0),
                thinking_tokens=usage.get("reasoning_tokens", 0),
            ),
            backend_id=self.backend_id,
            latency_ms=latency,
        )


class ModelGateway:
    """Meters calls against a backend; owns the ledger and the budget.

    ``complete`` is safe for concurrent callers: admission, the ledger
    append and the budget decrement are linearizable. Completed retries
    consume budget; failed attempts do not.
    """

    def __init__(
        self,
        backend,
        token_budget: int,
        price_table: PriceTable = DEFAULT_PRICES,
        retry_attempts: int = 3,
        strict_budget: bool = False,
        sleep: Callable[[float], None] = time.sleep,
        ledger: Optional[CostLedger] = None,
    ):
        if token_budget <= 0:
            raise ValueError("token_budget must be positive")
        self.backend = backend
        self.ledger = ledger if ledger is not None else CostLedger()
        self.price_table = price_table
        self.retry_attempts = retry_attempts
        self.strict_budget = strict_budget
        self._sleep = sleep
        self._budget = token_budget
        self._consumed = 0
        self._inflight_reserved = 0
        self._lock = threading.Lock()

    @property
    def tokens_consumed(self) -> int:
        with self._lock:
            return self._consumed

    @property
    def tokens_remaining(self) -> int:
        with self._lock:
            return self._budget - self._consumed

    def restore_accounting(self, consumed: int) -> None:
        """Reset the consumption counter from a checkpoint snapshot."""
        with self._lock:
            if self._inflight_reserved:
                raise RuntimeError("cannot restore accounting with calls in flight")
            self._consumed = consumed

    def _admit(self, req: ModelRequest) -> None:
        with self._lock:
            if self.strict_budget:
                if self._consumed + self._inflight_reserved + req.max_output_tokens > self._budget:
                    raise BudgetExceeded()
            else:
                if self._consumed + self._inflight_reserved >= self._budget:
                    raise BudgetExceeded()
            self._inflight_reserved += req.max_output_tokens

    def _settle(self, req: ModelRequest, usage: Optional[Usage]) -> None:
        with self._lock:
            self._inflight_reserved -= req.max_output_tokens
            if usage is not None:
                self._consumed += usage.total

    def complete(self, req: ModelRequest) -> ModelResponse:
        self._admit(req)
        usage: Optional[Usage] = None
        try:
            response = self._call_with_retry(req)
            usage = response.usage
        finally:
            self._settle(req, usage)
        price = self.price_table.get(response.backend_id)
        self.ledger.append(req.run_id, req.role, response.backend_id, usage, cost_of(usage, price))
        return response

    def _call_with_retry(self, req: ModelRequest) -> ModelResponse:
        last: Optional[Exception] = None
        for attempt in range(self.retry_attempts):
            try:
                return self.backend.complete(req)
            except TransientBackendError as exc:
                last = exc
                if attempt + 1 < self.retry_attempts:
                    self._sleep(0.5 * (2**attempt))
        raise BackendFailure(f"backend failed after {self.retry_attempts} attempts: {last}")
