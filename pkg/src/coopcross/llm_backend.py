"""Language-model negotiation backend and its offline fixture twin.

Prompts are rendered deterministically from the negotiation context, sent
through a chat-completion HTTP endpoint with bounded retries, and replies
are parsed back into precedence or order structures under strict schemas.
The fixture backend replays recorded replies keyed by prompt hash, so test
suites never touch the network.
"""
from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from dataclasses import dataclass, field

import requests

from .core import VehicleId
from .negotiation import (
    BackendError,
    ConflictPairInfo,
    NegotiationContext,
    PassOrder,
    PrecedencePreference,
)


class ChatError(RuntimeError):
    """Base class for transport-level chat failures."""


class TransportFailure(ChatError):
    """Connection could not be established or broke mid-request."""


class RequestTimeout(ChatError):
    """The endpoint did not answer within the configured timeout."""


class AuthFailure(ChatError):
    """Missing or rejected API credentials (not retried)."""


class RetriesExhausted(ChatError):
    """All attempts failed; carries the per-attempt log."""

    def __init__(self, message: str, attempts: list[str]):
        super().__init__(message)
        self.attempts = attempts


class ParseFailure(ValueError):
    """No JSON payload could be extracted from the reply."""


class SchemaViolation(ValueError):
    """Extracted JSON does not match the expected schema."""


@dataclass(frozen=True)
class LlmConfig:
    endpoint_url: str = "http://127.0.0.1:8080/v1/chat/completions"
    model_name: str = "negotiator"
    api_key_env_var: str = "LLM_API_KEY"
    temperature: float = 0.0
    request_timeout: float = 30.0
    max_retries: int = 3
    rate_limit: float = 10.0           # requests per second
    backoff_base: float = 1.0          # seconds
    backoff_factor: float = 2.0

    @classmethod
    def from_dict(cls, data: dict) -> "LlmConfig":
        import dataclasses

        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown llm config keys {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    expected_schema_id: str


SCHEMA_PRECEDENCES = "precedences-v1"
SCHEMA_GLOBAL_ORDER = "global-order-v1"

_SCHEMA_HINTS = {
    SCHEMA_PRECEDENCES: (
        'a JSON array of objects, one per conflict pair, each '
        '{"first": <vehicle id>, "second": <vehicle id>, "why": "<short reason>"} '
        'meaning the first vehicle passes before the second'
    ),
    SCHEMA_GLOBAL_ORDER: (
        'a JSON array covering every vehicle exactly once, in passing order, '
        'each entry {"id": <vehicle id>, "group": <group index>}'
    ),
}


def _format_float(x: float) -> str:
    return f"{x:.2f}"


def _context_lines(context: NegotiationContext) -> list[str]:
    lines = ["Vehicles in this negotiation:"]
    for vid in context.members:
        arrival = context.arrival_estimate(vid)
        if arrival == float("inf"):
            lines.append(f"- vehicle {vid}: no remaining conflict point")
        else:
            lines.append(
                f"- vehicle {vid}: estimated arrival at its nearest conflict "
                f"point in {_format_float(arrival)} s"
            )
    lines.append("Conflicting vehicle pairs (shared crossing point):")
    if not context.conflict_pairs:
        lines.append("- none")
    for pair in context.conflict_pairs:
        lines.append(
            f"- vehicles {pair.a} and {pair.b}: vehicle {pair.a} is "
            f"{_format_float(pair.dist_a)} m away at {_format_float(pair.speed_a)} m/s, "
            f"vehicle {pair.b} is {_format_float(pair.dist_b)} m away at "
            f"{_format_float(pair.speed_b)} m/s"
        )
    lines.append("Car-following relations (same lane):")
    if not context.following:
        lines.append("- none")
    for rel in context.following:
        lines.append(
            f"- vehicle {rel.follower} follows vehicle {rel.leader} "
            f"at a gap of {_format_float(rel.gap)} m"
        )
    if context.pinned:
        lines.append(
            "Already inside the conflict area and committed to cross first: "
            + ", ".join(str(v) for v in context.pinned)
        )
    if context.violations_log:
        lines.append("Problems found with earlier replies (fix them):")
        for note in context.violations_log:
            lines.append(f"- {note}")
    return lines


_RULES_TEXT = (
    "Rules your answer must satisfy: "
    "(1) never name a vehicle outside the list above, and cover every "
    "conflicting pair exactly once; "
    "(2) a vehicle following another on the same lane can never pass "
    "before its leader; "
    "(3) the stated precedences must not form a cycle."
)


def build_opinion_prompt(
    context: NegotiationContext, vehicle_id: VehicleId
) -> PromptBundle:
    """Prompt asking one vehicle for its precedence opinion on every pair."""
    lines = [
        f"You are the negotiation agent for vehicle {vehicle_id} at an "
        "unsignalized intersection.",
    ]
    lines += _context_lines(context)
    lines.append(_RULES_TEXT)
    lines.append(
        "For every conflicting pair, state which vehicle should pass first. "
        "Reply with " + _SCHEMA_HINTS[SCHEMA_PRECEDENCES] + " and nothing else."
    )
    return PromptBundle(
        system_text=(
            "You coordinate autonomous vehicles. Always answer with the exact "
            "JSON payload requested, no extra prose."
        ),
        user_text="\n".join(lines),
        expected_schema_id=SCHEMA_PRECEDENCES,
    )


def build_resolve_prompt(
    context: NegotiationContext, disputed: list[ConflictPairInfo]
) -> PromptBundle:
    """Prompt asking for final precedences on the disputed pairs only."""
    lines = ["You arbitrate a pass-order disagreement at an unsignalized intersection."]
    lines += _context_lines(context)
    if context.agreed:
        lines.append("Already settled precedences (do not contradict them):")
        for pref in context.agreed:
            lines.append(f"- vehicle {pref.first} before vehicle {pref.second}")
    lines.append("Disputed pairs needing a final decision:")
    for pair in disputed:
        lines.append(f"- vehicles {pair.a} and {pair.b}")
    lines.append(_RULES_TEXT)
    lines.append(
        "Decide the disputed pairs only. Reply with "
        + _SCHEMA_HINTS[SCHEMA_PRECEDENCES] + " and nothing else."
    )
    return PromptBundle(
        system_text=(
            "You coordinate autonomous vehicles. Always answer with the exact "
            "JSON payload requested, no extra prose."
        ),
        user_text="\n".join(lines),
        expected_schema_id=SCHEMA_PRECEDENCES,
    )


def build_merge_prompt(
    intra_orders: list[PassOrder], context: NegotiationContext
) -> PromptBundle:
    """Prompt asking for one global order that interleaves the group orders."""
    lines = ["You merge per-group pass orders into one global crossing order."]
    lines.append("(1) Pass order decided inside each group:")
    for idx, po in enumerate(intra_orders):
        scope = po.scope if po.scope is not None else idx
        lines.append(
            f"- group {scope}: " + " -> ".join(str(v) for v in po.ordered_ids)
        )
    lines.append("(2) Conflict information between vehicles:")
    sub = _context_lines(context)
    lines += sub[sub.index("Conflicting vehicle pairs (shared crossing point):"):]
    lines.append(
        "(3) Requirements: a vehicle following another on the same lane "
        "passes after its leader; no vehicle from the group orders may be "
        "dropped or invented; the relative order inside every group must be "
        "kept in the global order."
    )
    lines.append(
        "Reply with " + _SCHEMA_HINTS[SCHEMA_GLOBAL_ORDER] + " and nothing else."
    )
    return PromptBundle(
        system_text=(
            "You coordinate autonomous vehicles. Always answer with the exact "
            "JSON payload requested, no extra prose."
        ),
        user_text="\n".join(lines),
        expected_schema_id=SCHEMA_GLOBAL_ORDER,
    )


def prompt_key(prompt: PromptBundle) -> str:
    payload = prompt.system_text + "\n\0\n" + prompt.user_text
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class _RateLimiter:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._last: dict[str, float] = {}

    def wait(self, endpoint: str, rate: float) -> None:
        if rate <= 0:
            return
        min_interval = 1.0 / rate
        with self._lock:
            now = time.monotonic()
            last = self._last.get(endpoint, float("-inf"))
            delay = last + min_interval - now
            if delay > 0:
                time.sleep(delay)
                now = time.monotonic()
            self._last[endpoint] = now


_LIMITER = _RateLimiter()


def chat(config: LlmConfig, prompt: PromptBundle, extra_user: str | None = None) -> str:
    """POST one chat-completion request; returns the assistant text.

    Transport failures, timeouts, 429 and 5xx responses are retried with
    exponential backoff (base * factor^attempt plus jitter) up to
    ``max_retries`` extra attempts.  Missing credentials or 401/403 raise
    AuthFailure immediately.
    """
    api_key = os.environ.get(config.api_key_env_var)
    if not api_key:
        raise AuthFailure(
            f"environment variable {config.api_key_env_var} is not set"
        )
    messages = [
        {"role": "system", "content": prompt.system_text},
        {"role": "user", "content": prompt.user_text},
    ]
    if extra_user:
        messages.append({"role": "user", "content": extra_user})
    body = {
        "model": config.model_name,
        "temperature": config.temperature,
        "messages": messages,
    }
    headers = {
        "Authorization": f"Bearer {api_key}",
        "Content-Type": "application/json",
    }
    attempts: list[str] = []
    for attempt in range(config.max_retries + 1):
        if attempt > 0:
            delay = config.backoff_base * (config.backoff_factor ** (attempt - 1))
            time.sleep(delay + random.random() * config.backoff_base * 0.1)
        _LIMITER.wait(config.endpoint_url, config.rate_limit)
        try:
            resp = requests.post(
                config.endpoint_url,
                json=body,
                headers=headers,
                timeout=config.request_timeout,
            )
        except requests.Timeout as exc:
            attempts.append(f"attempt {attempt + 1}: timeout ({exc})")
            continue
        except requests.RequestException as exc:
            attempts.append(f"attempt {attempt + 1}: transport ({exc})")
            continue
        if resp.status_code in (401, 403):
            raise AuthFailure(f"endpoint rejected credentials ({resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            attempts.append(f"attempt {attempt + 1}: http {resp.status_code}")
            continue
        if resp.status_code != 200:
            raise TransportFailure(
                f"unexpected http {resp.status_code}: {resp.text[:200]}"
            )
        try:
            payload = resp.json()
            return payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportFailure(f"malformed completion payload: {exc}") from exc
    raise RetriesExhausted(
        f"gave up after {config.max_retries + 1} attempts", attempts
    )


def _extract_json(raw: str):
    """First parseable JSON value embedded in free-form text."""
    decoder = json.JSONDecoder()
    for idx, ch in enumerate(raw):
        if ch in "[{":
            try:
                value, _ = decoder.raw_decode(raw[idx:])
                return value
            except ValueError:
                continue
    raise ParseFailure(f"no JSON payload found in reply: {raw[:200]!r}")


def parse_reply(
    raw: str,
    schema_id: str,
    valid_ids: list[VehicleId],
):
    """Parse and validate an assistant reply.

    Returns a list of (first, second, why) tuples for the precedence schema,
    or a list of (id, group) tuples for the global-order schema.  Vehicles
    outside ``valid_ids`` fail validation.
    """
    if schema_id not in _SCHEMA_HINTS:
        raise SchemaViolation(f"unknown schema id {schema_id!r}")
    value = _extract_json(raw)
    id_set = set(valid_ids)
    if not isinstance(value, list):
        raise SchemaViolation("$: expected a JSON array")
    if schema_id == SCHEMA_PRECEDENCES:
        out = []
        for pos, item in enumerate(value):
            if not isinstance(item, dict):
                raise SchemaViolation(f"$[{pos}]: expected an object")
            for key in ("first", "second"):
                if key not in item:
                    raise SchemaViolation(f"$[{pos}].{key}: missing")
                if not isinstance(item[key], int) or isinstance(item[key], bool):
                    raise SchemaViolation(f"$[{pos}].{key}: expected an integer id")
                if item[key] not in id_set:
                    raise SchemaViolation(
                        f"$[{pos}].{key}: vehicle {item[key]} is not in this negotiation"
                    )
            if item["first"] == item["second"]:
                raise SchemaViolation(f"$[{pos}]: first and second are the same vehicle")
            why = item.get("why", "")
            if not isinstance(why, str):
                raise SchemaViolation(f"$[{pos}].why: expected a string")
            out.append((item["first"], item["second"], why))
        return out
    out = []
    for pos, item in enumerate(value):
        if not isinstance(item, dict):
            raise SchemaViolation(f"$[{pos}]: expected an object")
        if "id" not in item:
            raise SchemaViolation(f"$[{pos}].id: missing")
        if not isinstance(item["id"], int) or isinstance(item["id"], bool):
            raise SchemaViolation(f"$[{pos}].id: expected an integer id")
        if item["id"] not in id_set:
            raise SchemaViolation(
                f"$[{pos}].id: vehicle {item['id']} is not in this negotiation"
            )
        group = item.get("group", 0)
        if not isinstance(group, int) or isinstance(group, bool):
            raise SchemaViolation(f"$[{pos}].group: expected an integer")
        out.append((item["id"], group))
    return out


def render_precedences(prefs: list[PrecedencePreference]) -> str:
    return json.dumps(
        [{"first": p.first, "second": p.second, "why": p.rationale} for p in prefs]
    )


def render_global_order(order: list[VehicleId], group_of: dict[VehicleId, int]) -> str:
    return json.dumps([{"id": v, "group": group_of.get(v, 0)} for v in order])


class LlmBackend:
    """Negotiation backend that defers every decision to a chat endpoint."""

    def __init__(self, config: LlmConfig):
        self.config = config
        self.name = f"llm:{config.model_name}"

    def _ask(self, prompt: PromptBundle, valid_ids: list[VehicleId]):
        try:
            raw = chat(self.config, prompt)
        except ChatError as exc:
            raise BackendError(f"chat failed: {exc}") from exc
        try:
            return parse_reply(raw, prompt.expected_schema_id, valid_ids)
        except (ParseFailure, SchemaViolation) as first_error:
            followup = (
                "Your previous reply could not be used: "
                f"{first_error}. Answer again with exactly "
                + _SCHEMA_HINTS[prompt.expected_schema_id] + " and nothing else."
            )
            try:
                raw = chat(self.config, prompt, extra_user=followup)
            except ChatError as exc:
                raise BackendError(f"chat failed on reformat retry: {exc}") from exc
            try:
                return parse_reply(raw, prompt.expected_schema_id, valid_ids)
            except (ParseFailure, SchemaViolation) as exc:
                raise BackendError(f"unusable reply after reformat retry: {exc}") from exc

    def opinion(
        self, context: NegotiationContext, vehicle_id: VehicleId
    ) -> list[PrecedencePreference]:
        prompt = build_opinion_prompt(context, vehicle_id)
        rows = self._ask(prompt, list(context.members))
        return [
            PrecedencePreference(first=f, second=s, stated_by=vehicle_id, rationale=w)
            for (f, s, w) in rows
        ]

    def resolve(
        self,
        context: NegotiationContext,
        disputed: list[ConflictPairInfo],
    ) -> list[PrecedencePreference]:
        prompt = build_resolve_prompt(context, disputed)
        rows = self._ask(prompt, list(context.members))
        return [
            PrecedencePreference(first=f, second=s, stated_by=f, rationale=w)
            for (f, s, w) in rows
        ]

    def merge(
        self,
        intra_orders: list[PassOrder],
        context: NegotiationContext,
    ) -> list[VehicleId]:
        prompt = build_merge_prompt(intra_orders, context)
        rows = self._ask(prompt, list(context.members))
        return [vid for (vid, _group) in rows]


class FixtureBackend:
    """Replays recorded replies keyed by prompt hash; misses are errors.

    Accepts either a mapping {prompt_sha256: reply_text} or a path to a
    JSONL file of {"prompt_sha256": ..., "reply": ...} records.
    """

    name = "fixture"

    def __init__(self, replies: dict[str, str] | str):
        if isinstance(replies, str):
            table: dict[str, str] = {}
            with open(replies, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    record = json.loads(line)
                    table[record["prompt_sha256"]] = record["reply"]
            self.replies = table
        else:
            self.replies = dict(replies)

    def _lookup(self, prompt: PromptBundle) -> str:
        key = prompt_key(prompt)
        if key not in self.replies:
            raise BackendError(f"fixture has no reply for prompt {key[:12]}...")
        return self.replies[key]

    def _ask(self, prompt: PromptBundle, valid_ids: list[VehicleId]):
        raw = self._lookup(prompt)
        try:
            return parse_reply(raw, prompt.expected_schema_id, valid_ids)
        except (ParseFailure, SchemaViolation) as exc:
            raise BackendError(f"fixture reply unusable: {exc}") from exc

    def opinion(
        self, context: NegotiationContext, vehicle_id: VehicleId
    ) -> list[PrecedencePreference]:
        rows = self._ask(build_opinion_prompt(context, vehicle_id), list(context.members))
        return [
            PrecedencePreference(first=f, second=s, stated_by=vehicle_id, rationale=w)
            for (f, s, w) in rows
        ]

    def resolve(
        self,
        context: NegotiationContext,
        disputed: list[ConflictPairInfo],
    ) -> list[PrecedencePreference]:
        rows = self._ask(build_resolve_prompt(context, disputed), list(context.members))
        return [
            PrecedencePreference(first=f, second=s, stated_by=f, rationale=w)
            for (f, s, w) in rows
        ]

    def merge(
        self,
        intra_orders: list[PassOrder],
        context: NegotiationContext,
    ) -> list[VehicleId]:
        rows = self._ask(build_merge_prompt(intra_orders, context), list(context.members))
        return [vid for (vid, _group) in rows]
