"""Provider-agnostic LLM access: templates, structured output, retries, cache.

Templates are plain text files with a front-matter header:

    ---
    template_id: domain_classify
    response_shape: {"is_programming_related": "bool"}
    ---
    [system]
    ...system prompt...
    [user]
    ...user prompt with {placeholders}...

Structured output is requested by instructing the model to emit one JSON
object; validation against response_shape happens locally, and invalid
output triggers a retry with a repair suffix.  Temperature-0 responses are
cached on disk, keyed by a content hash that includes the template text so
editing a template invalidates its entries.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)

_PLACEHOLDER_RE = re.compile(r"\{([a-z_][a-z0-9_]*)\}")
_JSON_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)\n\s*```", re.DOTALL)

REPAIR_SUFFIX = (
    "\n\nYour previous output was not valid. Return only the structured document."
)


class GatewayError(Exception):
    """Completion failed after all attempts. Carries the last raw output."""

    def __init__(self, message: str, raw_text: str = "", attempts: int = 0, usage: "Usage | None" = None):
        super().__init__(message)
        self.raw_text = raw_text
        self.attempts = attempts
        self.usage = usage or Usage()


class TemplateError(Exception):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class PromptTemplate:
    template_id: str
    system_text: str
    user_text: str
    # field name -> type: bool/int/float/str/list[...]; trailing "?" = optional.
    # None means the raw completion text is the payload (no JSON parsing).
    response_shape: dict[str, str] | None

    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER_RE.findall(self.user_text)) | set(
            _PLACEHOLDER_RE.findall(self.system_text)
        )

    def content_hash(self) -> str:
        blob = json.dumps(
            [self.template_id, self.system_text, self.user_text, self.response_shape],
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class CompletionRequest:
    template_id: str
    variables: dict[str, str]
    model_id: str
    temperature: float = 0.0
    max_attempts: int = 3

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def add(self, other: "Usage") -> None:
        self.prompt_tokens += other.prompt_tokens
        self.completion_tokens += other.completion_tokens

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass
class StructuredResponse:
    parsed: dict[str, Any]
    raw_text: str
    usage: Usage
    attempts: int
    cached: bool = False


@dataclass
class ProviderReply:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


# ---------------------------------------------------------------------------
# Template loading and rendering
# ---------------------------------------------------------------------------


def parse_template(text: str, origin: str = "<string>") -> PromptTemplate:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "---":
        raise TemplateError(f"{origin}: missing front-matter")
    try:
        end = next(i for i in range(1, len(lines)) if lines[i].strip() == "---")
    except StopIteration:
        raise TemplateError(f"{origin}: unterminated front-matter") from None

    meta: dict[str, str] = {}
    for raw in lines[1:end]:
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        key, _, value = raw.partition(":")
        meta[key.strip()] = value.strip()
    if "template_id" not in meta:
        raise TemplateError(f"{origin}: front-matter needs template_id")

    shape_raw = meta.get("response_shape", "text")
    if shape_raw == "text":
        shape = None
    else:
        try:
            shape = json.loads(shape_raw)
        except json.JSONDecodeError as exc:
            raise TemplateError(f"{origin}: bad response_shape: {exc}") from exc
        if not isinstance(shape, dict):
            raise TemplateError(f"{origin}: response_shape must be an object")

    body = lines[end + 1 :]
    sections: dict[str, list[str]] = {}
    current: list[str] | None = None
    for raw in body:
        marker = raw.strip().lower()
        if marker in ("[system]", "[user]"):
            current = sections.setdefault(marker[1:-1], [])
        elif current is not None:
            current.append(raw)
        elif raw.strip():
            raise TemplateError(f"{origin}: body text before a [system]/[user] marker")
    if "user" not in sections:
        raise TemplateError(f"{origin}: template needs a [user] section")

    return PromptTemplate(
        template_id=meta["template_id"],
        system_text="\n".join(sections.get("system", [])).strip(),
        user_text="\n".join(sections["user"]).strip(),
        response_shape=shape,
    )


def load_templates(directory: str | Path) -> dict[str, PromptTemplate]:
    directory = Path(directory)
    templates: dict[str, PromptTemplate] = {}
    for path in sorted(directory.glob("*.txt")):
        tpl = parse_template(path.read_text(encoding="utf-8"), origin=str(path))
        if tpl.template_id in templates:
            raise TemplateError(f"duplicate template_id {tpl.template_id!r} in {path}")
        templates[tpl.template_id] = tpl
    if not templates:
        raise TemplateError(f"no templates found in {directory}")
    return templates


def default_templates() -> dict[str, PromptTemplate]:
    """Templates shipped with the package."""
    return load_templates(Path(__file__).parent / "templates")


def render(template: PromptTemplate, variables: dict[str, str]) -> tuple[str, str]:
    """Substitute {name} placeholders. Single pass: substituted values are
    never re-scanned, so braces inside user content are safe."""

    def _sub(text: str) -> str:
        def repl(match: re.Match) -> str:
            name = match.group(1)
            if name not in variables:
                raise TemplateError(f"unresolved placeholder: {name}")
            return str(variables[name])

        return _PLACEHOLDER_RE.sub(repl, text)

    return _sub(template.system_text), _sub(template.user_text)


# ---------------------------------------------------------------------------
# Structured-output validation
# ---------------------------------------------------------------------------


def extract_json(text: str) -> Any:
    """Parse a JSON document, tolerating markdown fences around it."""
    candidate = text.strip()
    fence = _JSON_FENCE_RE.search(candidate)
    if fence:
        candidate = fence.group(1)
    return json.loads(candidate)


def _check_type(value: Any, type_name: str) -> bool:
    if type_name.startswith("list[") and type_name.endswith("]"):
        inner = type_name[5:-1]
        return isinstance(value, list) and all(_check_type(v, inner) for v in value)
    if type_name == "bool":
        return isinstance(value, bool)
    if type_name == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if type_name == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if type_name == "str":
        return isinstance(value, str)
    raise TemplateError(f"unknown response_shape type: {type_name!r}")


def validate_shape(raw_text: str, shape: dict[str, str] | None) -> dict[str, Any]:
    """Parse raw model output against a response shape.

    Raises ValueError with a diagnostic when the output does not conform.
    Unknown extra keys are ignored; models love to add commentary fields.
    """
    if shape is None:
        return {"text": raw_text}
    try:
        doc = extract_json(raw_text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValueError("top-level JSON value is not an object")

    parsed: dict[str, Any] = {}
    for name, type_name in shape.items():
        optional = type_name.endswith("?")
        if optional:
            type_name = type_name[:-1]
        if name not in doc or doc[name] is None:
            if optional:
                parsed[name] = None
                continue
            raise ValueError(f"missing required field: {name}")
        if not _check_type(doc[name], type_name):
            raise ValueError(f"field {name!r} is not of type {type_name}")
        parsed[name] = doc[name]
    return parsed


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------


class MockProvider:
    """Scripted provider for deterministic offline runs.

    A script is an ordered list of rules; the first matching rule answers the
    call.  Rules match on template_id, optionally model_id, and optionally
    substrings of the rendered user prompt (or its sha256 via "prompt_sha256"
    when a fixture wants an exact-input match):

        {"template_id": "judge_checklist",
         "model_id": "mock-judge",
         "contains_all": ["[c01-a]", "inputting current"],
         "response_json": {"answers": [true, false]}}

    "responses"/"responses_json" hold a list consumed one per call to that
    rule (later calls repeat the last entry), which scripts retry behaviour.
    Replies are a pure function of the call sequence for a given script.
    """

    def __init__(self, rules: Sequence[dict[str, Any]]):
        self.rules = list(rules)
        self.call_log: list[dict[str, str]] = []
        self._rule_hits = [0] * len(self.rules)
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "MockProvider":
        with Path(path).open(encoding="utf-8") as fh:
            rules = json.load(fh)
        if not isinstance(rules, list):
            raise ValueError(f"mock script {path} must be a JSON list of rules")
        return cls(rules)

    @property
    def call_count(self) -> int:
        return len(self.call_log)

    def complete_chat(
        self, template_id: str, system_text: str, user_text: str,
        model_id: str, temperature: float,
    ) -> ProviderReply:
        with self._lock:
            self.call_log.append(
                {"template_id": template_id, "model_id": model_id, "user_text": user_text}
            )
            for i, rule in enumerate(self.rules):
                if not self._matches(rule, template_id, model_id, user_text):
                    continue
                text = self._reply_text(rule, self._rule_hits[i])
                self._rule_hits[i] += 1
                return ProviderReply(
                    text=text,
                    prompt_tokens=len(system_text.split()) + len(user_text.split()),
                    completion_tokens=len(text.split()),
                )
        raise GatewayError(
            f"mock script has no rule for template {template_id!r} "
            f"(model {model_id!r}, prompt starts {user_text[:80]!r})"
        )

    @staticmethod
    def _matches(rule: dict[str, Any], template_id: str, model_id: str, user_text: str) -> bool:
        if rule.get("template_id") not in (None, template_id):
            return False
        if rule.get("model_id") not in (None, model_id):
            return False
        if "prompt_sha256" in rule:
            digest = hashlib.sha256(user_text.encode("utf-8")).hexdigest()
            if digest != rule["prompt_sha256"]:
                return False
        needles = list(rule.get("contains_all", []))
        if "contains" in rule:
            needles.append(rule["contains"])
        return all(needle in user_text for needle in needles)

    @staticmethod
    def _reply_text(rule: dict[str, Any], hit: int) -> str:
        if "responses" in rule or "responses_json" in rule:
            seq = rule.get("responses")
            if seq is None:
                seq = [json.dumps(v) for v in rule["responses_json"]]
            return seq[min(hit, len(seq) - 1)]
        if "response_json" in rule:
            return json.dumps(rule["response_json"])
        return rule["response"]


class OpenAICompatProvider:
    """Minimal chat-completions client for OpenAI-compatible HTTP endpoints.

    Credentials come from the environment (api_key_env); nothing is read
    from disk or config files.
    """

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "CONV2BENCH_API_KEY",
        timeout: float = 120.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout

    def complete_chat(
        self, template_id: str, system_text: str, user_text: str,
        model_id: str, temperature: float,
    ) -> ProviderReply:
        import requests

        api_key = os.environ.get(self.api_key_env, "")
        if not api_key:
            raise GatewayError(f"missing credential: set ${self.api_key_env}")
        messages = []
        if system_text:
            messages.append({"role": "system", "content": system_text})
        messages.append({"role": "user", "content": user_text})
        resp = requests.post(
            f"{self.base_url}/chat/completions",
            headers={"Authorization": f"Bearer {api_key}"},
            json={"model": model_id, "messages": messages, "temperature": temperature},
            timeout=self.timeout,
        )
        resp.raise_for_status()
        body = resp.json()
        usage = body.get("usage", {})
        return ProviderReply(
            text=body["choices"][0]["message"]["content"],
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        )


# ---------------------------------------------------------------------------
# Response cache
# ---------------------------------------------------------------------------


class ResponseCache:
    """Disk cache for temperature-0 completions, one JSON file per key."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    @staticmethod
    def key(template: PromptTemplate, variables: dict[str, str], model_id: str) -> str:
        blob = json.dumps(
            [template.content_hash(), variables, model_id], sort_keys=True
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def get(self, key: str) -> StructuredResponse | None:
        path = self.directory / f"{key}.json"
        if not path.exists():
            return None
        rec = json.loads(path.read_text(encoding="utf-8"))
        return StructuredResponse(
            parsed=rec["parsed"],
            raw_text=rec["raw_text"],
            usage=Usage(**rec["usage"]),
            attempts=rec["attempts"],
            cached=True,
        )

    def put(self, key: str, response: StructuredResponse) -> None:
        rec = {
            "parsed": response.parsed,
            "raw_text": response.raw_text,
            "usage": {
                "prompt_tokens": response.usage.prompt_tokens,
                "completion_tokens": response.usage.completion_tokens,
            },
            "attempts": response.attempts,
        }
        path = self.directory / f"{key}.json"
        tmp = path.with_suffix(".tmp")
        with self._lock:
            tmp.write_text(json.dumps(rec, ensure_ascii=False), encoding="utf-8")
            tmp.replace(path)


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------


@dataclass
class _SessionCounters:
    usage: Usage = field(default_factory=Usage)
    provider_calls: int = 0
    cache_hits: int = 0


class Gateway:
    """Ties templates, a provider, and the cache together.

    complete() may be called from many workers; a semaphore bounds in-flight
    provider requests and counters are lock-protected.
    """

    def __init__(
        self,
        templates: dict[str, PromptTemplate],
        provider,
        cache: ResponseCache | None = None,
        max_parallel: int = 8,
        transport_retries: int = 3,
        backoff_base: float = 0.5,
    ):
        self.templates = templates
        self.provider = provider
        self.cache = cache
        self._semaphore = threading.BoundedSemaphore(max_parallel)
        self._counter_lock = threading.Lock()
        self._counters = _SessionCounters()
        self.transport_retries = transport_retries
        self.backoff_base = backoff_base

    @property
    def session_usage(self) -> Usage:
        return self._counters.usage

    @property
    def provider_calls(self) -> int:
        return self._counters.provider_calls

    @property
    def cache_hits(self) -> int:
        return self._counters.cache_hits

    def counters_snapshot(self) -> dict[str, int]:
        with self._counter_lock:
            return {
                "provider_calls": self._counters.provider_calls,
                "cache_hits": self._counters.cache_hits,
                "prompt_tokens": self._counters.usage.prompt_tokens,
                "completion_tokens": self._counters.usage.completion_tokens,
            }

    def complete(
        self,
        req: CompletionRequest,
        validate: Callable[[dict[str, Any]], str | None] | None = None,
    ) -> StructuredResponse:
        """Render, call the provider, and validate the structured reply.

        `validate` may impose extra semantic checks on the parsed document
        (return an error string to reject).  Rejected or unparseable output
        is retried with a repair suffix up to req.max_attempts, accumulating
        usage.  Only fully validated responses enter the cache.
        """
        template = self.templates.get(req.template_id)
        if template is None:
            raise GatewayError(f"template not registered: {req.template_id!r}")
        system_text, user_text = render(template, req.variables)

        cache_key = None
        if self.cache is not None and req.temperature == 0:
            cache_key = ResponseCache.key(template, req.variables, req.model_id)
            hit = self.cache.get(cache_key)
            if hit is not None:
                with self._counter_lock:
                    self._counters.cache_hits += 1
                return hit

        usage = Usage()
        last_raw = ""
        last_error = ""
        prompt = user_text
        for attempt in range(1, req.max_attempts + 1):
            reply = self._call_provider(req, template.template_id, system_text, prompt)
            usage.add(Usage(reply.prompt_tokens, reply.completion_tokens))
            last_raw = reply.text
            try:
                parsed = validate_shape(reply.text, template.response_shape)
            except ValueError as exc:
                last_error = str(exc)
            else:
                semantic_error = validate(parsed) if validate else None
                if semantic_error is None:
                    response = StructuredResponse(
                        parsed=parsed, raw_text=reply.text, usage=usage, attempts=attempt
                    )
                    if cache_key is not None:
                        self.cache.put(cache_key, response)
                    return response
                last_error = semantic_error
            logger.debug(
                "attempt %d/%d for %s rejected: %s",
                attempt, req.max_attempts, req.template_id, last_error,
            )
            prompt = user_text + REPAIR_SUFFIX

        raise GatewayError(
            f"no valid response for {req.template_id!r} after "
            f"{req.max_attempts} attempts (last error: {last_error})",
            raw_text=last_raw,
            attempts=req.max_attempts,
            usage=usage,
        )

    def _call_provider(self, req, template_id, system_text, user_text) -> ProviderReply:
        delay = self.backoff_base
        for attempt in range(self.transport_retries + 1):
            with self._semaphore:
                try:
                    reply = self.provider.complete_chat(
                        template_id, system_text, user_text, req.model_id, req.temperature
                    )
                except GatewayError:
                    raise
                except Exception as exc:  # noqa: BLE001 - transport errors are opaque
                    if attempt == self.transport_retries:
                        raise GatewayError(f"provider transport failure: {exc}") from exc
                    logger.warning("transport error (%s); retrying in %.1fs", exc, delay)
                    time.sleep(delay)
                    delay *= 2
                    continue
            with self._counter_lock:
                self._counters.provider_calls += 1
                self._counters.usage.add(Usage(reply.prompt_tokens, reply.completion_tokens))
            return reply
        raise AssertionError("unreachable")
