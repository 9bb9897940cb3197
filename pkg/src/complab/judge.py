"""Client for an external LLM judge endpoint, with a deterministic stub.

The wire protocol is a single POST of canonical JSON and a JSON reply
carrying one score per requested criterion in [0, 1]; docs/judge-protocol.md
documents the exact schema. Network failures and 5xx replies retry with
exponential backoff; 4xx replies fail immediately since resending the
same payload cannot help.

Stub mode (JUDGE_STUB=1, or stub=True) needs no network: each score is
the first 8 bytes of sha256(canonical request + criterion name) scaled
to [0, 1]. The same request always scores the same, across processes,
which keeps offline runs reproducible.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import requests

from .errors import ConfigError, ParameterError, ProtocolError, TransportError

DEFAULT_CRITERIA = ("correctness", "relevance")
ALIGNMENT_CRITERION = "prompt_alignment"
TEMPLATE_ID = "geval-v1"


@dataclass(frozen=True)
class JudgeRequest:
    prompt: str
    response: str
    criteria: tuple = DEFAULT_CRITERIA
    template_id: str = TEMPLATE_ID

    def __post_init__(self):
        if not self.criteria:
            raise ParameterError("judge request needs at least one criterion")
        if not isinstance(self.prompt, str) or not isinstance(self.response, str):
            raise ParameterError("prompt and response must be strings")


@dataclass
class JudgeScore:
    per_criterion: dict
    aggregate: float
    raw_text: Optional[str] = None


@dataclass
class JudgeConfig:
    endpoint: Optional[str] = None
    api_key: Optional[str] = None
    stub: bool = False
    timeout: float = 10.0
    max_retries: int = 3
    backoff_seconds: float = 0.25

    @property
    def enabled(self) -> bool:
        return self.stub or bool(self.endpoint)

    @classmethod
    def from_env(cls, env=None) -> "JudgeConfig":
        env = os.environ if env is None else env
        return cls(
            endpoint=env.get("JUDGE_ENDPOINT") or None,
            api_key=env.get("JUDGE_API_KEY") or None,
            stub=env.get("JUDGE_STUB") == "1",
        )


def canonical_request_bytes(request: JudgeRequest) -> bytes:
    payload = {
        "criteria": list(request.criteria),
        "prompt": request.prompt,
        "response": request.response,
        "template": request.template_id,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _stub_score(request: JudgeRequest, criterion: str) -> float:
    digest = hashlib.sha256(
        canonical_request_bytes(request) + b"\x00" + criterion.encode("utf-8")
    ).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64


def _post_with_retries(payload: bytes, config: JudgeConfig):
    headers = {
        "Content-Type": "application/json",
        "Authorization": f"Bearer {config.api_key}",
    }
    last_exc = None
    for attempt in range(config.max_retries + 1):
        if attempt:
            time.sleep(config.backoff_seconds * 2 ** (attempt - 1))
        try:
            resp = requests.post(config.endpoint, data=payload, headers=headers,
                                 timeout=config.timeout)
        except (requests.ConnectionError, requests.Timeout) as e:
            last_exc = e
            continue
        if 500 <= resp.status_code < 600:
            last_exc = TransportError(f"judge returned {resp.status_code}")
            continue
        return resp
    raise TransportError(
        f"judge unreachable after {config.max_retries + 1} attempts: {last_exc}"
    )


def score(request: JudgeRequest, config: JudgeConfig) -> JudgeScore:
    """Score one request. Stub mode hashes; live mode POSTs and validates."""
    if config.stub:
        per = {c: _stub_score(request, c) for c in request.criteria}
        return JudgeScore(per, sum(per.values()) / len(per))

    if not config.endpoint:
        raise ConfigError("judge endpoint not configured (set JUDGE_ENDPOINT)")
    if not config.api_key:
        raise ConfigError("judge api key not configured (set JUDGE_API_KEY)")

    resp = _post_with_retries(canonical_request_bytes(request), config)
    if not 200 <= resp.status_code < 300:
        raise TransportError(f"judge rejected request: HTTP {resp.status_code}")
    try:
        body = resp.json()
    except ValueError as e:
        raise ProtocolError(f"judge reply is not JSON: {e}") from None
    scores = body.get("scores")
    if not isinstance(scores, dict):
        raise ProtocolError("judge reply missing 'scores' object")
    per = {}
    for criterion in request.criteria:
        if criterion not in scores:
            raise ProtocolError(f"judge reply missing criterion {criterion!r}")
        v = scores[criterion]
        if not isinstance(v, (int, float)) or not 0.0 <= float(v) <= 1.0:
            raise ProtocolError(
                f"criterion {criterion!r} score {v!r} is not a number in [0, 1]"
            )
        per[criterion] = float(v)
    raw = body.get("raw_text")
    return JudgeScore(per, sum(per.values()) / len(per),
                      raw if isinstance(raw, str) else None)


def prompt_alignment(request: JudgeRequest, config: JudgeConfig) -> float:
    """Single-criterion score of how well the response follows its prompt."""
    narrowed = JudgeRequest(
        prompt=request.prompt,
        response=request.response,
        criteria=(ALIGNMENT_CRITERION,),
        template_id=request.template_id,
    )
    return score(narrowed, config).per_criterion[ALIGNMENT_CRITERION]


def score_many(requests_: list, config: JudgeConfig,
               max_in_flight: int = 4) -> list[JudgeScore]:
    """Score a batch, at most max_in_flight requests at a time; results
    keep the input order."""
    if max_in_flight < 1:
        raise ParameterError(f"max_in_flight must be positive, got {max_in_flight}")
    if not requests_:
        return []
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(lambda r: score(r, config), requests_))
