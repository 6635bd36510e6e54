"""Reward scoring shared by the offline ``score`` command and the HTTP service.

Request body (one JSON object)::

    {"context": {"query": [...], "docs": [{"id": 0, "tokens": [...], "supporting": true}]},
     "rollouts": [[...], ...],
     "answer": [...],
     "config": {"clr": {...}, "rules": {...}},          # optional, merged over the engine defaults
     "profiles": [{"full": [...], "loo": {"0": [...]}}],  # optional, one per rollout
     "return_eps": false}                                # optional

Response body::

    {"engine_version": "...", "config": {"clr": {...}, "rules": {...}},
     "bundles": [{"r_clr_raw": ..., "r_clr_norm": ..., "r_acc": ..., "r_cite": ...,
                  "r_hybrid": ..., "r_total": ...}, ...],
     "eps": [[...], ...], "critical_docs": [...]}        # only with return_eps

Floats are written with Python's shortest round-trip representation, so a
parsed response reproduces the computed values exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import __version__
from .clr import ClrConfig, LikelihoodProfile, score_group
from .data import (ConfigurationError, InvalidTokenError, RagContext, Rollout, Vocabulary,
                   check_tokens)
from .policy import FORMAT_VERSION, PolicyParameters
from .rules import RuleConfig

log = logging.getLogger(__name__)

ENGINE_VERSION = f"clrlab/{__version__} checkpoint-format/{FORMAT_VERSION}"
MAX_BODY = 16 * 1024 * 1024
_REQUEST_KEYS = {"context", "rollouts", "answer", "config", "profiles", "return_eps"}


class RequestError(ValueError):
    """The request body is malformed or violates a precondition."""


_CLIENT_ERRORS = (RequestError, ConfigurationError, InvalidTokenError)


@dataclass
class ScoreRequest:
    context: RagContext
    rollouts: list[Rollout]
    answer: tuple[int, ...]
    clr: ClrConfig
    rules: RuleConfig
    profiles: list[LikelihoodProfile] | None = None
    return_eps: bool = False

    @classmethod
    def from_dict(cls, obj, vocab: Vocabulary, base_clr: ClrConfig = ClrConfig(),
                  base_rules: RuleConfig = RuleConfig()) -> "ScoreRequest":
        if not isinstance(obj, dict):
            raise RequestError("request must be a JSON object")
        unknown = set(obj) - _REQUEST_KEYS
        if unknown:
            raise RequestError(f"unknown request fields {sorted(unknown)}")
        for key in ("context", "rollouts", "answer"):
            if key not in obj:
                raise RequestError(f"missing field {key!r}")
        try:
            context = RagContext.from_dict(obj["context"])
            rollouts = [Rollout.of(_int_list(y, "rollout")) for y in obj["rollouts"]]
            answer = tuple(_int_list(obj["answer"], "answer"))
            cfg = obj.get("config") or {}
            clr = ClrConfig(**{**asdict(base_clr), **cfg.get("clr", {})})
            rules = RuleConfig(**{**asdict(base_rules), **cfg.get("rules", {})})
            profiles = None
            if obj.get("profiles") is not None:
                profiles = [LikelihoodProfile(p["full"], {int(k): v for k, v in p["loo"].items()})
                            for p in obj["profiles"]]
        except (KeyError, TypeError, AttributeError) as exc:
            raise RequestError(f"malformed request: {exc!r}") from None
        if not rollouts:
            raise RequestError("request needs at least one rollout")
        if not answer:
            raise RequestError("answer must be non-empty")
        check_tokens(context.all_tokens(), vocab.size, "context token")
        for y in rollouts:
            check_tokens(y.tokens, vocab.size, "rollout token")
        if len(context.documents) > vocab.max_docs:
            raise RequestError(
                f"{len(context.documents)} documents exceed the {vocab.max_docs} citation markers")
        return cls(context, rollouts, answer, clr, rules, profiles,
                   bool(obj.get("return_eps", False)))


def _int_list(seq, what: str) -> list[int]:
    if not isinstance(seq, list) or not all(isinstance(t, int) and not isinstance(t, bool)
                                            for t in seq):
        raise RequestError(f"{what} must be a list of integer token ids")
    return seq


def dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def error_payload(exc: Exception) -> dict:
    kind = "bad_request" if isinstance(exc, _CLIENT_ERRORS) else "internal"
    return {"error": {"type": kind, "class": type(exc).__name__, "message": str(exc)}}


@dataclass
class ScoringEngine:
    """Immutable policy snapshot plus default reward configuration."""

    params: PolicyParameters
    vocab: Vocabulary
    clr: ClrConfig = field(default_factory=ClrConfig)
    rules: RuleConfig = field(default_factory=RuleConfig)

    def __post_init__(self):
        if self.vocab.size != self.params.V:
            raise ConfigurationError(
                f"vocabulary size {self.vocab.size} does not match checkpoint V={self.params.V}")

    def parse(self, obj) -> ScoreRequest:
        return ScoreRequest.from_dict(obj, self.vocab, self.clr, self.rules)

    def score(self, req: ScoreRequest) -> dict:
        bundles = score_group(self.params, req.context, req.rollouts, req.clr, req.answer,
                              self.vocab, req.rules, profiles=req.profiles)
        resp = {"engine_version": ENGINE_VERSION,
                "config": {"clr": asdict(req.clr), "rules": asdict(req.rules)},
                "bundles": [b.to_dict(with_advantage=False) for b in bundles]}
        if req.return_eps:
            scores = [b.extras["score"] for b in bundles]
            resp["eps"] = [s.eps.tolist() for s in scores]
            resp["critical_docs"] = [s.critical_doc for s in scores]
        return resp

    def score_text(self, text: str) -> str:
        """Parse and score one request body; errors propagate to the caller."""
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise RequestError(f"invalid JSON: {exc}") from None
        return dumps(self.score(self.parse(obj)))


class _Handler(BaseHTTPRequestHandler):
    engine: ScoringEngine
    server_version = "clrlab"

    def _send(self, status: int, body: dict | str) -> None:
        data = (body if isinstance(body, str) else dumps(body)).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        if self.path == "/health":
            self._send(HTTPStatus.OK, {"status": "ok", "engine_version": ENGINE_VERSION})
        else:
            self._send(HTTPStatus.NOT_FOUND, {"error": {"type": "not_found", "message": self.path}})

    def do_POST(self):
        if self.path != "/score":
            self._send(HTTPStatus.NOT_FOUND, {"error": {"type": "not_found", "message": self.path}})
            return
        try:
            length = int(self.headers.get("Content-Length", ""))
        except ValueError:
            self._send(HTTPStatus.LENGTH_REQUIRED,
                       {"error": {"type": "bad_request", "message": "Content-Length required"}})
            return
        if not 0 <= length <= MAX_BODY:
            self._send(HTTPStatus.REQUEST_ENTITY_TOO_LARGE,
                       {"error": {"type": "bad_request", "message": "body too large"}})
            return
        body = self.rfile.read(length)
        try:
            out = self.engine.score_text(body.decode("utf-8"))
        except (*_CLIENT_ERRORS, UnicodeDecodeError) as exc:
            self._send(HTTPStatus.BAD_REQUEST, error_payload(RequestError(str(exc))))
            return
        except Exception as exc:  # no partial bundles on internal failure
            log.exception("scoring failed")
            self._send(HTTPStatus.INTERNAL_SERVER_ERROR, error_payload(exc))
            return
        self._send(HTTPStatus.OK, out)

    def log_message(self, fmt, *args):
        log.info("%s - %s", self.address_string(), fmt % args)


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 128  # the stdlib default backlog of 5 resets bursts of clients


def make_server(engine: ScoringEngine, host: str = "127.0.0.1", port: int = 8000) -> ThreadingHTTPServer:
    """Build (but do not start) a threaded server; ``port=0`` picks a free port."""
    handler = type("Handler", (_Handler,), {"engine": engine})
    return _Server((host, port), handler)
