import http.client
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import pytest

from clrlab import __version__
from clrlab.clr import ClrConfig
from clrlab.data import ConfigurationError, Vocabulary
from clrlab.policy import load_checkpoint
from clrlab.rules import RuleConfig
from clrlab.service import (ENGINE_VERSION, RequestError, ScoreRequest, ScoringEngine,
                            error_payload, make_server)
import oracle

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="module")
def engine():
    params = load_checkpoint(GOLDEN / "checkpoint.json")
    return ScoringEngine(params, Vocabulary(params.V, 4))


@pytest.fixture(scope="module")
def batch():
    return (GOLDEN / "batch.jsonl").read_text().splitlines()


@pytest.fixture(scope="module")
def server(engine):
    srv = make_server(engine, "127.0.0.1", 0)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield srv.server_address[:2]
    srv.shutdown()
    srv.server_close()


def request(addr, method, path, body: bytes | None = None, headers=None):
    conn = http.client.HTTPConnection(*addr, timeout=60)
    try:
        conn.request(method, path, body=body, headers=headers or {})
        resp = conn.getresponse()
        return resp.status, resp.read().decode()
    finally:
        conn.close()


class TestScoreRequest:
    def _good(self, batch):
        return json.loads(batch[0])

    def test_parses_golden(self, engine, batch):
        req = engine.parse(self._good(batch))
        assert len(req.rollouts) == 6 and req.profiles is None and not req.return_eps

    def test_config_merges_over_defaults(self, batch):
        obj = json.loads(batch[1])
        req = ScoreRequest.from_dict(obj, Vocabulary(32, 4), ClrConfig(norm_epsilon=1e-6))
        assert req.clr == ClrConfig(tau=0.5, loo_mode="avg", norm_epsilon=1e-6)

    @pytest.mark.parametrize("mutate", [
        lambda o: o.pop("answer"),
        lambda o: o.update(extra=1),
        lambda o: o.update(rollouts=[]),
        lambda o: o.update(answer=[]),
        lambda o: o.update(rollouts=[[8, True]]),
        lambda o: o.update(rollouts=[[8, 2.0]]),
        lambda o: o.update(config={"clr": {"loo_mode": "max"}}),
        lambda o: o.update(config={"clr": {"bogus": 1}}),
        lambda o: o.update(profiles=[{"full": [0.0]}]),
    ])
    def test_rejects(self, engine, batch, mutate):
        obj = self._good(batch)
        mutate(obj)
        with pytest.raises((RequestError, ConfigurationError)):
            engine.parse(obj)

    def test_token_out_of_range(self, engine, batch):
        obj = self._good(batch)
        obj["rollouts"] = [[32]]
        with pytest.raises(Exception) as info:
            engine.parse(obj)
        assert error_payload(info.value)["error"]["type"] == "bad_request"

    def test_too_many_documents(self, batch):
        obj = self._good(batch)
        with pytest.raises(RequestError):
            ScoreRequest.from_dict(obj, Vocabulary(32, 3))

    def test_profile_count_mismatch(self, engine, batch):
        obj = json.loads(batch[-1])
        obj["profiles"] = obj["profiles"][:1]
        with pytest.raises(ConfigurationError):
            engine.score(engine.parse(obj))

    def test_vocab_must_match_checkpoint(self, engine):
        with pytest.raises(ConfigurationError):
            ScoringEngine(engine.params, Vocabulary(40, 4))


class TestEngine:
    def test_bundle_count_and_fields(self, engine, batch):
        for line in batch:
            resp = json.loads(engine.score_text(line))
            assert len(resp["bundles"]) == len(json.loads(line)["rollouts"])
            assert all("advantage" not in b for b in resp["bundles"])
            assert resp["engine_version"] == ENGINE_VERSION

    def test_matches_oracle(self, engine, batch):
        for line in batch:
            req = json.loads(line)
            resp = json.loads(engine.score_text(line))
            want, extra = oracle.score_request(engine.params, req, asdict(engine.clr),
                                               asdict(engine.rules))
            for w, got in zip(want, resp["bundles"]):
                for k, v in w.items():
                    assert got[k] == pytest.approx(v, rel=1e-12, abs=1e-12)
            if req.get("return_eps"):
                assert resp["critical_docs"] == [c for _, c in extra]

    def test_config_echo(self, engine, batch):
        resp = json.loads(engine.score_text(batch[2]))
        assert resp["config"]["clr"]["fusion"] == "add"
        assert resp["config"]["rules"] == asdict(RuleConfig(eta=0.01))

    def test_invalid_json(self, engine):
        with pytest.raises(RequestError):
            engine.score_text("{")

    def test_golden_bytes(self, engine, batch):
        expected = (GOLDEN / "expected_output.jsonl").read_text().splitlines()
        assert [engine.score_text(line) for line in batch] == expected


class TestHttp:
    def test_health(self, server):
        status, body = request(server, "GET", "/health")
        assert status == 200
        doc = json.loads(body)
        assert doc == {"status": "ok", "engine_version": ENGINE_VERSION}
        assert __version__ in doc["engine_version"]

    def test_golden_over_http(self, server, batch):
        expected = (GOLDEN / "expected_output.jsonl").read_text().splitlines()
        for line, want in zip(batch, expected):
            status, body = request(server, "POST", "/score", line.encode())
            assert status == 200 and body == want

    def test_offline_online_equivalence(self, server, engine, batch):
        for line in batch:
            obj = json.loads(line)
            obj["return_eps"] = True
            text = json.dumps(obj)
            status, body = request(server, "POST", "/score", text.encode())
            assert status == 200 and body == engine.score_text(text)

    def test_concurrent_identical_requests(self, server, batch):
        body = batch[0].encode()
        with ThreadPoolExecutor(max_workers=64) as pool:
            results = list(pool.map(lambda _: request(server, "POST", "/score", body), range(64)))
        assert len(results) == 64
        assert {r for r in results} == {(200, results[0][1])}
        sequential = request(server, "POST", "/score", body)
        assert results[0] == sequential

    @pytest.mark.parametrize("body", [b"{", b"[]", b'{"context": 1}', b"\xff\xfe",
                                      b'{"context": {"query": [], "docs": []}, '
                                      b'"rollouts": [[1]], "answer": [9]}'])
    def test_malformed_bodies_are_4xx(self, server, body):
        status, text = request(server, "POST", "/score", body)
        assert 400 <= status < 500
        err = json.loads(text)["error"]
        assert err["type"] == "bad_request" and err["message"]
        assert "bundles" not in json.loads(text)

    def test_missing_content_length(self, server):
        conn = http.client.HTTPConnection(*server, timeout=30)
        conn.putrequest("POST", "/score")
        conn.endheaders()
        resp = conn.getresponse()
        assert resp.status == 411
        conn.close()

    def test_unknown_path(self, server):
        assert request(server, "GET", "/nope")[0] == 404
        assert request(server, "POST", "/nope", b"{}")[0] == 404

    def test_internal_failure_is_5xx_without_bundles(self, engine, batch):
        class Broken(ScoringEngine):
            def score(self, req):
                raise RuntimeError("scorer exploded")

        srv = make_server(Broken(engine.params, engine.vocab), "127.0.0.1", 0)
        t = threading.Thread(target=srv.serve_forever, daemon=True)
        t.start()
        try:
            status, text = request(srv.server_address[:2], "POST", "/score", batch[0].encode())
        finally:
            srv.shutdown()
            srv.server_close()
        assert 500 <= status < 600
        doc = json.loads(text)
        assert doc["error"]["type"] == "internal" and "bundles" not in doc
