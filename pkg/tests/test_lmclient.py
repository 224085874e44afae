import json
import math

import pytest

from propinherit import behave as B
from propinherit import lmclient as C
from propinherit import nanolm as N
from propinherit import stimuli as S

FAST = C.RetryPolicy(max_retries=2, backoff_base=0.0, timeout=5.0)


@pytest.fixture(scope="module")
def planted():
    world = N.planted_world()
    return world, N.build_planted_model(world), S.build_evaluation_sets(world, sorted(world.spaces)[0])


def test_shape_contract():
    table = {"p": {"Yes": -0.1, " Yes": -2.0, "No": -3.0, " No": -4.0}}
    with C.LoopbackServer(C.table_handler(table)) as srv:
        r = C.score(srv.endpoint, C.ScoreRequest("p", C.DEFAULT_VARIANTS), FAST)
    assert r.logprobs == (-0.1, -2.0, -3.0, -4.0) and r.model == "scripted" and r.latency >= 0


def test_positive_logprob_is_a_protocol_error():
    with C.LoopbackServer(C.table_handler({"p": {"Yes": 0.1, "No": -1.0}})) as srv:
        with pytest.raises(C.ProtocolError, match="positive"):
            C.score(srv.endpoint, C.ScoreRequest("p", ("Yes", "No")), FAST)
        assert srv.requests == 1  # not retried


@pytest.mark.parametrize("raw, msg", [
    (b"<html>", "not JSON"),
    (b'{"logprobs": [-1.0]}', "'model'"),
    (b'{"logprobs": [-1.0], "model": "m"}', "expected 2"),
    (b'{"logprobs": ["x", -1.0], "model": "m"}', "not a number"),
])
def test_malformed_responses(raw, msg):
    with pytest.raises(C.ProtocolError, match=msg):
        C.ScoreResponse.parse(raw, 2)


def test_transient_failures_are_retried_once_each():
    table = {"p": {"Yes": -0.5, "No": -1.0}}
    delays = []
    with C.LoopbackServer(C.table_handler(table), faults=[503, 502]) as srv:
        r = C.score(srv.endpoint, C.ScoreRequest("p", ("Yes", "No")),
                    C.RetryPolicy(max_retries=3, backoff_base=0.01), sleep=delays.append)
        assert srv.requests == 3
    assert r.logprobs == (-0.5, -1.0)
    assert delays == [0.01, 0.02]


def test_retries_give_up():
    with C.LoopbackServer(C.table_handler({}), faults=[500] * 5) as srv:
        with pytest.raises(C.TransientError, match="3 attempts"):
            C.score(srv.endpoint, C.ScoreRequest("p", ("Yes",)), FAST, sleep=lambda s: None)
        assert srv.requests == 3


def test_client_errors_are_permanent():
    with C.LoopbackServer(C.table_handler({})) as srv:
        with pytest.raises(C.PermanentHTTPError) as info:
            C.score(srv.endpoint, C.ScoreRequest("unknown", ("Yes",)), FAST)
        assert info.value.status == 404 and srv.requests == 1


def test_unreachable_endpoint_is_transient():
    srv = C.LoopbackServer(C.table_handler({}))
    endpoint = srv.endpoint
    srv._server.server_close()
    with pytest.raises(C.TransientError):
        C.score(endpoint, C.ScoreRequest("p", ("Yes",)), C.RetryPolicy(max_retries=1, backoff_base=0.0, timeout=1.0))


def test_scripted_distribution_matches_local_p_rel():
    probs = {"Yes": 0.3, " Yes": 0.4, "No": 0.2, " No": 0.05}
    table = {"p": {k: math.log(v) for k, v in probs.items()}}
    with C.LoopbackServer(C.table_handler(table)) as srv:
        lp = C.RemoteScorer(srv.endpoint, FAST)(["p"], C.DEFAULT_VARIANTS)[0]
    got = B.p_rel_yes({k: math.exp(v) for k, v in lp.items()}, ("Yes", " Yes"), ("No", " No"))
    assert got == pytest.approx(0.4 / 0.6, abs=1e-15)


def test_results_keep_prompt_order_under_concurrency():
    table = {f"p{i}": {"Yes": -float(i + 1), "No": -1.0} for i in range(20)}
    with C.LoopbackServer(C.table_handler(table)) as srv:
        out = C.RemoteScorer(srv.endpoint, FAST, max_in_flight=8)([f"p{i}" for i in range(20)], ["Yes", "No"])
    assert [o["Yes"] for o in out] == [-float(i + 1) for i in range(20)]


def test_env_config():
    def handler(prompt, conts):
        return 200, {"logprobs": [-1.0] * len(conts), "model": "m"}

    with C.LoopbackServer(handler) as srv:
        env = {"PROPINHERIT_ENDPOINT": srv.endpoint, "PROPINHERIT_TOKEN": "t0k",
               "PROPINHERIT_MAX_RETRIES": "0", "PROPINHERIT_TIMEOUT": "2"}
        sc = C.RemoteScorer.from_env(env=env)
        assert sc.token == "t0k" and sc.policy.max_retries == 0 and sc.policy.timeout == 2.0
        assert sc(["x"], ["Yes"]) == [{"Yes": -1.0}] and sc.model_id == "m"
    with pytest.raises(C.LMClientError):
        C.RemoteScorer.from_env(env={})


def test_loopback_model_reproduces_in_process_report(planted):
    world, model, sets = planted
    local = B.evaluate(sets, B.model_scorer(model), model="planted")
    with C.LoopbackServer(C.model_handler(model)) as srv:
        remote = B.evaluate(sets, C.RemoteScorer(srv.endpoint, FAST), model="planted",
                            yes_variants=("Yes", " Yes"), no_variants=("No", " No"))
    assert json.dumps(local.report.to_json(), sort_keys=True) == json.dumps(remote.report.to_json(), sort_keys=True)
    for name in local.records:
        assert [r.p_rel_yes for r in local.records[name]] == [r.p_rel_yes for r in remote.records[name]]


def test_model_handler_rejects_unknown_continuation(planted):
    _, model, sets = planted
    with C.LoopbackServer(C.model_handler(model)) as srv:
        with pytest.raises(C.PermanentHTTPError):
            C.score(srv.endpoint, C.ScoreRequest(sets.ts[0].text, ("Maybe",)), FAST)
