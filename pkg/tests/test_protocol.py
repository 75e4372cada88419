import socket

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from passorder.actions import Invocation
from passorder.exceptions import ProtocolError
from passorder.protocol import KINDS, Message, Task, TaskResult, decode, encode, recv, send

json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.floats(allow_nan=False) | st.text(),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=5), inner, max_size=4),
    max_leaves=10,
)
keys = st.text(st.characters(blacklist_characters="=\n\r", blacklist_categories=("Cs",)),
               min_size=1, max_size=12).filter(lambda k: k not in ("kind", "version"))


@settings(deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.filter_too_much])
@given(st.sampled_from(KINDS), st.dictionaries(keys, json_values, max_size=6))
def test_round_trip(kind, payload):
    msg = Message(kind, payload)
    assert decode(encode(msg)) == msg


def test_unknown_kind_rejected():
    with pytest.raises(ProtocolError):
        decode(b'kind="gossip"\nversion=1\n')
    with pytest.raises(ProtocolError):
        encode(Message("gossip"))


def test_malformed_frames():
    for bad in (b"kind\n", b'kind="hello"\n', b'kind="hello"\nversion=1\nx={\n', b"\xff"):
        with pytest.raises(ProtocolError):
            decode(bad)


def test_frames_over_socket():
    a, b = socket.socketpair()
    with a, b:
        send(a, Message("task_request", {"worker_id": "w1", "ir": "line1\nline2"}))
        send(a, Message("heartbeat"))
        assert recv(b) == Message("task_request", {"worker_id": "w1", "ir": "line1\nline2"})
        assert recv(b).kind == "heartbeat"
        a.close()
        assert recv(b) is None


def test_task_payload_round_trip():
    inv = Invocation(("licm",), (("licm", "disable-licm-promotion", "false"),))
    t = Task("t1", "transition", "p", "fp", 3, "ir", Task.pack_invocation(inv), {"min_reps": 1})
    payload = t.to_payload("1,2,3")
    assert payload["ir_body"] == "1,2,3"
    back = Task.from_payload(decode(encode(Message("task", {"task": payload}))).payload["task"])
    assert back == t and back.get_invocation() == inv


def test_result_payload_round_trip():
    r = TaskResult("t1", "ok", "w", ir_body="1,2", runtime=0.5)
    assert TaskResult.from_payload(r.to_payload()) == r
