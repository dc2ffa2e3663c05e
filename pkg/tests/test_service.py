"""Stream protocol, framing, and the threaded enqueue server."""

from __future__ import annotations

import json
import socket
import struct
import threading

import pytest

from buildbatch.batching import BatchingConfig
from buildbatch.core import (
    BatchSizeReason,
    BuildFlags,
    ContextKind,
    ExecutionContext,
    Priority,
    Target,
)
from buildbatch.estimators import ConstantEstimator, ErrorEstimator
from buildbatch.regression import ModelKind
from buildbatch.service import (
    BatchingServer,
    EmptyStream,
    EnqueueRequest,
    MAX_FRAME_BYTES,
    ProtocolViolation,
    RecordingBuildCreator,
    ServiceDeps,
    handle_stream,
    recv_frame,
    send_frame,
    stream_targets,
)

CTX = ExecutionContext(ContextKind.WORKSPACE, "w")
FLAGS = BuildFlags.from_pairs([("--keep_going", "")])


def _targets(n: int, prefix: str = "svc") -> list[Target]:
    return [Target(f"//{prefix}/pkg{i // 20:03d}:t{i % 20:03d}") for i in range(n)]


def _deps() -> tuple[ServiceDeps, RecordingBuildCreator]:
    creator = RecordingBuildCreator()
    deps = ServiceDeps(
        batch_cfg=BatchingConfig(),
        mem_est=ConstantEstimator(ModelKind.MEMORY),
        occ_est=ConstantEstimator(ModelKind.OCCUPANCY),
        build_creator=creator,
    )
    return deps, creator


def _first(targets, priority=None) -> EnqueueRequest:
    return EnqueueRequest(
        targets=tuple(targets), context=CTX, flags=FLAGS, priority=priority
    )


def test_single_message_stream_creates_one_build():
    deps, creator = _deps()
    responses = handle_stream([_first(_targets(2))], deps)
    assert len(responses) == 1
    assert len(creator.builds) == 1
    build = creator.builds[0]
    assert build.id == responses[0].build_request_id
    assert len(build.targets) == 2
    assert build.priority is Priority.MEDIUM
    assert build.reason is BatchSizeReason.ALL_REMAINING_TARGETS


def test_multi_message_stream_batches_at_cap():
    deps, creator = _deps()
    ts = _targets(2500)
    reqs = [_first(ts[:1000]), EnqueueRequest(targets=tuple(ts[1000:2000])),
            EnqueueRequest(targets=tuple(ts[2000:]))]
    responses = handle_stream(reqs, deps)
    assert [len(b.targets) for b in creator.builds] == [900, 900, 700]
    assert len(responses) == 3
    flat = [t for b in creator.builds for t in b.targets]
    assert flat == sorted(ts, key=lambda t: t.label.encode())


def test_first_message_must_carry_context_and_flags():
    deps, _ = _deps()
    with pytest.raises(ProtocolViolation):
        handle_stream([EnqueueRequest(targets=tuple(_targets(1)), flags=FLAGS)], deps)
    with pytest.raises(ProtocolViolation):
        handle_stream([EnqueueRequest(targets=tuple(_targets(1)), context=CTX)], deps)


@pytest.mark.parametrize(
    "late",
    [
        EnqueueRequest(context=CTX),
        EnqueueRequest(flags=FLAGS),
        EnqueueRequest(priority=Priority.LOW),
    ],
)
def test_metadata_after_first_message_is_rejected(late):
    deps, _ = _deps()
    with pytest.raises(ProtocolViolation):
        handle_stream([_first(_targets(1)), late], deps)


def test_empty_streams_are_rejected():
    deps, _ = _deps()
    with pytest.raises(EmptyStream):
        handle_stream([], deps)
    with pytest.raises(EmptyStream):
        handle_stream([_first([]), EnqueueRequest()], deps)


def test_priority_from_first_message_reaches_builds():
    deps, creator = _deps()
    handle_stream([_first(_targets(3), priority=Priority.HIGH)], deps)
    assert creator.builds[0].priority is Priority.HIGH


def test_duplicate_targets_collapse():
    deps, creator = _deps()
    ts = _targets(4)
    handle_stream([_first(ts), EnqueueRequest(targets=tuple(ts[:2]))], deps)
    assert [len(b.targets) for b in creator.builds] == [4]


def test_mixed_executor_types_split_into_builds():
    deps, creator = _deps()
    gpu = Target("//svc/pkg000:gpu0", tags=frozenset({"requires-gpu"}))
    ts = _targets(5) + [gpu]
    responses = handle_stream([_first(ts)], deps)
    assert len(responses) == 2
    sizes = sorted(len(b.targets) for b in creator.builds)
    assert sizes == [1, 5]
    gpu_build = next(b for b in creator.builds if len(b.targets) == 1)
    assert gpu_build.targets[0] == gpu


def test_enqueue_request_json_round_trip():
    req = _first(_targets(2), priority=Priority.LOW)
    assert EnqueueRequest.from_json_obj(req.to_json_obj()) == req
    bare = EnqueueRequest(targets=tuple(_targets(1)))
    assert EnqueueRequest.from_json_obj(bare.to_json_obj()) == bare
    with pytest.raises(ProtocolViolation):
        EnqueueRequest.from_json_obj({"type": "bogus"})


def test_recording_creator_ids_are_deterministic():
    a = RecordingBuildCreator()
    b = RecordingBuildCreator()
    ts = _targets(6)
    id_a1 = a(ts[:3], CTX, FLAGS, Priority.MEDIUM, BatchSizeReason.MAX_MEMORY)
    id_a2 = a(ts[3:], CTX, FLAGS, Priority.MEDIUM, BatchSizeReason.MAX_MEMORY)
    assert id_a1 != id_a2
    assert b(ts[:3], CTX, FLAGS, Priority.MEDIUM, BatchSizeReason.MAX_MEMORY) == id_a1
    assert b(ts[3:], CTX, FLAGS, Priority.MEDIUM, BatchSizeReason.MAX_MEMORY) == id_a2
    with pytest.raises(ValueError):
        a([], CTX, FLAGS, Priority.MEDIUM, BatchSizeReason.MAX_MEMORY)


def test_frame_round_trip_over_socketpair():
    a, b = socket.socketpair()
    try:
        obj = {"type": "enqueue", "targets": [], "n": 3}
        send_frame(a, obj)
        assert recv_frame(b) == obj
    finally:
        a.close()
        b.close()


def test_oversized_frame_header_is_rejected():
    a, b = socket.socketpair()
    try:
        a.sendall(struct.pack(">I", MAX_FRAME_BYTES + 1))
        with pytest.raises(ProtocolViolation):
            recv_frame(b)
    finally:
        a.close()
        b.close()


def test_stream_closed_mid_frame_is_a_violation():
    a, b = socket.socketpair()
    try:
        a.sendall(struct.pack(">I", 10) + b"abc")
        a.close()
        with pytest.raises(ProtocolViolation):
            recv_frame(b)
    finally:
        b.close()


def test_clean_eof_reads_as_none():
    a, b = socket.socketpair()
    try:
        a.close()
        assert recv_frame(b) is None
    finally:
        b.close()


@pytest.fixture
def server():
    deps, creator = _deps()
    srv = BatchingServer("127.0.0.1", 0, deps)
    srv.start()
    yield srv, creator
    srv.shutdown()


def test_server_streams_build_ids_back(server):
    srv, creator = server
    ts = _targets(50)
    frames = stream_targets(srv.address, CTX, FLAGS, [ts[:30], ts[30:]])
    assert [f["type"] for f in frames] == ["response"]
    assert frames[0]["build_request_id"] == creator.builds[0].id
    assert set(frames[0]) == {"type", "build_request_id"}
    assert len(creator.builds[0].targets) == 50


def test_server_reports_empty_stream(server):
    srv, _ = server
    frames = stream_targets(srv.address, CTX, FLAGS, [[]])
    assert frames == [
        {"type": "error", "code": "empty_stream", "message": "stream closed with zero targets"}
    ]


def _raw_exchange(address, payloads: list[bytes]) -> list[dict]:
    with socket.create_connection(address, timeout=10.0) as sock:
        for p in payloads:
            sock.sendall(p)
        sock.shutdown(socket.SHUT_WR)
        frames = []
        while True:
            obj = recv_frame(sock)
            if obj is None:
                return frames
            frames.append(obj)


def _frame_bytes(obj: dict) -> bytes:
    data = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack(">I", len(data)) + data


def test_server_error_codes(server):
    srv, _ = server
    # Missing context/flags in the first frame.
    frames = _raw_exchange(
        srv.address, [_frame_bytes({"type": "enqueue", "targets": []})]
    )
    assert frames[0]["code"] == "protocol_violation"

    # Frame body that is not JSON.
    frames = _raw_exchange(srv.address, [struct.pack(">I", 3) + b"{{{"])
    assert frames[0]["code"] == "bad_request"

    # Unknown frame type.
    frames = _raw_exchange(srv.address, [_frame_bytes({"type": "bogus"})])
    assert frames[0]["code"] == "protocol_violation"

    # Length prefix above the frame limit.
    frames = _raw_exchange(srv.address, [struct.pack(">I", MAX_FRAME_BYTES + 1)])
    assert frames[0]["code"] == "protocol_violation"


def test_concurrent_streams_are_isolated(server):
    srv, creator = server
    results: dict[str, list[dict]] = {}

    def run(name: str, prefix: str):
        results[name] = stream_targets(srv.address, CTX, FLAGS, [_targets(8, prefix)])

    threads = [
        threading.Thread(target=run, args=("a", "alpha")),
        threading.Thread(target=run, args=("b", "beta")),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=10)
    assert len(results["a"]) == 1 and len(results["b"]) == 1
    ids = {results["a"][0]["build_request_id"], results["b"][0]["build_request_id"]}
    assert len(ids) == 2
    assert {len(b.targets) for b in creator.builds} == {8}


def test_fallback_batching_applies_over_the_wire():
    creator = RecordingBuildCreator()
    deps = ServiceDeps(
        batch_cfg=BatchingConfig(),
        mem_est=ErrorEstimator(ModelKind.MEMORY),
        occ_est=ConstantEstimator(ModelKind.OCCUPANCY),
        build_creator=creator,
    )
    srv = BatchingServer("127.0.0.1", 0, deps)
    srv.start()
    try:
        frames = stream_targets(srv.address, CTX, FLAGS, [_targets(700)])
        assert [f["type"] for f in frames] == ["response"] * 3
        assert [len(b.targets) for b in creator.builds] == [300, 300, 100]
        assert all(
            b.reason is BatchSizeReason.MEMORY_ESTIMATE_ERROR for b in creator.builds
        )
    finally:
        srv.shutdown()
