"""Streaming enqueue front-end.

A client opens a stream and sends targets in as many messages as it
likes. The first message must carry the execution context and build
flags (and may carry a priority); later messages may carry only
targets. Once the client closes its side, the accumulated targets are
grouped by executor type, batched against the estimators, and one
build is created per batch; the stream of created build IDs flows back
in creation order.

Wire protocol (documented bit-exactly, see README): each frame is a
4-byte big-endian length followed by that many bytes of JSON encoded
with sorted keys and no whitespace. Client frames:

    {"type": "enqueue", "context": {...}, "flags": [[k, v], ...],
     "priority": "medium", "targets": [{...}, ...]}

where context/flags/priority appear only in the first frame and
priority is optional (defaults to medium). Server frames are either

    {"type": "response", "build_request_id": "<uuid>"}

one per created build, or a single terminal

    {"type": "error", "code": "...", "message": "..."}
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading
import uuid
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from .batching import BatchingConfig, Estimator, batch_targets
from .core import (
    BatchSizeReason,
    Build,
    BuildFlags,
    ExecutionContext,
    Priority,
    Target,
    target_from_json_obj,
)
from .grouping import DEFAULT_RULES, InferenceRule, group_and_sort

MAX_FRAME_BYTES = 64 * 1024 * 1024

_BUILD_ID_NAMESPACE = uuid.uuid5(uuid.NAMESPACE_URL, "buildbatch.service")


class ProtocolViolation(Exception):
    """The request stream broke the first-message/later-message contract."""


class EmptyStream(Exception):
    """The stream closed without enqueueing any target."""


class BackendUnavailable(Exception):
    """The build backend refused to register a build."""


@dataclass(frozen=True)
class EnqueueRequest:
    targets: tuple[Target, ...] = ()
    context: Optional[ExecutionContext] = None
    flags: Optional[BuildFlags] = None
    priority: Optional[Priority] = None

    def to_json_obj(self) -> dict:
        obj: dict = {"type": "enqueue", "targets": [t.to_json_obj() for t in self.targets]}
        if self.context is not None:
            obj["context"] = self.context.to_json_obj()
        if self.flags is not None:
            obj["flags"] = self.flags.to_json_obj()
        if self.priority is not None:
            obj["priority"] = self.priority.value
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "EnqueueRequest":
        if obj.get("type") != "enqueue":
            raise ProtocolViolation(f"expected an enqueue frame, got {obj.get('type')!r}")
        return cls(
            targets=tuple(target_from_json_obj(t) for t in obj.get("targets", [])),
            context=(
                ExecutionContext.from_json_obj(obj["context"]) if "context" in obj else None
            ),
            flags=BuildFlags.from_json_obj(obj["flags"]) if "flags" in obj else None,
            priority=Priority(obj["priority"]) if "priority" in obj else None,
        )


@dataclass(frozen=True)
class EnqueueResponse:
    build_request_id: str

    def to_json_obj(self) -> dict:
        return {"type": "response", "build_request_id": self.build_request_id}


BuildCreator = Callable[..., str]


@dataclass
class RecordingBuildCreator:
    """Registers builds in memory and mints deterministic UUID ids.

    IDs are uuid5 over the creation sequence number and batch identity,
    so a fresh service given the same streams produces byte-identical
    responses.
    """

    builds: list[Build] = field(default_factory=list)
    _counter: int = 0

    def __call__(
        self,
        batch: Sequence[Target],
        context: ExecutionContext,
        flags: BuildFlags,
        priority: Priority,
        reason: BatchSizeReason,
    ) -> str:
        if not batch:
            raise ValueError("cannot create a build with no targets")
        self._counter += 1
        name = f"{self._counter}|{reason.value}|{len(batch)}|{batch[0].label}|{batch[-1].label}"
        build_id = str(uuid.uuid5(_BUILD_ID_NAMESPACE, name))
        self.builds.append(
            Build(
                id=build_id,
                context=context,
                flags=flags,
                targets=tuple(batch),
                reason=reason,
                priority=priority,
            )
        )
        return build_id


@dataclass
class ServiceDeps:
    """Everything a stream needs: batching config, estimators, build sink."""

    batch_cfg: BatchingConfig
    mem_est: Estimator
    occ_est: Estimator
    build_creator: BuildCreator
    rules: Sequence[InferenceRule] = DEFAULT_RULES


def handle_stream(
    requests: Iterable[EnqueueRequest], deps: ServiceDeps
) -> list[EnqueueResponse]:
    """Validate a request stream, then batch and create builds.

    Pure protocol core shared by the socket server and in-process
    callers. Consumes the whole stream before emitting anything:
    lexicographic grouping needs the complete target set.
    """
    context: Optional[ExecutionContext] = None
    flags: Optional[BuildFlags] = None
    priority = Priority.MEDIUM
    collected: list[Target] = []
    first = True
    for req in requests:
        if first:
            if req.context is None or req.flags is None:
                raise ProtocolViolation("first message must carry context and flags")
            context = req.context
            flags = req.flags
            if req.priority is not None:
                priority = req.priority
            first = False
        else:
            if req.context is not None or req.flags is not None or req.priority is not None:
                raise ProtocolViolation(
                    "context, flags and priority may only appear in the first message"
                )
        collected.extend(req.targets)
    if first:
        raise EmptyStream("stream closed before any message")
    if not collected:
        raise EmptyStream("stream closed with zero targets")
    assert context is not None and flags is not None

    responses: list[EnqueueResponse] = []
    for _, group in group_and_sort(collected, deps.rules).items():
        for batch, reason in batch_targets(
            group, deps.batch_cfg, deps.mem_est, deps.occ_est, context, flags, priority
        ):
            build_id = deps.build_creator(batch, context, flags, priority, reason)
            responses.append(EnqueueResponse(build_request_id=build_id))
    return responses


def encode_frame(obj: dict) -> bytes:
    data = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(data)) + data


def send_frame(sock: socket.socket, obj: dict) -> None:
    sock.sendall(encode_frame(obj))


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            return None
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> Optional[dict]:
    """One length-delimited JSON frame, or None on clean end of stream."""
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise ProtocolViolation(f"frame of {length} bytes exceeds the limit")
    body = _recv_exact(sock, length)
    if body is None:
        raise ProtocolViolation("stream closed mid-frame")
    return json.loads(body.decode("utf-8"))


class _StreamHandler(socketserver.BaseRequestHandler):
    def handle(self):
        deps: ServiceDeps = self.server.deps  # type: ignore[attr-defined]
        requests: list[EnqueueRequest] = []
        try:
            while True:
                obj = recv_frame(self.request)
                if obj is None:
                    break
                requests.append(EnqueueRequest.from_json_obj(obj))
            for resp in handle_stream(requests, deps):
                send_frame(self.request, resp.to_json_obj())
        except ProtocolViolation as e:
            self._send_error("protocol_violation", str(e))
        except EmptyStream as e:
            self._send_error("empty_stream", str(e))
        except BackendUnavailable as e:
            self._send_error("backend_unavailable", str(e))
        except (ValueError, KeyError, json.JSONDecodeError) as e:
            self._send_error("bad_request", str(e))

    def _send_error(self, code: str, message: str) -> None:
        try:
            send_frame(self.request, {"type": "error", "code": code, "message": message})
        except OSError:
            pass


class BatchingServer:
    """Threaded TCP server: one independent stream per connection."""

    def __init__(self, host: str, port: int, deps: ServiceDeps):
        self._server = socketserver.ThreadingTCPServer(
            (host, port), _StreamHandler, bind_and_activate=True
        )
        self._server.daemon_threads = True
        self._server.deps = deps  # type: ignore[attr-defined]
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._server.server_address[:2]
        return str(host), int(port)

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="batching-server", daemon=True
        )
        self._thread.start()

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


def stream_targets(
    address: tuple[str, int],
    context: ExecutionContext,
    flags: BuildFlags,
    target_chunks: Sequence[Sequence[Target]],
    priority: Optional[Priority] = None,
    timeout: float = 30.0,
) -> list[dict]:
    """Client helper: send chunks as enqueue frames, return server frames.

    The first chunk's frame carries context/flags/priority; the write
    side is shut down after the last chunk, then frames are read until
    the server closes. Returns raw frame objects (responses or a
    terminal error) so callers can inspect exactly what went over the
    wire.
    """
    with socket.create_connection(address, timeout=timeout) as sock:
        first = True
        chunks = target_chunks or [[]]
        for chunk in chunks:
            req = EnqueueRequest(
                targets=tuple(chunk),
                context=context if first else None,
                flags=flags if first else None,
                priority=priority if first else None,
            )
            send_frame(sock, req.to_json_obj())
            first = False
        sock.shutdown(socket.SHUT_WR)
        frames: list[dict] = []
        while True:
            obj = recv_frame(sock)
            if obj is None:
                return frames
            frames.append(obj)
