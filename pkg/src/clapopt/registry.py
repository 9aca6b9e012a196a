"""Durable per-roadblock prompt storage and a small retrieval protocol.

Storage layout: one directory per roadblock_id holding immutable
version files (``v1``, ``v2``, ...), optional ``vN.meta`` sidecars, and
a ``latest`` marker. All writes go through temp-file-plus-rename so a
crash never corrupts an existing version; writers take an advisory
per-roadblock lock, readers never lock.

The wire protocol is line-oriented over a stream socket:
    GET <id> [version]\\n  ->  OK <byte_count>\\n<payload> | ERR NOT_FOUND\\n
    PUT <id> <byte_count>\\n<payload>  ->  OK <version>\\n | ERR <code>\\n
Payloads are the text prompt-file format, stored verbatim, so file and
wire round trips are bit-exact by construction.
"""

from __future__ import annotations

import dataclasses
import datetime
import os
import re
import socket
import socketserver
import threading
from dataclasses import dataclass

import numpy as np
from filelock import FileLock

from .textio import atomic_write_text, fmt_float, parse_floats
from .train import HardSceneDirection

PROMPT_SCHEMA = "clap-prompt v1"
_ID_RE = re.compile(r"^[A-Za-z0-9_\-]+$")


class NotFoundError(KeyError):
    """Unknown roadblock_id or version."""


@dataclass(frozen=True)
class RegistryRecord:
    roadblock_id: str
    prompt_a: np.ndarray
    prompt_b: np.ndarray
    extract_layer: int
    d_model: int
    backbone_checksum: str
    direction: HardSceneDirection | None = None
    condition_tags: tuple = ()
    version: int | None = None  # assigned by put
    created_at: str | None = None

    def __post_init__(self) -> None:
        if not _ID_RE.match(self.roadblock_id):
            raise ValueError(f"bad roadblock_id {self.roadblock_id!r}")
        pa = np.asarray(self.prompt_a, dtype=np.float64)
        pb = np.asarray(self.prompt_b, dtype=np.float64)
        if pa.ndim != 2 or pb.ndim != 2:
            raise ValueError("prompts must be 2-D")
        if pa.shape[1] != self.d_model or pb.shape[1] != self.d_model:
            raise ValueError(
                f"prompt width {pa.shape[1]}/{pb.shape[1]} != d_model {self.d_model}")
        if self.extract_layer < 0:
            raise ValueError("extract_layer must be >= 0")
        if not re.match(r"^[0-9a-f]+$", self.backbone_checksum):
            raise ValueError("backbone_checksum must be lowercase hex")
        if self.direction is not None and self.direction.directions.shape[1] != self.d_model:
            raise ValueError("direction width != d_model")
        object.__setattr__(self, "prompt_a", pa)
        object.__setattr__(self, "prompt_b", pb)


def record_to_payload(record: RegistryRecord) -> bytes:
    lines = [PROMPT_SCHEMA,
             f"roadblock {record.roadblock_id}",
             f"d_model {record.d_model}",
             f"m {record.prompt_a.shape[0]}",
             f"n {record.prompt_b.shape[0]}",
             f"layer {record.extract_layer}",
             f"checksum {record.backbone_checksum}"]
    for row in record.prompt_a:
        lines.extend(fmt_float(v) for v in row)
    for row in record.prompt_b:
        lines.extend(fmt_float(v) for v in row)
    return ("\n".join(lines) + "\n").encode("ascii")


def payload_to_record(payload: bytes) -> RegistryRecord:
    """Parse the prompt-file format; metadata sidecar fields stay unset."""
    lines = payload.decode("ascii").splitlines()
    if not lines or lines[0] != PROMPT_SCHEMA:
        raise ValueError(f"expected header {PROMPT_SCHEMA!r}")
    header = {}
    for i, key in enumerate(("roadblock", "d_model", "m", "n", "layer", "checksum"), start=1):
        k, _, v = lines[i].partition(" ")
        if k != key or not v:
            raise ValueError(f"header line {i + 1}: expected {key!r}")
        header[key] = v
    d_model = int(header["d_model"])
    m, n = int(header["m"]), int(header["n"])
    values = lines[7:]
    if len(values) != (m + n) * d_model:
        raise ValueError(f"expected {(m + n) * d_model} values, got {len(values)}")
    pa = parse_floats(values, m * d_model, (m, d_model))
    pb = parse_floats(values[m * d_model:], n * d_model, (n, d_model))
    return RegistryRecord(header["roadblock"], pa, pb, int(header["layer"]),
                          d_model, header["checksum"])


def _meta_text(record: RegistryRecord, created_at: str) -> str:
    lines = ["clap-prompt-meta v1",
             f"created_at {created_at}",
             f"conditions {' '.join(record.condition_tags) if record.condition_tags else '-'}"]
    d = record.direction
    if d is None:
        lines.append("direction absent")
    else:
        lines.append(f"direction {d.directions.shape[0]}")
        lines.extend(fmt_float(v) for row in d.directions for v in row)
        lines.append("singular_values " + " ".join(fmt_float(s) for s in d.singular_values))
    return "\n".join(lines) + "\n"


def _parse_meta(text: str, d_model: int):
    lines = text.splitlines()
    created_at = lines[1].split(" ", 1)[1]
    cond = lines[2].split(" ")[1:]
    tags = () if cond == ["-"] else tuple(cond)
    direction = None
    if lines[3] != "direction absent":
        k = int(lines[3].split(" ")[1])
        vals = parse_floats(lines[4:], k * d_model, (k, d_model))
        sv_parts = lines[4 + k * d_model].split(" ")[1:]
        sv = parse_floats(sv_parts, k, (k,))
        direction = HardSceneDirection(vals, sv)
    return created_at, tags, direction


class PromptStore:
    """Filesystem-backed registry rooted at one directory."""

    def __init__(self, root: str):
        self.root = os.path.abspath(root)
        os.makedirs(self.root, exist_ok=True)

    def _dir(self, roadblock_id: str) -> str:
        if not _ID_RE.match(roadblock_id):
            raise ValueError(f"bad roadblock_id {roadblock_id!r}")
        return os.path.join(self.root, roadblock_id)

    def _lock(self, roadblock_id: str) -> FileLock:
        return FileLock(os.path.join(self._dir(roadblock_id), ".lock"))

    def put(self, record: RegistryRecord) -> int:
        payload = record_to_payload(record)
        return self.put_payload(record.roadblock_id, payload, record)

    def put_payload(self, roadblock_id: str, payload: bytes,
                    record: RegistryRecord | None = None) -> int:
        """Store verbatim payload bytes; validates they parse first."""
        parsed = payload_to_record(payload)
        if parsed.roadblock_id != roadblock_id:
            raise ValueError(
                f"payload roadblock {parsed.roadblock_id!r} != {roadblock_id!r}")
        rb_dir = self._dir(roadblock_id)
        os.makedirs(rb_dir, exist_ok=True)
        with self._lock(roadblock_id):
            version = self._latest_version(roadblock_id) + 1
            created = datetime.datetime.now(datetime.timezone.utc).isoformat()
            # version file first, marker last: a reader that sees the new
            # marker is guaranteed to find the version file
            atomic_write_text(os.path.join(rb_dir, f"v{version}"),
                              payload.decode("ascii"))
            atomic_write_text(os.path.join(rb_dir, f"v{version}.meta"),
                              _meta_text(record if record is not None else parsed, created))
            atomic_write_text(os.path.join(rb_dir, "latest"), f"{version}\n")
        return version

    def _latest_version(self, roadblock_id: str) -> int:
        marker = os.path.join(self._dir(roadblock_id), "latest")
        try:
            with open(marker, "r", encoding="ascii") as fh:
                return int(fh.read().strip())
        except FileNotFoundError:
            return 0

    def get_payload(self, roadblock_id: str, version: int | None = None) -> tuple[bytes, int]:
        rb_dir = self._dir(roadblock_id)
        if version is None:
            version = self._latest_version(roadblock_id)
            if version == 0:
                raise NotFoundError(roadblock_id)
        path = os.path.join(rb_dir, f"v{version}")
        try:
            with open(path, "rb") as fh:
                return fh.read(), version
        except FileNotFoundError:
            raise NotFoundError(f"{roadblock_id} v{version}") from None

    def get(self, roadblock_id: str, version: int | None = None) -> RegistryRecord:
        payload, version = self.get_payload(roadblock_id, version)
        record = payload_to_record(payload)
        meta_path = os.path.join(self._dir(roadblock_id), f"v{version}.meta")
        created_at, tags, direction = None, (), None
        if os.path.exists(meta_path):
            with open(meta_path, "r", encoding="ascii") as fh:
                created_at, tags, direction = _parse_meta(fh.read(), record.d_model)
        return dataclasses.replace(record, version=version, created_at=created_at,
                                   condition_tags=tags, direction=direction)

    def ids(self) -> list[str]:
        return sorted(d for d in os.listdir(self.root)
                      if os.path.isdir(os.path.join(self.root, d)))


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        while True:
            line = self.rfile.readline()
            if not line:
                return
            try:
                reply = self._dispatch(line)
            except (NotFoundError, FileNotFoundError):
                reply = b"ERR NOT_FOUND\n"
            except Exception:
                reply = b"ERR BAD_REQUEST\n"
            try:
                self.wfile.write(reply)
                self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError):
                return

    def _dispatch(self, line: bytes) -> bytes:
        parts = line.decode("ascii").strip().split(" ")
        store: PromptStore = self.server.store
        if parts[0] == "GET" and len(parts) in (2, 3):
            version = int(parts[2]) if len(parts) == 3 else None
            payload, _ = store.get_payload(parts[1], version)
            return b"OK %d\n%s" % (len(payload), payload)
        if parts[0] == "PUT" and len(parts) == 3:
            count = int(parts[2])
            if count <= 0:
                raise ValueError("bad byte count")
            payload = self.rfile.read(count)
            if len(payload) != count:
                raise ValueError("short payload")
            version = store.put_payload(parts[1], payload)
            return b"OK %d\n" % version
        raise ValueError(f"bad request {parts[0]!r}")


class RegistryServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, store: PromptStore, host: str, port: int):
        super().__init__((host, port), _Handler)
        self.store = store

    @property
    def endpoint(self) -> tuple[str, int]:
        return self.server_address[:2]


def serve(store: PromptStore, host: str = "127.0.0.1", port: int = 0,
          background: bool = True) -> RegistryServer:
    """Start the registry service; port 0 picks a free port."""
    server = RegistryServer(store, host, port)
    if background:
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
    return server


class RegistryClient:
    """Blocking client for the wire protocol; one socket, many requests."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.rfile = self.sock.makefile("rb")

    def close(self) -> None:
        self.rfile.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _status(self) -> list[str]:
        line = self.rfile.readline()
        if not line:
            raise ConnectionError("server closed connection")
        return line.decode("ascii").strip().split(" ")

    def get_payload(self, roadblock_id: str, version: int | None = None) -> bytes:
        req = f"GET {roadblock_id}" + (f" {version}" if version is not None else "")
        self.sock.sendall((req + "\n").encode("ascii"))
        status = self._status()
        if status[0] == "OK":
            count = int(status[1])
            buf = b""
            while len(buf) < count:
                chunk = self.rfile.read(count - len(buf))
                if not chunk:
                    raise ConnectionError("short read")
                buf += chunk
            return buf
        raise NotFoundError(roadblock_id) if status[1] == "NOT_FOUND" \
            else RuntimeError(f"server error: {' '.join(status[1:])}")

    def get(self, roadblock_id: str, version: int | None = None) -> RegistryRecord:
        return payload_to_record(self.get_payload(roadblock_id, version))

    def put(self, record_or_payload) -> int:
        payload = (record_or_payload if isinstance(record_or_payload, bytes)
                   else record_to_payload(record_or_payload))
        rid = payload_to_record(payload).roadblock_id
        self.sock.sendall(f"PUT {rid} {len(payload)}\n".encode("ascii") + payload)
        status = self._status()
        if status[0] == "OK":
            return int(status[1])
        raise RuntimeError(f"server error: {' '.join(status[1:])}")
