"""File-based one-sided point-to-point messaging over a shared directory.

Each rank is an OS process.  A send writes a self-describing binary
payload file into the shared communication directory and then makes an
empty ready-marker visible with an atomic rename; a receive polls for
the marker, reads the payload and removes both files.  Sends therefore
complete with no receiver present, messages can be arbitrarily large,
and every in-flight message can be inspected on disk.

Environment contract (set by the launcher):
    DGRID_RANK, DGRID_SIZE, DGRID_COMMDIR, DGRID_JOBID
    optional DGRID_RECV_TIMEOUT_MS, DGRID_KEEP_MSGS=1

File naming: msg_s<src>_d<dst>_t<tag>.bin plus .ready marker.  Sending
twice on the same (src, dst, tag) before the first message is consumed
is a protocol error.
"""

import os
import re
import shutil
import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DGRD"
VERSION = 1

KIND_DENSE = 1
KIND_BLOB = 2
KIND_RECORD = 3

# elemType codes and their numpy dtypes (little-endian on the wire)
_ELEM_CODES = {
    "f64": 1, "f32": 2, "i64": 3, "i32": 4, "u64": 5, "c128": 6, "byte": 7,
}
_ELEM_DTYPES = {
    1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("<i8"),
    4: np.dtype("<i4"), 5: np.dtype("<u8"), 6: np.dtype("<c16"),
    7: np.dtype("u1"),
}
_DTYPE_ELEMS = {dt: code for code, dt in _ELEM_DTYPES.items()}

MAX_PAYLOAD_DIMS = 4

# user tags live below this; collectives and library internals above
USER_TAG_LIMIT = 1 << 30
_LANE_WIDTH = 1 << 24
TAG_BCAST = USER_TAG_LIMIT + 0 * _LANE_WIDTH
TAG_SYNC = USER_TAG_LIMIT + 1 * _LANE_WIDTH
TAG_REDIST = USER_TAG_LIMIT + 2 * _LANE_WIDTH
TAG_REDIST_GHOST = USER_TAG_LIMIT + 3 * _LANE_WIDTH
TAG_AGG = USER_TAG_LIMIT + 4 * _LANE_WIDTH
TAG_APP = USER_TAG_LIMIT + 5 * _LANE_WIDTH  # per-app protocols (RandomAccess)

_HEADER = struct.Struct("<4sHBBB3s")
_CRC = struct.Struct("<I")
_POLL_FLOOR = 0.001
_POLL_CAP = 0.1


class FsmpiError(Exception):
    """Base error of the messaging layer."""


class InitError(FsmpiError):
    """Missing or inconsistent initialization environment."""


class ProtocolError(FsmpiError):
    """Message protocol violated (duplicate in-flight triple, bad dst)."""


class FormatError(FsmpiError):
    """Payload file failed validation; files are left in place."""


class ReceiveTimeout(FsmpiError):
    """Configured receive timeout expired with no matching message."""


@dataclass(frozen=True)
class TypedPayload:
    """Typed message content: a dense array, a byte blob or a record.

    data is the raw little-endian row-major buffer; for records it is
    the serialized entry list (u32 count, then u16 key length, key
    bytes, nested encoded payload per entry).
    """

    kind: int
    elem: int
    shape: tuple
    data: bytes

    def __post_init__(self):
        if len(self.shape) > MAX_PAYLOAD_DIMS:
            raise FormatError(f"too many dims: {len(self.shape)}")
        n = 1
        for e in self.shape:
            n *= e
        if n * _ELEM_DTYPES[self.elem].itemsize != len(self.data):
            raise FormatError(
                f"shape {self.shape} x elem {self.elem} != {len(self.data)} bytes")

    @staticmethod
    def from_array(a):
        a = np.ascontiguousarray(a)
        dt = a.dtype.newbyteorder("<")
        if dt not in _DTYPE_ELEMS:
            raise FormatError(f"unsupported dtype {a.dtype}")
        return TypedPayload(KIND_DENSE, _DTYPE_ELEMS[dt], tuple(a.shape),
                            a.astype(dt, copy=False).tobytes())

    @staticmethod
    def from_bytes(b):
        b = bytes(b)
        return TypedPayload(KIND_BLOB, _ELEM_CODES["byte"], (len(b),), b)

    @staticmethod
    def from_record(mapping):
        """Record from {str: TypedPayload | ndarray | bytes}."""
        parts = [struct.pack("<I", len(mapping))]
        for key, val in mapping.items():
            if isinstance(val, TypedPayload):
                p = val
            elif isinstance(val, (bytes, bytearray)):
                p = TypedPayload.from_bytes(val)
            else:
                p = TypedPayload.from_array(val)
            kb = key.encode("utf-8")
            parts.append(struct.pack("<H", len(kb)))
            parts.append(kb)
            parts.append(p.encode())
        data = b"".join(parts)
        return TypedPayload(KIND_RECORD, _ELEM_CODES["byte"], (len(data),), data)

    def to_array(self):
        if self.kind == KIND_BLOB:
            return np.frombuffer(self.data, dtype="u1")
        if self.kind != KIND_DENSE:
            raise FormatError("payload is not a dense array")
        dt = _ELEM_DTYPES[self.elem]
        return np.frombuffer(self.data, dtype=dt).reshape(self.shape)

    def to_bytes(self):
        return self.data

    def to_record(self):
        if self.kind != KIND_RECORD:
            raise FormatError("payload is not a record")
        out = {}
        off = 0
        (count,) = struct.unpack_from("<I", self.data, off)
        off += 4
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", self.data, off)
            off += 2
            key = self.data[off:off + klen].decode("utf-8")
            off += klen
            nested, off = _decode(self.data, off)
            out[key] = nested
        return out

    def encode(self):
        head = _HEADER.pack(MAGIC, VERSION, self.kind, self.elem,
                            len(self.shape), b"\x00\x00\x00")
        dims = b"".join(struct.pack("<Q", e) for e in self.shape)
        return head + dims + self.data + _CRC.pack(zlib.crc32(self.data))


def _decode(buf, off=0):
    """Decode one payload starting at off; returns (payload, next offset)."""
    end = len(buf)
    if end - off < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, kind, elem, ndim, _ = _HEADER.unpack_from(buf, off)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if kind not in (KIND_DENSE, KIND_BLOB, KIND_RECORD):
        raise FormatError(f"unknown payload kind {kind}")
    if elem not in _ELEM_DTYPES:
        raise FormatError(f"unknown element type {elem}")
    if ndim > MAX_PAYLOAD_DIMS:
        raise FormatError(f"too many dims: {ndim}")
    off += _HEADER.size
    if end - off < 8 * ndim:
        raise FormatError("truncated dims")
    shape = tuple(struct.unpack_from("<Q", buf, off + 8 * k)[0] for k in range(ndim))
    off += 8 * ndim
    n = 1
    for e in shape:
        n *= e
    nbytes = n * _ELEM_DTYPES[elem].itemsize
    if end - off < nbytes + _CRC.size:
        raise FormatError("truncated data")
    data = bytes(buf[off:off + nbytes])
    off += nbytes
    (crc,) = _CRC.unpack_from(buf, off)
    off += _CRC.size
    if crc != zlib.crc32(data):
        raise FormatError("CRC mismatch")
    return TypedPayload(kind, elem, shape, data), off


def decode_payload(buf):
    payload, off = _decode(buf, 0)
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after payload")
    return payload


@dataclass
class CommStats:
    messages_sent: int = 0
    bytes_sent: int = 0
    messages_received: int = 0
    bytes_received: int = 0


@dataclass
class CommContext:
    """Per-process communicator state.

    Confined to its owning process; inter-rank concurrency is mediated
    entirely through the filesystem protocol.
    """

    rank: int
    size: int
    comm_dir: str
    job_id: str
    recv_timeout_ms: int | None = None
    keep_msgs: bool = False
    stats: CommStats = field(default_factory=CommStats)
    _coll_seq: int = 0
    _finalized: bool = False

    def next_collective_seq(self):
        """Per-context collective call counter; every rank must call each
        collective in the same order, keeping counters aligned."""
        self._coll_seq += 1
        if self._coll_seq >= _LANE_WIDTH:
            raise ProtocolError("collective sequence space exhausted")
        return self._coll_seq

    @property
    def scratch_dir(self):
        return os.path.join(self.comm_dir, f"scratch_r{self.rank}")


def _require_env(env, name):
    if name not in env or env[name] == "":
        raise InitError(f"environment variable {name} is not set")
    return env[name]


def _int_env(env, name):
    raw = _require_env(env, name)
    try:
        return int(raw)
    except ValueError:
        raise InitError(f"environment variable {name}={raw!r} is not an integer") from None


def init(env=None):
    """Initialize a communicator from the process environment.

    Idempotent within a process: re-initializing with the same
    environment yields an equivalent context.
    """
    env = os.environ if env is None else env
    rank = _int_env(env, "DGRID_RANK")
    size = _int_env(env, "DGRID_SIZE")
    comm_dir = _require_env(env, "DGRID_COMMDIR")
    job_id = _require_env(env, "DGRID_JOBID")
    if size < 1:
        raise InitError(f"DGRID_SIZE must be >= 1, got {size}")
    if not 0 <= rank < size:
        raise InitError(f"DGRID_RANK={rank} outside [0, {size})")
    timeout = None
    if env.get("DGRID_RECV_TIMEOUT_MS"):
        try:
            timeout = int(env["DGRID_RECV_TIMEOUT_MS"])
        except ValueError:
            raise InitError("DGRID_RECV_TIMEOUT_MS is not an integer") from None
    keep = env.get("DGRID_KEEP_MSGS") == "1"
    ctx = CommContext(rank, size, comm_dir, job_id,
                      recv_timeout_ms=timeout, keep_msgs=keep)
    os.makedirs(comm_dir, exist_ok=True)
    os.makedirs(ctx.scratch_dir, exist_ok=True)
    return ctx


def comm_rank(ctx):
    return ctx.rank


def comm_size(ctx):
    return ctx.size


def _msg_base(comm_dir, src, dst, tag):
    return os.path.join(comm_dir, f"msg_s{src}_d{dst}_t{tag}")


def _check_tag(tag):
    if not isinstance(tag, int) or tag < 0:
        raise ProtocolError(f"tag must be a non-negative integer, got {tag!r}")


def send(ctx, dst, tag, payload):
    """Deposit a message for dst; returns as soon as the files are visible.

    The payload file is fully written and flushed before the ready
    marker is renamed into place, so a receiver never sees a partial
    message.  No receiver needs to exist yet.
    """
    _check_tag(tag)
    if not 0 <= dst < ctx.size:
        raise ProtocolError(f"destination {dst} outside [0, {ctx.size})")
    if not isinstance(payload, TypedPayload):
        raise ProtocolError("payload must be a TypedPayload")
    base = _msg_base(ctx.comm_dir, ctx.rank, dst, tag)
    if os.path.exists(base + ".ready") or os.path.exists(base + ".bin"):
        raise ProtocolError(
            f"message ({ctx.rank}->{dst}, tag {tag}) already in flight")
    blob = payload.encode()
    tmp = base + ".bin.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.rename(tmp, base + ".bin")

    mtmp = base + ".ready.tmp"
    with open(mtmp, "wb"):
        pass
    os.rename(mtmp, base + ".ready")
    ctx.stats.messages_sent += 1
    ctx.stats.bytes_sent += len(blob)


def _backoff_sleep(delay):
    time.sleep(delay)
    return min(delay * 2, _POLL_CAP)


def recv(ctx, src, tag, timeout_ms=None):
    """Block until the message (src -> this rank, tag) arrives; return it.

    Polls the ready marker with exponential backoff (1 ms floor, 100 ms
    cap).  By default consumed message files are deleted; with keep mode
    they are retained for inspection.  A corrupt payload raises
    FormatError and leaves the files in place.
    """
    _check_tag(tag)
    if not 0 <= src < ctx.size:
        raise ProtocolError(f"source {src} outside [0, {ctx.size})")
    base = _msg_base(ctx.comm_dir, src, ctx.rank, tag)
    ready = base + ".ready"
    if timeout_ms is None:
        timeout_ms = ctx.recv_timeout_ms
    deadline = None if timeout_ms is None else time.monotonic() + timeout_ms / 1000.0
    delay = _POLL_FLOOR
    while not os.path.exists(ready):
        if deadline is not None and time.monotonic() > deadline:
            raise ReceiveTimeout(
                f"no message ({src}->{ctx.rank}, tag {tag}) within {timeout_ms} ms")
        delay = _backoff_sleep(delay)
    with open(base + ".bin", "rb") as f:
        blob = f.read()
    payload = decode_payload(blob)  # FormatError leaves files in place
    if not ctx.keep_msgs:
        os.remove(ready)
        os.remove(base + ".bin")
    ctx.stats.messages_received += 1
    ctx.stats.bytes_received += len(blob)
    return payload


ANY = None
_MARKER_RE = re.compile(r"^msg_s(\d+)_d(\d+)_t(\d+)\.ready$")


def probe(ctx, src=ANY, tag=ANY):
    """Non-blocking scan for deliverable messages addressed to this rank.

    Returns a sorted list of (src, tag) whose ready markers exist and
    match the filter; ANY (None) matches everything.
    """
    out = []
    for name in os.listdir(ctx.comm_dir):
        m = _MARKER_RE.match(name)
        if not m:
            continue
        s, d, t = int(m.group(1)), int(m.group(2)), int(m.group(3))
        if d != ctx.rank:
            continue
        if src is not ANY and s != src:
            continue
        if tag is not ANY and t != tag:
            continue
        out.append((s, t))
    return sorted(out)


def bcast(ctx, root, payload=None):
    """Broadcast the root's payload to every rank; all ranks must call.

    The root posts size-1 point-to-point messages on a reserved tag
    lane; the per-context collective counter keeps consecutive
    broadcasts from colliding.
    """
    if not 0 <= root < ctx.size:
        raise ProtocolError(f"root {root} outside [0, {ctx.size})")
    tag = TAG_BCAST + ctx.next_collective_seq()
    if ctx.rank == root:
        if payload is None:
            raise ProtocolError("broadcast root must supply a payload")
        for dst in range(ctx.size):
            if dst != root:
                send(ctx, dst, tag, payload)
        return payload
    return recv(ctx, root, tag)


_FIN_RE = re.compile(r"^finalize_r(\d+)\.marker$")


def finalize(ctx, timeout_ms=None):
    """Tear down this rank's communicator state.

    Removes the rank-private scratch directory and deposits a finalize
    marker; rank 0 waits for all markers and then sweeps leftover
    message, marker and scratch files.  Safe to call more than once;
    I/O problems are reported on stderr but never raised.
    """
    if ctx._finalized:
        return
    ctx._finalized = True
    try:
        shutil.rmtree(ctx.scratch_dir, ignore_errors=True)
        marker = os.path.join(ctx.comm_dir, f"finalize_r{ctx.rank}.marker")
        with open(marker + ".tmp", "wb"):
            pass
        os.rename(marker + ".tmp", marker)
        if ctx.rank != 0:
            return
        if timeout_ms is None:
            timeout_ms = ctx.recv_timeout_ms
        deadline = (None if timeout_ms is None
                    else time.monotonic() + timeout_ms / 1000.0)
        delay = _POLL_FLOOR
        while True:
            seen = set()
            for name in os.listdir(ctx.comm_dir):
                m = _FIN_RE.match(name)
                if m:
                    seen.add(int(m.group(1)))
            if len(seen) >= ctx.size:
                break
            if deadline is not None and time.monotonic() > deadline:
                import sys
                print(f"dgrid: finalize sweep skipped, {ctx.size - len(seen)} "
                      f"ranks missing", file=sys.stderr)
                return
            delay = _backoff_sleep(delay)
        for name in os.listdir(ctx.comm_dir):
            path = os.path.join(ctx.comm_dir, name)
            try:
                if name.startswith("scratch_r"):
                    shutil.rmtree(path, ignore_errors=True)
                elif name.startswith(("msg_", "finalize_r")):
                    os.remove(path)
            except OSError as exc:
                import sys
                print(f"dgrid: finalize could not remove {path}: {exc}",
                      file=sys.stderr)
    except OSError as exc:
        import sys
        print(f"dgrid: finalize I/O error: {exc}", file=sys.stderr)
