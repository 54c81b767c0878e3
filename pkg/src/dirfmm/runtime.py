"""Bulk-synchronous multi-worker execution with explicit charge exchanges.

Workers are threads with private engines; the transport is the only shared
object.  Two timed exchanges move outgoing charges consumed by remote M2L
translations: directional charges after the upward pass (``PHASE_HF``) and
low-frequency charges after the directional downward pass (``PHASE_LF``).
A third, untimed exchange gathers leaf potentials on the coordinator.

Every worker derives the same schedules from the shared tree and partition, so
senders push without a request round.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .engine import PHASES, Engine
from .errors import DirFMMError, ProtocolError, TransportError
from .octree import BoxKey, Octree, direction_of
from .partition import PartitionMap
from .precompute import PrecomputeCache
from .wedges import DirectionIndex

PHASE_HF, PHASE_LF, PHASE_GATHER = 1, 2, 3
PHASE_NAMES = {PHASE_HF: "hf", PHASE_LF: "lf", PHASE_GATHER: "gather"}
DEFAULT_TIMEOUT = 60.0

FRAME_MAGIC = b"DFMM"
_FRAME = struct.Struct("<4sII")
# level, i, j, k | flag (0: none, else width_level + 1), face, u, v | rank
_RECORD = struct.Struct("<BIIIBBHHI")
RECORD_HEADER_SIZE = _RECORD.size


# ---------------------------------------------------------------- wire format

@dataclass(eq=False)
class ChargeRecord:
    box: BoxKey
    direction: DirectionIndex | None
    coefficients: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, ChargeRecord) and self.box == other.box
                and self.direction == other.direction
                and self.coefficients.tobytes() == other.coefficients.tobytes())

    @property
    def slot(self):
        return (self.box, self.direction)

    def nbytes(self) -> int:
        return RECORD_HEADER_SIZE + 16 * len(self.coefficients)

    def encode(self) -> bytes:
        d = self.direction
        head = (0, 0, 0, 0) if d is None else (d.width_level + 1, d.face, d.u, d.v)
        coef = np.ascontiguousarray(self.coefficients, dtype="<c16")
        return _RECORD.pack(self.box.level, self.box.i, self.box.j, self.box.k, *head,
                            len(coef)) + coef.tobytes()

    @classmethod
    def decode_from(cls, buf: bytes, offset: int = 0) -> tuple["ChargeRecord", int]:
        if offset + RECORD_HEADER_SIZE > len(buf):
            raise ProtocolError("truncated record header")
        lvl, i, j, k, flag, face, u, v, rank = _RECORD.unpack_from(buf, offset)
        start = offset + RECORD_HEADER_SIZE
        end = start + 16 * rank
        if end > len(buf):
            raise ProtocolError("truncated record payload")
        d = None if flag == 0 else DirectionIndex(flag - 1, face, u, v)
        coef = np.frombuffer(buf, "<c16", rank, start).astype(complex)
        return cls(BoxKey(lvl, i, j, k), d, coef), end


def encode_frame(phase: int, records) -> bytes:
    records = list(records)
    return _FRAME.pack(FRAME_MAGIC, phase, len(records)) + b"".join(r.encode() for r in records)


def decode_frame(buf: bytes) -> tuple[int, list[ChargeRecord]]:
    if len(buf) < _FRAME.size:
        raise ProtocolError("truncated frame header")
    magic, phase, count = _FRAME.unpack_from(buf)
    if magic != FRAME_MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    off, out = _FRAME.size, []
    for _ in range(count):
        rec, off = ChargeRecord.decode_from(buf, off)
        out.append(rec)
    if off != len(buf):
        raise ProtocolError(f"{len(buf) - off} trailing bytes in frame")
    return phase, out


def frame_phase(buf: bytes) -> int:
    return _FRAME.unpack_from(buf)[1]


# ---------------------------------------------------------------- accounting

@dataclass
class CommStats:
    # (src, dst, phase) -> [messages, bytes]
    sent: dict = field(default_factory=lambda: defaultdict(lambda: [0, 0]))
    received: dict = field(default_factory=lambda: defaultdict(lambda: [0, 0]))

    def record_send(self, src, dst, phase, nbytes):
        e = self.sent[(src, dst, phase)]
        e[0] += 1
        e[1] += nbytes

    def record_receive(self, src, dst, phase, nbytes):
        e = self.received[(src, dst, phase)]
        e[0] += 1
        e[1] += nbytes

    def merge(self, other: "CommStats") -> None:
        for mine, theirs in ((self.sent, other.sent), (self.received, other.received)):
            for k, (m, b) in theirs.items():
                mine[k][0] += m
                mine[k][1] += b

    def conserved(self) -> bool:
        return {k: tuple(v) for k, v in self.sent.items()} == \
            {k: tuple(v) for k, v in self.received.items()}

    def phase_totals(self, phase: int) -> tuple[int, int]:
        m = sum(v[0] for k, v in self.sent.items() if k[2] == phase)
        b = sum(v[1] for k, v in self.sent.items() if k[2] == phase)
        return m, b

    def to_dict(self) -> dict:
        pairs = [{"src": s, "dst": d, "phase": PHASE_NAMES[ph], "messages": v[0], "bytes": v[1]}
                 for (s, d, ph), v in sorted(self.sent.items())]
        phases = {}
        for ph, name in PHASE_NAMES.items():
            m, b = self.phase_totals(ph)
            phases[name] = {"messages": m, "bytes": b}
        return {"pairs": pairs, "phases": phases, "conserved": self.conserved()}


# ---------------------------------------------------------------- transports

class Endpoint:
    """One worker's view of the transport.  Frames of later phases are held back."""

    def __init__(self, rank: int, inbox: "queue.Queue", timeout: float, abort: threading.Event):
        self.rank = rank
        self._inbox = inbox
        self._held: dict[int, list] = defaultdict(list)
        self.timeout = timeout
        self._abort = abort

    def send(self, dst: int, frame: bytes) -> None:
        raise NotImplementedError

    def recv(self, phase: int) -> tuple[int, bytes]:
        if self._held[phase]:
            return self._held[phase].pop(0)
        deadline = time.monotonic() + self.timeout
        while True:
            left = deadline - time.monotonic()
            if left <= 0:
                raise TransportError(f"worker {self.rank}: timed out after {self.timeout:.0f} s "
                                     f"waiting for phase {PHASE_NAMES.get(phase, phase)}")
            if self._abort.is_set():
                raise TransportError(f"worker {self.rank}: run aborted by another worker")
            try:
                src, frame = self._inbox.get(timeout=min(left, 0.2))
            except queue.Empty:
                continue
            if isinstance(frame, BaseException):
                raise TransportError(f"worker {self.rank}: link to {src} failed: {frame}")
            if frame_phase(frame) == phase:
                return src, frame
            self._held[frame_phase(frame)].append((src, frame))


class _QueueEndpoint(Endpoint):
    def __init__(self, rank, inboxes, timeout, abort):
        super().__init__(rank, inboxes[rank], timeout, abort)
        self._inboxes = inboxes

    def send(self, dst, frame):
        self._inboxes[dst].put((self.rank, frame))


class InMemoryTransport:
    """Thread-safe queues between ``n`` endpoints in one process."""

    def __init__(self, n: int, timeout: float = DEFAULT_TIMEOUT):
        self._inboxes = [queue.Queue() for _ in range(n)]
        self.aborted = threading.Event()
        self.endpoints = [_QueueEndpoint(r, self._inboxes, timeout, self.aborted) for r in range(n)]

    def endpoint(self, rank: int) -> Endpoint:
        return self.endpoints[rank]

    def close(self) -> None:
        pass


def _read_exact(sock, n: int) -> bytes:
    chunks, have = [], 0
    while have < n:
        b = sock.recv(n - have)
        if not b:
            if have == 0:
                return b""
            raise ConnectionError("stream closed mid-frame")
        chunks.append(b)
        have += len(b)
    return b"".join(chunks)


def read_frame(sock) -> bytes | None:
    """Read one frame from a byte stream; frames are self-delimiting."""
    head = _read_exact(sock, _FRAME.size)
    if not head:
        return None
    magic, _, count = _FRAME.unpack(head)
    if magic != FRAME_MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    parts = [head]
    for _ in range(count):
        rh = _read_exact(sock, RECORD_HEADER_SIZE)
        if len(rh) != RECORD_HEADER_SIZE:
            raise ConnectionError("stream closed mid-frame")
        rank = _RECORD.unpack(rh)[-1]
        parts.append(rh)
        if rank:
            body = _read_exact(sock, 16 * rank)
            if len(body) != 16 * rank:
                raise ConnectionError("stream closed mid-frame")
            parts.append(body)
    return b"".join(parts)


class _SocketEndpoint(Endpoint):
    def __init__(self, rank, inbox, timeout, abort, socks):
        super().__init__(rank, inbox, timeout, abort)
        self._socks = socks
        self._locks = {peer: threading.Lock() for peer in socks}

    def send(self, dst, frame):
        try:
            with self._locks[dst]:
                self._socks[dst].sendall(frame)
        except OSError as exc:
            raise TransportError(f"worker {self.rank}: send to {dst} failed: {exc}") from exc


class SocketTransport:
    """Full mesh of local stream sockets; one reader thread per socket end."""

    def __init__(self, n: int, timeout: float = DEFAULT_TIMEOUT):
        self._inboxes = [queue.Queue() for _ in range(n)]
        self.aborted = threading.Event()
        socks = [dict() for _ in range(n)]
        for a in range(n):
            for b in range(a + 1, n):
                sa, sb = socket.socketpair()
                socks[a][b], socks[b][a] = sa, sb
        self._all = [s for d in socks for s in d.values()]
        self._readers = []
        for r in range(n):
            for peer, s in socks[r].items():
                t = threading.Thread(target=self._reader, args=(s, peer, self._inboxes[r]),
                                     daemon=True)
                t.start()
                self._readers.append(t)
        self.endpoints = [_SocketEndpoint(r, self._inboxes[r], timeout, self.aborted, socks[r]) for r in range(n)]

    @staticmethod
    def _reader(sock, peer, inbox):
        try:
            while True:
                frame = read_frame(sock)
                if frame is None:
                    return
                inbox.put((peer, frame))
        except (OSError, DirFMMError) as exc:
            inbox.put((peer, exc))

    def endpoint(self, rank: int) -> Endpoint:
        return self.endpoints[rank]

    def close(self) -> None:
        for s in self._all:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
        for t in self._readers:
            t.join(timeout=1.0)


def make_transport(mode: str, n: int, timeout: float = DEFAULT_TIMEOUT):
    if mode in ("threads", "memory"):
        return InMemoryTransport(n, timeout)
    if mode == "sockets":
        return SocketTransport(n, timeout)
    raise ValueError(f"unknown transport mode {mode!r}")


# ---------------------------------------------------------------- schedules

def _slot_order(slot):
    box, d = slot
    return (box.level, box.morton(), d is not None, d or ())


@dataclass
class ExchangeSchedule:
    p: int
    # phase -> (src, dst) -> sorted slots that src sends to dst
    sends: dict[int, dict[tuple[int, int], list]]
    # worker -> point ids of remote leaves read directly (U and X lists)
    ghost_points: dict[int, np.ndarray]

    def outgoing(self, phase: int, worker: int) -> dict[int, list]:
        return {d: s for (src, d), s in self.sends[phase].items() if src == worker}

    def incoming(self, phase: int, worker: int) -> dict[int, list]:
        return {src: s for (src, d), s in self.sends[phase].items() if d == worker}

    def records(self, phase: int):
        for slots in self.sends[phase].values():
            yield from slots


def plan_exchanges(tree: Octree, partition: PartitionMap) -> ExchangeSchedule:
    """Remote M2L inputs of every worker, deduplicated per (box, direction) and peer."""
    lists = tree.lists
    owner = partition.owner
    hf, lf = defaultdict(set), defaultdict(set)
    ghosts = defaultdict(set)
    for level in range(tree.partition_level, min(tree.unit_level, tree.depth) + 1):
        w = int(tree.width(level))
        for key in tree.levels[level]:
            q = owner(key)
            for a in lists.hf_members(key):
                r = owner(a)
                if r != q:
                    hf[(r, q)].add((a, direction_of(w, a.offset_to(key))))
    for level in range(tree.unit_level + 1, tree.depth + 1):
        for key in tree.levels[level]:
            q = owner(key)
            for a in lists.V.get(key, []) + lists.W.get(key, []):
                r = owner(a)
                if r != q:
                    lf[(r, q)].add((a, None))
            for a in lists.U.get(key, []) + lists.X.get(key, []):
                if owner(a) != q:
                    ghosts[q].add(a)
    sends = {PHASE_HF: {k: sorted(v, key=_slot_order) for k, v in sorted(hf.items())},
             PHASE_LF: {k: sorted(v, key=_slot_order) for k, v in sorted(lf.items())}}
    ghost_points = {}
    for q in range(partition.p):
        boxes = sorted(ghosts.get(q, ()), key=BoxKey.sort_key)
        ids = [tree.nodes[b].point_ids for b in boxes]
        ghost_points[q] = np.sort(np.concatenate(ids)) if ids else np.zeros(0, dtype=np.int64)
    return ExchangeSchedule(partition.p, sends, ghost_points)


# ---------------------------------------------------------------- execution

@dataclass
class WorkerResult:
    rank: int
    times: dict
    counts: dict
    stats: CommStats
    received_records: dict


def _worker_densities(tree, cloud, partition, schedule, q) -> np.ndarray:
    dens = np.full(len(cloud), np.nan + 0j, dtype=complex)
    for key in tree.levels[partition.level]:
        if partition.assignment[key] == q:
            ids = tree.nodes[key].point_ids
            dens[ids] = cloud.densities[ids]
    g = schedule.ghost_points[q]
    dens[g] = cloud.densities[g]
    return dens


def _exchange(engine: Engine, endpoint: Endpoint, schedule, phase, q, stats, barrier):
    for dst, slots in schedule.outgoing(phase, q).items():
        frame = encode_frame(phase, (ChargeRecord(b, d, engine.store.outgoing[(b, d)])
                                     for b, d in slots))
        endpoint.send(dst, frame)
        stats.record_send(q, dst, phase, len(frame))
    expected = schedule.incoming(phase, q)
    pending = set(expected)
    got = 0
    while pending:
        src, frame = endpoint.recv(phase)
        if src not in pending:
            raise ProtocolError(f"worker {q}: unexpected phase-{phase} frame from worker {src}")
        pending.discard(src)
        stats.record_receive(src, q, phase, len(frame))
        _, records = decode_frame(frame)
        have = {r.slot for r in records}
        for slot in expected[src]:
            if slot not in have:
                box, d = slot
                raise ProtocolError(f"worker {q}: missing record for box {tuple(box)}, "
                                    f"direction {None if d is None else tuple(d)}, "
                                    f"from peer {src}")
        for r in records:
            engine.store.outgoing[r.slot] = r.coefficients
        got += len(records)
    # no translation may start before the whole schedule has arrived
    assert got == sum(len(s) for s in expected.values())
    barrier.wait()
    return got


def run_parallel(cloud, tree: Octree, cache: PrecomputeCache, partition: PartitionMap,
                 transport=None, mode: str = "threads", timeout: float = DEFAULT_TIMEOUT):
    """Run on ``partition.p`` worker threads; returns ``(potentials, report)``."""
    from .report import RunReport

    p = partition.p
    schedule = plan_exchanges(tree, partition)
    own_transport = transport is None
    if own_transport:
        transport = make_transport(mode, p + 1, timeout)
    barrier = threading.Barrier(p, timeout=timeout)
    results: dict[int, WorkerResult] = {}
    errors: list[BaseException] = []
    densities = [_worker_densities(tree, cloud, partition, schedule, q) for q in range(p)]

    def work(q):
        stats = CommStats()
        ep = transport.endpoint(q)
        times = {}
        received = {}
        try:
            engine = Engine(tree, cache, densities[q], partition.owned_by(q))
            t0 = time.perf_counter()
            engine.lf_upward()
            engine.hf_upward()
            tc = time.perf_counter()
            received["hf"] = _exchange(engine, ep, schedule, PHASE_HF, q, stats, barrier)
            comm = time.perf_counter() - tc
            engine.hf_downward()
            tc = time.perf_counter()
            received["lf"] = _exchange(engine, ep, schedule, PHASE_LF, q, stats, barrier)
            comm += time.perf_counter() - tc
            engine.lf_downward()
            times = dict(engine.times, comm=comm, total=time.perf_counter() - t0)
            leaves = [k for k in engine.tree.leaves() if engine._owned(k)]
            frame = encode_frame(PHASE_GATHER, (ChargeRecord(k, None, engine.potentials[tree.nodes[k].point_ids])
                                                for k in leaves))
            ep.send(p, frame)
            stats.record_send(q, p, PHASE_GATHER, len(frame))
            results[q] = WorkerResult(q, times, dict(engine.counts), stats, received)
        except threading.BrokenBarrierError:
            errors.append(TransportError(f"worker {q}: barrier broken by another worker"))
        except BaseException as exc:  # noqa: BLE001 - re-raised on the coordinator
            errors.append(exc)
            transport.aborted.set()
            barrier.abort()

    threads = [threading.Thread(target=work, args=(q,), name=f"dirfmm-worker-{q}")
               for q in range(p)]
    t_start = time.perf_counter()
    try:
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        wall = time.perf_counter() - t_start
        if errors:
            primary = [e for e in errors if not isinstance(e, TransportError)
                       or not ("barrier broken" in str(e) or "aborted" in str(e))]
            raise (primary or errors)[0]

        t_gather = time.perf_counter()
        potentials = np.full(len(cloud), np.nan + 0j, dtype=complex)
        coordinator = transport.endpoint(p)
        total = CommStats()
        for r in results.values():
            total.merge(r.stats)
        for _ in range(p):
            src, frame = coordinator.recv(PHASE_GATHER)
            total.record_receive(src, p, PHASE_GATHER, len(frame))
            for rec in decode_frame(frame)[1]:
                potentials[tree.nodes[rec.box].point_ids] = rec.coefficients
        gather = time.perf_counter() - t_gather
    finally:
        if own_transport:
            transport.close()
    if np.isnan(potentials).any():
        raise ProtocolError("gathered potentials do not cover every point")

    phase_times = {ph: max(r.times[ph] for r in results.values()) for ph in PHASES}
    phase_times["comm"] = max(r.times["comm"] for r in results.values())
    phase_times["total"] = wall
    phase_times["gather"] = gather
    counts = defaultdict(int)
    for r in results.values():
        for k, v in r.counts.items():
            counts[k] += v
    report = RunReport.from_run(tree, cache, potentials, p=p, mode=mode,
                                phase_times=phase_times, operation_counts=dict(counts),
                                comm=total.to_dict(),
                                worker_times={q: results[q].times for q in sorted(results)})
    return potentials, report
