"""Multi-tenant inference server with per-request Submodel loading.

The Basemodel is deserialized once and stays resident.  Each request names a
speaker; that speaker's Submodel is fetched through an LRU cache (loading
from the store on a miss) and fed to the forward pass as side-input weights.
A null speaker runs the Basemodel with the Submodel path disabled.

Wire protocol: one UTF-8 JSON object per line in each direction.
"""

from __future__ import annotations

import json
import logging
import math
import socket
import socketserver
import statistics
import threading
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import F32
from .errors import DimensionMismatch, FormatError, StoreError, SubmodelError, UnknownSpeaker
from .model import Basemodel, BasemodelConfig, Submodel, count_params, forward_with_submodel, serialized_size
from .store import SubmodelStore, load_basemodel, save_basemodel

log = logging.getLogger(__name__)


def _bucket(micros: int) -> str:
    edge = 1
    while edge < micros:
        edge *= 2
    return f"<={edge}"


class _Flight:
    def __init__(self):
        self.done = threading.Event()
        self.value: Submodel | None = None
        self.error: BaseException | None = None


class SubmodelCache:
    """LRU cache of activated Submodels with single-flight loading."""

    def __init__(self, store: SubmodelStore, capacity: int = 8, expected: BasemodelConfig | None = None):
        if capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        self.store = store
        self.capacity = capacity
        self.expected = expected
        self._entries: OrderedDict[int, Submodel] = OrderedDict()
        self._inflight: dict[int, _Flight] = {}
        self._lock = threading.Lock()
        self.hits = self.misses = self.evictions = self.coalesced = 0
        self.cold_load_micros: dict[str, int] = {}

    def _activate(self, sub: Submodel) -> Submodel:
        if any(a.alpha == 0.0 for a in sub.layers):
            log.warning("speaker %s: stored residual factor is 0; enabling it for serving", sub.speaker_id)
        return sub.with_alpha(1.0) if any(a.alpha != 1.0 for a in sub.layers) else sub

    def get(self, speaker_id: int) -> tuple[Submodel, bool, int]:
        """Returns ``(submodel, cache_hit, load_micros)``; load_micros is 0 on a hit."""
        with self._lock:
            sub = self._entries.get(speaker_id)
            if sub is not None:
                self._entries.move_to_end(speaker_id)
                self.hits += 1
                return sub, True, 0
            flight = self._inflight.get(speaker_id)
            leader = flight is None
            if leader:
                flight = self._inflight[speaker_id] = _Flight()
        t0 = time.perf_counter_ns()
        if not leader:
            flight.done.wait()
            with self._lock:
                self.coalesced += 1
            if flight.error is not None:
                raise flight.error
            return flight.value, False, max(1, (time.perf_counter_ns() - t0) // 1000)
        try:
            sub = self._activate(self.store.load(speaker_id, self.expected))
        except BaseException as exc:
            flight.error = exc
            with self._lock:
                del self._inflight[speaker_id]
            flight.done.set()
            raise
        micros = max(1, (time.perf_counter_ns() - t0) // 1000)
        with self._lock:
            self.misses += 1
            self._entries[speaker_id] = sub
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
                self.evictions += 1
            key = _bucket(micros)
            self.cold_load_micros[key] = self.cold_load_micros.get(key, 0) + 1
            del self._inflight[speaker_id]
        flight.value = sub
        flight.done.set()
        return sub, False, micros

    def touch(self, speaker_id: int) -> None:
        """Mark a completed request so eviction follows completion order."""
        with self._lock:
            if speaker_id in self._entries:
                self._entries.move_to_end(speaker_id)

    def evict(self, speaker_id: int) -> bool:
        with self._lock:
            return self._entries.pop(speaker_id, None) is not None

    def resident(self) -> list[int]:
        with self._lock:
            return list(self._entries)

    def stats(self) -> dict:
        with self._lock:
            return {"hits": self.hits, "misses": self.misses, "evictions": self.evictions,
                    "coalesced": self.coalesced, "resident": len(self._entries),
                    "capacity": self.capacity, "cold_load_micros": dict(self.cold_load_micros)}


def _error(code: str, message: str) -> dict:
    return {"type": "error", "code": code, "message": message}


def _parse_speaker(value) -> int | None:
    if value is None:
        return None
    if isinstance(value, bool):
        raise ValueError("speaker must be a string id or null")
    if isinstance(value, int):
        return value
    if isinstance(value, str) and value.isdigit():
        return int(value)
    raise ValueError(f"malformed speaker id {value!r}")


class InferenceServer:
    """Request handling independent of transport; see :func:`serve` for the socket side."""

    def __init__(self, base_path: str | Path, store_root: str | Path, capacity: int = 8):
        self.store = SubmodelStore(store_root)
        self.base = load_basemodel(base_path)
        self.base_loads = 1
        self.cache = SubmodelCache(self.store, capacity, self.base.config)
        self._count_lock = threading.Lock()
        self.requests = 0
        self.errors = 0
        self.shutdown_requested = threading.Event()

    def handle(self, msg) -> dict:
        with self._count_lock:
            self.requests += 1
        resp = self._dispatch(msg)
        if resp["type"] == "error":
            with self._count_lock:
                self.errors += 1
        return resp

    def handle_line(self, line: str) -> str:
        try:
            msg = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            with self._count_lock:
                self.requests += 1
                self.errors += 1
            return json.dumps(_error("BAD_REQUEST", f"invalid JSON: {exc}"))
        return json.dumps(self.handle(msg))

    def _dispatch(self, msg) -> dict:
        if not isinstance(msg, dict):
            return _error("BAD_REQUEST", "request must be a JSON object")
        kind = msg.get("type")
        if kind == "infer":
            return self.handle_request(msg)
        if kind == "stats":
            return self.stats()
        if kind == "evict":
            try:
                sid = _parse_speaker(msg.get("speaker"))
            except ValueError as exc:
                return _error("BAD_REQUEST", str(exc))
            return {"type": "ack", "op": "evict", "evicted": sid is not None and self.cache.evict(sid)}
        if kind == "shutdown":
            self.shutdown_requested.set()
            return {"type": "ack", "op": "shutdown"}
        return _error("BAD_REQUEST", f"unknown message type {kind!r}")

    def handle_request(self, msg: dict) -> dict:
        try:
            sid = _parse_speaker(msg.get("speaker"))
        except ValueError as exc:
            return _error("BAD_REQUEST", str(exc))
        frames = msg.get("frames")
        if not isinstance(frames, list):
            return _error("BAD_REQUEST", "frames must be a list of frames")
        d_in = self.base.config.d_in
        try:
            x = np.array(frames, dtype=F32)
        except (ValueError, TypeError) as exc:
            return _error("DIM_MISMATCH", f"frames are not a rectangular numeric array: {exc}")
        if len(frames) == 0:
            x = x.reshape(0, d_in)
        if x.ndim != 2 or x.shape[1] != d_in:
            return _error("DIM_MISMATCH", f"frames have shape {x.shape}, expected (n, {d_in})")
        if not np.all(np.isfinite(x)):
            return _error("BAD_REQUEST", "frames contain non-finite values")
        sub, hit, micros = None, False, 0
        if sid is not None:
            try:
                sub, hit, micros = self.cache.get(sid)
            except UnknownSpeaker as exc:
                return _error("UNKNOWN_SPEAKER", str(exc))
            except DimensionMismatch as exc:
                return _error("DIM_MISMATCH", str(exc))
            except (FormatError, StoreError, OSError) as exc:
                return _error("STORE_ERROR", str(exc))
        out = forward_with_submodel(self.base, sub, x) if len(x) else x.reshape(0, self.base.config.d_out)
        if sid is not None:
            self.cache.touch(sid)
        return {"type": "result", "frames": out.astype(np.float64).tolist(), "cache_hit": hit,
                "load_micros": int(micros), "submodel": "none" if sid is None else str(sid)}

    def stats(self) -> dict:
        with self._count_lock:
            counts = {"requests": self.requests, "errors": self.errors}
        return {"type": "stats", "base_loads": self.base_loads, **counts, **self.cache.stats()}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        app: InferenceServer = self.server.app
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            self.wfile.write(app.handle_line(line).encode() + b"\n")
            self.wfile.flush()
            if app.shutdown_requested.is_set():
                threading.Thread(target=self.server.shutdown, daemon=True).start()
                return


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class RunningServer:
    def __init__(self, app: InferenceServer, tcp: _TCPServer, thread: threading.Thread | None):
        self.app = app
        self.tcp = tcp
        self.thread = thread

    @property
    def address(self) -> tuple[str, int]:
        return self.tcp.server_address[:2]

    def wait(self) -> None:
        if self.thread is not None:
            self.thread.join()

    def stop(self) -> None:
        self.tcp.shutdown()
        self.tcp.server_close()
        self.wait()


def parse_bind(bind: str) -> tuple[str, int]:
    host, _, port = bind.rpartition(":")
    return host or "127.0.0.1", int(port)


def serve(base_path: str | Path, store_root: str | Path, capacity: int = 8,
          bind: str = "127.0.0.1:0", background: bool = True) -> RunningServer:
    """Start the line-protocol server.  With ``background=False`` this blocks until shutdown."""
    app = InferenceServer(base_path, store_root, capacity)
    tcp = _TCPServer(parse_bind(bind), _Handler)
    tcp.app = app
    if not background:
        running = RunningServer(app, tcp, None)
        try:
            tcp.serve_forever()
        finally:
            tcp.server_close()
        return running
    thread = threading.Thread(target=tcp.serve_forever, name="submodel-server", daemon=True)
    thread.start()
    return RunningServer(app, tcp, thread)


class Client:
    """Minimal blocking client for the line protocol."""

    def __init__(self, address: tuple[str, int], timeout: float = 30.0):
        self.sock = socket.create_connection(address, timeout=timeout)
        self.reader = self.sock.makefile("rb")

    def call(self, msg: dict) -> dict:
        self.sock.sendall(json.dumps(msg).encode() + b"\n")
        line = self.reader.readline()
        if not line:
            raise ConnectionError("server closed the connection")
        return json.loads(line)

    def close(self) -> None:
        self.reader.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --------------------------------------------------------------------------
# load benchmark
# --------------------------------------------------------------------------

@dataclass
class BenchReport:
    k: int
    submodel_cold_mean_us: float
    submodel_cold_std_us: float
    submodel_warm_mean_us: float
    submodel_warm_std_us: float
    warm_load_micros_max: int
    base_reload_mean_us: float
    base_reload_std_us: float
    ratio: float
    submodel_bytes: int
    base_bytes: int

    @property
    def size_ratio(self) -> float:
        return self.base_bytes / self.submodel_bytes

    def to_dict(self) -> dict:
        return {**asdict(self), "size_ratio": self.size_ratio}

    def to_text(self) -> str:
        return (f"k={self.k}\n"
                f"submodel cold load: {self.submodel_cold_mean_us / 1000:.3f} +/- "
                f"{self.submodel_cold_std_us / 1000:.3f} ms ({self.submodel_bytes} bytes)\n"
                f"submodel warm (cache hit): {self.submodel_warm_mean_us:.1f} +/- "
                f"{self.submodel_warm_std_us:.1f} us, load_micros max {self.warm_load_micros_max}\n"
                f"base reload: {self.base_reload_mean_us / 1000:.3f} +/- "
                f"{self.base_reload_std_us / 1000:.3f} ms ({self.base_bytes} bytes)\n"
                f"ratio base/submodel: {self.ratio:.1f}x (size ratio {self.size_ratio:.1f}x)\n")


def _mean_std(values) -> tuple[float, float]:
    values = list(values)
    return statistics.fmean(values), (statistics.stdev(values) if len(values) > 1 else 0.0)


def bench_load(store_root: str | Path, base_path: str | Path, k: int = 100,
               speaker_ids: list[int] | None = None, capacity: int = 8) -> BenchReport:
    """Per-request load latency: cold Submodel load vs warm hit vs full Basemodel reload.

    Cold loads evict the speaker through the admin message first, so each one
    pays disk read + parse + activation.
    """
    if k < 10:
        raise ValueError("bench_load: k must be >= 10")
    app = InferenceServer(base_path, store_root, capacity)
    ids = speaker_ids or app.store.speaker_ids()
    if not ids:
        raise StoreError(f"store {store_root} is empty")
    frame = [[0.0] * app.base.config.d_in]
    cold, warm, warm_micros = [], [], []
    for i in range(k):
        sid = str(ids[i % len(ids)])
        app.handle({"type": "evict", "speaker": sid})
        resp = app.handle({"type": "infer", "speaker": sid, "frames": frame})
        if resp["type"] != "result":
            raise StoreError(f"bench request failed: {resp}")
        cold.append(resp["load_micros"])
        t0 = time.perf_counter_ns()
        app.cache.get(int(sid))
        warm.append((time.perf_counter_ns() - t0) / 1000)
        resp = app.handle({"type": "infer", "speaker": sid, "frames": frame})
        warm_micros.append(resp["load_micros"])
    reload = []
    for _ in range(k):
        t0 = time.perf_counter_ns()
        load_basemodel(base_path)
        reload.append((time.perf_counter_ns() - t0) / 1000)
    cm, cs = _mean_std(cold)
    wm, ws = _mean_std(warm)
    bm, bs = _mean_std(reload)
    return BenchReport(k, cm, cs, wm, ws, max(warm_micros), bm, bs, bm / cm if cm else math.inf,
                       app.store.path_for(int(ids[0])).stat().st_size, Path(base_path).stat().st_size)


REFERENCE_SIZE_RATIO = 668 / 4.6


def build_bench_fixture(root: str | Path, d_model: int = 256, d_b: int = 32, n_layers: int = 8,
                        size_ratio: float = REFERENCE_SIZE_RATIO, n_speakers: int = 8,
                        seed: int = 0) -> tuple[Path, Path]:
    """Write an untrained Basemodel and ``n_speakers`` Submodels whose on-disk sizes
    differ by ``size_ratio`` (default: a 668MB full model vs a 4.6MB Submodel).

    Returns ``(store_root, base_path)``.  Weights are random: only sizes matter here.
    """
    root = Path(root)
    sub_bytes = serialized_size(count_params(d_model, d_b, n_layers))
    fixed = 16 * d_model + d_model + n_layers * 3 * d_model + d_model * 16 + 16
    per_ff = n_layers * (2 * d_model + 1)
    d_ff = max(1, math.ceil(((size_ratio * sub_bytes - 40) / 4 - fixed) / per_ff))
    base = Basemodel.init(BasemodelConfig(16, d_model, d_ff, n_layers, 16, seed))
    root.mkdir(parents=True, exist_ok=True)
    base_path = root / "base.base"
    save_basemodel(base, base_path)
    st = SubmodelStore(root / "store", create=True)
    for s in range(1, n_speakers + 1):
        st.save(Submodel.init(s, d_model, d_b, n_layers, seed=seed + s))
    return st.root, base_path
