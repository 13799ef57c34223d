"""Staged end-to-end runner and benchmark.

Producer side: read or synthesise frame pairs, then temporally filter depth.
Filtered depth crosses the producer/consumer boundary as serialised records.
Consumer side: decimate to the delivery rate, simulate the two-channel
network and sync policy, then mesh and export every rendered frame.

Stages run in their own threads and hand frames on through bounded FIFO
queues, so memory stays bounded and frame order is preserved.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
import queue
import threading
import time
from collections.abc import Callable, Iterable
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .core import (
    CameraModel,
    FramePair,
    ValidationError,
    VolcapError,
    decode_depth,
    encode_depth,
    iter_stream,
    load_camera_model,
    standard_camera,
)
from .mesh_builder import GridMesh, ply_bytes, reconstruct
from .stream_sync import (
    Action,
    ChannelModel,
    NetworkModel,
    SyncPolicy,
    decimate,
    decisions_csv,
    simulate_network,
)
from .synth_metrics import SceneSpec, generate_scene, standard_scene, stream_metrics
from .temporal_filter import FilterParams, PixelHistory, filter_frame

_DONE = object()


class StageError(VolcapError):
    """A pipeline stage failed; ``__cause__`` holds the original error."""

    def __init__(self, stage: str, frame_number: int | None, cause: BaseException):
        where = f" at frame {frame_number}" if frame_number is not None else ""
        super().__init__(f"stage '{stage}' failed{where}: {cause}")
        self.stage = stage
        self.frame_number = frame_number
        self.__cause__ = cause


@dataclass(frozen=True)
class StageFlags:
    filter: bool = True
    refine: bool = True
    export: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    camera: str | None = None  # JSON camera model; None selects the built-in pinhole model
    input: str | None = None  # .vmsh stream; None synthesises ``scene``
    out: str = "run"
    seed: int = 7  # drives both the synthetic scene and the network draws
    scene: SceneSpec = field(default_factory=standard_scene)
    filter: FilterParams = field(default_factory=FilterParams)
    sync: SyncPolicy = field(default_factory=SyncPolicy)
    network: NetworkModel = field(default_factory=NetworkModel)
    stages: StageFlags = field(default_factory=StageFlags)
    queue_capacity: int = 4
    bench_frames: int = 100

    def validate(self) -> PipelineConfig:
        for name in ("camera", "input"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise FileNotFoundError(f"{name} file not found: {path}")
        if self.queue_capacity < 1:
            raise ValidationError("queue_capacity must be >= 1")
        if self.bench_frames < 1:
            raise ValidationError("bench_frames must be >= 1")
        return self

    def camera_model(self) -> CameraModel:
        return load_camera_model(self.camera) if self.camera else standard_camera()

    def network_model(self) -> NetworkModel:
        return replace(self.network, seed=self.seed)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["network"].pop("seed")
        return doc

    @classmethod
    def from_json(cls, doc: dict, base_dir: str | os.PathLike | None = None) -> PipelineConfig:
        doc = dict(doc)
        _reject_unknown(cls, doc, "config")
        kw: dict[str, Any] = {}
        for name in ("camera", "input"):
            if doc.get(name) is not None:
                p = Path(doc[name])
                kw[name] = str(p if p.is_absolute() or base_dir is None else Path(base_dir) / p)
        for name in ("out", "seed", "queue_capacity", "bench_frames"):
            if name in doc:
                kw[name] = doc[name]
        if "scene" in doc:
            kw["scene"] = SceneSpec.from_json(doc["scene"])
        for name, typ in (("filter", FilterParams), ("sync", SyncPolicy), ("stages", StageFlags)):
            if name in doc:
                _reject_unknown(typ, doc[name], name)
                kw[name] = typ(**doc[name])
        if "network" in doc:
            net = dict(doc["network"])
            _reject_unknown(NetworkModel, net, "network")
            kw["network"] = NetworkModel(
                **{ch: ChannelModel(**net[ch]) for ch in ("depth", "color") if ch in net}
            )
        return cls(**kw)


def _reject_unknown(cls, doc: dict, where: str) -> None:
    known = {f.name for f in fields(cls)}
    extra = sorted(set(doc) - known)
    if extra:
        raise ValidationError(f"{where}: unknown field(s) {', '.join(extra)}")


def load_config(path: str | os.PathLike) -> PipelineConfig:
    if not Path(path).is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: invalid JSON ({e})") from None
    try:
        return PipelineConfig.from_json(doc, Path(path).parent)
    except TypeError as e:
        raise ValidationError(f"{path}: {e}") from None


# -- stage plumbing -----------------------------------------------------------


class _Stage(threading.Thread):
    """Consume items from ``inbox`` (or a source iterable), emit into ``outbox``."""

    def __init__(self, name: str, work: Callable, inbox, outbox: queue.Queue | None):
        super().__init__(name=f"volcap-{name}", daemon=True)
        self.stage = name
        self.work = work
        self.inbox = inbox
        self.outbox = outbox
        self.error: StageError | None = None
        self.frame: int | None = None

    def _items(self):
        if not isinstance(self.inbox, queue.Queue):
            yield from self.inbox
            return
        while True:
            item = self.inbox.get()
            if item is _DONE:
                return
            yield item

    def run(self):
        try:
            for out in self.work(self._items(), self):
                if self.outbox is not None:
                    self.outbox.put(out)
        except StageError as e:
            self.error = e
        except Exception as e:  # noqa: BLE001 - re-raised by the caller with stage context
            self.error = StageError(self.stage, self.frame, e)
        finally:
            if self.outbox is not None:
                self.outbox.put(_DONE)
            # unblock an upstream producer if we stopped early
            if self.error is not None and isinstance(self.inbox, queue.Queue):
                while self.inbox.get() is not _DONE:
                    pass


def _run_stages(specs: list[tuple[str, Callable]], source: Iterable, capacity: int) -> None:
    inbox = source
    stages = []
    for k, (name, work) in enumerate(specs):
        outbox = queue.Queue(maxsize=capacity) if k < len(specs) - 1 else None
        stages.append(_Stage(name, work, inbox, outbox))
        inbox = outbox
    for s in stages:
        s.start()
    for s in stages:
        s.join()
    for s in stages:
        if s.error is not None:
            raise s.error


def _percentiles(samples_ms: list[float]) -> dict:
    if not samples_ms:
        return {"n": 0, "median_ms": None, "p95_ms": None}
    a = np.asarray(samples_ms)
    return {
        "n": len(a),
        "median_ms": float(np.median(a)),
        "p95_ms": float(np.percentile(a, 95)),
    }


def mesh_chain(pair: FramePair, model: CameraModel, refine: bool = True) -> GridMesh:
    """The timed consumer chain: build, feather, refine, prune."""
    return reconstruct(pair, model, refine)


def mesh_digest(mesh: GridMesh) -> str:
    h = hashlib.sha256()
    for a in (mesh.positions, mesh.colors, mesh.alpha, mesh.valid, mesh.tri_mask):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def source_pairs(config: PipelineConfig, model: CameraModel) -> Iterable[FramePair]:
    if config.input is not None:
        return iter_stream(config.input)
    return generate_scene(replace(config.scene, seed=config.seed), model)


# -- pipeline -----------------------------------------------------------------


@dataclass
class PipelineResult:
    metrics: dict
    decisions_csv: str
    meshes: dict[int, bytes]  # frame number -> PLY bytes


def run_pipeline(config: PipelineConfig, write: bool = True) -> PipelineResult:
    """Run every stage; with ``write`` the outputs land in ``config.out``."""
    config.validate()
    model = config.camera_model()
    raw_depth: list = []
    filtered_depth: list = []
    timing: dict[str, list[float]] = {"filter": [], "mesh": [], "export": []}
    sim_holder: dict = {}
    meshes: dict[int, bytes] = {}
    out_dir = Path(config.out)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)

    def read_stage(items, st):
        for pair in source_pairs(config, model):
            st.frame = pair.frame_number
            yield pair

    def filter_stage(items, st):
        history = PixelHistory(config.filter)
        for pair in items:
            st.frame = pair.frame_number
            raw_depth.append(pair.depth.data)
            t0 = time.perf_counter()
            depth = filter_frame(pair.depth, history, config.filter) if config.stages.filter else pair.depth
            timing["filter"].append((time.perf_counter() - t0) * 1e3)
            filtered_depth.append(depth.data)
            # the producer/consumer seam: depth crosses as a serialised record
            yield encode_depth(depth), pair.color

    def sync_stage(items, st):
        pairs = []
        for blob, color in items:
            depth = decode_depth(blob)
            st.frame = depth.frame_number
            pairs.append(FramePair(depth, color))
        st.frame = None
        t0 = time.perf_counter()
        sim = simulate_network(decimate(pairs, config.sync), config.network_model(), config.sync)
        timing["sync_total_ms"] = [(time.perf_counter() - t0) * 1e3]
        sim_holder["sim"] = sim
        by_number = {p.frame_number: p for p in pairs}
        for d in sim.decisions:
            if d.action in (Action.RENDER, Action.JUMP_TO):
                yield by_number[d.frame_number]

    def mesh_stage(items, st):
        for pair in items:
            st.frame = pair.frame_number
            t0 = time.perf_counter()
            mesh = mesh_chain(pair, model, refine=config.stages.refine)
            timing["mesh"].append((time.perf_counter() - t0) * 1e3)
            if config.stages.export:
                t0 = time.perf_counter()
                data = ply_bytes(mesh)
                meshes[pair.frame_number] = data
                if write:
                    (out_dir / f"frame_{pair.frame_number:06d}.ply").write_bytes(data)
                timing["export"].append((time.perf_counter() - t0) * 1e3)
        yield from ()

    _run_stages(
        [("read", read_stage), ("filter", filter_stage), ("sync", sync_stage), ("mesh", mesh_stage)],
        [None],
        config.queue_capacity,
    )

    sim = sim_holder["sim"]
    metrics = {
        "frames": len(raw_depth),
        "seed": config.seed,
        "filter": stream_metrics(np.stack(raw_depth), np.stack(filtered_depth)) if len(raw_depth) >= 2 else None,
        "sync": sim.stats.to_json(),
        "meshes": [
            {"frame": n, "file": f"frame_{n:06d}.ply", "sha256": hashlib.sha256(b).hexdigest()}
            for n, b in meshes.items()
        ],
        "timing": {
            "filter_frame": _percentiles(timing["filter"]),
            "mesh_chain": _percentiles(timing["mesh"]),
            "export": _percentiles(timing["export"]),
            "sync_total_ms": timing.get("sync_total_ms", [None])[0],
        },
    }
    csv_text = decisions_csv(sim.decisions)
    if write:
        (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        (out_dir / "decisions.csv").write_text(csv_text)
    return PipelineResult(metrics, csv_text, meshes)


def deterministic_metrics(metrics: dict) -> dict:
    """``metrics`` without the wall-clock ``timing`` section."""
    return {k: v for k, v in metrics.items() if k != "timing"}


# -- benchmark ----------------------------------------------------------------


def machine_info() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor() or None,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
    }


def run_bench(config: PipelineConfig, frames: int | None = None) -> dict:
    """Per-frame latency of ``filter_frame`` and of the mesh chain at the camera's depth size.

    The first frame is run once untimed to warm caches (projector tables).
    Fewer than 100 samples are flagged ``low_confidence``.
    """
    config.validate()
    n = frames if frames is not None else config.bench_frames
    if n < 1:
        raise ValidationError("bench needs at least one frame")
    model = config.camera_model()
    scene = replace(config.scene, frames=n, seed=config.seed)
    pairs = list(source_pairs(replace(config, scene=scene), model))[:n]
    mesh_chain(pairs[0], model, refine=config.stages.refine)

    history = PixelHistory(config.filter)
    f_ms, m_ms, hashes = [], [], []
    for pair in pairs:
        t0 = time.perf_counter()
        filter_frame(pair.depth, history, config.filter)
        f_ms.append((time.perf_counter() - t0) * 1e3)
        t0 = time.perf_counter()
        mesh = mesh_chain(pair, model, refine=config.stages.refine)
        m_ms.append((time.perf_counter() - t0) * 1e3)
        hashes.append(mesh_digest(mesh))
    w, h = model.depth_size
    return {
        "frames": len(pairs),
        "grid": [w, h],
        "low_confidence": len(pairs) < 100,
        "filter_frame": _percentiles(f_ms),
        "mesh_chain": _percentiles(m_ms),
        "mesh_hashes": hashes,
        "machine": machine_info(),
    }
