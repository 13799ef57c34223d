"""Command-line entry point: ``volcap <subcommand> [options]``.

Exit codes
    0  success
    1  unexpected internal error
    2  bad input: missing file, invalid config or parameter, too few correspondences,
       frame size not matching the camera model
    3  malformed or inconsistent ``.vmsh`` stream
    4  numerical failure: degenerate correspondences, singular distortion, no frame path
    5  output could not be written

A failure inside ``pipeline`` keeps the code of its underlying cause and
names the failing stage and frame in the message.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import AlignmentError, ArityError, fit_rigid, point_errors, residual
from .core import (
    StreamError,
    ValidationError,
    iter_stream,
    read_correspondences,
    write_stream,
)
from .mesh_builder import ShapeError, export_ply
from .pipeline import (
    PipelineConfig,
    StageError,
    load_config,
    mesh_chain,
    run_bench,
    run_pipeline,
)
from .projection import DistortionSingularityError
from .stream_sync import OrderingError as SyncOrderingError
from .stream_sync import decimate, simulate_network, write_decisions
from .synth_metrics import generate_scene, load_scene_spec, stream_metrics
from .temporal_filter import filter_stream

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2
EXIT_STREAM = 3
EXIT_NUMERIC = 4
EXIT_OUTPUT = 5

# CLI flag (argparse dest) -> (config section, field)
_SECTION_FLAGS = {
    "historic_ms": ("filter", "historic_window_ms"),
    "small_n": ("filter", "small_n"),
    "small_mm": ("filter", "small_threshold_mm"),
    "large_n2": ("filter", "large_n2"),
    "large_lambda_mm": ("filter", "large_lambda_mm"),
    "large_ratio": ("filter", "large_ratio"),
    "hold_source": ("filter", "hold_source"),
    "wait_ms": ("sync", "out_of_order_wait_ms"),
    "max_lag_ms": ("sync", "max_lag_ms"),
}
_CHANNEL_FLAGS = {"loss": "loss_rate", "latency_ms": "latency_ms", "jitter_ms": "jitter_ms"}


def exit_code_for(err: BaseException) -> int:
    if isinstance(err, StageError) and err.__cause__ is not None:
        return exit_code_for(err.__cause__)
    if isinstance(err, (FileNotFoundError, ValidationError, ArityError, ShapeError)):
        return EXIT_INPUT
    if isinstance(err, (StreamError, SyncOrderingError)):
        return EXIT_STREAM
    if isinstance(err, (AlignmentError, DistortionSingularityError)):
        return EXIT_NUMERIC
    if isinstance(err, OSError):
        return EXIT_OUTPUT
    return EXIT_INTERNAL


def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common")
    g.add_argument("--config", help="pipeline config JSON; flags override its fields")
    g.add_argument("--seed", type=int, help="seed for scene synthesis and network draws")
    g.add_argument("--out", help="output file or directory")
    g.add_argument("--camera", help="camera model JSON (default: built-in 320x288 pinhole)")
    g.add_argument("--input", help=".vmsh stream to read instead of synthesising a scene")
    g.add_argument("--frames", type=int, help="number of frames to synthesise or benchmark")

    f = p.add_argument_group("temporal filter")
    f.add_argument("--historic-ms", type=float, help="historic fill window (ms)")
    f.add_argument("--small-n", type=int, help="small-jitter moving-average length (frames)")
    f.add_argument("--small-mm", type=float, help="small-jitter tolerance (mm)")
    f.add_argument("--large-n2", type=int, help="large-jitter history length (frames)")
    f.add_argument("--large-lambda-mm", type=float, help="large-jitter change threshold (mm)")
    f.add_argument("--large-ratio", type=float, help="large-jitter change-rate trigger")
    f.add_argument("--hold-source", choices=("output", "raw"), help="value reused by the jitter holds")

    s = p.add_argument_group("sync / network")
    s.add_argument("--wait-ms", type=float, help="out-of-order wait before skipping (ms)")
    s.add_argument("--max-lag-ms", type=float, help="renderer lag that triggers a jump (ms)")
    s.add_argument("--loss", type=float, help="packet loss rate on both channels")
    s.add_argument("--latency-ms", type=float, help="mean one-way latency on both channels (ms)")
    s.add_argument("--jitter-ms", type=float, help="latency std-dev on both channels (ms)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="volcap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"volcap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic RGBD stream")
    p.add_argument("--spec", help="scene spec JSON (default: standard noisy flat plane)")

    sub.add_parser("filter", parents=[common], help="temporally filter a stream; print stability metrics")
    sub.add_parser("sync", parents=[common], help="simulate delivery of a stream; write decisions.csv")

    p = sub.add_parser("mesh", parents=[common], help="mesh every frame of a stream to PLY")
    p.add_argument("--frame", type=int, help="only mesh this frame number")
    p.add_argument("--no-refine", action="store_true", help="skip edge-vertex refinement")

    p = sub.add_parser("align", parents=[common], help="fit a rigid transform to correspondences")
    p.add_argument("correspondences", help="CSV with columns ax,ay,az,bx,by,bz")

    sub.add_parser("pipeline", parents=[common], help="synth/read -> filter -> sync -> mesh -> export")
    sub.add_parser("bench", parents=[common], help="per-frame latency report")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Config file (if any) with every given flag applied on top."""
    cfg = load_config(args.config) if args.config else PipelineConfig()
    top = {}
    for name in ("seed", "camera", "input"):
        if getattr(args, name, None) is not None:
            top[name] = getattr(args, name)
    if getattr(args, "spec", None):
        top["scene"] = load_scene_spec(_existing(args.spec, "scene spec"))
    if args.frames is not None:
        top["scene"] = replace(top.get("scene", cfg.scene), frames=args.frames)
        top["bench_frames"] = args.frames
    sections: dict[str, dict] = {}
    for dest, (section, fld) in _SECTION_FLAGS.items():
        val = getattr(args, dest, None)
        if val is not None:
            sections.setdefault(section, {})[fld] = val
    for section, changes in sections.items():
        top[section] = replace(getattr(cfg, section), **changes)
    chan = {fld: getattr(args, dest) for dest, fld in _CHANNEL_FLAGS.items() if getattr(args, dest) is not None}
    if chan:
        net = cfg.network
        top["network"] = replace(net, depth=replace(net.depth, **chan), color=replace(net.color, **chan))
    if args.command == "pipeline" and args.out is not None:
        top["out"] = args.out
    return replace(cfg, **top).validate()


def _existing(path: str, what: str) -> str:
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} file not found: {path}")
    return path


def _require_input(cfg: PipelineConfig) -> str:
    if cfg.input is None:
        raise ValidationError("this command needs --input <stream.vmsh> (or 'input' in the config)")
    return cfg.input


def _print_json(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def cmd_synth(args, cfg: PipelineConfig) -> None:
    model = cfg.camera_model()
    out = args.out or "scene.vmsh"
    n = write_stream(generate_scene(replace(cfg.scene, seed=cfg.seed), model), out)
    _print_json({"out": out, "frames": n})


def cmd_filter(args, cfg: PipelineConfig) -> None:
    raw = list(iter_stream(_require_input(cfg)))
    filtered = list(filter_stream((p.depth for p in raw), cfg.filter))
    pairs = [replace(p, depth=d) for p, d in zip(raw, filtered)]
    if args.out:
        write_stream(pairs, args.out)
    metrics = stream_metrics([p.depth for p in raw], filtered) if len(raw) >= 2 else {}
    _print_json({"frames": len(raw), "out": args.out, **metrics})


def cmd_sync(args, cfg: PipelineConfig) -> None:
    pairs = list(iter_stream(_require_input(cfg)))
    sim = simulate_network(decimate(pairs, cfg.sync), cfg.network_model(), cfg.sync)
    out = args.out or "decisions.csv"
    write_decisions(sim.decisions, out)
    _print_json({"out": out, **sim.stats.to_json()})


def cmd_mesh(args, cfg: PipelineConfig) -> None:
    model = cfg.camera_model()
    out = Path(args.out or "meshes")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for pair in iter_stream(_require_input(cfg)):
        if args.frame is not None and pair.frame_number != args.frame:
            continue
        try:
            mesh = mesh_chain(pair, model, refine=cfg.stages.refine and not args.no_refine)
            path = out / f"frame_{pair.frame_number:06d}.ply"
            export_ply(mesh, path)
        except Exception as e:
            raise StageError("mesh", pair.frame_number, e) from e
        written.append({"frame": pair.frame_number, "file": str(path), "triangles": int(mesh.tri_mask.sum())})
    if args.frame is not None and not written:
        raise ValidationError(f"frame {args.frame} is not in the stream")
    _print_json({"out": str(out), "meshes": written})


def cmd_align(args, cfg: PipelineConfig) -> None:
    corr = read_correspondences(_existing(args.correspondences, "correspondence"))
    T = fit_rigid(corr)
    doc = {
        **T.to_json(),
        "residual_m2": residual(corr, T),
        "point_errors_m": point_errors(corr, T).tolist(),
        "mean_error_m": float(np.mean(point_errors(corr, T))),
    }
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    _print_json(doc)


def cmd_pipeline(args, cfg: PipelineConfig) -> None:
    result = run_pipeline(cfg)
    m = result.metrics
    _print_json({"out": cfg.out, "frames": m["frames"], "meshes": len(m["meshes"]), "sync": m["sync"]})


def cmd_bench(args, cfg: PipelineConfig) -> None:
    report = run_bench(cfg)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    _print_json({k: v for k, v in report.items() if k != "mesh_hashes"})


COMMANDS = {
    "synth": cmd_synth,
    "filter": cmd_filter,
    "sync": cmd_sync,
    "mesh": cmd_mesh,
    "align": cmd_align,
    "pipeline": cmd_pipeline,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except Exception as e:  # noqa: BLE001 - mapped to a documented exit code
        code = exit_code_for(e)
        label = "internal error" if code == EXIT_INTERNAL else "error"
        print(f"volcap {args.command}: {label}: {e}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
