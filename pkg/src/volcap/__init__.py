"""Volumetric RGBD capture toolkit: depth filtering, frame-pair sync, grid meshing, rigid alignment."""

from .alignment import FrameGraph, change_of_frame, fit_rigid
from .core import (
    CameraModel,
    ColorFrame,
    CorrespondenceSet,
    DepthFrame,
    FramePair,
    RigidTransform,
    ValidationError,
    VolcapError,
    read_stream,
    standard_camera,
    write_stream,
)
from .mesh_builder import GridMesh, export_ply, reconstruct
from .stream_sync import NetworkModel, SyncPolicy, simulate_network
from .synth_metrics import SceneSpec, generate_scene, standard_scene, stream_metrics
from .temporal_filter import FilterParams, TemporalFilter, filter_frame

__version__ = "0.1.0"

__all__ = [
    "CameraModel",
    "ColorFrame",
    "CorrespondenceSet",
    "DepthFrame",
    "FilterParams",
    "FrameGraph",
    "FramePair",
    "GridMesh",
    "NetworkModel",
    "RigidTransform",
    "SceneSpec",
    "SyncPolicy",
    "TemporalFilter",
    "ValidationError",
    "VolcapError",
    "change_of_frame",
    "export_ply",
    "filter_frame",
    "fit_rigid",
    "generate_scene",
    "read_stream",
    "reconstruct",
    "simulate_network",
    "standard_camera",
    "standard_scene",
    "stream_metrics",
    "write_stream",
]
