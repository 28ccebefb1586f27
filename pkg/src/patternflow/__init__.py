"""Incremental structured-light disparity estimation with pattern flow."""

from .estimator import (
    ABLATIONS,
    IncrementalEstimator,
    RefineParams,
    initialize,
    refine,
    run_sequence,
    warp_history,
)
from .evaluation import MetricsRow, UndefinedMetricError, avg_l1, bad_pixel_ratio, evaluate_maps, evaluate_sequence
from .flow import FlowMap, FlowParams, compute_pattern_flow, downsample
from .geometry import GeometryDomainError, RigModel, camera_to_pattern_x, depth_to_disparity, disparity_to_depth
from .manifest import SequenceManifest, read_manifest, write_manifest
from .maps import DisparityMap, Frame
from .pattern import Pattern, generate_pattern, load_pattern, sample_pattern, save_pattern, verify_row_uniqueness
from .preprocess import lcn
from .simulator import (
    FrontoPlane,
    Motion,
    NoiseModel,
    SceneSpec,
    Sphere,
    TiltedPlane,
    depth_at,
    gen_sequence,
    load_scene_file,
    render_frame,
)

__version__ = "0.1.0"
