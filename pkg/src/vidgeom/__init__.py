"""Dense geometric-consistency scoring for videos.

Given per-frame depth, camera intrinsics/poses, and pairwise optical flow,
the library computes per-pixel motion and structure inconsistency maps,
fuses them scale-invariantly, and aggregates them into frame- and
video-level scores.  It also ships exact synthetic benchmarks (rigid
scenes, thin-plate-spline deformations, occlusion inconsistencies),
detection/localization metrics, and analytic gradients of the scalar loss
with respect to the flow and depth inputs.
"""

from .camera_geometry import (
    DepthReprojection,
    FrameGeometry,
    Pinhole,
    RelativePose,
    backproject,
    bilinear_sample,
    covisibility_masks,
    project,
    relative_pose,
    rescale_geometry,
    rigid_flow,
)
from .consistency_metric import (
    ClipData,
    FrameScore,
    MemoryClip,
    PairMaps,
    VideoScore,
    compute_pair_maps,
    frame_level_scores,
    normalize_and_fuse,
    residual_motion,
    score_clip,
    score_window,
    structure_residual,
)
from .errors import (
    BehindCameraError,
    DomainError,
    FormatError,
    MissingInputError,
    SchemaError,
    ShapeError,
    SolveError,
    SpecError,
    ValidationError,
    VidgeomError,
)
from .evaluation import (
    LocalizationCase,
    MotionStats,
    anomaly_argmax,
    best_threshold_iou_f1,
    macro_average,
    motion_stats,
    ranking_ap,
    srcc,
)
from .metric_gradients import LossGradient, LossSpec, loss_geo, loss_geo_backward
from .tensor_io import (
    ClipManifest,
    Raster2D,
    load_manifest,
    read_raster,
    save_manifest,
    write_clip_tree,
    write_raster,
)
from .warp_synth import (
    DeformClipSpec,
    GroundTruthField,
    TpsWarp,
    displacement_field,
    evaluate_warp,
    farthest_point_sample,
    fit_tps,
    generate_warp_clip,
    warp_frame,
)

__version__ = "0.1.0"
