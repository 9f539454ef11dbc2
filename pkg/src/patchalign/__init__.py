"""Joint patch-descriptor learning and homography alignment for a single
image pair, with evaluation utilities and a command-line interface."""

from .errors import (
    AlignmentError,
    DegenerateFrameError,
    DivergedError,
    InfeasibleNegativesError,
    InsufficientOverlapError,
    InsufficientTextureError,
    InvalidParameterError,
    PointAtInfinityError,
    ZeroVarianceError,
)
from .geometry import (
    Homography,
    Keypoint,
    PsiParams,
    homography_to_psi,
    psi_to_homography,
    rescale_homography,
    warp_keypoint,
    warp_point,
    warp_point_jacobian_psi,
)
from .loss import LossConfig, batch_objective, negative_loss, positive_loss
from .network import (
    MODE_PSEUDO,
    MODE_SIAMESE,
    NetworkWeights,
    backward,
    forward,
    init_weights,
    load_weights,
    parameter_count,
    save_weights,
)
from .sampling import (
    Image,
    Patch,
    Pyramid,
    bilinear_sample,
    bilinear_sample_backward,
    build_pyramid,
    gradient_magnitude_map,
    normalize_image,
    sample_grid,
)
from .trainer import TrainConfig, align, train_level
from .evaluate import (
    MatchResult,
    SweepGrid,
    average_precision,
    export_correspondences,
    homography_error,
    loss_surface_sweep,
    mean_ap,
    nn_match,
)

__version__ = "0.1.0"
