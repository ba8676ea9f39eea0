"""Self-calibrating neural-field reconstruction for sparse-view CT with rigid motion."""

from .analytic import FilterSpec, backproject, fbp_reconstruct, filter_sinogram
from .field import (
    FieldConfig,
    FieldModel,
    FourierConfig,
    FourierEncoder,
    HashGridConfig,
    HashGridEncoder,
    ParamLayout,
    field_backward,
    field_forward,
    fourier_encode,
    hash_encode,
)
from .geometry import (
    PoseSet,
    ProjectionPose,
    apply_pose,
    apply_pose_jacobians,
    nominal_view_angles,
    rotation_matrix,
    rotation_matrix_deriv,
    wrap_angle,
)
from .metrics import MetricsBlock, pose_report, psnr, ssim
from .phantom import (
    Ellipse,
    EllipsePhantom,
    analytic_sinogram,
    disk_phantom,
    load_phantom_table,
    preset,
    rasterize,
    shepp_logan_phantom,
    two_disks_phantom,
)
from .projector import (
    DetectorGeometry,
    ImageGrid,
    Sinogram,
    bilinear_sample,
    ellipse_projection_oracle,
    forward_project_field,
    forward_project_image,
    make_bilinear_field,
    ray_grid,
    sample_ray,
    simulate_motion_sinogram,
)
from .trainer import (
    ReconReport,
    TrainConfig,
    TrainDivergedError,
    TrainState,
    adam_step,
    adam_update,
    l1_loss,
    lr_at,
    render_image,
    train,
)

__version__ = "0.1.0"
