"""Signed-distance fields as blends of adaptive local basis functions.

Fit a set of anisotropic local domains plus a shared MLP decoder to sampled
signed-distance data, compact the set by domain coverage, refine it against
surface/free-space constraints, extract meshes, and score them.
"""

import os as _os

# Honor the thread cap before numpy configures its BLAS pools. Has no
# effect if numpy was already imported by the host process.
_threads = _os.environ.get("SDFBLEND_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .autodiff import (  # noqa: E402
    AdamState, FdCheckResult, NonFiniteError, ParamVector, Tape, Var,
    adam_step, backward, finite_diff_check,
)
from .errors import (  # noqa: E402
    CheckpointError, FieldError, GridError, SamplingError, SceneError,
    SdfBlendError,
)
from .field import (  # noqa: E402
    BasisField, Decoder, FieldProgram, LocalBasis, decoder_eval,
    domain_downsample, domain_transform, rbf_weight, rotation_from_6d,
    sdf_eval, top2,
)
from .fit import (  # noqa: E402
    FitConfig, FitReport, compact_fit, fit_field, init_field, refine,
    refine_from_scene,
)
from .geom import (  # noqa: E402
    Box, Capsule, Cylinder, PointCloud, SampleSet, SceneSpec, Sphere, Torus,
    TriMesh, difference, farthest_point_sample, intersection,
    positive_points, sample_mesh_surface, sample_training_set, scene_sdf,
    surface_points, union,
)
from .metrics import (  # noqa: E402
    EvalProtocol, MetricReport, chamfer_l2, evaluate, f_score, iou,
)
from .objective import (  # noqa: E402
    Anchor, LossWeights, RefineInputs, loss_adj, loss_chamfer, loss_face,
    loss_inte, loss_opt, loss_pos, loss_reg, loss_sdf, loss_sdf_euc,
    loss_smooth, loss_stable,
)
from .surface import GridSpec, marching_cubes  # noqa: E402

__version__ = "0.1.0"
