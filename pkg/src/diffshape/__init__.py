"""Correspondence-free statistical shape modelling of cup-like surfaces.

Surfaces are compared with a varifold kernel metric (no point
correspondences), deformed from a common template by control-point
diffeomorphic flows, and embedded in a low-dimensional latent space by a
sparse-GP latent variable model. A classical per-shape geodesic atlas
and a radiographic-angle scorer serve as baselines, with an evaluation
harness (ROC/AUC, bootstrap, permutation maps) and a file-based
pipeline on top.
"""

from .archive import load_archive, save_archive
from .atlas import (AtlasFitConfig, AtlasState, fit_atlas, fit_shape_momenta,
                    geodesic_shoot, hamiltonian, load_atlas, momenta_pca,
                    save_atlas)
from .classify import (AngleRecord, AngleScore, GpClassifier, angle_rule,
                       fit_angle_score, fit_gp_classifier, predict_proba)
from .errors import (ConditioningError, DiffshapeError, DivergenceError,
                     EmptyInputError, ExtractionFailedError, MeshFormatError,
                     NumericalError, ValidationError)
from .evaluation import (VertexStatMap, bh_adjust, bootstrap_ci,
                         class_average, confusion_metrics, dysplastic_mode_pca,
                         loocv_scores, make_report, paired_bootstrap_diff,
                         permutation_map, rank_auc, roc_curve, trapezoid_auc,
                         write_report, write_roc_svg)
from .flow import (MomentumPath, SpatialKernelParams, Template, deform_mesh,
                   default_velocity_bandwidth, inverse_flow_check, shoot,
                   uniform_grid, velocity_at)
from .gp import (GaussianDist, GpKernelParams, InducingState, kernel_tz,
                 kl_gaussian_diag, kl_whitened_inducing, sample_reparam)
from .meshes import (CupParams, Landmarks, TriMesh, bbox_diagonal,
                     connected_components, face_geometry, fit_plane,
                     generate_cup, generate_cup_with_landmarks,
                     load_landmarks, load_mesh, save_landmarks, save_mesh)
from .model import (ElboResult, FitConfig, GpdssmState, InferConfig,
                    ShapeDataset, ShapeEntry, classical_mds, elbo, fit,
                    infer_latent, initialize_state, load_state,
                    pairwise_varifold_sq_dists, reconstruct, save_state,
                    select_template)
from .pipeline import (Manifest, ManifestRow, PipelineConfig, cmd_classify,
                       cmd_evaluate, cmd_fit, cmd_generate, cmd_infer,
                       cmd_preprocess, cmd_visualize, default_config,
                       load_config, load_manifest, save_manifest)
from .preprocess import (AlignmentConfig, SimilarityTransform, extract_cup,
                         make_alignment_config, minimal_enclosing_ball,
                         rigid_align)
from .varifold import (VarifoldKernelParams, default_position_bandwidth,
                       embed, make_target, varifold_inner, varifold_sq_dist,
                       varifold_sq_dist_grad)

__version__ = "0.1.0"
