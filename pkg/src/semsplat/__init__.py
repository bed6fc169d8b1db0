"""Semantic feature lifting onto 3D Gaussians with variance-weighted neural regularization."""

from .core import Camera, FeatureMap, Gaussian, GaussianScene, SemanticField, covariance_of, validate_scene
from .evaluate import ablation_grid, evaluate, localize, miou, relevance_map, segment_3d
from .lifter import LiftAccumulator, accumulate_view, finalize, lift
from .net import MlpConfig, RegularizerModel, encode_input, init_params
from .raster import marginal_weights, project, render_feature_map, weights_at_pixel
from .trainer import TrainConfig, loss_equal, loss_weighted, regularize_field, train, variance_weights

__version__ = "0.1.0"
