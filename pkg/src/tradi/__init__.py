"""Epistemic uncertainty by Kalman-tracking the weight distribution of SGD-trained networks."""

from .nn import LayerSpec, Network, ParamVector, mlp_specs
from .tracker import TrackerHyper, TrackerState, tracker_init, tracker_step
from .rff import build_factor, feature_map, rff_init
from .sampler import build_ensemble, predict_classification, predict_regression

__version__ = "0.1.0"
