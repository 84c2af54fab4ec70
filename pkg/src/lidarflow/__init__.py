"""Self-supervised motion flow and next-map prediction for 2D LiDAR grids."""

from .autodiff import ConvSpec, GruWeights, Tape, Tensor, backward, bilinear_warp, conv2d, gaussian_filter, gru_cell, mse
from .evaluation import f1_score, flow_epe, flow_to_color, pr_curve, predict_next
from .grids import GridPair, GridSpec, Scan, ray_traverse, scan_to_maps
from .model import FlowPrediction, HiddenState, ModelParams, forward_step, init_hidden, init_params
from .sim import ScanSpec, ScenarioConfig, SequenceSample, WorldState, generate_dataset, ground_truth_flow, sense, step_world
from .training import TrainConfig, TrainLog, gradient_support_demo, sequence_loss, train

__version__ = "0.1.0"
