"""High-order directed transformer for lifting 2D pose sequences to 3D."""

from .attention import AttentionDump, FirstOrderAttention, HighOrderAttention, dump_attention
from .dataio import (PoseSequence, load_sequence, make_windows, save_sequence,
                     sliding_window_infer, synth_generate)
from .encoding import HyperboneEncoder, HyperboneEncoderConfig, encode_all
from .estimator import HDFormerRegressor, RootRelativeScaler
from .metrics import auc, mpjpe, p_mpjpe, pck
from .network import HDFormer, HDFormerConfig, build_model, configure_stage_placement
from .numerics import Tape, Tensor, no_grad
from .skeleton import (HyperboneIndex, SkeletonGraph, build_skeleton, enumerate_hyperbones,
                       load_topology, shortest_path)
from .training import LossConfig, OptimizerConfig, motion_loss, mpjpe_loss, total_loss, train

__version__ = "0.1.0"
