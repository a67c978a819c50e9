"""scikit-learn compatible wrappers around the network and training loop."""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import dataio
from ._validation import check_pose_array, check_sequence
from .network import HDFormerConfig, build_model, load_checkpoint, save_checkpoint
from .skeleton import load_topology
from .training import LossConfig, OptimizerConfig, evaluate_mpjpe, train

_MODEL_KEYS = [f.name for f in dataclasses.fields(HDFormerConfig) if f.name not in ("joints", "seed")]
_OPTIM_KEYS = {"lr": "lr", "lr_decay": "decay", "milestones": "milestones", "epochs": "epochs",
               "batch_size": "batch_size", "weight_decay": "weight_decay", "optimizer": "method",
               "max_steps": "max_steps"}


class RootRelativeScaler(TransformerMixin, BaseEstimator):
    """Root-centre poses and divide by the mean joint-to-root distance.

    Works on any array whose last two axes are (J, C).
    """

    def __init__(self, root=0):
        self.root = root

    def fit(self, X, y=None):
        X = np.asarray(X, float)
        self.scale_ = dataio.displacement_scale(X, self.root)
        if not self.scale_ > 0:
            raise ValueError("cannot fit a scale: every joint sits on the root")
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        return dataio.normalize(np.asarray(X, float), self.root, self.scale_)[0]

    def inverse_transform(self, X, root_traj=None):
        check_is_fitted(self, "scale_")
        X = np.asarray(X, float) * self.scale_
        return X if root_traj is None else X + root_traj


class HDFormerRegressor(RegressorMixin, BaseEstimator):
    """Lift (n, T, J, 2) pose windows to root-relative (n, T, J, 3) poses.

    Parameters mirror :class:`HDFormerConfig` plus the optimizer and loss
    settings. ``predict`` returns coordinates in the units of ``y``.
    """

    def __init__(self, frames=96, topology="h36m", depth=2, channels=(64, 128, 256), heads=4,
                 blocks_per_level=1, bottom_blocks=2, merge_blocks=2, order_joints=5,
                 encoder="sub_concat", hoa_placement=("merge",), fusion="summation",
                 merge_fusion="sum", dropout=0.3, activation="gelu", residual=True, norm=True,
                 use_psi=True, psi_sharing="block", pos_encoding=False, mlp_ratio=2, kernel=5,
                 stride=2, lr=5e-3, lr_decay=0.1, milestones=(80, 90, 100), epochs=110,
                 batch_size=256, weight_decay=1e-5, optimizer="adam", max_steps=None,
                 lam=0.1, motion_intervals=(1,), random_state=0):
        self.frames = frames
        self.topology = topology
        self.depth = depth
        self.channels = channels
        self.heads = heads
        self.blocks_per_level = blocks_per_level
        self.bottom_blocks = bottom_blocks
        self.merge_blocks = merge_blocks
        self.order_joints = order_joints
        self.encoder = encoder
        self.hoa_placement = hoa_placement
        self.fusion = fusion
        self.merge_fusion = merge_fusion
        self.dropout = dropout
        self.activation = activation
        self.residual = residual
        self.norm = norm
        self.use_psi = use_psi
        self.psi_sharing = psi_sharing
        self.pos_encoding = pos_encoding
        self.mlp_ratio = mlp_ratio
        self.kernel = kernel
        self.stride = stride
        self.lr = lr
        self.lr_decay = lr_decay
        self.milestones = milestones
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.max_steps = max_steps
        self.lam = lam
        self.motion_intervals = motion_intervals
        self.random_state = random_state

    # ------------------------------------------------------------- configs

    def model_config(self, joints) -> HDFormerConfig:
        kw = {k: getattr(self, k) for k in _MODEL_KEYS}
        return HDFormerConfig(joints=joints, seed=self.random_state, **kw)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(**{dst: getattr(self, src) for src, dst in _OPTIM_KEYS.items()})

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lam, self.motion_intervals)

    # ----------------------------------------------------------------- API

    def fit(self, X, y, X_val=None, y_val=None, out_dir=None, log_fn=None):
        """Train on windows ``X`` (n, T, J, 2) with targets ``y`` (n, T, J, 3)."""
        graph = load_topology(self.topology)
        X = check_pose_array(X, 2, self.frames, graph.joint_count)
        y = check_pose_array(y, 3, self.frames, graph.joint_count, name="y")
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} windows, y has {len(y)}")
        if len(X) == 0:
            raise ValueError("cannot fit on an empty dataset")
        self.graph_ = graph
        self.scaler_in_ = RootRelativeScaler(graph.root).fit(X)
        self.scaler_out_ = RootRelativeScaler(graph.root).fit(y)
        self.model_ = build_model(self.model_config(graph.joint_count), graph)
        data = dataio.WindowedDataset(self.scaler_in_.transform(X), self.scaler_out_.transform(y))
        val = None
        if X_val is not None:
            val = (self.scaler_in_.transform(check_pose_array(X_val, 2, self.frames, graph.joint_count)),
                   self.scaler_out_.transform(check_pose_array(y_val, 3, self.frames, graph.joint_count)))
        rng = np.random.default_rng(self.random_state)
        self.report_ = train(self.model_, data, self.optimizer_config(), self.loss_config(), rng,
                             val=val, out_dir=out_dir, save_fn=self._save_fn, log_fn=log_fn)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_pose_array(X, 2, self.model_.cfg.frames, self.model_.cfg.joints)
        out = self.model_.predict(self.scaler_in_.transform(X))
        return self.scaler_out_.inverse_transform(out)

    def predict_sequence(self, seq2d, step=5, stitch="mean"):
        """Predict a sequence of any length >= frames by sliding windows."""
        check_is_fitted(self, "model_")
        seq2d = check_sequence(seq2d, 2, self.model_.cfg.joints)
        return dataio.sliding_window_infer(self, seq2d, self.model_.cfg.frames, step, stitch)

    def score(self, X, y, sample_weight=None):
        """Negative MPJPE against root-centred ``y`` (higher is better)."""
        pred = self.predict(X)
        gt, _ = dataio.root_center(np.asarray(y, float), self.graph_.root)
        return -float(np.linalg.norm(pred - gt, axis=-1).mean())

    def training_mpjpe(self, X, y):
        """MPJPE in target units on the given windows, eval mode."""
        return -self.score(X, y)

    # ------------------------------------------------------------ persistence

    def _extra(self):
        return {
            "estimator": _jsonable(self.get_params()),
            "scale_in": self.scaler_in_.scale_,
            "scale_out": self.scaler_out_.scale_,
            "root": self.graph_.root,
        }

    def _save_fn(self, path, model):
        save_checkpoint(path, model, self._extra())

    def save(self, path):
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self._extra())

    @classmethod
    def load(cls, path):
        model, extra = load_checkpoint(path)
        params = extra.get("estimator", {})
        est = cls(**{k: _tupled(v) for k, v in params.items()})
        est.model_ = model
        est.graph_ = model.graph
        est.scaler_in_ = RootRelativeScaler(extra["root"])
        est.scaler_in_.scale_ = extra["scale_in"]
        est.scaler_out_ = RootRelativeScaler(extra["root"])
        est.scaler_out_.scale_ = extra["scale_out"]
        return est


def _jsonable(params):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}


def _tupled(v):
    return tuple(v) if isinstance(v, list) else v
