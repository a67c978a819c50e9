import numpy as np

from .errors import ShapeError


def check_pose_array(X, channels, frames=None, joints=None, name="X"):
    """Return ``X`` as a float64 (n, T, J, channels) array or raise ShapeError."""
    try:
        X = np.asarray(X, dtype=np.float64)
    except (TypeError, ValueError):
        raise ShapeError(f"{name} is not a numeric array") from None
    if X.ndim != 4:
        raise ShapeError(f"{name} must have shape (n, T, J, {channels}), got {X.shape}")
    if X.shape[-1] != channels:
        raise ShapeError(f"{name} must have {channels} coordinates per joint, got {X.shape[-1]}")
    if frames is not None and X.shape[1] != frames:
        raise ShapeError(f"{name} has windows of {X.shape[1]} frames, expected {frames}")
    if joints is not None and X.shape[2] != joints:
        raise ShapeError(f"{name} has {X.shape[2]} joints, expected {joints}")
    if not np.all(np.isfinite(X)):
        raise ShapeError(f"{name} contains NaN or infinite values")
    return X


def check_sequence(seq, channels, joints=None, name="sequence"):
    """Single (frames, J, channels) sequence."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 3 or seq.shape[-1] != channels:
        raise ShapeError(f"{name} must have shape (frames, J, {channels}), got {seq.shape}")
    if joints is not None and seq.shape[1] != joints:
        raise ShapeError(f"{name} has {seq.shape[1]} joints, expected {joints}")
    return seq
