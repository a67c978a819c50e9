"""Evaluation protocols: MPJPE, Procrustes-aligned MPJPE, PCK and AUC.

All functions take arrays of shape (..., J, 3) in the same units (mm for the
default PCK threshold) and operate outside the gradient tape.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

AUC_THRESHOLDS = np.arange(0.0, 151.0, 5.0)


def _pair(pred, gt):
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and target {gt.shape} differ")
    return pred, gt


def joint_errors(pred, gt):
    pred, gt = _pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt):
    """Mean per-joint position error (protocol #1)."""
    return float(joint_errors(pred, gt).mean())


def procrustes_align(pred, gt):
    """Similarity-align every frame of ``pred`` onto ``gt``.

    Returns ``(aligned, degenerate)`` where ``degenerate`` flags frames whose
    joints all coincide; those frames are returned unaligned.
    """
    pred, gt = _pair(pred, gt)
    shape = pred.shape
    X = pred.reshape(-1, shape[-2], shape[-1])
    Y = gt.reshape(-1, shape[-2], shape[-1])
    mu_x = X.mean(axis=1, keepdims=True)
    mu_y = Y.mean(axis=1, keepdims=True)
    X0, Y0 = X - mu_x, Y - mu_y
    nx_ = np.sqrt((X0 ** 2).sum(axis=(1, 2)))
    ny_ = np.sqrt((Y0 ** 2).sum(axis=(1, 2)))
    degenerate = (nx_ < 1e-12) | (ny_ < 1e-12)
    safe_x = np.where(degenerate, 1.0, nx_)[:, None, None]
    safe_y = np.where(degenerate, 1.0, ny_)[:, None, None]
    A, B = X0 / safe_x, Y0 / safe_y
    # maximise tr(R^T A^T B): R = U V^T from the SVD of A^T B
    U, s, Vt = np.linalg.svd(np.swapaxes(A, 1, 2) @ B)
    d = np.sign(np.linalg.det(U @ Vt))
    d = np.where(d == 0, 1.0, d)
    U[:, :, -1] *= d[:, None]
    s[:, -1] *= d
    R = U @ Vt
    scale = s.sum(axis=1) * ny_ / np.where(degenerate, 1.0, nx_)
    aligned = scale[:, None, None] * (X0 @ R) + mu_y
    aligned = np.where(degenerate[:, None, None], X, aligned)
    return aligned.reshape(shape), degenerate.reshape(shape[:-2])


def p_mpjpe(pred, gt, return_flags=False):
    """MPJPE after per-frame similarity (Procrustes) alignment (protocol #2)."""
    aligned, degenerate = procrustes_align(pred, gt)
    err = float(np.linalg.norm(aligned - np.asarray(gt, float), axis=-1).mean())
    return (err, degenerate) if return_flags else err


def pck(pred, gt, threshold=150.0):
    """Percentage of joints whose error is at most ``threshold``."""
    return float((joint_errors(pred, gt) <= threshold).mean() * 100.0)


def auc(pred, gt, thresholds=AUC_THRESHOLDS):
    """Mean PCK over the threshold grid."""
    err = joint_errors(pred, gt)
    return float(np.mean([(err <= t).mean() * 100.0 for t in np.atleast_1d(thresholds)]))


@dataclass
class EvalReport:
    per_action: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    overall: dict = field(default_factory=dict)
    action_mean: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_text(self):
        metrics = sorted(self.overall)
        width = max([len(a) for a in self.per_action] + [8])
        lines = [f"{'action':<{width}}  {'n':>7}  " + "  ".join(f"{m:>10}" for m in metrics)]
        for a in sorted(self.per_action):
            vals = "  ".join(f"{self.per_action[a][m]:10.3f}" for m in metrics)
            lines.append(f"{a:<{width}}  {self.counts[a]:>7}  {vals}")
        total = sum(self.counts.values())
        lines.append(f"{'overall':<{width}}  {total:>7}  "
                     + "  ".join(f"{self.overall[m]:10.3f}" for m in metrics))
        lines.append(f"{'avg/act':<{width}}  {'':>7}  "
                     + "  ".join(f"{self.action_mean[m]:10.3f}" for m in metrics))
        return "\n".join(lines)


PROTOCOLS = {
    "mpjpe": ("mpjpe",),
    "p-mpjpe": ("p_mpjpe",),
    "pck-auc": ("pck", "auc", "mpjpe"),
}


def _metric(name, pred, gt):
    return {"mpjpe": mpjpe, "p_mpjpe": p_mpjpe, "pck": pck, "auc": auc}[name](pred, gt)


def evaluate(samples, protocol="mpjpe") -> EvalReport:
    """Build a report from ``(action, pred, gt)`` triples.

    ``overall`` weights each action by its joint-frame count;
    ``action_mean`` is the unweighted mean over actions.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; valid: {', '.join(PROTOCOLS)}")
    grouped = {}
    for action, pred, gt in samples:
        p, g = _pair(pred, gt)
        grouped.setdefault(action or "all", []).append((p.reshape(-1, *p.shape[-2:]), g.reshape(-1, *g.shape[-2:])))
    report = EvalReport()
    for action, items in grouped.items():
        p = np.concatenate([i[0] for i in items])
        g = np.concatenate([i[1] for i in items])
        report.per_action[action] = {m: _metric(m, p, g) for m in PROTOCOLS[protocol]}
        report.counts[action] = int(p.shape[0])
    total = sum(report.counts.values())
    for m in PROTOCOLS[protocol]:
        report.overall[m] = sum(report.per_action[a][m] * report.counts[a] for a in report.per_action) / total
        report.action_mean[m] = float(np.mean([report.per_action[a][m] for a in report.per_action]))
    return report
