"""Partial MSE training loss and PCK evaluation."""
import logging
from dataclasses import dataclass

import numpy as np

from .netcore import ops
from .netcore.tensor import Tensor, accumulate, make_node

log = logging.getLogger(__name__)

GROUPS = ("head", "shoulder", "elbow", "wrist", "hip", "knee", "ankle")
_GROUP_OF = {
    "head": "head",
    "neck": "head",
    "right_shoulder": "shoulder",
    "left_shoulder": "shoulder",
    "right_elbow": "elbow",
    "left_elbow": "elbow",
    "right_wrist": "wrist",
    "left_wrist": "wrist",
    "right_hip": "hip",
    "left_hip": "hip",
    "right_knee": "knee",
    "left_knee": "knee",
    "right_ankle": "ankle",
    "left_ankle": "ankle",
}
TORSO_ENDPOINTS = ("right_shoulder", "left_hip")
HEAD_ENDPOINTS = ("head", "neck")


def partial_mse(pred, gt, mask):
    """Mean over examples of the annotated-keypoint average of ``||H - O||^2 / n^2``.

    ``pred`` is a ``(M, K, n, n)`` tensor (or array), ``gt`` an array of the same
    shape and ``mask`` a boolean ``(M, K)`` annotation mask.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred))
    gt = np.asarray(gt)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"partial_mse: prediction shape {pred.shape} != ground truth shape {gt.shape}")
    M, K, h, w = pred.shape
    if mask.shape != (M, K):
        raise ValueError(f"partial_mse: mask shape {mask.shape} != {(M, K)}")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError(f"partial_mse: examples {np.flatnonzero(counts == 0).tolist()} have no annotated keypoints")
    # per-(example, keypoint) weight: 1 / (M |a_i| n^2) on annotated channels, 0 elsewhere
    weight = (mask / counts[:, None] / (M * h * w)).astype(pred.dtype)
    diff = pred.data - gt.astype(pred.dtype)
    per_channel = np.einsum("mkhw,mkhw->mk", diff, diff)
    value = np.asarray((per_channel * weight).sum(), dtype=pred.dtype)

    def backward(g):
        accumulate(pred, (2.0 * g) * diff * weight[:, :, None, None])

    return make_node(value, (pred,), backward)


def total_loss(prediction, gt, mask):
    """Sum of :func:`partial_mse` over every supervised stack of a ``PosePrediction``."""
    total = None
    for stack in prediction.supervised:
        term = partial_mse(stack, gt, mask)
        total = term if total is None else ops.add(total, term)
    return total


@dataclass(frozen=True)
class PckSpec:
    alpha: float = 0.2
    reference: str = "torso_diameter"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.reference not in ("torso_diameter", "head_length"):
            raise ValueError(f"unknown reference {self.reference!r}")


PCK_LSP = PckSpec(0.2, "torso_diameter")
PCKH_MPII = PckSpec(0.5, "head_length")


def reference_length(keypoints, mask, names, spec, head_box=None):
    """Reference length in pixels, or ``None`` when it cannot be computed.

    Torso diameter is the right-shoulder to left-hip distance.  Head length is
    the head-box diagonal when a box is given, else the head-top to neck distance.
    """
    keypoints = np.asarray(keypoints, dtype=np.float64)
    if spec.reference == "head_length" and head_box is not None:
        x1, y1, x2, y2 = head_box
        length = float(np.hypot(x2 - x1, y2 - y1))
    else:
        a_name, b_name = TORSO_ENDPOINTS if spec.reference == "torso_diameter" else HEAD_ENDPOINTS
        if a_name not in names or b_name not in names:
            return None
        a, b = names.index(a_name), names.index(b_name)
        if not (mask[a] and mask[b]):
            return None
        length = float(np.linalg.norm(keypoints[a] - keypoints[b]))
    return length if length > 0 and np.isfinite(length) else None


@dataclass
class PckResult:
    groups: dict
    mean: float
    n_examples: int
    n_excluded: int
    per_keypoint: np.ndarray

    def row(self):
        return [self.groups[g] for g in GROUPS] + [self.mean]


def pck(decoded, gt, mask, names, spec=PCK_LSP, head_boxes=None):
    """PCK per keypoint group (left/right pooled) and overall.

    ``decoded`` and ``gt`` are ``(N, K, 2)`` arrays in the same frame, ``mask``
    an ``(N, K)`` annotation mask.  Examples without a usable reference length
    are excluded and counted.  Keypoints outside the seven groups (pelvis,
    thorax) do not enter any group or the mean.
    """
    decoded = np.asarray(decoded, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    N, K = mask.shape
    correct = np.zeros((N, K), dtype=bool)
    valid = np.zeros((N, K), dtype=bool)
    excluded = 0
    for i in range(N):
        box = None if head_boxes is None else head_boxes[i]
        ref = reference_length(gt[i], mask[i], names, spec, box)
        if ref is None:
            excluded += 1
            continue
        err = np.linalg.norm(decoded[i] - gt[i], axis=1)
        valid[i] = mask[i]
        correct[i] = (err <= spec.alpha * ref) & mask[i]
    if excluded:
        log.warning("pck: %d of %d examples excluded (no reference length)", excluded, N)
    in_group = np.array([names[k] in _GROUP_OF for k in range(K)])
    groups = {}
    for gname in GROUPS:
        cols = [k for k in range(K) if _GROUP_OF.get(names[k]) == gname]
        n = valid[:, cols].sum()
        groups[gname] = float(correct[:, cols].sum() / n) if n else float("nan")
    n_all = valid[:, in_group].sum()
    mean = float(correct[:, in_group].sum() / n_all) if n_all else float("nan")
    with np.errstate(invalid="ignore"):
        per_kp = correct.sum(axis=0) / valid.sum(axis=0)
    return PckResult(groups, mean, N - excluded, excluded, per_kp)


def format_table(result, fmt="text"):
    """PCK table with columns Head .. Ankle, Mean (as text or comma-delimited)."""
    header = [g.capitalize() for g in GROUPS] + ["Mean"]
    values = [100.0 * v for v in result.row()]
    if fmt == "csv":
        return ",".join(header) + "\n" + ",".join(f"{v:.2f}" for v in values) + "\n"
    widths = [max(len(h), 6) for h in header]
    top = " | ".join(h.rjust(w) for h, w in zip(header, widths))
    bottom = " | ".join(f"{v:.2f}".rjust(w) for v, w in zip(values, widths))
    return f"{top}\n{'-' * len(top)}\n{bottom}\n"
