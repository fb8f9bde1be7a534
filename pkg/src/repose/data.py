"""Annotation loading, crop/augmentation and a synthetic stick-figure generator."""
import json
import logging
import math
import os
import queue
import threading
from dataclasses import dataclass, field, replace
from importlib import resources

import cv2
import numpy as np

from .heatmap import synth_heatmaps
from .kinematics import default_skeleton

log = logging.getLogger(__name__)

MPII_PIXELS_PER_SCALE = 200.0
FORMATS = ("native", "lsp_style", "mpii_style")


@dataclass
class PoseExample:
    """One annotated person.  ``keypoints`` is ``(K, 2)`` in original image pixels."""

    image: np.ndarray
    keypoints: np.ndarray
    mask: np.ndarray
    center: tuple
    scale: float
    head_box: tuple = None
    source: str = "native"
    image_path: str = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        if self.mask.shape[0] != self.keypoints.shape[0]:
            raise ValueError(f"mask has {self.mask.shape[0]} entries for {self.keypoints.shape[0]} keypoints")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not np.all(np.isfinite(self.keypoints[self.mask])):
            raise ValueError("annotated keypoints must be finite")
        self.center = (float(self.center[0]), float(self.center[1]))
        self.scale = float(self.scale)
        if self.head_box is not None:
            if len(self.head_box) != 4:
                raise ValueError(f"head_box needs 4 values (x1, y1, x2, y2), got {self.head_box}")
            self.head_box = tuple(float(v) for v in self.head_box)

    @property
    def K(self):
        return self.keypoints.shape[0]

    def get_image(self):
        if self.image is None:
            self.image = read_image(self.image_path)
        return self.image


def read_image(path):
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise OSError(f"cannot read image {path!r}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def write_image(path, rgb):
    if not cv2.imwrite(str(path), cv2.cvtColor(np.ascontiguousarray(rgb), cv2.COLOR_RGB2BGR)):
        raise OSError(f"cannot write image {path!r}")


# ---------------------------------------------------------------- native format


def example_to_record(ex, image_path=None):
    return {
        "image": image_path or ex.image_path,
        "K": ex.K,
        "keypoints": [[float(x), float(y), int(a)] for (x, y), a in zip(ex.keypoints, ex.mask)],
        "center": list(ex.center),
        "scale": ex.scale,
        "head_box": None if ex.head_box is None else [float(v) for v in ex.head_box],
        "source": ex.source,
    }


def _require(rec, key, i):
    if key not in rec:
        raise ValueError(f"record {i}: missing field {key!r}")
    return rec[key]


def record_to_example(rec, i, root="."):
    K = int(_require(rec, "K", i))
    kps = _require(rec, "keypoints", i)
    if len(kps) != K:
        raise ValueError(f"record {i}: field 'keypoints' has {len(kps)} entries, expected K={K}")
    try:
        arr = np.array(kps, dtype=np.float64).reshape(K, 3)
    except ValueError:
        raise ValueError(f"record {i}: field 'keypoints' must hold (x, y, annotated) triplets") from None
    path = _require(rec, "image", i)
    if path is not None and not os.path.isabs(path):
        path = os.path.join(root, path)
    try:
        return PoseExample(
            image=None,
            keypoints=arr[:, :2],
            mask=arr[:, 2] > 0,
            center=_require(rec, "center", i),
            scale=_require(rec, "scale", i),
            head_box=rec.get("head_box"),
            source=rec.get("source", "native"),
            image_path=path,
        )
    except (ValueError, TypeError) as e:
        raise ValueError(f"record {i}: {e}") from None


def save_native(examples, path, image_dir=None):
    """Write one JSON record per line.  In-memory images are saved as PNG under ``image_dir``."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w") as fh:
        for i, ex in enumerate(examples):
            rel = ex.image_path
            if ex.image is not None and image_dir is not None:
                os.makedirs(image_dir, exist_ok=True)
                full = os.path.join(image_dir, f"{i:06d}.png")
                write_image(full, ex.image)
                rel = os.path.relpath(full, base)
            fh.write(json.dumps(example_to_record(ex, rel)) + "\n")


def load_annotations(path, format="native", **kwargs):
    """Load examples from ``native`` JSONL, ``lsp_style`` (joints.mat) or ``mpii_style`` (JSON)."""
    if format == "native":
        examples = _load_native(path)
    elif format == "lsp_style":
        examples = _load_lsp(path, **kwargs)
    elif format == "mpii_style":
        examples = _load_mpii(path, **kwargs)
    else:
        raise ValueError(f"unknown annotation format {format!r}; expected one of {FORMATS}")
    return _drop_empty(examples)


def _drop_empty(examples):
    kept = [ex for ex in examples if ex.mask.any()]
    if len(kept) < len(examples):
        log.warning("dropped %d examples with no annotated keypoints", len(examples) - len(kept))
    return kept


def _load_native(path):
    root = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"record {i}: not valid JSON ({e.msg})") from None
            out.append(record_to_example(rec, i, root))
    return out


def _load_lsp(path, image_dir=None, split="test", image_pattern="im{:04d}.jpg"):
    """LSP ``joints.mat``: a ``3 x 14 x N`` (or ``14 x 3 x N``) array of x, y, flag.

    Test-split examples are centred on the image with scale equal to the larger
    image side; train-split examples use the keypoint bounding box.
    """
    from scipy.io import loadmat

    joints = np.asarray(loadmat(path)["joints"], dtype=np.float64)
    if joints.shape[0] == 3:
        joints = joints.transpose(2, 1, 0)  # -> N x 14 x 3
    elif joints.shape[1] == 3:
        joints = joints.transpose(2, 0, 1)
    else:
        raise ValueError(f"joints array has unexpected shape {joints.shape}")
    image_dir = image_dir or os.path.join(os.path.dirname(os.path.abspath(path)), "images")
    out = []
    for i, rec in enumerate(joints):
        kps = rec[:, :2]
        mask = np.all(np.isfinite(kps), axis=1) & np.all(kps > 0, axis=1)
        img_path = os.path.join(image_dir, image_pattern.format(i + 1))
        if split == "test":
            img = read_image(img_path)
            h, w = img.shape[:2]
            center, scale = (w / 2.0, h / 2.0), float(max(h, w))
        else:
            img = None
            lo, hi = kps[mask].min(axis=0), kps[mask].max(axis=0)
            center, scale = tuple((lo + hi) / 2.0), float(1.25 * max(hi - lo))
        out.append(PoseExample(img, kps, mask, center, max(scale, 1.0), source="lsp", image_path=img_path))
    return out


def _load_mpii(path, image_dir=None):
    """MPII-style JSON list with ``image``, ``center``, ``scale`` (x200 px), ``joints`` and ``joints_vis``."""
    with open(path) as fh:
        recs = json.load(fh)
    image_dir = image_dir or os.path.dirname(os.path.abspath(path))
    out = []
    for i, rec in enumerate(recs):
        joints = np.asarray(_require(rec, "joints", i), dtype=np.float64)
        vis = np.asarray(rec.get("joints_vis", np.ones(len(joints))), dtype=np.float64)
        if joints.shape != (16, 2):
            raise ValueError(f"record {i}: field 'joints' has shape {joints.shape}, expected (16, 2)")
        mask = (vis > 0) & np.all(joints >= 0, axis=1)
        head_box = rec.get("head_box")
        out.append(
            PoseExample(
                None,
                joints,
                mask,
                _require(rec, "center", i),
                float(_require(rec, "scale", i)) * MPII_PIXELS_PER_SCALE,
                head_box=None if head_box is None else tuple(head_box),
                source="mpii",
                image_path=os.path.join(image_dir, _require(rec, "image", i)),
            )
        )
    return out


def load_joint_mapping():
    text = resources.files("repose.configs").joinpath("lsp_to_mpii.json").read_text()
    return json.loads(text)["mapping"]


def to_mpii16(ex, mapping=None):
    """Move a 14-keypoint example into the 16-slot space; unmapped slots stay unannotated."""
    if ex.K == 16:
        return ex
    src, dst = default_skeleton(14), default_skeleton(16)
    mapping = mapping or load_joint_mapping()
    kps = np.zeros((16, 2))
    mask = np.zeros(16, dtype=bool)
    for a, b in mapping.items():
        i, j = src.index(a), dst.index(b)
        kps[j], mask[j] = ex.keypoints[i], ex.mask[i]
    return replace(ex, keypoints=kps, mask=mask)


# ---------------------------------------------------------------- geometry


def similarity(center, scale, n, angle_deg=0.0, flip=False):
    """2x3 matrix mapping the ``scale``-sided box around ``center`` onto an ``n x n`` grid.

    Rotation is about the box centre; a flip mirrors the result as ``x -> n - 1 - x``.
    """
    s = n / scale
    a = math.radians(angle_deg)
    c, si = math.cos(a) * s, math.sin(a) * s
    cx, cy = center
    M = np.array(
        [[c, si, n / 2.0 - c * cx - si * cy], [-si, c, n / 2.0 + si * cx - c * cy]],
        dtype=np.float64,
    )
    if flip:
        M = np.array([[-1.0, 0.0, n - 1.0], [0.0, 1.0, 0.0]]) @ np.vstack([M, [0, 0, 1]])
    return M


def invert_affine(M):
    return cv2.invertAffineTransform(np.asarray(M, dtype=np.float64))


def apply_affine(M, pts):
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ M[:, :2].T + M[:, 2]


@dataclass
class Crop:
    image: np.ndarray  # n x n x 3 float32 in [0, 1]
    keypoints: np.ndarray  # K x 2 crop coordinates
    mask: np.ndarray
    inverse: np.ndarray  # 2x3 crop -> original


def crop_normalize(ex, n, angle_deg=0.0, scale_factor=1.0, flip=False, flip_perm=None):
    """Warp the box around ``ex.center`` onto ``n x n``; return the crop and its inverse transform."""
    M = similarity(ex.center, ex.scale * scale_factor, n, angle_deg, flip)
    img = cv2.warpAffine(
        ex.get_image(), M, (n, n), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0
    )
    kps = apply_affine(M, ex.keypoints)
    mask = ex.mask.copy()
    if flip:
        perm = flip_perm if flip_perm is not None else default_skeleton(ex.K).flip_permutation()
        kps, mask = kps[perm], mask[perm]
    return Crop(img.astype(np.float32) / 255.0, kps, mask, invert_affine(M))


@dataclass(frozen=True)
class AugmentConfig:
    scale_range: tuple = (0.7, 1.3)
    rotation_range: float = 60.0
    hflip_prob: float = 0.5
    brightness: tuple = (0.8, 1.2)
    contrast: tuple = (0.8, 1.2)
    jitter: float = 0.05
    max_tries: int = 10

    def __post_init__(self):
        for name in ("scale_range", "brightness", "contrast"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high, got {(lo, hi)}")
        if self.rotation_range < 0 or self.jitter < 0 or not 0 <= self.hflip_prob <= 1:
            raise ValueError("rotation_range and jitter must be >= 0 and hflip_prob in [0, 1]")

    @classmethod
    def identity(cls):
        return cls((1.0, 1.0), 0.0, 0.0, (1.0, 1.0), (1.0, 1.0), 0.0)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def transform_example(ex, angle_deg=0.0, scale_factor=1.0, flip=False, flip_perm=None):
    """Rotate/scale about ``ex.center`` and optionally mirror, keeping the canvas size.

    Mirroring maps ``x -> W - 1 - x`` and swaps left/right keypoint indices.
    Keypoints that leave the canvas lose their annotation bit.
    """
    img = ex.get_image()
    h, w = img.shape[:2]
    cx, cy = ex.center
    M = cv2.getRotationMatrix2D((cx, cy), angle_deg, scale_factor)
    if flip:
        M = np.array([[-1.0, 0.0, w - 1.0], [0.0, 1.0, 0.0]]) @ np.vstack([M, [0, 0, 1]])
    if flip and angle_deg == 0.0 and scale_factor == 1.0:
        out = np.ascontiguousarray(img[:, ::-1])
    elif angle_deg == 0.0 and scale_factor == 1.0:
        out = img
    else:
        out = cv2.warpAffine(img, M, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT)
    kps = apply_affine(M, ex.keypoints)
    mask = ex.mask.copy()
    center = tuple(apply_affine(M, [ex.center])[0])
    if flip:
        perm = flip_perm if flip_perm is not None else default_skeleton(ex.K).flip_permutation()
        kps, mask = kps[perm], mask[perm]
    inside = (kps[:, 0] >= 0) & (kps[:, 0] <= w - 1) & (kps[:, 1] >= 0) & (kps[:, 1] <= h - 1)
    return replace(ex, image=out, keypoints=kps, mask=mask & inside, center=center)


def color_noise(img, rng, cfg):
    """Brightness and contrast scaling plus per-channel offsets, in [0, 1] units."""
    x = img.astype(np.float32) / 255.0 if img.dtype == np.uint8 else img.astype(np.float32)
    b = rng.uniform(*cfg.brightness)
    c = rng.uniform(*cfg.contrast)
    jit = rng.uniform(-cfg.jitter, cfg.jitter, size=3).astype(np.float32)
    mean = x.mean()
    x = (x - mean) * c + mean
    x = x * b + jit
    x = np.clip(x, 0.0, 1.0)
    return (x * 255.0).round().astype(np.uint8) if img.dtype == np.uint8 else x


def augment(ex, rng, cfg=AugmentConfig(), flip_perm=None):
    """Random scale, rotation, mirror and colour noise.

    Draws are retried when every annotated keypoint leaves the frame; after
    ``cfg.max_tries`` failures the geometry is left untouched.
    """
    for _ in range(cfg.max_tries):
        s = rng.uniform(*cfg.scale_range)
        a = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
        f = bool(rng.random() < cfg.hflip_prob)
        out = transform_example(ex, a, s, f, flip_perm)
        if out.mask.any():
            break
    else:
        out = replace(ex, mask=ex.mask.copy())
    if cfg.jitter > 0 or cfg.brightness != (1.0, 1.0) or cfg.contrast != (1.0, 1.0):
        out.image = color_noise(out.get_image(), rng, cfg)
    return out


# ---------------------------------------------------------------- synthetic figures

# (parent, child) limbs of the 14-keypoint skeleton with a fixed colour each (RGB)
_LIMBS = [
    ("right_hip", "right_knee", (230, 25, 75)),
    ("right_knee", "right_ankle", (245, 130, 48)),
    ("left_hip", "left_knee", (60, 180, 75)),
    ("left_knee", "left_ankle", (70, 240, 240)),
    ("right_shoulder", "right_elbow", (255, 225, 25)),
    ("right_elbow", "right_wrist", (145, 30, 180)),
    ("left_shoulder", "left_elbow", (0, 130, 200)),
    ("left_elbow", "left_wrist", (240, 50, 230)),
    ("right_hip", "left_hip", (128, 128, 0)),
    ("right_shoulder", "left_shoulder", (0, 128, 128)),
    ("right_hip", "right_shoulder", (170, 110, 40)),
    ("left_hip", "left_shoulder", (128, 0, 0)),
    ("neck", "head", (255, 255, 255)),
]


@dataclass(frozen=True)
class SynthConfig:
    occlusion_prob: float = 0.1
    unannotated_prob: float = 0.0
    line_width: float = 0.045  # fraction of the canvas
    margin: float = 0.04


def _rot(v, a):
    c, s = math.cos(a), math.sin(a)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _figure(rng, n):
    """Joint positions (14-keypoint order) of a random front-facing stick figure.

    The figure's right side is on the image left, so a mirrored image is again
    a valid figure once left/right labels are swapped.
    """
    sk = default_skeleton(14)
    P = {}
    height = rng.uniform(0.6, 0.85) * n
    tilt = rng.normal(0.0, 0.15)
    down = _rot(np.array([0.0, 1.0]), tilt)
    side = _rot(np.array([1.0, 0.0]), tilt)  # towards the figure's left (image right)
    pelvis = np.array([n / 2.0, n / 2.0]) + rng.normal(0, 0.05 * n, 2) + 0.1 * height * down
    thorax = pelvis - 0.3 * height * down
    hip_w = rng.uniform(0.09, 0.14) * height
    sh_w = rng.uniform(0.16, 0.22) * height
    for s, pre in ((-1, "right_"), (1, "left_")):
        P[pre + "hip"] = pelvis + s * side * hip_w / 2
        P[pre + "shoulder"] = thorax + s * side * sh_w / 2
        # thigh swings outwards (positive angle away from the midline), knee bends either way
        a1 = rng.uniform(-0.25, 0.6)
        thigh = _rot(down, -s * a1)
        P[pre + "knee"] = P[pre + "hip"] + 0.25 * height * thigh
        shin = _rot(thigh, rng.uniform(-0.9, 0.9))
        P[pre + "ankle"] = P[pre + "knee"] + 0.23 * height * shin
        a2 = rng.uniform(-0.3, 2.6)
        upper = _rot(down, -s * a2)
        P[pre + "elbow"] = P[pre + "shoulder"] + 0.17 * height * upper
        fore = _rot(upper, rng.uniform(-2.0, 2.0))
        P[pre + "wrist"] = P[pre + "elbow"] + 0.15 * height * fore
    P["neck"] = thorax - 0.08 * height * down
    P["head"] = P["neck"] + 0.13 * height * _rot(-down, rng.normal(0, 0.2))
    return np.array([P[name] for name in sk.names])


def _fit(kps, n, margin):
    lo, hi = kps.min(axis=0), kps.max(axis=0)
    room = (n - 1) * (1 - 2 * margin)
    s = min(1.0, room / max(hi - lo).max() if max(hi - lo) > 0 else 1.0)
    mid = (lo + hi) / 2
    kps = (kps - mid) * s + mid
    lo, hi = kps.min(axis=0), kps.max(axis=0)
    a, b = margin * (n - 1), (1 - margin) * (n - 1)
    kps = kps + np.maximum(a - lo, 0) - np.maximum(hi - b, 0)
    return np.clip(kps, 0, n - 1)


def render_figure(kps14, n, rng, cfg=SynthConfig()):
    """Draw limbs (anti-aliased, one colour per limb) over a random background."""
    sk = default_skeleton(14)
    base = rng.uniform(0, 255, 3)
    img = np.clip(base + rng.normal(0, 12, (n, n, 3)), 0, 255).astype(np.uint8)
    img = cv2.GaussianBlur(img, (3, 3), 0)
    shift = 4
    width = max(1, int(round(cfg.line_width * n)))
    for a, b, colour in _LIMBS:
        pa, pb = kps14[sk.index(a)], kps14[sk.index(b)]
        cv2.line(
            img,
            tuple(int(round(v * (1 << shift))) for v in pa),
            tuple(int(round(v * (1 << shift))) for v in pb),
            colour,
            width,
            cv2.LINE_AA,
            shift,
        )
    head = kps14[sk.index("head")]
    cv2.circle(img, tuple(int(round(v * (1 << shift))) for v in head), int(0.05 * n * (1 << shift)),
               (255, 255, 255), -1, cv2.LINE_AA, shift)
    return img


def _occlude(img, kps, rng, prob, n):
    for k in np.flatnonzero(rng.random(len(kps)) < prob):
        half = max(1, int(round(0.05 * n)))
        x, y = (int(round(v)) for v in kps[k])
        colour = tuple(int(c) for c in rng.uniform(0, 255, 3))
        cv2.rectangle(img, (x - half, y - half), (x + half, y + half), colour, -1)
    return img


def synth_dataset(rng, count, K=14, n=64, cfg=SynthConfig()):
    """``count`` stick-figure examples on an ``n x n`` canvas (K = 14 or 16).

    Occluded keypoints stay annotated; each keypoint is independently marked
    unannotated with probability ``cfg.unannotated_prob`` (never all of them).
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if K not in (14, 16):
        raise ValueError(f"synthetic figures support K=14 or 16, got {K}")
    rng = np.random.default_rng(rng)
    out = []
    for _ in range(count):
        kps14 = _fit(_figure(rng, n), n, cfg.margin)
        img = render_figure(kps14, n, rng, cfg)
        img = _occlude(img, kps14, rng, cfg.occlusion_prob, n)
        ex = PoseExample(img, kps14, np.ones(14, dtype=bool), (n / 2.0, n / 2.0), float(n), source="synthetic")
        if K == 16:
            ex = to_mpii16(ex)
            sk = default_skeleton(16)
            k = ex.keypoints
            k[sk.index("pelvis")] = (k[sk.index("right_hip")] + k[sk.index("left_hip")]) / 2
            k[sk.index("thorax")] = (k[sk.index("right_shoulder")] + k[sk.index("left_shoulder")]) / 2
            ex.mask[:] = True
        if cfg.unannotated_prob > 0:
            while True:
                keep = rng.random(K) >= cfg.unannotated_prob
                if keep.any():
                    break
            ex.mask &= keep
        out.append(ex)
    return out


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    images: np.ndarray  # B x 3 x n x n
    heatmaps: np.ndarray  # B x K x h x h
    mask: np.ndarray  # B x K
    keypoints: np.ndarray  # B x K x 2 (input-crop coordinates)
    inverse: np.ndarray = field(default=None)  # B x 2 x 3 crop -> original
    index: np.ndarray = field(default=None)


def prepare(ex, input_size, heatmap_size, sigma, flip_perm=None):
    """Crop, then render target heatmaps on the output grid (corner-aligned with the input)."""
    crop = crop_normalize(ex, input_size, flip_perm=flip_perm)
    factor = (heatmap_size - 1) / (input_size - 1) if input_size > 1 else 1.0
    hm = synth_heatmaps(crop.keypoints * factor, crop.mask, heatmap_size, sigma)
    return crop, hm


def collate(examples, input_size, heatmap_size, sigma, flip_perm=None, index=None):
    crops, hms = zip(*(prepare(ex, input_size, heatmap_size, sigma, flip_perm) for ex in examples))
    return Batch(
        images=np.stack([c.image.transpose(2, 0, 1) for c in crops]),
        heatmaps=np.stack(hms),
        mask=np.stack([c.mask for c in crops]),
        keypoints=np.stack([c.keypoints for c in crops]),
        inverse=np.stack([c.inverse for c in crops]),
        index=None if index is None else np.asarray(index),
    )


class BatchLoader:
    """Endless shuffled, augmented batches produced by a worker thread into a bounded queue.

    Every example draw uses its own RNG stream derived from ``(seed, epoch,
    position)``, so the batch sequence is reproducible.
    """

    def __init__(self, examples, batch_size, input_size, heatmap_size, sigma, seed=0,
                 augment_cfg=AugmentConfig(), prefetch=4, flip_perm=None, start_step=0):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.examples = examples
        self.batch_size = batch_size
        self.input_size, self.heatmap_size, self.sigma = input_size, heatmap_size, sigma
        self.seed = seed
        self.cfg = augment_cfg
        self.flip_perm = flip_perm
        self.step = start_step
        self._queue = queue.Queue(maxsize=prefetch)
        self._stop = threading.Event()
        self._thread = None

    def make_batch(self, step):
        n = len(self.examples)
        per_epoch = max(1, n // self.batch_size)
        epoch, pos = divmod(step, per_epoch)
        order = np.random.default_rng([self.seed, epoch]).permutation(n)
        idx = order[pos * self.batch_size : (pos + 1) * self.batch_size]
        if len(idx) < self.batch_size:
            idx = np.resize(order, self.batch_size)
        exs = []
        for j, i in enumerate(idx):
            rng = np.random.default_rng([self.seed, epoch, pos, j])
            exs.append(augment(self.examples[i], rng, self.cfg, self.flip_perm))
        return collate(exs, self.input_size, self.heatmap_size, self.sigma, self.flip_perm, idx)

    def _work(self):
        step = self.step
        while not self._stop.is_set():
            try:
                batch = self.make_batch(step)
            except Exception as e:  # surfaced to the consumer
                self._queue.put(e)
                return
            while not self._stop.is_set():
                try:
                    self._queue.put(batch, timeout=0.1)
                    break
                except queue.Full:
                    continue
            step += 1

    def __iter__(self):
        return self

    def __next__(self):
        if self._thread is None:
            self._thread = threading.Thread(target=self._work, daemon=True)
            self._thread.start()
        item = self._queue.get()
        if isinstance(item, Exception):
            raise item
        self.step += 1
        return item

    def close(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
