"""Run configuration, training loop and evaluation."""
import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import data as D
from .heatmap import decode_batch
from .lossmetrics import PCK_LSP, PCKH_MPII, pck, total_loss
from .model import ReposeConfig, ReposeModel
from .netcore import checkpoint
from .netcore.optim import Adam, lr_at
from .netcore.tensor import no_grad

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "loss", "lr", "seconds", "val_pck")


class TrainingDiverged(RuntimeError):
    def __init__(self, step, loss, last_checkpoint):
        self.step, self.loss, self.last_checkpoint = step, loss, last_checkpoint
        super().__init__(f"non-finite loss {loss} at step {step}; last checkpoint: {last_checkpoint or 'none'}")


@dataclass(frozen=True)
class RunConfig:
    model: ReposeConfig = ReposeConfig()
    augment: D.AugmentConfig = D.AugmentConfig()
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 64
    lr_schedule: tuple = ((0, 1e-3), (1_000_000, 5e-4), (1_300_000, 1e-6))
    max_steps: int = 2_000_000
    seed: int = 0
    train_data: str = "synthetic:2000"
    val_data: str = "synthetic:200"
    data_format: str = "native"
    output_dir: str = "runs/default"
    checkpoint_every: int = 1000
    eval_every: int = 0
    log_every: int = 50
    metric: str = "pck"  # pck (torso, 0.2) or pckh (head, 0.5)
    synth_occlusion: float = 0.1
    synth_unannotated: float = 0.0

    def __post_init__(self):
        steps = [s for s, _ in self.lr_schedule]
        problems = []
        if not steps or steps[0] != 0 or any(b <= a for a, b in zip(steps, steps[1:])):
            problems.append("lr_schedule steps must start at 0 and be strictly increasing")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.max_steps < 0:
            problems.append(f"max_steps must be >= 0 (got {self.max_steps})")
        if self.metric not in ("pck", "pckh"):
            problems.append(f"metric must be pck or pckh (got {self.metric!r})")
        if problems:
            raise ValueError("invalid RunConfig: " + "; ".join(problems))

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["augment"] = self.augment.to_dict()
        d["betas"] = list(self.betas)
        d["lr_schedule"] = [list(p) for p in self.lr_schedule]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown RunConfig fields: {unknown}")
        if "model" in d:
            d["model"] = ReposeConfig.from_dict(d["model"])
        if "augment" in d:
            d["augment"] = D.AugmentConfig.from_dict(d["augment"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if "lr_schedule" in d:
            d["lr_schedule"] = tuple(tuple(p) for p in d["lr_schedule"])
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


DESK_MODEL = ReposeConfig(
    K=14,
    input_size=64,
    coarsest_size=8,
    decoupled_channels=8,
    trunk_channels=16,
    trunk_repeat=2,
    head_repeat=2,
    update_conv_blocks=2,
    sigma=4.0,
)

PROFILES = {
    # full-size network and schedule; far beyond a desk budget
    "full": RunConfig(),
    "desk": RunConfig(
        model=DESK_MODEL,
        batch_size=8,
        lr_schedule=((0, 2e-3), (1000, 1e-3), (2000, 3e-4)),
        max_steps=2500,
        output_dir="runs/desk",
        checkpoint_every=500,
        log_every=25,
    ),
}


def profile(name, **overrides):
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}")
    return replace(PROFILES[name], **overrides)


# ---------------------------------------------------------------- data


def load_examples(spec, K, canvas, seed, fmt="native", occlusion=0.1, unannotated=0.0):
    """``synthetic:N`` renders ``N`` figures; anything else is an annotation path."""
    if spec.startswith("synthetic:"):
        count = int(spec.split(":", 1)[1])
        cfg = D.SynthConfig(occlusion_prob=occlusion, unannotated_prob=unannotated)
        return D.synth_dataset(seed, count, K, canvas, cfg)
    examples = D.load_annotations(spec, fmt)
    if K == 16:
        examples = [D.to_mpii16(ex) for ex in examples]
    return examples


def pck_spec(metric):
    return PCK_LSP if metric == "pck" else PCKH_MPII


def predict_coords(model, examples, batch_size=32):
    """Decode final heatmaps and map them back to original image coordinates."""
    cfg = model.config
    n, h = cfg.input_size, cfg.output_size
    factor = (n - 1) / (h - 1) if h > 1 else 1.0
    out = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        crops = [D.crop_normalize(ex, n) for ex in chunk]
        images = np.stack([c.image.transpose(2, 0, 1) for c in crops]).astype(model.store.dtype)
        with no_grad():
            final = model.forward(images, training=False).final.data
        coords, _ = decode_batch(final)
        for c, xy in zip(crops, coords):
            out.append(D.apply_affine(c.inverse, xy * factor))
    return np.stack(out) if out else np.zeros((0, cfg.K, 2))


def evaluate(model, examples, metric="pck", batch_size=32):
    coords = predict_coords(model, examples, batch_size)
    gt = np.stack([ex.keypoints for ex in examples])
    mask = np.stack([ex.mask for ex in examples])
    boxes = [ex.head_box for ex in examples]
    boxes = boxes if any(b is not None for b in boxes) else None
    return pck(coords, gt, mask, list(model.skeleton.names), pck_spec(metric), boxes)


# ---------------------------------------------------------------- training


def _state(model, opt):
    arrays = dict(model.store.state())
    arrays.update(opt.state())
    return arrays


def save_checkpoint(path, model, opt, step, run_cfg):
    meta = model.metadata()
    meta.update(step=step, run=run_cfg.to_dict())
    tmp = path + ".tmp"
    checkpoint.save(tmp, _state(model, opt), meta, model.store.dtype)
    os.replace(tmp, path)


def load_model(path, dtype=np.float32):
    """Model (and checkpoint metadata) from a checkpoint file."""
    arrays, meta = checkpoint.load(path)
    model = ReposeModel.from_metadata(meta, dtype=dtype)
    model.store.load_state({k: v for k, v in arrays.items() if not k.startswith("optim.")})
    return model, meta


@dataclass
class TrainResult:
    steps: int
    losses: list = field(default_factory=list)  # (step, loss)
    val: object = None
    seconds: float = 0.0
    checkpoint: str = None
    model: object = None


def train(run_cfg, resume=True, progress=None, time_limit=None):
    """Train per ``run_cfg``; resumes from ``output_dir/latest.ckpt`` when present."""
    cfg = run_cfg.model
    os.makedirs(run_cfg.output_dir, exist_ok=True)
    with open(os.path.join(run_cfg.output_dir, "run.json"), "w") as fh:
        fh.write(run_cfg.to_json())
    ckpt_path = os.path.join(run_cfg.output_dir, "latest.ckpt")
    log_path = os.path.join(run_cfg.output_dir, "log.csv")

    train_ex = load_examples(run_cfg.train_data, cfg.K, cfg.input_size, run_cfg.seed, run_cfg.data_format,
                             run_cfg.synth_occlusion, run_cfg.synth_unannotated)
    val_ex = None
    if run_cfg.val_data:
        val_ex = load_examples(run_cfg.val_data, cfg.K, cfg.input_size, run_cfg.seed + 1, run_cfg.data_format,
                               run_cfg.synth_occlusion, run_cfg.synth_unannotated)

    model = ReposeModel(cfg, seed=run_cfg.seed)
    opt = Adam(model.store, lr_at(run_cfg.lr_schedule, 0), run_cfg.betas, run_cfg.eps)
    start = 0
    if resume and os.path.exists(ckpt_path):
        arrays, meta = checkpoint.load(ckpt_path)
        model.store.load_state({k: v for k, v in arrays.items() if not k.startswith("optim.")})
        opt.load_state(arrays)
        start = int(meta["step"])
        log.info("resumed from %s at step %d", ckpt_path, start)
    new_log = start == 0 or not os.path.exists(log_path)
    fh = open(log_path, "w" if new_log else "a", newline="")
    writer = csv.writer(fh)
    if new_log:
        writer.writerow(LOG_FIELDS)

    flip_perm = model.skeleton.flip_permutation()
    loader = D.BatchLoader(train_ex, run_cfg.batch_size, cfg.input_size, cfg.output_size, cfg.heatmap_sigma,
                           run_cfg.seed, run_cfg.augment, flip_perm=flip_perm, start_step=start)
    result = TrainResult(start)
    last_ckpt = ckpt_path if start else None
    t0 = time.perf_counter()
    step = start
    try:
        for step in range(start, run_cfg.max_steps):
            if time_limit is not None and time.perf_counter() - t0 > time_limit:
                log.warning("time limit reached at step %d", step)
                break
            batch = next(loader)
            lr = lr_at(run_cfg.lr_schedule, step)
            model.store.zero_grad()
            pred = model.forward(batch.images.astype(model.store.dtype), training=True)
            loss = total_loss(pred, batch.heatmaps, batch.mask)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(step, value, last_ckpt)
            loss.backward()
            opt.step(lr)
            result.losses.append((step, value))
            val = ""
            done = step + 1
            if val_ex and run_cfg.eval_every and done % run_cfg.eval_every == 0:
                val = f"{evaluate(model, val_ex, run_cfg.metric).mean:.4f}"
            if done % run_cfg.log_every == 0 or val or step == start:
                writer.writerow((step, f"{value:.6g}", f"{lr:.3g}", f"{time.perf_counter() - t0:.1f}", val))
                fh.flush()
                if progress:
                    progress(step, value)
            if run_cfg.checkpoint_every and done % run_cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_path, model, opt, done, run_cfg)
                last_ckpt = ckpt_path
        else:
            step = run_cfg.max_steps
        if step > start or not os.path.exists(ckpt_path):
            save_checkpoint(ckpt_path, model, opt, step, run_cfg)
    finally:
        loader.close()
        fh.close()
    result.steps = step
    result.seconds = time.perf_counter() - t0
    result.checkpoint = ckpt_path
    if val_ex:
        result.val = evaluate(model, val_ex, run_cfg.metric)
        with open(os.path.join(run_cfg.output_dir, "val.json"), "w") as vf:
            json.dump({"mean": result.val.mean, "groups": result.val.groups, "step": step}, vf, indent=2)
    result.model = model
    return result
