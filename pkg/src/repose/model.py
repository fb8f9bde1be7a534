"""The RePose network.

Layer plan of one stage (``T`` trunk channels, ``D`` decoupled channels):

* encoder: stem ``(3,1,T)^r`` at input resolution, then ``[(5,2,T), (3,1,T)^r]``
  per halving down to ``coarsest_size``; the outputs at intermediate
  resolutions are kept as skips.
* decouple: ``K`` independent ``(1,1,D)`` projections of the coarse features.
* pre/post-update heads: per keypoint ``(3,1,D)^4`` then ``(3,1,1)_u``.  The
  ``K`` independent heads run as one grouped convolution.
* kinematic update: per schedule slot ``h = (1,1,D)``, ``g = (3,1,D)^r`` and a
  scalar ``lambda``, applied one keypoint at a time.
* decoder: at every resolution from ``2 * coarsest`` up to the input size:
  upsample x2, concat the skip (if any), project with ``(3,1,T)`` and predict
  ``K`` heatmaps with ``(3,1,K)_u``.

Every predicted stack is resized to the heatmap size and supervised.
"""
import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .kinematics import build_schedule, default_skeleton, skeleton_from_dict
from .netcore import ops
from .netcore.layers import ConvBlock, ConvBlockSpec, ParamStore
from .netcore.tensor import ShapeError, Tensor, no_grad

STRATEGIES = ("trainable", "add", "replace")
ORDERINGS = ("hips_out", "head_down")


@dataclass(frozen=True)
class ReposeConfig:
    K: int = 16
    input_size: int = 128
    coarsest_size: int = 16
    decoupled_channels: int = 32
    trunk_channels: int = 64
    trunk_repeat: int = 4
    head_repeat: int = 4
    update_conv_blocks: int = 4
    update_strategy: str = "trainable"
    ordering_variant: str = "hips_out"
    stack_count: int = 1
    joint_post_update_head: bool = False
    kinematic_updates: bool = True
    sequential_updates: bool = True
    relu_before_bn: bool = True
    lambda_init: float = 0.0
    heatmap_size: int = 0
    sigma: float = 0.0
    head_init_std: float = 1e-3  # heatmap output layers; 0 selects He initialization

    def __post_init__(self):
        problems = []
        for name in ("K", "decoupled_channels", "trunk_channels", "trunk_repeat", "head_repeat",
                     "update_conv_blocks", "stack_count", "input_size", "coarsest_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1 (got {getattr(self, name)})")
        if self.input_size >= 1 and self.coarsest_size >= 1:
            ratio = self.input_size / self.coarsest_size
            if ratio < 2 or ratio != int(ratio) or int(ratio) & (int(ratio) - 1):
                problems.append(
                    f"input_size / coarsest_size must be a power of 2 >= 2 "
                    f"(got {self.input_size} / {self.coarsest_size})"
                )
        if self.update_strategy not in STRATEGIES:
            problems.append(f"update_strategy must be one of {STRATEGIES} (got {self.update_strategy!r})")
        if self.ordering_variant not in ORDERINGS:
            problems.append(f"ordering_variant must be one of {ORDERINGS} (got {self.ordering_variant!r})")
        if self.heatmap_size < 0 or self.sigma < 0:
            problems.append("heatmap_size and sigma must be non-negative (0 selects the default)")
        if self.head_init_std < 0:
            problems.append(f"head_init_std must be non-negative (got {self.head_init_std})")
        if problems:
            raise ValueError("invalid ReposeConfig: " + "; ".join(problems))

    @property
    def output_size(self):
        return self.heatmap_size or self.input_size

    @property
    def heatmap_sigma(self):
        return self.sigma or 5.0 * self.output_size / 128

    @property
    def n_down(self):
        return int(round(np.log2(self.input_size // self.coarsest_size)))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown ReposeConfig fields: {unknown}")
        return cls(**d)


@dataclass
class PosePrediction:
    """Supervised heatmap stacks (all ``B x K x n x n``), in prediction order."""

    labels: list
    supervised: list

    @property
    def final(self):
        return self.supervised[-1]

    def stack(self, label):
        return self.supervised[self.labels.index(label)]

    def __len__(self):
        return len(self.supervised)


class ReposeStage:
    """One encoder / kinematic-update / decoder pass."""

    def __init__(self, store, prefix, config, skeleton, rng, in_channels=3):
        cfg = config
        T, D, K = cfg.trunk_channels, cfg.decoupled_channels, cfg.K
        bn_first = not cfg.relu_before_bn
        u_std = cfg.head_init_std
        self.config = cfg
        self.prefix = prefix
        self.skeleton = skeleton.with_ordering(cfg.ordering_variant)
        self.schedule = build_schedule(self.skeleton)
        self.neighbors = [self.skeleton.neighbors(k) for k in range(K)]
        self.plan = []  # (name, ConvBlock, input resolution)
        self.update_log = []

        def block(name, spec, cin, res):
            spec = replace(spec, relu_first=not bn_first)
            b = ConvBlock(store, f"{prefix}{name}", spec, cin, rng)
            self.plan.append((name, b, res))
            return b

        n = cfg.input_size
        self.stem = block("encoder.stem", ConvBlockSpec(3, 1, T, cfg.trunk_repeat), in_channels, n)
        self.down, self.trunk = [], []
        res = n
        for i in range(cfg.n_down):
            self.down.append(block(f"encoder.down{i}", ConvBlockSpec(5, 2, T), T, res))
            res //= 2
            self.trunk.append(block(f"encoder.f{i}", ConvBlockSpec(3, 1, T, cfg.trunk_repeat), T, res))
        c = cfg.coarsest_size
        self.decouple_block = block("decouple", ConvBlockSpec(1, 1, K * D), T, c)
        self.pre_head = self._keypoint_heads(block, "pre_head", c)
        if cfg.joint_post_update_head:
            self.post_head = [
                block("post_head.proj", ConvBlockSpec(1, 1, T), K * D, c),
                block("post_head.conv", ConvBlockSpec(3, 1, T), T, c),
                block("post_head.out", ConvBlockSpec(3, 1, K, batchnorm=False, init_std=u_std), T, c),
            ]
        else:
            self.post_head = self._keypoint_heads(block, "post_head", c)
        self.h, self.g, self.lam = [], [], []
        for step in self.schedule:
            cin = D * (1 + len(self.neighbors[step.keypoint]))
            self.h.append(block(f"update.{step.slot}.h", ConvBlockSpec(1, 1, D), cin, c))
            self.g.append(block(f"update.{step.slot}.g", ConvBlockSpec(3, 1, D, cfg.update_conv_blocks), D, c))
            if cfg.update_strategy == "trainable":
                self.lam.append(store.add(f"{prefix}update.{step.slot}.lambda", [cfg.lambda_init]))
            else:
                self.lam.append(None)
        self.proj, self.heads, self.decoder_res = [], [], []
        res, cin = c, K * D
        for j in range(cfg.n_down):
            res *= 2
            skip_c = T if res < n else 0
            self.proj.append(block(f"decoder.{res}.proj", ConvBlockSpec(3, 1, T), cin + skip_c, res))
            head = ConvBlockSpec(3, 1, K, batchnorm=False, init_std=u_std)
            self.heads.append(block(f"decoder.{res}.head", head, T, res))
            self.decoder_res.append(res)
            cin = T

    def _keypoint_heads(self, block, name, res):
        cfg = self.config
        K, D = cfg.K, cfg.decoupled_channels
        return [
            block(f"{name}.convs", ConvBlockSpec(3, 1, D, cfg.head_repeat, groups=K), K * D, res),
            block(f"{name}.out", ConvBlockSpec(3, 1, 1, batchnorm=False, groups=K, init_std=cfg.head_init_std),
                  K * D, res),
        ]

    # -- pieces ---------------------------------------------------------------

    def encode(self, x, training=False):
        cfg = self.config
        if x.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ShapeError(f"encode: expected input {cfg.input_size}x{cfg.input_size}, got shape {x.shape}")
        x = self.stem(x, training)
        skips = {}
        for i, (d, f) in enumerate(zip(self.down, self.trunk)):
            x = f(d(x, training), training)
            if i < len(self.down) - 1:
                skips[x.shape[2]] = x
        return x, skips

    def decouple(self, coarse, training=False):
        if coarse.shape[1] != self.config.trunk_channels:
            raise ShapeError(f"decouple: expected {self.config.trunk_channels} channels, got shape {coarse.shape}")
        return self.decouple_block(coarse, training)

    def heads_apply(self, heads, feats, training=False):
        for b in heads:
            feats = b(feats, training)
        return feats

    def kinematic_update(self, features, training=False, sequential=None):
        """Apply the two-pass schedule to the list of ``K`` feature tensors.

        Sequential mode updates in place so later steps see earlier updates;
        the parallel variant reads every step of a pass from a snapshot taken
        at the start of that pass.
        """
        cfg = self.config
        sequential = cfg.sequential_updates if sequential is None else sequential
        if len(features) != cfg.K:
            raise ValueError(f"kinematic_update: expected {cfg.K} feature sets, got {len(features)}")
        feats = list(features)
        snapshot = list(feats)
        current_pass = None
        for step in self.schedule:
            if step.pass_id != current_pass:
                current_pass = step.pass_id
                snapshot = list(feats)
            src = feats if sequential else snapshot
            k = step.keypoint
            c = ops.concat_channels([src[k]] + [src[j] for j in self.neighbors[k]])
            delta = self.g[step.slot](self.h[step.slot](c, training), training)
            feats[k] = ops.residual_mix(feats[k], delta, cfg.update_strategy, self.lam[step.slot])
            self.update_log.append((k, step.pass_id, step.slot))
        return feats

    def refine(self, updated_cat, skips, training=False):
        """Decoder pass; returns (heatmap stacks at their native resolutions, final features)."""
        x = updated_cat
        stacks = []
        for res, proj, head in zip(self.decoder_res, self.proj, self.heads):
            x = ops.bilinear_resize(x, res, res)
            if res in skips:
                x = ops.concat_channels([x, skips[res]])
            x = proj(x, training)
            stacks.append(head(x, training))
        return stacks, x

    def forward(self, x, training=False, skip_updates=False):
        cfg = self.config
        self.update_log = []
        coarse, skips = self.encode(x, training)
        decoupled = self.decouple(coarse, training)
        pre = self.heads_apply(self.pre_head, decoupled, training)
        if cfg.kinematic_updates and not skip_updates:
            feats = ops.split_channels(decoupled, cfg.decoupled_channels)
            updated = ops.concat_channels(self.kinematic_update(feats, training))
        else:
            updated = decoupled
        post = self.heads_apply(self.post_head, updated, training)
        dec, final_feats = self.refine(updated, skips, training)
        labels = ["pre_update", "post_update"] + [f"decoder@{r}" for r in self.decoder_res]
        return labels, [pre, post] + dec, final_feats

    def macs(self):
        total = 0
        for _name, b, res in self.plan:
            total += b.macs(res, res)[0]
        return total


class ReposeModel:
    def __init__(self, config, skeleton=None, seed=0, dtype=np.float32):
        skeleton = skeleton or default_skeleton(config.K)
        if skeleton.K != config.K:
            raise ValueError(f"skeleton has K={skeleton.K} keypoints but config.K={config.K}")
        self.config = config
        self.skeleton = skeleton
        self.store = ParamStore(dtype)
        rng = np.random.default_rng(seed)
        self.stages = []
        for s in range(config.stack_count):
            cin = 3 if s == 0 else 3 + config.trunk_channels + config.K
            prefix = "" if config.stack_count == 1 else f"stage{s}."
            self.stages.append(ReposeStage(self.store, prefix, config, skeleton, rng, in_channels=cin))
        self.schedule = self.stages[0].schedule

    # -- bookkeeping ------------------------------------------------------------

    @property
    def params(self):
        return self.store.params

    def n_params(self):
        return self.store.count()

    def macs(self):
        """Multiply-accumulates of one forward pass on a single image (convolutions only)."""
        total = sum(st.macs() for st in self.stages)
        return int(total)

    def flops(self):
        return 2 * self.macs()

    def astype(self, dtype):
        self.store.astype(dtype)
        return self

    @property
    def update_log(self):
        return [entry for st in self.stages for entry in st.update_log]

    def describe(self):
        cfg = self.config
        lines = [f"RePose  K={cfg.K}  input={cfg.input_size}  coarsest={cfg.coarsest_size}  stages={cfg.stack_count}"]
        for st in self.stages:
            for name, b, res in st.plan:
                if name.startswith("update."):
                    slot = int(name.split(".")[1])
                    if slot == 1 and name.endswith(".h"):
                        lines.append(f"  {st.prefix}update.1 .. update.{len(st.schedule) - 1}  (same layout per slot)")
                    if slot > 0:
                        continue
                lines.append(f"  {st.prefix}{name:<28} {str(b.spec):<22} @{res:>4}  params={b.n_params():>9,}")
        lines.append(f"parameters: {self.n_params():,}")
        lines.append(f"FLOPS (2 x MACs, one {cfg.input_size}x{cfg.input_size} image): {self.flops() / 1e9:.2f} G")
        return "\n".join(lines)

    # -- forward ----------------------------------------------------------------

    def forward(self, image, training=False, skip_updates=False):
        """``image``: ``(B, 3, n, n)`` tensor/array in [0, 1] -> :class:`PosePrediction`."""
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=self.store.dtype))
        out = self.config.output_size
        labels, stacks = [], []
        x = image
        for s, st in enumerate(self.stages):
            if s > 0:
                prev = ops.bilinear_resize(stacks[-1], *image.shape[2:])
                x = ops.concat_channels([image, feats, prev])
            lab, raw, feats = st.forward(x, training, skip_updates)
            tag = "" if len(self.stages) == 1 else f"stage{s}/"
            labels += [tag + l for l in lab]
            stacks += [ops.bilinear_resize(h, out, out) for h in raw]
        return PosePrediction(labels, stacks)

    __call__ = forward

    def predict(self, images):
        with no_grad():
            return self.forward(images, training=False)

    # -- state --------------------------------------------------------------------

    def metadata(self):
        return {"config": self.config.to_dict(), "skeleton": self.skeleton.to_dict()}

    @classmethod
    def from_metadata(cls, meta, dtype=np.float32):
        cfg = ReposeConfig.from_dict(meta["config"])
        return cls(cfg, skeleton_from_dict(meta["skeleton"]), dtype=dtype)


def build(config, skeleton=None, seed=0, dtype=np.float32):
    return ReposeModel(config, skeleton, seed=seed, dtype=dtype)


def stack(config, S, skeleton=None, seed=0, dtype=np.float32):
    if S < 1:
        raise ValueError(f"stack count must be >= 1, got {S}")
    return build(replace(config, stack_count=S), skeleton, seed, dtype)


def encode(model, image, training=False):
    return model.stages[0].encode(_as_tensor(model, image), training)


def decouple(model, coarse, training=False):
    out = model.stages[0].decouple(_as_tensor(model, coarse), training)
    return ops.split_channels(out, model.config.decoupled_channels)


def predict_keypoint_head(model, f_k, k, head="pre_head", training=False):
    """Run keypoint ``k``'s own head on its ``D``-channel features.

    Slices keypoint ``k``'s weights out of the grouped head; the result equals
    channel ``k`` of the grouped evaluation.
    """
    st = model.stages[0]
    blocks = st.pre_head if head == "pre_head" else st.post_head
    if head == "post_head" and model.config.joint_post_update_head:
        raise ValueError("the joint post-update head has no per-keypoint slots")
    x = _as_tensor(model, f_k)
    if x.shape[1] != model.config.decoupled_channels:
        raise ShapeError(f"predict_keypoint_head: expected {model.config.decoupled_channels} channels, got {x.shape}")
    bufs = model.store.buffers
    for b in blocks:
        fo = b.spec.filters
        sl = slice(k * fo, (k + 1) * fo)
        for layer in b.layers:
            w = Tensor(layer["weight"].data[sl])
            bias = Tensor(layer["bias"].data[sl]) if "bias" in layer else None
            x = ops.conv2d(x, w, bias, stride=b.spec.stride)
            if b.spec.batchnorm and not b.spec.relu_first:
                x = _bn_slice(x, layer, bufs, sl, training)
                x = ops.relu(x)
            else:
                x = ops.relu(x)
                if b.spec.batchnorm:
                    x = _bn_slice(x, layer, bufs, sl, training)
    return x


def _bn_slice(x, layer, bufs, sl, training):
    mean = bufs[layer["mean"]][sl].copy()
    var = bufs[layer["var"]][sl].copy()
    return ops.batchnorm(x, Tensor(layer["gamma"].data[sl]), Tensor(layer["beta"].data[sl]), mean, var, training)


def kinematic_update(model, features, training=False, sequential=None):
    return model.stages[0].kinematic_update(features, training, sequential)


def refine(model, updated, skips, training=False):
    """Decoder on the ``K`` updated feature sets; returns stacks resized to the heatmap size."""
    st = model.stages[0]
    cat = ops.concat_channels(list(updated)) if isinstance(updated, (list, tuple)) else updated
    stacks, _ = st.refine(cat, skips, training)
    n = model.config.output_size
    return [ops.bilinear_resize(h, n, n) for h in stacks]


def forward(model, image, training=False):
    return model.forward(image, training)


def _as_tensor(model, x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=model.store.dtype))


def config_to_json(cfg):
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
