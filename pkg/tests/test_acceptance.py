"""Acceptance criteria, one test per criterion; each prints a PASS/FAIL line."""
import csv
import json
import math
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest

from repose import data as D
from repose.heatmap import Keypoint2D, decode_peak, synth_heatmap, synth_heatmaps
from repose.kinematics import FORWARD, REVERSE, collision_probability, default_skeleton
from repose.lossmetrics import GROUPS, PCK_LSP, PckSpec, partial_mse, pck, total_loss
from repose.model import ReposeConfig, ReposeModel
from repose.netcore import ops
from repose.netcore.gradcheck import grad_check
from repose.netcore.layers import ConvBlock, ConvBlockSpec, ParamStore
from repose.netcore.tensor import Tensor

from conftest import TOY_CONFIG, toy_skeleton

LSP = list(default_skeleton(14).names)


@pytest.fixture
def verdict(capsys):
    def report(n, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} [{n}] {title}" + (f": {detail}" if detail else ""), flush=True)
        assert ok, f"criterion {n} failed: {detail}"

    return report


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def repose_cmd():
    exe = shutil.which("repose")
    return [exe] if exe else [sys.executable, "-m", "repose.cli"]


# 1 ---------------------------------------------------------------------------


def test_1_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    errors = {}
    x, w, b = leaf(rng.normal(size=(2, 4, 7, 7))), leaf(rng.normal(size=(6, 2, 3, 3))), leaf(rng.normal(size=6))
    errors["conv2d"] = grad_check(lambda: ops.conv2d(x, w, b, stride=2, groups=2), [x, w, b])
    errors["relu"] = grad_check(lambda: ops.relu(x), [x])
    g, be = leaf(rng.uniform(0.5, 1.5, 4)), leaf(rng.normal(size=4))
    for training in (True, False):
        mean, var = np.zeros(4), np.ones(4)
        errors[f"batchnorm(training={training})"] = grad_check(
            lambda: ops.batchnorm(x, g, be, mean.copy(), var.copy(), training), [x, g, be])
    errors["bilinear_resize"] = grad_check(lambda: ops.bilinear_resize(x, 12, 5), [x])
    y = leaf(rng.normal(size=(2, 3, 7, 7)))
    errors["concat_channels"] = grad_check(lambda: ops.concat_channels([x, y]), [x, y])
    errors["split_channels"] = grad_check(lambda: ops.concat_channels(ops.split_channels(x, 2)[::-1]), [x])
    f, d, lam = leaf(rng.normal(size=(2, 3, 4, 4))), leaf(rng.normal(size=(2, 3, 4, 4))), leaf([0.4])
    for strategy in ("trainable", "add", "replace"):
        errors[f"residual_mix({strategy})"] = grad_check(
            lambda: ops.residual_mix(f, d, strategy, lam if strategy == "trainable" else None),
            [f, d, lam] if strategy == "trainable" else [f, d])
    errors["sum_all"] = grad_check(lambda: ops.sum_all(x), [x])
    mask = np.array([[1, 0, 1, 1], [0, 1, 1, 1]], bool)
    gt = rng.random((2, 4, 7, 7))
    errors["partial_mse"] = grad_check(lambda: partial_mse(x, gt, mask), [x])

    store = ParamStore(np.float64)
    blk = ConvBlock(store, "u", ConvBlockSpec(3, 1, 5, 2, batchnorm=False), 4, rng)
    errors["conv block (_u)"] = grad_check(lambda: blk(x), [x] + list(store))

    # full toy model through the total loss; He init on the heads keeps outputs away from the ReLU kink
    cfg = ReposeConfig(**{**TOY_CONFIG.to_dict(), "lambda_init": 0.3, "head_init_std": 0.0})
    model = ReposeModel(cfg, toy_skeleton(), seed=0, dtype=np.float64)
    img = rng.uniform(0, 1, (2, 3, 32, 32))
    hm = np.stack([synth_heatmaps(rng.uniform(0, 31, (4, 2)), np.ones(4, bool), 32, 1.25, np.float64)
                   for _ in range(2)])
    m = np.array([[1, 1, 1, 1], [1, 1, 0, 1]], bool)
    model_err = 0.0
    for name, p in model.store.params.items():
        e = grad_check(lambda: total_loss(model.forward(img, training=True), hm, m), [p], max_elems=2, name=name)
        model_err = max(model_err, e)
    errors["toy model (all parameters)"] = model_err
    img_t = leaf(img)
    errors["toy model (input)"] = grad_check(lambda: total_loss(model.forward(img_t, training=True), hm, m),
                                             [img_t], max_elems=20)
    seconds = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and seconds < 120
    verdict(1, "gradient fidelity", ok,
            f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e} (< 1e-4), {seconds:.0f}s (< 120s)")


# 2 ---------------------------------------------------------------------------


def test_2_lambda_gate_identity(verdict):
    rng = np.random.default_rng(1)
    cfg = ReposeConfig(K=14, input_size=64, coarsest_size=8, decoupled_channels=4, trunk_channels=8,
                       trunk_repeat=1, head_repeat=1, update_conv_blocks=2, update_strategy="trainable")
    full = ReposeModel(cfg, seed=3)
    for step in full.schedule:
        full.store[f"update.{step.slot}.lambda"].data[...] = 0.0
    # make the update branches produce something non-trivial so the gate has work to do
    for name, p in full.store.params.items():
        if name.startswith("update.") and name.endswith("beta"):
            p.data[...] = rng.normal(size=p.shape)
    ablated = ReposeModel(ReposeConfig(**{**cfg.to_dict(), "kinematic_updates": False}), seed=99)
    ablated.store.load_state(full.store.state())
    x = rng.uniform(0, 1, (2, 3, 64, 64)).astype(np.float32)
    a, b = full.predict(x), ablated.predict(x)
    same = all(p.data.tobytes() == q.data.tobytes() for p, q in zip(a.supervised, b.supervised))
    for step in full.schedule:
        full.store[f"update.{step.slot}.lambda"].data[...] = 0.5
    moved = full.predict(x).final.data.tobytes() != b.final.data.tobytes()
    verdict(2, "lambda=0 equals the update-free model", same and moved,
            f"bitwise equal over {len(a)} stacks: {same}; lambda=0.5 differs: {moved}")


# 3 ---------------------------------------------------------------------------


def test_3_schedule_law(verdict):
    details, ok = [], True
    for K in (4, 14, 16):
        if K == 4:
            model = ReposeModel(TOY_CONFIG, toy_skeleton(), dtype=np.float32)
        else:
            model = ReposeModel(ReposeConfig(K=K, input_size=32, coarsest_size=8, decoupled_channels=2,
                                             trunk_channels=4, trunk_repeat=1, head_repeat=1, update_conv_blocks=1))
        cfg = model.config
        model.forward(np.zeros((1, 3, cfg.input_size, cfg.input_size), np.float32))
        log = model.update_log
        order = list(model.stages[0].skeleton.ordering)
        fwd = [k for k, p, _ in log if p == FORWARD]
        rev = [k for k, p, _ in log if p == REVERSE]
        passes = [p for _, p, _ in log]
        slots = [s for _, _, s in log]
        arrays = [[p.data for n, p in model.store.params.items() if n.startswith(f"update.{s}.")] for s in slots]
        disjoint = all(arrays) and not any(
            np.shares_memory(a, b) for i in range(len(arrays)) for j in range(i) for a in arrays[i] for b in arrays[j])
        this = (len(log) == 2 * K and fwd == order and rev == order[::-1]
                and passes == [FORWARD] * K + [REVERSE] * K and sorted(slots) == list(range(2 * K)) and disjoint)
        ok &= this
        details.append(f"K={K}: {len(log)} updates{'' if this else ' (wrong)'}")
    verdict(3, "schedule law", ok, ", ".join(details))


# 4 ---------------------------------------------------------------------------


def test_4_collision_formula(verdict):
    p8, p16 = collision_probability(8, 14), collision_probability(16, 14)
    ok = abs(p8 - 0.78) <= 0.005 and abs(p16 - 0.30) <= 0.005
    verdict(4, "collision probabilities", ok, f"8x8: {p8:.4f} (0.78), 16x16: {p16:.4f} (0.30)")


# 5 ---------------------------------------------------------------------------


def test_5_parameter_counts(verdict):
    base = ReposeConfig()
    default = ReposeModel(base).n_params()
    r1 = ReposeModel(ReposeConfig(update_conv_blocks=1)).n_params()
    stacked = ReposeModel(ReposeConfig(stack_count=2)).n_params()
    by_res = {c: ReposeModel(ReposeConfig(coarsest_size=c)) for c in (8, 16, 32)}
    params = {c: m.n_params() for c, m in by_res.items()}
    flops = {c: m.flops() for c, m in by_res.items()}

    def near(v, ref):
        return abs(v - ref) <= 0.2 * ref

    ok = (near(default, 4.0e6) and near(r1, 3.3e6) and near(stacked, 8.4e6)
          and params[8] > params[16] > params[32] and flops[32] > flops[16] > flops[8])
    verdict(5, "parameter counts and orderings", ok,
            f"default {default / 1e6:.2f}M (4.0M), r=1 {r1 / 1e6:.2f}M (3.3M), S=2 {stacked / 1e6:.2f}M (8.4M); "
            f"params 8/16/32 = {'/'.join(f'{params[c] / 1e6:.2f}' for c in (8, 16, 32))}M; "
            f"FLOPS 8/16/32 = {'/'.join(f'{flops[c] / 1e9:.1f}' for c in (8, 16, 32))}G")


# 6 ---------------------------------------------------------------------------


def test_6_loss_law(verdict):
    gt = np.zeros((1, 2, 2, 2))
    pred = gt.copy()
    pred[0, 1, 0, 1] = 1.0
    hand = float(partial_mse(pred, gt, np.ones((1, 2), bool)).data)
    rng = np.random.default_rng(6)
    bad = 0
    for _ in range(1000):
        B, K, h = rng.integers(1, 4), rng.integers(1, 7), rng.integers(1, 6)
        p, g = rng.random((B, K, h, h)), rng.random((B, K, h, h))
        mask = rng.random((B, K)) < 0.5
        mask[np.arange(B), rng.integers(0, K, B)] = True
        noisy = p.copy()
        noisy[~mask] = rng.normal(size=(int((~mask).sum()), h, h)) * 1e3
        a, b = float(partial_mse(p, g, mask).data), float(partial_mse(noisy, g, mask).data)
        bad += a != b
    ok = abs(hand - 0.125) <= 1e-12 and bad == 0
    verdict(6, "partial MSE law", ok, f"hand example {hand!r} (0.125); masked-channel fuzz violations {bad}/1000")


# 7 ---------------------------------------------------------------------------


def brute_pck(dec, gt, mask, alpha):
    a, b = LSP.index("right_shoulder"), LSP.index("left_hip")
    members = {"head": ("head", "neck")}
    members.update({g: ("right_" + g, "left_" + g) for g in GROUPS[1:]})
    hit = tot = 0
    per = {g: [0, 0] for g in members}
    for i in range(len(gt)):
        if not (mask[i, a] and mask[i, b]):
            continue
        ref = math.sqrt((gt[i, a, 0] - gt[i, b, 0]) ** 2 + (gt[i, a, 1] - gt[i, b, 1]) ** 2)
        if ref == 0:
            continue
        for k, name in enumerate(LSP):
            for g, names in members.items():
                if name in names and mask[i, k]:
                    d = math.sqrt((dec[i, k, 0] - gt[i, k, 0]) ** 2 + (dec[i, k, 1] - gt[i, k, 1]) ** 2)
                    inside = d <= alpha * ref
                    per[g][0] += inside
                    per[g][1] += 1
                    hit += inside
                    tot += 1
    return {g: h / t for g, (h, t) in per.items()}, hit / tot


def test_7_metric_oracle(verdict):
    rng = np.random.default_rng(7)
    gt = rng.uniform(0, 300, (200, 14, 2))
    dec = gt + rng.normal(0, 25, gt.shape)
    mask = rng.random((200, 14)) < 0.9
    res = pck(dec, gt, mask, LSP, PCK_LSP)
    groups, mean = brute_pck(dec, gt, mask, 0.2)
    exact = res.groups == groups and res.mean == mean
    alphas = np.linspace(0.01, 1.0, 20)
    curve = [pck(dec, gt, mask, LSP, PckSpec(float(a))).mean for a in alphas]
    monotone = all(x <= y for x, y in zip(curve, curve[1:]))
    verdict(7, "PCK oracle and monotonicity", exact and monotone,
            f"mean {res.mean:.4f} vs brute force {mean:.4f} (exact: {exact}); "
            f"monotone over 20 alphas: {monotone} ({curve[0]:.3f} .. {curve[-1]:.3f})")


# 8 ---------------------------------------------------------------------------


def test_8_heatmap_round_trip_and_involutions(verdict):
    rng = np.random.default_rng(8)
    misses = 0
    for _ in range(1000):
        n = int(rng.choice([16, 32, 64, 128]))
        x, y = (int(v) for v in rng.integers(0, n, 2))
        sigma = float(rng.uniform(0.5, 10.0))
        kp, _ = decode_peak(synth_heatmap(Keypoint2D(x, y), n, sigma))
        misses += (kp.x, kp.y) != (x, y)
    flip_err = rot_err = 0.0
    flip_image_ok = True
    for _ in range(50):
        img = rng.integers(0, 255, (64, 64, 3), dtype=np.uint8)
        kps = 32 + rng.uniform(-14, 14, (14, 2))
        ex = D.PoseExample(img, kps, np.ones(14, bool), (32, 32), 64.0)
        twice = D.transform_example(D.transform_example(ex, flip=True), flip=True)
        flip_err = max(flip_err, float(np.abs(twice.keypoints - ex.keypoints).max()))
        flip_image_ok &= twice.image.tobytes() == ex.image.tobytes()
        theta, s = float(rng.uniform(-60, 60)), float(rng.uniform(0.7, 1.3))
        back = D.transform_example(D.transform_example(ex, theta, s), -theta, 1 / s)
        rot_err = max(rot_err, float(np.abs(back.keypoints - ex.keypoints).max()))
    ok = misses == 0 and flip_err <= 1e-9 and flip_image_ok and rot_err <= 1e-4
    verdict(8, "heatmap round trip and augmentation involutions", ok,
            f"decode misses {misses}/1000; flip twice max err {flip_err:.1e} px (image bitwise: {flip_image_ok}); "
            f"rotate/scale then inverse max err {rot_err:.1e} px (<= 1e-4)")


# 9 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_9_desk_training(verdict, tmp_path):
    out = tmp_path / "desk"
    t0 = time.perf_counter()
    proc = subprocess.run(repose_cmd() + ["train", "--profile", "desk", "--output", str(out)],
                          capture_output=True, text=True)
    train_seconds = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stderr
    run = json.loads((out / "run.json").read_text())
    with open(out / "log.csv") as fh:
        rows = [r for r in csv.DictReader(fh)]
    loss = {int(r["step"]): float(r["loss"]) for r in rows}
    steps = json.loads((out / "val.json").read_text())["step"]
    ev = subprocess.run(repose_cmd() + ["eval", "--checkpoint", str(out / "latest.ckpt"), "--data", "synthetic:200",
                                        "--seed", "1", "--csv"], capture_output=True, text=True)
    assert ev.returncode == 0, ev.stderr
    mean_pck = float(ev.stdout.strip().splitlines()[1].split(",")[-1]) / 100
    final_step = max(loss)
    ok = (run["train_data"] == "synthetic:2000" and steps <= 10_000 and train_seconds <= 1800
          and loss[final_step] < 0.5 * loss[49] and mean_pck >= 0.90)
    verdict(9, "desk training end to end", ok,
            f"{steps} steps in {train_seconds / 60:.1f} min; loss step 50 {loss[49]:.5f} -> final {loss[final_step]:.5f} "
            f"(ratio {loss[final_step] / loss[49]:.2f} < 0.5); held-out PCK@0.2 {mean_pck:.3f} (>= 0.90)")


# 10 --------------------------------------------------------------------------


@pytest.mark.slow
def test_10_ablation_structure(verdict, tmp_path):
    out = tmp_path / "ablate"
    # the desk model's 64 px input leaves room for a 32x32 coarsest grid
    proc = subprocess.run(repose_cmd() + ["ablate", "--profile", "desk", "--strategies", "trainable,add,replace",
                                          "--coarsest", "8,16,32", "--steps", "20", "--output", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    rows = json.loads((out / "ablation.json").read_text())
    cells = {(r["cell"]["update_strategy"], r["cell"]["coarsest_size"]) for r in rows}
    complete = len(rows) == 9 and all(r["status"] == "ok" for r in rows) and len(cells) == 9
    slowest = max(r["seconds"] for r in rows)
    tables = [block for block in proc.stdout.split("\n\n") if "params (M)" in block]
    shaped = (len(tables) == 2 and tables[0].strip().startswith("update_strategy")
              and tables[1].strip().startswith("coarsest_size")
              and all(len(t.strip().splitlines()) == 4 for t in tables))
    with open(out / "ablation.csv") as fh:
        csv_rows = list(csv.reader(fh))
    ok = complete and shaped and slowest <= 600 and len(csv_rows) == 10
    verdict(10, "ablation grid structure", ok,
            f"{sum(r['status'] == 'ok' for r in rows)}/9 cells ok, slowest cell {slowest:.0f}s (<= 600s), "
            f"strategy and resolution tables emitted: {shaped}")


# 11 --------------------------------------------------------------------------


def test_11_sequential_vs_parallel(verdict):
    rng = np.random.default_rng(11)
    cfg = ReposeConfig(K=14, input_size=32, coarsest_size=8, decoupled_channels=4, trunk_channels=8,
                       trunk_repeat=1, head_repeat=1, update_conv_blocks=1)
    model = ReposeModel(cfg, seed=0, dtype=np.float64)
    for step in model.schedule:
        model.store[f"update.{step.slot}.lambda"].data[...] = rng.uniform(0.2, 1.0)
    feats = [Tensor(rng.normal(size=(2, 4, 8, 8))) for _ in range(14)]
    st = model.stages[0]
    seq = st.kinematic_update(feats, sequential=True)
    par = st.kinematic_update(feats, sequential=False)
    diff = max(float(np.abs(a.data - b.data).max()) for a, b in zip(seq, par))
    verdict(11, "sequential and parallel updates differ", diff > 1e-6, f"max abs difference {diff:.3e} (> 1e-6)")
