"""``repose`` command line: train, eval, infer, ablate, describe, convert."""
import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace

import cv2
import numpy as np

log = logging.getLogger("repose")

THREADS_ENV = "REPOSE_NUM_THREADS"


class CliError(Exception):
    """Failure with a category used for the error line and exit code."""

    CODES = {"usage": 2, "config": 2, "data": 3, "io": 3, "checkpoint": 4, "numeric": 5, "internal": 1}

    def __init__(self, category, message):
        super().__init__(message)
        self.category = category

    @property
    def code(self):
        return self.CODES.get(self.category, 1)


# ---------------------------------------------------------------- configuration


def _merge(base, override):
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def run_config(args):
    """Profile defaults, then ``--config`` overrides, then flags."""
    from .train import RunConfig, profile

    try:
        d = profile(args.profile).to_dict()
        if getattr(args, "config", None):
            with open(args.config) as fh:
                d = _merge(d, json.load(fh))
        if getattr(args, "seed", None) is not None:
            d["seed"] = args.seed
        if getattr(args, "output", None):
            d["output_dir"] = args.output
        if getattr(args, "steps", None) is not None:
            d["max_steps"] = args.steps
        return RunConfig.from_dict(d)
    except OSError as e:
        raise CliError("io", f"cannot read config: {e}") from None
    except (ValueError, TypeError, json.JSONDecodeError) as e:
        raise CliError("config", str(e)) from None


def _load_checkpoint(path):
    from .netcore.checkpoint import CheckpointError
    from .train import load_model

    if not path:
        raise CliError("usage", "--checkpoint is required")
    try:
        return load_model(path)
    except OSError as e:
        raise CliError("io", f"cannot read checkpoint: {e}") from None
    except CheckpointError as e:
        raise CliError("checkpoint", str(e)) from None
    except (ValueError, KeyError) as e:
        raise CliError("checkpoint", f"{path}: {e}") from None


def _examples(spec, K, canvas, seed, fmt):
    from .train import load_examples

    try:
        return load_examples(spec, K, canvas, seed, fmt)
    except OSError as e:
        raise CliError("io", str(e)) from None
    except ValueError as e:
        raise CliError("data", str(e)) from None


# ---------------------------------------------------------------- commands


def cmd_train(args):
    from .train import TrainingDiverged, train

    cfg = run_config(args)
    print(f"training {cfg.model.K}-keypoint model at {cfg.model.input_size}px for {cfg.max_steps} steps "
          f"-> {cfg.output_dir}", flush=True)

    def progress(step, loss):
        print(f"step {step:>6}  loss {loss:.5f}", flush=True)

    try:
        result = train(cfg, resume=not args.no_resume, progress=progress)
    except TrainingDiverged as e:
        raise CliError("numeric", str(e)) from None
    print(f"finished {result.steps} steps in {result.seconds:.0f}s; checkpoint {result.checkpoint}")
    if result.val is not None:
        from .lossmetrics import format_table

        print(format_table(result.val), end="")
    return 0


def oracle_coords(examples, model_cfg):
    """Decode rendered ground-truth heatmaps through the evaluation path (sanity mode)."""
    from . import data as D
    from .heatmap import decode_batch

    n, h = model_cfg.input_size, model_cfg.output_size
    factor = (n - 1) / (h - 1) if h > 1 else 1.0
    out = []
    for ex in examples:
        crop, hm = D.prepare(ex, n, h, model_cfg.heatmap_sigma)
        coords, _ = decode_batch(hm)
        out.append(D.apply_affine(crop.inverse, coords * factor))
    return np.stack(out)


def cmd_eval(args):
    from .lossmetrics import format_table, pck
    from .train import evaluate, pck_spec

    model, meta = _load_checkpoint(args.checkpoint)
    cfg = model.config
    examples = _examples(args.data, cfg.K, cfg.input_size, args.seed, args.format)
    if args.oracle:
        gt = np.stack([ex.keypoints for ex in examples])
        mask = np.stack([ex.mask for ex in examples])
        coords = oracle_coords(examples, cfg)
        result = pck(coords, gt, mask, list(model.skeleton.names), pck_spec(args.metric))
    else:
        result = evaluate(model, examples, args.metric)
    table = format_table(result, "csv" if args.csv else "text")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(format_table(result, "csv"))
    print(table, end="")
    if result.n_excluded:
        print(f"# {result.n_excluded} of {len(examples)} examples excluded (no reference length)")
    return 0


# right limbs solid, left limbs dashed
def _draw_line(img, a, b, colour, dashed, width=1):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if not dashed:
        cv2.line(img, tuple(int(round(v)) for v in a), tuple(int(round(v)) for v in b), colour, width, cv2.LINE_AA)
        return
    length = np.linalg.norm(b - a)
    dash = max(3.0, img.shape[0] / 40)
    n = max(1, int(length // dash))
    for i in range(0, n, 2):
        p = a + (b - a) * (i / n)
        q = a + (b - a) * (min(i + 1, n) / n)
        cv2.line(img, tuple(int(round(v)) for v in p), tuple(int(round(v)) for v in q), colour, width, cv2.LINE_AA)


def draw_overlay(image, coords, skeleton):
    img = np.ascontiguousarray(image.copy())
    width = max(1, img.shape[0] // 100)
    hsv = [(int(180 * i / max(1, len(skeleton.edges))), 220, 255) for i in range(len(skeleton.edges))]
    colours = [tuple(int(c) for c in cv2.cvtColor(np.uint8([[h]]), cv2.COLOR_HSV2RGB)[0, 0]) for h in hsv]
    for colour, (a, b) in zip(colours, sorted(skeleton.edges)):
        names = (skeleton.names[a], skeleton.names[b])
        dashed = any(nm.startswith("left_") for nm in names)
        _draw_line(img, coords[a], coords[b], colour, dashed, width)
    for x, y in coords:
        cv2.circle(img, (int(round(x)), int(round(y))), width + 1, (255, 255, 255), -1, cv2.LINE_AA)
    return img


STAGE_PANELS = ("pre_update", "post_update", "final")


def cmd_infer(args):
    from . import data as D
    from .heatmap import decode_batch, to_uint8
    from .netcore.tensor import no_grad

    model, _ = _load_checkpoint(args.checkpoint)
    cfg = model.config
    os.makedirs(args.output, exist_ok=True)
    n, h = cfg.input_size, cfg.output_size
    factor = (n - 1) / (h - 1) if h > 1 else 1.0
    for path in args.images:
        try:
            image = D.read_image(path)
        except OSError as e:
            raise CliError("io", str(e)) from None
        H, W = image.shape[:2]
        ex = D.PoseExample(image, np.zeros((cfg.K, 2)), np.zeros(cfg.K, bool), (W / 2.0, H / 2.0), float(max(H, W)))
        crop = D.crop_normalize(ex, n)
        with no_grad():
            pred = model.forward(crop.image.transpose(2, 0, 1)[None].astype(model.store.dtype))
        coords, conf = decode_batch(pred.final.data[0])
        coords = D.apply_affine(crop.inverse, coords * factor)
        stem = os.path.splitext(os.path.basename(path))[0]
        D.write_image(os.path.join(args.output, f"{stem}_overlay.png"), draw_overlay(image, coords, model.skeleton))
        with open(os.path.join(args.output, f"{stem}_keypoints.json"), "w") as fh:
            json.dump({nm: [float(x), float(y), float(c)] for nm, (x, y), c in
                       zip(model.skeleton.names, coords, conf)}, fh, indent=2)
        if args.dump_stages:
            stacks = {"pre_update": pred.stack("pre_update" if cfg.stack_count == 1 else pred.labels[0]),
                      "post_update": pred.stack("post_update" if cfg.stack_count == 1 else pred.labels[1]),
                      "final": pred.final}
            for stage in STAGE_PANELS:
                maps = stacks[stage].data[0]
                for k, nm in enumerate(model.skeleton.names):
                    cv2.imwrite(os.path.join(args.output, f"{stem}_{nm}_{stage}.png"), to_uint8(maps[k]))
        print(f"{path}: wrote {stem}_overlay.png" + (" and stage heatmaps" if args.dump_stages else ""))
    return 0


def ablation_cells(grid):
    """Expand ``{"update_strategy": [...], "coarsest_size": [...], ...}`` into a list of override dicts."""
    cells = [{}]
    for key, values in grid.items():
        cells = [dict(c, **{key: v}) for c in cells for v in values]
    return cells if grid else []


def ablation_tables(rows, axes):
    """Per-axis tables of params / FLOPS / PCK, averaging over the other axes."""
    out = []
    for axis in axes:
        lines = [f"{axis:>16} | {'params (M)':>10} | {'FLOPS (G)':>9} | {'PCK':>6}"]
        for value in dict.fromkeys(r["cell"][axis] for r in rows):
            sel = [r for r in rows if r["cell"][axis] == value and r["status"] == "ok"]
            if not sel:
                lines.append(f"{value!s:>16} | {'failed':>10} |")
                continue
            p = np.mean([r["params"] for r in sel]) / 1e6
            f = np.mean([r["flops"] for r in sel]) / 1e9
            acc = np.mean([r["pck"] for r in sel]) * 100
            lines.append(f"{value!s:>16} | {p:>10.3f} | {f:>9.3f} | {acc:>6.2f}")
        out.append("\n".join(lines))
    return out


def cmd_ablate(args):
    from .model import ReposeModel
    from .train import train

    base = run_config(args)
    if args.grid:
        try:
            with open(args.grid) as fh:
                grid = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise CliError("config", f"cannot read grid: {e}") from None
    else:
        grid = {}
        if args.strategies:
            grid["update_strategy"] = args.strategies.split(",")
        if args.coarsest:
            grid["coarsest_size"] = [int(v) for v in args.coarsest.split(",")]
    cells = ablation_cells(grid)
    if not cells:
        print("empty grid; nothing to do")
        return 0
    out_dir = base.output_dir
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, cell in enumerate(cells):
        tag = "_".join(f"{k}-{v}" for k, v in cell.items())
        t0 = time.perf_counter()
        row = {"cell": cell, "status": "ok"}
        try:
            model_cfg = replace(base.model, **cell)
            cfg = replace(base, model=model_cfg, output_dir=os.path.join(out_dir, tag))
            model = ReposeModel(model_cfg, seed=cfg.seed)
            row.update(params=model.n_params(), flops=model.flops())
            result = train(cfg, resume=False)
            row["pck"] = result.val.mean if result.val is not None else float("nan")
            row["final_loss"] = result.losses[-1][1] if result.losses else float("nan")
        except Exception as e:  # one failing cell must not stop the grid
            row.update(status="failed", error=f"{type(e).__name__}: {e}")
            log.error("cell %s failed: %s", tag, row["error"])
        row["seconds"] = time.perf_counter() - t0
        rows.append(row)
        status = f"pck={row['pck']:.4f}" if row["status"] == "ok" else row["error"]
        print(f"[{i + 1}/{len(cells)}] {tag}: {status} ({row['seconds']:.0f}s)", flush=True)
    with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
        json.dump(rows, fh, indent=2, default=float)
    with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
        keys = list(grid)
        fh.write(",".join(keys + ["params", "flops", "pck", "status"]) + "\n")
        for r in rows:
            vals = [str(r["cell"][k]) for k in keys]
            vals += [str(r.get("params", "")), str(r.get("flops", "")), f"{r.get('pck', float('nan')):.6f}", r["status"]]
            fh.write(",".join(vals) + "\n")
    for table in ablation_tables(rows, list(grid)):
        print()
        print(table)
    print()
    failed = sum(r["status"] != "ok" for r in rows)
    if failed:
        print(f"{failed} of {len(rows)} cells failed")
    return 0


def cmd_describe(args):
    from .model import ReposeModel

    cfg = run_config(args)
    model = ReposeModel(cfg.model, seed=cfg.seed)
    print(model.describe())
    return 0


def cmd_convert(args):
    from . import data as D

    try:
        kwargs = {"image_dir": args.image_dir} if args.image_dir else {}
        if args.format == "lsp_style":
            kwargs["split"] = args.split
        examples = D.load_annotations(args.input, args.format, **kwargs)
        for ex in examples:
            ex.image = None
        D.save_native(examples, args.output)
    except OSError as e:
        raise CliError("io", str(e)) from None
    except ValueError as e:
        raise CliError("data", str(e)) from None
    print(f"wrote {len(examples)} examples to {args.output}")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser():
    p = argparse.ArgumentParser(prog="repose", description="Kinematic-update pose estimation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--profile", default="desk", choices=("desk", "full"))
        sp.add_argument("--config", help="JSON file with RunConfig overrides")
        sp.add_argument("--seed", type=int)
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--output", help="run directory (checkpoints, log.csv)")
    sp.add_argument("--steps", type=int, help="override max_steps")
    sp.add_argument("--no-resume", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="PCK table for a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", default="synthetic:200", help="annotation file or synthetic:N")
    sp.add_argument("--format", default="native", choices=("native", "lsp_style", "mpii_style"))
    sp.add_argument("--metric", default="pck", choices=("pck", "pckh"))
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--csv", action="store_true", help="print comma-delimited output")
    sp.add_argument("--out", help="also write the delimited table here")
    sp.add_argument("--oracle", action="store_true", help="decode rendered ground truth instead of predictions")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="overlay and heatmaps for images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("images", nargs="+")
    sp.add_argument("--output", default="infer_out")
    sp.add_argument("--dump-stages", action="store_true", help="write pre-update, post-update and final heatmaps")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("ablate", help="train and evaluate a grid of configurations")
    common(sp)
    sp.add_argument("--grid", help='JSON like {"update_strategy": ["add"], "coarsest_size": [8, 16]}')
    sp.add_argument("--strategies", help="comma list of update strategies")
    sp.add_argument("--coarsest", help="comma list of coarsest resolutions")
    sp.add_argument("--steps", type=int, help="training steps per cell")
    sp.add_argument("--output", help="directory for per-cell runs and the result matrix")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("describe", help="print the layer plan, parameters and FLOPS")
    common(sp)
    sp.set_defaults(func=cmd_describe)

    sp = sub.add_parser("convert", help="convert LSP/MPII annotations to the native format")
    sp.add_argument("input")
    sp.add_argument("--format", required=True, choices=("lsp_style", "mpii_style"))
    sp.add_argument("--output", required=True)
    sp.add_argument("--image-dir")
    sp.add_argument("--split", default="test", choices=("train", "test"))
    sp.set_defaults(func=cmd_convert)
    return p


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError("config", f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    cv2.setNumThreads(n)
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except CliError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return e.code
    except KeyboardInterrupt:
        print("error[interrupted]: stopped by user", file=sys.stderr)
        return 130
    except Exception as e:
        print(f"error[internal]: {type(e).__name__}: {e}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
