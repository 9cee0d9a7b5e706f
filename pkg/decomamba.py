"""
Deco-Mamba Command Line

Commands:
  train      --config <path>                      train and checkpoint a model
  eval       --ckpt <path> --data <dir>           key=value evaluation report
  gradcheck  [--only <case> ...]                  finite-difference gradient table
  bench      [--quick]                            scan timing and complexity table
  synth      --out <dir> --count <n> --seed <s>   write a synthetic dataset
  predict    --ckpt <path> --image <ppm> --out <pgm> [--resize] [--probs <npy>]
  describe   --config <path> | --preset <name>    architecture summary

Exit codes: 0 success, 1 runtime failure (failed checks, NaN aborts, I/O),
2 configuration or checkpoint errors. DM_THREADS caps internal parallelism.
"""

import argparse
import os
import statistics
import sys
import time
from typing import List, Optional, Sequence, Tuple

import numpy as np
import psutil

from autodiff import DiffArray, count_macs, no_grad, softmax
from checkpoint_manager import check_compatible, load_checkpoint, model_from_checkpoint
from config_manager import get_thread_count, load_train_config, save_train_config
from errors import DecoMambaError, ShapeError
from gradcheck_suite import case_names, run_suite
from metrics import evaluate
from network import DecoMamba, ModelConfig, count_params, describe
from nn_blocks import Conv2d
from run_logging import safe_update_log, set_quiet
from spatial_ops import resize_bilinear
from ssm_scan import SSMParams, selective_scan_1d
from synthetic_data import SynthSpec, load_dataset, read_image, synth_generate, write_dataset, write_mask
from training import Trainer

REFERENCE_V0_PARAMS_M = 9.67
SCAN_LENGTHS = (1024, 2048, 4096, 8192)
QUICK_SCAN_LENGTHS = (256, 512, 1024)


# ------------------------------------------------
# TRAIN / EVAL
# ------------------------------------------------

def cmd_train(args) -> int:
    config = load_train_config(args.config)
    if args.quiet:
        config.quiet = True
    set_quiet(config.quiet)
    os.makedirs(config.output.run_dir, exist_ok=True)
    save_train_config(config, os.path.join(config.output.run_dir, "config.json"))
    result = Trainer(config).fit()
    safe_update_log(f"[TRAIN] best_dice={result.best_dice} best_epoch={result.best_epoch} "
                    f"final_loss={result.final_loss!r}")
    safe_update_log(f"[TRAIN] best checkpoint: {result.best_path}")
    safe_update_log(f"[TRAIN] final checkpoint: {result.final_path}")
    return 0


def cmd_eval(args) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    if args.config:
        check_compatible(checkpoint, load_train_config(args.config).model)
    model = model_from_checkpoint(checkpoint)
    dataset = load_dataset(args.data, args.split)
    report = evaluate(model, dataset, checkpoint.config, batch_size=args.batch_size, split=args.split or "all")
    lines = report.to_lines()
    out_path = args.out or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)),
                                        f"eval_{args.split or 'all'}.txt")
    with open(out_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    safe_update_log(f"[EVAL] ✅ report written to {out_path}")
    return 0


# ------------------------------------------------
# GRADCHECK
# ------------------------------------------------

def cmd_gradcheck(args) -> int:
    result = run_suite(args.only, seed=args.seed)
    print(result.table())
    if result.passed:
        safe_update_log(f"[GRADCHECK] ✅ {len(result.rows)} checks passed")
        return 0
    safe_update_log(f"[GRADCHECK] ❌ failed: {', '.join(result.failures())}")
    return 1


# ------------------------------------------------
# BENCH
# ------------------------------------------------

def _scan_params(rng: np.random.Generator, channels: int, state: int) -> SSMParams:
    rank = max(channels // 16, 1)
    return SSMParams(A_log=DiffArray(np.log(np.tile(np.arange(1, state + 1, dtype=np.float32), (channels, 1)))),
                     D_skip=DiffArray(np.ones(channels, dtype=np.float32)),
                     x_proj_weight=DiffArray(0.1 * rng.standard_normal((channels, rank + 2 * state)), dtype=np.float32),
                     dt_proj_weight=DiffArray(0.1 * rng.standard_normal((rank, channels)), dtype=np.float32),
                     dt_proj_bias=DiffArray(np.full(channels, -3.0, dtype=np.float32)))


def bench_scan(lengths: Sequence[int], repeats: int = 5, channels: int = 16,
               state: int = 16) -> List[Tuple[int, float]]:
    """Median forward wall time of selective_scan_1d for each sequence length."""
    rng = np.random.default_rng(0)
    params = _scan_params(rng, channels, state)
    timings = []
    for length in lengths:
        x = DiffArray(rng.standard_normal((length, channels)).astype(np.float32))
        samples = []
        for _ in range(repeats):
            started = time.perf_counter()
            with no_grad():
                selective_scan_1d(x, params)
            samples.append(time.perf_counter() - started)
        timings.append((length, statistics.median(samples)))
    return timings


def conv_reference() -> Tuple[int, int]:
    """Params and MACs of a 3x3 16->32 conv with bias on a 56x56 map."""
    layer = Conv2d(16, 32, 3)
    with no_grad(), count_macs() as counter:
        layer(DiffArray(np.zeros((1, 16, 56, 56), dtype=np.float32)))
    return layer.parameter_count(), counter.total


def cmd_bench(args) -> int:
    lengths = QUICK_SCAN_LENGTHS if args.quick else SCAN_LENGTHS
    print(f"threads={get_thread_count()}")
    print(f"{'L':>6}  {'median_s':>10}  {'ratio':>6}")
    previous = None
    for length, seconds in bench_scan(lengths, repeats=args.repeats):
        ratio = f"{seconds / previous:.2f}" if previous else "-"
        print(f"{length:>6}  {seconds:>10.5f}  {ratio:>6}")
        previous = seconds

    params, macs = conv_reference()
    print(f"conv3x3_16to32@56 params={params} macs={macs:,}")

    # the quick table swaps the 224x224 presets for the tiny one
    presets = ("tiny",) if args.quick else ("v0", "v1")
    for name in presets:
        config = ModelConfig.preset(name)
        line = f"preset={name} params={count_params(config):,}"
        if name == "v0":
            line += f" (reference {REFERENCE_V0_PARAMS_M}M with a pretrained encoder)"
        model = DecoMamba(config).eval()
        height, width = config.input_size
        image = DiffArray(np.zeros((1, config.in_channels, height, width), dtype=np.float32))
        started = time.perf_counter()
        with no_grad(), count_macs() as counter:
            model(image)
        line += f" macs={counter.total:,} forward_s={time.perf_counter() - started:.2f}"
        print(line)

    rss = psutil.Process(os.getpid()).memory_info().rss
    print(f"rss_mb={rss / (1024 * 1024):.1f}")
    return 0


# ------------------------------------------------
# DATA / PREDICT / DESCRIBE
# ------------------------------------------------

def cmd_synth(args) -> int:
    spec = SynthSpec(count=args.count, val_count=args.val_count, height=args.size, width=args.size,
                     num_classes=args.classes, channels=args.channels, noise=args.noise)
    write_dataset(synth_generate(spec, args.seed), args.out)
    return 0


def predict_image(model: DecoMamba, image: np.ndarray, resize: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Argmax mask [H, W] and class probabilities [N, H, W] at the image's own size."""
    config = model.config
    channels, height, width = image.shape
    if channels != config.in_channels:
        raise ShapeError("predict", f"image has {channels} channels, model expects {config.in_channels}")
    target_h, target_w = config.input_size
    x = DiffArray(image[None].astype(np.float32))
    resized = (height, width) != (target_h, target_w)
    if resized and not resize:
        raise ShapeError("predict", f"image is {height}x{width}, model expects {target_h}x{target_w} "
                                    f"(pass --resize to rescale)")
    model.eval()
    with no_grad():
        if resized:
            x = resize_bilinear(x, target_h, target_w)
        logits = model(x).logits
        if resized:
            logits = resize_bilinear(logits, height, width)
        probs = softmax(logits, axis=1).data[0]
    return np.argmax(probs, axis=0).astype(np.uint8), probs


def cmd_predict(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    mask, probs = predict_image(model, read_image(args.image), resize=args.resize)
    write_mask(args.out, mask)
    if args.probs:
        np.save(args.probs, probs.astype(np.float32))
    safe_update_log(f"[PREDICT] ✅ wrote {args.out} ({mask.shape[0]}x{mask.shape[1]}, "
                    f"classes present: {sorted(int(c) for c in np.unique(mask))})")
    return 0


def cmd_describe(args) -> int:
    if args.config:
        config = load_train_config(args.config).model
    else:
        config = ModelConfig.preset(args.preset)
    print(describe(config, max_depth=args.depth))
    return 0


# ------------------------------------------------
# ENTRY POINT
# ------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decomamba", description="Deco-Mamba segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--config", help="training config to check the checkpoint against")
    p.add_argument("--out", help="report file (default: next to the checkpoint)")
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every registered block")
    p.add_argument("--only", nargs="+", metavar="CASE", help=f"one or more of: {', '.join(case_names())}")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("bench", help="timing and complexity table")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--val-count", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--channels", type=int, default=3, choices=(1, 3))
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resize", action="store_true", help="rescale images of the wrong size")
    p.add_argument("--probs", help="also save class probabilities as .npy")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("describe", help="print the architecture")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--config")
    group.add_argument("--preset")
    p.add_argument("--depth", type=int, default=3)
    p.set_defaults(handler=cmd_describe)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except DecoMambaError as e:
        safe_update_log(f"❌ {e}")
        return e.exit_code
    except OSError as e:
        safe_update_log(f"❌ {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
