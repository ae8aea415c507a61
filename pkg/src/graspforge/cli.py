"""Command-line entry point: generate, train, infer, eval, render.

Every command embeds its fully resolved configuration and root seed in its
outputs; re-running with the same arguments reproduces outputs byte-exactly.
Output directories are written to a temporary sibling and atomically renamed.

Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric divergence, 5 corrupt data.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile

import numpy as np

from . import collection, net, planner
from .collection import (
    CorruptDatasetError,
    Dataset,
    TrainingSet,
    augment,
    collect_sample,
    make_label_and_mask,
    read_dataset,
    write_dataset,
)
from .config import RunConfig
from .geometry import ImageFormatError, read_ppm, write_ppm
from .mechanics import GraspLine
from .net import (
    DivergenceError,
    IncompatibleFileError,
    load_params,
    save_params,
    train,
)
from .planner import (
    EvalContext,
    ScenarioSpec,
    best_grasp,
    draw_grasp_overlay,
    evaluate_policy,
    predict_stack,
    render_label_map,
    save_report,
    write_stack_ppm,
)

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_CORRUPT = 5


class _AtomicDir:
    """Write into a temp sibling, rename onto the target on success."""

    def __init__(self, target: str):
        self.target = os.path.abspath(target)
        self.tmp = None

    def __enter__(self) -> str:
        parent = os.path.dirname(self.target) or "."
        os.makedirs(parent, exist_ok=True)
        self.tmp = tempfile.mkdtemp(prefix=".tmp-", dir=parent)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            if os.path.exists(self.target):
                shutil.rmtree(self.target)
            os.replace(self.tmp, self.target)
        else:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _config_from_args(args) -> RunConfig:
    overrides = {
        k: getattr(args, k)
        for k in RunConfig().to_dict()
        if hasattr(args, k) and getattr(args, k) is not None
    }
    return RunConfig.load(getattr(args, "config", None), overrides)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file; flags override it")
    p.add_argument("--image-size-px", dest="image_size_px", type=int)
    p.add_argument("--workspace-extent-m", dest="workspace_extent_m", type=float)
    p.add_argument("--max-opening-m", dest="max_opening_m", type=float)
    p.add_argument("--friction-angle-deg", dest="friction_angle_deg", type=float)
    p.add_argument("--theta1-deg", dest="theta1_deg", type=float)
    p.add_argument("--theta2-deg", dest="theta2_deg", type=float)
    p.add_argument("--min-thickness-m", dest="min_thickness_m", type=float)
    p.add_argument("--footprint-radius-px", dest="footprint_radius_px", type=int)
    p.add_argument("--settle-max-iters", dest="settle_max_iters", type=int)
    p.add_argument("--texture", choices=["constant", "checker", "noise"])
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--decay-factor", dest="decay_factor", type=float)
    p.add_argument("--decay-every", dest="decay_every", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--augment", choices=["full", "stochastic", "none"])
    p.add_argument("--object-scale", dest="object_scale", type=float)


def cmd_generate(args) -> int:
    cfg = _config_from_args(args)
    camera = cfg.camera()
    gripper = cfg.gripper()
    thresholds = cfg.thresholds()
    recipe = cfg.recipe()
    texture = planner.make_texture(cfg.texture, seed=cfg.seed)
    samples = []
    for i in range(args.trials):
        samples.append(
            collect_sample(
                cfg.seed, i, camera, gripper, thresholds, recipe,
                texture=texture, extent=cfg.extent(),
                settle_max_iters=cfg.settle_max_iters,
            )
        )
    echo = {"command": "generate", "trials": args.trials, **cfg.to_dict()}
    with _AtomicDir(args.out) as tmp:
        ds = write_dataset(tmp, samples, config_echo=echo)
    print(
        f"wrote {ds.header['total']} samples to {args.out}: "
        f"{ds.header['positive']} positive, {ds.header['negative']} negative"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    dataset = read_dataset(args.dataset)
    samples = [dataset.load_sample(i) for i in range(len(dataset))]
    training_set = TrainingSet(samples, footprint_radius=cfg.footprint_radius_px)
    log: list = []
    params, log = train(training_set, cfg.train_config(), log=log)
    save_params(args.out, params)
    log_path = args.log or (os.path.splitext(args.out)[0] + "_log.jsonl")
    echo = {"command": "train", "dataset": os.path.abspath(args.dataset), **cfg.to_dict()}
    with open(log_path, "w") as f:
        f.write(json.dumps({"type": "config", **echo}, sort_keys=True) + "\n")
        for rec in log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"trained {params.n_params()} parameters -> {args.out}; log -> {log_path}")
    return 0


def cmd_infer(args) -> int:
    params = load_params(args.params)
    image = read_ppm(args.image)
    stack = predict_stack(params, image)
    cfg = _config_from_args(args)
    decision = best_grasp(stack, cfg.camera())
    out_prefix = args.out_prefix
    os.makedirs(os.path.dirname(os.path.abspath(out_prefix)), exist_ok=True)
    paths = write_stack_ppm(stack, out_prefix)
    if args.save_stack:
        np.savez_compressed(out_prefix + "_stack.npz", maps=stack.maps)
    with open(out_prefix + "_decision.json", "w") as f:
        json.dump(
            {"decision": decision.to_dict(), "config_echo": cfg.to_dict()},
            f, indent=2, sort_keys=True,
        )
        f.write("\n")
    print(
        f"best grasp: bin {decision.bin_index} pixel {decision.pixel} "
        f"score {decision.score:.4f}; wrote {len(paths)} affordance maps"
    )
    return 0


def _parse_scenario(text: str) -> ScenarioSpec:
    name, _, arg = text.partition(":")
    if name == "singular":
        return ScenarioSpec("singular")
    if name == "multiple":
        return ScenarioSpec("multiple", n_objects=int(arg or 4))
    if name == "clutter":
        return ScenarioSpec("clutter", n_objects=int(arg or 10))
    if name == "texture":
        if arg not in ("constant", "checker", "noise"):
            raise ValueError(f"unknown texture {arg!r}")
        return ScenarioSpec("texture_shift", texture=arg)
    raise ValueError(f"unknown scenario {text!r}")


def _parse_policy(text: str) -> dict:
    if text == "oracle":
        return {"kind": "oracle"}
    if text.startswith("net:"):
        return {"kind": "net", "params": load_params(text[4:])}
    raise ValueError(f"policy must be 'oracle' or 'net:PATH', got {text!r}")


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    try:
        scenario = _parse_scenario(args.scenario)
        policy = _parse_policy(args.policy)
        baseline = _parse_policy(args.baseline) if args.baseline else None
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    ctx = EvalContext(
        camera=cfg.camera(), gripper=cfg.gripper(), thresholds=cfg.thresholds(),
        recipe=cfg.recipe(), extent=cfg.extent(),
        settle_max_iters=cfg.settle_max_iters,
    )
    echo = {"command": "eval", **cfg.to_dict()}
    report = evaluate_policy(policy, scenario, args.trials, cfg.seed, ctx, config_echo=echo)
    if baseline is not None:
        base = evaluate_policy(baseline, scenario, args.trials, cfg.seed, ctx, config_echo=echo)
        delta = None
        if report["success_rate"] is not None and base["success_rate"] is not None:
            delta = report["success_rate"] - base["success_rate"]
        report = {"primary": report, "baseline": base, "delta": delta}
    save_report(args.out, report)
    rate = report.get("success_rate") if "success_rate" in report else report["primary"]["success_rate"]
    print(f"evaluated {args.trials} episodes: success_rate={rate}")
    return 0


def cmd_render(args) -> int:
    cfg = _config_from_args(args)
    with _AtomicDir(args.out) as tmp:
        if args.dataset:
            dataset = read_dataset(args.dataset)
            count = len(dataset) if args.limit is None else min(args.limit, len(dataset))
            half_len = cfg.gripper().jaw_half_span * cfg.camera().pixels_per_meter
            for i in range(count):
                sample = dataset.load_sample(i)
                y, _ = make_label_and_mask(sample, cfg.footprint_radius_px)
                write_ppm(os.path.join(tmp, f"label_{i:06d}.ppm"), render_label_map(y))
                overlay = draw_grasp_overlay(sample.image, sample.pixel, sample.angle, half_len)
                write_ppm(os.path.join(tmp, f"grasp_{i:06d}.ppm"), overlay)
            n_out = 2 * count
        elif args.stack:
            data = np.load(args.stack)
            stack = planner.AffordanceStack(data["maps"])
            n_out = len(write_stack_ppm(stack, os.path.join(tmp, "affordance")))
        else:
            print("error: provide --dataset or --stack", file=sys.stderr)
            return EXIT_USAGE
    print(f"rendered {n_out} images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graspforge",
        description="Planar antipodal grasp collection, affordance training, "
        "rotation-stack planning, and simulated evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="collect grasp trials into a dataset")
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--out", required=True, help="output dataset directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the affordance network on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output GFNET1 parameter file")
    p.add_argument("--log", help="JSONL training log path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict the affordance stack for an image")
    p.add_argument("--params", required=True)
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--save-stack", action="store_true", help="also write the raw stack as NPZ")
    _add_config_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="run seeded grasp episodes and report success")
    p.add_argument("--policy", required=True, help="'oracle' or 'net:PATH'")
    p.add_argument("--scenario", required=True,
                   help="singular | multiple:K | clutter:K | texture:NAME")
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--out", required=True, help="output report JSON")
    p.add_argument("--baseline", help="optional second policy for a paired delta")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render label maps / stacks with the color convention")
    p.add_argument("--dataset", help="dataset directory to render")
    p.add_argument("--stack", help="NPZ stack file from 'infer --save-stack'")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CorruptDatasetError, IncompatibleFileError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except ImageFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
