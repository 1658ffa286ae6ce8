"""Command-line entry point.

Subcommands: gen-data, train, translate, segment, eval, experiment,
gradcheck.  Exit codes: 0 success, 1 usage error, 2 data/format error,
3 numeric failure.  The environment variable VOXELCYCLE_SEED overrides the
config seed (for CI).  Reruns with identical flags and seeds produce
byte-identical outputs; nothing is written outside the requested output
locations.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from . import kvconfig
from .engine import Tensor, no_grad
from .errors import NumericError, VoxelCycleError
from .evaluation import (ExperimentSetup, dice, run_experiment, s_score)
from .networks import load_checkpoint, predict_labels, save_checkpoint
from .phantom import (Dataset, PhantomSpec, load_volume, make_dataset, save_volume)
from .trainer import (TrainConfig, TrainState, ada_pregenerate, ada_train,
                      joint_train, pretrain_generators, pretrain_segmentors,
                      write_train_log)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage problems; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> _Parser:
    parser = _Parser(prog="voxelcycle",
                     description="Unpaired 3D volume translation with cycle- and "
                                 "shape-consistency, plus phantom data and metrics.")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for embarrassingly parallel stages")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", help="generate a phantom dataset directory")
    p.add_argument("--spec", required=True, help="phantom spec (key = value file)")
    p.add_argument("--modality", required=True, choices=["A", "B"])
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--seed", required=True, type=int, help="anatomy seed base")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run one training mode")
    p.add_argument("--mode", required=True,
                   choices=["pretrain-seg", "pretrain-gan", "joint", "ada"])
    p.add_argument("--config", required=True, help="train config (key = value file)")
    p.add_argument("--data-a", required=True, help="modality-A dataset directory")
    p.add_argument("--data-b", required=True, help="modality-B dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--init-state", help="resume/fine-tune from a saved state")
    p.add_argument("--target", choices=["a", "b"], default="a",
                   help="segmentor fine-tuned by ada mode")

    p = sub.add_parser("translate", help="translate a volume with a generator")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("segment", help="segment a volume with a segmentor")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("eval", help="compute a metric")
    metric_sub = p.add_subparsers(dest="metric", metavar="metric", required=True)
    d = metric_sub.add_parser("dice")
    d.add_argument("--pred", required=True)
    d.add_argument("--gt", required=True)
    s = metric_sub.add_parser("sscore")
    s.add_argument("--synthetic", required=True)
    s.add_argument("--source-gt", required=True)
    s.add_argument("--segmentor", required=True, help="auxiliary segmentor checkpoint")

    p = sub.add_parser("experiment", help="run a named comparison plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="results CSV path")
    p.add_argument("--seeds", default="0,1,2,3,4",
                   help="comma-separated experiment seeds")
    p.add_argument("--train-count", type=int, default=40)
    p.add_argument("--test-count", type=int, default=20)
    p.add_argument("--target", choices=["a", "b"], default="a")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=20, help="instances per op")

    return parser


def _apply_seed_override(config: TrainConfig) -> TrainConfig:
    override = os.environ.get("VOXELCYCLE_SEED")
    if override is None:
        return config
    from dataclasses import replace
    return replace(config, seed=int(override))


def _load_dataset_dir(path) -> Dataset:
    path = Path(path)
    manifest = kvconfig.read_kv_file(path / "manifest.txt")
    spec = PhantomSpec.from_file(path / "spec.txt")
    count = int(manifest["count"])
    seed_base = int(manifest["seed_base"])
    samples = []
    for i in range(count):
        vol, _ = load_volume(path / f"vol_{i:04d}.vvol")
        labels, _ = load_volume(path / f"vol_{i:04d}_labels.vvol")
        samples.append((vol, labels))
    return Dataset(samples=samples, modality=manifest["modality"],
                   anatomy_seeds=[seed_base + i for i in range(count)], spec=spec)


def cmd_gen_data(args) -> int:
    spec = PhantomSpec.from_file(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = make_dataset(args.count, spec, args.modality, args.seed)
    for i, (vol, labels) in enumerate(dataset.samples):
        save_volume(out / f"vol_{i:04d}.vvol", vol)
        save_volume(out / f"vol_{i:04d}_labels.vvol", labels,
                    class_count=spec.class_count)
    spec.to_file(out / "spec.txt")
    kvconfig.write_kv_file(out / "manifest.txt", {
        "modality": args.modality, "count": args.count, "seed_base": args.seed,
    })
    print(f"wrote {len(dataset)} volumes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _apply_seed_override(TrainConfig.from_file(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config.to_file(out / "config.txt")  # archived beside outputs
    data_a = _load_dataset_dir(args.data_a)
    data_b = _load_dataset_dir(args.data_b)
    if args.init_state:
        state = TrainState.load(args.init_state)
    else:
        state = TrainState(config)
    log: list = []
    if args.mode == "pretrain-seg":
        pretrain_segmentors(state, data_a, data_b, log=log)
    elif args.mode == "pretrain-gan":
        pretrain_generators(state, data_a, data_b, log=log)
    elif args.mode == "joint":
        joint_train(state, data_a, data_b, log=log)
    elif args.mode == "ada":
        counter = data_b if args.target == "a" else data_a
        target_data = data_a if args.target == "a" else data_b
        pool = ada_pregenerate(state, args.target, counter, target_data,
                               out / "synthetic")
        ada_train(state, f"seg_{args.target}", target_data, pool, log=log)
    state.save(out / "state.vxck")
    for name, net in state.nets().items():
        save_checkpoint(net, out / f"{name}.vxck", step=state.step,
                        config_hash=config.config_hash())
    write_train_log(out / "train_log.csv", log)
    print(f"{args.mode}: {len(log)} steps logged to {out / 'train_log.csv'}")
    return EXIT_OK


def cmd_translate(args) -> int:
    net, _, _ = load_checkpoint(args.checkpoint)
    if net.kind != "generator":
        raise VoxelCycleError(f"checkpoint holds a {net.kind}, expected a generator")
    volume, _ = load_volume(args.input)
    with no_grad():
        translated = net(Tensor(volume[None, None]))
    save_volume(args.output, translated.data[0, 0])
    print(f"translated {args.input} -> {args.output}")
    return EXIT_OK


def cmd_segment(args) -> int:
    net, _, _ = load_checkpoint(args.checkpoint)
    if net.kind != "segmentor":
        raise VoxelCycleError(f"checkpoint holds a {net.kind}, expected a segmentor")
    volume, _ = load_volume(args.input)
    labels = predict_labels(net, Tensor(volume[None, None]))[0].astype(np.uint8)
    save_volume(args.output, labels, class_count=net.class_count)
    print(f"segmented {args.input} -> {args.output}")
    return EXIT_OK


def cmd_eval(args, parser) -> int:
    if args.metric == "dice":
        pred, cc_pred = load_volume(args.pred)
        gt, cc_gt = load_volume(args.gt)
        class_count = max(cc_pred, cc_gt)
        if class_count < 2:
            raise VoxelCycleError("dice needs label volumes with class counts")
        result = dice(pred, gt, class_count)
        for c, value in result.per_class.items():
            print(f"class_{c} {value!r}")
        print(f"mean_foreground {result.mean!r}")
        return EXIT_OK
    if args.metric == "sscore":
        synthetic, _ = load_volume(args.synthetic)
        source_gt, cc = load_volume(args.source_gt)
        if cc < 2:
            raise VoxelCycleError("--source-gt must be a label volume")
        net, _, _ = load_checkpoint(args.segmentor)
        if net.kind != "segmentor":
            raise VoxelCycleError("--segmentor checkpoint must hold a segmentor")
        result = s_score(synthetic, source_gt, net)
        print(f"s_score {result.mean_dice!r}")
        return EXIT_OK
    return EXIT_USAGE


def cmd_experiment(args) -> int:
    config = _apply_seed_override(TrainConfig.from_file(args.config))
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    setup = ExperimentSetup(train_per_modality=args.train_count,
                            test_count=args.test_count, target=args.target)
    rows = run_experiment(args.plan, config, setup, seeds, out_csv=args.out)
    print(f"{args.plan}: wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_gradient_suite(seeds=args.seeds, base_seed=args.seed)
    worst_name, worst = max(results.items(), key=lambda kv: kv[1])
    for name, value in results.items():
        status = "ok" if value < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:24s} max_rel_error={value:.3e} {status}")
    if worst >= GRADCHECK_TOLERANCE:
        print(f"gradient check failed: {worst_name} at {worst:.3e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all operations within {GRADCHECK_TOLERANCE:.0e}")
    return EXIT_OK


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "translate":
            return cmd_translate(args)
        if args.command == "segment":
            return cmd_segment(args)
        if args.command == "eval":
            return cmd_eval(args, parser)
        if args.command == "experiment":
            return cmd_experiment(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (VoxelCycleError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    raise SystemExit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
