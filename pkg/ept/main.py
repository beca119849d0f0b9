# efficient prototype tuning command line
import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from dotenv import load_dotenv

from ept.autodiff_train import gradient_check
from ept.config import TRAIN_LOGITS, AblationConfig, CliConfig, ProtocolSpec
from ept.embedding_store import MAGIC, SynthSpec, generate_synthetic, load_embeddings, save_embeddings
from ept.errors import ConfigError, EptError, ValidationError
from ept.prototype_core import POOL_MAGIC, load_pool
from ept.protocol_runner import compare_baselines, format_stage_grid, run_protocol

load_dotenv()

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _protocol_from_args(args) -> ProtocolSpec:
    protocol = ProtocolSpec.preset(args.preset) if args.preset else ProtocolSpec()
    overrides = {
        "base_classes": args.base_classes,
        "stages": args.stages,
        "ways": args.ways,
        "shots": args.shots,
    }
    if args.test_per_class is not None:
        overrides["test_per_class"] = args.test_per_class if args.test_per_class == "all" else int(args.test_per_class)
    protocol = replace(protocol, **{k: v for k, v in overrides.items() if v is not None})
    protocol.validate()
    return protocol


def load_config(path) -> CliConfig:
    if path is None:
        return CliConfig().validate()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}")
    return CliConfig.from_dict(data)


def _resolve_config(args) -> CliConfig:
    config = load_config(args.config)
    if args.ablation:
        config = replace(config, ablation=AblationConfig.from_flags(args.ablation, config.ablation))
    if args.threads is not None:
        config = replace(config, threads=args.threads)
    if args.quiet:
        config = replace(config, verbose=False)
    if args.seed is not None:
        config = replace(config, train=replace(config.train, seed=args.seed))
    return config.validate()


def cmd_gen_synth(args) -> int:
    spec = SynthSpec(
        num_classes=args.classes,
        dim=args.dim,
        samples_per_class=args.per_class,
        mean_scale=args.mean_scale,
        noise_std=args.noise_std,
        bias_shift=args.bias_shift,
    )
    try:
        spec.validate()
    except ValidationError as e:
        raise ConfigError(e.args[0])
    protocol = None
    if args.bias_shift > 0:
        flags = (args.base_classes, args.stages, args.ways, args.shots)
        if not args.preset and any(flag is None for flag in flags):
            raise ConfigError("--bias-shift needs --preset or --base-classes, --stages, --ways and --shots")
        protocol = _protocol_from_args(args)
    dataset = generate_synthetic(spec, args.seed, protocol)
    save_embeddings(dataset, args.out)
    print(f"Wrote {args.out}: N={dataset.size} d_f={dataset.dim} num_classes={dataset.num_classes}")
    return EXIT_OK


def cmd_run(args) -> int:
    config = _resolve_config(args)
    out = args.out or config.output.report
    if out is None:
        raise ConfigError("no report path: pass --out or set output.report")
    dataset = load_embeddings(args.embeddings)
    report = run_protocol(dataset, config.protocol, config)
    Path(out).write_text(report.to_json())
    print(format_stage_grid(report))
    if config.verbose:
        print(f"Report written to: {out}", file=sys.stderr)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    dtype = "float32" if args.float32 else "float64"
    result = gradient_check(trials=args.trials, seed=args.seed, dtype=dtype, train_logits=args.train_logits,
                            lambda_inter=args.lambda_inter)
    if args.float32:
        print(f"float32 mode: tolerance relaxed to {result.tolerance:g}")
    print(f"trials={result.trials} max_rel_err={result.max_rel_err:.3e} tolerance={result.tolerance:g}")
    if not result.passed:
        print(f"Error: gradient check failed at {result.worst_parameter}")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_compare(args) -> int:
    config = _resolve_config(args)
    dataset = load_embeddings(args.embeddings)
    comparison = compare_baselines(dataset, config.protocol, config)
    csv = comparison.to_csv()
    if args.out:
        Path(args.out).write_text(csv)
    else:
        sys.stdout.write(csv)
    if config.verbose:
        for metric, delta in comparison.deltas().items():
            print(f"{metric}: calibrated - raw average accuracy = {100 * delta:+.2f} points", file=sys.stderr)
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    try:
        with path.open("rb") as handle:
            magic = handle.read(4)
    except OSError as e:
        raise ConfigError(f"cannot open {path}: {e}")

    if magic == POOL_MAGIC:
        pool = load_pool(path)
        print(f"{path}: pool checkpoint d_f={pool.d_f} d_t={pool.d_t} d_h={pool.d_h} alpha={pool.alpha:g}")
        print(f"class offsets={pool.use_class_offset} task offsets={pool.use_task_offset} "
              f"shared projector={pool.shared_projector} dtype={pool.dtype.name}")
        for index, task in enumerate(pool.tasks):
            state = "frozen" if task.frozen else "open"
            print(f"  task {index}: {len(task.class_ids)} classes, {state}, {pool.count_parameters(index)} params")
        return EXIT_OK

    dataset = load_embeddings(path)
    print(f"{path}: magic={MAGIC.decode()} N={dataset.size} d_f={dataset.dim} num_classes={dataset.num_classes}")
    print("class,count")
    for class_id, count in enumerate(dataset.label_histogram()):
        print(f"{class_id},{count}")
    return EXIT_OK


def _add_protocol_flags(parser):
    parser.add_argument("--preset", default=None, help="protocol preset (cub200, imagenet_r, imagenet_a, vtab)")
    parser.add_argument("--base-classes", type=int, default=None)
    parser.add_argument("--stages", type=int, default=None)
    parser.add_argument("--ways", type=int, default=None)
    parser.add_argument("--shots", type=int, default=None)
    parser.add_argument("--test-per-class", default=None, help="integer or 'all'")


def _add_run_flags(parser):
    parser.add_argument("--embeddings", required=True, help="EPTB embeddings file")
    parser.add_argument("--config", default=None, help="JSON run config")
    parser.add_argument("--out", default=None)
    parser.add_argument("--ablation", default=None, help="comma list of full, no-nep, no-cs, no-ta, nep-only, base-model")
    parser.add_argument("--threads", type=int, default=None, help="evaluation threads (default EPT_THREADS or 1)")
    parser.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    parser.add_argument("--quiet", action="store_true", help="no progress output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ept", description="Efficient prototype tuning for few-shot class-incremental learning")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-synth", help="write a synthetic Gaussian EPTB dataset")
    gen.add_argument("--classes", type=int, required=True)
    gen.add_argument("--dim", type=int, required=True)
    gen.add_argument("--per-class", type=int, required=True)
    gen.add_argument("--mean-scale", type=float, default=10.0)
    gen.add_argument("--noise-std", type=float, default=1.0)
    gen.add_argument("--bias-shift", type=float, default=0.0, help="shift incremental support sets (needs protocol flags)")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    _add_protocol_flags(gen)
    gen.set_defaults(handler=cmd_gen_synth)

    run = commands.add_parser("run", help="run the incremental protocol and write a JSON report")
    _add_run_flags(run)
    run.set_defaults(handler=cmd_run)

    grad = commands.add_parser("grad-check", help="compare analytic gradients with finite differences")
    grad.add_argument("--trials", type=int, default=100)
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--float32", action="store_true")
    grad.add_argument("--train-logits", choices=TRAIN_LOGITS, default="nep")
    grad.add_argument("--lambda-inter", type=float, default=1.0)
    grad.set_defaults(handler=cmd_grad_check)

    compare = commands.add_parser("compare", help="metric x offsets grid as CSV")
    _add_run_flags(compare)
    compare.set_defaults(handler=cmd_compare)

    inspect = commands.add_parser("inspect", help="print an EPTB header and label histogram, or a pool checkpoint summary")
    inspect.add_argument("path")
    inspect.set_defaults(handler=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except EptError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
