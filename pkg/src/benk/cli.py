"""Command-line entry point: ``benk {generate,train,evaluate,benchmark,gradcheck}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from benk import bench, datagen
from benk.kernel import KernelNetConfig, gradient_check
from benk.trainer import TrainConfig, TrainedBenk, predict_cate_batch, train

log = logging.getLogger("benk")

EXIT_OK = 0
EXIT_CELL_FAILURE = 2


def _experiment(args) -> bench.ExperimentConfig:
    config = bench.load_config(args.config) if args.config else bench.load_config("table2")
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def _gen_config(args) -> datagen.GenConfig:
    data = bench.read_config_dict(args.config) if args.config else {}
    gen = datagen.GenConfig(**data.get("generator", data))
    overrides = {k: getattr(args, k) for k in ("kind", "c", "q", "p", "epsilon", "d") if getattr(args, k) is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return replace(gen, **overrides)


def _train_config(args) -> TrainConfig:
    data = bench.read_config_dict(args.config) if args.config else {}
    config = TrainConfig.from_dict(data.get("train_config", data))
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.epochs is not None:
        config = replace(config, epochs=args.epochs)
    return config


def cmd_generate(args) -> int:
    gen = _gen_config(args)
    trial = datagen.generate_trial(gen)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datagen.write_dataset_csv(trial.controls, out / "controls.csv")
    datagen.write_dataset_csv(trial.treatments, out / "treatments.csv")
    datagen.write_dataset_csv(trial.validation_controls, out / "validation.csv")
    datagen.write_test_points_csv(trial, out / "test_points.csv")
    (out / "generator.json").write_text(json.dumps(gen.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(trial.controls)} controls, {len(trial.treatments)} treatments, "
          f"{len(trial.validation_controls)} validation controls, {len(trial.test_cate)} test points to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    data = Path(args.data)
    controls = datagen.read_dataset_csv(data / "controls.csv")
    validation = datagen.read_dataset_csv(data / "validation.csv") if (data / "validation.csv").exists() else None
    config = _train_config(args)
    model = train(controls, config, validation)
    model.save(args.out)
    last = model.loss_trace[-1] if model.loss_trace else float("nan")
    print(f"trained {config.epochs} epochs, final loss {last:.6g}, best epoch {model.best_epoch}; saved {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    data = Path(args.data)
    controls = datagen.read_dataset_csv(data / "controls.csv")
    treatments = datagen.read_dataset_csv(data / "treatments.csv")
    z, truth, _ = datagen.read_test_points_csv(data / "test_points.csv")
    if args.model:
        model = TrainedBenk.load(args.model)
        pred = predict_cate_batch(model, controls, treatments, z)
        model_id = "BENK"
    else:
        validation = datagen.read_dataset_csv(data / "validation.csv")
        gen = datagen.GenConfig(**json.loads((data / "generator.json").read_text()))
        trial = datagen.LabeledTrial(controls, treatments, validation, z, truth, np.zeros(len(truth)), gen)
        config = _train_config(args)
        result = bench.evaluate_model(args.model_id, trial, config)
        pred, model_id = result.predictions, args.model_id
    score = bench.rmse(pred, truth)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("predicted_cate,true_cate\n")
            for p, t in zip(pred, truth):
                fh.write(f"{float(p):.17g},{float(t):.17g}\n")
    print(f"{model_id} rmse {score:.6f}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    config = _experiment(args)
    report = bench.run_experiment(config, threads=args.threads, timing=args.timing)
    text = bench.emit_report(report, args.format, args.out)
    if args.out is None:
        sys.stdout.write(text)
    for agg in report.aggregates():
        mean = "failed" if agg["mean"] is None else f"{agg['mean']:.4f} +/- {agg['std']:.4f}"
        log.info("%-6s %s=%s rmse %s", agg["model"], config.sweep_axis, agg["sweep_value"], mean)
    return EXIT_CELL_FAILURE if report.failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    hidden = tuple(int(h) for h in args.hidden.split(","))
    worst = 0.0
    for d in args.dims:
        config = KernelNetConfig.for_features(d, hidden_layers=hidden, activation=args.activation)
        seed = 0 if args.seed is None else args.seed
        report = gradient_check(config, args.trials, seed=seed + d)
        print(f"d={d}: max relative error {report.max_relative_error:.3e} over {report.compared} entries")
        worst = max(worst, report.max_relative_error)
    ok = worst < 1e-4
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (threshold 1e-4)")
    return EXIT_OK if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="benk", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", help="JSON config file or preset name")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required)
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("generate", help="write a synthetic trial as CSV files")
    common(p, out_required=True)
    p.add_argument("--kind", choices=[k.value for k in datagen.GeneratorKind])
    p.add_argument("--c", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--q", type=float)
    p.add_argument("--p", type=float)
    p.add_argument("--epsilon", type=float)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a kernel on the controls of a generated trial")
    common(p, out_required=True)
    p.add_argument("--data", required=True, help="directory written by `generate`")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="CATE RMSE of a model on a generated trial")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="saved BENK model (from `train`)")
    p.add_argument("--model-id", default="BENK", choices=bench.MODELS)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="run a sweep and write an RMSE report")
    common(p)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--timing", action="store_true", help="fill the seconds column (breaks byte-identical reruns)")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference kernel gradients")
    common(p)
    p.add_argument("--trials", type=int, default=7)
    p.add_argument("--dims", type=int, nargs="+", default=[2, 3, 5])
    p.add_argument("--hidden", default="16,16")
    p.add_argument("--activation", choices=["relu", "tanh"], default="relu")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
