"""Command-line surface: dataset generation, training, evaluation, baselines.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
All randomness flows from --seed; repeating a command with the same seed
rewrites byte-identical artifacts.  CSISENSE_WORKERS controls the generation
worker pool (default 1).
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import baseline as baseline_mod
from . import dataset as dataset_mod
from . import metrics as metrics_mod
from . import sensenet as nn
from .channel import Scenario
from .errors import ConfigError, CsiSenseError, InvalidPitch, InvalidSize, NonFiniteLoss
from .frame import compute_stats, normalize

PRESETS = ("scenario1", "scenario2", "scenario3")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def load_scenario(spec: str) -> Scenario:
    """Preset name (scenario1..3) or a path to a scenario JSON file."""
    if spec in PRESETS:
        text = resources.files("csisense.presets").joinpath(f"{spec}.json").read_text()
    else:
        text = Path(spec).read_text()
    try:
        return Scenario.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{spec}: invalid JSON: {exc}") from exc


def _scenario_with(args, scenario: Scenario) -> Scenario:
    """Apply variant flags (LOS, SNR, scattering coefficient) on top of a config."""
    kwargs = {}
    if args.no_los:
        kwargs["include_los"] = False
    if args.snr_db is not None:
        kwargs["snr_db"] = args.snr_db
    if args.scatter_coeff is not None:
        kwargs["scatter_coeff"] = args.scatter_coeff
    if not kwargs:
        return scenario
    d = scenario.to_dict()
    d.update(kwargs)
    return Scenario.from_dict(d)


def _add_variant_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-los", action="store_true", help="disable the direct path")
    p.add_argument("--snr-db", type=float, default=None, help="measurement SNR in dB")
    p.add_argument("--scatter-coeff", type=float, default=None,
                   help="target scattering coefficient")


def cmd_gen(args) -> int:
    scenario = _scenario_with(args, load_scenario(args.scenario))
    if args.sigma <= 0:
        raise InvalidSize(f"--sigma must be > 0, got {args.sigma}")
    if args.protocol == "resolution":
        n = args.n if args.n is not None else (
            dataset_mod.PAPER_SCALE_N if args.paper_scale else dataset_mod.DESK_SCALE_N)
        ds = dataset_mod.gen_resolution_set(scenario, args.sigma, n, args.seed)
    else:
        n = args.n if args.n is not None else (
            dataset_mod.PAPER_SCALE_N_PER_BIN if args.paper_scale
            else dataset_mod.DESK_SCALE_N_PER_BIN)
        ds = dataset_mod.gen_binned_set(
            scenario, args.sigma, n, args.pitch, args.seed,
            protocol=args.protocol, bin_jitter=args.bin_jitter,
        )
    dataset_mod.save_dataset(args.out, ds)
    n_null = sum(1 for r in ds.records if r.hyp == dataset_mod.HYP_NULL)
    print(f"wrote {len(ds.records)} records ({n_null} null, "
          f"{len(ds.records) - n_null} target) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = dataset_mod.load_dataset(args.data)
    train_model, log = fit(
        ds,
        task=args.task,
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        seed=args.seed,
        patience=args.patience,
        val_fraction=args.val_frac,
    )
    nn.save_model(args.out, train_model)
    log_path = args.log if args.log else str(args.out) + ".log.csv"
    with open(log_path, "w") as fp:
        nn.write_training_log(fp, log)
    last = log[-1]
    print(f"trained {args.task} model: {len(log)} epochs, "
          f"val_loss={last.val_loss:.6g}, val_metric={last.val_metric:.6g}")
    print(f"model -> {args.out}")
    return EXIT_OK


def fit(
    ds: dataset_mod.Dataset,
    task: str,
    epochs: int = 40,
    batch_size: int = 32,
    learning_rate: float = 1e-3,
    seed: int = 0,
    patience: int = 0,
    val_fraction: float | None = None,
) -> tuple[nn.TrainedModel, list[nn.LogEntry]]:
    """Split, normalize on the training side only, and train one head."""
    if task not in ("detect", "locate"):
        raise ConfigError(f"task must be detect or locate, got {task!r}")
    fractions = ds.manifest.split_fractions
    if val_fraction is not None:
        fractions = (1.0 - val_fraction, val_fraction)
    train_ds, val_ds = dataset_mod.split(ds, fractions, seed)

    def arrays(sub: dataset_mod.Dataset):
        if task == "detect":
            recs = sub.records
            y = np.array([1.0 if r.hyp == dataset_mod.HYP_TARGET else 0.0 for r in recs])
        else:
            recs = [r for r in sub.records if r.hyp == dataset_mod.HYP_TARGET]
            y = np.array([[r.position.x, r.position.y] for r in recs]).reshape(-1, 2)
        if not recs:
            raise ConfigError(f"no usable records for task {task!r}")
        x = np.stack([r.tensor for r in recs])
        return x, y

    x_train, y_train = arrays(train_ds)
    stats = compute_stats(x_train)
    x_train = normalize(x_train, stats)
    validation = None
    if len(val_ds.records):
        try:
            x_val, y_val = arrays(val_ds)
            validation = (normalize(x_val, stats), y_val)
        except ConfigError:
            validation = None
    config = nn.TrainConfig(
        loss="bce" if task == "detect" else "mse",
        batch_size=batch_size, learning_rate=learning_rate,
        epochs=epochs, seed=seed, patience=patience,
    )
    params, log = nn.train((x_train, y_train), config, validation)
    return nn.TrainedModel(params=params, stats=stats, task=task), log


def cmd_eval(args) -> int:
    model = nn.load_model(args.model)
    if args.threshold is not None:
        model.threshold = args.threshold
    scenario = _scenario_with(args, load_scenario(args.scenario))
    if model.task == "detect":
        if args.sigmas:
            sigmas = sorted(float(s) for s in args.sigmas.split(","))
            drops = args.drops if args.drops is not None else 700
            curve, crossing = metrics_mod.resolution_curve(
                model, scenario, sigmas, drops, args.gamma, args.seed)
            with open(args.out, "w") as fp:
                metrics_mod.write_resolution_csv(fp, curve, drops)
            for sigma, p in curve:
                print(f"sigma={sigma:g}  P={p:.4f}")
            print(f"resolution at gamma={args.gamma:g}: "
                  f"{crossing if crossing is not None else 'not reached'}")
        else:
            drops = args.drops if args.drops is not None else 700
            counts = metrics_mod.detection_counts(model, scenario, args.sigma, drops, args.seed)
            p = metrics_mod.accuracy_score(counts)
            with open(args.out, "w") as fp:
                metrics_mod.write_resolution_csv(fp, [(args.sigma, p)], drops)
            print(f"accuracy score P={p:.4f} over {drops} drops/hypothesis "
                  f"(fa={counts.null_as_target}, miss={counts.target_as_null})")
    else:
        drops = args.drops if args.drops is not None else 1000
        result = metrics_mod.model_positions(model, scenario, args.sigma, drops, args.seed)
        summary = result.summary()
        with open(args.out, "w") as fp:
            metrics_mod.write_positioning_csv(fp, summary)
        print(f"mean error = {summary.mean:.4f} m, p90 = {summary.p90:.4f} m "
              f"over {drops} drops")
    return EXIT_OK


def cmd_coverage(args) -> int:
    model = nn.load_model(args.model)
    if args.threshold is not None:
        model.threshold = args.threshold
    scenario = _scenario_with(args, load_scenario(args.scenario))
    drops = args.drops_per_bin if args.drops_per_bin is not None else (
        700 if args.paper_scale else 30)
    cmap = metrics_mod.coverage_map(model, scenario, args.sigma, drops, args.pitch, args.seed)
    with open(args.out, "w") as fp:
        metrics_mod.write_coverage_csv(fp, cmap)
    if args.pgm:
        with open(args.pgm, "w") as fp:
            metrics_mod.write_coverage_pgm(fp, cmap)
    defined = cmap.defined_scores()
    print(f"coverage over {defined.size} bins: mean P = {defined.mean():.4f}, "
          f"min P = {defined.min():.4f}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    scenario = _scenario_with(args, load_scenario(args.scenario))
    banks = []
    if args.variant in ("swept7", "both"):
        banks.append(baseline_mod.swept_bank(scenario))
    if args.variant in ("overlapped180", "both"):
        banks.append(baseline_mod.overlapped_bank())
    results = [
        metrics_mod.baseline_positions(scenario, args.sigma, args.drops, args.seed, bank)
        for bank in banks
    ]
    if args.model:
        model = nn.load_model(args.model)
        results.append(metrics_mod.model_positions(
            model, scenario, args.sigma, args.drops, args.seed))
    with open(args.out, "w") as fp:
        metrics_mod.write_baseline_csv(fp, results)
    for res in results:
        s = res.summary()
        print(f"{res.variant}: mean error = {s.mean:.4f} m, p90 = {s.p90:.4f} m")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csisense",
                                description="Multistatic passive-sensing simulator")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset")
    g.add_argument("--scenario", default="scenario1")
    g.add_argument("--protocol", choices=("resolution", "coverage", "positioning"),
                   default="resolution")
    g.add_argument("--sigma", type=float, default=0.8)
    g.add_argument("--n", type=int, default=None,
                   help="records per hypothesis (resolution) or per bin (binned)")
    g.add_argument("--pitch", type=float, default=0.25)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--paper-scale", action="store_true")
    g.add_argument("--bin-jitter", action="store_true",
                   help="jitter binned target positions uniformly within each bin")
    _add_variant_flags(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a detection or positioning model")
    t.add_argument("--data", required=True)
    t.add_argument("--task", choices=("detect", "locate"), default="detect")
    t.add_argument("--out", required=True)
    t.add_argument("--log", default=None)
    t.add_argument("--epochs", type=int, default=40)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--patience", type=int, default=0)
    t.add_argument("--val-frac", type=float, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained model on fresh drops")
    e.add_argument("--model", required=True)
    e.add_argument("--scenario", default="scenario1")
    e.add_argument("--sigma", type=float, default=0.8)
    e.add_argument("--sigmas", default=None,
                   help="comma-separated sizes for a resolution sweep")
    e.add_argument("--gamma", type=float, default=0.9)
    e.add_argument("--drops", type=int, default=None,
                   help="default 700 for detection, 1000 for positioning")
    e.add_argument("--threshold", type=float, default=None,
                   help="detection threshold override (default 0.5)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    _add_variant_flags(e)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("coverage", help="spatial accuracy map")
    c.add_argument("--model", required=True)
    c.add_argument("--scenario", default="scenario1")
    c.add_argument("--sigma", type=float, default=0.8)
    c.add_argument("--pitch", type=float, default=0.25)
    c.add_argument("--drops-per-bin", type=int, default=None)
    c.add_argument("--threshold", type=float, default=None,
                   help="detection threshold override (default 0.5)")
    c.add_argument("--paper-scale", action="store_true")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.add_argument("--pgm", default=None)
    _add_variant_flags(c)
    c.set_defaults(func=cmd_coverage)

    b = sub.add_parser("baseline", help="angle-based positioning baseline")
    b.add_argument("--scenario", default="scenario1")
    b.add_argument("--sigma", type=float, default=0.8)
    b.add_argument("--drops", type=int, default=500)
    b.add_argument("--variant", choices=("swept7", "overlapped180", "both"),
                   default="both")
    b.add_argument("--model", default=None,
                   help="optional positioning model compared on identical drops")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    _add_variant_flags(b)
    b.set_defaults(func=cmd_baseline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, InvalidSize, InvalidPitch, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CsiSenseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
