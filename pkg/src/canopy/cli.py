"""Command-line entry point: ``canopy <command> [options]``.

Exit codes: 0 success, 1 validation error (bad flags, bad inputs, failed
gradient check), 2 runtime failure.
"""
import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _default_seed():
    env = os.environ.get("CANOPY_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"CANOPY_SEED must be an integer, got {env!r}") from None


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (fallback: $CANOPY_SEED, then 0)")
    common.add_argument("--threads", type=int, default=1, help="worker cap; 1 is the reference mode")
    common.add_argument("--out-dir", default=".", help="directory for all outputs")

    p = _Parser(prog="canopy", description="Plot-level biomass and volume regression from point clouds.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--n", type=int, required=True, help="number of plot records")
    s.add_argument("--points-per-m2", type=float, default=None)

    f = sub.add_parser("features", parents=[common], help="27 height features per plot")
    f.add_argument("--manifest", required=True)

    b = sub.add_parser("fit-baseline", parents=[common], help="fit a feature baseline")
    b.add_argument("kind", choices=("linear", "power", "rf"))
    b.add_argument("--manifest", required=True)
    b.add_argument("--n-trees", type=int, default=200)
    b.add_argument("--grid-search", action="store_true", help="tune the forest by OOB error")

    t = sub.add_parser("train", parents=[common], help="train a deep model")
    t.add_argument("kind", choices=("minkowski", "kpconv", "pointnet"))
    t.add_argument("--manifest", required=True)
    t.add_argument("--epochs", type=int, default=310)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=0.01)
    t.add_argument("--tiny", type=int, default=None, metavar="WIDTH", help="use the tiny config of this width")
    t.add_argument("--no-augment", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or baseline")
    e.add_argument("--model", required=True, help="CNPY file from train or fit-baseline")
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=("train", "validation", "test"))
    e.add_argument("--name", default=None, help="model label in the report")

    pr = sub.add_parser("predict", parents=[common], help="predict every plot of a manifest")
    pr.add_argument("--model", required=True)
    pr.add_argument("--manifest", required=True)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--all", action="store_true", required=True)

    c = sub.add_parser("compare", parents=[common], help="table of R2/RMSE/MAPE across reports")
    c.add_argument("--reports", nargs="+", required=True)
    return p


# helpers -------------------------------------------------------------------------

def _write_run_json(out_dir, args):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    (out_dir / "run.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _dataset(manifest, seed):
    """Filtered records with splits (kept from the manifest when present)."""
    from .core import assign_splits, filter_dataset, read_manifest
    path = Path(manifest)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    records = read_manifest(path)
    records, report = filter_dataset(records, base)
    if not records:
        raise ValueError("no records survive filtering")
    if any(r.split is None for r in records):
        records = assign_splits(records, seed)
    return records, base, report


def _loader(base):
    from .core import load_record_cloud
    return lambda r: load_record_cloud(r, base)


def _split(records, name):
    return [r for r in records if r.split == name]


def _model_predictor(path):
    """(label, predict(records, base) -> (n, 2)) for a deep checkpoint or a baseline."""
    from . import io
    sections = io.load(path)
    if "checkpoint" in sections:
        from .core import normalize_cloud
        from .harness.train import load_checkpoint, predict_clouds
        model, kind, mean, std = load_checkpoint(path)

        def predict(records, base):
            load = _loader(base)
            return predict_clouds(model, [normalize_cloud(load(r)) for r in records], mean, std)
        return kind, predict
    from .baselines.persist import load_baseline
    from .features import feature_matrix
    kind, models = load_baseline(path)

    def predict(records, base):
        X, _ = feature_matrix(records, _loader(base))
        return np.column_stack([models[t].predict(X) for t in ("agb", "volume")])
    return kind, predict


# commands ------------------------------------------------------------------------

def cmd_synth(args, out):
    from .harness.synth import SyntheticConfig, synth_generate
    if args.n < 1:
        raise ValueError("--n must be >= 1")
    cfg = SyntheticConfig()
    if args.points_per_m2 is not None:
        cfg.points_per_m2 = args.points_per_m2
    recs = synth_generate(cfg, args.n, args.seed, out)
    print(f"wrote {len(recs)} records to {out / 'manifest.jsonl'}")


def cmd_features(args, out):
    from .features import feature_matrix, write_feature_csv
    records, base, report = _dataset(args.manifest, args.seed)
    X, Y = feature_matrix(records, _loader(base))
    write_feature_csv(out / "features.csv", records, X, Y)
    print(f"{len(records)} plots, dropped {report.counts()}")


def cmd_fit_baseline(args, out):
    from .baselines import fit_linear, fit_power, fit_random_forest, grid_search_oob, ForestParams
    from .baselines.persist import save_baseline
    from .features import feature_matrix
    from .harness.evaluate import evaluate_predictions, write_report
    records, base, _ = _dataset(args.manifest, args.seed)
    train = _split(records, "train") + _split(records, "validation")
    test = _split(records, "test")
    X, Y = feature_matrix(train, _loader(base))
    models = {}
    for j, target in enumerate(("agb", "volume")):
        if args.kind == "linear":
            models[target] = fit_linear(X, Y[:, j])
        elif args.kind == "power":
            models[target] = fit_power(X, Y[:, j])
        else:
            params = ForestParams()
            if args.grid_search:
                params, _ = grid_search_oob(X, Y[:, j], n_trees=args.n_trees, seed=args.seed,
                                            threads=args.threads)
            models[target] = fit_random_forest(X, Y[:, j], params, args.n_trees, args.seed, args.threads)
    save_baseline(out / "model.cnpy", args.kind, models)
    if test:
        Xt, _ = feature_matrix(test, _loader(base))
        P = np.column_stack([models[t].predict(Xt) for t in ("agb", "volume")])
        rep = evaluate_predictions(test, P, args.kind, "test")
        write_report(out, rep)
        print(f"{args.kind}: test R2 agb {rep.targets['agb']['r2']:.4f} volume {rep.targets['volume']['r2']:.4f}")


def cmd_train(args, out):
    from .core import AugmentConfig
    from .harness.evaluate import evaluate_predictions, write_report
    from .harness.train import TrainConfig, predict_clouds, save_checkpoint, train, write_history
    from .core import normalize_cloud
    from .models import tiny_config
    records, base, _ = _dataset(args.manifest, args.seed)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      weight_decay=args.weight_decay,
                      augment=AugmentConfig.off() if args.no_augment else AugmentConfig())
    model_cfg = tiny_config(args.kind, args.tiny) if args.tiny else None
    res = train(args.kind, _split(records, "train"), _split(records, "validation"), _loader(base),
                cfg, model_cfg, args.seed, log=print)
    save_checkpoint(out / "checkpoint.cnpy", res)
    write_history(out / "history.csv", res.history)
    test = _split(records, "test")
    if test:
        load = _loader(base)
        P = predict_clouds(res.model, [normalize_cloud(load(r)) for r in test],
                           res.target_mean, res.target_std)
        rep = evaluate_predictions(test, P, args.kind, "test")
        write_report(out, rep)
        print(f"{args.kind}: best epoch {res.best_epoch}, test R2 agb {rep.targets['agb']['r2']:.4f} "
              f"volume {rep.targets['volume']['r2']:.4f}")


def cmd_eval(args, out):
    from .harness.evaluate import evaluate_predictions, write_report
    records, base, _ = _dataset(args.manifest, args.seed)
    recs = _split(records, args.split)
    if not recs:
        raise ValueError(f"split {args.split!r} is empty")
    kind, predict = _model_predictor(args.model)
    rep = evaluate_predictions(recs, predict(recs, base), args.name or kind, args.split)
    write_report(out, rep)
    for t, m in rep.targets.items():
        print(f"{t}: r2 {m['r2']:.4f} rmse {m['rmse']:.4f} mape {m['mape']:.4f} (n={m['n']})")


def cmd_predict(args, out):
    from .core import carbon_from_biomass
    records, base, _ = _dataset(args.manifest, args.seed)
    _, predict = _model_predictor(args.model)
    P = predict(records, base)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("plot_id", "cloud_path", "split", "agb", "volume", "carbon"))
        for r, (agb, vol) in zip(records, P):
            w.writerow((r.plot_id, r.cloud_path, r.split, repr(float(agb)), repr(float(vol)),
                        repr(float(carbon_from_biomass(max(agb, 0.0))))))
    print(f"wrote {len(records)} predictions")


def cmd_gradcheck(args, out):
    from .nn.gradcheck import TOL, run_all
    results = run_all(seed=args.seed)
    for r in results:
        print(f"{r.name:24s} max_rel_err {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise ValueError(f"gradient check above {TOL:g}: {', '.join(failed)}")


def cmd_compare(args, out):
    from .harness.evaluate import compare_models, load_report
    reports = [load_report(p) for p in args.reports]
    rows = compare_models(reports, out / "compare.csv")
    for r in rows:
        print(f"{r[0]:7s} {r[1]:12s} r2 {r[2]:.4f} rmse {r[3]:.4f} mape {r[4]:.4f}")


COMMANDS = {"synth": cmd_synth, "features": cmd_features, "fit-baseline": cmd_fit_baseline,
            "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "compare": cmd_compare}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.seed is None:
            args.seed = _default_seed()
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_run_json(out, args)
        COMMANDS[args.command](args, out)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
