"""Command-line entrypoints.

Subcommands cover the full pipeline (ingest -> pretrain -> finetune ->
evaluate), hyperparameter sweeps, representation export and small debug
helpers. A JSON config file can seed any subcommand's options; explicit
flags win. Every run directory receives a frozen copy of the effective
configuration so results can be reproduced from it alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import __version__
from .encoders import ModelConfig
from .finetune import FinetuneConfig, finetune, run_repeats
from .geocode import geohash_encode
from .ingest import build_bundle, filter_and_segment, load_bundle, parse_checkins, save_bundle
from .losses import LossWeights
from .metrics import RankedPrediction, acc_at_k, mrr, tp_metrics
from .pretrain import (
    PretrainConfig,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    save_representations,
)
from .synth import SynthSpec, generate

OUTPUT_ROOT_ENV = "CHECKINREP_OUTPUT_ROOT"

SWEEP_DEFAULTS = {
    "clusters": [16, 64, 256, 512, 2048],
    "queue": [0, 128, 512, 2048, 8096],
    "margin": [0.0, 0.03, 0.09, 0.18, 0.3],
    "projection": [32, 128, 512, 2048],
}


def _resolve_out_dir(path: str) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    p = Path(path)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _freeze_config(out_dir: Path, payload: dict) -> None:
    with (out_dir / "config.json").open("w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2, default=str)
        fh.write("\n")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with Path(path).open("r", encoding="utf-8") as fh:
        return json.load(fh)


def _subparsers(parser: argparse.ArgumentParser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            yield from action.choices.values()


def _pretrain_config(args: argparse.Namespace) -> PretrainConfig:
    model = ModelConfig(
        rep_dim=args.rep_dim,
        emb_dim=args.emb_dim,
        proj_dim=args.projection,
        momentum=args.momentum,
    )
    weights = LossWeights(sigma_margin=args.margin, eta_c=args.eta_c)
    return PretrainConfig(
        epochs=args.epochs,
        patience=args.patience,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        seed=args.seed,
        ablation=args.ablation,
        num_prototypes=args.clusters,
        queue_capacity=args.queue,
        weights=weights,
        model=model,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    out_dir = _resolve_out_dir(args.out_dir)
    records = parse_checkins(args.input, fmt=args.format)
    sequences = filter_and_segment(
        records,
        min_user_records=args.min_user_records,
        min_loc_visits=args.min_loc_visits,
        history_days=args.history_days,
        gap_hours=args.gap_hours,
    )
    if not sequences:
        print("error: no sequences survive filtering", file=sys.stderr)
        return 1
    social_edges = None
    if args.friends:
        social_edges = []
        with Path(args.friends).open("r", encoding="utf-8") as fh:
            for line in fh:
                parts = line.split()
                if len(parts) >= 2:
                    social_edges.append((int(parts[0]), int(parts[1])))
    bundle = build_bundle(
        sequences,
        social_edges=social_edges,
        colocation_min_shared=args.colocation_min_shared,
        tz_offset_hours=args.tz_offset,
        filter_params={
            "min_user_records": args.min_user_records,
            "min_loc_visits": args.min_loc_visits,
            "history_days": args.history_days,
            "gap_hours": args.gap_hours,
        },
    )
    save_bundle(bundle, out_dir)
    _freeze_config(out_dir, {"command": "ingest", **vars(args)})
    n_checkins = sum(len(s) for s in bundle.all_sequences())
    print(f"{'':<14}{'count':>10}")
    print(f"{'#users':<14}{len(bundle.user_vocab.ids):>10,}")
    print(f"{'#locations':<14}{len(bundle.loc_vocab.ids):>10,}")
    print(f"{'#check-ins':<14}{n_checkins:>10,}")
    print(f"bundle written to {out_dir}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    out_dir = _resolve_out_dir(args.out_dir)
    bundle = load_bundle(args.bundle)
    cfg = _pretrain_config(args)
    _freeze_config(out_dir, {"command": "pretrain", "config": cfg.to_dict(), "bundle": str(args.bundle)})
    state = pretrain(bundle, cfg, run_dir=out_dir)
    ckpt = save_checkpoint(state, out_dir / "checkpoint.pt")
    print(f"pre-training done: best validation loss {state.best_val:.4f} after {state.epoch + 1} epoch(s)")
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    out_dir = _resolve_out_dir(args.out_dir)
    bundle = load_bundle(args.bundle)
    state = load_checkpoint(args.checkpoint, bundle)
    cfg = FinetuneConfig(
        task=args.task,
        epochs=args.epochs,
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        freeze_encoder=args.freeze_encoder,
        k_mix=args.k_mix,
        seed=args.seed,
    )
    _freeze_config(out_dir, {"command": "finetune", "config": dataclasses.asdict(cfg), "bundle": str(args.bundle)})

    if args.repeats > 1:
        runs, agg = run_repeats(state, bundle, cfg, args.repeats)
        report = {"task": args.task, "repeats": args.repeats, "runs": runs, "mean_std": agg}
        print(f"{'metric':<10}{'mean':>12}{'std':>12}")
        for key, (mean, std) in agg.items():
            print(f"{key:<10}{mean:>12.4f}{std:>12.4f}")
    else:
        result = finetune(state, bundle, cfg)
        report = {"task": args.task, "metrics": result.metrics, "counters": result.counters}
        print(f"{'metric':<10}{'value':>12}")
        for key, value in result.metrics.items():
            print(f"{key:<10}{value:>12.4f}")
        _save_predictions(result, out_dir / "predictions.json")
    with (out_dir / "report.json").open("w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"report written to {out_dir / 'report.json'}")
    return 0


def _save_predictions(result, path: Path) -> None:
    if result.task in ("lp", "tul"):
        payload = {
            "task": result.task,
            "rankings": [list(p.ranking) for p in result.predictions],
            "truths": [p.true_class for p in result.predictions],
        }
    else:
        payload = {
            "task": "tp",
            "pred_seconds": [p for p, _ in result.predictions],
            "true_seconds": [t for _, t in result.predictions],
            "nll": [result.metrics["nll"]] * len(result.predictions),
        }
    with path.open("w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def cmd_evaluate(args: argparse.Namespace) -> int:
    with Path(args.predictions).open("r", encoding="utf-8") as fh:
        payload = json.load(fh)
    task = payload.get("task")
    if task in ("lp", "tul"):
        preds = [
            RankedPrediction(ranking=tuple(r), true_class=t)
            for r, t in zip(payload["rankings"], payload["truths"])
        ]
        print(json.dumps(
            {
                "acc@1": acc_at_k(preds, 1),
                "acc@5": acc_at_k(preds, 5),
                "acc@20": acc_at_k(preds, 20),
                "mrr": mrr(preds),
            },
            indent=2,
            sort_keys=True,
        ))
    elif task == "tp":
        print(json.dumps(
            tp_metrics(payload["pred_seconds"], payload["true_seconds"], payload["nll"]),
            indent=2,
            sort_keys=True,
        ))
    else:
        print(f"error: prediction file has unknown task {task!r}", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = _resolve_out_dir(args.out_dir)
    bundle = load_bundle(args.bundle)
    values = args.values if args.values else SWEEP_DEFAULTS[args.parameter]
    _freeze_config(out_dir, {"command": "sweep", "parameter": args.parameter, "values": values, **vars(args)})

    metric_key = "mae" if args.task == "tp" else "acc@1"
    csv_path = out_dir / f"sweep_{args.parameter}.csv"
    results = []
    with csv_path.open("w", encoding="utf-8") as fh:
        fh.write(f"{args.parameter},{metric_key}\n")
        for value in values:
            run_args = argparse.Namespace(**vars(args))
            setattr(run_args, args.parameter, _coerce(args.parameter, value))
            cfg = _pretrain_config(run_args)
            try:
                state = pretrain(bundle, cfg)
                ft_cfg = FinetuneConfig(
                    task=args.task,
                    epochs=args.finetune_epochs,
                    seed=args.seed,
                    batch_size=args.batch_size,
                )
                metrics = finetune(state, bundle, ft_cfg).metrics
                score = metrics[metric_key]
            except Exception as exc:  # keep partial results on per-point failure
                print(f"sweep point {args.parameter}={value} failed: {exc}", file=sys.stderr)
                score = float("nan")
            results.append((value, score))
            fh.write(f"{value},{score}\n")
            fh.flush()
            print(f"{args.parameter}={value}: {metric_key}={score:.4f}")

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([v for v, _ in results], [s for _, s in results], marker="o")
    ax.set_xlabel(args.parameter)
    ax.set_ylabel(metric_key)
    ax.set_title(f"{args.task.upper()} vs {args.parameter}")
    fig.tight_layout()
    plot_path = out_dir / f"sweep_{args.parameter}.png"
    fig.savefig(plot_path, dpi=150)
    print(f"curve written to {csv_path} and {plot_path}")
    return 0


def _coerce(parameter: str, value) -> int | float:
    return float(value) if parameter == "margin" else int(value)


def cmd_export_embeddings(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    state = load_checkpoint(args.checkpoint, bundle)
    seqs = {
        "train": bundle.train,
        "val": bundle.val,
        "test": bundle.test,
        "all": bundle.all_sequences(),
    }[args.split]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_representations(state, seqs, out)
    print(f"wrote {len(seqs)} x {2 * state.config.model.rep_dim} matrix to {out}")
    return 0


def cmd_geohash(args: argparse.Namespace) -> int:
    code = geohash_encode(args.lat, args.lon, args.bits)
    print(f"bits: {code.bits}")
    print(f"text: {code.text}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    out_dir = _resolve_out_dir(args.out_dir)
    spec = SynthSpec(
        num_users=args.users,
        num_topics=args.topics,
        pois_per_topic=args.pois_per_topic,
        days=args.days,
        jitter_std_hours=args.jitter_std,
        noise_rate=args.noise_rate,
        seed=args.seed,
    )
    result = generate(spec, out_dir)
    _freeze_config(out_dir, {"command": "synth", **dataclasses.asdict(spec)})
    print(f"wrote {result.checkins_path} and {result.labels_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_pretrain_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ablation", choices=["full", "basic", "no_stm", "no_tim", "no_stcv"], default="full")
    p.add_argument("--clusters", type=int, default=512, help="number of prototype cluster centers")
    p.add_argument("--queue", type=int, default=2048, help="negative queue capacity")
    p.add_argument("--margin", type=float, default=0.09, help="angular margin (radians)")
    p.add_argument("--projection", type=int, default=512, help="projection head output width")
    p.add_argument("--rep-dim", type=int, default=256)
    p.add_argument("--emb-dim", type=int, default=256)
    p.add_argument("--momentum", type=float, default=0.995)
    p.add_argument("--eta-c", type=float, default=1.0, help="consistency weight in the spatial loss")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="checkinrep", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse, filter and split a raw check-in log")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["gowalla", "weeplace", "generic-csv"], default="generic-csv")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--friends", default=None, help="two-column friendship edge list (TSV)")
    p.add_argument("--min-user-records", type=int, default=10)
    p.add_argument("--min-loc-visits", type=int, default=10)
    p.add_argument("--history-days", type=float, default=120.0)
    p.add_argument("--gap-hours", type=float, default=24.0)
    p.add_argument("--colocation-min-shared", type=int, default=3)
    p.add_argument("--tz-offset", type=float, default=0.0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None)
    _add_pretrain_options(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a task head on a checkpoint")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--task", choices=["lp", "tul", "tp"], required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--k-mix", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="compute metrics over a saved prediction file")
    p.add_argument("--predictions", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="pretrain+finetune across one hyperparameter's values")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--parameter", choices=list(SWEEP_DEFAULTS), required=True)
    p.add_argument("--values", nargs="*", default=None)
    p.add_argument("--task", choices=["lp", "tul", "tp"], default="lp")
    p.add_argument("--finetune-epochs", type=int, default=10)
    p.add_argument("--config", default=None)
    _add_pretrain_options(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-embeddings", help="write combined representations to CSV")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="all")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("geohash", help="debug: encode one coordinate pair")
    p.add_argument("lat", type=float)
    p.add_argument("lon", type=float)
    p.add_argument("--bits", type=int, default=32)
    p.set_defaults(func=cmd_geohash)

    p = sub.add_parser("synth", help="generate a synthetic check-in corpus with planted structure")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--users", type=int, default=50)
    p.add_argument("--topics", type=int, default=4)
    p.add_argument("--pois-per-topic", type=int, default=20)
    p.add_argument("--days", type=int, default=20)
    p.add_argument("--jitter-std", type=float, default=0.5)
    p.add_argument("--noise-rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        # Re-parse with the config file's values installed as defaults, so
        # explicit command-line flags keep priority over the file.
        file_cfg = {k.replace("-", "_"): v for k, v in _load_config_file(args.config).items()}
        parser = build_parser()
        for sp in _subparsers(parser):
            dests = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in file_cfg.items() if k in dests})
        args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
