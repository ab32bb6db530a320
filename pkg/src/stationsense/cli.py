"""Command-line interface: simulate, build-dataset, pretrain, train,
evaluate, sweep, pca-export, report."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, config_to_dict, dump_config, load_config
from .core import RandomStream
from .crossl import (
    VicregWeights,
    build_extractor,
    load_extractor,
    pretrain,
    save_extractor,
)
from .downstream import (
    AugmentConfig,
    SensingModel,
    build_head,
    load_model,
    save_model,
    train_downstream,
)
from .harness import (
    MetricsRow,
    eval_at_availability,
    label_ratio_subset,
    pca_export,
    run_grid,
    summarize,
    write_metrics_csv,
    write_summary_csv,
)
from .pipeline import (
    Dataset,
    build_labeled_dataset,
    build_unlabeled_dataset,
    export_csv,
    load_dataset,
    save_dataset,
    scenario_hash,
)
from .synth import gen_csi_streams, gen_trajectory


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _simulate(cfg: RunConfig, seed: int):
    rng = RandomStream(seed, "synth")
    traj = gen_trajectory(cfg.scenario, rng.child("traj"))
    streams = gen_csi_streams(cfg.scenario, traj, rng.child("streams"))
    return traj, streams


def cmd_simulate(args):
    cfg = load_config(args.config)
    out = _out_dir(args)
    traj, streams = _simulate(cfg, args.seed)
    k_raw = cfg.scenario.k_raw
    with open(out / "frames.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["station", "timestamp"]
            + [c for k in range(k_raw) for c in (f"re{k}", f"im{k}")]
        )
        for s in streams:
            for t, v in zip(s.timestamps, s.values):
                row = [s.station, repr(float(t))]
                for z in v:
                    row += [repr(float(z.real)), repr(float(z.imag))]
                w.writerow(row)
    probe = np.arange(0.0, cfg.scenario.duration_s, 0.1)
    pos = traj.position(probe)
    with open(out / "trajectory.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "x", "y", "label"])
        for t, (x, y), lab in zip(probe, pos, traj.label(probe)):
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y)), repr(float(lab))])
    dump_config(cfg, out / "scenario.yaml")
    print(f"wrote frames.csv, trajectory.csv, scenario.yaml to {out}")


def cmd_build_dataset(args):
    cfg = load_config(args.config)
    out = _out_dir(args)
    traj, streams = _simulate(cfg, args.seed)
    prov = {"scenario_hash": scenario_hash(cfg.scenario), "seed": args.seed}
    train, val, test = build_labeled_dataset(
        streams, traj, cfg.windowing.labeled_spec(), cfg.windowing.split_ratios,
        provenance=prov,
    )
    train_end = float(train.timestamps[-1]) + cfg.windowing.width_s / 2
    unlabeled = build_unlabeled_dataset(
        streams, cfg.windowing.unlabeled_spec(), cfg.windowing.label_rate_hz,
        train_end, provenance=prov,
    )
    for name, d in (("train", train), ("val", val), ("test", test), ("unlabeled", unlabeled)):
        save_dataset(d, out / f"{name}.bin")
        if args.export_csv:
            export_csv(d, out / f"{name}.csv")
    print(
        f"wrote datasets to {out}: train={train.n} val={val.n} test={test.n} "
        f"unlabeled={unlabeled.n}"
    )


def cmd_pretrain(args):
    cfg = load_config(args.config)
    tr = cfg.training
    unlabeled = load_dataset(args.dataset)
    w = VicregWeights(
        lam=args.lam if args.lam is not None else tr.vicreg.lam,
        mu=args.mu if args.mu is not None else tr.vicreg.mu,
        nu=args.nu if args.nu is not None else tr.vicreg.nu,
        gamma=args.gamma,
        epsilon=args.epsilon,
    )
    tc = tr.pretrain
    if args.lr is not None:
        tc = type(tc)(args.lr, tc.batch_size, tc.max_epochs, tc.patience)
    if args.batch is not None:
        tc = type(tc)(tc.learning_rate, args.batch, tc.max_epochs, tc.patience)
    rng = RandomStream(args.seed, "crossl")
    fx = build_extractor(
        unlabeled.n_stations, unlabeled.k, rng.child("init"),
        embedding_dim=tr.embedding_dim, aggregator_hidden=tr.aggregator_hidden,
    )
    result = pretrain(fx, unlabeled, args.p_mask, w, tc, rng.child("fit"))
    save_extractor(
        fx, args.out,
        meta={"p_mask": args.p_mask, "vicreg": [w.lam, w.mu, w.nu, w.gamma, w.epsilon],
              "seed": args.seed, "epochs": len(result.history),
              "best_loss": result.best_loss},
    )
    print(f"pretrained {len(result.history)} epochs, best loss {result.best_loss:.6f} -> {args.out}")


def cmd_train(args):
    cfg = load_config(args.config)
    tr = cfg.training
    labeled = load_dataset(args.labeled)
    if args.label_ratio < 1.0:
        labeled = label_ratio_subset(
            labeled, args.label_ratio, RandomStream(args.seed, f"label_subset/{args.label_ratio}")
        )
    rng = RandomStream(args.seed, "train")
    if args.extractor == "identity":
        fx = None
        feat_dim = labeled.n_stations * labeled.k
    elif args.extractor == "fresh":
        fx = build_extractor(
            labeled.n_stations, labeled.k, rng.child("init/fx"),
            embedding_dim=tr.embedding_dim, aggregator_hidden=tr.aggregator_hidden,
        )
        feat_dim = fx.embedding_dim
    else:
        fx = load_extractor(args.extractor)
        feat_dim = fx.embedding_dim
    head = build_head(feat_dim, rng.child("init/head"))
    model = SensingModel(fx, head, args.mode)
    kind = {"none": "none", "sma": "sma", "re": "random_erase"}[args.aug]
    erange = tuple(float(v) for v in args.erase_range.split(","))
    aug = AugmentConfig(
        kind=kind, p_mask=args.p_mask, erase_range=erange,
        p_aug=tr.p_aug, strategy=args.aug_strategy,
    )
    tc = tr.downstream
    if args.lr is not None:
        tc = type(tc)(args.lr, tc.batch_size, tc.max_epochs, tc.patience)
    result = train_downstream(model, labeled, aug, tc, rng)
    save_model(
        model, args.out,
        meta={"aug": args.aug, "p_mask": args.p_mask, "mode": args.mode,
              "label_ratio": args.label_ratio, "seed": args.seed,
              "best_loss": result.best_loss},
    )
    print(f"trained {len(result.history)} epochs, best loss {result.best_loss:.6f} -> {args.out}")


def cmd_evaluate(args):
    model = load_model(args.model)
    test = load_dataset(args.dataset)
    rows = []
    for k in args.k:
        value = eval_at_availability(
            model, test, k, args.policy, args.n_draws,
            RandomStream(args.seed, f"mc/{k}"),
        )
        rows.append(MetricsRow("model", k, 1.0, args.seed, value, 0.0))
        print(f"k={k}: rmse={value:.6f}")
    if args.out:
        write_metrics_csv(rows, args.out)


def cmd_sweep(args):
    cfg = load_config(args.config)
    out = _out_dir(args)
    data_dir = Path(args.data_dir)
    train = load_dataset(data_dir / "train.bin")
    test = load_dataset(data_dir / "test.bin")
    unlabeled_path = data_dir / "unlabeled.bin"
    unlabeled = load_dataset(unlabeled_path) if unlabeled_path.exists() else None
    methods = args.methods.split(",")
    rows, failures = run_grid(
        cfg.sweep, methods, train, test, unlabeled, cfg.training, out
    )
    manifest = {
        "config": config_to_dict(cfg),
        "methods": methods,
        "n_rows": len(rows),
        "n_failures": len(failures),
        "data_dir": str(data_dir),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(rows)} metric rows to {out} ({len(failures)} failures)")


def cmd_pca_export(args):
    train = load_dataset(args.train)
    test = load_dataset(args.test)
    fx = load_extractor(args.extractor) if args.extractor else None

    def vectors(d: Dataset, mask_to_k):
        x = d.x.astype(np.float32)
        if mask_to_k is not None and mask_to_k < d.n_stations:
            x = x.copy()
            x[:, mask_to_k:, :] = 0.0  # fixed combination: first k stations kept
        if fx is None:
            return x.reshape(d.n, -1)
        return fx.embed(x, "eval")

    rows = []
    for k in args.k:
        tr_vec = vectors(train, None)
        te_vec = vectors(test, k)
        _, te_proj = pca_export(tr_vec, te_vec, dims=2)
        for i in range(test.n):
            rows.append(
                {
                    "pc1": repr(float(te_proj[i, 0])),
                    "pc2": repr(float(te_proj[i, 1])),
                    "label": repr(float(test.labels[i])) if test.labeled else "",
                    "availability": k,
                }
            )
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["pc1", "pc2", "label", "availability"])
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} projected points to {args.out}")


def cmd_report(args):
    with open(args.metrics) as f:
        reader = csv.DictReader(f)
        rows = [
            MetricsRow(
                r["method"], int(r["k_available"]), float(r["label_ratio"]),
                int(r["seed"]), float(r["rmse"]), float(r["runtime_s"]),
            )
            for r in reader
        ]
    summary = summarize(rows)
    write_summary_csv(rows, args.out)
    widths = (12, 4, 8, 10, 10)
    print(f"{'method':<12} {'k':>4} {'ratio':>8} {'rmse':>10} {'std':>10}")
    for s in summary:
        print(
            f"{s['method']:<12} {s['k_available']:>4} {s['label_ratio']:>8} "
            f"{s['rmse_mean']:>10.4f} {s['rmse_std']:>10.4f}"
        )
    print(f"summary written to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stationsense")
    p.add_argument("--config", default=None, help="YAML run configuration")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="out")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread cap (best effort; set OMP_NUM_THREADS for guarantees)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="generate frames/trajectory CSVs")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("build-dataset", help="simulate and build labeled/unlabeled datasets")
    sp.add_argument("--export-csv", action="store_true")
    sp.set_defaults(func=cmd_build_dataset)

    sp = sub.add_parser("pretrain", help="self-supervised pre-training")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--p-mask", type=float, default=0.5)
    sp.add_argument("--lambda", dest="lam", type=float, default=None)
    sp.add_argument("--mu", type=float, default=None)
    sp.add_argument("--nu", type=float, default=None)
    sp.add_argument("--gamma", type=float, default=1.0)
    sp.add_argument("--epsilon", type=float, default=1e-4)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--batch", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="supervised downstream training")
    sp.add_argument("--labeled", required=True)
    sp.add_argument("--extractor", default="identity",
                    help="checkpoint path, 'fresh', or 'identity' (no extractor)")
    sp.add_argument("--mode", choices=["frozen", "joint"], default="joint")
    sp.add_argument("--aug", choices=["none", "sma", "re"], default="none")
    sp.add_argument("--p-mask", type=float, default=0.5)
    sp.add_argument("--erase-range", default="0.4,0.6")
    sp.add_argument("--aug-strategy", choices=["offline_double", "online"],
                    default="offline_double")
    sp.add_argument("--label-ratio", type=float, default=1.0)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="availability-sweep evaluation of a model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--k", type=int, nargs="+", default=[1, 4, 8])
    sp.add_argument("--policy", choices=["exhaustive", "monte_carlo"], default="exhaustive")
    sp.add_argument("--n-draws", type=int, default=500)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="full method x ratio x seed grid")
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--methods", default="constant,naive,proposed")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("pca-export", help="2-D PCA projection of inputs or embeddings")
    sp.add_argument("--train", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--extractor", default=None)
    sp.add_argument("--k", type=int, nargs="+", default=[8])
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pca_export)

    sp = sub.add_parser("report", help="summarize a metrics CSV")
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--out", default="summary.csv")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        try:
            from threadpoolctl import threadpool_limits

            threadpool_limits(args.threads)
        except ImportError:
            print("threadpoolctl unavailable; --threads ignored", file=sys.stderr)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
