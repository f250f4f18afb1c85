"""Command-line entry point: ``egozar {synth,cluster,train,eval,gradcheck,analyze,benchmark}``.

Configs are flat JSON objects; command-line flags override file values and
the fully resolved configuration is written next to every output. Exit codes:
0 success, 2 validation or I/O failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import SyntheticConfig, generate_synthetic, load_dataset, load_ground_truth, read_manifest, write_synthetic
from .errors import ConfigError, IngestionError, NumericalError, ValidationError
from .evaluation import evaluate, feature_space_report, write_predictions_csv
from .model import EgoZAR, ModelConfig, load_checkpoint
from .train import TrainConfig, train
from .zones import (
    assign_zones,
    fit_kmeans,
    inertia,
    load_centroids,
    mean_over_clips,
    per_domain_cluster_and_merge,
    save_centroids,
)

# model fields a config file may set; the rest follow from the manifest and centroids
MODEL_KEYS = ("hidden_dim", "heads", "attention_dim", "dropout", "adv_hidden", "use_zones",
              "adversarial_modality", "ae_scale")
TRAIN_KEYS = tuple(TrainConfig.__dataclass_fields__)


@dataclass
class RunConfig:
    """Model tunables + training settings + resolved paths of one ``train`` run."""

    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"model": dict(self.model), "train": self.train.to_dict(), "paths": dict(self.paths)}


def read_config(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise IngestionError(f"config file {path} does not exist")
    with open(path) as f:
        try:
            cfg = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def parse_overrides(pairs) -> dict:
    """``KEY=VALUE`` strings; values are parsed as JSON when possible."""
    out = {}
    for pair in pairs or ():
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {pair!r} is not of the form KEY=VALUE")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def resolve_run_config(values: dict, paths: dict) -> RunConfig:
    unknown = set(values) - set(MODEL_KEYS) - set(TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    tcfg = TrainConfig.from_dict({k: v for k, v in values.items() if k in TRAIN_KEYS})
    resolved = {}
    for name, p in paths.items():
        if p is not None:
            resolved[name] = str(Path(p).resolve())
    return RunConfig({k: v for k, v in values.items() if k in MODEL_KEYS}, tcfg, resolved)


def echo_config(path, cfg: dict) -> None:
    with open(path, "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def _run_path(output) -> Path:
    """Where the resolved config of a single-file output goes: ``x.json`` -> ``x.run.json``."""
    output = Path(output)
    return output.with_name(output.stem + ".run.json")


def _require_file(path, what: str) -> None:
    if not os.path.isfile(path):
        raise IngestionError(f"{what} {path} does not exist")


def _parent_dir(path) -> Path:
    parent = Path(path).resolve().parent
    try:
        parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IngestionError(f"cannot create output directory {parent}: {e}") from None
    return parent


def _checkpoint_dir(path) -> Path:
    """A checkpoint directory, or a training output directory (its ``best/`` then ``final/``)."""
    path = Path(path)
    if (path / "manifest.json").exists():
        return path
    for sub in ("best", "final"):
        if (path / sub / "manifest.json").exists():
            return path / sub
    raise IngestionError(f"{path}: no checkpoint found")


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    values = read_config(args.config) | parse_overrides(args.set)
    if args.seed is not None:
        values["seed"] = args.seed
    if args.benchmark:
        from .experiments import BENCHMARK_DATA

        values = BENCHMARK_DATA.to_dict() | values
    cfg = SyntheticConfig.from_dict(values)
    out = Path(args.out)
    paths = write_synthetic(generate_synthetic(cfg), out)
    echo_config(out / "config.json", cfg.to_dict())
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def cmd_cluster(args) -> int:
    _require_file(args.manifest, "manifest")
    splits = tuple(args.splits.split(",")) if args.splits else None
    ds = load_dataset(args.manifest, splits=splits)
    if ds.zone is None:
        raise IngestionError(f"{args.manifest}: records carry no zone features to cluster")
    points = mean_over_clips(ds.zone)
    if args.per_domain:
        k_final = args.k_final if args.k_final is not None else args.k
        by_dom = {int(d): points[ds.domains == d] for d in np.unique(ds.domains)}
        verbs = {int(d): ds.verbs[ds.domains == d] for d in np.unique(ds.domains)}
        zc = per_domain_cluster_and_merge(by_dom, verbs, args.k, k_final, ds.verb_count, seed=args.seed,
                                          n_init=args.n_init)
        # report the merged centroids' inertia and sizes on the pooled points
        labels, _ = assign_zones(points, zc)
        zc.inertia = inertia(points, zc)
        zc.sizes = np.bincount(labels, minlength=zc.K).tolist()
    else:
        if args.k_final is not None:
            raise ConfigError("--k-final only applies with --per-domain")
        zc = fit_kmeans(points, args.k, seed=args.seed, n_init=args.n_init)
    _parent_dir(args.out)
    save_centroids(zc, args.out)
    echo_config(_run_path(args.out), {
        "manifest": str(Path(args.manifest).resolve()), "k": args.k, "k_final": args.k_final,
        "per_domain": bool(args.per_domain), "seed": args.seed, "n_init": args.n_init,
        "splits": list(splits) if splits else None, "out": str(Path(args.out).resolve()),
    })
    print(f"K: {zc.K}")
    print(f"inertia: {zc.inertia:.6f}")
    print(f"sizes: {list(zc.sizes)}")
    return 0


def cmd_train(args) -> int:
    values = read_config(args.config) | parse_overrides(args.set)
    for key, flag in (("epochs", args.epochs), ("base_lr", args.lr), ("batch_size", args.batch_size),
                      ("adv_lambda", args.adv_lambda), ("seed", args.seed)):
        if flag is not None:
            values[key] = flag
    run = resolve_run_config(values, {"manifest": args.manifest, "centroids": args.centroids, "out": args.out})
    _require_file(args.manifest, "manifest")
    if args.centroids is not None:
        _require_file(args.centroids, "centroids file")
    meta = read_manifest(args.manifest)
    ds = load_dataset(args.manifest, splits=("train", "val"))
    train_ds, val_ds = ds.split("train"), ds.split("val")
    if len(train_ds) == 0:
        raise IngestionError(f"{args.manifest}: no records tagged 'train'")
    centroids = load_centroids(args.centroids) if args.centroids is not None else None
    use_zones = run.model.get("use_zones", True)
    if use_zones and ds.zone is None:
        raise IngestionError(f"{args.manifest}: the model needs zone features but records carry none")
    zone_count = centroids.K if centroids is not None else 1
    if use_zones and centroids is None and run.model.get("adversarial_modality", "rgb") in meta["modalities"]:
        raise ConfigError("--centroids is required when the adversarial zone head is enabled")
    if centroids is not None and ds.zone is not None and centroids.dim != ds.zone.shape[2]:
        raise ConfigError(f"centroid dimension {centroids.dim} does not match zone features ({ds.zone.shape[2]})")
    mcfg = ModelConfig(
        clips=next(iter(ds.features.values())).shape[1],
        zone_dim=ds.zone.shape[2] if ds.zone is not None else 1,
        modality_dims={m: int(f.shape[2]) for m, f in ds.features.items()},
        verb_count=ds.verb_count,
        noun_count=ds.noun_count,
        zone_count=zone_count,
        **run.model,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(out / "config.json", run.to_dict() | {"resolved_model": mcfg.to_dict()})
    model = EgoZAR(mcfg, seed=run.train.seed)
    result = train(model, train_ds, centroids, run.train, val=val_ds if len(val_ds) else None, out_dir=out)
    last = result.log[-1]
    print(f"epochs: {len(result.log)}  final loss: {last['loss']['total']:.6f}  "
          f"best epoch: {result.best_epoch}  best mean accuracy: {result.best_score:.3f}")
    return 0


def cmd_eval(args) -> int:
    _require_file(args.manifest, "manifest")
    ckpt = _checkpoint_dir(args.model)
    model = load_checkpoint(ckpt)
    splits = tuple(args.splits.split(",")) if args.splits else None
    ds = load_dataset(args.manifest, splits=splits)
    report = evaluate(model, ds)
    _parent_dir(args.report)
    report.write(args.report)
    if args.predictions:
        _parent_dir(args.predictions)
        write_predictions_csv(args.predictions, model, ds)
    echo_config(_run_path(args.report), {
        "manifest": str(Path(args.manifest).resolve()), "model": str(ckpt.resolve()),
        "splits": list(splits) if splits else None, "report": str(Path(args.report).resolve()),
        "predictions": str(Path(args.predictions).resolve()) if args.predictions else None,
    })
    print(" ".join(f"{k}={v:.2f}" for k, v in report.to_dict().items() if isinstance(v, float)))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck

    res = gradcheck(seed=args.seed)
    ok = res.passed(args.tol)
    print(f"max relative error {res.max_rel_error:.3e} at {res.worst_parameter}{list(res.worst_index)} "
          f"over {res.checked} entries: {'PASS' if ok else 'FAIL'} (tol {args.tol:g})")
    return 0 if ok else 3


def _reference_zones(ds, explicit, manifest, centroids) -> np.ndarray:
    gt_path = explicit
    if gt_path is None:
        guess = Path(manifest).resolve().parent.parent / "ground_truth.json"
        gt_path = guess if guess.exists() else None
    if gt_path is not None:
        truth = load_ground_truth(gt_path)
        missing = [rid for rid in ds.ids if rid not in truth]
        if missing:
            raise IngestionError(f"{gt_path}: no zone label for record {missing[0]!r}")
        return np.array([truth[rid] for rid in ds.ids])
    if centroids is not None and ds.zone is not None:
        return assign_zones(mean_over_clips(ds.zone), centroids)[0]
    raise IngestionError(f"no reference zones for {manifest}: pass --ground-truth or --centroids")


def cmd_analyze(args) -> int:
    for p in (args.source, args.target):
        _require_file(p, "manifest")
    model = load_checkpoint(_checkpoint_dir(args.model))
    centroids = load_centroids(args.centroids) if args.centroids else None
    src = load_dataset(args.source)
    tgt = load_dataset(args.target)
    zs = _reference_zones(src, args.ground_truth, args.source, centroids)
    zt = _reference_zones(tgt, args.ground_truth, args.target, centroids)
    report = feature_space_report(model, src, tgt, zs, zt, k=args.k, seed=args.seed)
    _parent_dir(args.out)
    echo_config(args.out, report)
    echo_config(_run_path(args.out), {
        "model": str(Path(args.model).resolve()), "source": str(Path(args.source).resolve()),
        "target": str(Path(args.target).resolve()), "k": args.k, "seed": args.seed,
        "ground_truth": str(Path(args.ground_truth).resolve()) if args.ground_truth else None,
    })
    print(f"source agreement {report['source_agreement']:.4f}  target agreement "
          f"{report['target_agreement']:.4f}  gap {report['gap']:.4f}")
    return 0


def cmd_benchmark(args) -> int:
    from .data import as_float32_precision
    from .experiments import BENCHMARK_DATA, BENCHMARK_TRAIN, run_benchmark, run_k_ablation, summarize

    seeds = tuple(int(s) for s in args.seeds.split(","))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(out / "config.json", {"data": BENCHMARK_DATA.to_dict(), "train": BENCHMARK_TRAIN.to_dict(),
                                      "seeds": list(seeds), "ks": args.ks})
    summary = summarize(run_benchmark(seeds=seeds))
    echo_config(out / "summary.json", summary)
    for variant, s in summary.items():
        gaps = ", ".join(f"{g:.3f}" for g in s["gap"])
        print(f"{variant:10s} target mean accuracy {s['target_mean_accuracy']:6.2f}  gaps [{gaps}]")
    if args.ks:
        ks = tuple(int(k) for k in args.ks.split(","))
        data = as_float32_precision(generate_synthetic(replace(BENCHMARK_DATA, seed=seeds[0])))
        for k, r in run_k_ablation(data, ks, seed=seeds[0], log_path=out / "ablation_k.jsonl").items():
            print(f"K={k}: target mean accuracy {r['target']['mean_accuracy']:.2f}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egozar", description="Zone-aware egocentric action recognition on feature files.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic zone/action benchmark")
    s.add_argument("--config", help="JSON file of synthetic-data fields")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--benchmark", action="store_true", help="start from the benchmark settings")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("cluster", help="discover zones with K-Means on clip-averaged zone features")
    s.add_argument("--manifest", required=True)
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--per-domain", action="store_true", help="cluster each domain, then merge")
    s.add_argument("--k-final", type=int, help="zone count after merging (per-domain mode; default --k)")
    s.add_argument("--n-init", type=int, default=10)
    s.add_argument("--splits", default="train", help="comma-separated split tags to cluster (empty for all)")
    s.add_argument("--out", required=True, help="centroid file (EZF1); a .json sidecar is written next to it")
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("train", help="train on a source manifest")
    s.add_argument("--manifest", required=True, help="source manifest; 'train' records fit, 'val' records select")
    s.add_argument("--centroids")
    s.add_argument("--config", help="flat JSON of model and training fields")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--adv-lambda", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--model", required=True, help="checkpoint or training output directory")
    s.add_argument("--report", required=True)
    s.add_argument("--predictions", help="optional per-record CSV")
    s.add_argument("--splits", help="comma-separated split tags (default all)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("analyze", help="feature-space clustering agreement with zones, source vs target")
    s.add_argument("--model", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ground-truth", help="zone labels by record id (default: ../ground_truth.json)")
    s.add_argument("--centroids", help="fall back to pseudo-labels from these centroids")
    s.add_argument("--k", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("benchmark", help="baseline / attention / full model on the synthetic benchmark")
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--ks", default="", help="comma-separated zone counts for a K ablation")
    s.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
