"""Synthetic domain-generalisation benchmark: baseline vs. attention vs. attention + disentanglement."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .data import SyntheticConfig, SyntheticData, as_float32_precision, generate_synthetic
from .evaluation import evaluate, feature_space_report
from .model import EgoZAR, ModelConfig
from .train import TrainConfig, train
from .zones import fit_kmeans, mean_over_clips

VARIANTS = ("baseline", "attention", "egozar")

# strong per-environment appearance, several environments per domain, noisy motion
BENCHMARK_DATA = SyntheticConfig(noise=3.0, alpha=0.1, beta=5.0, appearance_rank=0, motion_dim=64,
                                 environments_per_domain=4)
BENCHMARK_TRAIN = TrainConfig(epochs=60, base_lr=0.02, lr_drop_epochs=(30, 45), batch_size=32, adv_lambda=1.0)


@dataclass
class VariantResult:
    variant: str
    seed: int
    source: dict
    target: dict
    features: dict


def model_config_for(data_cfg: SyntheticConfig, variant: str, zone_count: int, **overrides) -> ModelConfig:
    kw = dict(
        clips=data_cfg.clips,
        zone_dim=data_cfg.zone_dim,
        modality_dims={m: data_cfg.motion_dim for m in data_cfg.modalities},
        verb_count=data_cfg.verbs,
        noun_count=data_cfg.nouns,
        zone_count=zone_count,
        use_zones=variant != "baseline",
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def run_variant(data: SyntheticData, variant: str, seed: int, train_cfg: TrainConfig = BENCHMARK_TRAIN,
                k: int = 4, analyze: bool = True, **model_overrides) -> VariantResult:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    src_train = data.source.split("train")
    src_val = data.source.split("val")
    centroids = fit_kmeans(mean_over_clips(src_train.zone), k, seed=seed)
    cfg = model_config_for(data.config, variant, k, **model_overrides)
    lam = train_cfg.adv_lambda if variant == "egozar" else 0.0
    tcfg = replace(train_cfg, adv_lambda=lam, seed=seed)
    model = EgoZAR(cfg, seed=seed)
    result = train(model, src_train, centroids, tcfg, val=src_val, log_every_epoch=False)
    model = result.model
    feats = {}
    if analyze:
        feats = feature_space_report(model, data.source, data.target, data.source_zones, data.target_zones,
                                     k=data.config.zones, seed=seed)
    return VariantResult(variant, seed, evaluate(model, data.source.split("val")).to_dict(),
                         evaluate(model, data.target).to_dict(), feats)


def run_benchmark(data_cfg: SyntheticConfig = BENCHMARK_DATA, seeds=(0, 1, 2), variants=VARIANTS,
                  train_cfg: TrainConfig = BENCHMARK_TRAIN, k: int = 4) -> list[VariantResult]:
    results = []
    for seed in seeds:
        data = as_float32_precision(generate_synthetic(replace(data_cfg, seed=seed)))
        for variant in variants:
            results.append(run_variant(data, variant, seed, train_cfg, k))
    return results


def summarize(results: list[VariantResult]) -> dict[str, dict]:
    out = {}
    for variant in dict.fromkeys(r.variant for r in results):
        rs = [r for r in results if r.variant == variant]
        out[variant] = {
            "target_mean_accuracy": float(np.mean([r.target["mean_accuracy"] for r in rs])),
            "source_mean_accuracy": float(np.mean([r.source["mean_accuracy"] for r in rs])),
            "gap": [r.features.get("gap") for r in rs],
            "target_per_seed": [r.target["mean_accuracy"] for r in rs],
        }
    return out


def run_k_ablation(data: SyntheticData, ks=(2, 4, 8), seed: int = 0, train_cfg: TrainConfig = BENCHMARK_TRAIN,
                   log_path=None) -> dict[int, dict]:
    """Train the full model once per zone count K; one JSON line per K goes to ``log_path``."""
    reports = {}
    log = open(log_path, "w") if log_path is not None else None
    try:
        for k in ks:
            r = run_variant(data, "egozar", seed, train_cfg, k=k, analyze=False)
            reports[k] = {"k": k, "seed": seed, "source": r.source, "target": r.target}
            if log is not None:
                log.write(json.dumps(reports[k], sort_keys=True) + "\n")
                log.flush()
    finally:
        if log is not None:
            log.close()
    return reports
