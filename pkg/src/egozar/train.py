"""Loss composition and the SGD training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffkernel as dk
from .data import Dataset
from .errors import ConfigError, ContractError, IngestionError, LabelError, NumericalError
from .evaluation import check_compatible, evaluate
from .model import EgoZAR, ForwardOutput, save_checkpoint
from .zones import ZoneCentroids, assign_zones, mean_over_clips


@dataclass
class TrainConfig:
    epochs: int = 30
    base_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lr_drop_epochs: tuple[int, ...] = (10, 20)
    lr_drop_factor: float = 0.1
    batch_size: int = 128
    adv_lambda: float = 1.0
    # 0 keeps lambda constant; otherwise the usual 2/(1+exp(-10p))-1 ramp over this many epochs
    adv_rampup_epochs: int = 0
    seed: int = 0

    def __post_init__(self):
        self.lr_drop_epochs = tuple(self.lr_drop_epochs)
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError(f"train config field 'epochs' must be an integer >= 1, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 2:
            raise ConfigError(f"train config field 'batch_size' must be an integer >= 2, got {self.batch_size!r}")
        if not self.adv_lambda >= 0:
            raise ConfigError(f"train config field 'adv_lambda' must be >= 0, got {self.adv_lambda!r}")
        if not self.base_lr > 0:
            raise ConfigError(f"train config field 'base_lr' must be > 0, got {self.base_lr!r}")
        if list(self.lr_drop_epochs) != sorted(self.lr_drop_epochs):
            raise ConfigError(f"train config field 'lr_drop_epochs' must be sorted ascending, got {self.lr_drop_epochs}")

    def lam(self, epoch: int) -> float:
        if self.adv_rampup_epochs <= 0:
            return self.adv_lambda
        p = min(1.0, epoch / self.adv_rampup_epochs)
        return self.adv_lambda * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drop_epochs"] = list(self.lr_drop_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class LossBreakdown:
    fused: float
    per_modality: dict[str, float]
    zone: float
    lam: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def total_loss(out: ForwardOutput, verbs, nouns, zone_labels, lam: float) -> tuple[dk.Tensor, LossBreakdown]:
    """Fused action CE + per-modality action CE + lam * RGB zone CE.

    Action CE is verb CE plus noun CE. The zone logits already sit behind a
    gradient-reversal layer, so the branch beneath them receives ``-lam`` times
    the zone gradient while the adversary itself minimises the zone CE.
    """
    if lam < 0:
        raise ContractError(f"adversarial weight must be >= 0, got {lam}")
    fused = dk.add(dk.cross_entropy(out.verb, verbs), dk.cross_entropy(out.noun, nouns))
    terms = [fused]
    per_mod = {}
    for mod, (v, n) in out.per_modality.items():
        t = dk.add(dk.cross_entropy(v, verbs), dk.cross_entropy(n, nouns))
        per_mod[mod] = t.item()
        terms.append(t)
    zone_value = 0.0
    if out.zone_logits is not None:
        if zone_labels is None:
            raise LabelError("zone pseudo-labels are required when the model has an adversarial head")
        zone_ce = dk.cross_entropy(out.zone_logits, zone_labels)
        zone_value = zone_ce.item()
        terms.append(dk.scale(zone_ce, lam))
    total = terms[0]
    for t in terms[1:]:
        total = dk.add(total, t)
    return total, LossBreakdown(fused.item(), per_mod, zone_value, lam, total.item())


def zone_pseudo_labels(dataset: Dataset, centroids: ZoneCentroids) -> np.ndarray:
    if dataset.zone is None:
        raise IngestionError("dataset has no zone features to assign pseudo-labels from")
    labels, _ = assign_zones(mean_over_clips(dataset.zone), centroids)
    return labels


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded shuffled mini-batches; a trailing singleton joins the previous batch."""
    perm = rng.permutation(n)
    out = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def _check_finite(dataset: Dataset) -> None:
    blocks = dict(dataset.features)
    if dataset.zone is not None:
        blocks["zone"] = dataset.zone
    for name, block in blocks.items():
        bad = ~np.isfinite(block).reshape(len(block), -1).all(axis=1)
        if bad.any():
            raise IngestionError(f"non-finite {name} features in record {dataset.ids[int(np.argmax(bad))]!r}")


def _snapshot(model: EgoZAR):
    return [t.data.copy() for t in model.parameters()], {k: v.copy() for k, v in model.buffers().items()}


def _restore(model: EgoZAR, snap) -> None:
    params, bufs = snap
    for t, d in zip(model.parameters(), params):
        t.data = d.copy()
    model.set_buffers(bufs)


@dataclass
class TrainResult:
    model: EgoZAR
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = -math.inf
    best_model: EgoZAR | None = None


def train(
    model: EgoZAR,
    dataset: Dataset,
    centroids: ZoneCentroids | None,
    cfg: TrainConfig,
    val: Dataset | None = None,
    out_dir=None,
    log_every_epoch: bool = True,
) -> TrainResult:
    """Fit ``model`` on ``dataset``; pseudo-labels come from the frozen ``centroids``.

    Model selection uses ``val`` (source validation) mean accuracy, falling
    back to training accuracy when no validation data is given.
    """
    if len(dataset) == 0:
        raise IngestionError("cannot train on an empty dataset")
    check_compatible(model, dataset)
    _check_finite(dataset)
    zone_labels = None
    if model.adversary is not None:
        if centroids is None:
            raise ContractError("the adversarial head needs zone centroids for pseudo-labels")
        if centroids.K != model.cfg.zone_count:
            raise ContractError(f"centroids have K={centroids.K} but the model expects {model.cfg.zone_count} zones")
        zone_labels = zone_pseudo_labels(dataset, centroids)

    shuffle_seed, dropout_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)
    params = model.parameters()
    state = dk.OptimizerState.for_params(params, learning_rate=cfg.base_lr, momentum=cfg.momentum,
                                         weight_decay=cfg.weight_decay)
    mods = model.cfg.modalities
    result = TrainResult(model)
    best_snap = None
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "w")
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            state.learning_rate = dk.lr_schedule(epoch, cfg.base_lr, cfg.lr_drop_epochs, cfg.lr_drop_factor)
            lam = cfg.lam(epoch)
            sums = {"fused": 0.0, "zone": 0.0, "total": 0.0} | {f"modality.{m}": 0.0 for m in mods}
            seen = 0
            for b_idx, idx in enumerate(batches(len(dataset), cfg.batch_size, shuffle_rng)):
                feats = {m: dataset.features[m][idx] for m in mods}
                zone = None if dataset.zone is None else dataset.zone[idx]
                with dk.Tape() as tape:
                    out = model.forward(feats, zone, training=True, rng=dropout_rng)
                    loss, parts = total_loss(out, dataset.verbs[idx], dataset.nouns[idx],
                                             None if zone_labels is None else zone_labels[idx], lam)
                if not math.isfinite(parts.total):
                    raise NumericalError(f"non-finite loss {parts.total} at epoch {epoch}, batch {b_idx}")
                dk.backward(tape, loss)
                if not all(np.isfinite(p.grad).all() for p in params):
                    raise NumericalError(f"non-finite gradient at epoch {epoch}, batch {b_idx}")
                dk.sgd_step(params, [p.grad for p in params], state)
                model.zero_grad()
                w = len(idx)
                seen += w
                sums["fused"] += parts.fused * w
                sums["zone"] += parts.zone * w
                sums["total"] += parts.total * w
                for m, v in parts.per_modality.items():
                    sums[f"modality.{m}"] += v * w
            entry = {"epoch": epoch, "lr": state.learning_rate, "lambda": lam,
                     "loss": {k: v / seen for k, v in sums.items()}}
            if log_every_epoch or epoch == cfg.epochs - 1:
                entry["train"] = evaluate(model, dataset).to_dict() | {"per_domain": None}
                if val is not None and len(val):
                    entry["val"] = evaluate(model, val).to_dict() | {"per_domain": None}
                score = entry.get("val", entry["train"])["mean_accuracy"]
                if score > result.best_score:
                    result.best_score, result.best_epoch = score, epoch
                    best_snap = _snapshot(model)
            entry["wall_time"] = time.perf_counter() - t0
            result.log.append(entry)
            if log_file is not None:
                log_file.write(json.dumps(entry, sort_keys=True) + "\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()

    if best_snap is not None:
        final_snap = _snapshot(model)
        best = EgoZAR(model.cfg)
        _restore(best, best_snap)
        result.best_model = best
        _restore(model, final_snap)
    if out_dir is not None:
        meta = {"train_config": cfg.to_dict(), "epochs_run": cfg.epochs}
        save_checkpoint(model, out_dir / "final", optimizer=state, extra=meta)
        if result.best_model is not None:
            save_checkpoint(result.best_model, out_dir / "best", extra=meta | {"best_epoch": result.best_epoch})
    return result
