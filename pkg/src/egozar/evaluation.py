"""Top-k verb/noun/action accuracies and feature-space clustering analysis."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .errors import DimensionError, InsufficientPointsError, ParameterError
from .zones import clustering_agreement, fit_kmeans

METRICS = ("verb_top1", "noun_top1", "action_top1", "verb_top5", "noun_top5", "action_top5")


def label_ranks(logits, labels) -> np.ndarray:
    """Zero-based rank of each label; equal scores rank the lower class first."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} are inconsistent")
    true = logits[np.arange(len(labels)), labels][:, None]
    cls = np.arange(logits.shape[1])[None, :]
    beats = (logits > true) | ((logits == true) & (cls < labels[:, None]))
    return beats.sum(axis=1)


def _percent(hits) -> float:
    """Percentage from integer hit counts, so equal hit counts give bit-equal scores."""
    hits = np.asarray(hits)
    return 100.0 * int(np.count_nonzero(hits)) / hits.size


def topk_accuracy(logits, labels, k: int) -> float:
    logits = np.asarray(logits)
    if logits.ndim != 2 or not 1 <= k <= logits.shape[1]:
        raise ParameterError(f"k={k} outside [1, {logits.shape[-1] if logits.ndim else 0}]")
    if logits.shape[0] == 0:
        return 0.0
    return _percent(label_ranks(logits, labels) < k)


def log_softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def action_accuracy(verb_logits, noun_logits, verbs, nouns, k: int) -> float:
    """Top-1: both heads right. Top-k: the true pair among the k best summed log-probabilities."""
    verb_logits = np.asarray(verb_logits, dtype=np.float64)
    noun_logits = np.asarray(noun_logits, dtype=np.float64)
    verbs = np.asarray(verbs, dtype=np.int64)
    nouns = np.asarray(nouns, dtype=np.int64)
    B = len(verbs)
    if verb_logits.shape[0] != B or noun_logits.shape[0] != B or nouns.shape != (B,):
        raise DimensionError("verb/noun logits and labels disagree on batch size")
    if B == 0:
        return 0.0
    if k == 1:
        ok = (label_ranks(verb_logits, verbs) == 0) & (label_ranks(noun_logits, nouns) == 0)
        return _percent(ok)
    V, C = verb_logits.shape[1], noun_logits.shape[1]
    if not 1 <= k <= V * C:
        raise ParameterError(f"k={k} outside [1, {V * C}]")
    pair = (log_softmax(verb_logits)[:, :, None] + log_softmax(noun_logits)[:, None, :]).reshape(B, V * C)
    return topk_accuracy(pair, verbs * C + nouns, k)


def mean_accuracy(accuracies) -> float:
    acc = [float(a) for a in accuracies]
    if len(acc) != 6:
        raise ParameterError(f"mean accuracy is defined over six accuracies, got {len(acc)}")
    return sum(acc) / 6.0


@dataclass
class EvalReport:
    verb_top1: float
    noun_top1: float
    action_top1: float
    verb_top5: float
    noun_top5: float
    action_top5: float
    mean_accuracy: float
    count: int
    per_domain: dict[str, dict] = field(default_factory=dict)
    clustering: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def _six(verb_logits, noun_logits, verbs, nouns) -> dict:
    k_v = min(5, verb_logits.shape[1])
    k_n = min(5, noun_logits.shape[1])
    k_a = min(5, verb_logits.shape[1] * noun_logits.shape[1])
    out = {
        "verb_top1": topk_accuracy(verb_logits, verbs, 1),
        "noun_top1": topk_accuracy(noun_logits, nouns, 1),
        "action_top1": action_accuracy(verb_logits, noun_logits, verbs, nouns, 1),
        "verb_top5": topk_accuracy(verb_logits, verbs, k_v),
        "noun_top5": topk_accuracy(noun_logits, nouns, k_n),
        "action_top5": action_accuracy(verb_logits, noun_logits, verbs, nouns, k_a),
    }
    out["mean_accuracy"] = mean_accuracy(out[m] for m in METRICS)
    return out


def report_from_logits(verb_logits, noun_logits, verbs, nouns, domains=None) -> EvalReport:
    verb_logits = np.asarray(verb_logits)
    noun_logits = np.asarray(noun_logits)
    per_domain = {}
    if domains is not None:
        domains = np.asarray(domains)
        for d in np.unique(domains):
            m = domains == d
            per_domain[str(int(d))] = _six(verb_logits[m], noun_logits[m], verbs[m], nouns[m]) | {"count": int(m.sum())}
    return EvalReport(**_six(verb_logits, noun_logits, verbs, nouns), count=len(verbs), per_domain=per_domain)


def predict(model, dataset: Dataset, batch_size: int = 256):
    """Eval-mode fused logits and TRN representations (of the first modality)."""
    verbs, nouns, reps = [], [], []
    first = model.cfg.modalities[0]
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        out = model.forward(
            {m: dataset.features[m][sl] for m in model.cfg.modalities},
            None if dataset.zone is None else dataset.zone[sl],
            training=False,
        )
        verbs.append(out.verb.data)
        nouns.append(out.noun.data)
        reps.append(np.concatenate([out.features[m].data for m in model.cfg.modalities], axis=1)
                    if len(model.cfg.modalities) > 1 else out.features[first].data)
    if not verbs:
        V, C = model.cfg.verb_count, model.cfg.noun_count
        return np.zeros((0, V)), np.zeros((0, C)), np.zeros((0, 0))
    return np.concatenate(verbs), np.concatenate(nouns), np.concatenate(reps)


def check_compatible(model, dataset: Dataset) -> None:
    cfg = model.cfg
    if (cfg.verb_count, cfg.noun_count) != (dataset.verb_count, dataset.noun_count):
        raise DimensionError(
            f"model predicts {cfg.verb_count} verbs / {cfg.noun_count} nouns but the manifest declares "
            f"{dataset.verb_count} / {dataset.noun_count}"
        )
    missing = [m for m in cfg.modalities if m not in dataset.features]
    if missing:
        raise DimensionError(f"manifest lacks modalities required by the model: {', '.join(missing)}")


def evaluate(model, dataset: Dataset) -> EvalReport:
    check_compatible(model, dataset)
    v, n, _ = predict(model, dataset)
    return report_from_logits(v, n, dataset.verbs, dataset.nouns, dataset.domains)


def write_predictions_csv(path, model, dataset: Dataset) -> None:
    v, n, _ = predict(model, dataset)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "domain", "verb", "noun", "pred_verb", "pred_noun"])
        for i, rid in enumerate(dataset.ids):
            w.writerow([rid, int(dataset.domains[i]), int(dataset.verbs[i]), int(dataset.nouns[i]),
                        int(v[i].argmax()), int(n[i].argmax())])


def representation_agreement(reps: np.ndarray, zones: np.ndarray, k: int, seed: int = 0) -> float:
    if len(reps) < k:
        raise InsufficientPointsError(f"need at least K={k} samples for the feature-space analysis, got {len(reps)}")
    zc = fit_kmeans(reps, k, seed=seed)
    diff = reps[:, None, :] - zc.centroids[None, :, :]
    labels = np.einsum("mkd,mkd->mk", diff, diff).argmin(axis=1)
    return clustering_agreement(labels, zones)


def feature_space_report(model, source: Dataset, target: Dataset, source_zones, target_zones,
                         k: int | None = None, seed: int = 0) -> dict:
    """Cluster pre-classifier representations per split and score them against zone labels."""
    k = k or int(max(np.max(source_zones), np.max(target_zones)) + 1)
    _, _, rs = predict(model, source)
    _, _, rt = predict(model, target)
    src = representation_agreement(rs, np.asarray(source_zones), k, seed)
    tgt = representation_agreement(rt, np.asarray(target_zones), k, seed)
    return {"k": k, "source_agreement": src, "target_agreement": tgt, "gap": src - tgt}


def motion_features(model, dataset: Dataset, modality: str | None = None, batch_size: int = 256) -> np.ndarray:
    """Clip-mean AE outputs (the adversary's input) of one branch, eval mode."""
    modality = modality or model.cfg.adversarial_modality
    if modality not in model.cfg.modalities:
        raise ParameterError(f"model has no {modality!r} branch")
    out = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        _, x_m_t = model.branch_features(modality, dataset.features[modality][sl],
                                         None if dataset.zone is None else dataset.zone[sl], training=False)
        out.append(x_m_t.data.mean(axis=1))
    return np.concatenate(out) if out else np.zeros((0, model.cfg.modality_dims[modality]))


def zone_probe_accuracy(feats, zones, k: int, seed: int = 0, epochs: int = 200, lr: float = 0.5,
                        holdout: float = 0.3) -> float:
    """Held-out top-1 accuracy (%) of a fresh softmax-regression probe predicting zones from frozen features."""
    from . import diffkernel as dk

    feats = np.asarray(feats, dtype=np.float64)
    zones = np.asarray(zones, dtype=np.int64)
    if len(feats) != len(zones) or len(feats) < 4:
        raise InsufficientPointsError(f"zone probe needs >= 4 aligned samples, got {len(feats)} / {len(zones)}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(feats))
    n_test = max(1, int(round(holdout * len(feats))))
    test, fit = perm[:n_test], perm[n_test:]
    mu, sd = feats[fit].mean(axis=0), feats[fit].std(axis=0) + 1e-8
    x = (feats - mu) / sd
    W, b = dk.init_linear(rng, x.shape[1], k, "probe")
    state = dk.OptimizerState.for_params([W, b], learning_rate=lr, momentum=0.9, weight_decay=0.0)
    xf = dk.Tensor(x[fit])
    for _ in range(epochs):
        with dk.Tape() as tape:
            loss = dk.cross_entropy(dk.linear(xf, W, b), zones[fit])
        W.zero_grad()
        b.zero_grad()
        dk.backward(tape, loss)
        dk.sgd_step([W, b], [W.grad, b.grad], state)
    return topk_accuracy(x[test] @ W.data + b.data, zones[test], 1)
