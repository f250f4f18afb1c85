"""Finite-difference verification of the analytic gradients of a full model.

The zone term reaches the branch through a gradient-reversal layer, so the
analytic gradient is not the gradient of one scalar. It is, however, the
gradient of ``action + lam * zone`` for adversary parameters and of
``action - lam * zone`` for every other parameter; both are checked against
central differences of the corresponding scalar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkernel as dk
from .model import EgoZAR, ModelConfig
from .train import total_loss

GRADCHECK_CONFIG = dict(
    clips=3,
    zone_dim=8,
    modality_dims={"rgb": 12, "flow": 12},
    hidden_dim=8,
    heads=1,
    zone_count=3,
    verb_count=5,
    noun_count=6,
    dropout=0.5,
)


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst_parameter: str
    worst_index: tuple
    checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    # the floor keeps exactly-zero gradients (biases cancelled by batch norm) from
    # turning central-difference round-off into a large relative error
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(cfg: ModelConfig | None = None, seed: int = 0, eps: float = 1e-5, batch: int = 4,
              lam: float = 1.0, floor: float = 1e-5) -> GradcheckResult:
    cfg = cfg or ModelConfig(**GRADCHECK_CONFIG)
    rng = np.random.default_rng(seed)
    model = EgoZAR(cfg, seed=seed)
    feats = {m: rng.standard_normal((batch, cfg.clips, d)) for m, d in cfg.modality_dims.items()}
    zone = rng.standard_normal((batch, cfg.clips, cfg.zone_dim))
    verbs = rng.integers(cfg.verb_count, size=batch)
    nouns = rng.integers(cfg.noun_count, size=batch)
    zones = rng.integers(cfg.zone_count, size=batch)

    def run(tape=None):
        # a fresh generator per call keeps the dropout mask fixed across evaluations
        drop = np.random.default_rng(seed + 1)
        out = model.forward(feats, zone, training=True, rng=drop)
        return total_loss(out, verbs, nouns, zones, lam)

    with dk.Tape() as tape:
        loss, _ = run()
    model.zero_grad()
    dk.backward(tape, loss)
    adversary = model.adversary_parameter_names()

    def objective(sign: float) -> float:
        _, parts = run()
        action = parts.fused + sum(parts.per_modality.values())
        return action + sign * parts.lam * parts.zone

    worst = (0.0, "", ())
    checked = 0
    for name, p in model.named_parameters():
        sign = 1.0 if name in adversary else -1.0
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = objective(sign)
            flat[i] = orig - eps
            down = objective(sign)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            err = relative_error(float(analytic.reshape(-1)[i]), numeric, floor)
            checked += 1
            if err > worst[0]:
                worst = (err, name, np.unravel_index(i, p.shape))
    return GradcheckResult(worst[0], worst[1], tuple(int(j) for j in worst[2]), checked)
