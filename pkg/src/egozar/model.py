"""The zone-aware recognition network.

Each modality gets its own branch::

    x_z --ZE--> x~_z --P_z--+
                            +--> [2N x D_h] -> flatten -> linear -> BN -> ReLU -> dropout -> x
    x_m --AE(x_z)--> x~_m --P_m--+
                                                                   x -> verb head, noun head

ZE is self-attention over the clips of the zone stream; AE is cross-attention
whose queries come from the zone stream and whose keys/values come from the
modality's own features. Both add a residual and a residual linear map. An
adversarial zone classifier reads the clip-mean of the RGB branch's AE output
through a gradient-reversal layer. Branch logits are averaged across
modalities.

With ``use_zones=False`` the branch degenerates to the plain motion-only
baseline (no ZE/AE, TRN over the N projected motion clips only).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffkernel as dk
from . import ezf
from .diffkernel import BatchNorm, Tensor
from .errors import ConfigError, ContractError, DimensionError, FormatError, IngestionError


@dataclass
class ModelConfig:
    clips: int = 5
    zone_dim: int = 16
    modality_dims: dict[str, int] = field(default_factory=lambda: {"rgb": 32})
    hidden_dim: int | None = None
    heads: int = 1
    attention_dim: int | None = None
    dropout: float = 0.5
    verb_count: int = 8
    noun_count: int = 6
    zone_count: int = 4
    adv_hidden: int = 256
    use_zones: bool = True
    adversarial_modality: str = "rgb"
    # "zone": divide AE scores by sqrt(D_z / H); "attention": by sqrt(A / H)
    ae_scale: str = "zone"

    def __post_init__(self):
        self.modality_dims = dict(self.modality_dims)
        self.validate()

    @property
    def modalities(self) -> list[str]:
        return list(self.modality_dims)

    @property
    def d_h(self) -> int:
        if self.hidden_dim is not None:
            return self.hidden_dim
        return min([self.zone_dim, *self.modality_dims.values()])

    @property
    def d_a(self) -> int:
        return self.attention_dim if self.attention_dim is not None else self.zone_dim

    @property
    def has_adversary(self) -> bool:
        return self.use_zones and self.adversarial_modality in self.modality_dims

    def validate(self) -> None:
        positive = {
            "clips": self.clips,
            "zone_dim": self.zone_dim,
            "heads": self.heads,
            "verb_count": self.verb_count,
            "noun_count": self.noun_count,
            "zone_count": self.zone_count,
            "adv_hidden": self.adv_hidden,
            "hidden_dim": self.d_h,
            "attention_dim": self.d_a,
        }
        for key, value in positive.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"model config field '{key}' must be a positive integer, got {value!r}")
        if not self.modality_dims:
            raise ConfigError("model config field 'modality_dims' must name at least one modality")
        for mod, dim in self.modality_dims.items():
            if not isinstance(dim, int) or dim < 1:
                raise ConfigError(f"model config field 'modality_dims.{mod}' must be a positive integer, got {dim!r}")
            if dim % self.heads:
                raise ConfigError(f"model config field 'modality_dims.{mod}'={dim} not divisible by heads={self.heads}")
        if self.zone_dim % self.heads or self.d_a % self.heads:
            raise ConfigError(f"model config fields 'zone_dim'/'attention_dim' must be divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"model config field 'dropout' must lie in [0, 1), got {self.dropout}")
        if self.ae_scale not in ("zone", "attention"):
            raise ConfigError(f"model config field 'ae_scale' must be 'zone' or 'attention', got {self.ae_scale!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


class _Linear:
    def __init__(self, rng, d_in, d_out, name):
        self.W, self.b = dk.init_linear(rng, d_in, d_out, name)

    def __call__(self, x: Tensor) -> Tensor:
        return dk.linear(x, self.W, self.b)

    def tensors(self):
        return [self.W, self.b]


class BranchParams:
    """All learnable tensors of one modality branch."""

    def __init__(self, cfg: ModelConfig, modality: str, rng: np.random.Generator):
        self.modality = modality
        Dz, Dm, Dh, A, N = cfg.zone_dim, cfg.modality_dims[modality], cfg.d_h, cfg.d_a, cfg.clips
        p = modality
        self.layers: dict[str, _Linear] = {}
        self.norms: dict[str, BatchNorm] = {}
        if cfg.use_zones:
            for key, (i, o) in {
                "ze.q": (Dz, Dz),
                "ze.k": (Dz, Dz),
                "ze.v": (Dz, Dz),
                "ze.f": (Dz, Dz),
                "ae.q": (Dz, A),
                "ae.k": (Dm, A),
                "ae.v": (Dm, Dm),
                "ae.f": (Dm, Dm),
                "proj_z": (Dz, Dh),
            }.items():
                self.layers[key] = _Linear(rng, i, o, f"{p}.{key}")
        self.layers["proj_m"] = _Linear(rng, Dm, Dh, f"{p}.proj_m")
        streams = 2 * N if cfg.use_zones else N
        self.layers["trn.fc"] = _Linear(rng, streams * Dh, Dm, f"{p}.trn.fc")
        self.norms["trn.bn"] = BatchNorm(Dm, name=f"{p}.trn.bn")
        self.layers["verb"] = _Linear(rng, Dm, cfg.verb_count, f"{p}.verb")
        self.layers["noun"] = _Linear(rng, Dm, cfg.noun_count, f"{p}.noun")

    def __getitem__(self, key: str) -> _Linear:
        return self.layers[key]

    def named_tensors(self):
        for layer in self.layers.values():
            for t in layer.tensors():
                yield t.name, t
        for bn in self.norms.values():
            yield bn.gamma.name, bn.gamma
            yield bn.beta.name, bn.beta


class AdversarialHead:
    """Two-layer zone classifier: linear -> BN -> ReLU -> linear."""

    def __init__(self, d_in: int, zone_count: int, rng: np.random.Generator, hidden: int = 256, name: str = "adv"):
        self.fc1 = _Linear(rng, d_in, hidden, f"{name}.fc1")
        self.bn = BatchNorm(hidden, name=f"{name}.bn")
        self.fc2 = _Linear(rng, hidden, zone_count, f"{name}.fc2")

    def named_tensors(self):
        for t in (*self.fc1.tensors(), self.bn.gamma, self.bn.beta, *self.fc2.tensors()):
            yield t.name, t


def _batched(x: Tensor, ndim: int = 3) -> tuple[Tensor, bool]:
    if x.data.ndim == ndim - 1:
        return dk.reshape(x, (1, *x.shape)), True
    if x.data.ndim != ndim:
        raise DimensionError(f"expected a {ndim - 1}-D or {ndim}-D block, got shape {x.shape}")
    return x, False


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return dk.reshape(x, x.shape[1:]) if squeeze else x


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, temperature: float) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / temperature) v per head over ``(B, N, .)`` blocks.

    Returns the attended values ``(B, N, Dv)`` and the weights ``(B, H, N, N)``.
    """
    B, N, A = q.shape
    Dv = v.shape[-1]
    if heads == 1:
        scores = dk.scale(dk.matmul(q, dk.transpose(k, (0, 2, 1))), 1.0 / temperature)
        w = dk.softmax(scores, axis=-1)
        return dk.matmul(w, v), dk.reshape(w, (B, 1, N, N))

    def split(t, d):
        return dk.transpose(dk.reshape(t, (B, N, heads, d // heads)), (0, 2, 1, 3))

    qh, kh, vh = split(q, A), split(k, A), split(v, Dv)
    scores = dk.scale(dk.matmul(qh, dk.transpose(kh, (0, 1, 3, 2))), 1.0 / temperature)
    w = dk.softmax(scores, axis=-1)
    out = dk.transpose(dk.matmul(w, vh), (0, 2, 1, 3))
    return dk.reshape(out, (B, N, Dv)), w


def zone_extract(x_z: Tensor, params: BranchParams, cfg: ModelConfig, return_attention: bool = False):
    """Zone self-attention with residual: o = x + attn(x) V(x), x~ = o + F(o)."""
    x, squeeze = _batched(x_z)
    if x.shape[1:] != (cfg.clips, cfg.zone_dim):
        raise DimensionError(f"zone features of shape {x_z.shape} do not match (N={cfg.clips}, D_z={cfg.zone_dim})")
    temperature = math.sqrt(cfg.zone_dim / cfg.heads)
    att, w = attention(params["ze.q"](x), params["ze.k"](x), params["ze.v"](x), cfg.heads, temperature)
    o = dk.add(x, att)
    out = _unbatched(dk.add(o, params["ze.f"](o)), squeeze)
    return (out, w) if return_attention else out


def action_extract(x_m: Tensor, x_z: Tensor, params: BranchParams, cfg: ModelConfig, return_attention: bool = False):
    """Zone-queried cross-attention over the modality's clips."""
    xm, squeeze = _batched(x_m)
    xz, _ = _batched(x_z)
    if xm.shape[:2] != xz.shape[:2]:
        raise ContractError(f"motion stream {x_m.shape} and zone stream {x_z.shape} disagree on batch/clip count")
    Dm = cfg.modality_dims[params.modality]
    if xm.shape[2] != Dm or xz.shape[2] != cfg.zone_dim:
        raise DimensionError(f"AE inputs {x_m.shape} / {x_z.shape} do not match D_m={Dm}, D_z={cfg.zone_dim}")
    base = cfg.zone_dim if cfg.ae_scale == "zone" else cfg.d_a
    temperature = math.sqrt(base / cfg.heads)
    att, w = attention(params["ae.q"](xz), params["ae.k"](xm), params["ae.v"](xm), cfg.heads, temperature)
    o = dk.add(xm, att)
    out = _unbatched(dk.add(o, params["ae.f"](o)), squeeze)
    return (out, w) if return_attention else out


def trn_fuse(x_z_t: Tensor | None, x_m_t: Tensor, params: BranchParams, cfg: ModelConfig, training: bool, rng=None) -> Tensor:
    """Project both streams to D_h, stack along clips, flatten, then linear -> BN -> ReLU -> dropout."""
    xm, squeeze = _batched(x_m_t)
    parts = []
    if x_z_t is not None:
        xz, _ = _batched(x_z_t)
        if xz.shape[:2] != xm.shape[:2]:
            raise DimensionError(f"TRN streams {x_z_t.shape} and {x_m_t.shape} disagree on batch/clip count")
        parts.append(params["proj_z"](xz))
    parts.append(params["proj_m"](xm))
    stacked = dk.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    B = stacked.shape[0]
    flat = dk.reshape(stacked, (B, stacked.shape[1] * stacked.shape[2]))
    if flat.shape[1] != params["trn.fc"].W.shape[0]:
        raise DimensionError(f"TRN input width {flat.shape[1]} does not match weight {params['trn.fc'].W.shape}")
    h = dk.batch_norm(params["trn.fc"](flat), params.norms["trn.bn"], training)
    h = dk.dropout(dk.relu(h), cfg.dropout, training, rng)
    return _unbatched(h, squeeze)


def classify(x: Tensor, params: BranchParams) -> tuple[Tensor, Tensor]:
    return params["verb"](x), params["noun"](x)


def adversarial_zone_logits(x_m_t: Tensor, head: AdversarialHead, training: bool) -> Tensor:
    """Zone logits from the clip-mean of the AE output, behind gradient reversal."""
    xm, _ = _batched(x_m_t)
    pooled = dk.gradient_reversal(dk.mean(xm, axis=1), 1.0)
    h = dk.relu(dk.batch_norm(head.fc1(pooled), head.bn, training))
    return head.fc2(h)


@dataclass
class ForwardOutput:
    verb: Tensor
    noun: Tensor
    per_modality: dict[str, tuple[Tensor, Tensor]]
    zone_logits: Tensor | None
    features: dict[str, Tensor]
    motion: dict[str, Tensor]


def fuse_logits(logits: list[Tensor]) -> Tensor:
    total = logits[0]
    for t in logits[1:]:
        total = dk.add(total, t)
    return total if len(logits) == 1 else dk.scale(total, 1.0 / len(logits))


class EgoZAR:
    """One branch per modality plus the optional adversarial zone head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.branches = {m: BranchParams(cfg, m, rng) for m in cfg.modalities}
        self.adversary = None
        if cfg.has_adversary:
            self.adversary = AdversarialHead(
                cfg.modality_dims[cfg.adversarial_modality], cfg.zone_count, rng, cfg.adv_hidden
            )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for branch in self.branches.values():
            out.extend(branch.named_tensors())
        if self.adversary is not None:
            out.extend(self.adversary.named_tensors())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def adversary_parameter_names(self) -> set[str]:
        return set() if self.adversary is None else {n for n, _ in self.adversary.named_tensors()}

    def _norms(self) -> dict[str, BatchNorm]:
        norms = {}
        for branch in self.branches.values():
            for bn in branch.norms.values():
                norms[bn.gamma.name.rsplit(".", 1)[0]] = bn
        if self.adversary is not None:
            norms["adv.bn"] = self.adversary.bn
        return norms

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, bn in self._norms().items():
            out[f"{prefix}.running_mean"] = bn.running_mean
            out[f"{prefix}.running_var"] = bn.running_var
        return out

    def set_buffers(self, values: dict[str, np.ndarray]) -> None:
        for prefix, bn in self._norms().items():
            bn.running_mean = np.array(values[f"{prefix}.running_mean"], dtype=np.float64)
            bn.running_var = np.array(values[f"{prefix}.running_var"], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def branch_features(self, modality: str, x_m, x_z, training: bool, rng=None) -> tuple[Tensor, Tensor]:
        """Return the TRN representation and the AE output of one branch."""
        params = self.branches[modality]
        x_m = x_m if isinstance(x_m, Tensor) else Tensor(x_m)
        if not self.cfg.use_zones:
            return trn_fuse(None, x_m, params, self.cfg, training, rng), x_m
        x_z = x_z if isinstance(x_z, Tensor) else Tensor(x_z)
        x_z_t = zone_extract(x_z, params, self.cfg)
        x_m_t = action_extract(x_m, x_z, params, self.cfg)
        return trn_fuse(x_z_t, x_m_t, params, self.cfg, training, rng), x_m_t

    def forward(self, features: dict[str, np.ndarray], zone: np.ndarray | None, training: bool = False, rng=None) -> ForwardOutput:
        return forward_multimodal(self, features, zone, training, rng)

    __call__ = forward


def forward_multimodal(model: EgoZAR, features: dict, zone, training: bool = False, rng=None) -> ForwardOutput:
    """Run every branch, average their logits, and add zone logits for the RGB branch."""
    cfg = model.cfg
    missing = [m for m in cfg.modalities if m not in features]
    if missing:
        raise IngestionError(f"sample is missing features for modalities: {', '.join(missing)}")
    if cfg.use_zones and zone is None:
        raise IngestionError("the zone-aware model needs zone features")
    per_modality, reps, motion = {}, {}, {}
    zone_logits = None
    for mod in cfg.modalities:
        x, x_m_t = model.branch_features(mod, features[mod], zone, training, rng)
        reps[mod], motion[mod] = x, x_m_t
        per_modality[mod] = classify(x, model.branches[mod])
        if model.adversary is not None and mod == cfg.adversarial_modality:
            zone_logits = adversarial_zone_logits(x_m_t, model.adversary, training)
    verb = fuse_logits([v for v, _ in per_modality.values()])
    noun = fuse_logits([n for _, n in per_modality.values()])
    return ForwardOutput(verb, noun, per_modality, zone_logits, reps, motion)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "egozar-checkpoint/1"


def _as_block(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 1:
        return arr[None, None, :]
    if arr.ndim == 2:
        return arr[None, :, :]
    return arr.reshape(1, 1, -1)


def _write_entries(directory: Path, prefix: str, arrays: dict[str, np.ndarray]) -> dict:
    entries = {}
    for name, arr in arrays.items():
        fname = f"{prefix}{name}.ezf"
        ezf.write_ezf(directory / fname, _as_block(arr))
        entries[name] = {"file": fname, "shape": list(np.shape(arr))}
    return entries


def _read_entries(directory: Path, entries: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, e in entries.items():
        block = ezf.read_ezf(directory / e["file"])
        out[name] = block.reshape(e["shape"]).astype(np.float64)
    return out


def save_checkpoint(model: EgoZAR, directory, optimizer=None, extra: dict | None = None) -> None:
    """Write one EZF1 file per tensor plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = {n: t.data for n, t in model.named_parameters()}
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        # the JSON is key-sorted, so modality order is stored separately
        "modalities": model.cfg.modalities,
        "parameters": _write_entries(directory, "", params),
        "buffers": _write_entries(directory, "", model.buffers()),
    }
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        manifest["optimizer"] = {
            "learning_rate": optimizer.learning_rate,
            "momentum": optimizer.momentum,
            "weight_decay": optimizer.weight_decay,
            "velocity": _write_entries(directory, "velocity.", dict(zip(names, optimizer.velocity))),
        }
    if extra:
        manifest["extra"] = extra
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(directory) -> EgoZAR:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not os.path.exists(path):
        raise IngestionError(f"{directory}: no checkpoint manifest found")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: unexpected checkpoint format {manifest.get('format')!r}")
    cfg = dict(manifest["config"])
    order = manifest.get("modalities", list(cfg["modality_dims"]))
    cfg["modality_dims"] = {m: cfg["modality_dims"][m] for m in order}
    model = EgoZAR(ModelConfig.from_dict(cfg))
    values = _read_entries(directory, manifest["parameters"])
    for name, t in model.named_parameters():
        if name not in values:
            raise FormatError(f"{path}: parameter {name!r} missing")
        if values[name].shape != t.shape:
            raise FormatError(f"{path}: parameter {name!r} has shape {values[name].shape}, expected {t.shape}")
        t.data = values[name]
        t.zero_grad()
    model.set_buffers(_read_entries(directory, manifest["buffers"]))
    return model


def checkpoint_extra(directory) -> dict:
    with open(Path(directory) / "manifest.json") as f:
        return json.load(f).get("extra", {})
