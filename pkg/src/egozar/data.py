"""Dataset manifests, feature ingestion and the synthetic co-occurrence benchmark.

A manifest is a JSON document::

    {
      "format": "egozar-manifest/1",
      "modalities": ["rgb"],
      "verb_count": 12, "noun_count": 10,
      "clips": 5, "dims": {"rgb": 32, "zone": 16},
      "records": [
        {"id": "d0-00000",
         "features": {"rgb": {"file": "rgb.ezf", "row": 0}},
         "zone": {"file": "zone.ezf", "row": 0},
         "verb": 3, "noun": 1, "domain": 0, "split": "train"}
      ]
    }

File paths are relative to the manifest's directory. ``clips`` and ``dims``
are optional declarations; when present every referenced file must agree.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ezf
from .errors import ConfigError, DimensionError, IngestionError, LabelError

MANIFEST_FORMAT = "egozar-manifest/1"


@dataclass
class Dataset:
    ids: list[str]
    features: dict[str, np.ndarray]
    zone: np.ndarray | None
    verbs: np.ndarray
    nouns: np.ndarray
    domains: np.ndarray
    splits: list[str]
    verb_count: int
    noun_count: int

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def modalities(self) -> list[str]:
        return list(self.features)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            [self.ids[i] for i in idx],
            {m: f[idx] for m, f in self.features.items()},
            None if self.zone is None else self.zone[idx],
            self.verbs[idx],
            self.nouns[idx],
            self.domains[idx],
            [self.splits[i] for i in idx],
            self.verb_count,
            self.noun_count,
        )

    def split(self, *tags: str) -> "Dataset":
        return self.subset([i for i, s in enumerate(self.splits) if s in tags])


def _ref(record: dict, key_path: str, ref) -> tuple[str, int]:
    if not isinstance(ref, dict) or "file" not in ref or "row" not in ref:
        raise IngestionError(f"record {record.get('id')!r}: malformed {key_path} reference {ref!r}")
    return ref["file"], int(ref["row"])


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"manifest {path} does not exist")
    with open(path) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise IngestionError(f"manifest {path} is not valid JSON: {e}") from None
    for key in ("modalities", "verb_count", "noun_count", "records"):
        if key not in manifest:
            raise IngestionError(f"manifest {path} lacks required key '{key}'")
    return manifest


def load_dataset(path, splits: tuple[str, ...] | None = None) -> Dataset:
    """Materialise every referenced feature row, widened to float64."""
    path = Path(path)
    manifest = read_manifest(path)
    root = path.parent
    modalities = list(manifest["modalities"])
    V, C = int(manifest["verb_count"]), int(manifest["noun_count"])
    declared_n = manifest.get("clips")
    dims = manifest.get("dims", {})
    records = [r for r in manifest["records"] if splits is None or r.get("split", "train") in splits]

    cache: dict[str, np.ndarray] = {}

    def row(record, key_path, ref, expected_dim):
        fname, r = _ref(record, key_path, ref)
        fpath = root / fname
        if fname not in cache:
            if not fpath.exists():
                raise IngestionError(f"record {record.get('id')!r}: feature file {fpath} does not exist")
            cache[fname] = ezf.read_ezf(fpath)
        block = cache[fname]
        if not 0 <= r < block.shape[0]:
            raise IngestionError(f"record {record.get('id')!r}: row {r} outside {fpath} with {block.shape[0]} records")
        if declared_n is not None and block.shape[1] != declared_n:
            raise DimensionError(f"record {record.get('id')!r}: {fpath} has N={block.shape[1]}, manifest declares {declared_n}")
        if expected_dim is not None and block.shape[2] != expected_dim:
            raise DimensionError(f"record {record.get('id')!r}: {fpath} has D={block.shape[2]}, manifest declares {expected_dim}")
        return block[r]

    feats = {m: [] for m in modalities}
    zone, verbs, nouns, domains, ids, tags = [], [], [], [], [], []
    has_zone = None
    for rec in records:
        rid = rec.get("id")
        v, n = int(rec["verb"]), int(rec["noun"])
        if not 0 <= v < V:
            raise LabelError(f"record {rid!r}: verb id {v} outside [0, {V})")
        if not 0 <= n < C:
            raise LabelError(f"record {rid!r}: noun id {n} outside [0, {C})")
        for m in modalities:
            ref = rec.get("features", {}).get(m)
            if ref is None:
                raise IngestionError(f"record {rid!r}: missing features for modality {m!r}")
            feats[m].append(row(rec, f"features.{m}", ref, dims.get(m)))
        z_ref = rec.get("zone")
        if has_zone is None:
            has_zone = z_ref is not None
        if (z_ref is not None) != has_zone:
            raise IngestionError(f"record {rid!r}: zone features must be present on all records or none")
        if z_ref is not None:
            zone.append(row(rec, "zone", z_ref, dims.get("zone")))
        verbs.append(v)
        nouns.append(n)
        domains.append(int(rec.get("domain", 0)))
        ids.append(str(rid))
        tags.append(rec.get("split", "train"))

    shapes = {m: np.stack(f).shape for m, f in feats.items() if f}
    if zone:
        n_clips = {s[1] for s in shapes.values()} | {zone[0].shape[0]}
        if len(n_clips) > 1:
            raise DimensionError(f"{path}: clip counts differ between streams: {sorted(n_clips)}")

    def stack(rows, dim_key):
        if rows:
            return np.stack(rows).astype(np.float64)
        n = declared_n or 0
        return np.zeros((0, n, dims.get(dim_key, 0)))

    return Dataset(
        ids,
        {m: stack(feats[m], m) for m in modalities},
        stack(zone, "zone") if (zone or has_zone is None) else None,
        np.asarray(verbs, dtype=np.int64),
        np.asarray(nouns, dtype=np.int64),
        np.asarray(domains, dtype=np.int64),
        tags,
        V,
        C,
    )


def write_split(directory, dataset: Dataset, prefix: str = "") -> Path:
    """Write ``dataset`` as EZF1 files plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    N = None
    dims = {}
    for m, f in dataset.features.items():
        ezf.write_ezf(directory / f"{prefix}{m}.ezf", f)
        N, dims[m] = f.shape[1], f.shape[2]
    if dataset.zone is not None:
        ezf.write_ezf(directory / f"{prefix}zone.ezf", dataset.zone)
        dims["zone"] = dataset.zone.shape[2]
    records = []
    for i, rid in enumerate(dataset.ids):
        rec = {
            "id": rid,
            "features": {m: {"file": f"{prefix}{m}.ezf", "row": i} for m in dataset.features},
            "verb": int(dataset.verbs[i]),
            "noun": int(dataset.nouns[i]),
            "domain": int(dataset.domains[i]),
            "split": dataset.splits[i],
        }
        if dataset.zone is not None:
            rec["zone"] = {"file": f"{prefix}zone.ezf", "row": i}
        records.append(rec)
    manifest = {
        "format": MANIFEST_FORMAT,
        "modalities": dataset.modalities,
        "verb_count": dataset.verb_count,
        "noun_count": dataset.noun_count,
        "clips": N,
        "dims": dims,
        "records": records,
    }
    path = directory / f"{prefix}manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return path


# ---------------------------------------------------------------- synthetic data


@dataclass
class SyntheticConfig:
    """Knobs of the synthetic zone/action co-occurrence benchmark.

    ``alpha`` is the Dirichlet concentration of the zone-conditional verb and
    verb-conditional noun distributions (smaller is more peaked). ``beta`` is
    the norm of the domain-specific zone appearance added to motion features,
    relative to the unit-norm action embedding.
    """

    zones: int = 4
    verbs: int = 12
    nouns: int = 10
    source_domains: int = 2
    target_domains: int = 1
    samples_per_domain: int = 300
    clips: int = 5
    motion_dim: int = 32
    zone_dim: int = 16
    alpha: float = 0.3
    beta: float = 2.0
    noise: float = 0.8
    zone_noise: float = 0.1
    clip_jitter: float = 0.3
    modalities: tuple[str, ...] = ("rgb",)
    # appearance strength of non-RGB modalities, as a fraction of beta
    secondary_appearance: float = 0.2
    # dimension of the subspace all domains draw zone appearance from; 0 = unrestricted
    appearance_rank: int = 6
    # environments (e.g. kitchens) per domain, each with its own zone appearance
    environments_per_domain: int = 1
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.validate()

    def validate(self) -> None:
        for key in ("zones", "verbs", "nouns", "source_domains", "target_domains", "samples_per_domain",
                    "clips", "motion_dim", "zone_dim", "environments_per_domain"):
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"synthetic config field '{key}' must be an integer >= 1, got {value!r}")
        if not self.alpha > 0:
            raise ConfigError(f"synthetic config field 'alpha' must be > 0, got {self.alpha!r}")
        for key in ("beta", "noise", "zone_noise", "clip_jitter", "secondary_appearance"):
            if not getattr(self, key) >= 0:
                raise ConfigError(f"synthetic config field '{key}' must be >= 0, got {getattr(self, key)!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"synthetic config field 'val_fraction' must lie in [0, 1), got {self.val_fraction!r}")
        if not self.modalities:
            raise ConfigError("synthetic config field 'modalities' must not be empty")
        if not isinstance(self.appearance_rank, int) or not 0 <= self.appearance_rank <= self.motion_dim:
            raise ConfigError(
                f"synthetic config field 'appearance_rank' must be an integer in [0, motion_dim], got {self.appearance_rank!r}"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic config field(s): {', '.join(sorted(unknown))}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d


def _unit(rng, *shape) -> np.ndarray:
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass
class SyntheticData:
    source: Dataset
    target: Dataset
    source_zones: np.ndarray
    target_zones: np.ndarray
    zone_verb: np.ndarray
    verb_noun: np.ndarray
    config: SyntheticConfig = field(repr=False, default=None)


def _categorical(rng, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs`` by inverse-CDF sampling."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=1), probs.shape[1] - 1)


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticData:
    """Sample a source/target benchmark in memory.

    Zone features are a domain-agnostic zone embedding plus small noise.
    Motion features are an action embedding plus ``beta`` times a zone
    appearance vector, plus noise; every clip adds its own jitter to the
    sample's base vector. Appearance vectors are drawn independently for each
    environment of each domain, so no target appearance is ever seen in
    training.
    """
    rng = np.random.default_rng(cfg.seed)
    Z, V, C, N, Dz, E = cfg.zones, cfg.verbs, cfg.nouns, cfg.clips, cfg.zone_dim, cfg.environments_per_domain
    zone_emb = _unit(rng, Z, Dz)
    zone_verb = rng.dirichlet(np.full(V, cfg.alpha), size=Z)
    verb_noun = rng.dirichlet(np.full(C, cfg.alpha), size=V)
    verb_emb = {m: _unit(rng, V, cfg.motion_dim) for m in cfg.modalities}
    noun_emb = {m: _unit(rng, C, cfg.motion_dim) for m in cfg.modalities}
    n_domains = cfg.source_domains + cfg.target_domains
    appearance = {}
    for m in cfg.modalities:
        if cfg.appearance_rank:
            basis = np.linalg.qr(rng.standard_normal((cfg.motion_dim, cfg.appearance_rank)))[0]
            appearance[m] = _unit(rng, n_domains, E, Z, cfg.appearance_rank) @ basis.T
        else:
            appearance[m] = _unit(rng, n_domains, E, Z, cfg.motion_dim)

    def domain_block(d):
        M = cfg.samples_per_domain
        z = rng.integers(Z, size=M)
        env = rng.integers(E, size=M)
        v = _categorical(rng, zone_verb[z])
        n = _categorical(rng, verb_noun[v])
        base_z = zone_emb[z] + cfg.zone_noise / np.sqrt(Dz) * rng.standard_normal((M, Dz))
        x_z = base_z[:, None, :] + cfg.clip_jitter * cfg.zone_noise / np.sqrt(Dz) * rng.standard_normal((M, N, Dz))
        feats = {}
        for m in cfg.modalities:
            D = cfg.motion_dim
            strength = cfg.beta if m == cfg.modalities[0] else cfg.beta * cfg.secondary_appearance
            action = (verb_emb[m][v] + noun_emb[m][n]) / np.sqrt(2.0)
            base = action + strength * appearance[m][d, env, z] + cfg.noise / np.sqrt(D) * rng.standard_normal((M, D))
            feats[m] = base[:, None, :] + cfg.clip_jitter / np.sqrt(D) * rng.standard_normal((M, N, D))
        return z, v, n, x_z, feats

    def build(domain_ids, tag_val):
        parts = [domain_block(d) for d in domain_ids]
        z = np.concatenate([p[0] for p in parts])
        ids, tags = [], []
        for d, p in zip(domain_ids, parts):
            for i in range(len(p[0])):
                ids.append(f"d{d}-{i:05d}")
        tags = ["train"] * len(ids)
        if tag_val and cfg.val_fraction > 0:
            order = rng.permutation(len(ids))
            for i in order[: int(round(cfg.val_fraction * len(ids)))]:
                tags[i] = "val"
        ds = Dataset(
            ids,
            {m: np.concatenate([p[4][m] for p in parts]) for m in cfg.modalities},
            np.concatenate([p[3] for p in parts]),
            np.concatenate([p[1] for p in parts]),
            np.concatenate([p[2] for p in parts]),
            np.concatenate([np.full(len(p[0]), d) for d, p in zip(domain_ids, parts)]),
            tags,
            V,
            C,
        )
        return ds, z

    source, sz = build(list(range(cfg.source_domains)), tag_val=True)
    target, tz = build(list(range(cfg.source_domains, n_domains)), tag_val=False)
    target.splits = ["test"] * len(target)
    return SyntheticData(source, target, sz, tz, zone_verb, verb_noun, cfg)


def _roundtrip32(ds: Dataset) -> Dataset:
    ds.features = {m: f.astype(np.float32).astype(np.float64) for m, f in ds.features.items()}
    if ds.zone is not None:
        ds.zone = ds.zone.astype(np.float32).astype(np.float64)
    return ds


def write_synthetic(data: SyntheticData, out_dir) -> dict[str, Path]:
    """Persist a generated benchmark as ``source/``, ``target/`` and ``ground_truth.json``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IngestionError(f"cannot create output directory {out}: {e}") from None
    src = write_split(out / "source", data.source)
    tgt = write_split(out / "target", data.target)
    truth = {
        "zones": {rid: int(z) for rid, z in zip(data.source.ids, data.source_zones)}
        | {rid: int(z) for rid, z in zip(data.target.ids, data.target_zones)},
        "zone_verb": data.zone_verb.round(12).tolist(),
        "verb_noun": data.verb_noun.round(12).tolist(),
        "config": data.config.to_dict() if data.config is not None else None,
    }
    gt = out / "ground_truth.json"
    with open(gt, "w") as f:
        json.dump(truth, f, indent=1, sort_keys=True)
        f.write("\n")
    return {"source": src, "target": tgt, "ground_truth": gt}


def load_ground_truth(path) -> dict[str, int]:
    if not os.path.exists(path):
        raise IngestionError(f"ground-truth file {path} does not exist")
    with open(path) as f:
        return {k: int(v) for k, v in json.load(f)["zones"].items()}


def zone_verb_mutual_information(zone_verb, zone_prior=None) -> float:
    """I(Z; V) in nats for p(v|z) rows and a zone prior (uniform by default)."""
    cond = np.asarray(zone_verb, dtype=np.float64)
    if cond.ndim != 2 or np.any(cond < 0) or not np.allclose(cond.sum(axis=1), 1.0):
        raise ConfigError("zone_verb must be a row-stochastic (zones x verbs) matrix")
    prior = np.full(cond.shape[0], 1.0 / cond.shape[0]) if zone_prior is None else np.asarray(zone_prior, float)
    joint = prior[:, None] * cond
    pv = joint.sum(axis=0)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(prior, pv)[nz])))


def as_float32_precision(data: SyntheticData) -> SyntheticData:
    """Round features to what an EZF1 round trip would yield (in place)."""
    _roundtrip32(data.source)
    _roundtrip32(data.target)
    return data
