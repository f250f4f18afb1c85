import json
from dataclasses import replace

import numpy as np
import pytest

from egozar import ezf
from egozar.data import (
    MANIFEST_FORMAT,
    SyntheticConfig,
    as_float32_precision,
    generate_synthetic,
    load_dataset,
    load_ground_truth,
    write_split,
    write_synthetic,
    zone_verb_mutual_information,
)
from egozar.errors import ConfigError, DimensionError, IngestionError, LabelError


def write_manifest(path, records, **kw):
    m = {"format": MANIFEST_FORMAT, "modalities": ["rgb"], "verb_count": 97, "noun_count": 300} | kw
    m["records"] = records
    path.write_text(json.dumps(m))
    return path


def rec(i, file="a.ezf", row=None, verb=0, noun=0, **kw):
    r = {"id": f"r{i}", "features": {"rgb": {"file": file, "row": i if row is None else row}},
         "verb": verb, "noun": noun, "domain": 0, "split": "train"}
    return r | kw


def test_empty_manifest(tmp_path):
    ds = load_dataset(write_manifest(tmp_path / "m.json", []))
    assert len(ds) == 0
    assert ds.features["rgb"].shape[0] == 0


def test_verb_boundary_is_label_error(tmp_path):
    ezf.write_ezf(tmp_path / "a.ezf", np.zeros((1, 2, 3)))
    with pytest.raises(LabelError, match="verb id 97"):
        load_dataset(write_manifest(tmp_path / "m.json", [rec(0, verb=97)]))
    ds = load_dataset(write_manifest(tmp_path / "m.json", [rec(0, verb=96, noun=299)]))
    assert ds.verbs[0] == 96 and ds.nouns[0] == 299


def test_ten_records_over_two_files_match_direct_reads(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((6, 3, 4)).astype(np.float32)
    b = rng.standard_normal((4, 3, 4)).astype(np.float32)
    ezf.write_ezf(tmp_path / "a.ezf", a)
    ezf.write_ezf(tmp_path / "b.ezf", b)
    records = [rec(i, "a.ezf", 5 - i, verb=i % 3) for i in range(6)] + [rec(6 + i, "b.ezf", i) for i in range(4)]
    ds = load_dataset(write_manifest(tmp_path / "m.json", records, clips=3, dims={"rgb": 4}))
    assert len(ds) == 10 and ds.features["rgb"].dtype == np.float64
    # independent reader: parse the raw file bytes by hand
    raw_a = np.frombuffer((tmp_path / "a.ezf").read_bytes()[20:], dtype="<f4").reshape(6, 3, 4)
    raw_b = np.frombuffer((tmp_path / "b.ezf").read_bytes()[20:], dtype="<f4").reshape(4, 3, 4)
    expected = np.concatenate([raw_a[::-1], raw_b])
    np.testing.assert_array_equal(ds.features["rgb"], expected.astype(np.float64))
    assert ds.zone is None
    assert list(ds.verbs[:6]) == [0, 1, 2, 0, 1, 2]


def test_distinct_ingestion_errors(tmp_path):
    ezf.write_ezf(tmp_path / "a.ezf", np.zeros((2, 3, 4)))
    with pytest.raises(IngestionError, match="does not exist"):
        load_dataset(tmp_path / "nope.json")
    with pytest.raises(IngestionError, match="does not exist"):
        load_dataset(write_manifest(tmp_path / "m.json", [rec(0, file="missing.ezf")]))
    with pytest.raises(IngestionError, match="row 5"):
        load_dataset(write_manifest(tmp_path / "m.json", [rec(0, row=5)]))
    with pytest.raises(DimensionError, match="D=4"):
        load_dataset(write_manifest(tmp_path / "m.json", [rec(0)], dims={"rgb": 8}))
    with pytest.raises(DimensionError, match="N=3"):
        load_dataset(write_manifest(tmp_path / "m.json", [rec(0)], clips=5))
    with pytest.raises(IngestionError, match="modality"):
        load_dataset(write_manifest(tmp_path / "m.json", [rec(0)], modalities=["rgb", "flow"]))
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(IngestionError, match="not valid JSON"):
        load_dataset(tmp_path / "bad.json")


def test_split_filter(tmp_path):
    ezf.write_ezf(tmp_path / "a.ezf", np.zeros((3, 1, 2)))
    records = [rec(0), rec(1, split="val"), rec(2, split="test")]
    path = write_manifest(tmp_path / "m.json", records)
    assert load_dataset(path, splits=("train", "val")).ids == ["r0", "r1"]
    assert load_dataset(path).split("test").ids == ["r2"]


def test_synthetic_shape_contract():
    cfg = SyntheticConfig(source_domains=2, target_domains=1, samples_per_domain=300, clips=5, motion_dim=32,
                          zone_dim=16)
    data = generate_synthetic(cfg)
    assert len(data.source) == 600 and len(data.target) == 300
    assert data.source.features["rgb"].shape == (600, 5, 32)
    assert data.source.zone.shape == (600, 5, 16)
    assert data.target.zone.shape == (300, 5, 16)
    assert set(data.target.splits) == {"test"}
    assert data.source.splits.count("val") == 60
    assert sorted(set(data.source.domains)) == [0, 1] and set(data.target.domains) == {2}
    assert data.zone_verb.shape == (4, 12) and np.allclose(data.zone_verb.sum(axis=1), 1)
    assert data.source_zones.shape == (600,) and data.source_zones.max() < 4


def test_synthetic_is_deterministic_and_seed_sensitive():
    a, b = generate_synthetic(SyntheticConfig(seed=3)), generate_synthetic(SyntheticConfig(seed=3))
    np.testing.assert_array_equal(a.source.features["rgb"], b.source.features["rgb"])
    c = generate_synthetic(SyntheticConfig(seed=4))
    assert not np.array_equal(a.source.features["rgb"], c.source.features["rgb"])


def test_zone_features_identify_zones_across_domains():
    data = generate_synthetic(SyntheticConfig(samples_per_domain=200))
    zbar = np.concatenate([data.source.zone, data.target.zone]).mean(axis=1)
    zones = np.concatenate([data.source_zones, data.target_zones])
    centers = np.stack([zbar[zones == z].mean(axis=0) for z in range(4)])
    nearest = ((zbar[:, None, :] - centers[None]) ** 2).sum(-1).argmin(1)
    assert np.mean(nearest == zones) > 0.99


def test_zone_verb_mutual_information():
    peaked = np.full((4, 4), 0.1)
    np.fill_diagonal(peaked, 0.7)
    # closed form: H(V) - H(V|Z) with uniform V marginal
    expected = np.log(4) + (0.7 * np.log(0.7) + 3 * 0.1 * np.log(0.1))
    assert zone_verb_mutual_information(peaked) == pytest.approx(expected, abs=1e-12)
    assert zone_verb_mutual_information(peaked) > 0
    assert zone_verb_mutual_information(np.full((3, 5), 0.2)) == pytest.approx(0.0, abs=1e-15)
    data = generate_synthetic(SyntheticConfig(alpha=0.1))
    assert zone_verb_mutual_information(data.zone_verb) > 0.5
    with pytest.raises(ConfigError):
        zone_verb_mutual_information([[0.5, 0.6]])


def test_empirical_zone_verb_dependence():
    data = generate_synthetic(SyntheticConfig(alpha=0.1, samples_per_domain=1000))
    joint = np.zeros((4, 12))
    np.add.at(joint, (data.source_zones, data.source.verbs), 1.0)
    joint /= joint.sum()
    pz, pv = joint.sum(1), joint.sum(0)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(pz, pv)[nz])))
    assert mi == pytest.approx(zone_verb_mutual_information(data.zone_verb), abs=0.1)


def test_config_validation_names_field():
    with pytest.raises(ConfigError, match="'samples_per_domain'"):
        SyntheticConfig(samples_per_domain=0)
    with pytest.raises(ConfigError, match="'alpha'"):
        SyntheticConfig(alpha=0)
    with pytest.raises(ConfigError, match="bogus"):
        SyntheticConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="'appearance_rank'"):
        SyntheticConfig(appearance_rank=100, motion_dim=32)
    cfg = SyntheticConfig.from_dict(SyntheticConfig(beta=3.0).to_dict())
    assert cfg.beta == 3.0


def test_write_synthetic_round_trip(tmp_path):
    data = generate_synthetic(SyntheticConfig(samples_per_domain=20, modalities=("rgb", "flow")))
    paths = write_synthetic(data, tmp_path / "syn")
    src = load_dataset(paths["source"])
    as_float32_precision(data)
    np.testing.assert_array_equal(src.features["flow"], data.source.features["flow"])
    np.testing.assert_array_equal(src.zone, data.source.zone)
    assert src.splits == data.source.splits and src.ids == data.source.ids
    truth = load_ground_truth(paths["ground_truth"])
    assert [truth[i] for i in data.target.ids] == list(data.target_zones)
    with pytest.raises(IngestionError):
        load_ground_truth(tmp_path / "none.json")


def test_write_split_prefix(tmp_path):
    data = generate_synthetic(SyntheticConfig(samples_per_domain=5))
    path = write_split(tmp_path, data.target, prefix="t_")
    assert path.name == "t_manifest.json" and (tmp_path / "t_rgb.ezf").exists()
    assert len(load_dataset(path)) == 5


def test_beta_zero_has_no_appearance_shift():
    cfg = SyntheticConfig(beta=0.0, noise=0.0, clip_jitter=0.0, samples_per_domain=50)
    data = generate_synthetic(cfg)
    # without appearance or noise, motion features depend only on the action
    x = np.concatenate([data.source.features["rgb"], data.target.features["rgb"]])[:, 0]
    keys = np.concatenate([data.source.verbs * 100 + data.source.nouns, data.target.verbs * 100 + data.target.nouns])
    for k in np.unique(keys):
        rows = x[keys == k]
        np.testing.assert_allclose(rows, np.broadcast_to(rows[0], rows.shape), atol=1e-12)


def test_replace_keeps_validation():
    with pytest.raises(ConfigError):
        replace(SyntheticConfig(), zones=0)
