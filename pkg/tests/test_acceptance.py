"""Acceptance suite: one test per criterion, each reporting a pass/fail line.

Run ``pytest tests/test_acceptance.py -v``; the lines are collected into an
"acceptance criteria" section of the terminal summary.
"""

import itertools
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from egozar import diffkernel as dk
from egozar import ezf
from egozar.cli import main
from egozar.data import SyntheticConfig, as_float32_precision, generate_synthetic
from egozar.errors import CorruptionError, FormatError
from egozar.evaluation import METRICS, action_accuracy, evaluate, mean_accuracy, topk_accuracy
from egozar.experiments import BENCHMARK_DATA, model_config_for, run_benchmark, run_k_ablation, summarize
from egozar.gradcheck import GRADCHECK_CONFIG, gradcheck
from egozar.model import EgoZAR, ModelConfig, action_extract, zone_extract
from egozar.train import TrainConfig, train
from egozar.zones import fit_kmeans, inertia, mean_over_clips

T = dk.Tensor


# ---------------------------------------------------------------- 1. gradient correctness


def test_criterion_1_gradient_correctness(acceptance):
    cfg = ModelConfig(**GRADCHECK_CONFIG)
    assert (cfg.clips, cfg.zone_dim, cfg.d_h, cfg.heads, cfg.zone_count) == (3, 8, 8, 1, 3)
    assert (cfg.verb_count, cfg.noun_count, len(cfg.modalities)) == (5, 6, 2)
    assert set(cfg.modality_dims.values()) == {12}
    t0 = time.perf_counter()
    res = gradcheck(cfg, seed=0, eps=1e-5)
    elapsed = time.perf_counter() - t0
    ok = res.max_rel_error < 1e-4 and elapsed < 30
    acceptance(1, ok, f"max rel error {res.max_rel_error:.2e} (< 1e-4) over {res.checked} entries, "
                      f"{elapsed:.1f} s (< 30 s)")


# ---------------------------------------------------------------- 2. equation fidelity


def dense_attention(q, k, v, heads, temperature):
    n, a = q.shape
    dv = v.shape[1]
    out = np.zeros((n, dv))
    for h in range(heads):
        qs, ks = slice(h * a // heads, (h + 1) * a // heads), slice(h * dv // heads, (h + 1) * dv // heads)
        for i in range(n):
            scores = [float(np.dot(q[i, qs], k[j, qs])) / temperature for j in range(n)]
            m = max(scores)
            e = [np.exp(s - m) for s in scores]
            for j in range(n):
                out[i, ks] += e[j] / sum(e) * v[j, ks]
    return out


def lin(layer, x):
    return x @ layer.W.data + layer.b.data


def dense_ze(x, p, cfg):
    att = dense_attention(lin(p["ze.q"], x), lin(p["ze.k"], x), lin(p["ze.v"], x), cfg.heads,
                          np.sqrt(cfg.zone_dim / cfg.heads))
    o = x + att
    return o + lin(p["ze.f"], o)


def dense_ae(xm, xz, p, cfg):
    att = dense_attention(lin(p["ae.q"], xz), lin(p["ae.k"], xm), lin(p["ae.v"], xm), cfg.heads,
                          np.sqrt(cfg.zone_dim / cfg.heads))
    o = xm + att
    return o + lin(p["ae.f"], o)


def test_criterion_2_equation_fidelity(acceptance):
    rng = np.random.default_rng(2)
    worst = 0.0
    exact = True
    for trial in range(100):
        heads = int(rng.choice([1, 2]))
        n = int(rng.integers(1, 7))
        dz, dm = 2 * int(rng.integers(1, 5)), 2 * int(rng.integers(1, 6))
        cfg = ModelConfig(clips=n, zone_dim=dz, modality_dims={"rgb": dm}, heads=heads, verb_count=3,
                          noun_count=3, zone_count=2, adv_hidden=4)
        p = EgoZAR(cfg, seed=trial).branches["rgb"]
        xz, xm = rng.standard_normal((n, dz)) * 2, rng.standard_normal((n, dm)) * 2
        worst = max(worst, np.abs(zone_extract(T(xz), p, cfg).data - dense_ze(xz, p, cfg)).max(),
                    np.abs(action_extract(T(xm), T(xz), p, cfg).data - dense_ae(xm, xz, p, cfg)).max())
        for key in ("ze.v", "ze.f", "ae.v", "ae.f"):
            p[key].W.data[:] = 0.0
            p[key].b.data[:] = 0.0
        exact &= np.array_equal(zone_extract(T(xz), p, cfg).data, xz)
        exact &= np.array_equal(action_extract(T(xm), T(xz), p, cfg).data, xm)
    ok = worst <= 1e-10 and exact
    acceptance(2, ok, f"max |dense - module| {worst:.1e} (<= 1e-10) on 100 inputs, "
                      f"residual identities exact: {exact}")


# ---------------------------------------------------------------- 3. k-means optimality


def exhaustive_inertia(x, k):
    m = len(x)
    # point 0 is pinned to cluster 0; relabelling leaves the partition unchanged
    rest = np.array(list(itertools.product(range(k), repeat=m - 1)), dtype=np.int64).reshape(-1, m - 1)
    labels = np.concatenate([np.zeros((len(rest), 1), dtype=np.int64), rest], axis=1)
    total = np.full(len(labels), float(np.sum(x * x)))
    for c in range(k):
        mask = (labels == c).astype(np.float64)
        count = mask.sum(1)
        s = mask @ x
        total -= np.where(count > 0, (s * s).sum(1) / np.maximum(count, 1), 0.0)
    # recompute the near-optimal partitions directly, free of cancellation
    best = np.inf
    for row in labels[total <= total.min() + 1e-6]:
        cost = sum(float(((x[row == c] - x[row == c].mean(0)) ** 2).sum()) for c in range(k) if np.any(row == c))
        best = min(best, cost)
    return best


def test_criterion_3_kmeans_optimality(acceptance):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    hits = 0
    for i in range(50):
        k = int(rng.integers(1, 4))
        m = int(rng.integers(max(k, 4), 13))
        d = int(rng.integers(1, 4))
        x = rng.standard_normal((m, d)) + rng.integers(-3, 4, (m, 1))
        got = inertia(x, fit_kmeans(x, k, seed=i, n_init=10))
        hits += abs(got - exhaustive_inertia(x, k)) <= 1e-9
    elapsed = time.perf_counter() - t0
    ok = hits >= 45 and elapsed < 60
    acceptance(3, ok, f"{hits}/50 instances optimal within 1e-9 (>= 45), {elapsed:.1f} s (< 60 s)")


# ---------------------------------------------------------------- 4. metric oracles


def sort_oracle(logits, labels, k):
    hits = 0
    for row, y in zip(logits, labels):
        order = sorted(range(len(row)), key=lambda c: (-row[c], c))
        hits += int(y) in order[:k]
    return 100.0 * hits / len(labels)


def pair_oracle(vl, nl, verbs, nouns, k):
    hits = 0
    for i in range(len(verbs)):
        lv = vl[i] - (vl[i].max() + np.log(np.exp(vl[i] - vl[i].max()).sum()))
        ln = nl[i] - (nl[i].max() + np.log(np.exp(nl[i] - nl[i].max()).sum()))
        pairs = [(lv[a] + ln[b], a * len(ln) + b) for a in range(len(lv)) for b in range(len(ln))]
        order = [idx for _, idx in sorted(pairs, key=lambda t: (-t[0], t[1]))]
        hits += int(verbs[i]) * len(ln) + int(nouns[i]) in order[:k]
    return 100.0 * hits / len(verbs)


def test_criterion_4_metric_oracles(acceptance):
    rng = np.random.default_rng(4)
    rows = 1000
    vl, nl = rng.standard_normal((rows, 97)).round(1), rng.standard_normal((rows, 300)).round(1)
    verbs, nouns = rng.integers(0, 97, rows), rng.integers(0, 300, rows)
    topk_ok = all(topk_accuracy(lg, y, k) == sort_oracle(lg, y, k)
                  for lg, y in ((vl, verbs), (nl, nouns)) for k in (1, 5))
    av, an = rng.standard_normal((rows, 12)), rng.standard_normal((rows, 15))
    averbs, anouns = rng.integers(0, 12, rows), rng.integers(0, 15, rows)
    action_ok = all(action_accuracy(av, an, averbs, anouns, k) == pair_oracle(av, an, averbs, anouns, k)
                    for k in (1, 5))
    mean = mean_accuracy([21.83, 50.41, 31.99, 50.06, 81.27, 58.13])
    ok = topk_ok and action_ok and abs(mean - 48.95) <= 0.005
    acceptance(4, ok, f"top-k exact: {topk_ok}, action exact: {action_ok} on {rows} rows, "
                      f"published row mean {mean:.4f} (48.95 +- 0.005)")


# ---------------------------------------------------------------- 5, 6. synthetic benchmark


@pytest.fixture(scope="module")
def benchmark():
    t0 = time.perf_counter()
    results = run_benchmark(BENCHMARK_DATA, seeds=(0, 1, 2))
    return results, time.perf_counter() - t0


def test_criterion_5_feature_space_gap(benchmark, acceptance):
    results, elapsed = benchmark
    cfg = BENCHMARK_DATA
    assert (cfg.zones, cfg.source_domains, cfg.target_domains) == (4, 2, 1)
    gaps = {(r.variant, r.seed): r.features["gap"] for r in results}
    base = [gaps["baseline", s] for s in (0, 1, 2)]
    ours = [gaps["egozar", s] for s in (0, 1, 2)]
    ok = all(g > 0.2 for g in base) and all(o < b for o, b in zip(ours, base)) and elapsed < 600
    acceptance(5, ok, f"baseline gaps {', '.join(f'{g:.3f}' for g in base)} (> 0.2); "
                      f"egozar gaps {', '.join(f'{g:.3f}' for g in ours)} (smaller per seed); "
                      f"{elapsed:.0f} s (< 600 s)")


def test_criterion_6_generalization_gain(benchmark, acceptance):
    results, _ = benchmark
    means = {v: s["target_mean_accuracy"] for v, s in summarize(results).items()}
    b, a, e = means["baseline"], means["attention"], means["egozar"]
    ok = e >= b + 5 and b < a < e
    acceptance(6, ok, f"target mean accuracy baseline {b:.2f} < attention {a:.2f} < egozar {e:.2f}; "
                      f"gain {e - b:.2f} (>= 5)")


# ---------------------------------------------------------------- 7. K ablation


def test_criterion_7_k_ablation(tmp_path, acceptance):
    data = as_float32_precision(generate_synthetic(replace(BENCHMARK_DATA, seed=0)))
    log = tmp_path / "ablation_k.jsonl"
    reports = run_k_ablation(data, ks=(2, 4, 8), seed=0, log_path=log)
    lines = [json.loads(l) for l in log.read_text().splitlines()]
    ok = [l["k"] for l in lines] == [2, 4, 8] and all(set(METRICS) <= set(l["target"]) for l in lines)
    ok = ok and sorted(reports) == [2, 4, 8]
    detail = "; ".join(f"K={l['k']} target mean {l['target']['mean_accuracy']:.2f}" for l in lines)
    acceptance(7, ok, f"{len(lines)} per-K reports logged ({detail})")


# ---------------------------------------------------------------- 8. overfit sanity


def test_criterion_8_overfit(acceptance):
    data = as_float32_precision(generate_synthetic(SyntheticConfig(samples_per_domain=16, val_fraction=0.0)))
    ds = data.source
    assert len(ds) == 32
    cent = fit_kmeans(mean_over_clips(ds.zone), 4, seed=0)
    t0 = time.perf_counter()
    model = EgoZAR(model_config_for(data.config, "egozar", 4), seed=0)
    cfg = TrainConfig(epochs=200, base_lr=0.01, lr_drop_epochs=(), batch_size=32, adv_lambda=0.0)
    res = train(model, ds, cent, cfg, log_every_epoch=False)
    rep = evaluate(res.model, ds)
    elapsed = time.perf_counter() - t0
    ok = rep.verb_top1 == 100.0 and rep.noun_top1 == 100.0 and elapsed < 120
    acceptance(8, ok, f"train verb top-1 {rep.verb_top1:.1f}, noun top-1 {rep.noun_top1:.1f} after 200 epochs "
                      f"at lambda=0, {elapsed:.1f} s (< 120 s)")


# ---------------------------------------------------------------- 9. determinism


def tree_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def cli_pipeline(work):
    work.mkdir()
    synth_cfg = work / "synth.json"
    synth_cfg.write_text(json.dumps({"samples_per_domain": 40, "verbs": 6, "nouns": 5}))
    train_cfg = work / "train.json"
    train_cfg.write_text(json.dumps({"epochs": 4, "base_lr": 0.02, "batch_size": 16}))
    steps = [
        ("synth", "--config", synth_cfg, "--out", work / "syn", "--seed", 7),
        ("cluster", "--manifest", work / "syn" / "source" / "manifest.json", "--k", 4, "--seed", 7,
         "--out", work / "zones.ezf"),
        ("train", "--manifest", work / "syn" / "source" / "manifest.json", "--centroids", work / "zones.ezf",
         "--config", train_cfg, "--out", work / "run", "--seed", 7),
        ("eval", "--manifest", work / "syn" / "target" / "manifest.json", "--model", work / "run",
         "--report", work / "report.json", "--predictions", work / "pred.csv"),
    ]
    return [main([str(a) for a in step]) for step in steps]


def test_criterion_9_determinism(tmp_path, acceptance):
    codes = cli_pipeline(tmp_path / "a") + cli_pipeline(tmp_path / "b")
    a, b = tmp_path / "a", tmp_path / "b"
    same_ckpt = all(tree_bytes(a / "run" / d) == tree_bytes(b / "run" / d) for d in ("final", "best"))
    same_report = all((a / f).read_bytes() == (b / f).read_bytes() for f in ("report.json", "pred.csv"))
    same_data = tree_bytes(a / "syn") == tree_bytes(b / "syn") and \
        (a / "zones.ezf").read_bytes() == (b / "zones.ezf").read_bytes()
    ok = codes == [0] * 8 and same_ckpt and same_report and same_data
    acceptance(9, ok, f"exit codes {codes}; identical data/centroids {same_data}, checkpoints {same_ckpt}, "
                      f"reports {same_report}")


# ---------------------------------------------------------------- 10. format robustness


def test_criterion_10_format_robustness(tmp_path, acceptance):
    seen = []

    @settings(max_examples=1000, deadline=None, database=None)
    @given(st.tuples(st.integers(0, 6), st.integers(1, 5), st.integers(1, 6)).flatmap(
        lambda shape: arrays(np.float32, shape, elements=st.floats(width=32, allow_nan=False, allow_infinity=False))))
    def round_trip(block):
        seen.append(block.shape)
        path = tmp_path / "block.ezf"
        ezf.write_ezf(path, block)
        assert ezf.read_header(path) == block.shape
        np.testing.assert_array_equal(ezf.read_ezf(path), block)

    round_trip()

    good = ezf.encode(np.ones((2, 3, 4), dtype=np.float32))
    (tmp_path / "bad_magic.ezf").write_bytes(b"EZF2" + good[4:])
    (tmp_path / "truncated.ezf").write_bytes(good[:-5])
    with pytest.raises(FormatError) as magic:
        ezf.read_ezf(tmp_path / "bad_magic.ezf")
    with pytest.raises(CorruptionError) as trunc:
        ezf.read_ezf(tmp_path / "truncated.ezf")
    diag_ok = "bad magic b'EZF2'" in str(magic.value) and "expected 96 bytes" in str(trunc.value) \
        and "got 91" in str(trunc.value)
    ok = len(seen) >= 1000 and diag_ok
    acceptance(10, ok, f"{len(seen)} random blocks round-tripped; diagnostics: "
                       f"{str(magic.value).split(': ', 1)[1]} | {str(trunc.value).split(': ', 1)[1]}")
