"""Acceptance suite: one test per criterion, printing a pass/fail line each.

The two benchmark-ordering clauses (criterion 6, criterion 7a) are
asserted exactly as stated. They currently fail: the adaptation update
weights near-copies of one few-shot gradient, which cannot out-train the
pretrained finetune baseline and makes the weights pure step-scale noise
next to uniform averaging. The failure messages carry the measured
numbers; everything else passes.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

import gsaf.tensor as T
from gsaf.adapt import (
    AdaptConfig,
    DomainDataset,
    compute_gradient,
    cosine_similarity,
    run_adaptation,
)
from gsaf.align import AlignedSequence, read_dataset, write_dataset
from gsaf.datakit import (
    GeneratorSpec,
    adjusted_rand_index,
    discrimination_corpus,
    flatten_corpus,
    generate,
    kmeans_domains,
    make_split,
)
from gsaf.gradcheck import random_batch, run_gradcheck
from gsaf.harness import ExperimentConfig, compare_methods, run_experiment
from gsaf.metrics import accuracy
from gsaf.model import (
    ModelConfig,
    build_parameters,
    load_checkpoint,
    predict_batch,
    save_checkpoint,
)
from gsaf.rng import substream

# benchmark corpus and training configuration shared by criteria 6 and 7
BENCH_GEN = dict(num_domains=6, videos_per_domain=48, shift_strength=0.6, vocab_size=80,
                 n=24, d_face=6, d_bg=6, d_audio=8, min_words=8, max_words=30,
                 noise_std=0.1)
BENCH_MODEL = ModelConfig(d_face=6, d_bg=6, d_audio=8, vocab_size=80, d_text=8, h=6,
                          d_k=6, d_z=4, mlp_hidden=12, n=24)
BENCH_ADAPT = AdaptConfig(shots=10, alpha=0.02, iterations=60, optimizer="adamw",
                          batch_size=16, pretrain_iterations=80, finetune_iterations=40,
                          patience=15)
BENCH_SEEDS = (0, 1, 2, 3, 4)


def announce(criterion, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
    return ok


@pytest.fixture(scope="module")
def benchmark():
    """Leave-one-domain-out, 5 seeds, all four method variants."""
    t0 = time.time()
    results = {v: {} for v in ("adapt", "finetune", "adapt-nosim", "adapt-noadalr")}
    for seed in BENCH_SEEDS:
        domains = generate(GeneratorSpec(seed=100 + seed, **BENCH_GEN))
        res = compare_methods(
            domains, BENCH_MODEL, replace(BENCH_ADAPT, seed=seed), seeds=[seed],
            variants=("adapt", "finetune", "adapt-nosim", "adapt-noadalr"),
        )
        for v in results:
            for target, accs in res[v].items():
                results[v].setdefault(target, []).extend(accs)
    results["elapsed"] = time.time() - t0
    return results


def test_criterion_1_gradient_correctness():
    t0 = time.time()
    passed, worst = run_gradcheck(trials=100, seed=0, full_trials=15)
    elapsed = time.time() - t0
    ok = passed and elapsed < 120.0
    announce(1, ok, f"gradcheck 100 configs, max rel err {worst.max_rel_error:.2e} "
                    f"(worst {worst.worst_param}, {worst.mode}), {elapsed:.0f}s")
    assert passed, f"gradient check failed at {worst.worst_param}: {worst.max_rel_error}"
    assert elapsed < 120.0, f"gradcheck took {elapsed:.0f}s, budget is 120s"


def test_criterion_2_metric_correctness():
    rng = substream(0, "acceptance-metric")
    preds = rng.uniform(0, 1, (1000, 5))
    labels = rng.uniform(0, 1, (1000, 5))
    report = accuracy(preds, labels)
    # independent literal re-implementation
    oracle = np.array(
        [np.mean([1.0 - abs(preds[i][k] - labels[i][k]) for i in range(1000)]) * 100.0
         for k in range(5)]
    )
    max_err = np.abs(report.trait_accuracy - oracle).max()
    perfect = accuracy(labels, labels.copy())
    exact = perfect.average_accuracy == 100.0 and np.all(perfect.trait_accuracy == 100.0)
    ok = max_err < 1e-12 and exact
    announce(2, ok, f"oracle agreement {max_err:.2e}, perfect predictions -> "
                    f"{perfect.average_accuracy}%")
    assert max_err < 1e-12
    assert exact


def test_criterion_3_similarity_algebra():
    rng = substream(0, "acceptance-sim")
    checks = []
    for _ in range(50):
        g = rng.standard_normal(91)
        checks.append(cosine_similarity(g, g) == 1.0)
        checks.append(cosine_similarity(g, -g) == -1.0)
    scale_ok = True
    for _ in range(100):
        g1, g2 = rng.standard_normal(37), rng.standard_normal(37)
        c = float(rng.uniform(1e-3, 1e3))
        scale_ok &= abs(cosine_similarity(c * g1, g2) - cosine_similarity(g1, g2)) < 1e-12
    known = cosine_similarity(np.array([1.0, 2.0, 2.0]), np.array([2.0, 1.0, 2.0]))
    known_ok = abs(known - 8.0 / 9.0) < 1e-12
    ok = all(checks) and scale_ok and known_ok
    announce(3, ok, f"cos(g,g)=1 exact, cos(g,-g)=-1 exact, scale-invariant, "
                    f"[1,2,2]x[2,1,2]={known:.15f}")
    assert ok


def test_criterion_4_algorithm_degeneracy():
    cfg_model = ModelConfig(d_face=2, d_bg=2, d_audio=3, vocab_size=6, d_text=2, h=2,
                            d_k=2, d_z=2, mlp_hidden=3, n=5)
    source = DomainDataset(3, random_batch(cfg_model, substream(1, "deg-src"), batch_size=6))
    target = DomainDataset(0, random_batch(cfg_model, substream(1, "deg-tgt"), batch_size=4))
    cfg = AdaptConfig(shots=4, alpha=0.05, iterations=50, optimizer="sgd", inner_steps=0,
                      use_similarity=False, use_adaptive_lr=False, batch_size=4, seed=7)
    theta = build_parameters(cfg_model, seed=9)

    trajectory = []
    run_adaptation([source], target, cfg_model, cfg, init_params=theta,
                   callback=lambda it, p: trajectory.append(p.flatten_values()))

    ref = theta.clone()
    identical = True
    for it in range(cfg.iterations):
        order = substream(cfg.seed, "shots", it).permutation(len(target.examples))[: cfg.shots]
        shots = [target.examples[int(i)] for i in order]
        grad, _ = compute_gradient(ref, cfg_model, shots)
        ref = ref.replace_values(ref.flatten_values() - cfg.alpha * (1.0 * grad))
        identical &= bool(np.array_equal(trajectory[it], ref.flatten_values()))
    announce(4, identical, "k=1 + uniform weights + SGD == plain few-shot SGD, "
                           "bit-identical over 50 iterations")
    assert identical


def test_criterion_5_pad_invariance():
    cfg = ModelConfig(d_face=4, d_bg=3, d_audio=5, vocab_size=12, d_text=4, h=4,
                      d_k=4, d_z=3, mlp_hidden=8, n=12)
    params = build_parameters(cfg, seed=3)
    rng = substream(2, "acceptance-pads")
    originals, perturbed = [], []
    while len(originals) < 200:
        seq = random_batch(cfg, rng, batch_size=1)[0]
        if seq.valid_len == cfg.n:
            continue
        tokens = seq.tokens.copy()
        face, bg, audio = seq.face.copy(), seq.background.copy(), seq.audio.copy()
        v = seq.valid_len
        tokens[v:] = rng.integers(0, cfg.vocab_size, size=cfg.n - v)
        face[:, v:] = rng.standard_normal((cfg.d_face, cfg.n - v)) * 50
        bg[:, v:] = rng.standard_normal((cfg.d_bg, cfg.n - v)) * 50
        audio[:, v:] = rng.standard_normal((cfg.d_audio, cfg.n - v)) * 50
        originals.append(seq)
        perturbed.append(AlignedSequence(tokens=tokens, face=face, background=bg,
                                         audio=audio, valid_len=v, label=seq.label))
    a = predict_batch(params, cfg, originals, chunk=50)
    b = predict_batch(params, cfg, perturbed, chunk=50)
    identical = bool(np.array_equal(a, b))
    announce(5, identical, "200 sequences, pad perturbations change predictions by exactly 0")
    assert identical


def test_criterion_6_benchmark_ordering(benchmark):
    adapt_means = {t: np.mean(v) for t, v in benchmark["adapt"].items()}
    ft_means = {t: np.mean(v) for t, v in benchmark["finetune"].items()}
    mean_adapt = float(np.mean(list(adapt_means.values())))
    mean_ft = float(np.mean(list(ft_means.values())))
    wins = sum(adapt_means[t] > ft_means[t] for t in adapt_means)
    in_budget = benchmark["elapsed"] < 15 * 60
    ok = mean_adapt >= mean_ft and wins >= 4 and in_budget
    announce(6, ok, f"adapt {mean_adapt:.2f}% vs finetune {mean_ft:.2f}%, "
                    f"strict wins {wins}/6, benchmark ran {benchmark['elapsed']:.0f}s")
    assert in_budget, f"benchmark exceeded 15 min: {benchmark['elapsed']:.0f}s"
    assert mean_adapt >= mean_ft and wins >= 4, (
        f"adaptation does not dominate the finetune baseline "
        f"(adapt {mean_adapt:.2f} vs ft {mean_ft:.2f}, wins {wins}/6): the update "
        f"direction is a rescaled copy of the same few-shot gradient the baseline "
        f"descends directly, so no tested configuration produced this ordering"
    )


def test_criterion_7a_similarity_ablation(benchmark):
    full = float(np.mean([np.mean(v) for v in benchmark["adapt"].values()]))
    nosim = float(np.mean([np.mean(v) for v in benchmark["adapt-nosim"].values()]))
    gap = full - nosim
    ok = gap > 0.0
    announce("7a", ok, f"full {full:.2f}% vs w/o similarity {nosim:.2f}% (gap {gap:+.2f})")
    assert gap > 0.0, (
        f"similarity weighting does not improve the benchmark (gap {gap:+.2f}): the "
        f"weighted vectors are near-copies of one shot gradient, so the weights "
        f"only rescale the step and add variance relative to uniform averaging"
    )


def test_criterion_7b_adaptive_lr_ablation(benchmark):
    full = float(np.mean([np.mean(v) for v in benchmark["adapt"].values()]))
    noadalr = float(np.mean([np.mean(v) for v in benchmark["adapt-noadalr"].values()]))
    gap = full - noadalr
    ok = gap >= -0.2
    announce("7b", ok, f"full {full:.2f}% vs w/o adaptive LR {noadalr:.2f}% (gap {gap:+.2f})")
    assert gap >= -0.2


def test_criterion_8_similarity_discrimination():
    spec_kw = dict(vocab_size=60, n=20, d_face=5, d_bg=5, d_audio=6, min_words=6,
                   max_words=24, noise_std=0.08)
    model_cfg = ModelConfig(d_face=5, d_bg=5, d_audio=6, vocab_size=60, d_text=6, h=5,
                            d_k=5, d_z=3, mlp_hidden=10, n=20)
    wins = 0
    details = []
    for seed in range(5):
        domains = discrimination_corpus(seed=40 + seed, videos_per_domain=30, **spec_kw)
        target, src_same, src_inverted = domains
        plan = make_split(target, shots=10, seed=seed)
        shots = [target.examples[i] for i in plan.shot_ids]
        cfg = AdaptConfig(shots=10, alpha=0.02, iterations=15, optimizer="adamw",
                          batch_size=16, seed=seed)
        _, history = run_adaptation([src_same, src_inverted],
                                    DomainDataset(0, shots), model_cfg, cfg)
        sims = np.array([row["sims"] for row in history])
        mean_same, mean_inv = sims[:, 0].mean(), sims[:, 1].mean()
        details.append(f"s{seed}: A={mean_same:+.2f} B={mean_inv:+.2f}")
        wins += mean_same > mean_inv
    ok = wins >= 4
    announce(8, ok, f"shared-map source outranked inverted-map source in {wins}/5 seeds "
                    f"({'; '.join(details)})")
    assert wins >= 4


def test_criterion_9_determinism_and_formats(tmp_path):
    # byte-identical rerun of a full (small) sweep
    spec = GeneratorSpec(num_domains=3, videos_per_domain=24, shift_strength=0.5,
                         vocab_size=40, n=10, d_face=3, d_bg=3, d_audio=4,
                         min_words=4, max_words=12, noise_std=0.08, seed=21)
    corpus_path = tmp_path / "corpus.jsonl"
    domains = generate(spec)
    write_dataset(flatten_corpus(domains), corpus_path, vocab_size=spec.vocab_size)

    model_cfg = ModelConfig(d_face=3, d_bg=3, d_audio=4, vocab_size=40, d_text=4, h=3,
                            d_k=3, d_z=2, mlp_hidden=6, n=10)
    adapt_cfg = AdaptConfig(shots=4, alpha=0.02, iterations=4, optimizer="adamw",
                            batch_size=6, pretrain_iterations=6, patience=4)
    byte_identical = True
    for out in ("sweep_a", "sweep_b"):
        run_experiment(ExperimentConfig(dataset=str(corpus_path), out_dir=str(tmp_path / out),
                                        method="adapt", targets="all", seeds=[0],
                                        model=model_cfg, adapt=adapt_cfg))
    for rel in ("aggregate.json", "simmatrix.csv", "target_0/seed_0/report.json",
                "target_0/seed_0/history.csv", "target_0/seed_0/model.ckpt"):
        byte_identical &= (tmp_path / "sweep_a" / rel).read_bytes() == (
            tmp_path / "sweep_b" / rel).read_bytes()

    # dataset and checkpoint round trips
    header, items = read_dataset(corpus_path)
    second = tmp_path / "again.jsonl"
    write_dataset(items, second, header=header)
    dataset_roundtrip = corpus_path.read_bytes() == second.read_bytes()

    params = build_parameters(model_cfg, seed=5)
    ckpt = tmp_path / "model.ckpt"
    save_checkpoint(ckpt, params, model_cfg)
    loaded, loaded_cfg = load_checkpoint(ckpt)
    ckpt_roundtrip = (loaded_cfg == model_cfg and
                      np.array_equal(loaded.flatten_values(), params.flatten_values()))

    # k-means on separable blobs
    def token_seq(tokens):
        arr = np.zeros(8, dtype=np.int64)
        arr[: len(tokens)] = tokens
        return AlignedSequence(tokens=arr, face=np.zeros((2, 8)),
                               background=np.zeros((2, 8)), audio=np.zeros((2, 8)),
                               valid_len=len(tokens), label=None)

    blob_corpus = [token_seq([1, 2, 1]) for _ in range(5)] + [
        token_seq([7, 8, 8]) for _ in range(5)]
    truth = np.array([0] * 5 + [1] * 5)
    result = kmeans_domains(blob_corpus, k=2, seed=3)
    ari = adjusted_rand_index(result.labels, truth)

    ok = byte_identical and dataset_roundtrip and ckpt_roundtrip and ari == 1.0
    announce(9, ok, f"sweep rerun byte-identical={byte_identical}, "
                    f"jsonl roundtrip={dataset_roundtrip}, checkpoint roundtrip="
                    f"{ckpt_roundtrip}, blob ARI={ari}")
    assert byte_identical and dataset_roundtrip and ckpt_roundtrip
    assert ari == 1.0
