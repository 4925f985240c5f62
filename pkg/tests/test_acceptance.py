"""Acceptance gate: one test per shipping criterion, one verdict line each.

Criteria 1-4 and 9-10 are fast numeric checks against independent oracles.
Criteria 5-8 share one module-scoped toy training run (synthetic two-family
corpus, the 129-bin network at hidden width 64) and together take the bulk
of the suite's runtime.  Verdict lines are echoed after the run by the
conftest terminal-summary hook.
"""

import dataclasses
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record_verdict
from deepcluster.audio import (
    Waveform,
    istft,
    measure_snr_db,
    mix_at_snr,
    read_wav,
    stft,
    write_wav,
)
from deepcluster.clustering import kmeans, oracle_permutation
from deepcluster.data import (
    FeatureScaler,
    PartitionLabels,
    SegmentBatch,
    SynthSourceSpec,
    build_manifest,
    ideal_binary_mask,
    load_mixture_entry,
    segments_from_manifest,
    silence_weights,
    synth_source,
)
from deepcluster.metrics import (
    format_permutation,
    mask_ari,
    sdr,
    sdr_improvement,
    write_sdr_report,
)
from deepcluster.network import (
    NetworkSpec,
    backward,
    forward,
    init_params,
    train,
)
from deepcluster.nmf import (
    NmfConfig,
    factorize,
    nmf_objective,
    separate_nmf,
    train_bases,
)
from deepcluster.objective import (
    LossConfig,
    loss_gradient,
    loss_lowrank,
    loss_naive,
)
from deepcluster.separation import (
    EmbeddingModel,
    oracle_ibm_separate,
    separate,
)

RATE = 8000


def one_hot(classes, num_classes):
    classes = np.asarray(classes)
    ind = np.zeros((classes.size, num_classes))
    ind[np.arange(classes.size), classes] = 1.0
    return PartitionLabels(ind, num_classes)


def random_embedding(rng, n, k):
    V = rng.standard_normal((n, k))
    return V / np.linalg.norm(V, axis=1, keepdims=True)


def verdict(num, name, ok, detail):
    line = f"ACCEPTANCE {num:02d} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    record_verdict(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. low-rank loss equals the naive quadratic form


def test_01_loss_oracle_equivalence():
    rng = np.random.default_rng(101)
    ks = (5, 10, 20, 40, 60)
    cs = (2, 3, 4)
    modes = (LossConfig(weighting="partition_size"),
             LossConfig(weighting="unweighted"))
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(200):
        k = ks[i % len(ks)]
        c = cs[i % len(cs)]
        n = int(rng.integers(c + 1, 501))
        V = random_embedding(rng, n, k)
        labels = one_hot(rng.integers(c, size=n), c)
        weights = None
        if i % 2:
            weights = rng.integers(2, size=n).astype(float)
            weights[:2] = 1.0  # keep at least two rows in play
        config = modes[(i // 2) % 2]
        naive = loss_naive(V, labels, config, weights)
        low = loss_lowrank(V, labels, config, weights)
        worst = max(worst, abs(low - naive) / max(abs(naive), 1e-12))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 30.0
    verdict(1, "loss oracle equivalence", ok,
            f"200 instances, max rel diff {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. analytic gradients vs central finite differences


def _loss_fd(V, labels, config, weights, step=1e-5):
    grad = np.zeros_like(V)
    for n in range(V.shape[0]):
        for k in range(V.shape[1]):
            hi, lo = V.copy(), V.copy()
            hi[n, k] += step
            lo[n, k] -= step
            grad[n, k] = (
                loss_lowrank(hi, labels, config, weights)
                - loss_lowrank(lo, labels, config, weights)
            ) / (2 * step)
    return grad


def _network_fd_worst(step=1e-5):
    spec = NetworkSpec(input_dim=3, blstm_layers=2, hidden_per_direction=2,
                       embedding_dim=2, segment_len=5)
    rng = np.random.default_rng(202)
    features = rng.standard_normal((5, 3))
    n = 5 * 3
    labels = one_hot(rng.integers(2, size=n), 2)
    weights = np.ones(n)
    weights[rng.integers(n, size=3)] = 0.0
    config = LossConfig()
    params = init_params(spec, seed=12)

    def loss_at():
        embedding, _ = forward(params, spec, features)
        return loss_lowrank(embedding, labels, config, weights)

    embedding, cache = forward(params, spec, features)
    grads = backward(
        params, cache, loss_gradient(embedding, labels, config, weights)
    )
    worst = 0.0
    for name in sorted(params):
        tensor = params[name]
        numeric = np.zeros_like(tensor)
        it = np.nditer(tensor, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + step
            hi = loss_at()
            tensor[idx] = orig - step
            lo = loss_at()
            tensor[idx] = orig
            numeric[idx] = (hi - lo) / (2 * step)
            it.iternext()
        scale = max(np.max(np.abs(numeric)), 1e-8)
        worst = max(worst, np.max(np.abs(grads[name] - numeric)) / scale)
    return worst


def test_02_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)
    modes = (LossConfig(weighting="partition_size"),
             LossConfig(weighting="unweighted"))
    worst_loss = 0.0
    for i in range(50):
        n = int(rng.integers(5, 61))
        k = (2, 3, 5)[i % 3]
        c = (2, 3)[i % 2]
        V = random_embedding(rng, n, k)
        labels = one_hot(rng.integers(c, size=n), c)
        weights = None
        if i % 2:
            weights = rng.integers(2, size=n).astype(float)
            weights[:2] = 1.0
        config = modes[(i // 2) % 2]
        analytic = loss_gradient(V, labels, config, weights)
        numeric = _loss_fd(V, labels, config, weights)
        scale = max(np.max(np.abs(numeric)), 1e-8)
        worst_loss = max(worst_loss, np.max(np.abs(analytic - numeric)) / scale)
    worst_net = _network_fd_worst()
    elapsed = time.perf_counter() - t0
    ok = worst_loss <= 1e-4 and worst_net <= 1e-4 and elapsed < 60.0
    verdict(2, "gradient correctness", ok,
            f"loss FD {worst_loss:.2e}, network FD {worst_net:.2e}, "
            f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. STFT round trip


def test_03_stft_round_trip():
    rng = np.random.default_rng(103)
    signals = []
    for _ in range(10):
        signals.append(0.1 * rng.standard_normal(int(rng.integers(4000, 16001))))
    for i, f0 in enumerate((97.0, 110.5, 155.0, 220.0, 333.3)):
        signals.append(synth_source(SynthSourceSpec(f0_hz=f0, seed=i)).samples)
    t = np.arange(RATE) / RATE
    signals.append(0.5 * np.sin(2 * np.pi * 440.0 * t))
    signals.append(0.3 * np.sin(2 * np.pi * (200.0 + 1500.0 * t) * t))  # chirp
    square = np.zeros(RATE)
    square[::80] = 0.9  # impulse train
    signals.append(square)
    signals.append(np.linspace(-0.5, 0.5, 6000))  # ramp
    signals.append(0.2 * np.cos(2 * np.pi * 60.0 * t) ** 3)
    assert len(signals) == 20
    worst = np.inf
    for x in signals:
        wave = Waveform(x, RATE)
        back = istft(stft(wave), num_samples=x.size)
        err = np.sum((x - back.samples) ** 2)
        snr = 10.0 * np.log10(np.sum(x**2) / max(err, 1e-300))
        worst = min(worst, snr)
    ok = worst >= 60.0
    verdict(3, "stft round trip", ok, f"20 signals, min SNR {worst:.1f} dB")


# ---------------------------------------------------------------------------
# 4. mixture SNR accuracy


def test_04_mixing_snr():
    a = synth_source(SynthSourceSpec(f0_hz=97.0, seed=0))
    b = synth_source(SynthSourceSpec(f0_hz=223.0, seed=1))
    worst = 0.0
    for requested in np.linspace(0.0, 5.0, 26):
        _, scaled = mix_at_snr(a, b, float(requested))
        measured = measure_snr_db(scaled[0], scaled[1])
        worst = max(worst, abs(measured - requested))
    ok = worst <= 1e-6
    verdict(4, "mixing snr accuracy", ok,
            f"26 settings in [0, 5] dB, max error {worst:.2e} dB")


# ---------------------------------------------------------------------------
# 9. clustering and assignment oracles


def _random_sources(rng, k, length):
    t = np.arange(length) / RATE
    out = []
    for j in range(k):
        f = float(rng.uniform(100.0, 900.0))
        x = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        x += 0.2 * rng.standard_normal(length)
        out.append(Waveform(0.3 * x, RATE))
    return out


def test_09_clustering_permutation_oracles():
    rng = np.random.default_rng(109)
    worst_viol = 0.0
    for i in range(100):
        n = int(rng.integers(10, 201))
        d = int(rng.integers(2, 9))
        k = int(rng.integers(2, min(7, n + 1)))
        points = rng.standard_normal((n, d)) * float(rng.uniform(0.5, 2.0))
        result = kmeans(points, k, seed=i, restarts=3)
        h = np.asarray(result.inertia_history)
        if h.size > 1:
            viol = np.max(h[1:] - h[:-1]) / max(1.0, h[0])
            worst_viol = max(worst_viol, viol)
    inertia_ok = worst_viol <= 1e-9

    # assignment in sdr_improvement vs explicit search over permutations
    assign_ok = True
    for k in (2, 3):
        for case in range(4):
            crng = np.random.default_rng([109, k, case])
            refs = _random_sources(crng, k, 4000)
            mixture = Waveform(np.sum([r.samples for r in refs], axis=0), RATE)
            order = crng.permutation(k)
            ests = [
                Waveform(
                    refs[j].samples + 0.05 * crng.standard_normal(4000), RATE
                )
                for j in order
            ]
            mode = "scale_invariant" if case % 2 == 0 else "filtered"
            report = sdr_improvement(mixture, ests, refs, mode=mode)
            best = max(
                np.mean([sdr(ests[p[j]], refs[j], mode) for j in range(k)])
                for p in itertools.permutations(range(k))
            )
            assign_ok &= abs(report.mean_sdr_db - best) <= 1e-9

    # per-segment oracle alignment vs explicit search
    perm_ok = True
    for k in (2, 3):
        crng = np.random.default_rng([901, k])
        refs = _random_sources(crng, k, 4000)
        mixture = Waveform(np.sum([r.samples for r in refs], axis=0), RATE)
        mix_spec = stft(mixture)
        ref_specs = [stft(r) for r in refs]
        frames, bins = mix_spec.values.shape
        starts = [0, frames - 20]
        masks = []
        for s in starts:
            labels = crng.integers(k, size=(20, bins))
            masks.append(
                np.stack([(labels == c).astype(float) for c in range(k)])
            )
        chosen = oracle_permutation(masks, starts, mix_spec, ref_specs)
        for m, s, p in zip(masks, starts, chosen):
            mix = mix_spec.values[s : s + 20]
            costs = {}
            for q in itertools.permutations(range(k)):
                costs[q] = sum(
                    np.sum(
                        np.abs(
                            m[q[j]] * mix - ref_specs[j].values[s : s + 20]
                        )
                        ** 2
                    )
                    for j in range(k)
                )
            perm_ok &= costs[p] <= min(costs.values()) + 1e-9
    ok = inertia_ok and assign_ok and perm_ok
    verdict(9, "clustering and assignment oracles", ok,
            f"inertia viol {worst_viol:.1e}, assignment "
            f"{'ok' if assign_ok else 'MISMATCH'}, segment alignment "
            f"{'ok' if perm_ok else 'MISMATCH'}")


# ---------------------------------------------------------------------------
# 10. NMF multiplicative updates


def test_10_nmf_baseline():
    rng = np.random.default_rng(110)
    worst_viol = 0.0
    for i in range(20):
        div = ("kl", "euclidean")[i % 2]
        lam = (0.0, 0.1)[(i // 2) % 2]
        m = int(rng.integers(6, 30))
        n = int(rng.integers(8, 40))
        r = int(rng.integers(2, min(m, n)))
        v = rng.random((m, n)) + 1e-3
        basis = rng.random((m, r)) + 1e-2
        acts = rng.random((r, n)) + 1e-2
        config = NmfConfig(divergence=div, sparsity_lambda=lam,
                           max_iter=80, tol=0.0)
        _, _, history = factorize(v, basis, acts, config)
        h = np.asarray(history)
        viol = np.max(h[1:] - h[:-1]) / max(1.0, abs(h[0]))
        worst_viol = max(worst_viol, viol)
    monotone_ok = worst_viol <= 1e-10

    rank1_err = 0.0
    for div in ("kl", "euclidean"):
        b = rng.random(8) + 0.1
        w = rng.random(30) + 0.1
        v = np.outer(b, w)
        config = NmfConfig(divergence=div, sparsity_lambda=0.0,
                           max_iter=500, tol=0.0)
        basis, acts, _ = factorize(
            v, rng.random((8, 1)) + 0.1, rng.random((1, 30)) + 0.1, config
        )
        rank1_err = max(
            rank1_err,
            np.linalg.norm(v - basis @ acts) / np.linalg.norm(v),
        )
    rank1_ok = rank1_err <= 1e-6
    ok = monotone_ok and rank1_ok
    verdict(10, "nmf baseline updates", ok,
            f"20 problems, max monotonicity viol {worst_viol:.1e}, "
            f"rank-1 rel err {rank1_err:.1e}")


# ---------------------------------------------------------------------------
# 5-8. toy end-to-end pipeline: one shared corpus and K=20 training run,
# a K-sweep under the same budget, ceiling ordering, and determinism

TOY_FAMILIES = {
    "low": ([103.0, 108.0, 113.0, 122.0], 8, 3.0),
    "mid": ([260.0, 268.0, 276.0, 285.0], 8, 5.5),
    "high": ([317.0, 325.0, 333.0, 355.0], 5, 4.2),
}
TOY_EPOCHS = 30
TOY_TRAIN_SEEDS = range(6)
TOY_EVAL_SEED = 5
# masks are scored where the mixture has meaningful energy; below -30 dB the
# ideal mask's "owner" is leakage noise that no mask decision can move
ARI_SCORING_DB = -30.0
NMF_CFG = NmfConfig(divergence="kl", sparsity_lambda=0.1, max_iter=60)


def _render_family(root, name, seeds, duration):
    """One wav per (f0, seed); the AM rate is a family trait plus a small
    per-render offset, so held-out renders stay inside their family's band."""
    f0s, harmonics, am_base = TOY_FAMILIES[name]
    paths = []
    for f0 in f0s:
        for s in seeds:
            path = root / f"{name}_f{f0:g}_s{s}_{duration:g}s.wav"
            write_wav(path, synth_source(SynthSourceSpec(
                f0_hz=f0, num_harmonics=harmonics,
                am_rate_hz=am_base + 0.15 * s, duration_s=duration, seed=s)))
            paths.append(path)
    return paths


def _train_toy(k, segments, scaler, ckdir):
    spec = NetworkSpec(input_dim=129, blstm_layers=2,
                       hidden_per_direction=64, embedding_dim=k,
                       segment_len=100)
    return train(spec, segments, epochs=TOY_EPOCHS, seed=21,
                 checkpoint_dir=ckdir, learning_rate=1e-3,
                 weight_noise_std=0.0, feature_scaler=scaler)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("toy")
    low = _render_family(root, "low", TOY_TRAIN_SEEDS, 2.0)
    mid = _render_family(root, "mid", TOY_TRAIN_SEEDS, 2.0)
    test_low = _render_family(root, "low", [7], 1.0)
    test_mid = _render_family(root, "mid", [7], 1.0)
    test_high = _render_family(root, "high", [7], 1.0)
    manifests = {
        "train": build_manifest([low, mid], 200, (0.0, 5.0), seed=11),
        "test2": build_manifest([test_low, test_mid], 20, (0.0, 5.0),
                                seed=12),
        "test3": build_manifest([test_low, test_mid, test_high], 10,
                                (0.0, 5.0), seed=13, three_speaker=True),
    }
    segments = segments_from_manifest(manifests["train"],
                                      silence_mode="mixture")
    scaler = FeatureScaler.fit(segments)
    result = _train_toy(20, segments, scaler, root / "k20")
    return {
        "root": root, "families": (low, mid), "manifests": manifests,
        "segments": segments, "scaler": scaler, "result": result,
        "model": EmbeddingModel.from_checkpoint(result.checkpoint_paths[-1]),
        "setup_s": time.perf_counter() - t0, "cache": {},
    }


@pytest.fixture(scope="module")
def sweep(toy):
    models = {}
    for k in (5, 40):
        result = _train_toy(k, toy["segments"], toy["scaler"],
                            toy["root"] / f"k{k}")
        models[k] = EmbeddingModel.from_checkpoint(
            result.checkpoint_paths[-1])
    return models


def _eval_separation(separate_fn, manifest, k, label):
    """Run one separation strategy over a manifest; per-mixture ARI against
    the ideal mask on mixture-active bins, per-source SI-SDR improvement,
    and CSV rows in the report schema."""
    aris, gains, rows = [], [], []
    for entry in manifest.entries:
        mixture, references = load_mixture_entry(entry)
        result = separate_fn(mixture, references)
        labels = np.argmax(result.masks.reshape(k, -1), axis=0)
        ibm = ideal_binary_mask([stft(r) for r in references])
        active = silence_weights([stft(mixture)], threshold_db=ARI_SCORING_DB,
                                 mode="mixture")
        aris.append(mask_ari(labels, ibm.classes(), weights=active))
        report = sdr_improvement(mixture, result.estimates, references,
                                 mode="scale_invariant")
        gains.append(report.per_source_sdr_improvement_db)
        perm = format_permutation(report.permutation)
        for idx in range(k):
            rows.append({
                "mixture_id": entry.mixture_id,
                "source_idx": idx,
                "sdr_db": report.per_source_sdr_db[idx],
                "sdr_improvement_db":
                    report.per_source_sdr_improvement_db[idx],
                "permutation": perm,
                "mode": report.mode,
                "strategy": label,
            })
    return np.asarray(aris), np.asarray(gains), rows


def _model_eval(toy, model, manifest_name, k, strategy="global_kmeans"):
    key = (id(model), k, manifest_name, strategy)
    if key not in toy["cache"]:
        oracle = strategy != "global_kmeans"

        def run(mixture, references):
            return separate(mixture, model, k=k, strategy=strategy,
                            seed=TOY_EVAL_SEED,
                            references=references if oracle else None)

        toy["cache"][key] = _eval_separation(
            run, toy["manifests"][manifest_name], k, strategy)
    return toy["cache"][key]


def test_05_toy_end_to_end(toy):
    t0 = time.perf_counter()
    losses = toy["result"].epoch_mean_losses
    drop = 1.0 - losses[-1] / losses[0]

    aris, gains, _ = _model_eval(toy, toy["model"], "test2", 2)
    per_source = gains.mean(axis=0)

    aris3, gains3, _ = _model_eval(toy, toy["model"], "test3", 3)
    mean3 = float(gains3.mean())

    elapsed = toy["setup_s"] + (time.perf_counter() - t0)
    ok = (drop >= 0.5 and aris.mean() >= 0.9 and per_source.min() >= 5.0
          and mean3 > 0.0 and elapsed < 1800.0)
    verdict(5, "toy end-to-end separation", ok,
            f"loss drop {drop:.0%}, held-out ARI {aris.mean():.3f}, "
            f"SDRi per source {per_source[0]:+.2f}/{per_source[1]:+.2f} dB, "
            f"3-source {mean3:+.2f} dB, {elapsed:.0f}s")


def test_06_ceiling_ordering(toy):
    manifest = toy["manifests"]["test2"]
    _, glob_gains, _ = _model_eval(toy, toy["model"], "test2", 2)
    _, seg_gains, _ = _model_eval(toy, toy["model"], "test2", 2,
                                  strategy="segment_kmeans_oracle")
    _, ibm_gains, _ = _eval_separation(
        lambda mixture, refs: oracle_ibm_separate(mixture, refs),
        manifest, 2, "ibm")

    bases = [
        train_bases([np.abs(stft(read_wav(p)).values) for p in family],
                    NMF_CFG, r=64, seed=3, source_id=name)
        for name, family in zip(("low", "mid"), toy["families"])
    ]
    _, nmf_gains, _ = _eval_separation(
        lambda mixture, refs: separate_nmf(mixture, bases, NMF_CFG),
        manifest, 2, "nmf")
    toy["cache"]["nmf_bases"] = bases

    ibm, seg = float(ibm_gains.mean()), float(seg_gains.mean())
    glob, nmf = float(glob_gains.mean()), float(nmf_gains.mean())
    ok = ibm >= seg >= glob > nmf
    verdict(6, "ceiling ordering", ok,
            f"mean SDRi dB: ibm {ibm:+.2f} >= segment-oracle {seg:+.2f} "
            f">= global {glob:+.2f} > nmf {nmf:+.2f}")


def test_07_k_sweep(toy, sweep):
    ari20 = float(_model_eval(toy, toy["model"], "test2", 2)[0].mean())
    ari5 = float(_model_eval(toy, sweep[5], "test2", 2)[0].mean())
    ari40 = float(_model_eval(toy, sweep[40], "test2", 2)[0].mean())
    ok = ari5 < ari20 and abs(ari20 - ari40) <= 0.05
    verdict(7, "K sweep", ok,
            f"held-out ARI K=5 {ari5:.3f} < K=20 {ari20:.3f}, "
            f"|K=20 - K=40| = {abs(ari20 - ari40):.3f}")


def test_08_determinism(toy):
    root = toy["root"]

    def fresh_rows():
        _, _, rows2 = _eval_separation(
            lambda mixture, refs: separate(
                mixture, toy["model"], k=2, strategy="global_kmeans",
                seed=TOY_EVAL_SEED),
            toy["manifests"]["test2"], 2, "global_kmeans")
        baseline = toy["cache"].get("nmf_bases")
        if baseline is None:
            baseline = [
                train_bases(
                    [np.abs(stft(read_wav(p)).values) for p in family],
                    NMF_CFG, r=64, seed=3, source_id=name)
                for name, family in zip(("low", "mid"), toy["families"])
            ]
            toy["cache"]["nmf_bases"] = baseline
        short = dataclasses.replace(toy["manifests"]["test2"],
                                    entries=toy["manifests"]["test2"].entries[:6])
        _, _, rows_nmf = _eval_separation(
            lambda mixture, refs: separate_nmf(mixture, baseline, NMF_CFG),
            short, 2, "nmf")
        return rows2 + rows_nmf

    reports = []
    for run in ("a", "b"):
        path = root / f"report_{run}.csv"
        write_sdr_report(path, fresh_rows())
        reports.append(path.read_bytes())
    csv_ok = reports[0] == reports[1]

    ckpts = []
    for run in ("a", "b"):
        _train_short = train(
            NetworkSpec(input_dim=129, blstm_layers=2,
                        hidden_per_direction=64, embedding_dim=20,
                        segment_len=100),
            toy["segments"][:40], epochs=2, seed=9,
            checkpoint_dir=root / f"retrain_{run}", learning_rate=1e-3,
            weight_noise_std=0.0, feature_scaler=toy["scaler"])
        ckpts.append(Path(_train_short.checkpoint_paths[-1]).read_bytes())
    retrain_ok = ckpts[0] == ckpts[1]

    ok = csv_ok and retrain_ok
    verdict(8, "byte determinism", ok,
            f"eval CSV identical: {csv_ok}, "
            f"2-epoch retrain checkpoint identical: {retrain_ok}")
