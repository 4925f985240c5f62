"""Separation pipeline: partition invariants, reconstruction linearity,
determinism, segment alignment, the IBM ceiling, and output files."""

import warnings

import numpy as np
import pytest

from deepcluster import ConfigError, DataError
from deepcluster.audio import (
    StftConfig,
    Waveform,
    istft,
    mix_sources,
    read_wav,
    stft,
)
from deepcluster.metrics import mask_ari, sdr
from deepcluster.network import NetworkSpec, init_params
from deepcluster.separation import (
    EmbeddingModel,
    SeparationResult,
    oracle_ibm_separate,
    separate,
    write_estimates,
    write_mask_pgm,
)

RATE = 8000


def toy_model(seed=0, input_dim=129, segment_len=100):
    spec = NetworkSpec(
        input_dim=input_dim, blstm_layers=1, hidden_per_direction=4,
        embedding_dim=4, segment_len=segment_len,
    )
    return EmbeddingModel(init_params(spec, seed=seed), spec, f"toy{seed}")


def tone(bin_indices, num_samples=RATE, seed=None):
    # on-bin cosines so STFT energy stays put
    t = np.arange(num_samples) / RATE
    x = np.zeros(num_samples)
    for b in bin_indices:
        x += np.cos(2 * np.pi * (b * RATE / 256) * t)
    return Waveform(0.4 * x / np.max(np.abs(x)), RATE)


def noise_mixture(seed=0, num_samples=RATE):
    rng = np.random.default_rng(seed)
    return Waveform(0.2 * rng.standard_normal(num_samples), RATE)


def test_masks_partition_and_estimates_sum_to_mixture():
    mixture = noise_mixture(1)
    result = separate(mixture, toy_model(2), k=2, strategy="global_kmeans",
                      seed=3)
    assert result.masks.shape[0] == 2
    assert set(np.unique(result.masks)) <= {0.0, 1.0}
    np.testing.assert_array_equal(result.masks.sum(axis=0),
                                  np.ones(result.masks.shape[1:]))
    total = sum(e.samples for e in result.estimates)
    round_trip = istft(stft(mixture, StftConfig()),
                       num_samples=len(mixture)).samples
    np.testing.assert_allclose(total, round_trip, atol=1e-10)
    for e in result.estimates:
        assert len(e) == len(mixture)


def test_separate_deterministic():
    mixture = noise_mixture(4)
    a = separate(mixture, toy_model(5), k=2, strategy="global_kmeans", seed=6)
    b = separate(mixture, toy_model(5), k=2, strategy="global_kmeans", seed=6)
    np.testing.assert_array_equal(a.masks, b.masks)
    for ea, eb in zip(a.estimates, b.estimates):
        np.testing.assert_array_equal(ea.samples, eb.samples)
    assert a.model_id == "toy5"
    assert a.timing_ms > 0.0


def test_separate_k3_with_any_model():
    result = separate(noise_mixture(7), toy_model(8), k=3,
                      strategy="global_kmeans", seed=9)
    assert result.k == 3
    assert len(result.estimates) == 3


def test_separate_guards():
    model = toy_model(10)
    with pytest.raises(ConfigError, match="k >= 2"):
        separate(noise_mixture(11), model, k=1, strategy="global_kmeans",
                 seed=0)
    short = Waveform(np.ones(2000) * 0.1, RATE)  # 34 frames < 100
    with pytest.raises(DataError, match="shorter"):
        separate(short, model, k=2, strategy="global_kmeans", seed=0)
    narrow = toy_model(12, input_dim=64)
    with pytest.raises(DataError, match="feature bins"):
        separate(noise_mixture(13), narrow, k=2, strategy="global_kmeans",
                 seed=0)


def test_separate_empty_cluster_warns_and_pads():
    # a head of zeros makes every embedding row identical, so one cluster
    # takes everything and the other ends up empty
    model = toy_model(14)
    model.params["out.weight"][:] = 0.0
    model.params["out.bias"][:] = 0.0
    with pytest.warns(UserWarning, match="empty"):
        result = separate(noise_mixture(15), model, k=2,
                          strategy="global_kmeans", seed=16)
    assert result.k == 2
    counts = sorted(result.masks.sum(axis=(1, 2)))
    assert counts[0] == 0.0
    silent = result.estimates[int(np.argmin(result.masks.sum(axis=(1, 2))))]
    np.testing.assert_array_equal(silent.samples, np.zeros(len(silent)))


def test_segment_alignment_only_permutes_within_segments():
    sources = [tone([10]), tone([40])]
    mixture, scaled = mix_sources(sources, [0.0])
    model = toy_model(17)
    plain = separate(mixture, model, k=2, strategy="segment_kmeans_oracle",
                     seed=18)
    aligned = separate(mixture, model, k=2, strategy="segment_kmeans_oracle",
                       seed=18, references=scaled)
    np.testing.assert_array_equal(aligned.masks.sum(axis=0),
                                  np.ones(aligned.masks.shape[1:]))
    # per segment the grouping is untouched, only the numbering moves
    grid_a = np.argmax(plain.masks, axis=0)
    grid_b = np.argmax(aligned.masks, axis=0)
    frames = grid_a.shape[0]
    starts = [0, frames - 100]
    owned = [(0, starts[1]), (starts[1], frames)]
    for lo, hi in owned:
        assert mask_ari(grid_b[lo:hi].ravel(), grid_a[lo:hi].ravel()) == 1.0


def test_ibm_disjoint_sources_near_perfect():
    sources = [tone([10, 11, 12]), tone([40, 41, 42])]
    mixture, scaled = mix_sources(sources, [0.0])
    result = oracle_ibm_separate(mixture, scaled)
    assert result.strategy == "oracle_ibm"
    for estimate, reference in zip(result.estimates, scaled):
        assert sdr(estimate, reference) >= 20.0


def test_ibm_identical_sources_tie_to_lowest():
    src = tone([20, 21])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # the all-zero second mask warns
        result = oracle_ibm_separate(Waveform(src.samples * 2, RATE),
                                     [src, src])
    assert np.all(result.masks[0] == 1.0)
    assert np.all(result.masks[1] == 0.0)


def test_ibm_guards():
    src = tone([20])
    with pytest.raises(ConfigError, match="at least 2"):
        oracle_ibm_separate(src, [src])
    other = Waveform(np.ones(4000) * 0.1, RATE)
    with pytest.raises(DataError, match="align"):
        oracle_ibm_separate(src, [src, other])


def test_result_validation():
    est = [Waveform(np.zeros(100), RATE), Waveform(np.zeros(100), RATE)]
    good = np.zeros((2, 4, 3))
    good[0] = 1.0
    SeparationResult(good, est, "global_kmeans")
    bad = good.copy()
    bad[1, 0, 0] = 1.0  # bin now claimed twice
    with pytest.raises(DataError, match="partition"):
        SeparationResult(bad, est, "global_kmeans")
    with pytest.raises(DataError, match="one estimate"):
        SeparationResult(good, est[:1], "global_kmeans")
    soft = np.full((2, 4, 3), 0.5)
    SeparationResult(soft, est, "nmf")  # soft masks are fine


def test_write_estimates_and_pgm(tmp_path):
    mixture = noise_mixture(19)
    result = separate(mixture, toy_model(20), k=2, strategy="global_kmeans",
                      seed=21)
    paths = write_estimates(result, tmp_path, "mix000007")
    assert [p.name for p in paths] == ["mix000007.src0.wav",
                                       "mix000007.src1.wav"]
    back = read_wav(paths[0])
    assert len(back) == len(mixture)
    pgm = tmp_path / "mask0.pgm"
    write_mask_pgm(result.masks[0], pgm)
    blob = pgm.read_bytes()
    frames, bins = result.masks[0].shape
    header = f"P5\n{frames} {bins}\n255\n".encode()
    assert blob.startswith(header)
    body = np.frombuffer(blob[len(header):], dtype=np.uint8)
    assert body.size == frames * bins
    assert set(np.unique(body)) <= {0, 255}
    # bottom row of the image is bin 0
    np.testing.assert_array_equal(
        body.reshape(bins, frames)[-1],
        (result.masks[0][:, 0] * 255).astype(np.uint8),
    )


def test_separate_checkpoint_scaler_round_trip(tmp_path):
    from deepcluster.data import FeatureScaler
    from deepcluster.network import OptimizerState, save_checkpoint

    base = toy_model(22)
    scaler = FeatureScaler(np.linspace(-2.0, 1.0, 129),
                           np.linspace(0.3, 1.2, 129))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, base.params, base.spec, OptimizerState(),
                    scaler=scaler)
    model = EmbeddingModel.from_checkpoint(path)
    assert model.scaler is not None
    np.testing.assert_array_equal(model.scaler.mean, scaler.mean)

    mixture = noise_mixture(23)
    scaled = separate(mixture, model, k=2, strategy="global_kmeans", seed=24)
    plain = separate(mixture, base, k=2, strategy="global_kmeans", seed=24)
    assert not np.array_equal(scaled.masks, plain.masks)

    # an identity scaler must be a no-op
    ident = EmbeddingModel(base.params, base.spec, "ident",
                           scaler=FeatureScaler.identity(129))
    same = separate(mixture, ident, k=2, strategy="global_kmeans", seed=24)
    np.testing.assert_array_equal(same.masks, plain.masks)


def test_separate_active_threshold_controls_fit():
    # one loud on-bin tone plus a floor of near-silence: with the default
    # threshold the fit sees only the loud bins, yet every bin gets a label
    quiet = noise_mixture(25)
    loud = tone([20, 21])
    mixture = Waveform(quiet.samples * 1e-4 + loud.samples, RATE)
    for threshold in (-40.0, None):
        result = separate(mixture, toy_model(26), k=2,
                          strategy="global_kmeans", seed=27,
                          active_threshold_db=threshold)
        np.testing.assert_array_equal(result.masks.sum(axis=0),
                                      np.ones(result.masks.shape[1:]))
