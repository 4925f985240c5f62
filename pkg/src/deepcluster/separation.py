"""End-to-end inference: mixture in, k estimated sources out.

The pipeline is STFT, log-magnitude features, per-segment embedding,
clustering, per-bin masks, and inverse STFT.  ``oracle_ibm_separate``
computes the ideal-binary-mask ceiling from reference sources using the
same plumbing.
"""

import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Spectrogram, StftConfig, Waveform, istft, stft, write_wav
from .clustering import cluster_utterance, oracle_permutation
from .data import (
    FeatureScaler,
    ideal_binary_mask,
    inference_segment_starts,
    log_magnitude,
    silence_weights,
)
from .exceptions import ConfigError, DataError
from .network import NetworkSpec, forward, load_checkpoint

MASK_SUM_TOL = 1e-9


@dataclass
class EmbeddingModel:
    """Immutable inference bundle: trained parameters plus their spec.

    ``scaler`` replays the training-time feature standardization; it is
    None for models trained on raw features.
    """

    params: dict
    spec: NetworkSpec
    model_id: str = ""
    scaler: FeatureScaler | None = None

    @classmethod
    def from_checkpoint(cls, path):
        params, spec, _, extras = load_checkpoint(path)
        return cls(params=params, spec=spec, model_id=Path(path).name,
                   scaler=extras.get("feature_scaler"))


@dataclass
class SeparationResult:
    """k masks over the mixture plane and the waveforms they produce.

    Clustering strategies emit hard 0/1 masks; the NMF baseline emits soft
    ones.  Either way every bin's masks sum to one, so the estimates sum
    back to the (round-tripped) mixture.
    """

    masks: np.ndarray  # (k, frames, bins), entries in [0, 1]
    estimates: list    # k Waveforms of equal length
    strategy: str
    model_id: str = ""
    timing_ms: float = 0.0

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float64)
        if self.masks.ndim != 3:
            raise DataError("masks must have shape (k, frames, bins)")
        if np.min(self.masks) < 0.0 or np.max(self.masks) > 1.0:
            raise DataError("mask entries must lie in [0, 1]")
        sums = self.masks.sum(axis=0)
        if np.max(np.abs(sums - 1.0)) > MASK_SUM_TOL:
            raise DataError("masks must partition the plane (sum to 1 per bin)")
        if len(self.estimates) != self.masks.shape[0]:
            raise DataError("one estimate per mask required")
        lengths = {len(e) for e in self.estimates}
        if len(lengths) > 1:
            raise DataError("estimates must share one length")

    @property
    def k(self):
        return self.masks.shape[0]


def _labels_to_masks(grid, k):
    return np.stack([(grid == c)for c in range(k)]).astype(np.float64)


def _warn_empty(masks):
    for c in range(masks.shape[0]):
        if not masks[c].any():
            warnings.warn(
                f"cluster {c} is empty; its estimate will be silent",
                stacklevel=3,
            )


def _resynthesize(spec_x, masks, num_samples):
    return [
        istft(spec_x.masked(masks[c]), num_samples=num_samples)
        for c in range(masks.shape[0])
    ]


def separate(mixture, model, k, strategy, seed, references=None,
             stft_config=None, active_threshold_db=-40.0):
    """Estimate ``k`` sources from a single-channel mixture.

    ``references`` (clean Waveforms aligned with the mixture) are only
    consulted by the segment-level strategies, where they pin each
    segment's arbitrary cluster numbering to a fixed source order via
    exhaustive alignment.  The global strategy ignores them.

    Cluster geometry is fit on bins whose mixture magnitude is within
    ``active_threshold_db`` of the mixture peak; the training loss ignores
    quieter bins, so their embeddings are arbitrary and would otherwise
    pull centroids toward one silence blob.  Every bin still gets a label
    (nearest centroid).  Pass None to fit on all bins.
    """
    started = time.perf_counter()
    if k < 2:
        raise ConfigError("separation needs k >= 2 clusters")
    config = stft_config if stft_config is not None else StftConfig()
    spec_x = stft(mixture, config)
    features = log_magnitude(spec_x)
    num_frames, num_bins = features.shape
    if num_bins != model.spec.input_dim:
        raise DataError(
            f"model expects {model.spec.input_dim} feature bins, "
            f"the STFT produced {num_bins}"
        )
    if model.scaler is not None:
        features = model.scaler.apply(features)
    seg_len = model.spec.segment_len
    starts = inference_segment_starts(num_frames, seg_len)
    embeddings = [
        forward(model.params, model.spec, features[s : s + seg_len])[0].values
        for s in starts
    ]
    weights = None
    if active_threshold_db is not None:
        active = silence_weights(
            [spec_x], threshold_db=active_threshold_db, mode="mixture"
        ).reshape(num_frames, num_bins)
        weights = [active[s : s + seg_len].reshape(-1) for s in starts]
    segment_labels = cluster_utterance(embeddings, k, strategy, seed, weights)

    if strategy != "global_kmeans" and references is not None:
        segment_masks = [
            _labels_to_masks(lab.reshape(seg_len, num_bins), k)
            for lab in segment_labels
        ]
        ref_specs = [stft(r, config) for r in references]
        perms = oracle_permutation(segment_masks, starts, spec_x, ref_specs)
        aligned = []
        for lab, perm in zip(segment_labels, perms):
            # perm[j] is the cluster serving source j; invert so that
            # cluster perm[j] is renamed j
            mapping = np.empty(k, dtype=np.int64)
            for j, c in enumerate(perm):
                mapping[c] = j
            aligned.append(mapping[lab])
        segment_labels = aligned

    # later segments own overlapped frames, so write in order and let the
    # tail segment overwrite
    grid = np.empty((num_frames, num_bins), dtype=np.int64)
    for s, lab in zip(starts, segment_labels):
        grid[s : s + seg_len] = lab.reshape(seg_len, num_bins)
    masks = _labels_to_masks(grid, k)
    _warn_empty(masks)
    estimates = _resynthesize(spec_x, masks, len(mixture))
    return SeparationResult(
        masks=masks,
        estimates=estimates,
        strategy=strategy,
        model_id=model.model_id,
        timing_ms=(time.perf_counter() - started) * 1000.0,
    )


def oracle_ibm_separate(mixture, references, stft_config=None):
    """Separate with the ideal binary mask of the true sources.

    This is the performance ceiling for any binary-masking method.  With
    identical references every bin ties and the lowest source index wins,
    so one mask is all-ones; that is the documented tie rule, not an error.
    """
    started = time.perf_counter()
    if len(references) < 2:
        raise ConfigError("the mask oracle needs at least 2 references")
    for ref in references:
        if len(ref) != len(mixture):
            raise DataError("references must align with the mixture")
        if ref.sample_rate_hz != mixture.sample_rate_hz:
            raise DataError("references must share the mixture sample rate")
    config = stft_config if stft_config is not None else StftConfig()
    spec_x = stft(mixture, config)
    ref_specs = [stft(r, config) for r in references]
    labels = ideal_binary_mask(ref_specs)
    k = len(references)
    grid = labels.classes().reshape(spec_x.values.shape)
    masks = _labels_to_masks(grid, k)
    _warn_empty(masks)
    estimates = _resynthesize(spec_x, masks, len(mixture))
    return SeparationResult(
        masks=masks,
        estimates=estimates,
        strategy="oracle_ibm",
        model_id="ibm",
        timing_ms=(time.perf_counter() - started) * 1000.0,
    )


def write_estimates(result, out_dir, mixture_id):
    """Write one WAV per estimate as <mixture_id>.src<i>.wav; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, estimate in enumerate(result.estimates):
        path = out_dir / f"{mixture_id}.src{i}.wav"
        write_wav(path, estimate)
        paths.append(path)
    return paths


def write_mask_pgm(mask, path):
    """Dump one mask as a binary PGM image for eyeballing.

    Columns are frames, rows are frequency bins with bin 0 at the bottom.
    A fully active bin is 255.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise DataError("mask must be frames x bins")
    img = np.round(np.clip(mask, 0.0, 1.0) * 255.0).astype(np.uint8)
    img = img.T[::-1]  # (bins, frames), top row = highest bin
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(img.tobytes())
