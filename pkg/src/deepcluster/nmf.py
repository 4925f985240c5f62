"""Supervised sparse NMF baseline.

Per-source bases are learned from clean magnitude spectrograms with
multiplicative updates (KL or Euclidean divergence, L1 penalty on the
activations).  At test time the concatenated bases are held fixed, the
mixture's activations are inferred with the same rule, and a Wiener-like
soft mask built from per-source reconstructions is applied to the complex
mixture at the center frame of each context stack.
"""

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import StftConfig, stft, istft
from .container import load_container, save_container
from .exceptions import ConfigError, DataError
from .separation import SeparationResult

NMF_MAGIC = "DCNMF1"
DEFAULT_RANK = 256
DEFAULT_CONTEXT = 8
DIVERGENCES = ("kl", "euclidean")
_EPS = 1e-12


@dataclass(frozen=True)
class NmfConfig:
    divergence: str = "kl"
    sparsity_lambda: float = 0.1
    max_iter: int = 200
    tol: float = 1e-5

    def __post_init__(self):
        if self.divergence not in DIVERGENCES:
            raise ConfigError(f"unknown divergence {self.divergence!r}")
        if self.sparsity_lambda < 0.0:
            raise ConfigError("sparsity_lambda must be >= 0")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")
        if self.tol < 0.0:
            raise ConfigError("tol must be >= 0")


@dataclass
class NmfBases:
    """One source's dictionary: (bins * context) x rank, unit columns."""

    basis: np.ndarray
    context: int
    source_id: str = ""

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=np.float64)
        if self.basis.ndim != 2:
            raise DataError("basis must be a matrix")
        if np.min(self.basis) < 0.0:
            raise DataError("basis entries must be nonnegative")
        if self.context < 1:
            raise DataError("context must be at least 1")
        if self.basis.shape[0] % self.context != 0:
            raise DataError("basis rows must be bins * context")
        norms = np.linalg.norm(self.basis, axis=0)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise DataError("basis columns must be L2-normalized")

    @property
    def rank(self):
        return self.basis.shape[1]

    @property
    def num_bins(self):
        return self.basis.shape[0] // self.context


def stack_context(magnitude, context):
    """Stack ``context`` consecutive frames per column.

    A frames x bins magnitude array becomes a (bins * context) x
    (frames - context + 1) matrix; column j holds frames j .. j+context-1
    in frame order.
    """
    mag = np.asarray(magnitude, dtype=np.float64)
    if mag.ndim != 2:
        raise DataError("magnitude must be frames x bins")
    if np.min(mag) < 0.0:
        raise DataError("magnitudes must be nonnegative")
    num_frames = mag.shape[0]
    if num_frames < context:
        raise DataError(
            f"need at least {context} frames to stack, got {num_frames}"
        )
    num_cols = num_frames - context + 1
    idx = np.arange(num_cols)[:, None] + np.arange(context)[None, :]
    stacked = mag[idx]  # (cols, context, bins)
    return stacked.reshape(num_cols, -1).T.copy()


def nmf_objective(v, basis, activations, config):
    recon = basis @ activations + _EPS
    if config.divergence == "kl":
        ratio = np.where(v > 0.0, v * np.log(np.maximum(v, _EPS) / recon), 0.0)
        fit = np.sum(ratio - v + recon)
    else:
        fit = 0.5 * np.sum((v - recon) ** 2)
    return fit + config.sparsity_lambda * np.sum(activations)


def _update_once(v, basis, activations, config, update_bases):
    lam = config.sparsity_lambda
    if config.divergence == "kl":
        recon = basis @ activations + _EPS
        numer = basis.T @ (v / recon)
        denom = basis.sum(axis=0)[:, None] + lam + _EPS
        activations *= numer / denom
        if update_bases:
            recon = basis @ activations + _EPS
            numer = (v / recon) @ activations.T
            denom = activations.sum(axis=1)[None, :] + _EPS
            basis *= numer / denom
    else:
        numer = basis.T @ v
        denom = basis.T @ (basis @ activations) + lam + _EPS
        activations *= numer / denom
        if update_bases:
            numer = v @ activations.T
            denom = basis @ (activations @ activations.T) + _EPS
            basis *= numer / denom
    return basis, activations


def factorize(v, basis, activations, config, update_bases=True):
    """Run multiplicative updates until ``tol`` or ``max_iter``.

    Returns (basis, activations, objective history); the history starts
    with the pre-update objective, so monotonicity is checkable.
    """
    v = np.asarray(v, dtype=np.float64)
    if np.min(v) < 0.0:
        raise DataError("NMF input must be nonnegative")
    basis = np.asarray(basis, dtype=np.float64).copy()
    activations = np.asarray(activations, dtype=np.float64).copy()
    history = [nmf_objective(v, basis, activations, config)]
    for _ in range(config.max_iter):
        basis, activations = _update_once(
            v, basis, activations, config, update_bases
        )
        obj = nmf_objective(v, basis, activations, config)
        prev = history[-1]
        history.append(obj)
        if abs(prev - obj) <= config.tol * max(1.0, abs(prev)):
            break
    return basis, activations, np.asarray(history)


def train_bases(magnitudes, config, r=DEFAULT_RANK, seed=0,
                context=DEFAULT_CONTEXT, source_id=""):
    """Learn an r-column dictionary from clean magnitude spectrograms.

    Each utterance is context-stacked on its own, so no column straddles
    utterance boundaries.  Columns are L2-normalized after convergence.
    """
    if r < 1:
        raise ConfigError("rank must be at least 1")
    if not magnitudes:
        raise DataError("need at least one magnitude array")
    v = np.hstack([stack_context(m, context) for m in magnitudes])
    if v.shape[1] < r:
        raise DataError(
            f"need at least {r} stacked columns to learn {r} bases, "
            f"got {v.shape[1]}"
        )
    rng = np.random.default_rng(int(seed))
    basis = rng.random((v.shape[0], r)) + 1e-2
    activations = rng.random((r, v.shape[1])) + 1e-2
    basis, _, _ = factorize(v, basis, activations, config, update_bases=True)
    norms = np.linalg.norm(basis, axis=0)
    uniform = np.full(v.shape[0], 1.0 / np.sqrt(v.shape[0]))
    for col in np.nonzero(norms <= _EPS)[0]:
        basis[:, col] = uniform
        norms[col] = 1.0
    basis /= norms
    return NmfBases(basis=basis, context=int(context), source_id=source_id)


def save_bases(path, bases):
    save_container(
        path,
        NMF_MAGIC,
        fields={"context": int(bases.context), "source_id": bases.source_id},
        tensors={"basis": bases.basis},
    )


def load_bases(path):
    fields, tensors = load_container(path, NMF_MAGIC)
    return NmfBases(
        basis=tensors["basis"],
        context=int(fields["context"]),
        source_id=str(fields["source_id"]),
    )


def separate_nmf(mixture, bases_list, config=None, stft_config=None, seed=0):
    """Separate a mixture with per-source dictionaries held fixed.

    Activations are inferred on the context-stacked mixture magnitude;
    each source's reconstruction M_c yields the soft mask
    M_c^2 / sum_c' M_c'^2, read off at the frame's own position inside the
    column centered (nearest, at the edges) on that frame.
    """
    started = time.perf_counter()
    if len(bases_list) < 2:
        raise ConfigError("separation needs at least 2 sources' bases")
    context = bases_list[0].context
    rows = bases_list[0].basis.shape[0]
    for b in bases_list:
        if b.context != context or b.basis.shape[0] != rows:
            raise DataError("bases disagree on context or bin count")
    config = config if config is not None else NmfConfig()
    stft_config = stft_config if stft_config is not None else StftConfig()
    spec_x = stft(mixture, stft_config)
    num_frames, num_bins = spec_x.values.shape
    if rows != num_bins * context:
        raise DataError(
            f"bases cover {rows // context} bins but the STFT has {num_bins}"
        )
    v = stack_context(np.abs(spec_x.values), context)
    num_cols = v.shape[1]
    joint = np.hstack([b.basis for b in bases_list])
    rng = np.random.default_rng(int(seed))
    activations = rng.random((joint.shape[1], num_cols)) + 1e-2
    _, activations, _ = factorize(v, joint, activations, config,
                                  update_bases=False)

    k = len(bases_list)
    estimates_sq = np.empty((k, num_frames, num_bins))
    offsets = np.cumsum([0] + [b.rank for b in bases_list])
    frame_idx = np.arange(num_frames)
    col_idx = np.clip(frame_idx - context // 2, 0, num_cols - 1)
    pos_idx = frame_idx - col_idx  # the frame's slot inside its column
    for c in range(k):
        recon = bases_list[c].basis @ activations[offsets[c] : offsets[c + 1]]
        stacks = recon.T.reshape(num_cols, context, num_bins)
        estimates_sq[c] = stacks[col_idx, pos_idx] ** 2
    total = estimates_sq.sum(axis=0)
    masks = np.where(total > 0.0, estimates_sq / np.where(total > 0.0, total, 1.0),
                     1.0 / k)
    estimates = [
        istft(spec_x.masked(masks[c]), num_samples=len(mixture))
        for c in range(k)
    ]
    model_id = "+".join(b.source_id or f"src{i}"
                        for i, b in enumerate(bases_list))
    return SeparationResult(
        masks=masks,
        estimates=estimates,
        strategy="nmf",
        model_id=model_id,
        timing_ms=(time.perf_counter() - started) * 1000.0,
    )
