"""Supervised sparse-NMF baseline on the same held-out mixture.

One nonnegative dictionary is learned per speaker from that speaker's
clean training spectrograms (context-stacked frames, multiplicative
updates, sparsity penalty on activations). At test time both
dictionaries are held fixed, activations are inferred on the mixture,
and each source's reconstruction yields a Wiener-like soft mask.

Unlike the embedding network this baseline must know who is in the
mixture, which is exactly why it makes a fair floor: given that oracle
knowledge, how close does speaker-independent clustering come?

Needs demo_out from 02 and a model from 03. Run time well under a minute.
"""

from pathlib import Path

import numpy as np

from deepcluster.audio import read_wav, stft
from deepcluster.data import MixtureManifest, load_mixture_entry
from deepcluster.metrics import sdr_improvement
from deepcluster.nmf import NmfConfig, separate_nmf, train_bases
from deepcluster.separation import EmbeddingModel, separate


def family_bases(directory, config):
    mags = [np.abs(stft(read_wav(p)).values)
            for p in sorted(Path(directory).glob("*.wav"))]
    return train_bases(mags, config, r=64, source_id=Path(directory).name)


def main():
    config = NmfConfig(divergence="kl", sparsity_lambda=0.1, max_iter=60)
    low = family_bases("demo_out/sources/low", config)
    high = family_bases("demo_out/sources/high", config)
    print(f"dictionaries: {low.rank} + {high.rank} bases, "
          f"context {low.context} frames")

    manifest = MixtureManifest.load("demo_out/heldout/manifest.jsonl")
    entry = manifest.entries[0]
    mixture, references = load_mixture_entry(entry)

    nmf_result = separate_nmf(mixture, [low, high], config)
    nmf_report = sdr_improvement(mixture, nmf_result.estimates, references)
    print(f"{entry.mixture_id} NMF: {nmf_report.mean_improvement_db:+.2f} dB")

    model = EmbeddingModel.from_checkpoint("demo_out/model/best.ckpt")
    emb_result = separate(mixture, model, k=2, strategy="global_kmeans",
                          seed=0)
    emb_report = sdr_improvement(mixture, emb_result.estimates, references)
    print(f"{entry.mixture_id} embeddings: "
          f"{emb_report.mean_improvement_db:+.2f} dB "
          f"(no speaker identity needed)")


if __name__ == "__main__":
    main()
