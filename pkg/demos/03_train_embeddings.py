"""Train the embedding network on the demo corpus.

Each mixture becomes 100-frame segments of log-magnitude features labeled
by which source dominates each bin. The network never sees those labels
directly; the loss only asks that bins with the same owner get nearby
embeddings. Features are standardized per frequency bin before training
(raw log-magnitudes sit several units below zero, which pins the LSTM
gates at their rails), and the fitted scaler travels inside every
checkpoint so separation can replay it.

Needs demo_out/corpus from 02_make_corpus.py. Writes checkpoints to
demo_out/model; a couple of minutes on a laptop CPU.
"""

from deepcluster.data import (
    FeatureScaler,
    MixtureManifest,
    segments_from_manifest,
)
from deepcluster.network import NetworkSpec, train


def main():
    manifest = MixtureManifest.load("demo_out/corpus/manifest.jsonl")
    segments = segments_from_manifest(manifest, silence_mode="mixture")
    print(f"{len(segments)} segments from {len(manifest.entries)} mixtures")

    scaler = FeatureScaler.fit(segments)
    print(f"feature scaler: mean range [{scaler.mean.min():.2f}, "
          f"{scaler.mean.max():.2f}]")

    spec = NetworkSpec(input_dim=129, blstm_layers=2,
                       hidden_per_direction=32, embedding_dim=10,
                       segment_len=100)
    result = train(spec, segments, epochs=12, seed=7,
                   checkpoint_dir="demo_out/model", learning_rate=1e-3,
                   weight_noise_std=0.0, feature_scaler=scaler,
                   log_path="demo_out/model/loss_log.csv")

    losses = result.epoch_mean_losses
    print(f"epoch mean loss: {losses[0]:.1f} -> {losses[-1]:.1f} "
          f"({1.0 - losses[-1] / losses[0]:.0%} drop)")
    print(f"best checkpoint (epoch {result.best_epoch}): {result.best_path}")


if __name__ == "__main__":
    main()
