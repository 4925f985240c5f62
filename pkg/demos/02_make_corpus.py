"""Build the synthetic two-speaker corpus the other demos use.

Two families of harmonic sources stand in for two speakers: one pitched
around 100 Hz, one around 240 Hz. The manifest records which files were
mixed at which SNR; everything downstream is derived deterministically
from it, so the corpus is fully described by this script's seeds.

Writes demo_out/corpus with sources, mixtures, references, and
manifest.jsonl plus a smaller held-out set under demo_out/heldout.
"""

from pathlib import Path

from deepcluster.audio import measure_snr_db, write_wav
from deepcluster.data import (
    SynthSourceSpec,
    build_manifest,
    load_mixture_entry,
    synth_source,
)

LOW_F0 = [97.0, 109.0, 121.0, 127.0]
HIGH_F0 = [211.0, 229.0, 251.0, 269.0]


def write_family(directory, f0_values, seeds=2):
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for f0 in f0_values:
        for seed in range(seeds):
            path = directory / f"f0{f0:g}_s{seed}.wav"
            write_wav(path, synth_source(SynthSourceSpec(f0_hz=f0, seed=seed)))
            files.append(str(path))
    return files


def write_corpus(out_dir, manifest):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest.save(out_dir / "manifest.jsonl")
    for entry in manifest.entries:
        mixture, scaled = load_mixture_entry(entry)
        write_wav(out_dir / f"{entry.mixture_id}.wav", mixture)
        for j, ref in enumerate(scaled):
            write_wav(out_dir / f"{entry.mixture_id}.ref{j}.wav", ref)


def main():
    root = Path("demo_out")
    low = write_family(root / "sources" / "low", LOW_F0)
    high = write_family(root / "sources" / "high", HIGH_F0)
    print(f"{len(low) + len(high)} clean sources")

    train = build_manifest([low, high], count=40, snr_range=(0.0, 5.0), seed=11)
    heldout = build_manifest([low, high], count=6, snr_range=(0.0, 5.0), seed=12)
    write_corpus(root / "corpus", train)
    write_corpus(root / "heldout", heldout)
    print(f"{len(train.entries)} training mixtures, {len(heldout.entries)} held out")

    # sanity: re-mix an entry and confirm the SNR written to the manifest
    entry = train.entries[0]
    _, scaled = load_mixture_entry(entry)
    measured = measure_snr_db(scaled[0], scaled[1])
    print(f"{entry.mixture_id}: requested {entry.snr_db[0]:+.2f} dB, "
          f"measured {measured:+.2f} dB")


if __name__ == "__main__":
    main()
