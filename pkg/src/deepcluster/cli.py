"""Batch command-line entry points.

Every command reads settings with the same precedence (defaults, then the
--config INI file, then ``--section.key=value`` overrides, then dedicated
flags, with DC_SEED trumping the master seed), writes a final machine
line ``STATUS: ok`` or ``STATUS: error <detail>``, and exits 0 on success,
1 on usage problems, 2 on data or format problems, 3 on numeric failure.
"""

import argparse
import itertools
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics
from . import network
from . import nmf as nmf_mod
from . import objective
from . import separation
from .audio import (
    PIPELINE_RATE_HZ,
    Waveform,
    istft,
    read_wav,
    resample_to_8k,
    stft,
    write_wav,
)
from .clustering import STRATEGIES, oracle_permutation
from .config import load_run_config
from .exceptions import (
    ConfigError,
    DataError,
    DivergenceError,
    FormatError,
)


class _Parser(argparse.ArgumentParser):
    # usage problems must map to exit code 1, not argparse's default 2
    def error(self, message):
        raise ConfigError(message)


def _read_audio(path):
    wav = read_wav(path)
    if wav.sample_rate_hz != PIPELINE_RATE_HZ:
        wav = resample_to_8k(wav)
    return wav


def _pick(flag_value, config, section, key):
    return flag_value if flag_value is not None else config.get(section, key)


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(config, args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    f0_values = [float(tok) for tok in args.f0.split(",") if tok.strip()]
    if not f0_values:
        raise ConfigError("--f0 needs at least one value")
    count = 0
    for f0 in f0_values:
        for offset in range(args.num_seeds):
            spec = data_mod.SynthSourceSpec(
                f0_hz=f0,
                num_harmonics=args.harmonics,
                duration_s=args.duration,
                seed=config.seed + offset,
            )
            wav = data_mod.synth_source(spec)
            write_wav(out_dir / f"f0{f0:g}_s{offset}.wav", wav)
            count += 1
    print(f"wrote {count} source files to {out_dir}")


def cmd_mix(config, args):
    source_lists = []
    for directory in args.sources:
        files = sorted(str(p.resolve()) for p in Path(directory).glob("*.wav"))
        if not files:
            raise DataError(f"no WAV files found in {directory}")
        source_lists.append(files)
    count = _pick(args.count, config, "data", "mix_count")
    snr_range = (
        _pick(args.snr_min, config, "data", "snr_min_db"),
        _pick(args.snr_max, config, "data", "snr_max_db"),
    )
    three = args.three_speaker or config.get("data", "three_speaker")
    manifest = data_mod.build_manifest(
        source_lists, count=count, snr_range=snr_range, seed=config.seed,
        three_speaker=three,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest.save(out_dir / "manifest.jsonl")
    for entry in manifest.entries:
        mixture, scaled = data_mod.load_mixture_entry(entry)
        write_wav(out_dir / f"{entry.mixture_id}.wav", mixture)
        for j, source in enumerate(scaled):
            write_wav(out_dir / f"{entry.mixture_id}.ref{j}.wav", source)
    print(f"wrote manifest and {len(manifest.entries)} mixtures to {out_dir}")


def cmd_train(config, args):
    manifest = data_mod.MixtureManifest.load(args.manifest)
    spec = config.network_spec()
    segments = data_mod.segments_from_manifest(
        manifest,
        stft_config=config.stft_config(),
        silence_threshold_db=config.get("data", "silence_threshold_db"),
        silence_mode=config.get("data", "silence_mode"),
        segment_len=spec.segment_len,
        base_dir=Path(args.manifest).parent,
    )
    checkpoint_dir = Path(
        args.checkpoint_dir
        if args.checkpoint_dir is not None
        else config.get("paths", "checkpoint_dir")
    )
    log_path = Path(args.log) if args.log else checkpoint_dir / "loss_log.csv"
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    # resumed runs carry their scaler in the checkpoint
    scaler = None
    if args.resume is None:
        scaler = data_mod.FeatureScaler.fit(segments)
    result = network.train(
        spec,
        segments,
        epochs=_pick(args.epochs, config, "optimizer", "epochs"),
        seed=config.seed,
        checkpoint_dir=checkpoint_dir,
        learning_rate=_pick(args.learning_rate, config, "optimizer",
                            "learning_rate"),
        momentum=config.get("optimizer", "momentum"),
        weight_noise_std=_pick(args.weight_noise_std, config, "optimizer",
                               "weight_noise_std"),
        loss_config=config.loss_config(),
        log_path=log_path,
        init_from=args.init_from,
        resume_from=args.resume,
        feature_scaler=scaler,
    )
    print(
        f"trained {len(segments)} segments for "
        f"{len(result.epoch_mean_losses)} epochs; "
        f"final mean loss {result.epoch_mean_losses[-1]:.6g}; "
        f"best checkpoint {result.best_path}"
    )


def cmd_separate(config, args):
    model = separation.EmbeddingModel.from_checkpoint(args.checkpoint)
    mixture = _read_audio(args.mixture)
    references = None
    if args.references:
        references = [_read_audio(p) for p in args.references]
    result = separation.separate(
        mixture,
        model,
        k=_pick(args.k, config, "clustering", "k"),
        strategy=_pick(args.strategy, config, "clustering", "strategy"),
        seed=config.seed,
        references=references,
        stft_config=config.stft_config(),
        active_threshold_db=config.get("clustering", "active_threshold_db"),
    )
    out_dir = Path(args.out)
    mixture_id = Path(args.mixture).stem
    paths = separation.write_estimates(result, out_dir, mixture_id)
    if args.dump_masks:
        for i in range(result.k):
            separation.write_mask_pgm(
                result.masks[i], out_dir / f"{mixture_id}.mask{i}.pgm"
            )
    print(
        f"wrote {len(paths)} estimates for {mixture_id} "
        f"({result.strategy}, {result.timing_ms:.1f} ms)"
    )


def _report_rows(report, mixture_id, strategy_label):
    rows = []
    perm = metrics.format_permutation(report.permutation)
    for idx, (value, gain) in enumerate(
        zip(report.per_source_sdr_db, report.per_source_sdr_improvement_db)
    ):
        rows.append(
            {
                "mixture_id": mixture_id,
                "source_idx": idx,
                "sdr_db": value,
                "sdr_improvement_db": gain,
                "permutation": perm,
                "mode": report.mode,
                "strategy": strategy_label,
            }
        )
    return rows


def cmd_evaluate(config, args):
    mode = args.mode if args.mode is not None else "filtered"
    label = args.strategy_label or ""
    rows = []
    gains = []
    if args.manifest:
        if not args.estimate_dir:
            raise ConfigError("--estimate-dir is required with --manifest")
        manifest = data_mod.MixtureManifest.load(args.manifest)
        est_dir = Path(args.estimate_dir)
        for entry in manifest.entries:
            mixture, scaled = data_mod.load_mixture_entry(
                entry, base_dir=Path(args.manifest).parent
            )
            estimates = [
                _read_audio(est_dir / f"{entry.mixture_id}.src{i}.wav")
                for i in range(len(entry.source_paths))
            ]
            report = metrics.sdr_improvement(mixture, estimates, scaled,
                                             mode=mode)
            rows.extend(_report_rows(report, entry.mixture_id, label))
            gains.extend(report.per_source_sdr_improvement_db)
    else:
        if not (args.mixture and args.estimates and args.references):
            raise ConfigError(
                "either --manifest/--estimate-dir or all of --mixture, "
                "--estimates, --references are required"
            )
        if len(args.estimates) != len(args.references):
            raise DataError(
                f"{len(args.estimates)} estimates vs "
                f"{len(args.references)} references"
            )
        mixture = _read_audio(args.mixture)
        estimates = [_read_audio(p) for p in args.estimates]
        references = [_read_audio(p) for p in args.references]
        report = metrics.sdr_improvement(mixture, estimates, references,
                                         mode=mode)
        rows.extend(_report_rows(report, Path(args.mixture).stem, label))
        gains.extend(report.per_source_sdr_improvement_db)
    metrics.write_sdr_report(args.out, rows)
    print(
        f"evaluated {len(gains)} sources; "
        f"mean SDR improvement {float(np.mean(gains)):.3f} dB; "
        f"report at {args.out}"
    )


def cmd_nmf_train(config, args):
    magnitudes = []
    for path in args.wavs:
        spec = stft(_read_audio(path), config.stft_config())
        magnitudes.append(np.abs(spec.values))
    nmf_config = config.nmf_config()
    if args.divergence is not None:
        nmf_config = nmf_mod.NmfConfig(
            divergence=args.divergence,
            sparsity_lambda=nmf_config.sparsity_lambda,
            max_iter=nmf_config.max_iter,
            tol=nmf_config.tol,
        )
    source_id = args.source_id or Path(args.out).stem
    bases = nmf_mod.train_bases(
        magnitudes,
        nmf_config,
        r=_pick(args.rank, config, "nmf", "rank"),
        seed=config.seed,
        context=_pick(args.context, config, "nmf", "context"),
        source_id=source_id,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    nmf_mod.save_bases(args.out, bases)
    print(
        f"trained {bases.rank} bases (context {bases.context}) "
        f"for {source_id} at {args.out}"
    )


def cmd_nmf_separate(config, args):
    bases = [nmf_mod.load_bases(p) for p in args.bases]
    mixture = _read_audio(args.mixture)
    result = nmf_mod.separate_nmf(
        mixture,
        bases,
        config=config.nmf_config(),
        stft_config=config.stft_config(),
        seed=config.seed,
    )
    mixture_id = Path(args.mixture).stem
    paths = separation.write_estimates(result, Path(args.out), mixture_id)
    print(f"wrote {len(paths)} NMF estimates for {mixture_id}")


# ---------------------------------------------------------------------------
# Selfcheck


def _check_loss_equivalence(seed):
    rng = np.random.default_rng([seed, 99])
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(20, 81))
        k = int(rng.integers(2, 7))
        c = int(rng.integers(2, 4))
        raw = rng.standard_normal((n, k))
        rows = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        indicator = np.zeros((n, c))
        indicator[np.arange(n), rng.integers(c, size=n)] = 1.0
        labels = data_mod.PartitionLabels(indicator, c)
        weights = rng.integers(2, size=n).astype(np.float64)
        for weighting in objective.WEIGHTING_MODES:
            cfg = objective.LossConfig(weighting=weighting)
            a = objective.loss_naive(rows, labels, cfg, weights)
            b = objective.loss_lowrank(rows, labels, cfg, weights)
            worst = max(worst, abs(a - b) / max(1.0, abs(a)))
    return worst


def _check_gradient_fd(seed, inject_fault):
    spec = network.NetworkSpec(
        input_dim=3, blstm_layers=1, hidden_per_direction=2,
        embedding_dim=2, segment_len=4,
    )
    params = network.init_params(spec, seed=seed + 1)
    rng = np.random.default_rng([seed, 98])
    features = rng.standard_normal((4, 3))
    n = 12
    indicator = np.zeros((n, 2))
    indicator[np.arange(n), rng.integers(2, size=n)] = 1.0
    labels = data_mod.PartitionLabels(indicator, 2)
    cfg = objective.LossConfig()

    def loss_at(p):
        embedding, _ = network.forward(p, spec, features)
        return objective.loss_lowrank(embedding, labels, cfg)

    embedding, cache = network.forward(params, spec, features)
    upstream = objective.loss_gradient(embedding, labels, cfg)
    grads = network.backward(params, cache, upstream)
    if inject_fault:
        grads["out.bias"] = grads["out.bias"] + 1e-2
    step = 1e-5
    worst = 0.0
    for name in sorted(params):
        tensor = params[name]
        numeric = np.zeros_like(tensor)
        it = np.nditer(tensor, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + step
            hi = loss_at(params)
            tensor[idx] = orig - step
            lo = loss_at(params)
            tensor[idx] = orig
            numeric[idx] = (hi - lo) / (2.0 * step)
            it.iternext()
        scale = max(float(np.max(np.abs(numeric))), 1e-8)
        worst = max(worst, float(np.max(np.abs(grads[name] - numeric))) / scale)
    return worst


def _check_stft_round_trip(seed):
    rng = np.random.default_rng([seed, 97])
    wav = Waveform(0.3 * rng.standard_normal(PIPELINE_RATE_HZ),
                   PIPELINE_RATE_HZ)
    back = istft(stft(wav), num_samples=len(wav))
    return float(
        np.linalg.norm(back.samples - wav.samples)
        / np.linalg.norm(wav.samples)
    )


def _check_permutation_audit(seed):
    rng = np.random.default_rng([seed, 96])
    worst = 0.0
    # assignment search inside sdr_improvement must attain the best mean
    mixture = Waveform(0.2 * rng.standard_normal(4000), PIPELINE_RATE_HZ)
    references = [
        Waveform(0.2 * rng.standard_normal(4000), PIPELINE_RATE_HZ)
        for _ in range(3)
    ]
    estimates = [
        Waveform(r.samples + 0.05 * rng.standard_normal(4000),
                 PIPELINE_RATE_HZ)
        for r in references
    ]
    shuffled = [estimates[i] for i in (2, 0, 1)]
    report = metrics.sdr_improvement(mixture, shuffled, references,
                                     mode="scale_invariant")
    pair = np.empty((3, 3))
    for i, est in enumerate(shuffled):
        for j, ref in enumerate(references):
            pair[i, j] = metrics.sdr(est, ref, mode="scale_invariant")
    best_mean = max(
        np.mean([pair[p[j], j] for j in range(3)])
        for p in itertools.permutations(range(3))
    )
    achieved = np.mean(
        [pair[report.permutation[j], j] for j in range(3)]
    )
    worst = max(worst, abs(best_mean - achieved))
    # segment alignment must match a direct exhaustive recomputation
    k = 3
    mix_spec = stft(Waveform(0.1 * rng.standard_normal(PIPELINE_RATE_HZ),
                             PIPELINE_RATE_HZ))
    ref_specs = [
        mix_spec.masked(rng.random(mix_spec.values.shape)) for _ in range(k)
    ]
    labels = rng.integers(k, size=mix_spec.values.shape)
    masks = np.stack([(labels == c).astype(float) for c in range(k)])
    starts = [0, 40]
    seg_masks = [masks[:, s : s + 30] for s in starts]
    perms = oracle_permutation(seg_masks, starts, mix_spec, ref_specs)
    for masks_s, start, chosen in zip(seg_masks, starts, perms):
        seg = mix_spec.values[start : start + 30]
        refs = [r.values[start : start + 30] for r in ref_specs]
        cost = np.array(
            [
                [np.sum(np.abs(masks_s[c] * seg - refs[j]) ** 2)
                 for j in range(k)]
                for c in range(k)
            ]
        )
        best = min(
            sum(cost[p[j], j] for j in range(k))
            for p in itertools.permutations(range(k))
        )
        achieved = sum(cost[chosen[j], j] for j in range(k))
        worst = max(worst, abs(best - achieved) / max(1.0, best))
    return worst


def cmd_selfcheck(config, args):
    checks = [
        ("loss_equivalence", _check_loss_equivalence(config.seed), 1e-6),
        (
            "gradient_finite_difference",
            _check_gradient_fd(config.seed, args.inject_gradient_fault),
            1e-4,
        ),
        ("stft_round_trip", _check_stft_round_trip(config.seed), 1e-3),
        ("permutation_audit", _check_permutation_audit(config.seed), 1e-9),
    ]
    failed = []
    for name, error, tol in checks:
        verdict = "PASS" if error <= tol else "FAIL"
        print(f"CHECK {name}: max error {error:.3e} (tol {tol:.0e}) {verdict}")
        if error > tol:
            failed.append(name)
    if failed:
        raise DivergenceError(f"selfcheck failed: {', '.join(failed)}")
    print(f"selfcheck passed all {len(checks)} checks")


# ---------------------------------------------------------------------------
# Parser assembly and dispatch


def build_parser():
    parser = _Parser(
        prog="deepcluster",
        description="train and run the deep-clustering source separator",
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser,
                                required=True)

    def common(p):
        p.add_argument("--config", help="INI settings file")
        return p

    p = common(sub.add_parser("synth", help="write a grid of harmonic sources"))
    p.add_argument("--out", required=True)
    p.add_argument("--f0", default="110,140,180,230",
                   help="comma-separated fundamentals in Hz")
    p.add_argument("--num-seeds", type=int, default=5)
    p.add_argument("--harmonics", type=int, default=8)
    p.add_argument("--duration", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("mix", help="build a mixture corpus"))
    p.add_argument("--sources", nargs="+", required=True,
                   help="one directory of WAVs per speaker")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--snr-min", type=float)
    p.add_argument("--snr-max", type=float)
    p.add_argument("--three-speaker", action="store_true")
    p.set_defaults(func=cmd_mix)

    p = common(sub.add_parser("train", help="train the embedding network"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint-dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--weight-noise-std", type=float)
    p.add_argument("--log")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--init-from", help="checkpoint to warm-start from")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("separate", help="separate one mixture"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mixture", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--references", nargs="+",
                   help="aligned clean sources, for segment-level strategies")
    p.add_argument("--dump-masks", action="store_true")
    p.set_defaults(func=cmd_separate)

    p = common(sub.add_parser("evaluate", help="score estimates against references"))
    p.add_argument("--out", required=True)
    p.add_argument("--mode", help="scale_invariant, filtered, or filtered(L)")
    p.add_argument("--strategy-label", help="free-form tag for the report")
    p.add_argument("--manifest")
    p.add_argument("--estimate-dir")
    p.add_argument("--mixture")
    p.add_argument("--estimates", nargs="+")
    p.add_argument("--references", nargs="+")
    p.set_defaults(func=cmd_evaluate)

    nmf_parser = common(sub.add_parser("nmf", help="sparse NMF baseline"))
    nmf_sub = nmf_parser.add_subparsers(dest="nmf_command",
                                        parser_class=_Parser, required=True)
    p = common(nmf_sub.add_parser("train", help="learn one source's bases"))
    p.add_argument("--wavs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source-id")
    p.add_argument("--rank", type=int)
    p.add_argument("--context", type=int)
    p.add_argument("--divergence", choices=nmf_mod.DIVERGENCES)
    p.set_defaults(func=cmd_nmf_train)
    p = common(nmf_sub.add_parser("separate", help="separate with trained bases"))
    p.add_argument("--mixture", required=True)
    p.add_argument("--bases", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_nmf_separate)

    p = common(sub.add_parser("selfcheck", help="run the numerical oracles"))
    p.add_argument("--inject-gradient-fault", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def _collect_overrides(extras):
    overrides = []
    for token in extras:
        body = token[2:] if token.startswith("--") else None
        if body and "=" in body and "." in body.split("=", 1)[0]:
            overrides.append(body)
        else:
            raise ConfigError(f"unrecognized argument {token!r}")
    return overrides


def main(argv=None):
    try:
        parser = build_parser()
        args, extras = parser.parse_known_args(argv)
        config = load_run_config(
            getattr(args, "config", None), _collect_overrides(extras)
        )
        args.func(config, args)
    except ConfigError as exc:
        print(f"STATUS: error {exc}")
        return 1
    except (FormatError, DataError, OSError) as exc:
        print(f"STATUS: error {exc}")
        return 2
    except DivergenceError as exc:
        print(f"STATUS: error {exc}")
        return 3
    print("STATUS: ok")
    return 0
