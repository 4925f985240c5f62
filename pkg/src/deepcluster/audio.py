"""Audio front-end: WAV I/O, resampling, the STFT/iSTFT pair, and SNR mixing.

The analysis chain is fixed for the whole pipeline: 8 kHz mono audio, 32 ms
windows (256 samples) with an 8 ms hop (64 samples) and a square-root Hann
window on both analysis and synthesis.  The signal is zero-padded by
``window_len - hop`` samples at each end so that every input sample receives
full overlap coverage and the round trip is exact to numerical precision.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError, FormatError

PIPELINE_RATE_HZ = 8000


@dataclass
class Waveform:
    """Mono sampled signal; amplitudes are dimensionless, nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int = PIPELINE_RATE_HZ

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError("waveform samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise DataError("sample rate must be positive")

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class StftConfig:
    """Analysis parameters; defaults give 129 frequency bins at 8 kHz."""

    window_len_samples: int = 256
    hop_samples: int = 64
    fft_size: int = 256
    window_kind: str = "sqrt_hann"

    def __post_init__(self):
        if self.window_len_samples <= 0 or self.hop_samples <= 0:
            raise DataError("window and hop must be positive")
        if self.window_len_samples % self.hop_samples != 0:
            raise DataError("hop must divide the window length")
        if self.fft_size < self.window_len_samples:
            raise DataError("fft_size must be >= window length")
        if self.window_kind != "sqrt_hann":
            raise DataError(f"unknown window kind {self.window_kind!r}")

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def pad_samples(self) -> int:
        return self.window_len_samples - self.hop_samples

    def window(self) -> np.ndarray:
        # sqrt of the periodic Hann window; equals sin(pi*n/N) exactly.
        n = np.arange(self.window_len_samples)
        return np.sin(np.pi * n / self.window_len_samples)

    def num_frames(self, num_samples: int) -> int:
        padded = num_samples + 2 * self.pad_samples
        return (padded - self.window_len_samples) // self.hop_samples + 1


@dataclass
class Spectrogram:
    """Complex STFT, frames x bins, plus the config and original length."""

    values: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    num_samples: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 2:
            raise DataError("spectrogram values must be frames x bins")
        if self.values.shape[1] != self.config.num_bins:
            raise DataError(
                f"expected {self.config.num_bins} bins, got {self.values.shape[1]}"
            )
        if not np.all(np.isfinite(self.values)):
            raise DataError("spectrogram contains non-finite values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    def masked(self, mask: np.ndarray) -> "Spectrogram":
        """New spectrogram with a real-valued mask applied bin-wise."""
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != self.values.shape:
            raise DataError("mask shape does not match spectrogram")
        return Spectrogram(self.values * mask, self.config, self.num_samples)


def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM RIFF/WAVE file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            comp = wf.getcomptype()
            rate = wf.getframerate()
            nframes = wf.getnframes()
            data = wf.readframes(nframes)
    except wave.Error as exc:
        raise FormatError(f"{path}: not a readable WAV file ({exc})") from exc
    except EOFError as exc:
        raise OSError(f"{path}: truncated WAV header") from exc
    if comp != "NONE":
        raise FormatError(f"{path}: compressed WAV is not supported")
    if channels != 1:
        raise FormatError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise FormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if len(data) < nframes * 2:
        raise OSError(f"{path}: truncated WAV data chunk")
    samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, waveform: Waveform) -> None:
    """Write 16-bit PCM mono; amplitudes are clipped to [-1, 1) first."""
    codes = np.clip(np.round(waveform.samples * 32768.0), -32768, 32767)
    codes = codes.astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(waveform.sample_rate_hz)
        wf.writeframes(codes.tobytes())


RESAMPLE_TAPS = 64
RESAMPLE_KAISER_BETA = 8.0


def resample_to_8k(waveform: Waveform) -> Waveform:
    """Decimate to 8 kHz; the source rate must be an integer multiple of 8000.

    A 64-tap Kaiser-windowed sinc low-pass runs ahead of the decimation.  The
    even tap count leaves a residual half-sample delay at the input rate,
    which is irrelevant for corpus preparation.
    """
    rate = waveform.sample_rate_hz
    if rate == PIPELINE_RATE_HZ:
        return waveform
    if rate < PIPELINE_RATE_HZ or rate % PIPELINE_RATE_HZ != 0:
        raise DataError(f"unsupported rate {rate}: must be a multiple of 8000")
    factor = rate // PIPELINE_RATE_HZ
    n = np.arange(RESAMPLE_TAPS) - (RESAMPLE_TAPS - 1) / 2.0
    taps = np.sinc(n / factor) / factor * np.kaiser(RESAMPLE_TAPS, RESAMPLE_KAISER_BETA)
    taps /= taps.sum()  # unit DC gain
    filtered = np.convolve(waveform.samples, taps, mode="full")
    out_len = waveform.samples.size // factor
    start = RESAMPLE_TAPS // 2
    out = filtered[start : start + out_len * factor : factor]
    return Waveform(out, PIPELINE_RATE_HZ)


def stft(waveform: Waveform, config: StftConfig | None = None) -> Spectrogram:
    """Forward STFT with sqrt-Hann analysis window and symmetric zero padding.

    Frame t covers padded samples [t*hop, t*hop + window_len); only the
    non-negative-frequency half of each transform is kept.
    """
    config = config or StftConfig()
    x = waveform.samples
    if x.size < config.window_len_samples:
        raise DataError(
            f"signal of {x.size} samples is shorter than one analysis window"
        )
    pad = config.pad_samples
    padded = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    hop, wl = config.hop_samples, config.window_len_samples
    num_frames = (padded.size - wl) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(padded, wl)[::hop][:num_frames]
    windowed = frames * config.window()
    values = np.fft.rfft(windowed, n=config.fft_size, axis=1)
    return Spectrogram(values, config, num_samples=x.size)


def istft(
    spec: Spectrogram, config: StftConfig | None = None, num_samples: int | None = None
) -> Waveform:
    """Inverse STFT by sqrt-Hann weighted overlap-add.

    The overlap-added signal is divided by the accumulated squared-window
    envelope, the symmetric padding is removed, and the result is trimmed to
    the original sample count.
    """
    if config is not None and config != spec.config:
        raise DataError("istft config does not match the spectrogram's config")
    config = spec.config
    if num_samples is None:
        num_samples = spec.num_samples
    if num_samples <= 0:
        raise DataError("original sample count unknown; pass num_samples")
    hop, wl = config.hop_samples, config.window_len_samples
    window = config.window()
    frames = np.fft.irfft(spec.values, n=config.fft_size, axis=1)[:, :wl] * window
    padded_len = num_samples + 2 * config.pad_samples
    out = np.zeros(max(padded_len, (spec.frames - 1) * hop + wl))
    envelope = np.zeros_like(out)
    win_sq = window * window
    for t in range(spec.frames):
        start = t * hop
        out[start : start + wl] += frames[t]
        envelope[start : start + wl] += win_sq
    nonzero = envelope > 1e-12
    out[nonzero] /= envelope[nonzero]
    pad = config.pad_samples
    return Waveform(out[pad : pad + num_samples], PIPELINE_RATE_HZ)


def mix_sources(sources: list[Waveform], snr_dbs) -> tuple[Waveform, list[Waveform]]:
    """Mix one target with scaled interferers; returns the mixture and the
    exact scaled sources that sum to it.

    ``snr_dbs[j]`` is the requested target-to-interferer power ratio for
    source ``j + 1``.  If the mixture peak exceeds 1, every output is scaled
    down jointly by the same factor, which preserves all power ratios.
    """
    if len(sources) < 2:
        raise DataError("need at least two sources to mix")
    snr_dbs = list(np.atleast_1d(np.asarray(snr_dbs, dtype=np.float64)))
    if len(snr_dbs) != len(sources) - 1:
        raise DataError("need one SNR per non-target source")
    length = sources[0].samples.size
    rate = sources[0].sample_rate_hz
    for s in sources[1:]:
        if s.samples.size != length:
            raise DataError("sources must have equal length; truncate first")
        if s.sample_rate_hz != rate:
            raise DataError("sources must share a sample rate")
    powers = [np.mean(s.samples**2) for s in sources]
    if any(p == 0.0 for p in powers):
        raise DataError("cannot mix a zero-power source")
    scaled = [sources[0].samples.copy()]
    for j, snr in enumerate(snr_dbs):
        gain = np.sqrt(powers[0] / (powers[j + 1] * 10.0 ** (snr / 10.0)))
        scaled.append(gain * sources[j + 1].samples)
    mixture = np.sum(scaled, axis=0)
    peak = np.max(np.abs(mixture))
    if peak > 1.0:
        mixture = mixture / peak
        scaled = [s / peak for s in scaled]
    return Waveform(mixture, rate), [Waveform(s, rate) for s in scaled]


def mix_at_snr(
    target: Waveform, interferer: Waveform, snr_db: float
) -> tuple[Waveform, list[Waveform]]:
    """Two-source mixing at a requested SNR in dB.  See :func:`mix_sources`."""
    return mix_sources([target, interferer], [snr_db])


def measure_snr_db(target: Waveform, interferer: Waveform) -> float:
    """Power ratio of two already-scaled components, in dB."""
    pt = np.mean(target.samples**2)
    pi = np.mean(interferer.samples**2)
    if pt == 0.0 or pi == 0.0:
        raise DataError("cannot measure SNR of a silent component")
    return 10.0 * np.log10(pt / pi)
