"""On-the-fly feature preparation.

The training chain mirrors the shard reader output through: local shuffle
-> speaker-id mapping -> resample -> speed perturb -> random chunk ->
noise/reverb augmentation -> log mel filterbank -> CMVN -> (optional)
spectral masking -> fixed-size batches. Every stage is a generator over
``Sample`` values, so the whole pipeline is a pure function of the input
order, the seed and the config.
"""

import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal as sig

from . import uio
from .config import ConfigError, apply_flat

DEFAULT_SNR_RANGES = {
    "noise": (0.0, 15.0),
    "music": (5.0, 15.0),
    "babble": (13.0, 20.0),
}

_WINDOWS = {
    "hamming": np.hamming,
    "hann": np.hanning,
    "rectangular": np.ones,
}


@dataclass
class Sample:
    """One utterance flowing through the pipeline.

    Exactly one of ``wave`` (mono floats in [-1, 1]) and ``feats`` (T x F)
    is populated at any stage.
    """

    key: str
    speaker_id: int
    sample_rate: int
    wave: np.ndarray | None = None
    feats: np.ndarray | None = None


@dataclass
class Batch:
    feats: np.ndarray  # B x T x F
    labels: np.ndarray  # B speaker ids
    keys: list


@dataclass
class PipelineConfig:
    shuffle_buffer: int = 1000
    target_rate: int = 16000
    speed_factors: tuple = (0.9, 1.0, 1.1)
    speed_weights: tuple = (1.0, 1.0, 1.0)
    chunk_frames: int = 200
    aug_prob: float = 0.6
    snr_ranges: dict = field(default_factory=lambda: dict(DEFAULT_SNR_RANGES))
    num_mels: int = 80
    frame_shift_ms: float = 10.0
    frame_len_ms: float = 25.0
    dither: float = 0.0
    window: str = "hamming"
    cmvn_variance: bool = False
    specaug: bool = False
    specaug_t_masks: int = 1
    specaug_max_t: int = 10
    specaug_f_masks: int = 1
    specaug_max_f: int = 8
    batch_size: int = 32
    drop_remainder: bool = True

    def validate(self):
        if not 0.0 <= self.aug_prob <= 1.0:
            raise ConfigError("aug_prob must be in [0, 1]")
        if self.chunk_frames < 1:
            raise ConfigError("chunk_frames must be >= 1")
        if self.num_mels < 1:
            raise ConfigError("num_mels must be >= 1")
        if not self.frame_len_ms > self.frame_shift_ms > 0:
            raise ConfigError("need frame_len_ms > frame_shift_ms > 0")
        if len(self.speed_factors) != len(self.speed_weights):
            raise ConfigError("speed_factors and speed_weights lengths differ")
        if self.window not in _WINDOWS:
            raise ConfigError(f"unknown window {self.window!r}")
        return self

    @classmethod
    def from_flat(cls, flat: dict, consumed: set) -> "PipelineConfig":
        cfg = cls()
        apply_flat(cfg, flat, consumed)
        if "snr_ranges" in flat:
            # e.g. "noise:0:15 music:5:15 babble:13:20"
            ranges = {}
            for tok in flat["snr_ranges"].split():
                cat, lo, hi = tok.split(":")
                ranges[cat] = (float(lo), float(hi))
            cfg.snr_ranges = ranges
            consumed.add("snr_ranges")
        return cfg.validate()


# ---------------------------------------------------------------------------
# stream stages


def local_shuffle(stream, buffer_size: int, rng):
    """Shuffle within a bounded buffer.

    An element leaves only once the buffer has filled (or input ended), so
    memory stays bounded while batches still differ between epochs.
    """
    if buffer_size < 1:
        raise ValueError("buffer_size must be >= 1")
    buf = []
    for item in stream:
        if len(buf) < buffer_size:
            buf.append(item)
            continue
        idx = int(rng.integers(len(buf)))
        out = buf[idx]
        buf[idx] = item
        yield out
    order = rng.permutation(len(buf))
    for idx in order:
        yield buf[idx]


def build_speaker_table(labels) -> dict:
    """Map speaker labels to contiguous ids in first-seen order."""
    table = {}
    for label in labels:
        if label not in table:
            table[label] = len(table)
    return table


def spk2id(records, table: dict):
    """Turn utterance records into pipeline samples with integer labels."""
    for rec in records:
        if rec.speaker not in table:
            raise KeyError(f"unknown speaker {rec.speaker!r} (key {rec.key})")
        yield Sample(
            key=rec.key,
            speaker_id=table[rec.speaker],
            sample_rate=rec.sample_rate,
            wave=rec.pcm.astype(np.float64) / 32768.0,
        )


def _ratio(to_rate, from_rate) -> Fraction:
    return Fraction(to_rate) / Fraction(from_rate)


def resample(wave: np.ndarray, from_rate: int, to_rate: int) -> np.ndarray:
    """Band-limited resampling; equal rates pass through bit-identically.

    Output length is exactly round(len * to_rate / from_rate).
    """
    if from_rate <= 0 or to_rate <= 0:
        raise ValueError("rates must be positive")
    if from_rate == to_rate:
        return wave
    ratio = _ratio(to_rate, from_rate)
    out = sig.resample_poly(wave, ratio.numerator, ratio.denominator,
                            padtype="line")
    target = int(round(len(wave) * to_rate / from_rate))
    if len(out) > target:
        out = out[:target]
    elif len(out) < target:
        out = np.concatenate([out, np.repeat(out[-1], target - len(out))])
    return out


def resample_stage(stream, target_rate: int):
    for s in stream:
        if s.sample_rate != target_rate:
            s.wave = resample(s.wave, s.sample_rate, target_rate)
            s.sample_rate = target_rate
        yield s


def speed_perturb(sample: Sample, factor: float, n_speakers_base: int,
                  factors=(0.9, 1.0, 1.1)) -> Sample:
    """Resampling-based tempo+pitch change; perturbed audio counts as a
    new speaker, so the label space grows to 3N for the default factors.
    """
    if factor == 1.0:
        return sample
    frac = Fraction(factor).limit_denominator(1000)  # 1/factor = den/num
    out = sig.resample_poly(sample.wave, frac.denominator, frac.numerator,
                            padtype="line")
    target = int(round(len(sample.wave) / factor))
    if len(out) > target:
        out = out[:target]
    elif len(out) < target:
        out = np.concatenate([out, np.repeat(out[-1], target - len(out))])
    sample.wave = out
    sample.speaker_id += _factor_offset(factor, factors) * n_speakers_base
    return sample


def _factor_offset(factor: float, factors=(0.9, 1.0, 1.1)) -> int:
    non_unity = [f for f in factors if f != 1.0]
    if factor == 1.0:
        return 0
    return 1 + non_unity.index(factor)


def speed_perturb_stage(stream, factors, weights, n_speakers_base, rng):
    probs = np.asarray(weights, dtype=np.float64)
    probs = probs / probs.sum()
    factors = tuple(factors)
    for s in stream:
        factor = factors[int(rng.choice(len(factors), p=probs))]
        yield speed_perturb(s, factor, n_speakers_base, factors)


def chunk_samples_for_frames(chunk_frames: int, rate: int,
                             frame_shift_ms: float, frame_len_ms: float) -> int:
    """Samples needed so the filterbank yields exactly ``chunk_frames``."""
    shift = int(rate * frame_shift_ms / 1000.0)
    frame_len = int(rate * frame_len_ms / 1000.0)
    return frame_len + (chunk_frames - 1) * shift


def random_chunk(sample: Sample, chunk_frames: int, frame_shift_ms: float,
                 frame_len_ms: float, rng) -> Sample:
    """Cut a uniformly random window of the chunk length; short waves are
    tiled (wrap-around repetition) up to the target instead of zero-padded.
    """
    wave = sample.wave
    if wave is None or len(wave) == 0:
        raise ValueError(f"{sample.key}: empty wave")
    target = chunk_samples_for_frames(chunk_frames, sample.sample_rate,
                                      frame_shift_ms, frame_len_ms)
    n = len(wave)
    if n == target:
        return sample
    if n < target:
        reps = -(-target // n)
        sample.wave = np.tile(wave, reps)[:target]
        return sample
    start = int(rng.integers(0, n - target + 1))
    sample.wave = wave[start:start + target]
    return sample


def random_chunk_stage(stream, chunk_frames, frame_shift_ms, frame_len_ms, rng):
    for s in stream:
        yield random_chunk(s, chunk_frames, frame_shift_ms, frame_len_ms, rng)


class AugmentBank:
    """Wav clips with a category label, listed in a ``path<TAB>category``
    map file. Clips are decoded on demand."""

    def __init__(self, entries):
        self.entries = list(entries)  # (path, category)

    @classmethod
    def from_map_file(cls, map_path):
        base = os.path.dirname(os.path.abspath(map_path))
        entries = []
        with open(map_path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                try:
                    path, category = line.split("\t")
                except ValueError as e:
                    raise uio.UioError(
                        f"{map_path}:{lineno}: expected path<TAB>category"
                    ) from e
                if not os.path.isabs(path):
                    path = os.path.join(base, path)
                entries.append((path, category))
        return cls(entries)

    def __len__(self):
        return len(self.entries)

    def pick(self, rng):
        path, category = self.entries[int(rng.integers(len(self.entries)))]
        with open(path, "rb") as f:
            pcm, _ = uio.decode_wav(f.read(), where=path)
        return pcm.astype(np.float64) / 32768.0, category


def mix_noise_at_snr(wave: np.ndarray, noise: np.ndarray, snr_db: float,
                     rng) -> np.ndarray:
    """Add a noise clip scaled to the requested signal-to-noise ratio.

    The clip is tiled or randomly cropped to cover the utterance.
    """
    n = len(wave)
    if len(noise) < n:
        noise = np.tile(noise, -(-n // len(noise)))[:n]
    elif len(noise) > n:
        start = int(rng.integers(0, len(noise) - n + 1))
        noise = noise[start:start + n]
    p_sig = float(np.mean(wave ** 2))
    p_noise = float(np.mean(noise ** 2))
    if p_noise <= 0.0 or p_sig <= 0.0:
        return wave
    gain = np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    return wave + gain * noise


def apply_reverb(wave: np.ndarray, rir: np.ndarray) -> np.ndarray:
    """Full convolution with a room impulse response, truncated to the
    input length and rescaled to the input's peak amplitude."""
    out = sig.fftconvolve(wave, rir)[:len(wave)]
    peak_in = float(np.max(np.abs(wave)))
    peak_out = float(np.max(np.abs(out)))
    if peak_out > 0.0:
        out = out * (peak_in / peak_out)
    return out


def augment(sample: Sample, noise_bank, rir_bank, aug_prob: float,
            snr_ranges: dict, rng) -> Sample:
    """With probability ``aug_prob`` apply exactly one of additive noise
    or reverberation (never both); output peak never exceeds 1.0."""
    have_noise = noise_bank is not None and len(noise_bank) > 0
    have_rir = rir_bank is not None and len(rir_bank) > 0
    if not (have_noise or have_rir):
        return sample
    if rng.random() >= aug_prob:
        return sample
    if have_noise and have_rir:
        use_noise = bool(rng.integers(2) == 0)
    else:
        use_noise = have_noise
    if use_noise:
        clip, category = noise_bank.pick(rng)
        lo, hi = snr_ranges.get(category, snr_ranges.get("noise", (0.0, 15.0)))
        snr_db = float(rng.uniform(lo, hi))
        out = mix_noise_at_snr(sample.wave, clip, snr_db, rng)
    else:
        rir, _ = rir_bank.pick(rng)
        out = apply_reverb(sample.wave, rir)
    peak = float(np.max(np.abs(out)))
    if peak > 1.0:
        out = out / peak
    sample.wave = out
    return sample


def augment_stage(stream, noise_bank, rir_bank, aug_prob, snr_ranges, rng):
    for s in stream:
        yield augment(s, noise_bank, rir_bank, aug_prob, snr_ranges, rng)


# ---------------------------------------------------------------------------
# features


def mel_scale(freq):
    return 1127.0 * np.log(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def inverse_mel_scale(mel):
    return 700.0 * (np.exp(np.asarray(mel, dtype=np.float64) / 1127.0) - 1.0)


def mel_filterbank(num_mels: int, n_fft: int, sample_rate: int,
                   low_freq: float = 20.0, high_freq: float | None = None):
    """Triangular mel filters over the rfft bins.

    Returns (weights of shape num_mels x (n_fft//2 + 1), center freqs Hz).
    """
    if high_freq is None:
        high_freq = sample_rate / 2.0
    n_bins = n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * (sample_rate / n_fft)
    mel_lo, mel_hi = mel_scale(low_freq), mel_scale(high_freq)
    edges = np.linspace(mel_lo, mel_hi, num_mels + 2)
    fft_mels = mel_scale(fft_freqs)
    weights = np.zeros((num_mels, n_bins))
    for m in range(num_mels):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        up = (fft_mels - left) / (center - left)
        down = (right - fft_mels) / (right - center)
        weights[m] = np.clip(np.minimum(up, down), 0.0, None)
    centers = inverse_mel_scale(edges[1:-1])
    return weights, centers


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def compute_fbank(wave: np.ndarray, sample_rate: int, num_mels: int = 80,
                  frame_shift_ms: float = 10.0, frame_len_ms: float = 25.0,
                  dither: float = 0.0, window: str = "hamming",
                  preemphasis: float = 0.97, log_floor: float = 1e-10,
                  low_freq: float = 20.0, rng=None) -> np.ndarray:
    """Log mel filterbank features, T x num_mels.

    Frames are snipped from the edges (no padding): T is
    1 + floor((len - frame_len) / frame_shift). Each frame goes through
    optional dither, pre-emphasis, the window function, a zero-padded
    power FFT and the triangular mel bank, then a floored natural log.
    """
    frame_len = int(sample_rate * frame_len_ms / 1000.0)
    frame_shift = int(sample_rate * frame_shift_ms / 1000.0)
    if len(wave) < frame_len:
        raise ValueError(
            f"wave of {len(wave)} samples shorter than one {frame_len}-sample frame"
        )
    frames = np.lib.stride_tricks.sliding_window_view(wave, frame_len)
    frames = frames[::frame_shift].astype(np.float64)
    if dither > 0.0:
        if rng is None:
            rng = np.random.default_rng()
        frames = frames + dither * rng.standard_normal(frames.shape)
    if preemphasis > 0.0:
        emphasized = np.empty_like(frames)
        emphasized[:, 1:] = frames[:, 1:] - preemphasis * frames[:, :-1]
        emphasized[:, 0] = frames[:, 0] - preemphasis * frames[:, 0]
        frames = emphasized
    frames = frames * _WINDOWS[window](frame_len)
    n_fft = _next_pow2(frame_len)
    spectrum = np.fft.rfft(frames, n=n_fft, axis=1)
    power = np.abs(spectrum) ** 2
    weights, _ = mel_filterbank(num_mels, n_fft, sample_rate, low_freq=low_freq)
    energies = power @ weights.T
    return np.log(np.maximum(energies, log_floor))


def fbank_stage(stream, cfg: PipelineConfig, rng):
    for s in stream:
        s.feats = compute_fbank(
            s.wave, s.sample_rate, num_mels=cfg.num_mels,
            frame_shift_ms=cfg.frame_shift_ms, frame_len_ms=cfg.frame_len_ms,
            dither=cfg.dither, window=cfg.window, rng=rng,
        )
        s.wave = None
        yield s


def cmvn(feats: np.ndarray, variance_norm: bool = False) -> np.ndarray:
    """Per-utterance mean (and optionally variance) normalization."""
    if feats.shape[0] < 1:
        raise ValueError("need at least one frame")
    out = feats - feats.mean(axis=0)
    if variance_norm:
        std = feats.std(axis=0)
        out = np.where(std > 1e-8, out / np.where(std > 1e-8, std, 1.0), out)
    return out


def cmvn_stage(stream, variance_norm: bool):
    for s in stream:
        s.feats = cmvn(s.feats, variance_norm=variance_norm)
        yield s


def spec_augment(feats: np.ndarray, num_t_masks: int, max_t: int,
                 num_f_masks: int, max_f: int, rng) -> np.ndarray:
    """Zero out random time and frequency stripes (positions and widths
    uniform within the caps)."""
    out = feats.copy()
    n_frames, n_bins = out.shape
    for _ in range(num_t_masks):
        width = int(rng.integers(0, max_t + 1))
        width = min(width, n_frames)
        start = int(rng.integers(0, n_frames - width + 1))
        out[start:start + width, :] = 0.0
    for _ in range(num_f_masks):
        width = int(rng.integers(0, max_f + 1))
        width = min(width, n_bins)
        start = int(rng.integers(0, n_bins - width + 1))
        out[:, start:start + width] = 0.0
    return out


def specaug_stage(stream, cfg: PipelineConfig, rng):
    for s in stream:
        s.feats = spec_augment(s.feats, cfg.specaug_t_masks, cfg.specaug_max_t,
                               cfg.specaug_f_masks, cfg.specaug_max_f, rng)
        yield s


def batch_stream(stream, batch_size: int, drop_remainder: bool = True):
    """Group samples into fixed-size batches; the trailing remainder is
    dropped in training mode and emitted when ``drop_remainder`` is off."""
    feats, labels, keys = [], [], []
    for s in stream:
        if feats and s.feats.shape != feats[0].shape:
            raise ValueError(
                f"{s.key}: feature shape {s.feats.shape} differs from "
                f"{feats[0].shape} within a batch"
            )
        feats.append(s.feats)
        labels.append(s.speaker_id)
        keys.append(s.key)
        if len(feats) == batch_size:
            yield Batch(np.stack(feats), np.asarray(labels, dtype=np.int64), keys)
            feats, labels, keys = [], [], []
    if feats and not drop_remainder:
        yield Batch(np.stack(feats), np.asarray(labels, dtype=np.int64), keys)


# ---------------------------------------------------------------------------
# composed pipelines


def run_pipeline(records, cfg: PipelineConfig, speaker_table: dict, rng,
                 noise_bank=None, rir_bank=None):
    """The full training chain from utterance records to batches."""
    cfg.validate()
    n_base = len(speaker_table)
    stream = local_shuffle(records, cfg.shuffle_buffer, rng)
    stream = spk2id(stream, speaker_table)
    stream = resample_stage(stream, cfg.target_rate)
    stream = speed_perturb_stage(stream, cfg.speed_factors, cfg.speed_weights,
                                 n_base, rng)
    stream = random_chunk_stage(stream, cfg.chunk_frames, cfg.frame_shift_ms,
                                cfg.frame_len_ms, rng)
    stream = augment_stage(stream, noise_bank, rir_bank, cfg.aug_prob,
                           cfg.snr_ranges, rng)
    stream = fbank_stage(stream, cfg, rng)
    stream = cmvn_stage(stream, cfg.cmvn_variance)
    if cfg.specaug:
        stream = specaug_stage(stream, cfg, rng)
    return batch_stream(stream, cfg.batch_size, cfg.drop_remainder)


def featurize(pcm: np.ndarray, sample_rate: int, cfg: PipelineConfig) -> np.ndarray:
    """Evaluation-time featurization of a whole utterance: resample to the
    target rate, filterbank, CMVN. No chunking or augmentation."""
    wave = pcm.astype(np.float64) / 32768.0 if pcm.dtype.kind == "i" else pcm
    wave = resample(wave, sample_rate, cfg.target_rate)
    feats = compute_fbank(
        wave, cfg.target_rate, num_mels=cfg.num_mels,
        frame_shift_ms=cfg.frame_shift_ms, frame_len_ms=cfg.frame_len_ms,
        dither=0.0, window=cfg.window,
    )
    return cmvn(feats, variance_norm=cfg.cmvn_variance)
