"""
Synthetic ultrasound tone-burst datasets.

A record is a 512-sample window holding one tone burst that starts at the
time-of-flight sample (the class label), with white Gaussian noise added at
a target peak SNR. The result is scaled by the 8-bit front end's full-scale
voltage and quantized.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
from scipy.signal import windows

from .config import STREAM_RECORD, derive_rng
from .errors import InvalidParamsError, NumericError, UsageError

logger = logging.getLogger(__name__)

SIGNAL_LENGTH = 512
SAMPLE_RATE = 60e6
NUM_CLASSES = 200
SUPPORTED_PATCH_SIZES = (8, 16, 32, 64, 128)
ENVELOPES = ("hann", "rectangular")
NO_NOISE = math.inf

LEVELS = 256
MAX_CODE = LEVELS - 1

# Volts at the top quantization code; burst amplitudes are normalized to 1 V
FULL_SCALE = 3.0

# Parameter ranges per dataset profile: (min, max); frequency in Hz, burst length in samples
PROFILES: Dict[str, Dict[str, tuple]] = {
    "synthetic": {
        "frequency": (1.0e6, 4.0e6),
        "amplitude": (0.2, 1.0),
        "burst_length": (200, 400),
        "peak_snr": (18.0, 38.0),
    },
    "measured": {
        "frequency": (2.0e6, 2.4e6),
        "amplitude": (0.8, 1.0),
        "burst_length": (75, 180),
        "peak_snr": (27.0, 29.0),
    },
}


@dataclass(frozen=True)
class BurstParams:
    """Parameters of one tone burst. `onset` is the time-of-flight label."""
    frequency: float
    amplitude: float
    burst_length: int
    onset: int
    peak_snr: float = NO_NOISE
    envelope: str = "hann"


@dataclass(frozen=True)
class DatasetSpec:
    """Sampling ranges and fixed geometry for a generated dataset."""
    count: int
    seed: int = 0
    signal_length: int = SIGNAL_LENGTH
    sample_rate: float = SAMPLE_RATE
    num_classes: int = NUM_CLASSES
    freq_min: float = 1.0e6
    freq_max: float = 4.0e6
    amp_min: float = 0.2
    amp_max: float = 1.0
    burst_min: int = 200
    burst_max: int = 400
    snr_min: float = 18.0
    snr_max: float = 38.0
    envelope: str = "hann"
    noise: bool = True
    full_scale: float = FULL_SCALE

    @classmethod
    def from_profile(cls, profile: str = "synthetic", **overrides) -> "DatasetSpec":
        if profile not in PROFILES:
            raise UsageError(f"Unknown dataset profile {profile!r}; choose from {sorted(PROFILES)}")
        ranges = PROFILES[profile]
        values = {
            "freq_min": ranges["frequency"][0],
            "freq_max": ranges["frequency"][1],
            "amp_min": ranges["amplitude"][0],
            "amp_max": ranges["amplitude"][1],
            "burst_min": ranges["burst_length"][0],
            "burst_max": ranges["burst_length"][1],
            "snr_min": ranges["peak_snr"][0],
            "snr_max": ranges["peak_snr"][1],
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def validate(self) -> None:
        """Raise UsageError if any range or geometry setting is unusable."""
        if self.count < 1:
            raise UsageError(f"Dataset count must be >= 1, got {self.count}")
        if self.seed < 0:
            raise UsageError(f"Seed must be non-negative, got {self.seed}")
        for patch in SUPPORTED_PATCH_SIZES:
            if self.signal_length % patch:
                raise UsageError(
                    f"Signal length {self.signal_length} is not divisible by patch size {patch}"
                )
        if self.sample_rate <= 0:
            raise UsageError(f"Sample rate must be > 0, got {self.sample_rate}")
        if not 1 <= self.num_classes <= self.signal_length:
            raise UsageError(f"Class count {self.num_classes} must be in [1, signal_length]")
        for name, low, high in (
            ("frequency", self.freq_min, self.freq_max),
            ("amplitude", self.amp_min, self.amp_max),
            ("burst length", self.burst_min, self.burst_max),
            ("peak SNR", self.snr_min, self.snr_max),
        ):
            if not (math.isfinite(low) and math.isfinite(high)) or low > high:
                raise UsageError(f"Invalid {name} range [{low}, {high}]")
        if self.freq_min <= 0 or self.freq_max >= self.sample_rate / 2:
            raise UsageError("Frequencies must lie in (0, sample_rate / 2)")
        if self.amp_min <= 0 or self.amp_max > 1:
            raise UsageError("Amplitudes must lie in (0, 1]")
        if self.burst_min < 1:
            raise UsageError(f"Burst length must be >= 1, got {self.burst_min}")
        if self.envelope not in ENVELOPES:
            raise UsageError(f"Unknown envelope {self.envelope!r}; choose from {ENVELOPES}")
        if not (math.isfinite(self.full_scale) and self.full_scale > 0):
            raise UsageError(f"Full-scale voltage must be > 0, got {self.full_scale}")


@dataclass
class SignalRecord:
    """One 8-bit signal. `label` and `params` are None for unlabeled imports."""
    samples: np.ndarray
    label: Optional[int] = None
    params: Optional[BurstParams] = None


@dataclass
class QuantizeStats:
    """Running count of samples clipped to [-1, 1] before quantization."""
    clipped: int = 0
    total: int = 0

    @property
    def fraction(self) -> float:
        return self.clipped / self.total if self.total else 0.0


@dataclass
class GenerationSummary:
    count: int
    entropy_bits: float
    label_counts: np.ndarray = field(repr=False)


def validate_params(params: BurstParams, spec: DatasetSpec) -> None:
    """Check one burst against the spec ranges (onset within the window and class range)."""
    if not 0 <= params.onset < spec.signal_length:
        raise InvalidParamsError(
            f"Onset {params.onset} outside window of {spec.signal_length} samples"
        )
    if params.onset >= spec.num_classes:
        raise InvalidParamsError(f"Onset {params.onset} outside class range 0-{spec.num_classes - 1}")
    checks = (
        ("frequency", params.frequency, spec.freq_min, spec.freq_max),
        ("amplitude", params.amplitude, spec.amp_min, spec.amp_max),
        ("burst_length", params.burst_length, spec.burst_min, spec.burst_max),
    )
    for name, value, low, high in checks:
        if not low <= value <= high:
            raise InvalidParamsError(f"{name}={value} outside [{low}, {high}]")
    if params.peak_snr != NO_NOISE and not spec.snr_min <= params.peak_snr <= spec.snr_max:
        raise InvalidParamsError(f"peak_snr={params.peak_snr} outside [{spec.snr_min}, {spec.snr_max}]")
    if params.envelope not in ENVELOPES:
        raise InvalidParamsError(f"Unknown envelope {params.envelope!r}")


def burst_envelope(kind: str, length: int) -> np.ndarray:
    """
    Envelope over `length` samples, peak 1. The Hann window drops its zero
    end points so the first burst sample already has a nonzero envelope.
    """
    if kind == "rectangular":
        return np.ones(length)
    if kind == "hann":
        return windows.hann(length + 2)[1:-1]
    raise InvalidParamsError(f"Unknown envelope {kind!r}")


def synth_burst(params: BurstParams, spec: DatasetSpec) -> np.ndarray:
    """Noise-free float64 signal in [-1, 1] with the burst starting at `onset`."""
    validate_params(params, spec)
    signal = np.zeros(spec.signal_length)
    end = min(params.onset + params.burst_length, spec.signal_length)
    t = np.arange(end - params.onset)
    envelope = burst_envelope(params.envelope, params.burst_length)[: t.size]
    phase = 2.0 * np.pi * params.frequency * t / spec.sample_rate
    signal[params.onset:end] = params.amplitude * envelope * np.sin(phase)
    return signal


def add_noise(signal: np.ndarray, peak_snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """
    Add white Gaussian noise with sigma = peak / 10**(snr/20), peak = max|signal|.

    `NO_NOISE` (+inf) returns an unchanged copy.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if peak_snr_db == NO_NOISE:
        return signal.copy()
    if not math.isfinite(peak_snr_db):
        raise UsageError(f"Peak SNR must be finite or the no-noise sentinel, got {peak_snr_db}")
    peak = float(np.max(np.abs(signal))) if signal.size else 0.0
    if peak == 0.0:
        raise NumericError("Peak SNR is undefined for an all-zero signal")
    sigma = peak / 10.0 ** (peak_snr_db / 20.0)
    return signal + rng.normal(0.0, sigma, size=signal.shape)


def quantize_8bit(signal: np.ndarray, stats: Optional[QuantizeStats] = None) -> np.ndarray:
    """
    Map [-1, 1] to codes 0..255 with round-half-away-from-zero.

    Out-of-range input is clipped first; `stats` (if given) counts clipped samples.
    """
    signal = np.asarray(signal, dtype=np.float64)
    clipped = np.clip(signal, -1.0, 1.0)
    if stats is not None:
        stats.clipped += int(np.count_nonzero(clipped != signal))
        stats.total += signal.size
    scaled = (clipped + 1.0) / 2.0 * MAX_CODE
    # scaled is non-negative, so half-away-from-zero is floor(x + 0.5)
    codes = np.floor(scaled + 0.5)
    return np.clip(codes, 0, MAX_CODE).astype(np.uint8)


def dequantize_8bit(codes: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Inverse map: x = q / 255 * 2 - 1."""
    codes = np.asarray(codes)
    return (codes.astype(np.float64) / MAX_CODE * 2.0 - 1.0).astype(dtype)


def sample_params(spec: DatasetSpec, rng: np.random.Generator) -> BurstParams:
    """Draw one burst uniformly from the spec ranges (integers inclusive)."""
    frequency = rng.uniform(spec.freq_min, spec.freq_max)
    amplitude = rng.uniform(spec.amp_min, spec.amp_max)
    burst_length = int(rng.integers(spec.burst_min, spec.burst_max, endpoint=True))
    onset = int(rng.integers(0, spec.num_classes))
    peak_snr = rng.uniform(spec.snr_min, spec.snr_max)
    return BurstParams(
        frequency=float(frequency),
        amplitude=float(amplitude),
        burst_length=burst_length,
        onset=onset,
        peak_snr=float(peak_snr) if spec.noise else NO_NOISE,
        envelope=spec.envelope,
    )


def generate_record(
    spec: DatasetSpec, index: int, stats: Optional[QuantizeStats] = None
) -> SignalRecord:
    """Record `index` of the dataset; depends only on (spec, index)."""
    rng = derive_rng(spec.seed, STREAM_RECORD, index)
    params = sample_params(spec, rng)
    noisy = add_noise(synth_burst(params, spec), params.peak_snr, rng)
    codes = quantize_8bit(noisy / spec.full_scale, stats)
    return SignalRecord(samples=codes, label=params.onset, params=params)


def generate_dataset(spec: DatasetSpec, workers: int = 1) -> List[SignalRecord]:
    """
    Generate `spec.count` records, optionally across worker threads.

    Output order and content are independent of `workers`.
    """
    spec.validate()
    if workers < 1:
        raise UsageError(f"Worker count must be >= 1, got {workers}")

    def build(start: int) -> tuple:
        stats = QuantizeStats()
        stop = min(start + chunk, spec.count)
        return [generate_record(spec, i, stats) for i in range(start, stop)], stats

    chunk = max(1, math.ceil(spec.count / (workers * 4)))
    starts = range(0, spec.count, chunk)
    if workers == 1:
        parts = [build(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(build, starts))

    records = [record for part, _ in parts for record in part]
    clipped = sum(stats.clipped for _, stats in parts)
    if clipped:
        logger.warning(
            "Clipped %d of %d samples to [-1, 1] before quantization",
            clipped,
            spec.count * spec.signal_length,
        )
    logger.info("Generated %d records (seed %d, %d workers)", len(records), spec.seed, workers)
    return records


def _pooled_codes(data: Union[Iterable[SignalRecord], np.ndarray]) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return data.reshape(-1)
    parts = [np.asarray(r.samples).reshape(-1) for r in data]
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.uint8)


def amplitude_histogram(data: Union[Iterable[SignalRecord], np.ndarray]) -> np.ndarray:
    codes = _pooled_codes(data)
    return np.bincount(codes.astype(np.int64), minlength=LEVELS)


def shannon_entropy(data: Union[Iterable[SignalRecord], np.ndarray]) -> float:
    """Entropy in bits of the pooled 256-bin amplitude histogram."""
    counts = amplitude_histogram(data)
    total = counts.sum()
    if total == 0:
        raise UsageError("Entropy of an empty dataset is undefined")
    probs = counts[counts > 0] / total
    return float(-(probs * np.log2(probs)).sum())


def label_counts(records: Iterable[SignalRecord], num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = [r.label for r in records if r.label is not None]
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)


def summarize(records: List[SignalRecord], num_classes: int = NUM_CLASSES) -> GenerationSummary:
    return GenerationSummary(
        count=len(records),
        entropy_bits=shannon_entropy(records),
        label_counts=label_counts(records, num_classes),
    )
