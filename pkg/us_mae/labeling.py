"""
Matched-filter time-of-flight labeling.

C(tau) = sum_t r(t) * s(t + tau) between a received signal r and an
excitation template s that starts at sample 0. A burst delayed by k samples
peaks at tau = -k, so the label is -tau_max.

Labels use C(tau) divided by the norm of the template samples that land in
the window at that lag, so a burst cut off by the window end still peaks at
its onset.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List

import numpy as np
from scipy.signal import correlate, correlation_lags

from .errors import LabelRangeError, ShapeError
from .signal_synth import NUM_CLASSES, SignalRecord, dequantize_8bit

logger = logging.getLogger(__name__)


@dataclass
class CorrelationResult:
    lags: np.ndarray
    values: np.ndarray
    tau_max: int


def centered(signal: np.ndarray) -> np.ndarray:
    """Float64 copy with 8-bit codes dequantized and the mean removed."""
    signal = np.asarray(signal)
    if signal.dtype == np.uint8:
        signal = dequantize_8bit(signal, dtype=np.float64)
    signal = signal.astype(np.float64)
    return signal - signal.mean()


def cross_correlation(r: np.ndarray, s: np.ndarray) -> CorrelationResult:
    """
    Full cross-correlation for lags -(N-1) .. N-1 by direct summation.

    Ties at the peak resolve to the smallest lag.
    """
    r = np.asarray(r, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if r.ndim != 1 or r.shape != s.shape:
        raise ShapeError(f"cross_correlation needs equal-length 1-D signals, got {r.shape} and {s.shape}")
    values = correlate(s, r, mode="full", method="direct")
    lags = correlation_lags(s.size, r.size, mode="full")
    return CorrelationResult(lags=lags, values=values, tau_max=_first_peak(lags, values))


def _first_peak(lags: np.ndarray, values: np.ndarray) -> int:
    # argmax returns the first maximum and lags ascend
    return int(lags[int(np.argmax(values))])


def overlap_energy(s: np.ndarray, lags: np.ndarray) -> np.ndarray:
    """Sum of s(u)**2 over the template samples u = t + tau that fall inside the window."""
    s = np.asarray(s, dtype=np.float64)
    cumulative = np.concatenate(([0.0], np.cumsum(s * s)))
    low = np.maximum(lags, 0)
    high = np.minimum(s.size + lags, s.size)
    return cumulative[high] - cumulative[low]


def matched_filter(r: np.ndarray, s: np.ndarray) -> CorrelationResult:
    """
    Cross-correlation scaled by 1/sqrt(overlap_energy) at every lag.

    Lags where no template energy overlaps the window score -inf.
    """
    raw = cross_correlation(r, s)
    energy = overlap_energy(s, raw.lags)
    values = np.full(raw.values.shape, -np.inf)
    np.divide(raw.values, np.sqrt(energy), out=values, where=energy > 0.0)
    return CorrelationResult(lags=raw.lags, values=values, tau_max=_first_peak(raw.lags, values))


def tof_label(received: np.ndarray, excitation: np.ndarray, num_classes: int = NUM_CLASSES) -> int:
    """
    Onset sample of the burst in `received`, as a class index.

    Raises:
        LabelRangeError: If the best alignment falls outside 0 .. num_classes-1
    """
    result = matched_filter(centered(received), centered(excitation))
    label = -result.tau_max
    if not 0 <= label < num_classes:
        raise LabelRangeError(f"Matched-filter delay {label} outside class range 0-{num_classes - 1}")
    return label


def label_records(
    records: Iterable[SignalRecord], excitation: np.ndarray, num_classes: int = NUM_CLASSES
) -> List[SignalRecord]:
    """New records carrying matched-filter labels; burst params are not known."""
    labeled = []
    for index, record in enumerate(records):
        try:
            label = tof_label(record.samples, excitation, num_classes)
        except LabelRangeError as e:
            raise LabelRangeError(f"Record {index}: {e}") from e
        labeled.append(SignalRecord(samples=record.samples, label=label))
    logger.info("Labeled %d records", len(labeled))
    return labeled
