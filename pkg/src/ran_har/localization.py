"""Turn per-step attention weights into activity regions in raw-sample coordinates."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LocalizationConfig:
    sampling_rate: float
    pool_size: int = 2
    pool_count: int = 3
    mean_duration: float = 3.0  # seconds
    threshold: float = 0.7

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.sampling_rate <= 0 or self.mean_duration <= 0:
            raise ValueError("sampling_rate and mean_duration must be positive")

    @property
    def stride(self) -> int:
        return self.pool_size**self.pool_count


@dataclass(frozen=True)
class ActivityRegion:
    label: str
    start: int  # first feature index
    end: int  # last feature index, inclusive
    peak: float
    stride: int = 8

    @property
    def start_raw(self) -> int:
        return self.start * self.stride

    @property
    def end_raw(self) -> int:
        """Exclusive raw-sample end."""
        return (self.end + 1) * self.stride


@dataclass
class LocalizationScores:
    alpha: np.ndarray
    summed: np.ndarray
    normalized: np.ndarray


def window_size(config: LocalizationConfig, n: int | None = None) -> int:
    """Feature positions an average activity spans, rounded up to an even number (at least 2).

    When ``n`` is given the result is clamped to the largest even value <= n.
    """
    raw = config.sampling_rate / config.stride * config.mean_duration
    w = max(2, 2 * math.ceil(raw / 2 - 1e-12))
    if n is not None and w > n:
        clamped = n - (n % 2)
        if clamped < 2:
            raise ValueError(f"cannot fit an even window into {n} positions")
        log.warning("window size %d exceeds %d positions; using %d", w, n, clamped)
        w = clamped
    return w


def aggregate_scores(alpha, w: int) -> np.ndarray:
    """Sliding sums ``s_i = sum(alpha[max(0, i - w/2) : min(n, i + w/2 + 1)])`` via prefix sums."""
    alpha = np.asarray(alpha, dtype=np.float64)
    n = alpha.shape[-1]
    if w % 2 or not 2 <= w <= n:
        raise ValueError(f"window must be even and within [2, {n}], got {w}")
    half = w // 2
    prefix = np.concatenate([np.zeros(alpha.shape[:-1] + (1,)), np.cumsum(alpha, axis=-1)], axis=-1)
    i = np.arange(n)
    lo = np.maximum(0, i - half)
    hi = np.minimum(n, i + half + 1)
    return prefix[..., hi] - prefix[..., lo]


def normalize_scores(s) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant input maps to all zeros."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        raise ValueError("cannot normalise an empty score vector")
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def localization_scores(alpha, config: LocalizationConfig) -> LocalizationScores:
    """Sliding sums and their min-max scaling for one step's weights.

    A flat weight vector carries no position information; its sums still
    bulge in the middle (border windows are shorter), so it is mapped to
    all-zero scores directly.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    w = window_size(config, alpha.shape[-1])
    s = aggregate_scores(alpha, w)
    if np.ptp(alpha) <= 1e-12 * np.abs(alpha).max(initial=0.0):
        return LocalizationScores(alpha, s, np.zeros_like(s))
    return LocalizationScores(alpha, s, normalize_scores(s))


def extract_regions(s_bar, label: str, threshold: float = 0.7, stride: int = 8) -> list[ActivityRegion]:
    """Maximal runs with ``s_bar > threshold``, sorted by start."""
    s_bar = np.asarray(s_bar, dtype=np.float64)
    above = s_bar > threshold
    regions = []
    i, n = 0, len(s_bar)
    while i < n:
        if not above[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and above[j + 1]:
            j += 1
        regions.append(ActivityRegion(label, i, j, float(s_bar[i : j + 1].max()), stride))
        i = j + 1
    return regions


def localize_steps(alphas, labels: list[str], config: LocalizationConfig):
    """Scores and regions for each decoded activity step.

    ``alphas`` is ``[steps, n]``; ``labels`` holds one label per activity step
    (END/PAD steps are not passed). Returns ``[(label, scores, regions), ...]``.
    """
    out = []
    for alpha, label in zip(alphas, labels):
        sc = localization_scores(alpha, config)
        regions = extract_regions(sc.normalized, label, config.threshold, config.stride)
        if not regions:
            log.info("step labelled %s produced no region", label)
        out.append((label, sc, regions))
    return out


def top_region(regions: list[ActivityRegion]) -> ActivityRegion | None:
    if not regions:
        return None
    # ties on peak go to the wider region
    return max(regions, key=lambda r: (r.peak, r.end - r.start))


def localization_iou(region: ActivityRegion | tuple[int, int], truth: tuple[int, int]) -> float:
    """Intersection over union of two half-open raw-sample intervals."""
    if isinstance(region, ActivityRegion):
        a0, a1 = region.start_raw, region.end_raw
    else:
        a0, a1 = region
    b0, b1 = truth
    inter = max(0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union if union > 0 else 0.0


def localization_record(sample_id, steps) -> dict:
    return {
        "sample_id": sample_id,
        "steps": [
            {
                "label": label,
                "s_bar": [float(v) for v in sc.normalized],
                "regions": [{"start_raw": r.start_raw, "end_raw": r.end_raw, "peak": r.peak} for r in regions],
            }
            for label, sc, regions in steps
        ],
    }


def write_localization(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=1)


PLOT_COLUMNS = ["sample_id", "step", "label", "raw_index", "alpha", "s", "s_bar", "threshold_flag"]


def write_plot_csv(rows_by_sample: list[tuple[str, list]], path, config: LocalizationConfig) -> None:
    """One row per raw sample per step; each feature position repeats over its ``stride`` samples."""
    stride = config.stride
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PLOT_COLUMNS)
        for sample_id, steps in rows_by_sample:
            for t, (label, sc, _) in enumerate(steps, start=1):
                for i in range(len(sc.alpha)):
                    flag = int(sc.normalized[i] > config.threshold)
                    for raw in range(i * stride, (i + 1) * stride):
                        w.writerow([sample_id, t, label, raw, repr(float(sc.alpha[i])), repr(float(sc.summed[i])), repr(float(sc.normalized[i])), flag])
