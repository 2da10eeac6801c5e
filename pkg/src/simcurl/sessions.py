"""Density-peak session segmentation and session dropout.

A user's time axis is cut into ``Q`` equal bins spanning their first to last
event. Each bin gets a kernel density of command executions; bins that
dominate every neighbour within ``window`` bins are peaks, and each event
joins the session of its nearest peak.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import DAY, UserSequence
from .seeding import derive_seed

REFERENCE_SPAN = 182.5 * DAY
KERNELS = ("gaussian", "laplace", "printed")

# beyond these many sigmas the kernel underflows to exactly 0.0 in float64
_CUTOFF = {"gaussian": 28.0, "laplace": 746.0}


class EmptyProfileError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentConfig:
    q_levels: int = 2**15
    sigma: float = 2.0**10
    window: int = 1
    kernel: str = "gaussian"

    def __post_init__(self):
        if self.q_levels < 1:
            raise ValueError("q_levels must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}")

    @classmethod
    def scaled_to(cls, span: float, q_levels: int = 2**15, sigma: float = 2.0**10, window: int = 1,
                  kernel: str = "gaussian", reference_span: float = REFERENCE_SPAN) -> SegmentConfig:
        """Shrink the bin count in proportion to ``span`` (default reference: six months).

        Bin width, and therefore sigma / bin width, stays what it is at the
        reference span.
        """
        q = max(1, int(round(q_levels * span / reference_span)))
        width_ref = reference_span / q_levels
        width = span / q if span > 0 else width_ref
        return cls(q, float(sigma * width / width_ref), window, kernel)


@dataclass
class DensityProfile:
    centers: np.ndarray
    values: np.ndarray
    sigma: float

    @property
    def q_levels(self) -> int:
        return len(self.centers)


@dataclass
class PeakSet:
    bins: np.ndarray
    times: np.ndarray
    window: int


@dataclass
class Session:
    index: int
    event_indices: np.ndarray
    peak_time: float

    def __len__(self) -> int:
        return len(self.event_indices)


@dataclass
class ViewPair:
    first: list[Session]
    second: list[Session]
    rate: float
    seeds: tuple[int, int]


def bin_centers(times: np.ndarray, q_levels: int) -> np.ndarray:
    lo, hi = float(times.min()), float(times.max())
    if hi == lo:
        return np.array([lo])
    width = (hi - lo) / q_levels
    return lo + (np.arange(q_levels) + 0.5) * width


def kernel_values(offsets: np.ndarray, sigma: float, kernel: str) -> np.ndarray:
    """Kernel evaluated at ``offsets = t_bin - t_event``."""
    u = offsets / sigma
    if kernel == "gaussian":
        return np.exp(-(u * u))
    if kernel == "laplace":
        return np.exp(-np.abs(u))
    with np.errstate(over="ignore"):
        return np.exp(-u)


def density(user, q_levels: int, sigma: float, kernel: str = "gaussian") -> DensityProfile:
    times = user.timestamps if isinstance(user, UserSequence) else np.asarray(user, dtype=np.float64)
    if len(times) == 0:
        raise EmptyProfileError("cannot build a density profile for a user with no events")
    if q_levels < 1 or not sigma > 0:
        raise ValueError("need q_levels >= 1 and sigma > 0")
    centers = bin_centers(times, q_levels)
    q = len(centers)
    if kernel not in _CUTOFF or q == 1:
        values = np.zeros(q)
        for t in times:
            values += kernel_values(centers - t, sigma, kernel)
        return DensityProfile(centers, values, sigma)

    # only bins within the underflow radius receive a nonzero term; bincount
    # adds them in event order, as a direct double loop would
    width = centers[1] - centers[0]
    radius = int(np.ceil(_CUTOFF[kernel] * sigma / width)) + 1
    nearest = np.clip(np.round((times - centers[0]) / width).astype(np.int64), 0, q - 1)
    lo = np.maximum(nearest - radius, 0)
    hi = np.minimum(nearest + radius, q - 1)
    counts = hi - lo + 1
    owner = np.repeat(np.arange(len(times)), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    idx = lo[owner] + (np.arange(counts.sum()) - starts)
    vals = kernel_values(centers[idx] - times[owner], sigma, kernel)
    values = np.bincount(idx, weights=vals, minlength=q)
    return DensityProfile(centers, values, sigma)


def find_peaks(profile: DensityProfile, window: int = 1) -> PeakSet:
    """Bins that are >= every bin within ``window``; out-of-range neighbours lose.

    Consecutive peaks of equal height form a plateau and only its first bin
    is kept.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    d = profile.values
    q = len(d)
    padded = np.concatenate([np.full(window, -np.inf), d, np.full(window, -np.inf)])
    is_peak = np.ones(q, dtype=bool)
    for delta in range(-window, window + 1):
        if delta:
            is_peak &= d >= padded[window + delta : window + delta + q]
    plateau_tail = np.zeros(q, dtype=bool)
    plateau_tail[1:] = is_peak[1:] & is_peak[:-1] & (d[1:] == d[:-1])
    bins = np.flatnonzero(is_peak & ~plateau_tail)
    return PeakSet(bins, profile.centers[bins], window)


def nearest_peak(times: np.ndarray, peak_times: np.ndarray) -> np.ndarray:
    """Index of the nearest peak for each time; exact ties go to the earlier peak.

    Only the two peaks bracketing each time are compared, which is exact as
    long as peaks are further apart than float rounding at the event times
    (always true for bin centres).
    """
    peak_times = np.asarray(peak_times, dtype=np.float64)
    right = np.clip(np.searchsorted(peak_times, times, side="left"), 0, len(peak_times) - 1)
    left = np.clip(right - 1, 0, len(peak_times) - 1)
    take_left = np.abs(times - peak_times[left]) <= np.abs(times - peak_times[right])
    return np.where(take_left, left, right)


def assign_sessions(user, peaks: PeakSet) -> list[Session]:
    times = user.timestamps if isinstance(user, UserSequence) else np.asarray(user, dtype=np.float64)
    if len(peaks.times) == 0:
        raise ValueError("assign_sessions needs at least one peak")
    owner = nearest_peak(times, peaks.times)
    sessions = []
    for j in np.unique(owner):
        members = np.flatnonzero(owner == j)
        sessions.append(Session(len(sessions), members, float(peaks.times[j])))
    return sessions


def segment(user, cfg: SegmentConfig) -> list[Session]:
    profile = density(user, cfg.q_levels, cfg.sigma, cfg.kernel)
    return assign_sessions(user, find_peaks(profile, cfg.window))


def session_dropout(sessions: list, rate: float, seed) -> list:
    """Keep each session with probability ``1 - rate``, never returning an empty list."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not sessions:
        raise ValueError("session_dropout needs at least one session")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = dropout_mask(len(sessions), rate, rng)
    return [s for s, k in zip(sessions, keep) if k]


def make_view_pair(sessions: list, rate: float, seed: int, user_id: int = 0) -> ViewPair:
    seeds = (derive_seed(seed, "view", user_id, 0), derive_seed(seed, "view", user_id, 1))
    views = [session_dropout(sessions, rate, np.random.Generator(np.random.PCG64(s))) for s in seeds]
    return ViewPair(views[0], views[1], rate, seeds)


def dropout_mask(n_sessions: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean keep-mask with the same law as :func:`session_dropout`."""
    keep = rng.random(n_sessions) >= rate
    if not keep.any():
        keep[rng.integers(n_sessions)] = True
    return keep
