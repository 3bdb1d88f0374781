"""
Template-matching decomposition of a needle EMG tracing into MUAP trains.

The procedure is deterministic:

1. zero-phase high-pass, robust noise estimate, peak detection on |x|;
2. sequential greedy clustering of peak-centred windows against running-mean
   templates, subtracting each explained window from a working residual;
3. merging of near-duplicate templates;
4. discarding of templates that fire too rarely or at implausible rates;
5. one peel-off pass on the residual to recover superimposed firings;
6. renumbering by descending occurrence count.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import linear_sum_assignment
from scipy.signal import butter, find_peaks, freqz

from .signal_io import FiringAnnotation, Signal

logger = logging.getLogger(__name__)

REFRACTORY_S = 0.010
MAD_TO_SIGMA = 0.6745
MIN_DURATION_S = 1.0


class DecompositionError(ValueError):
    pass


@dataclass(frozen=True)
class DecomposeConfig:
    window_ms: float = 6.0
    detect_k: float = 5.0
    match_threshold: float = 0.3
    merge_corr: float = 0.95
    min_occurrences: int = 5
    rate_bounds_hz: tuple[float, float] = (2.0, 50.0)
    highpass_hz: float = 100.0
    peel_off: bool = True
    align_ms: float = 1.0          # max realignment of a window against a template
    expected_rate_hz: Optional[float] = None

    def __post_init__(self):
        for name in ("window_ms", "detect_k", "highpass_hz", "align_ms"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.match_threshold < 1:
            raise ValueError("match_threshold must lie in (0, 1)")
        if not 0 < self.merge_corr < 1:
            raise ValueError("merge_corr must lie in (0, 1)")
        if self.min_occurrences < 1:
            raise ValueError("min_occurrences must be positive")
        lo, hi = self.rate_bounds_hz
        if not 0 < lo < hi:
            raise ValueError("rate_bounds_hz must be positive and ordered")
        object.__setattr__(self, "rate_bounds_hz", (float(lo), float(hi)))

    def window_samples(self, rate: float) -> int:
        return int(round(self.window_ms * rate / 1000.0))


@dataclass(frozen=True)
class MuapTemplate:
    unit_id: int
    waveform: np.ndarray
    occurrences: int

    @property
    def center(self) -> int:
        return self.waveform.size // 2


@dataclass(frozen=True)
class Decomposition:
    templates: tuple[MuapTemplate, ...]
    annotation: FiringAnnotation
    residual_energy_fraction: float
    sample_rate_hz: float
    noise_sigma: float = 0.0
    threshold: float = 0.0

    @property
    def n_units(self) -> int:
        return len(self.templates)

    def template(self, unit_id: int) -> MuapTemplate:
        for t in self.templates:
            if t.unit_id == unit_id:
                return t
        raise KeyError(unit_id)

    def waveforms(self) -> dict[int, np.ndarray]:
        return {t.unit_id: t.waveform for t in self.templates}


# ---------------------------------------------------------------------------
# preprocessing and detection

def _samples(signal) -> np.ndarray:
    return np.asarray(signal.samples if isinstance(signal, Signal) else signal, dtype=float)


def estimate_noise_sigma(signal) -> float:
    """Robust noise scale ``median(|x - median(x)|) / 0.6745`` in µV."""
    x = _samples(signal)
    if x.size == 0:
        raise DecompositionError("cannot estimate noise of an empty signal")
    return float(np.median(np.abs(x - np.median(x))) / MAD_TO_SIGMA)


def highpass(x: np.ndarray, rate: float, cutoff_hz: float) -> np.ndarray:
    """
    Zero-phase first-order Butterworth high-pass.

    The squared magnitude response of the single-pole filter (what a
    forward-backward pass applies) is imposed in the frequency domain, so
    the operation commutes exactly with circular shifts.
    """
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return x.copy()
    if not 0 < cutoff_hz < rate / 2:
        raise DecompositionError(f"high-pass cutoff {cutoff_hz} Hz incompatible with rate {rate} Hz")
    b, a = butter(1, cutoff_hz, btype="highpass", fs=rate)
    freqs = np.fft.rfftfreq(x.size, d=1.0 / rate)
    _, h = freqz(b, a, worN=freqs, fs=rate)
    return np.fft.irfft(np.fft.rfft(x) * np.abs(h) ** 2, n=x.size)


def _find_peaks(x: np.ndarray, threshold: float, half_window: int) -> np.ndarray:
    if x.size < 3 or threshold <= 0 and not np.any(x):
        return np.zeros(0, dtype=int)
    peaks, _ = find_peaks(np.abs(x), height=max(threshold, np.finfo(float).tiny),
                          distance=max(half_window, 1))
    return peaks.astype(int)


def detect_spikes(signal: Signal, config: DecomposeConfig = DecomposeConfig(),
                  sigma: Optional[float] = None) -> np.ndarray:
    """
    Sample indices of spikes in ``signal``.

    Peaks of the high-passed |x| above ``detect_k * sigma`` are kept when no
    larger peak lies within half a window. ``sigma`` defaults to the robust
    noise estimate of the filtered trace.
    """
    rate = signal.sample_rate_hz
    x = highpass(signal.samples, rate, config.highpass_hz)
    if sigma is None:
        sigma = estimate_noise_sigma(x)
    L = config.window_samples(rate)
    if sigma <= 0 or x.size <= L:
        return np.zeros(0, dtype=int)
    return _find_peaks(x, config.detect_k * sigma, L // 2)


# ---------------------------------------------------------------------------
# reconstruction

def event_index(t: float, rate: float) -> int:
    return int(np.floor(t * rate + 0.5))


def reconstruct_from(waveforms: Mapping[int, np.ndarray], annotation: FiringAnnotation,
                     length: int, rate: float) -> np.ndarray:
    """Sum each unit's waveform centred on each of its firing samples; tails are clipped at the edges."""
    out = np.zeros(length)
    for t, unit in zip(annotation.times, annotation.unit_ids):
        idx = event_index(t, rate)
        if not 0 <= idx < length:
            raise DecompositionError(f"event at {t:.6f} s lies outside a {length}-sample signal")
        try:
            w = waveforms[int(unit)]
        except KeyError:
            raise DecompositionError(f"event references unknown unit {unit}") from None
        start = idx - w.size // 2
        lo, hi = max(start, 0), min(start + w.size, length)
        out[lo:hi] += w[lo - start:hi - start]
    return out


def reconstruct(decomposition: Decomposition, length: int, rate: Optional[float] = None) -> Signal:
    rate = decomposition.sample_rate_hz if rate is None else rate
    samples = reconstruct_from(decomposition.waveforms(), decomposition.annotation, length, rate)
    return Signal("reconstruction", samples, rate)


# ---------------------------------------------------------------------------
# decomposition

class _Bank:
    """Running-mean templates with per-template event lists (sample indices)."""

    def __init__(self, length: int):
        self.length = length
        self._sums = np.zeros((16, length))
        self._means = np.zeros((16, length))
        self._energy = np.zeros(16)
        self._last = np.zeros(16, dtype=np.int64)
        self.events: list[list[int]] = []

    def __len__(self):
        return len(self.events)

    def mean(self, k: int) -> np.ndarray:
        return self._means[k]

    def means(self) -> np.ndarray:
        return self._means[:len(self)]

    def energies(self) -> np.ndarray:
        return self._energy[:len(self)]

    def add(self, k: Optional[int], window: np.ndarray, sample: int) -> int:
        if k is None:
            k = len(self)
            if k == self._sums.shape[0]:
                grow = lambda a: np.concatenate([a, np.zeros_like(a)])
                self._sums, self._means = grow(self._sums), grow(self._means)
                self._energy, self._last = grow(self._energy), grow(self._last)
            self.events.append([sample])
            self._sums[k] = window
            self._last[k] = sample
        else:
            bisect.insort(self.events[k], sample)
            self._sums[k] += window
            self._last[k] = self.events[k][-1]
        self._means[k] = self._sums[k] / len(self.events[k])
        self._energy[k] = np.dot(self._means[k], self._means[k])
        return k

    def candidates_near(self, sample: int, gap: int) -> np.ndarray:
        """Templates that may hold an event within ``gap`` of ``sample`` (superset)."""
        # events are added in nearly increasing order, so the last one bounds the search
        return np.flatnonzero(self._last[:len(self)] > sample - gap)

    def near(self, k: int, sample: int, gap: int) -> bool:
        return _near(self.events[k], sample, gap)


def _shift_order(S: int) -> np.ndarray:
    # 0, -1, +1, -2, +2, ...: argmin ties resolve toward the smallest shift
    order = [0]
    for s in range(1, S + 1):
        order += [-s, s]
    return np.array(order)


def _shifted(t: np.ndarray, s: int) -> np.ndarray:
    """Waveform delayed by ``s`` samples with zero fill."""
    out = np.zeros_like(t)
    if s >= 0:
        out[s:] = t[:t.size - s]
    else:
        out[:s] = t[-s:]
    return out


def _first_pass(x, threshold, L, S, refractory, config):
    h = L // 2
    n = x.size
    work = x.copy()
    bank = _Bank(L)
    shifts = _shift_order(S)
    for c0 in _find_peaks(x, threshold, h):
        if c0 - 2 * S - h < 0 or c0 + 2 * S - h + L > n:
            continue
        seg = np.abs(work[c0 - S:c0 + S + 1])
        if seg.max() < threshold:
            continue  # already explained by an earlier subtraction
        c = c0 - S + int(np.argmax(seg))
        region = work[c - S - h:c + S - h + L]
        W = sliding_window_view(region, L)[shifts + S]          # (n_shifts, L)
        best_k, best_s = None, 0
        if len(bank):
            T = bank.means()
            ww = np.einsum("ij,ij->i", W, W)
            with np.errstate(divide="ignore", invalid="ignore"):
                R = (ww[None, :] + bank.energies()[:, None] - 2.0 * T @ W.T) / ww[None, :]
            R[~np.isfinite(R)] = np.inf
            for k in bank.candidates_near(c, refractory + 2 * S):
                if bank.near(k, c, refractory + S):
                    blocked = [bank.near(k, c + int(s), refractory) for s in shifts]
                    R[k, np.array(blocked)] = np.inf
            flat = int(np.argmin(R))
            k, si = divmod(flat, len(shifts))
            if R[k, si] < config.match_threshold:
                best_k, best_s = k, int(shifts[si])
        if best_k is None:
            window = work[c - h:c - h + L].copy()
            bank.add(None, window, c)
            work[c - h:c - h + L] -= window
        else:
            s0 = c + best_s - h
            bank.add(best_k, work[s0:s0 + L].copy(), c + best_s)
            work[s0:s0 + L] -= bank.mean(best_k)
    return bank


def _pair_scores(T: np.ndarray, rows: np.ndarray, S: int, config: DecomposeConfig):
    """
    Best merge score of templates ``rows`` against every template.

    Returns (ncc, lag) matrices of shape (len(rows), K); ncc is -inf where the
    pair fails the correlation or amplitude criterion. ``lag`` delays the
    column template onto the row template.
    """
    K, L = T.shape
    norms = np.linalg.norm(T, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    energy = norms ** 2
    P = np.pad(T, ((0, 0), (S, S)))
    best = np.full((rows.size, K), -np.inf)
    best_lag = np.zeros((rows.size, K), dtype=int)
    A = T[rows]
    for lag in _shift_order(S):
        Tl = P[:, S - lag:S - lag + L]
        cross = A @ Tl.T
        ncc = cross / (safe[rows, None] * safe[None, :])
        resid = energy[rows, None] + np.einsum("ij,ij->i", Tl, Tl)[None, :] - 2.0 * cross
        # amplitude guard: the pair must also match under the assignment rule
        ok = (ncc >= config.merge_corr) & (resid < config.match_threshold * np.maximum.outer(energy[rows], energy))
        better = ok & (ncc > best)
        best[better] = ncc[better]
        best_lag[better] = lag
    best[np.arange(rows.size), rows] = -np.inf
    return best, best_lag


def _merge(bank: _Bank, S: int, config: DecomposeConfig) -> list[tuple[np.ndarray, list[int]]]:
    units = [(bank.mean(k).copy(), list(bank.events[k])) for k in range(len(bank))]
    if len(units) < 2:
        return units
    T = np.array([u[0] for u in units])
    score, lags = _pair_scores(T, np.arange(len(units)), S, config)
    while len(units) > 1 and np.isfinite(score).any():
        flat = int(np.argmax(score))
        i, j = divmod(flat, len(units))
        lag = int(lags[i, j])
        # keep the one with more occurrences (the earlier one on ties)
        if len(units[j][1]) > len(units[i][1]) or (len(units[j][1]) == len(units[i][1]) and j < i):
            i, j, lag = j, i, -lag
        (wi, ei), (wj, ej) = units[i], units[j]
        ni, nj = len(ei), len(ej)
        units[i] = ((wi * ni + _shifted(wj, lag) * nj) / (ni + nj), sorted(ei + [e - lag for e in ej]))
        del units[j]
        T = np.array([u[0] for u in units])
        score = np.delete(np.delete(score, j, axis=0), j, axis=1)
        lags = np.delete(np.delete(lags, j, axis=0), j, axis=1)
        i -= i > j
        row, row_lag = _pair_scores(T, np.array([i]), S, config)
        score[i], lags[i] = row[0], row_lag[0]
        score[:, i], lags[:, i] = row[0], -row_lag[0]
        score[i, i] = -np.inf
    return units


def _recenter(units, n):
    h_of = lambda w: w.size // 2
    out = []
    for w, ev in units:
        if not np.any(w):
            out.append((w, ev))
            continue
        d = int(np.argmax(np.abs(w))) - h_of(w)
        if d:
            w = _shifted(w, -d)
            ev = [e + d for e in ev]
        out.append((w, [e for e in ev if 0 <= e < n]))
    return out


def _rate(events: Sequence[int], rate: float) -> float:
    if len(events) < 2 or events[-1] == events[0]:
        return 0.0
    return (len(events) - 1) * rate / (events[-1] - events[0])


def _peel_off(x, units, threshold, L, S, refractory, config, max_subtractions=3):
    h = L // 2
    n = x.size
    templates = [w for w, _ in units]
    events = [list(ev) for _, ev in units]
    r = x - reconstruct_from({k: w for k, w in enumerate(templates, start=1)},
                             _annotation_from(events, 1.0), n, 1.0)
    T = np.array(templates)
    tt = np.einsum("ij,ij->i", T, T)
    shifts = _shift_order(S)
    for c0 in _find_peaks(r, threshold, h):
        if c0 - 2 * S - h < 0 or c0 + 2 * S - h + L > n:
            continue
        for _ in range(max_subtractions):
            seg = np.abs(r[c0 - S:c0 + S + 1])
            if seg.max() < threshold:
                break
            c = c0 - S + int(np.argmax(seg))
            W = sliding_window_view(r[c - S - h:c + S - h + L], L)[shifts + S]
            gain = 2.0 * T @ W.T - tt[:, None]            # energy removed by subtracting
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = gain / tt[:, None]
            valid = np.isfinite(ratio) & (ratio >= 1.0 - config.match_threshold)
            for k in range(len(templates)):
                for si, s in enumerate(shifts):
                    if valid[k, si] and _near(events[k], c + int(s), refractory):
                        valid[k, si] = False
            if not valid.any():
                break
            gain = np.where(valid, gain, -np.inf)
            k, si = divmod(int(np.argmax(gain)), len(shifts))
            pos = c + int(shifts[si])
            r[pos - h:pos - h + L] -= templates[k]
            bisect.insort(events[k], pos)
    return [(w, ev) for w, ev in zip(templates, events)]


def _near(ev: list[int], sample: int, gap: int) -> bool:
    i = bisect.bisect_left(ev, sample)
    return (i < len(ev) and ev[i] - sample < gap) or (i > 0 and sample - ev[i - 1] < gap)


def _annotation_from(events: Sequence[Sequence[int]], rate: float) -> FiringAnnotation:
    pairs = [(e / rate, k) for k, ev in enumerate(events, start=1) for e in ev]
    pairs.sort(key=lambda p: (p[0], p[1]))
    return FiringAnnotation.from_events(pairs)


def _energy_fraction(x: np.ndarray, recon: np.ndarray) -> float:
    total = float(np.dot(x, x))
    if total == 0:
        return 0.0
    resid = x - recon
    return float(min(max(np.dot(resid, resid) / total, 0.0), 1.0))


def decompose(signal: Signal, config: DecomposeConfig = DecomposeConfig()) -> Decomposition:
    """
    Decompose ``signal`` into MUAP templates and their firing times.

    Templates and the residual fraction refer to the high-passed trace.
    Identical input and configuration give identical output.

    Raises
    ------
    DecompositionError
        If the signal is shorter than one second or its rate disagrees with
        ``config.expected_rate_hz``.
    """
    rate = signal.sample_rate_hz
    if config.expected_rate_hz is not None and not np.isclose(rate, config.expected_rate_hz):
        raise DecompositionError(f"signal rate {rate} Hz differs from configured {config.expected_rate_hz} Hz")
    if signal.duration_s < MIN_DURATION_S:
        raise DecompositionError(f"signal lasts {signal.duration_s:.3f} s; at least {MIN_DURATION_S} s required")
    L = config.window_samples(rate)
    if L < 8:
        raise DecompositionError(f"window of {config.window_ms} ms is only {L} samples at {rate} Hz")
    S = max(1, int(round(config.align_ms * rate / 1000.0)))
    refractory = int(np.ceil(REFRACTORY_S * rate))

    x = highpass(signal.samples, rate, config.highpass_hz)
    sigma = estimate_noise_sigma(x)
    threshold = config.detect_k * sigma
    empty = Decomposition((), FiringAnnotation(), 0.0 if not np.any(x) else 1.0, rate, sigma, threshold)
    if sigma <= 0:
        return empty

    bank = _first_pass(x, threshold, L, S, refractory, config)
    units = _recenter(_merge(bank, S, config), x.size)
    lo, hi = config.rate_bounds_hz
    units = [(w, ev) for w, ev in units
             if len(ev) >= config.min_occurrences and lo <= _rate(ev, rate) <= hi and np.any(w)]
    if units and config.peel_off:
        units = _peel_off(x, units, threshold, L, S, refractory, config)
    if not units:
        return empty

    # stable sort keeps creation order among equal counts
    units = sorted(units, key=lambda u: -len(u[1]))
    events = [ev for _, ev in units]
    annotation = _annotation_from(events, rate)
    templates = tuple(MuapTemplate(k, w, len(ev)) for k, (w, ev) in enumerate(units, start=1))
    recon = reconstruct_from({t.unit_id: t.waveform for t in templates}, annotation, x.size, rate)
    logger.debug("%s: %d units, %d events", signal.id, len(templates), len(annotation))
    return Decomposition(templates, annotation, _energy_fraction(x, recon), rate, sigma, threshold)


# ---------------------------------------------------------------------------
# evaluation against ground truth

@dataclass(frozen=True)
class MatchResult:
    """Event-level agreement between a ground-truth and an estimated annotation."""

    pairs: dict[int, Optional[int]]           # true unit -> estimated unit
    f1: dict[int, float]                      # per true unit
    matched: dict[int, int]
    true_counts: dict[int, int]
    est_counts: dict[int, int] = field(default_factory=dict)

    @property
    def min_f1(self) -> float:
        return min(self.f1.values()) if self.f1 else 1.0

    @property
    def n_spurious_units(self) -> int:
        used = {v for v in self.pairs.values() if v is not None}
        return sum(1 for u in self.est_counts if u not in used)


def count_matches(a: np.ndarray, b: np.ndarray, tol: float) -> int:
    """Greedy one-to-one pairing of two sorted time arrays within ``tol``."""
    i = j = m = 0
    while i < a.size and j < b.size:
        d = a[i] - b[j]
        if abs(d) <= tol:
            m += 1
            i += 1
            j += 1
        elif d < 0:
            i += 1
        else:
            j += 1
    return m


def match_events(truth: FiringAnnotation, estimate: FiringAnnotation, tol_s: float = 0.0005) -> MatchResult:
    """Per-unit F1 under the unit pairing that maximizes total matched events."""
    tu, eu = truth.units, estimate.units
    counts = np.zeros((len(tu), len(eu)), dtype=int)
    for i, u in enumerate(tu):
        for j, v in enumerate(eu):
            counts[i, j] = count_matches(truth.times_for(u), estimate.times_for(v), tol_s + 1e-9)
    pairs: dict[int, Optional[int]] = {u: None for u in tu}
    matched = {u: 0 for u in tu}
    if counts.size:
        rows, cols = linear_sum_assignment(counts, maximize=True)
        for i, j in zip(rows, cols):
            pairs[tu[i]] = eu[j]
            matched[tu[i]] = int(counts[i, j])
    true_counts = {u: int(truth.times_for(u).size) for u in tu}
    est_counts = {v: int(estimate.times_for(v).size) for v in eu}
    f1 = {}
    for u in tu:
        v = pairs[u]
        denom = true_counts[u] + (est_counts[v] if v is not None else 0)
        f1[u] = 2.0 * matched[u] / denom if denom else 0.0
    return MatchResult(pairs, f1, matched, true_counts, est_counts)
