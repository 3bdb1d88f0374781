"""
Per-MUAP characteristics and the per-signal feature vector.

Seven characteristics are measured on every MUAP template and summarized
over the signal's MUAPs by (min, mean, max); with the MUAP count this gives
22 values, of which a fixed 18 feed the classifiers.

Definitions (w is the template in µV, ``rate`` in Hz):

* amplitude       max(w) - min(w)
* duration        inclusive span of samples with |w| >= max(20 µV, 5 % amplitude), ms
* n_phases        zero crossings within the duration span, plus one
* n_turns         extrema within the span that differ by >= 25 µV from the
                  previously counted extremum (the first is compared to 0 µV)
* energy          sum of w^2 over the span times the sample period, µV^2 ms
* time_spreading  twice the RMS spread of time around the energy centroid, ms
* firing_rate     (n_events - 1) / (t_last - t_first), 0 with fewer than two events
"""

from __future__ import annotations

import logging
from dataclasses import astuple, dataclass, fields
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DURATION_FLOOR_UV = 20.0
DURATION_FRACTION = 0.05
TURN_THRESHOLD_UV = 25.0

CHARACTERISTICS = ("firing_rate", "amplitude", "n_phases", "energy", "n_turns", "duration", "time_spreading")
_SHORT = ("fr", "amp", "ph", "en", "tu", "du", "ts")
FEATURE_NAMES: tuple[str, ...] = ("n_muaps",) + tuple(
    f"{s}_{stat}" for s in _SHORT for stat in ("min", "mean", "max"))
DROPPED = ("n_muaps", "ph_min", "en_min", "tu_min")
SELECTED_INDEX: tuple[int, ...] = tuple(i for i, n in enumerate(FEATURE_NAMES) if n not in DROPPED)
SELECTED_NAMES: tuple[str, ...] = tuple(FEATURE_NAMES[i] for i in SELECTED_INDEX)


class FeatureError(ValueError):
    pass


class NoMuaps(FeatureError):
    pass


@dataclass(frozen=True)
class MuapFeatures:
    firing_rate: float
    amplitude: float
    n_phases: int
    energy: float
    n_turns: int
    duration: float
    time_spreading: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)


def amplitude(w: np.ndarray) -> float:
    return float(np.max(w) - np.min(w))


def duration_span(w: np.ndarray) -> tuple[int, int]:
    """First and last sample index (inclusive) whose magnitude reaches the duration threshold."""
    mag = np.abs(w)
    thr = max(DURATION_FLOOR_UV, DURATION_FRACTION * amplitude(w))
    # tiny potentials: fall back to the peak itself rather than an empty span
    thr = min(thr, mag.max())
    above = np.flatnonzero(mag >= thr)
    return int(above[0]), int(above[-1])


def count_phases(w: np.ndarray, span: tuple[int, int]) -> int:
    seg = w[span[0]:span[1] + 1]
    seg = seg[seg != 0]
    return int(np.count_nonzero(np.signbit(seg[1:]) != np.signbit(seg[:-1]))) + 1


def extrema_indices(w: np.ndarray) -> np.ndarray:
    """Local extrema of ``w``; a plateau is reported at its first sample."""
    d = np.diff(w)
    nz = np.flatnonzero(d)
    if nz.size < 2:
        return np.zeros(0, dtype=int)
    s = np.sign(d[nz])
    turn = np.flatnonzero(s[1:] != s[:-1])
    return nz[turn] + 1


def count_turns(w: np.ndarray, span: tuple[int, int], threshold: float = TURN_THRESHOLD_UV) -> int:
    idx = extrema_indices(w)
    idx = idx[(idx >= span[0]) & (idx <= span[1])]
    ref = 0.0
    turns = 0
    for v in w[idx]:
        if abs(v - ref) >= threshold:
            turns += 1
            ref = v
    return turns


def firing_rate(times: Sequence[float]) -> float:
    times = np.sort(np.asarray(times, dtype=float))
    if times.size < 2 or times[-1] == times[0]:
        return 0.0
    return float((times.size - 1) / (times[-1] - times[0]))


def muap_features(template, event_times: Sequence[float], rate: float) -> MuapFeatures:
    """
    Measure one MUAP.

    ``template`` is a waveform array or any object with a ``waveform``
    attribute. Units with fewer than two events get a firing rate of 0.
    """
    w = np.asarray(getattr(template, "waveform", template), dtype=float)
    if w.size == 0 or not np.any(w):
        raise FeatureError("cannot measure a zero waveform")
    if len(event_times) == 0:
        raise FeatureError("unit has no firing events")
    if len(event_times) < 2:
        logger.warning("unit with a single event; firing rate set to 0")
    dt_ms = 1000.0 / rate
    i0, i1 = duration_span(w)
    seg = w[i0:i1 + 1]
    power = seg ** 2
    t = np.arange(i0, i1 + 1) * dt_ms
    total = power.sum()
    centroid = np.dot(t, power) / total
    # variance computed about the centroid; the raw-moment form loses precision
    spread = np.dot((t - centroid) ** 2, power) / total
    return MuapFeatures(
        firing_rate=firing_rate(event_times),
        amplitude=amplitude(w),
        n_phases=count_phases(w, (i0, i1)),
        energy=float(total * dt_ms),
        n_turns=count_turns(w, (i0, i1)),
        duration=(i1 - i0 + 1) * dt_ms,
        time_spreading=float(2.0 * np.sqrt(spread)),
    )


@dataclass(frozen=True)
class SignalFeatureVector:
    """The 22-value descriptor of one tracing, in ``FEATURE_NAMES`` order."""

    values: np.ndarray
    signal_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(FEATURE_NAMES),):
            raise ValueError(f"expected {len(FEATURE_NAMES)} values, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    def __getitem__(self, name: str) -> float:
        return float(self.values[FEATURE_NAMES.index(name)])

    @property
    def selected(self) -> np.ndarray:
        return select_18(self.values)


def aggregate(per_muap: Sequence[MuapFeatures], signal_id: str = "") -> SignalFeatureVector:
    if not per_muap:
        raise NoMuaps("no MUAPs to aggregate; the tracing cannot be classified")
    table = np.array([m.as_array() for m in per_muap])
    stats = np.stack([table.min(axis=0), table.mean(axis=0), table.max(axis=0)], axis=1)
    # float rounding in the mean must not break min <= mean <= max
    stats[:, 1] = np.clip(stats[:, 1], stats[:, 0], stats[:, 2])
    return SignalFeatureVector(np.concatenate([[len(per_muap)], stats.reshape(-1)]), signal_id)


def signal_features(decomposition, rate: Optional[float] = None, signal_id: str = "") -> SignalFeatureVector:
    """
    Feature vector of a decomposition.

    Raises
    ------
    NoMuaps
        If the decomposition holds no templates.
    """
    rate = decomposition.sample_rate_hz if rate is None else rate
    ann = decomposition.annotation
    per_muap = [muap_features(t.waveform, ann.times_for(t.unit_id), rate) for t in decomposition.templates]
    return aggregate(per_muap, signal_id)


def select_18(vector) -> np.ndarray:
    v = np.asarray(getattr(vector, "values", vector), dtype=float)
    if v.shape[-1] != len(FEATURE_NAMES):
        raise ValueError(f"expected {len(FEATURE_NAMES)} values, got {v.shape[-1]}")
    return v[..., list(SELECTED_INDEX)]
