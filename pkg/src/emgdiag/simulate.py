"""
Synthetic needle-EMG tracings with ground truth.

Each motor unit contributes a MUAP built from derivative-of-Gaussian lobes,
fired by a Gaussian renewal process. Pathology shifts the parameter ranges:

* neuropathic: fewer units, larger and longer MUAPs, faster discharge, and
  some small, long, polyphasic nascent units;
* myopathic: more units, small and brief MUAPs.

Units are ranked by amplitude and the smallest are recruited first.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .decompose import reconstruct_from
from .features import amplitude, count_phases, duration_span
from .signal_io import FiringAnnotation, Label, Signal

logger = logging.getLogger(__name__)

REFRACTORY_S = 0.010
DEFAULT_NOISE_SIGMA_UV = 10.0
TAPER_FRACTION = 0.1
MAX_SHAPE_ATTEMPTS = 500
MAX_UNIT_DRAWS = 5000
ALIGN_MS = 1.0

Range = tuple[float, float]


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    label: Label = Label.HEALTHY
    duration_s: float = 20.0
    rate_hz: float = 24000.0
    n_units: tuple[int, int] = (3, 8)
    amplitude_uv: Range = (300.0, 900.0)
    amplitude_scale: Range = (1.0, 1.0)
    duration_ms: Range = (1.8, 2.8)
    duration_scale: Range = (1.0, 1.0)
    firing_rate_hz: Range = (8.0, 15.0)
    isi_cv: float = 0.15
    polyphasic_fraction: float = 0.05
    nascent_amplitude_scale: Range = (0.2, 0.5)
    nascent_duration_scale: Range = (1.6, 1.85)
    snr_db: float = 20.0
    noise_sigma_uv: Optional[float] = None
    window_ms: float = 6.0
    max_shape_similarity: float = 0.8   # between units of one tracing, aligned NCC
    seed: int = 0
    amplitudes_uv: Optional[tuple[float, ...]] = None   # explicit per-unit amplitudes
    firing_rates: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "label", Label.parse(self.label))
        if not self.duration_s >= 0 or not self.rate_hz > 0:
            raise SimulationError("duration must be nonnegative and rate positive")
        lo, hi = self.n_units
        if not 0 <= lo <= hi:
            raise SimulationError(f"n_units range {self.n_units} must be nonnegative and ordered")
        for name in ("amplitude_uv", "amplitude_scale", "duration_ms", "duration_scale",
                     "firing_rate_hz", "nascent_amplitude_scale", "nascent_duration_scale"):
            a, b = getattr(self, name)
            if not 0 < a <= b:
                raise SimulationError(f"{name} {getattr(self, name)} must be positive and ordered")
        if not 0 < self.max_shape_similarity <= 1:
            raise SimulationError("max_shape_similarity must lie in (0, 1]")
        if self.isi_cv < 0 or not 0 <= self.polyphasic_fraction <= 1:
            raise SimulationError("isi_cv must be >= 0 and polyphasic_fraction in [0, 1]")
        if self.noise_sigma_uv is not None and self.noise_sigma_uv < 0:
            raise SimulationError("noise_sigma_uv must be >= 0")
        if self.amplitudes_uv is not None:
            amps = tuple(float(a) for a in self.amplitudes_uv)
            if any(a <= 0 for a in amps):
                raise SimulationError("explicit amplitudes must be positive")
            object.__setattr__(self, "amplitudes_uv", amps)
        if self.firing_rates is not None:
            object.__setattr__(self, "firing_rates", tuple(float(r) for r in self.firing_rates))

    @classmethod
    def for_label(cls, label, **overrides) -> "SimConfig":
        label = Label.parse(label) if isinstance(label, str) else label
        return replace(cls(label=label, **CLASS_DEFAULTS[label]), **overrides)


CLASS_DEFAULTS: dict[Label, dict] = {
    Label.HEALTHY: dict(n_units=(3, 8), amplitude_scale=(1.0, 1.0), duration_scale=(1.0, 1.0),
                        firing_rate_hz=(8.0, 15.0), polyphasic_fraction=0.05),
    Label.NEUROPATHIC: dict(n_units=(1, 3), amplitude_scale=(2.0, 4.0), duration_scale=(1.3, 1.8),
                            firing_rate_hz=(15.0, 30.0), polyphasic_fraction=0.3),
    Label.MYOPATHIC: dict(n_units=(6, 12), amplitude_scale=(0.3, 0.6), duration_scale=(0.5, 0.8),
                          firing_rate_hz=(10.0, 20.0), polyphasic_fraction=0.05),
}


@dataclass(frozen=True)
class UnitParams:
    amplitude_uv: float
    duration_ms: float
    polyphasic: bool = False
    nascent: bool = False
    firing_rate_hz: float = 10.0
    window_ms: float = 6.0
    duration_range: Optional[Range] = None


@dataclass(frozen=True)
class SimOutput:
    signal: Signal
    truth: FiringAnnotation
    true_templates: dict[int, np.ndarray]
    noise: np.ndarray
    units: tuple[UnitParams, ...] = field(default=())

    @property
    def clean(self) -> np.ndarray:
        return reconstruct_from(self.true_templates, self.truth, len(self.signal), self.signal.sample_rate_hz)


# ---------------------------------------------------------------------------
# MUAP shapes

def _dog1(t, c, s):
    u = (t - c) / s
    return -u * np.exp(-0.5 * u * u)


def _dog2(t, c, s):
    u = (t - c) / s
    return (1.0 - u * u) * np.exp(-0.5 * u * u)


def _random_shape(polyphasic: bool, rng: np.random.Generator):
    """Lobe list (kind, centre, width, weight) on a unit time scale."""
    if polyphasic:
        n = int(rng.integers(4, 8))
        centres = np.linspace(-1.4, 1.4, n) + rng.uniform(-0.12, 0.12, n)
        weights = rng.uniform(0.45, 1.0, n) * np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        weights[int(rng.integers(n))] *= 1.6
        return [("d1", c, rng.uniform(0.22, 0.32), w) for c, w in zip(centres, weights)]
    n = int(rng.integers(2, 6))
    sign = float(rng.choice([-1.0, 1.0]))
    lobes = [("d2", 0.0, 1.0, sign), ("d1", 0.0, 1.0, sign * rng.uniform(-1.0, 1.0))]
    for _ in range(n - 1):
        kind = "d1" if rng.random() < 0.5 else "d2"
        lobes.append((kind, rng.uniform(-1.5, 1.5), rng.uniform(0.35, 1.0),
                      rng.uniform(0.2, 0.75) * rng.choice([-1.0, 1.0])))
    return lobes


def _evaluate(lobes, t):
    out = np.zeros_like(t, dtype=float)
    for kind, c, s, w in lobes:
        out += w * (_dog1(t, c, s) if kind == "d1" else _dog2(t, c, s))
    return out


def _dominant(w: np.ndarray, ratio: float = 1.15) -> bool:
    mag = np.abs(w)
    p = int(np.argmax(mag))
    d = np.diff(w)
    ext = np.flatnonzero(np.sign(d[1:]) != np.sign(d[:-1])) + 1
    others = mag[ext[ext != p]]
    return others.size == 0 or mag[p] >= ratio * others.max()


def _taper(n: int) -> np.ndarray:
    m = max(int(round(TAPER_FRACTION * n)), 1)
    ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(m) / m))
    win = np.ones(n)
    win[:m] = ramp
    win[n - m:] = ramp[::-1]
    return win


def make_template(params: UnitParams, rate: float, rng: np.random.Generator) -> np.ndarray:
    """
    Sample one MUAP waveform of ``params.window_ms`` centred on its |peak|.

    The peak-to-peak amplitude equals ``params.amplitude_uv``; the
    threshold duration (see :mod:`emgdiag.features`) matches
    ``params.duration_ms`` to within a sample and stays inside
    ``params.duration_range`` when one is given. Non-polyphasic shapes have
    2 to 4 phases, polyphasic ones at least 5.
    """
    if not params.amplitude_uv > 0:
        raise SimulationError("MUAP amplitude must be positive")
    if not params.duration_ms > 0:
        raise SimulationError("MUAP duration must be positive")
    L = int(round(params.window_ms * rate / 1000.0))
    h = L // 2
    if params.duration_ms > params.window_ms:
        raise SimulationError(f"duration {params.duration_ms} ms exceeds the {params.window_ms} ms window")
    dt_ms = 1000.0 / rate
    taper = _taper(L)
    grid = np.linspace(-6.0, 6.0, 12001)
    lo, hi = params.duration_range or (0.0, np.inf)
    for _ in range(MAX_SHAPE_ATTEMPTS):
        lobes = _random_shape(params.polyphasic, rng)
        dense = _evaluate(lobes, grid)
        dense /= dense.max() - dense.min()
        peak_t = grid[int(np.argmax(np.abs(dense)))]
        rel_thr = max(20.0 / params.amplitude_uv, 0.05)
        above = np.flatnonzero(np.abs(dense) >= rel_thr)
        span = grid[above[-1]] - grid[above[0]]
        scale = params.duration_ms / span          # ms per unit time
        w = None
        for _ in range(3):
            t = peak_t + (np.arange(L) - h) * dt_ms / scale
            w = _evaluate(lobes, t) * taper
            off = int(np.argmax(np.abs(w))) - h
            if off == 0:
                break
            peak_t += off * dt_ms / scale
        if w is None or int(np.argmax(np.abs(w))) != h or not np.any(w):
            continue
        w = w * (params.amplitude_uv / amplitude(w))
        if not _dominant(w):
            continue
        i0, i1 = duration_span(w)
        measured = (i1 - i0 + 1) * dt_ms
        if abs(measured - params.duration_ms) > 1.5 * dt_ms or not lo <= measured <= hi:
            continue
        phases = count_phases(w, (i0, i1))
        if params.polyphasic and phases < 5 or not params.polyphasic and not 2 <= phases <= 4:
            continue
        if max(abs(w[0]), abs(w[-1])) >= 0.01 * params.amplitude_uv:
            continue
        return w
    raise SimulationError(f"could not synthesize a MUAP for {params}")


def shape_similarity(a: np.ndarray, b: np.ndarray, max_lag: int) -> float:
    """Largest normalized cross-correlation of two waveforms over lags up to ``max_lag``."""
    c = np.correlate(a, b, "full")
    mid = a.size - 1
    return float(c[mid - max_lag:mid + max_lag + 1].max() / (np.linalg.norm(a) * np.linalg.norm(b)))


# ---------------------------------------------------------------------------
# firing

def make_firing_train(firing_rate: float, isi_cv: float, duration: float,
                      rng: np.random.Generator) -> np.ndarray:
    """
    Event times of a Gaussian renewal process on ``[0, duration]``.

    ISIs have mean ``1/rate`` and standard deviation ``cv/rate`` and are
    floored at 10 ms. The first event falls uniformly within one mean ISI.
    """
    if not firing_rate > 0:
        raise SimulationError("firing rate must be positive")
    if duration <= 0:
        return np.zeros(0)
    mean = 1.0 / firing_rate
    t = rng.uniform(0.0, mean)
    times = []
    while t <= duration:
        times.append(t)
        isi = mean if isi_cv == 0 else rng.normal(mean, isi_cv * mean)
        t += max(isi, REFRACTORY_S)
    return np.array(times)


# ---------------------------------------------------------------------------
# full tracing

def _uniform(rng, r: Range) -> float:
    return float(r[0]) if r[0] == r[1] else float(rng.uniform(*r))


def _draw_units(config: SimConfig, rng: np.random.Generator) -> list[UnitParams]:
    lo, hi = config.n_units
    if config.amplitudes_uv is not None:
        pool = [(a, a) for a in sorted(config.amplitudes_uv)]
    else:
        n = int(rng.integers(lo, hi + 1))
        # size principle: draw the whole pool, recruit the smallest n
        pool = []
        for _ in range(hi):
            base = _uniform(rng, config.amplitude_uv)
            pool.append((base, base * _uniform(rng, config.amplitude_scale)))
        pool = sorted(pool, key=lambda p: p[1])[:n]
    n = len(pool)
    nascent = [config.label is Label.NEUROPATHIC and rng.random() < config.polyphasic_fraction
               for _ in range(n)]
    if n and all(nascent):
        nascent[-1] = False
    polyphasic = [nas or (config.label is not Label.NEUROPATHIC and rng.random() < config.polyphasic_fraction)
                  for nas in nascent]
    dt_ms = 1000.0 / config.rate_hz
    units = []
    for k, (base_amp, amp) in enumerate(pool):
        base_dur = _uniform(rng, config.duration_ms)
        scale_range = config.nascent_duration_scale if nascent[k] else config.duration_scale
        drange = (config.duration_ms[0] * scale_range[0], config.duration_ms[1] * scale_range[1])
        dur = base_dur * _uniform(rng, scale_range)
        if nascent[k] and config.amplitudes_uv is None:
            amp = base_amp * _uniform(rng, config.nascent_amplitude_scale)
        dur = min(max(dur, drange[0] + dt_ms), drange[1] - dt_ms, config.window_ms * 0.9)
        rate = (config.firing_rates[k] if config.firing_rates is not None
                else _uniform(rng, config.firing_rate_hz))
        units.append(UnitParams(amp, dur, polyphasic[k], nascent[k], rate, config.window_ms, drange))
    # unit ids follow amplitude rank
    return sorted(units, key=lambda u: u.amplitude_uv)


def simulate(config: SimConfig) -> SimOutput:
    """
    Generate one labeled tracing with its ground truth.

    Noise is white Gaussian with ``noise_sigma_uv`` if set, otherwise chosen
    so that RMS(clean) / sigma matches ``snr_db``. A tracing without units
    gets ``DEFAULT_NOISE_SIGMA_UV`` unless a sigma is given. Firings whose
    window would cross the recording edges are dropped.
    """
    if config.firing_rates is not None and config.amplitudes_uv is not None \
            and len(config.firing_rates) != len(config.amplitudes_uv):
        raise SimulationError("firing_rates and amplitudes_uv differ in length")
    rng = np.random.default_rng(config.seed)
    rate = config.rate_hz
    N = int(round(config.duration_s * rate))
    units = _draw_units(config, rng)
    templates: dict[int, np.ndarray] = {}
    events: list[tuple[float, int]] = []
    lag = int(round(ALIGN_MS * rate / 1000.0))
    for uid, params in enumerate(units, start=1):
        for _ in range(MAX_UNIT_DRAWS):
            w = make_template(params, rate, rng)
            if all(shape_similarity(w, other, lag) <= config.max_shape_similarity
                   for other in templates.values()):
                break
        else:
            raise SimulationError(f"no MUAP shape dissimilar enough from the {len(templates)} "
                                  f"units already drawn; lower n_units or raise max_shape_similarity")
        templates[uid] = w
        h = w.size // 2
        for t in make_firing_train(params.firing_rate_hz, config.isi_cv, config.duration_s, rng):
            idx = int(np.floor(t * rate + 0.5))
            if idx - h >= 0 and idx - h + w.size <= N:
                events.append((idx / rate, uid))
    events.sort()
    truth = FiringAnnotation.from_events(events)
    clean = reconstruct_from(templates, truth, N, rate)
    if config.noise_sigma_uv is not None:
        sigma = config.noise_sigma_uv
    elif np.any(clean):
        sigma = float(np.sqrt(np.mean(clean ** 2))) / 10.0 ** (config.snr_db / 20.0)
    else:
        sigma = DEFAULT_NOISE_SIGMA_UV
    noise = rng.normal(0.0, sigma, N) if sigma > 0 else np.zeros(N)
    signal = Signal(f"sim_{config.label.value}_{config.seed}", clean + noise, rate, config.label)
    return SimOutput(signal, truth, templates, noise, tuple(units))
