import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emgdiag.decompose import Decomposition, DecomposeConfig, MuapTemplate, decompose, match_events
from emgdiag.features import (DROPPED, FEATURE_NAMES, SELECTED_NAMES, FeatureError, MuapFeatures, NoMuaps,
                              aggregate, count_turns, duration_span, muap_features, select_18, signal_features)
from emgdiag.signal_io import FiringAnnotation
from emgdiag.simulate import SimConfig, simulate

from oracles import turns_oracle

RATE = 24000.0
EVENTS = np.linspace(0.0, 1.0, 11)


def biphasic(pos=300.0, neg=-200.0, n=144):
    t = np.arange(n)
    return pos * np.exp(-0.5 * ((t - 60) / 5) ** 2) + neg * np.exp(-0.5 * ((t - 80) / 5) ** 2)


def test_biphasic_amplitude_and_phases():
    w = biphasic()
    f = muap_features(w, EVENTS, RATE)
    assert f.amplitude == pytest.approx(500.0, rel=1e-3)
    assert f.n_phases == 2


def test_firing_rate_11_events():
    f = muap_features(biphasic(), EVENTS, RATE)
    assert f.firing_rate == pytest.approx(10.0)


def test_single_event_firing_rate_zero():
    assert muap_features(biphasic(), [0.3], RATE).firing_rate == 0.0


def test_errors():
    with pytest.raises(FeatureError):
        muap_features(np.zeros(144), EVENTS, RATE)
    with pytest.raises(FeatureError):
        muap_features(biphasic(), [], RATE)


def test_piecewise_linear_turns():
    # extrema +100, -10, +200: each change is >= 25 µV
    knots = [0, 100, -10, 200, 0]
    w = np.concatenate([np.linspace(a, b, 20, endpoint=False) for a, b in zip(knots[:-1], knots[1:])] + [[0.0]])
    span = duration_span(w)
    assert count_turns(w, span) == turns_oracle(w, span) == 3


def test_small_wiggles_not_turns():
    w = biphasic() + 5 * np.sin(np.arange(144) * 1.3)
    f = muap_features(w, EVENTS, RATE)
    assert f.n_turns == turns_oracle(w, duration_span(w))
    assert f.n_turns <= 4


def test_plateau_extremum():
    w = np.array([0, 0, 50, 80, 80, 80, 30, -20, -20, 0, 0], dtype=float)
    span = duration_span(w)
    assert count_turns(w, span) == turns_oracle(w, span) == 2


@settings(max_examples=300, deadline=None)
@given(arrays(float, st.integers(3, 80), elements=st.integers(-40, 40).map(lambda v: v * 10.0)))
def test_turns_match_oracle(w):
    assume(np.any(w))
    span = duration_span(w)
    assert count_turns(w, span) == turns_oracle(w, span)


def test_duration_and_energy_definitions():
    w = np.zeros(144)
    w[50:60] = 100.0
    w[60:70] = -100.0
    f = muap_features(w, EVENTS, RATE)
    dt = 1000.0 / RATE
    assert f.duration == pytest.approx(20 * dt)
    assert f.energy == pytest.approx(20 * 100.0 ** 2 * dt)
    assert f.n_phases == 2
    # energy uniform on 20 samples: variance (n^2 - 1) / 12 samples^2
    assert f.time_spreading == pytest.approx(2 * np.sqrt((20 ** 2 - 1) / 12) * dt)


def test_duration_floor_for_small_potentials():
    w = biphasic(30.0, -20.0)
    i0, i1 = duration_span(w)
    assert np.all(np.abs(w[[i0, i1]]) >= 20.0)
    tiny = biphasic(8.0, -5.0)
    i0, i1 = duration_span(tiny)
    assert i0 <= i1


def test_time_spreading_formula():
    # spread about the centroid equals the raw-moment expression
    w = biphasic() + np.random.default_rng(3).normal(0, 4, 144)
    f = muap_features(w, EVENTS, RATE)
    i0, i1 = duration_span(w)
    t = np.arange(i0, i1 + 1) * 1000.0 / RATE
    p = w[i0:i1 + 1] ** 2
    raw = 2 * np.sqrt(np.sum(t ** 2 * p) / p.sum() - (np.sum(t * p) / p.sum()) ** 2)
    assert f.time_spreading == pytest.approx(raw, rel=1e-6)


def waveforms(min_amp=0.0):
    def build(params):
        n, lobes = params
        t = np.arange(n, dtype=float)
        w = np.zeros(n)
        for c, s, a in lobes:
            w += a * np.exp(-0.5 * ((t - c * n) / s) ** 2)
        return w
    lobe = st.tuples(st.floats(0.3, 0.7), st.floats(1.5, 8.0), st.floats(-900, 900).filter(lambda a: abs(a) > 1))
    return st.tuples(st.integers(100, 200), st.lists(lobe, min_size=1, max_size=5)).map(build).filter(
        lambda w: np.ptp(w) >= min_amp and abs(w[0]) < 1e-3 * np.ptp(w) and abs(w[-1]) < 1e-3 * np.ptp(w))


@settings(max_examples=100, deadline=None)
@given(waveforms(), st.floats(0.0, 0.02), st.integers(-20, 20))
def test_time_shift_invariance(w, dt, roll):
    f0 = muap_features(w, EVENTS, RATE)
    f1 = muap_features(w, EVENTS + dt, RATE)
    assert f0.as_array() == pytest.approx(f1.as_array(), rel=1e-9)
    # moving the waveform within its window changes nothing either
    pad = np.concatenate([np.zeros(30), w, np.zeros(30)])
    f2 = muap_features(np.roll(pad, roll), EVENTS, RATE)
    assert f2.as_array() == pytest.approx(muap_features(pad, EVENTS, RATE).as_array(), rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(waveforms(min_amp=400.0), st.floats(1.0, 20.0))
def test_amplitude_scaling_laws(w, c):
    # with amplitude >= 400 µV the 5 % rule sets the duration threshold at both scales
    f0 = muap_features(w, EVENTS, RATE)
    f1 = muap_features(c * w, EVENTS, RATE)
    assert f1.amplitude == pytest.approx(c * f0.amplitude, rel=1e-9)
    assert f1.energy == pytest.approx(c ** 2 * f0.energy, rel=1e-9)
    assert f1.n_phases == f0.n_phases
    assert f1.n_turns >= f0.n_turns
    assert f1.firing_rate == f0.firing_rate
    assert f1.duration == f0.duration
    assert f1.time_spreading == pytest.approx(f0.time_spreading, rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(waveforms())
def test_muap_invariants(w):
    f = muap_features(w, EVENTS, RATE)
    assert f.amplitude >= 0
    assert 0 < f.duration <= w.size * 1000.0 / RATE
    assert f.n_phases >= 1 and f.n_turns >= 0
    assert f.time_spreading <= f.duration


@settings(max_examples=60, deadline=None)
@given(st.lists(waveforms(), min_size=1, max_size=8), st.data())
def test_min_mean_max(ws, data):
    per = [muap_features(w, np.sort(data.draw(st.lists(st.floats(0, 20), min_size=2, max_size=30))), RATE)
           for w in ws]
    v = aggregate(per).values
    assert v[0] == len(ws)
    stats = v[1:].reshape(7, 3)
    assert np.all(stats[:, 0] <= stats[:, 1]) and np.all(stats[:, 1] <= stats[:, 2])
    if len(ws) == 1:
        assert np.all(stats[:, 0] == stats[:, 2]) and np.all(stats[:, 1] == stats[:, 0])


def _feat(amp):
    return MuapFeatures(10.0, amp, 2, 1.0, 2, 1.0, 0.5)


def test_aggregate_examples():
    v = aggregate([_feat(500.0)])
    assert (v["amp_min"], v["amp_mean"], v["amp_max"]) == (500.0, 500.0, 500.0)
    v = aggregate([_feat(200.0), _feat(500.0), _feat(800.0)])
    assert (v["amp_min"], v["amp_mean"], v["amp_max"]) == (200.0, 500.0, 800.0)
    assert v["n_muaps"] == 3


def test_no_muaps():
    with pytest.raises(NoMuaps):
        signal_features(Decomposition((), FiringAnnotation(), 0.0, RATE))
    with pytest.raises(NoMuaps):
        aggregate([])


def test_feature_names_and_selection():
    assert len(FEATURE_NAMES) == 22 and len(SELECTED_NAMES) == 18
    assert set(FEATURE_NAMES) - set(SELECTED_NAMES) == set(DROPPED)
    assert FEATURE_NAMES[:4] == ("n_muaps", "fr_min", "fr_mean", "fr_max")
    x = np.arange(22.0)
    out = select_18(x)
    assert out.shape == (18,)
    assert out[:3].tolist() == x[1:4].tolist()
    assert select_18(np.zeros(22)).tolist() == [0.0] * 18
    with pytest.raises(ValueError):
        select_18(np.zeros(18))


def test_signal_features_five_unit_simulation():
    sim = simulate(SimConfig.for_label("healthy", seed=11, n_units=(5, 5)))
    dec = decompose(sim.signal)
    v = signal_features(dec, signal_id=sim.signal.id)
    assert 1 <= v["n_muaps"] <= 5
    assert v["n_muaps"] == dec.n_units
    assert np.all(np.isfinite(v.values))


def test_redecomposition_matches_template_features():
    sim = simulate(SimConfig.for_label("healthy", seed=5, n_units=(3, 3), snr_db=40.0))
    dec = decompose(sim.signal, DecomposeConfig(highpass_hz=1.0))
    res = match_events(sim.truth, dec.annotation)
    assert None not in res.pairs.values()
    for true_id, est_id in res.pairs.items():
        a = muap_features(sim.true_templates[true_id], sim.truth.times_for(true_id), RATE)
        b = muap_features(dec.template(est_id).waveform, dec.annotation.times_for(est_id), RATE)
        for name in ("firing_rate", "amplitude", "energy", "duration", "time_spreading"):
            assert getattr(b, name) == pytest.approx(getattr(a, name), rel=0.10), name
