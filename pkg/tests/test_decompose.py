import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emgdiag.decompose import (REFRACTORY_S, DecomposeConfig, Decomposition, DecompositionError, MuapTemplate,
                               count_matches, decompose, detect_spikes, estimate_noise_sigma, highpass,
                               match_events, reconstruct, reconstruct_from)
from emgdiag.signal_io import FiringAnnotation, Signal
from emgdiag.simulate import SimConfig, simulate

RATE = 24000.0


def pulse(n=144, amp=500.0):
    t = np.arange(n) - n // 2
    return amp * (np.exp(-0.5 * (t / 6.0) ** 2) - 0.6 * np.exp(-0.5 * ((t - 14) / 6.0) ** 2))


def test_noise_sigma_zero_and_empty():
    assert estimate_noise_sigma(np.zeros(1000)) == 0.0
    with pytest.raises(DecompositionError):
        estimate_noise_sigma(np.zeros(0))


def test_noise_sigma_gaussian():
    x = np.random.default_rng(0).normal(0, 10, 24000)
    assert 9 <= estimate_noise_sigma(Signal("n", x)) <= 11


def test_noise_sigma_robust_to_spikes():
    rng = np.random.default_rng(1)
    x = rng.normal(0, 10, 24000)
    idx = rng.choice(x.size, 200, replace=False)
    x[idx] += 500 * rng.choice([-1, 1], idx.size)
    assert 9 <= estimate_noise_sigma(x) <= 12


def test_highpass_removes_dc_and_commutes_with_shift():
    x = np.random.default_rng(2).normal(0, 1, 4800) + 50.0
    y = highpass(x, RATE, 100.0)
    assert abs(y.mean()) < 1e-9
    assert np.allclose(highpass(np.roll(x, 333), RATE, 100.0), np.roll(y, 333), atol=1e-9)
    with pytest.raises(DecompositionError):
        highpass(x, RATE, 20000.0)


def test_detect_zero_signal():
    assert detect_spikes(Signal("z", np.zeros(24000))).size == 0


def _with_pulses(centers, seed=0):
    x = np.random.default_rng(seed).normal(0, 10, 24000)
    w = pulse()
    for c in centers:
        x[c - 72:c + 72] += w
    return Signal("p", x)


def test_detect_single_pulse():
    idx = detect_spikes(_with_pulses([12000]))
    assert idx.size == 1
    assert abs(idx[0] - 12000) <= 12


def test_detect_two_pulses_20ms_apart():
    assert detect_spikes(_with_pulses([8000, 8480])).size == 2


def test_decompose_zero_signal():
    d = decompose(Signal("z", np.zeros(48000)))
    assert d.n_units == 0 and len(d.annotation) == 0


def test_decompose_errors():
    with pytest.raises(DecompositionError):
        decompose(Signal("short", np.zeros(12000)))
    with pytest.raises(DecompositionError):
        decompose(Signal("r", np.zeros(48000), 24000), DecomposeConfig(expected_rate_hz=10000))


@pytest.mark.parametrize("kwargs", [dict(window_ms=0), dict(match_threshold=1.5), dict(merge_corr=0),
                                    dict(min_occurrences=0), dict(rate_bounds_hz=(5, 2)), dict(highpass_hz=-1)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        DecomposeConfig(**kwargs)


def test_single_unit_recovered():
    sim = simulate(SimConfig.for_label("healthy", seed=1, n_units=(1, 1), duration_s=10.0, firing_rates=(10.0,)))
    d = decompose(sim.signal)
    res = match_events(sim.truth, d.annotation)
    assert d.n_units == 1
    assert res.matched[1] >= 0.95 * res.true_counts[1]
    assert res.n_spurious_units == 0


def test_three_units_recovered():
    sim = simulate(SimConfig.for_label("healthy", seed=2, n_units=(3, 3), amplitudes_uv=(300, 600, 900)))
    d = decompose(sim.signal)
    res = match_events(sim.truth, d.annotation)
    assert d.n_units == 3
    assert res.min_f1 >= 0.95


@pytest.fixture(scope="module")
def myopathic():
    sim = simulate(SimConfig.for_label("myopathic", seed=4))
    return sim, decompose(sim.signal)


def test_decomposition_invariants(myopathic):
    sim, d = myopathic
    L = DecomposeConfig().window_samples(RATE)
    assert [t.unit_id for t in d.templates] == list(range(1, d.n_units + 1))
    assert set(d.annotation.units) == set(range(1, d.n_units + 1))
    counts = [t.occurrences for t in d.templates]
    assert counts == sorted(counts, reverse=True)
    for t in d.templates:
        assert t.waveform.size == L
        assert int(np.argmax(np.abs(t.waveform))) == L // 2
        times = d.annotation.times_for(t.unit_id)
        assert times.size == t.occurrences
        assert np.all(np.diff(times) >= REFRACTORY_S - 0.5 / RATE)
    assert 0.0 <= d.residual_energy_fraction <= 1.0


def test_deterministic(myopathic):
    sim, d = myopathic
    d2 = decompose(sim.signal)
    assert d2.annotation == d.annotation
    assert all(np.array_equal(a.waveform, b.waveform) for a, b in zip(d.templates, d2.templates))


def test_peel_off_never_increases_residual(myopathic):
    sim, d = myopathic
    off = decompose(sim.signal, DecomposeConfig(peel_off=False))
    assert d.residual_energy_fraction <= off.residual_energy_fraction
    assert len(d.annotation) >= len(off.annotation)


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["healthy", "myopathic", "neuropathic"]),
       st.floats(5.0, 30.0))
def test_peel_off_residual_property(seed, label, snr):
    sim = simulate(SimConfig.for_label(label, seed=seed, duration_s=2.0, snr_db=snr))
    on = decompose(sim.signal, DecomposeConfig(peel_off=True))
    off = decompose(sim.signal, DecomposeConfig(peel_off=False))
    assert on.residual_energy_fraction <= off.residual_energy_fraction


def test_amplitude_scaling():
    sim = simulate(SimConfig.for_label("healthy", seed=6, duration_s=6.0))
    d = decompose(sim.signal)
    # a power-of-two factor is exact in floating point
    d4 = decompose(Signal("s4", 4.0 * sim.signal.samples))
    assert d4.annotation == d.annotation
    for a, b in zip(d.templates, d4.templates):
        assert np.array_equal(b.waveform, 4.0 * a.waveform)
    d3 = decompose(Signal("s3", 3.3 * sim.signal.samples))
    assert d3.annotation == d.annotation
    for a, b in zip(d.templates, d3.templates):
        assert np.allclose(b.waveform, 3.3 * a.waveform, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("seed", [8, 9, 10])
def test_shift_equivariance(seed):
    # sequential clustering sees events in a rotated order, so equality holds up to a few edge events
    sim = simulate(SimConfig.for_label("healthy", seed=seed, duration_s=6.0))
    L = DecomposeConfig().window_samples(RATE)
    n = len(sim.signal)
    shift = 25 * L
    d = decompose(sim.signal)
    ds = decompose(Signal("s", np.roll(sim.signal.samples, shift)))
    assert ds.n_units == d.n_units
    res = match_events(
        FiringAnnotation(np.mod(d.annotation.times + shift / RATE, n / RATE), d.annotation.unit_ids),
        ds.annotation, tol_s=2.0 / RATE)
    assert res.min_f1 >= 0.97
    for u, v in res.pairs.items():
        a, b = d.template(u).waveform, ds.template(v).waveform
        assert np.linalg.norm(a - b) <= 0.05 * np.linalg.norm(a)


def test_reconstruct_examples():
    w = pulse()
    empty = Decomposition((), FiringAnnotation(), 0.0, RATE)
    assert not np.any(reconstruct(empty, 1000).samples)
    one = Decomposition((MuapTemplate(1, w, 1),), FiringAnnotation([72 / RATE], [1]), 0.0, RATE)
    r = reconstruct(one, 1000).samples
    assert np.array_equal(r, np.concatenate([w, np.zeros(1000 - w.size)]))
    two = FiringAnnotation([100 / RATE, 130 / RATE], [1, 1])
    r = reconstruct_from({1: w}, two, 400, RATE)
    expect = np.zeros(400)
    expect[28:172] += w
    expect[58:202] += w
    assert np.array_equal(r, expect)


def test_reconstruct_errors():
    with pytest.raises(DecompositionError):
        reconstruct_from({1: pulse()}, FiringAnnotation([1.0], [1]), 100, RATE)
    with pytest.raises(DecompositionError):
        reconstruct_from({1: pulse()}, FiringAnnotation([0.001], [2]), 1000, RATE)


def test_count_matches_and_f1():
    a = np.array([0.1, 0.2, 0.3])
    assert count_matches(a, a + 0.0004, 0.0005) == 3
    assert count_matches(a, a + 0.0006, 0.0005) == 0
    truth = FiringAnnotation([0.1, 0.2, 0.3, 0.5], [1, 1, 2, 2])
    est = FiringAnnotation([0.1001, 0.2, 0.3, 0.7], [5, 5, 9, 9])
    res = match_events(truth, est)
    assert res.pairs == {1: 5, 2: 9}
    assert res.f1[1] == 1.0 and res.f1[2] == pytest.approx(0.5)
    assert res.n_spurious_units == 0
