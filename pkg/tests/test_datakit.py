import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpoison import datakit as dk
from fedpoison.errors import ConfigurationError, FormatError, InputError


def test_bpsk_points():
    np.testing.assert_array_equal(dk.modulate([0, 1], "BPSK", 1), [1 + 0j, -1 + 0j])


@pytest.mark.parametrize("scheme,order", [("BPSK", 2), ("QPSK", 4), ("PSK8", 8), ("PAM4", 4), ("QAM16", 16), ("QAM64", 64)])
def test_constellations_unit_power_distinct(scheme, order):
    pts = dk.constellation(scheme)
    assert len(pts) == order
    assert len(np.unique(np.round(pts, 12))) == order
    assert abs(np.mean(np.abs(pts) ** 2) - 1) <= 1e-9


@pytest.mark.parametrize("scheme", ["QPSK", "PSK8", "PAM4", "QAM16", "QAM64"])
def test_gray_coding_nearest_neighbours_differ_by_one_bit(scheme):
    pts = dk.constellation(scheme)
    for s, p in enumerate(pts):
        d = np.abs(pts - p)
        d[s] = np.inf
        nearest = np.flatnonzero(np.isclose(d, d.min()))
        assert all(bin(s ^ int(n)).count("1") == 1 for n in nearest), (scheme, s)


@pytest.mark.parametrize("scheme", ["CPFSK", "GFSK"])
def test_fsk_constant_envelope(scheme, rng):
    x = dk.modulate(rng.integers(0, 2, 16), scheme, 8)
    assert x.shape == (128,)
    np.testing.assert_allclose(np.abs(x), 1.0, rtol=1e-12)


def test_cpfsk_phase_continuous(rng):
    x = dk.modulate(rng.integers(0, 2, 32), "CPFSK", 8)
    step = np.angle(x[1:] / x[:-1])
    # every sample advances the phase by +-pi*h/sps
    np.testing.assert_allclose(np.abs(step), np.pi * dk.FSK_MOD_INDEX / 8, rtol=1e-9)


def test_modulate_errors():
    with pytest.raises(ConfigurationError):
        dk.modulate([0], "OOK")
    with pytest.raises(InputError):
        dk.modulate([4], "QPSK")


def test_linear_modulation_repeats_symbols():
    x = dk.modulate([0, 3], "QPSK", 4)
    assert len(x) == 8
    assert np.all(x[:4] == x[0]) and np.all(x[4:] == x[4])


def test_channel_infinite_snr_is_noise_free(rng):
    s = dk.modulate(rng.integers(0, 4, 16), "QPSK", 8)
    out = dk.apply_channel(s, dk.ChannelSpec(math.inf), rng)
    np.testing.assert_array_equal(out, s)


def test_channel_snr_monte_carlo():
    # Independent power measurement over 10,000 frames.
    rng = np.random.default_rng(0)
    s = dk.modulate(rng.integers(0, 16, (10_000, 16)), "QAM16", 8)
    spec = dk.ChannelSpec(10.0)
    r = dk.apply_channel(s, spec, rng)
    signal = np.sqrt(10 ** (spec.snr_db / 10)) * s
    noise = r - signal
    measured = 10 * np.log10(np.mean(np.abs(signal) ** 2) / np.mean(np.abs(noise) ** 2))
    assert abs(measured - 10.0) <= 0.2


def test_channel_deterministic():
    s = dk.modulate(np.arange(16) % 2, "BPSK", 8)
    spec = dk.ChannelSpec(5.0, "rayleigh_flat")
    a = dk.apply_channel(s, spec, np.random.default_rng(3))
    b = dk.apply_channel(s, spec, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


def test_rayleigh_flat_single_tap_per_frame():
    s = np.ones(64, dtype=complex)
    out = dk.apply_channel(s, dk.ChannelSpec(math.inf, "rayleigh_flat"), np.random.default_rng(1))
    assert np.allclose(out, out[0])


def test_channel_spec_rejects_nan():
    with pytest.raises(ConfigurationError):
        dk.ChannelSpec(float("nan"))


def test_to_real_frame_example():
    f = dk.to_real_frame(np.array([1 + 1j, 1 - 1j]))
    np.testing.assert_allclose(f, [[0.5, 0.5], [0.5, -0.5]])


def test_to_real_frame_zero_is_error():
    with pytest.raises(InputError):
        dk.to_real_frame(np.zeros(8, dtype=complex))


@given(st.integers(0, 2**32 - 1))
def test_normalisation_unit_energy_and_idempotent(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(32) + 1j * rng.standard_normal(32)
    f = dk.to_real_frame(x)
    assert abs(dk.frame_energy(f) - 1) <= 1e-6
    np.testing.assert_allclose(dk.to_real_frame(f), f, rtol=1e-12)


def test_generate_counts_and_determinism():
    a = dk.generate_dataset(["BPSK", "QPSK"], 5, dk.ChannelSpec(10), seed=9)
    assert len(a) == 10
    assert a.class_counts().tolist() == [5, 5]
    b = dk.generate_dataset(["BPSK", "QPSK"], 5, dk.ChannelSpec(10), seed=9)
    assert a.equals(b)
    assert a.frames.tobytes() == b.frames.tobytes()


def test_generate_full_scale_count():
    # 4,500 frames per class over ten classes gives the 45K training set size;
    # only the count arithmetic is checked here with a cheap window.
    ds = dk.generate_dataset(list(dk.SCHEMES), 4500 * 10 // 8, dk.ChannelSpec(10), length=8, seed=0, samples_per_symbol=1)
    assert len(ds) == 45_000 - 45_000 % 8


def test_generated_frames_unit_energy():
    ds = dk.generate_dataset(list(dk.SCHEMES), 20, dk.ChannelSpec(10), seed=3)
    assert np.all(np.abs(dk.frame_energy(ds.frames) - 1) <= 1e-6)
    assert np.all(np.isfinite(ds.frames))
    assert ds.frames.shape == (160, 128, 2)


def test_split_sizes_and_disjointness():
    labels = np.repeat(np.arange(4), 15_000)
    tr, te = dk.split_indices(labels, 0.75, 0)
    assert len(tr) == 45_000 and len(te) == 15_000
    assert np.intersect1d(tr, te).size == 0
    assert np.array_equal(np.union1d(tr, te), np.arange(60_000))


def test_split_stratified(toy4):
    tr, te = dk.split_train_test(toy4, 0.75, 1)
    for c in range(4):
        n = (toy4.labels == c).sum()
        assert abs((tr.labels == c).sum() - 0.75 * n) <= 1
    assert len(tr) + len(te) == len(toy4)


def test_split_errors():
    with pytest.raises(InputError):
        dk.split_indices(np.array([0, 1, 1]), 0.5, 0)
    with pytest.raises(ConfigurationError):
        dk.split_indices(np.array([0, 0]), 1.0, 0)


def _check_disjoint(plan, n):
    allidx = np.concatenate(plan.device_index_lists)
    assert len(np.unique(allidx)) == len(allidx)
    assert allidx.min() >= 0 and allidx.max() < n


def test_iid_full_scale():
    labels = np.repeat(np.arange(10), 4500)
    ds = dk.LabeledDataset(np.zeros((45_000, 1, 2)), labels, [str(i) for i in range(10)])
    plan = dk.partition_iid(ds, 10, 0)
    assert plan.sizes() == [4500] * 10
    _check_disjoint(plan, len(ds))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 1000), st.lists(st.integers(1, 40), min_size=2, max_size=6))
def test_iid_balanced(K, seed, counts):
    labels = np.concatenate([np.full(c, i) for i, c in enumerate(counts)])
    if len(labels) < K:
        return
    ds = dk.LabeledDataset(np.zeros((len(labels), 1, 2)), labels, [str(i) for i in range(len(counts))])
    plan = dk.partition_iid(ds, K, seed)
    _check_disjoint(plan, len(ds))
    assert sum(plan.sizes()) == len(ds)
    assert max(plan.sizes()) - min(plan.sizes()) <= 1
    for c in range(len(counts)):
        per = [np.sum(labels[ix] == c) for ix in plan.device_index_lists]
        assert max(per) - min(per) <= 1


def test_iid_single_device_is_permutation(toy4):
    plan = dk.partition_iid(toy4, 1, 3)
    assert sorted(plan.device_index_lists[0].tolist()) == list(range(len(toy4)))


def test_noniid_label_limit_and_disjoint():
    labels = np.repeat(np.arange(10), 4500)
    ds = dk.LabeledDataset(np.zeros((45_000, 1, 2)), labels, [str(i) for i in range(10)])
    plan = dk.partition_noniid(ds, 10, 4500, 45, 3, seed=0)
    _check_disjoint(plan, len(ds))
    for ix in plan.device_index_lists:
        assert len(np.unique(labels[ix])) <= 3


def test_noniid_zero_std_exact_quantity(toy4):
    plan = dk.partition_noniid(toy4, 3, 20, 0, 2, seed=1)
    assert plan.params["targets"] == [20, 20, 20]
    assert plan.sizes() == [20, 20, 20]


def test_noniid_exhaustion_warns(toy4):
    plan = dk.partition_noniid(toy4, 4, 200, 0, 2, seed=0)
    assert plan.warnings
    _check_disjoint(plan, len(toy4))


def test_noniid_too_many_labels(toy4):
    with pytest.raises(ConfigurationError):
        dk.partition_noniid(toy4, 2, 10, 1, 5, 0)


def test_save_load_roundtrip(tmp_path, toy4):
    p = tmp_path / "d.fpsim"
    dk.save_dataset(toy4, p)
    back = dk.load_dataset(p)
    assert back.equals(toy4)
    assert back.meta["snr_db"] == 10.0 and back.meta["seed"] == 7
    assert p.read_bytes()[:6] == b"FPSIM1"


def test_empty_dataset_roundtrip(tmp_path):
    ds = dk.LabeledDataset(np.zeros((0, 16, 2)), [], ["A", "B"], {"snr_db": 3.0})
    dk.save_dataset(ds, tmp_path / "e")
    back = dk.load_dataset(tmp_path / "e")
    assert len(back) == 0 and back.scheme_names == ("A", "B")


def test_format_errors(tmp_path, toy4):
    raw = dk.dataset_to_bytes(toy4)
    with pytest.raises(FormatError) as e:
        dk.dataset_from_bytes(raw[: len(raw) // 2])
    assert e.value.offset is not None
    with pytest.raises(FormatError, match="magic"):
        dk.dataset_from_bytes(b"XXXXXX" + raw[6:])
    corrupted = bytearray(raw)
    corrupted[100] ^= 0xFF
    with pytest.raises(FormatError, match="checksum"):
        dk.dataset_from_bytes(bytes(corrupted))
    with pytest.raises(FormatError):
        dk.dataset_from_bytes(b"FPS")


def test_from_arrays_ingests_complex(rng):
    iq = rng.standard_normal((6, 16)) + 1j * rng.standard_normal((6, 16))
    ds = dk.from_arrays(iq, [0, 1, 0, 1, 0, 1], ["A", "B"], snr_db=5)
    assert ds.frames.shape == (6, 16, 2)
    np.testing.assert_allclose(dk.frame_energy(ds.frames), 1, atol=1e-6)


def test_gfsk_short_frame_shorter_than_filter():
    x = dk.modulate(np.array([[0, 1, 1, 0], [1, 1, 0, 0]]), "GFSK", 4)
    assert x.shape == (2, 16)
    np.testing.assert_allclose(np.abs(x), 1.0, rtol=1e-12)
