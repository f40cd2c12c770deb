import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfdtm.dataio import MovementTable
from hfdtm.synth import (
    SynthConfig,
    compute_flow_statistics,
    equal_count_bins,
    generate_corridor_data,
    variance_decomposition,
)


def brute_force_decomposition(y, labels):
    """Per-bin loops with plain Python floats."""
    y = [float(v) for v in y]
    n = len(y)
    mean = sum(y) / n
    total = sum((v - mean) ** 2 for v in y) / n
    within = between = 0.0
    for b in sorted(set(labels.tolist())):
        vals = [y[i] for i in range(n) if labels[i] == b]
        m = sum(vals) / len(vals)
        within += len(vals) / n * (sum((v - m) ** 2 for v in vals) / len(vals))
        between += len(vals) / n * (m - mean) ** 2
    return total, within, between


def stamps(m):
    return np.datetime64("2025-01-06T00:00", "m") + np.arange(m) * np.timedelta64(15, "m")


def test_default_shape_and_zero_columns(default_dataset):
    table, topo = default_dataset
    assert table.counts.shape == (180 * 96, 72)
    assert topo.n_corridor == 12 and topo.n_groups == 6
    zero = topo.zero_mask == 0
    assert zero.sum() == 6
    assert not table.counts[:, zero].any()
    assert (table.counts >= 0).all() and (table.counts == np.round(table.counts)).all()


def test_same_seed_is_bitwise_identical():
    a, _ = generate_corridor_data(SynthConfig(days=5, seed=3))
    b, _ = generate_corridor_data(SynthConfig(days=5, seed=3))
    c, _ = generate_corridor_data(SynthConfig(days=5, seed=4))
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()


def test_one_day_has_96_rows():
    t, _ = generate_corridor_data(SynthConfig(days=1))
    assert len(t) == 96


@pytest.mark.parametrize("kw", [{"days": 0}, {"corridor_noise": -1.0}, {"zero_movements": ("I1:NB:T",)},
                                {"turn_ratios": {"XX:L": 0.1}}, {"corridor_noise_rho": 1.0}])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        generate_corridor_data(SynthConfig(**kw))


def test_config_dict_round_trip():
    cfg = SynthConfig(days=3, seed=9)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        SynthConfig.from_dict({"bogus": 1})


def test_perfect_dependence(topo6):
    rng = np.random.default_rng(0)
    c = rng.integers(5, 50, size=(200, 2)).astype(float)
    counts = np.zeros((200, 6))
    counts[:, [0, 3]] = c
    counts[:, 1] = c.sum(axis=1)  # identical to the corridor total
    counts[:, 2] = c.sum(axis=1)
    counts[:, 4] = c.sum(axis=1)
    stats = compute_flow_statistics(MovementTable(stamps(200), counts, topo6.movement_ids), topo6)
    assert stats.mean_corr == pytest.approx(1.0)
    assert stats.mean_r2 == pytest.approx(1.0)


def test_constant_turning_column_has_no_explained_variance(topo6):
    rng = np.random.default_rng(1)
    counts = rng.integers(0, 30, size=(100, 6)).astype(float)
    counts[:, 1] = 4.0
    counts[:, 5] = 0.0
    with pytest.warns(UserWarning, match="I1:NB:L"):
        stats = compute_flow_statistics(MovementTable(stamps(100), counts, topo6.movement_ids), topo6)
    assert stats.var_cond_mean[1] == 0.0
    assert stats.expected_cond_var[1] == stats.total_var[1]
    assert "I1:NB:L" in stats.skipped


def test_bin_balanced_column_has_zero_between_variance():
    yc = np.arange(200.0)
    labels = equal_count_bins(yc, 20)
    y = (np.arange(200) % 10).astype(float)  # same ten values inside every bin
    total, within, between = variance_decomposition(y, labels, 20)
    assert between[0] == pytest.approx(0.0, abs=1e-12)
    assert within[0] == pytest.approx(total[0])


def test_equal_count_bins():
    labels = equal_count_bins(np.random.default_rng(2).normal(size=103), 20)
    sizes = np.bincount(labels)
    assert sizes.size == 20 and sizes.max() - sizes.min() <= 1


def test_decomposition_matches_brute_force_on_generated_data(default_dataset):
    table, topo = default_dataset
    stats = compute_flow_statistics(table, topo, 20)
    yc = table.counts[:, topo.corridor_idx].sum(axis=1)
    labels = equal_count_bins(yc, 20)
    for i in [int(topo.turning_idx[0]), int(topo.turning_idx[17]), int(topo.corridor_idx[3])]:
        t, w, b = brute_force_decomposition(table.counts[:, i], labels)
        assert stats.total_var[i] == pytest.approx(t, rel=1e-9)
        assert stats.expected_cond_var[i] == pytest.approx(w, rel=1e-9)
        assert stats.var_cond_mean[i] == pytest.approx(b, rel=1e-9)
    live = stats.total_var > 0
    rel = np.abs(stats.expected_cond_var + stats.var_cond_mean - stats.total_var)[live] / stats.total_var[live]
    assert rel.max() < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_decomposition_identity_for_any_binning(n_bins, seed):
    rng = np.random.default_rng(seed)
    y = rng.lognormal(1.0, 1.0, size=(150, 3))
    labels = equal_count_bins(rng.normal(size=150), n_bins)
    total, within, between = variance_decomposition(y, labels, n_bins)
    np.testing.assert_allclose(within + between, total, rtol=1e-9)


def test_statistics_preconditions(topo6):
    t = MovementTable(stamps(10), np.ones((10, 6)), topo6.movement_ids)
    with pytest.raises(ValueError):
        compute_flow_statistics(t, topo6, n_bins=1)
