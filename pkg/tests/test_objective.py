import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfdtm.autograd import Tape, Tensor, gradcheck
from hfdtm.dataio import CorridorTopology
from hfdtm.objective import (
    LossWeights,
    active_mse,
    conservation_loss,
    corridor_mse,
    total_loss,
)


def value(fn, *args):
    return float(fn(Tape(record=False), *args).data)


def test_active_mse_examples():
    y = np.array([[2.0, 9.0, 4.0]])
    assert value(active_mse, Tensor(y), y, [0, 2]) == 0.0
    assert value(active_mse, Tensor([[1.0, 9.0, 2.0]]), y, [0, 2]) == 2.5


def test_active_mse_ignores_excluded_index():
    y = np.array([[2.0, 9.0, 4.0]])
    a = value(active_mse, Tensor([[1.0, 9.0, 2.0]]), y, [0, 2])
    b = value(active_mse, Tensor([[1.0, -50.0, 2.0]]), y, [0, 2])
    assert a == b


def test_corridor_mse_examples():
    y = np.array([[1.0, 2.0, 3.0]])
    assert value(corridor_mse, Tensor(y), y, [1]) == 0.0
    assert value(corridor_mse, Tensor([[1.0, 5.0, 3.0]]), y, [1]) == 9.0


def test_empty_index_sets_rejected():
    with pytest.raises(ValueError):
        active_mse(Tape(), Tensor([[1.0]]), np.array([[1.0]]), [])
    with pytest.raises(ValueError):
        corridor_mse(Tape(), Tensor([[1.0]]), np.array([[1.0]]), [])
    with pytest.raises(ValueError):
        conservation_loss(Tape(), Tensor([[1.0]]), np.array([[1.0]]), [])
    with pytest.raises(ValueError):
        conservation_loss(Tape(), Tensor([[1.0]]), np.array([[1.0]]), [np.array([], dtype=int)])


def test_conservation_two_groups():
    # group sum errors 2 and 4
    y = np.zeros((1, 4))
    y_hat = Tensor([[1.0, 1.0, 3.0, 1.0]])
    assert value(conservation_loss, y_hat, y, [np.array([0, 1]), np.array([2, 3])]) == 10.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_conservation_invariant_to_within_group_permutation(seed):
    rng = np.random.default_rng(seed)
    groups = [np.array([0, 1, 2]), np.array([3, 4]), np.array([5, 6, 7, 8])]
    y = rng.normal(size=(4, 9))
    y_hat = y.copy()
    for g in groups:
        for b in range(4):
            y_hat[b, g] = y_hat[b, rng.permutation(g)]
    assert value(conservation_loss, Tensor(y_hat), y, groups) == pytest.approx(0.0, abs=1e-24)


def test_conservation_matches_brute_force():
    rng = np.random.default_rng(3)
    groups = [np.array([0, 4]), np.array([1, 2, 5]), np.array([3])]
    for _ in range(20):
        y, y_hat = rng.normal(size=(7, 6)), rng.normal(size=(7, 6))
        per_group = []
        for g in groups:
            errs = []
            for b in range(7):
                d = sum(y_hat[b, i] for i in g) - sum(y[b, i] for i in g)
                errs.append(d * d)
            per_group.append(sum(errs) / len(errs))
        expect = sum(per_group) / len(groups)
        got = value(conservation_loss, Tensor(y_hat), y, groups)
        assert got == pytest.approx(expect, rel=1e-12)


def two_group_topology():
    return CorridorTopology(
        movement_ids=("a0", "a1", "a2", "b0", "b1"),
        corridor_idx=np.array([0, 3]),
        active_idx=np.array([0, 1, 2, 3]),
        groups=(np.array([0, 1, 2]), np.array([3, 4])),
        zero_mask=np.array([1.0, 1.0, 1.0, 1.0, 0.0]),
    )


def test_total_loss_term_by_term_oracle():
    topo = two_group_topology()
    y = np.array([[1.0, 2.0, 0.5, 4.0, 0.0], [0.0, 1.0, 1.5, 2.0, 0.0]])
    y_hat = np.array([[1.5, 1.0, 0.5, 3.0, 0.0], [0.2, 1.4, 1.0, 2.5, 0.0]])
    d = y_hat - y
    l_mse = (d[:, :4] ** 2).sum() / 8
    l_corr = (d[:, [0, 3]] ** 2).sum() / 4
    g1 = d[:, :3].sum(axis=1)
    g2 = d[:, 3:].sum(axis=1)
    l_cons = ((g1**2).mean() + (g2**2).mean()) / 2
    expect = l_mse + 0.5 * l_corr + 0.1 * l_cons
    got = value(total_loss, Tensor(y_hat), y, topo, LossWeights())
    assert abs(got - expect) <= 1e-12


def test_total_loss_degenerate_weights_is_active_mse():
    topo = two_group_topology()
    rng = np.random.default_rng(5)
    y, y_hat = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    a = value(total_loss, Tensor(y_hat), y, topo, LossWeights(0.0, 0.0))
    assert a == value(active_mse, Tensor(y_hat), y, topo.active_idx)


def test_no_corridor_weight_keeps_conservation():
    topo = two_group_topology()
    rng = np.random.default_rng(6)
    y, y_hat = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    w = LossWeights().ablated("no_corridor_weight")
    expect = value(active_mse, Tensor(y_hat), y, topo.active_idx) + 0.1 * value(
        conservation_loss, Tensor(y_hat), y, topo.groups)
    assert value(total_loss, Tensor(y_hat), y, topo, w) == pytest.approx(expect, rel=1e-15)


def test_total_loss_zero_when_perfect():
    topo = two_group_topology()
    y = np.random.default_rng(7).normal(size=(3, 5))
    assert value(total_loss, Tensor(y), y, topo) == 0.0


def test_corridor_counted_twice():
    topo = two_group_topology()
    y = np.zeros((1, 5))
    y_hat = np.zeros((1, 5))
    y_hat[0, 0] = 1.0
    y_hat[0, 1] = -1.0  # group sum still zero
    got = value(total_loss, Tensor(y_hat), y, topo)
    assert got == pytest.approx(2 / 4 + 0.5 * (1 / 2))


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0.1)
    with pytest.raises(ValueError):
        LossWeights().ablated("no_refine")
    assert LossWeights().ablated("no_conservation") == LossWeights(0.5, 0.0)


@pytest.mark.parametrize("term", ["active", "corridor", "conservation", "total"])
def test_term_gradients(term):
    topo = two_group_topology()
    rng = np.random.default_rng(["active", "corridor", "conservation", "total"].index(term))
    y = rng.normal(size=(4, 5))
    for _ in range(5):
        y_hat = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        build = {
            "active": lambda t: active_mse(t, y_hat, y, topo.active_idx),
            "corridor": lambda t: corridor_mse(t, y_hat, y, topo.corridor_idx),
            "conservation": lambda t: conservation_loss(t, y_hat, y, topo.groups),
            "total": lambda t: total_loss(t, y_hat, y, topo),
        }[term]
        assert gradcheck(build, [y_hat])[0] < 1e-4
