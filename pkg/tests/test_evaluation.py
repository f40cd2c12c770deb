import math

import numpy as np
import pytest

from hfdtm.evaluation import (
    ExperimentCache,
    MetricsReport,
    analysis_text,
    analyze_dataset,
    evaluate,
    pct_delta,
    residuals_csv,
    run_ablation,
    run_comparison,
)
from hfdtm.metrics import mae, rmse
from hfdtm.training import TrainConfig, train

FAST = TrainConfig(window=4, hidden=6, embed=4, mlp_hidden=8, batch_size=64, max_epochs=2)


def test_metric_examples():
    assert mae([2, 4], [3, 6]) == 1.5
    assert rmse([2, 4], [3, 6]) == pytest.approx(math.sqrt(2.5), rel=1e-15)
    assert mae([1, 2], [1, 2]) == rmse([1, 2], [1, 2]) == 0.0


def test_metric_errors():
    with pytest.raises(ValueError):
        mae([1, 2], [1])
    with pytest.raises(ValueError):
        rmse([], [])


def test_metrics_against_elementwise_loop():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 50))
        p, t = rng.normal(size=n) * 10, rng.normal(size=n) * 10
        abs_sum = sq_sum = 0.0
        for a, b in zip(p, t):
            abs_sum += abs(b - a)
            sq_sum += (b - a) ** 2
        assert abs(mae(p, t) - abs_sum / n) <= 1e-12
        assert abs(rmse(p, t) - math.sqrt(sq_sum / n)) <= 1e-12
        assert rmse(p, t) >= mae(p, t)


def test_metrics_order_invariant():
    rng = np.random.default_rng(1)
    p, t = rng.normal(size=100), rng.normal(size=100)
    perm = rng.permutation(100)
    assert mae(p[perm], t[perm]) == pytest.approx(mae(p, t), rel=1e-14)
    assert rmse(p[perm], t[perm]) == pytest.approx(rmse(p, t), rel=1e-14)


def test_report_rejects_inconsistent_metrics():
    with pytest.raises(ValueError):
        MetricsReport("x", mae=2.0, rmse=1.0)
    assert "train_seconds" not in MetricsReport("x", 1.0, 1.0).to_dict(timings=False)


def test_pct_delta():
    assert pct_delta(3.0, 2.0) == 50.0
    assert pct_delta(2.0, 2.0) == 0.0


class Oracle:
    """Stands in for a model: returns the true next step."""

    def __init__(self, model, windows):
        self.__dict__.update(kind=model.kind, topology=model.topology, seed=0)
        self.lookup = {X.tobytes(): y for X, y in zip(windows.all()[0], windows.all()[1])}

    def predict(self, X, h):
        return np.stack([self.lookup[x.tobytes()] for x in X])


@pytest.fixture(scope="module")
def trained(tiny_data):
    return train("hfdtm", tiny_data, FAST)


def test_perfect_oracle_scores_zero(tiny_data, trained):
    model, _ = trained
    rep = evaluate(Oracle(model, tiny_data.test), tiny_data.test, tiny_data.norm, tiny_data.topology)
    assert rep.mae == 0.0 and rep.rmse == 0.0


def test_evaluate_over_active_set_only(tiny_data, trained):
    model, hist = trained
    rep = evaluate(model, tiny_data.test, tiny_data.norm, tiny_data.topology, hist, config=FAST)
    topo = tiny_data.topology
    assert set(rep.per_movement_mae) == {topo.movement_ids[i] for i in topo.active_idx}
    assert rep.mae == pytest.approx(np.mean(list(rep.per_movement_mae.values())), rel=1e-12)
    assert rep.best_epoch == hist.best_epoch and rep.config_digest == FAST.digest()
    again = evaluate(model, tiny_data.test, tiny_data.norm, tiny_data.topology, hist, config=FAST)
    assert rep == again


def test_evaluate_rejects_other_topology(tiny_data, trained, paper_topology):
    with pytest.raises(ValueError, match="topology"):
        evaluate(trained[0], tiny_data.test, tiny_data.norm, paper_topology)


def test_residuals_csv(tmp_path, tiny_data, trained):
    path = tmp_path / "res.csv"
    residuals_csv(trained[0], tiny_data.test, tiny_data.norm, path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(tiny_data.test) + 1
    assert lines[0].split(",")[:2] == ["sample", "hour"]


@pytest.fixture(scope="module")
def tables(tiny_data):
    cache = ExperimentCache(tiny_data, FAST)
    comp = run_comparison(tiny_data, FAST, seeds=(0, 1), cache=cache)
    abl = run_ablation(tiny_data, FAST, seeds=(0, 1), cache=cache)
    return comp, abl, cache


def test_comparison_table_structure(tables):
    comp, _, _ = tables
    assert len(comp.rows) == 3 * (2 + 1)
    assert [r["label"] for r in comp.mean_rows()] == ["HFD-TM", "GRU", "LSTM"]
    assert comp.mean("HFD-TM") == pytest.approx(np.mean([r["mae"] for r in comp.rows
                                                         if r["label"] == "HFD-TM" and r["seed"] != "mean"]))
    assert "HFD-TM" in comp.to_text()


def test_ablation_table_structure_and_shared_run(tables):
    comp, abl, cache = tables
    assert len(abl.rows) == 4 * (2 + 1)
    assert all(r["mae_delta_pct"] == 0.0 for r in abl.rows if r["label"] == "Full Model")
    # full-model arm reuses the comparison run
    assert len(cache.runs) == 3 * 2 + 3 * 2
    assert abl.mean("Full Model") == comp.mean("HFD-TM")


def test_deltas_recompute_from_mae_columns(tables):
    for table in tables[:2]:
        for r in table.rows:
            ref = next(x for x in table.rows if x["label"] == table.reference and x["seed"] == r["seed"])
            assert r["mae_delta_pct"] == pytest.approx((r["mae"] - ref["mae"]) / ref["mae"] * 100, rel=1e-12)
            assert r["rmse"] >= r["mae"]


def test_table_json_without_timings(tables):
    d = tables[0].to_dict(timings=False)
    assert all("train_seconds" not in r for r in d["rows"])


def test_analyze_dataset(default_dataset):
    table, topo = default_dataset
    rep = analyze_dataset(table, topo)
    assert 0.60 <= rep["summary"]["corridor_volume_share"] <= 0.70
    assert len(rep["movements"]) == 72
    m = rep["movements"][0]
    assert m["total_var"] == pytest.approx(m["expected_cond_var"] + m["var_cond_mean"], rel=1e-9)
    assert "corridor volume share" in analysis_text(rep)
