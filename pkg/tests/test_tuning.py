import csv
import json
import math

import numpy as np
import pytest

from panelqr.data import PanelData
from panelqr.solver import lambda_upper_bound
from panelqr.tuning import TuningConfig, bic_select, default_c_nt, default_grid, gcv_select

from conftest import make_panel


def balanced(N=10, T=10, seed=0):
    return make_panel(np.random.default_rng(seed), N=N, T=T, p=1)


def test_default_grid_endpoints():
    assert default_grid(balanced(T=10), 0.5, 2) == pytest.approx((0.0, 5.0))


def test_default_grid_properties():
    d = balanced(T=10)
    g = default_grid(d, 0.3, 50)
    assert len(set(g)) == 50
    assert g[0] == 0.0
    assert max(g) == pytest.approx(lambda_upper_bound(0.3, 10))
    assert all(b > a for a, b in zip(g, g[1:]))
    with pytest.raises(ValueError):
        default_grid(d, 0.3, 1)


@pytest.mark.parametrize(
    "kw",
    [dict(grid=()), dict(grid=(1.0, 0.5)), dict(grid=(-1.0,)), dict(criterion="aic"), dict(c_nt=0.0), dict(bic_form="x")],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TuningConfig(**kw)


@pytest.mark.parametrize("select", [bic_select, gcv_select])
def test_singleton_grid(select):
    r = select(balanced(), 0.5, TuningConfig(grid=(0.7,)))
    assert r.chosen_lambda == 0.7
    assert [rec.lam for rec in r.per_lambda] == [0.7]


def test_grid_above_bound_rejected():
    with pytest.raises(ValueError, match="upper bound"):
        gcv_select(balanced(T=4), 0.5, TuningConfig(grid=(0.0, 10.0)))


def test_bic_prefers_strong_penalty_without_effects():
    # no individual effects: shrinking them all away should not hurt the criterion
    rng = np.random.default_rng(5)
    N, T = 40, 10
    unit = np.repeat(np.arange(N), T)
    x = rng.chisquare(3, N * T)
    d = PanelData.from_arrays(unit, x + rng.normal(size=N * T), x)
    lam_u = lambda_upper_bound(0.5, T)
    r = bic_select(d, 0.5, TuningConfig(grid=(0.0, lam_u), criterion="bic"))
    crit = {rec.lam: rec.criterion for rec in r.per_lambda}
    assert crit[lam_u] <= crit[0.0]
    assert r.per_lambda[-1].active_count == 0


def test_bic_raw_form_value():
    d = balanced()
    r = bic_select(d, 0.5, TuningConfig(grid=(0.0, 1.0), criterion="bic", bic_form="raw", c_nt=2.0))
    n = d.n_obs
    for rec in r.per_lambda:
        assert rec.criterion == pytest.approx(rec.checkloss + rec.active_count * math.log(n) / (2 * n) * 2.0)


def test_gcv_value_and_guard():
    d = balanced(N=5, T=2)
    r = gcv_select(d, 0.5, TuningConfig(grid=(0.0, 0.5)))
    first = r.per_lambda[0]
    n = d.n_obs
    assert first.criterion == pytest.approx((first.checkloss / n) / (1 - (1 + first.active_count) / n) ** 2)
    # one observation per unit: df = N = n at lambda 0
    tiny = PanelData.from_arrays(np.arange(4), [1.0, -2.0, 3.0, 0.5])
    r = gcv_select(tiny, 0.5, TuningConfig(grid=(0.0, 0.5)))
    assert math.isinf(r.per_lambda[0].criterion)
    assert r.chosen_lambda == 0.5


def test_gcv_checkloss_monotone():
    d = make_panel(np.random.default_rng(9), N=30, T=6, p=2)
    r = gcv_select(d, 0.4, TuningConfig())
    loss = [rec.checkloss for rec in r.per_lambda]
    obj = [rec.objective for rec in r.per_lambda]
    assert all(b >= a - 1e-7 * abs(a) for a, b in zip(loss, loss[1:]))
    assert all(b >= a - 1e-7 * abs(a) for a, b in zip(obj, obj[1:]))
    assert r.chosen_lambda in [rec.lam for rec in r.per_lambda]
    assert r.per_lambda[-1].active_count == 0


def test_ties_go_to_larger_lambda():
    d = balanced()
    lam_u = lambda_upper_bound(0.5, d.max_T)
    r = gcv_select(d, 0.5, TuningConfig(grid=(lam_u, lam_u)))
    assert r.chosen_lambda == lam_u


def test_normalized_reporting():
    d = balanced(T=10)
    r = gcv_select(d, 0.5, TuningConfig(grid=(0.6,), normalize_by_T=True))
    assert r.chosen_lambda == 0.6
    assert r.reported_lambda == pytest.approx(0.06)


def test_default_c_nt():
    assert default_c_nt(1000) == pytest.approx(max(1.0, math.log(math.log(1000))))
    assert default_c_nt(5) == 1.0


def test_serialization(tmp_path):
    r = gcv_select(balanced(), 0.5, TuningConfig(n_points=5))
    d = json.loads(r.to_json())
    assert d["chosen_lambda"] == r.chosen_lambda
    assert len(d["trace"]) == 5
    r.write_trace(tmp_path / "trace.csv")
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert [float(x["lambda"]) for x in rows] == [rec.lam for rec in r.per_lambda]
    assert r.chosen_fit.lam == r.chosen_lambda
