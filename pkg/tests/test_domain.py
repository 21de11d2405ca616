import json
import shutil

import numpy as np
import pytest

from mmgdispatch.domain import (TABLE1, CostBreakdown, MicrogridParams, ScenarioError,
                                bundled_scenario_path, generate_synthetic, load_scenario,
                                write_scenario)


def test_bundled_scenario_carries_table1_parameters(bundled_scenario):
    sc = bundled_scenario
    assert sc.n_mg == 2 and sc.horizon_t == 24 and sc.dt == 1.0
    assert [p.lambda_mgts for p in sc.params] == [1.3, 1.5]
    for p in sc.params:
        assert p.lambda_b == 0.5
        assert p.psi_mgts == p.psi_pv == p.psi_wt == 0.02
        assert p.ell == 0.5
        assert p.lambda_loss == 1.35
        assert (p.p_ch_max, p.p_dc_max, p.s_esd_max) == (100.0, 100.0, 200.0)
        assert (p.eta_ch, p.eta_dc) == (0.9, 0.9)
        assert (p.p_mgts_min, p.p_mgts_max) == (5.0, 30.0)
        assert (p.p_ig_max, p.p_ij_max) == (500.0, 200.0)


def test_bundled_scenario_is_the_seed7_synthetic_day(bundled_scenario):
    assert bundled_scenario.equals(generate_synthetic(7, 2, 24))


def test_generate_is_deterministic():
    assert generate_synthetic(7, 2, 24).equals(generate_synthetic(7, 2, 24))
    assert not generate_synthetic(7, 2, 24).equals(generate_synthetic(8, 2, 24))


def test_generate_surplus_and_deficit_roles():
    sc = generate_synthetic(7, 2, 24)
    renew = sc.p_wt + sc.p_pv
    assert sc.load[0].sum() > renew[0].sum()
    assert sc.load[1].sum() < renew[1].sum()


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("n_mg,T", [(2, 24), (3, 12), (4, 48)])
def test_generate_roles_hold_for_many_seeds(seed, n_mg, T):
    sc = generate_synthetic(seed, n_mg, T)
    net = sc.load.sum(1) - sc.p_wt.sum(1) - sc.p_pv.sum(1)
    assert all(net[i] > 0 if i % 2 == 0 else net[i] < 0 for i in range(n_mg))
    assert np.all(sc.price_grid_sell <= sc.price_mg)
    assert np.all(sc.price_mg <= sc.price_grid_buy)


def test_generate_needs_two_microgrids():
    with pytest.raises(ScenarioError, match="n_mg"):
        generate_synthetic(7, 1, 24)


def test_round_trip_is_bit_identical(tmp_path):
    sc = generate_synthetic(3, 3, 10)
    write_scenario(sc, tmp_path / "a")
    loaded = load_scenario(tmp_path / "a")
    assert loaded.equals(sc)
    write_scenario(loaded, tmp_path / "b")
    for name in ("scenario.json", "mg1.csv", "mg2.csv", "mg3.csv", "prices.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert load_scenario(tmp_path / "b" / "scenario.json").equals(loaded)


@pytest.fixture
def bundle(tmp_path):
    dst = tmp_path / "bundle"
    shutil.copytree(bundled_scenario_path(), dst)
    return dst


def _rewrite_row(path, row, col, value):
    lines = path.read_text().splitlines()
    cells = lines[row].split(",")
    cells[col] = value
    lines[row] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")


def test_price_ordering_violation_names_the_step(bundle):
    # t=3 lives on line 4 (header first); price_mg is column 1
    _rewrite_row(bundle / "prices.csv", 4, 1, "99.0")
    with pytest.raises(ScenarioError, match="t=3") as err:
        load_scenario(bundle)
    assert err.value.field == "price_mg"
    assert err.value.file.endswith("prices.csv")


def test_short_series_is_rejected(bundle):
    path = bundle / "mg1.csv"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ScenarioError, match="expected 24 data rows, found 23") as err:
        load_scenario(bundle)
    assert err.value.file.endswith("mg1.csv")


def test_negative_power_is_rejected_with_location(bundle):
    _rewrite_row(bundle / "mg2.csv", 5, 2, "-1.0")
    with pytest.raises(ScenarioError) as err:
        load_scenario(bundle)
    assert (err.value.row, err.value.field) == (5, "wt_kw")


def test_missing_file(tmp_path, bundle):
    with pytest.raises(ScenarioError, match="not found"):
        load_scenario(tmp_path / "nowhere")
    (bundle / "prices.csv").unlink()
    with pytest.raises(ScenarioError, match="not found"):
        load_scenario(bundle)


def test_bad_parameter_block(bundle):
    manifest = json.loads((bundle / "scenario.json").read_text())
    manifest["microgrids"][0]["params"]["eta_ch"] = 1.5
    (bundle / "scenario.json").write_text(json.dumps(manifest))
    with pytest.raises(ScenarioError, match="eta_ch"):
        load_scenario(bundle)


@pytest.mark.parametrize("kw", [dict(p_mgts_min=40.0), dict(eta_dc=0.0), dict(s_esd_min=300.0),
                                dict(p_ch_max=0.0), dict(ell=-1.0), dict(psi_wt=1.0)])
def test_params_invariants(kw):
    with pytest.raises(ScenarioError):
        MicrogridParams(**kw)


def test_cost_breakdown_total():
    c = CostBreakdown(1.5, -2.25, 3.0, 0.5, 0.125, 8.0)
    assert c.total == pytest.approx(10.875, rel=1e-12)
    assert TABLE1[0].lambda_mgts == 1.3
