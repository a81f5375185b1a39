import numpy as np
import pytest

from tools.experiments import (
    TABLE_COLUMNS,
    ExperimentRecord,
    TrialSpec,
    campaign_table,
    random_configuration,
    run_campaign,
    run_trial,
    sweep_curvature,
    trial_seed,
)
from tools.phase_space import Configuration, Particle, in_domain
from utils.errors import ConfigError, DomainError


def test_trial_spec_defaults():
    spec = TrialSpec()
    assert (spec.f_c, spec.K, spec.tau) == (20, 2, 0.5)
    assert spec.delta_x == pytest.approx(1 / 20000)
    assert spec.delta_v == pytest.approx(1 / 20000)


def test_trial_spec_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        TrialSpec.from_dict({"f_c": 20, "n_particles": 4})
    with pytest.raises(ConfigError):
        TrialSpec(n_min=5, n_max=4)


def test_random_configuration_defaults():
    spec = TrialSpec()
    rng = np.random.default_rng(0)
    for _ in range(50):
        cfg = random_configuration(spec, rng)
        assert 4 <= len(cfg) <= 10
        assert np.all((cfg.weights >= 0.9) & (cfg.weights <= 1.1))
        assert all(in_domain(p.x, p.v, spec.grid) for p in cfg.particles)


def test_random_weights_average_to_one():
    spec = TrialSpec(n_min=10, n_max=10)
    rng = np.random.default_rng(1)
    weights = np.concatenate([random_configuration(spec, rng).weights for _ in range(1000)])
    assert weights.mean() == pytest.approx(1.0, rel=0.01)


def test_trial_seed_is_xor():
    assert trial_seed(5, 3) == 6
    assert trial_seed(0, 9) == 9


def test_well_separated_trial_succeeds_everywhere():
    spec = TrialSpec()
    cfg = Configuration(tuple(Particle((x,), (0.0,), w) for x, w in ((0.2, 1.0), (0.5, 0.95), (0.8, 1.05))),
                        spec.grid)
    record = run_trial(spec, np.random.default_rng(0), inject=cfg)
    assert record.error is None
    assert record.dynamic
    assert record.static_any
    assert record.static_3
    assert record.static_successes == 5


def test_trials_are_deterministic_per_seed():
    spec = TrialSpec(n_min=2, n_max=3)
    first = run_trial(spec, np.random.default_rng(trial_seed(4, 1)), 1)
    second = run_trial(spec.replace(beta=0.0), np.random.default_rng(trial_seed(4, 1)), 1)
    assert first.to_dict()["configuration"] == second.to_dict()["configuration"]
    assert (first.dynamic, first.static_any, first.static_3) == (second.dynamic, second.static_any, second.static_3)


def _record(trial_id, delta_dyn, dynamic, static_any, static_3, spec):
    cfg = Configuration((Particle((0.5,), (0.0,)),), spec.grid)
    return ExperimentRecord(trial_id, cfg, delta_dyn, dynamic, static_any, static_3)


def test_campaign_table_binning():
    spec = TrialSpec()
    records = [
        _record(0, 0.01, True, False, False, spec),    # bin 0
        _record(1, 0.012, False, False, False, spec),  # bin 0
        _record(2, 0.1, True, True, True, spec),       # delta * f_c = 2.0 -> bin 8
        _record(3, 1.0, True, True, False, spec),      # beyond the last edge -> last bin
    ]
    table = campaign_table(records, spec.f_c, (20, 0.0, 5.0))
    assert list(table.columns) == TABLE_COLUMNS
    assert len(table) == 20
    assert table["n"].sum() == 4
    assert table.loc[0, "n"] == 2
    assert table.loc[0, "rate_dynamic"] == pytest.approx(0.5)
    assert table.loc[8, "rate_static3"] == pytest.approx(1.0)
    assert table.loc[19, "n"] == 1
    assert np.isnan(table.loc[5, "rate_dynamic"])


def test_campaign_needs_trials():
    with pytest.raises(DomainError):
        run_campaign(TrialSpec(), 0)


def test_small_campaign_is_ordered_and_consistent():
    spec = TrialSpec(n_min=2, n_max=3, seed=3)
    records, table = run_campaign(spec, 3)
    assert [r.trial_id for r in records] == [0, 1, 2]
    assert table["n"].sum() == 3
    for r in records:
        assert r.static_any or not r.static_3


def test_campaign_output_independent_of_threads():
    spec = TrialSpec(n_min=2, n_max=2, seed=8)
    serial, serial_table = run_campaign(spec, 2, threads=1)
    parallel, parallel_table = run_campaign(spec, 2, threads=2)
    assert [r.to_dict()["configuration"] for r in serial] == [r.to_dict()["configuration"] for r in parallel]
    assert serial_table.equals(parallel_table)


def test_curvature_sweep_returns_one_table_per_beta():
    spec = TrialSpec(n_min=2, n_max=2, f_c=10)
    tables = sweep_curvature(spec, [0.0, 0.03], 1)
    assert sorted(tables) == [0.0, 0.03]
    assert all(list(t.columns) == TABLE_COLUMNS for t in tables.values())


def test_always_overlapping_pair_defeats_static_reconstruction():
    spec = TrialSpec()
    offset = 0.4 * spec.delta_x
    cfg = Configuration((Particle((0.5,), (0.1,), 1.0), Particle((0.5 + offset,), (0.1,), 1.0)), spec.grid)
    assert np.all(cfg.frame_separations() < spec.delta_x)
    record = run_trial(spec, np.random.default_rng(0), inject=cfg)
    assert record.error is None
    assert not record.static_any
    assert not record.static_3


def _separated_configurations(spec, rng, count):
    found = []
    while len(found) < count:
        cfg = random_configuration(spec, rng)
        if np.sum(cfg.frame_separations() >= 2 / spec.f_c) >= 3:
            found.append(cfg)
    return found


def _pooled_rate(rows, column):
    return float(np.nansum(rows[column] * rows["n"]) / rows["n"].sum())


@pytest.mark.slow
def test_noiseless_recovery_rate():
    spec = TrialSpec(seed=2024)
    rng = np.random.default_rng(spec.seed)
    configurations = _separated_configurations(spec, rng, 200)
    records = [run_trial(spec, rng, i, inject=cfg) for i, cfg in enumerate(configurations)]
    assert len(records) == 200
    assert np.mean([r.dynamic for r in records]) >= 0.95


@pytest.mark.slow
def test_dynamic_rate_dominates_static_at_small_separation():
    _, table = run_campaign(TrialSpec(seed=11), 1000, threads=4)
    close = table[table["bin_hi"] <= 0.5]
    assert close["n"].sum() > 0
    assert _pooled_rate(close, "rate_dynamic") - _pooled_rate(close, "rate_static3") >= 0.2
    wide = table[(table["bin_lo"] >= 2.0) & (table["bin_hi"] <= 5.0)]
    assert wide["n"].sum() > 0
    assert _pooled_rate(wide, "rate_dynamic") >= 0.85


@pytest.mark.slow
def test_noise_levels_dynamic_and_static_alike():
    spec = TrialSpec(alpha=0.075, srf_x=40, srf_v=40, delta_w=0.05, seed=17)
    _, table = run_campaign(spec, 500, threads=4)
    populated = table[table["n"] >= 30]
    assert len(populated) > 0
    assert np.all(np.abs(populated["rate_dynamic"] - populated["rate_static"]) <= 0.2)


@pytest.mark.slow
def test_curvature_degrades_recovery():
    spec = TrialSpec(srf_x=1.0, srf_v=1.0, delta_w=0.2, seed=7)
    straight, _ = run_campaign(spec, 200, threads=4)
    curved, _ = run_campaign(spec.replace(beta=0.03), 200, threads=4)
    rate = lambda rs: np.mean([r.dynamic for r in rs])
    assert rate(straight) - rate(curved) >= 0.1
