import numpy as np
import pytest

from iderr.checks import DESK_WIDTHS, check_determinism, check_identity, check_kernel_parity
from iderr.datasets import build_indirect
from iderr.experiment import (
    CHOICES,
    ExperimentConfig,
    RunMetrics,
    IterationRecord,
    aggregate,
    make_grid,
    full_grid,
    read_metrics_csv,
    run_episode,
    run_learning,
    run_sweep,
    write_aggregate_csv,
    write_metrics_csv,
    write_trace_csv,
)

DESK = ExperimentConfig(hidden_layer_sizes=DESK_WIDTHS)


def test_defaults_and_enums():
    cfg = ExperimentConfig()
    assert cfg.noise_max == 1e-4 and cfg.replace(noise_level="very_high").noise_max == 0.008
    assert cfg.gains.g_low == pytest.approx(0.1) and cfg.gains.g_high == 1.0
    assert cfg.replace(gain_setting="high").gains.g_low == 1.0
    assert cfg.filter_beta == 0.1 and cfg.output_clamp == 20.0
    assert cfg.hidden_layer_sizes == (200, 100, 50, 20)
    with pytest.raises(ValueError, match="very_high"):
        ExperimentConfig(noise_level="extreme")


@pytest.mark.parametrize("bad", [
    dict(mass=(5.0, 5.0, 5.0)), dict(n_iterations=0), dict(dt=0.0), dict(adaptive_leak=1.0),
    dict(filter_beta=0.0), dict(pid_kp=-1.0), dict(mass_hat=(0.0, 0.5)), dict(gain_ratio=0.5),
])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        ExperimentConfig(**bad)


def test_lists_become_tuples():
    cfg = ExperimentConfig(mass=[1.0, 2.0], hidden_layer_sizes=[4, 2])
    assert cfg.mass == (1.0, 2.0) and hash(cfg)


def test_first_episode_has_no_model_term():
    cfg = DESK.replace(horizon=500)
    trace, _ = run_episode(cfg, cfg.build_model(), cfg.rng(0, 1))
    rbd = cfg.build_rbd()
    for s in trace:
        assert not s.f_prev_at_xd.any()
        np.testing.assert_allclose(s.tau_total, rbd.mass_hat * s.x_d.qdd + s.tau_fb_applied, atol=1e-12)


def test_identity_run():
    res = check_identity()
    assert res["passed"], res


def test_trace_lengths():
    cfg = DESK.replace(horizon=800, noise_level="medium")
    trace, rec = run_episode(cfg, cfg.build_model(), cfg.rng(0, 1))
    assert len(trace) == rec.steps
    assert len(build_indirect(trace)) == rec.steps - 1


def test_convergence_stops_episode():
    cfg = DESK.replace(mass=(0.5, 0.5), noise_level="none", friction_level="none", stiction_level="none")
    trace, rec = run_episode(cfg, cfg.build_model(), cfg.rng(0, 1))
    assert rec.converged and rec.steps < cfg.horizon and not rec.aborted


def test_kernel_matches_reference_loop():
    res = check_kernel_parity()
    assert res["passed"], res


def test_determinism_and_pairing():
    res = check_determinism()
    assert res["passed"], res


def test_joint_improves_with_pid():
    # desk-width network; medium friction, low noise, low-gain PID
    cfg = DESK.replace(data_source="joint", controller="pid", gain_setting="low")
    pos = run_learning(cfg).metrics.series("pos_err_mean")
    assert pos[-1] < pos[0]


@pytest.mark.xfail(strict=True, reason=(
    "indirect-only learning is erratic rather than flat here: iteration 2 jumps to about 1.4 m error and the "
    "run drifts back down to 0.11 m by iteration 20 at low noise, below the first-iteration 0.20 m"))
def test_indirect_with_pid_does_not_improve():
    cfg = DESK.replace(data_source="indirect", controller="pid", gain_setting="low", stiction_level="high")
    pos = run_learning(cfg).metrics.series("pos_err_mean")
    assert pos[-1] > 0.9 * pos[0]


def test_warm_start_and_dataset_bookkeeping():
    cfg = DESK.replace(n_iterations=3, horizon=300, epochs=1)
    seen = []
    res = run_learning(cfg, keep_datasets=True, train_last=True, on_episode=lambda k, tr, rec, d: seen.append((k, len(tr), len(d))))
    assert [s[0] for s in seen] == [1, 2, 3]
    assert all(n_data == 2 * n_tr - 1 for _, n_tr, n_data in seen)
    assert res.model.iteration == 3 and [d.iteration for d in res.datasets] == [1, 2, 3]
    acc = run_learning(cfg.replace(accumulate_data=True)).metrics
    assert len(acc.records) == 3


def test_grid_accounting():
    # 16 conditions x 10 seeds x 2 epochs x 2 gains x 2 controllers = 1280,
    # each expanded into the three paired data-source variants
    grid = full_grid()
    assert len(grid) == 1280 * 3
    conditions = {(c.noise_level, c.friction_level, c.stiction_level) for c in grid}
    assert len(conditions) == 16
    small = make_grid(seeds=range(3), noise_level=["low", "very_high"], gain_setting=list(CHOICES["gain_setting"]),
                      data_source=list(CHOICES["data_source"]))
    assert len(small) == 36 and len(set(small)) == 36


def test_seed_streams_ignore_variant_axes():
    a = ExperimentConfig(data_source="direct", controller="adaptive", gain_setting="high")
    b = ExperimentConfig()
    assert a.rng(0, 3).random() == b.rng(0, 3).random()
    assert a.rng(0, 3).random() != a.replace(seed=1).rng(0, 3).random()
    assert a.rng(0, 3).random() != a.rng(1, 3).random()


def fake_run(values, **cfg):
    recs = [IterationRecord(i + 1, v, 2 * v, 0.0, False, 10) for i, v in enumerate(values)]
    return RunMetrics(ExperimentConfig(**cfg), recs)


def test_aggregate_examples():
    runs = [fake_run([v, v]) for v in (1.0, 2.0, 3.0)]
    (agg,) = aggregate(runs).values()
    np.testing.assert_allclose(agg.mean["pos_err_mean"], [2.0, 2.0])
    (single,) = aggregate(runs[:1]).values()
    np.testing.assert_array_equal(single.std["pos_err_mean"], [0.0, 0.0])


def test_aggregate_matches_two_pass_oracle():
    rng = np.random.default_rng(0)
    runs = [fake_run(rng.random(5), data_source=src, seed=s) for src in ("indirect", "joint") for s in range(4)]
    runs.append(RunMetrics(ExperimentConfig(data_source="joint", seed=9), [], error="boom"))
    aggs = aggregate(runs, group_by=("data_source",))
    for (src,), agg in aggs.items():
        vals = [r.series("pos_err_mean") for r in runs if r.config.data_source == src and not r.aborted]
        for i in range(5):
            col = [v[i] for v in vals]
            mean = sum(col) / len(col)
            var = sum((x - mean) ** 2 for x in col) / len(col)
            assert agg.mean["pos_err_mean"][i] == pytest.approx(mean, rel=1e-12)
            assert agg.std["pos_err_mean"][i] == pytest.approx(var**0.5, rel=1e-9, abs=1e-15)
    assert aggs[("joint",)].n_excluded == 1 and aggs[("joint",)].n_runs == 4
    with pytest.raises(ValueError):
        aggregate([])


def test_sweep_records_failures():
    bad = DESK.replace(n_iterations=1, horizon=50, epochs=1, abort_threshold=1e-9)
    runs = run_sweep([bad])
    assert runs[0].aborted
    with pytest.raises(ValueError):
        run_sweep([])


def test_sweep_parallel_matches_serial():
    grid = make_grid(DESK.replace(n_iterations=2, horizon=200, epochs=1), seeds=range(2), data_source=["indirect", "joint"])
    assert run_sweep(grid, n_jobs=2) == run_sweep(grid)


def test_csv_writers(tmp_path):
    cfg = DESK.replace(n_iterations=2, horizon=200, epochs=1)
    res = run_learning(cfg)
    back = read_metrics_csv(write_metrics_csv(res.metrics, tmp_path / "m.csv"), cfg)
    assert back == res.metrics
    trace, _ = run_episode(cfg, cfg.build_model(), cfg.rng(0, 1))
    rows = (write_trace_csv(trace, tmp_path / "t.csv")).read_text().splitlines()
    assert len(rows) == len(trace) + 1 and rows[0].startswith("t,q0,q1")
    text = write_aggregate_csv(aggregate([res.metrics]), tmp_path / "a.csv").read_text().splitlines()
    assert text[0].startswith("group,iteration,n_runs,n_excluded,pos_err_mean_mean")
    assert len(text) == 3
