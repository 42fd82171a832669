import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from iderr.checks import check_stiction, identity_cfg
from iderr.datasets import (
    Dataset,
    StepTrace,
    TrainingSample,
    build_dataset,
    build_direct,
    build_indirect,
    build_joint,
    read_dataset_csv,
    write_dataset_csv,
)
from iderr.dynamics import InputPoint
from iderr.experiment import ExperimentConfig, run_episode


def step(t, tau=(1.0, 0.0), rbd_a=(0.3, 0.0), fb=(0.4, -0.2), f_prev=(0.0, 0.0), done=True):
    x_d = InputPoint(np.full(2, 0.1 * t), np.zeros(2), np.array([1.0, 2.0]), "desired")
    x_a = InputPoint(np.full(2, 0.1 * t), np.zeros(2), np.array([0.5, 0.5]), "actual") if done else None
    return StepTrace(t, x_d, np.array(tau), np.array(fb), np.array(f_prev), x_a,
                     np.array(rbd_a) if done else None, np.zeros(2))


def random_trace(n, seed):
    rng = np.random.default_rng(seed)
    return [step(t, rng.normal(size=2), rng.normal(size=2), rng.normal(size=2), rng.normal(size=2), done=t < n - 1) for t in range(n)]


def test_indirect_target_subtraction():
    data = build_indirect([step(0)])
    np.testing.assert_allclose(data.Y, [[0.7, 0.0]])
    np.testing.assert_allclose(data.X[0, 4:], [0.5, 0.5])


def test_direct_target_sum():
    np.testing.assert_allclose(build_direct([step(0)]).Y, [[0.4, -0.2]])
    data = build_direct([step(0, fb=(0.3, -0.1), f_prev=(0.2, 0.0))])
    np.testing.assert_allclose(data.Y, [[0.5, -0.1]])
    np.testing.assert_allclose(data.X[0, 4:], [1.0, 2.0])


def test_unfinalized_steps_skipped():
    trace = [step(0), step(1), step(2, done=False)]
    assert len(build_indirect(trace)) == 2
    assert len(build_direct(trace)) == 3
    assert len(build_indirect([step(0, done=False)])) == 0


@given(st.integers(1, 30), st.integers(0, 1000))
def test_joint_is_union(n, seed):
    trace = random_trace(n, seed)
    ind, dirc = build_indirect(trace, 3), build_direct(trace, 3)
    joint = build_joint(ind, dirc)
    assert len(joint) == len(ind) + len(dirc) == 2 * n - 1
    # every joint sample appears in exactly one parent with the same payload
    parents = {"indirect": ind, "direct": dirc}
    for src, parent in parents.items():
        sub = joint.subset(src)
        np.testing.assert_array_equal(sub.X, parent.X)
        np.testing.assert_array_equal(sub.Y, parent.Y)
        np.testing.assert_array_equal(sub.t, parent.t)


def test_joint_with_empty_indirect_equals_direct():
    trace = [step(0, done=False)]
    joint = build_dataset(trace, "joint")
    dirc = build_direct(trace)
    np.testing.assert_array_equal(joint.X, dirc.X)
    np.testing.assert_array_equal(joint.Y, dirc.Y)


def test_joint_iteration_mismatch():
    trace = random_trace(4, 0)
    with pytest.raises(ValueError):
        build_joint(build_indirect(trace, 1), build_direct(trace, 2))
    with pytest.raises(ValueError):
        build_dataset(trace, "both")


def test_sample_kind_checked():
    x = InputPoint(np.zeros(2), np.zeros(2), np.zeros(2), "desired")
    TrainingSample(x, np.zeros(2), "direct")
    with pytest.raises(ValueError):
        TrainingSample(x, np.zeros(2), "indirect")


def test_samples_view_and_accumulate():
    trace = random_trace(5, 1)
    joint = build_dataset(trace, "joint", 1)
    kinds = {s.source: s.x.accel_kind for s in joint.samples}
    assert kinds == {"indirect": "actual", "direct": "desired"}
    more = joint.accumulate(build_dataset(trace, "joint", 2))
    assert len(more) == 2 * len(joint) and more.iteration == 2


def test_perfect_model_gives_zero_indirect_targets():
    cfg = identity_cfg().replace(horizon=300)
    trace, rec = run_episode(cfg, cfg.build_model(), cfg.rng(0, 1))
    data = build_indirect(trace)
    assert np.abs(data.Y).max() < 1e-8
    assert len(trace) == rec.steps and len(data) == rec.steps - 1


def test_stiction_pathology():
    res = check_stiction()
    assert res["passed"], res


def test_csv_roundtrip(tmp_path):
    joint = build_dataset(random_trace(6, 2), "joint", 4)
    back = read_dataset_csv(write_dataset_csv(joint, tmp_path / "d.csv"), iteration=4)
    np.testing.assert_array_equal(back.X, joint.X)
    np.testing.assert_array_equal(back.Y, joint.Y)
    np.testing.assert_array_equal(back.source, joint.source)
    assert back.label == "joint"
    single = read_dataset_csv(write_dataset_csv(build_direct(random_trace(3, 0)), tmp_path / "e.csv"))
    assert single.label == "direct"


def test_dataset_length_check():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 6)), np.zeros((3, 2)), np.array(["direct"] * 2), np.arange(2))
