import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clnscl import bounds
from clnscl.coupled import (
    TRACE_COLUMNS,
    ScheduleSpec,
    SimState,
    init_sim_state,
    per_step_gap,
    run_coupled,
    surrogate_step,
)
from clnscl.datagen import AugmentationKernel, Dataset, draw_batch, make_dataset
from clnscl.simcore import SparseGrad, layout_from_indices


def sparse(rows, cols, vals):
    return SparseGrad(np.array(rows), np.array(cols), np.array(vals, dtype=float))


def test_init_from_orthogonal_means_without_noise():
    means = np.eye(3)
    ds = Dataset(means, np.arange(3), C=3, n=1, means=means)
    S = init_sim_state(ds, AugmentationKernel(0.0, 0)).entries
    want = np.kron(means @ means.T, np.ones((2, 2)))
    assert np.array_equal(S, want)


def test_init_diag_and_determinism():
    ds = make_dataset(3, 4, 5, 2.0, 1)
    a = init_sim_state(ds, AugmentationKernel(0.2, 1))
    b = init_sim_state(ds, AugmentationKernel(0.2, 1))
    assert np.all(np.diag(a.entries) == 1.0)
    assert np.array_equal(a.entries, b.entries)
    a.validate()


def test_state_validation():
    with pytest.raises(ValueError):
        SimState(np.array([[1.0, 0.2], [0.1, 1.0]])).validate()
    with pytest.raises(ValueError):
        SimState(np.array([[1.0, 2.0], [2.0, 1.0]])).validate()


def test_zero_gradient_leaves_state():
    S = SimState(np.eye(4))
    new, clipped = surrogate_step(S, sparse([], [], []), 0.5)
    assert np.array_equal(new.entries, S.entries) and clipped == 0


def test_single_coordinate_moves_entry_and_mirror():
    S = SimState(np.eye(4) * 0.5 + 0.5)
    new, _ = surrogate_step(S, sparse([0], [2], [0.5]), 0.1)
    assert math.isclose(new.entries[0, 2], 0.5 - 0.05)
    assert math.isclose(new.entries[2, 0], 0.5 - 0.05)
    assert np.count_nonzero(new.entries != S.entries) == 2


def test_both_directions_are_averaged():
    new, _ = surrogate_step(SimState(np.eye(3)), sparse([0, 1], [1, 0], [0.2, 0.6]), 1.0)
    assert math.isclose(new.entries[0, 1], -0.4)


def test_large_step_clips_and_counts():
    S = SimState(np.eye(3))
    new, clipped = surrogate_step(S, sparse([0, 1], [1, 2], [-1.0, 1.0]), 5.0)
    assert new.entries[0, 1] == 1.0 and new.entries[1, 2] == -1.0
    assert clipped == 2
    new.validate()


def test_inplace_step_updates_input():
    S = SimState(np.eye(3))
    out, _ = surrogate_step(S, sparse([0], [1], [0.5]), 0.1, inplace=True)
    assert out is S and S.entries[0, 1] == -0.05


@given(seed=st.integers(0, 2**31), eta=st.floats(0.01, 20))
def test_step_keeps_state_valid(seed, eta):
    rng = np.random.default_rng(seed)
    A = rng.uniform(-1, 1, (6, 6))
    S = SimState(np.clip((A + A.T) / 2, -1, 1))
    np.fill_diagonal(S.entries, 1.0)
    k = rng.integers(1, 20)
    g = sparse(rng.integers(0, 6, k), rng.integers(0, 6, k), rng.normal(size=k))
    surrogate_step(S, g, eta)[0].validate()


def test_schedules():
    assert ScheduleSpec("constant", 0.1, 3).etas().tolist() == [0.1] * 3
    assert np.allclose(ScheduleSpec("inverse-t", 1.0, 3).etas(), [1, 0.5, 1 / 3])
    cos = ScheduleSpec("cosine", 1.0, 10, warmup=2).etas()
    assert cos[0] == 0.5 and cos[2] == 1.0 and cos[-1] < cos[3]
    assert ScheduleSpec("constant", 0.1, 0).sum_eta == 0.0
    with pytest.raises(ValueError):
        ScheduleSpec("custom", 0.0, 2, values=(0.1,))
    with pytest.raises(ValueError):
        ScheduleSpec("constant", -0.1, 2)


def test_zero_steps_no_drift():
    ds = make_dataset(2, 3, 4, 2.0, 0)
    tr = run_coupled(ds, AugmentationKernel(0.1, 0), 4, ScheduleSpec("constant", 0.1, 0), 0.5, 0)
    assert tr.D_T == 0.0 and tr.records == []


def test_small_run_below_bound():
    # T*B/delta = 1 takes the degenerate epsilon branch; the composition event then
    # needs every anchor to see exactly half negatives, and the bound itself still applies.
    ds = make_dataset(2, 5, 4, 2.0, 3)
    sched = ScheduleSpec("constant", 0.05, 50)
    tr = run_coupled(ds, AugmentationKernel(0.1, 3), 4, sched, 0.5, 3)
    Delta = bounds.delta_C(2, 4, 50, 200.0, 0.5)
    assert 0 < tr.D_T <= bounds.sim_coupling_bound(sched.sum_eta, 4, 0.5, Delta)


def test_more_classes_less_drift():
    def median(C):
        out = []
        for s in range(20):
            ds = make_dataset(C, 128 // C, 8, 2.0, s)
            sched = ScheduleSpec("constant", 1.0, 30)
            out.append(run_coupled(ds, AugmentationKernel(0.1, s), 32, sched, 0.5, s).D_T)
        return np.median(out)

    assert median(64) < median(4)


def test_trace_csv_and_determinism():
    ds = make_dataset(3, 4, 4, 2.0, 0)
    sched = ScheduleSpec("constant", 0.2, 5)
    a = run_coupled(ds, AugmentationKernel(0.1, 0), 6, sched, 0.5, 0)
    b = run_coupled(ds, AugmentationKernel(0.1, 0), 6, sched, 0.5, 0)
    assert a.to_csv() == b.to_csv()
    lines = a.to_csv().splitlines()
    assert lines[0] == ",".join(TRACE_COLUMNS)
    assert len(lines) == 1 + 5 + 1
    assert a.drifts[0] == 0.0 and a.drifts[-1] == a.D_T


def test_gap_vanishes_when_positive_mass_vanishes():
    # The anchor's own positive is always in the denominator, so p = q only in the limit.
    idx, labels = np.array([0, 1]), np.array([0, 1])
    layout = layout_from_indices(idx, labels)
    S = np.full((4, 4), 1.0)
    S[0, 1] = S[1, 0] = S[2, 3] = S[3, 2] = -1.0
    assert per_step_gap(S, S, layout, 0.01) < 1e-80


def test_gap_identical_states_below_reweighting_term():
    C, B, T, delta, tau = 10, 64, 1, 0.1, 0.5
    eps = bounds.epsilon_B_delta(B, T, delta).value
    Delta = bounds.delta_from_epsilon(C, eps, tau)
    checked = 0
    for s in range(20):
        ds = make_dataset(C, 20, 8, 2.0, s)
        S = init_sim_state(ds, AugmentationKernel(0.1, s)).entries
        batch = draw_batch(ds, B, 0, s)
        if (batch.labels[:, None] != batch.labels[None, :]).mean(axis=1).min() < 1 - 1 / C - eps:
            continue
        checked += 1
        gap = per_step_gap(S, S, layout_from_indices(batch.base_indices, batch.labels), tau)
        assert gap <= Delta / (tau * math.sqrt(B))
    assert checked > 0
