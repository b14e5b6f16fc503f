import json

import numpy as np
import pytest

from dfm import (
    Alphabet,
    JointPmf,
    Metric,
    Pmf,
    absolute_metric,
    empirical_joint,
    index_state,
    make_pmf,
    state_index,
    tv_distance,
)
from dfm.datasets import sample_target
from dfm.errors import (
    AllZeroError,
    NegativeWeightError,
    OutOfAlphabetError,
    SizeGuardError,
    SizeMismatchError,
)


class TestMakePmf:
    def test_uniform_normalization(self):
        assert np.allclose(make_pmf([1, 1, 1, 1]).weights, 0.25)

    def test_delta_preserved(self):
        assert make_pmf([0, 0, 1]).weights.tolist() == [0.0, 0.0, 1.0]

    def test_hand_normalization(self):
        assert make_pmf([2, 6]).weights.tolist() == [0.25, 0.75]

    def test_negative_weight(self):
        with pytest.raises(NegativeWeightError):
            make_pmf([0.5, -0.1])

    def test_all_zero(self):
        with pytest.raises(AllZeroError):
            make_pmf([0.0, 0.0])

    def test_immutable(self):
        p = make_pmf([1, 2])
        with pytest.raises((ValueError, AttributeError)):
            p.weights[0] = 0.3

    def test_sum_within_tolerance(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = make_pmf(rng.random(rng.integers(2, 40)))
            assert abs(p.weights.sum() - 1.0) <= 1e-12
            assert p.weights.min() >= 0


class TestTvDistance:
    def test_identity(self):
        p = make_pmf([0.3, 0.7])
        assert tv_distance(p, p) == 0.0

    def test_disjoint_deltas(self):
        assert tv_distance(Pmf.delta(0, 2), Pmf.delta(1, 2)) == 1.0

    def test_hand_value(self):
        assert tv_distance(make_pmf([0.5, 0.5]), make_pmf([0.25, 0.75])) == 0.25

    def test_size_mismatch(self):
        with pytest.raises(SizeMismatchError):
            tv_distance(Pmf.uniform(2), Pmf.uniform(3))

    def test_symmetry_and_triangle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b, c = (make_pmf(rng.random(5) + 1e-3) for _ in range(3))
            assert tv_distance(a, b) == tv_distance(b, a)
            assert tv_distance(a, c) <= tv_distance(a, b) + tv_distance(b, c) + 1e-15
            assert 0.0 <= tv_distance(a, b) <= 1.0


class TestStateIndexing:
    def test_coordinate_zero_fastest(self):
        # flat order: (0,0), (1,0), (2,0), (0,1), ...
        assert state_index((1, 0), 3) == 1
        assert state_index((0, 1), 3) == 3
        assert state_index((2, 1), 3) == 5

    def test_round_trip(self):
        for idx in range(27):
            assert state_index(index_state(idx, 3, 3), 3) == idx


class TestJointPmf:
    def test_size_guard(self):
        with pytest.raises(SizeGuardError):
            JointPmf(11, 6, np.full(11**6, 1.0 / 11**6))

    def test_nd_layout_matches_flat(self):
        table = np.arange(1, 10, dtype=float)
        q = JointPmf(3, 2, table / table.sum())
        nd = q.nd()
        for idx in range(9):
            st = index_state(idx, 3, 2)
            assert nd[st] == q.table[idx]

    def test_json_round_trip(self):
        q = JointPmf(2, 2, [0.1, 0.2, 0.3, 0.4])
        q2 = JointPmf.from_json(json.loads(json.dumps(q.to_json())))
        assert np.array_equal(q.table, q2.table)

    def test_coordinate_marginal(self):
        q = JointPmf(2, 2, [0.1, 0.2, 0.3, 0.4])
        # coordinate 0: P(x0=0) = q[(0,0)] + q[(0,1)] = 0.1 + 0.3
        assert np.allclose(q.coordinate_marginal(0).weights, [0.4, 0.6])


class TestEmpiricalJoint:
    def test_single_cell(self):
        q = empirical_joint([(0, 0), (0, 0)], 2, Alphabet(2))
        assert q.prob((0, 0)) == 1.0

    def test_two_cells(self):
        q = empirical_joint([(0, 1), (1, 0)], 2, Alphabet(2))
        assert q.prob((0, 1)) == 0.5
        assert q.prob((1, 0)) == 0.5

    def test_out_of_alphabet(self):
        with pytest.raises(OutOfAlphabetError):
            empirical_joint([(0, 5)], 2, Alphabet(2))

    def test_monte_carlo_concentration(self):
        rng = np.random.default_rng(3)
        table = rng.random(4)
        q = JointPmf(2, 2, table / table.sum())
        draws = sample_target(q, 10**5, seed=9)
        emp = empirical_joint(draws, 2, Alphabet(2))
        assert tv_distance(emp, q) <= 3.0 * np.sqrt(4 / 10**5)


class TestAlphabetAndMetric:
    def test_alphabet_validation(self):
        with pytest.raises(SizeGuardError):
            Alphabet(1)
        with pytest.raises(OutOfAlphabetError):
            Alphabet(3, mask_token=3)
        assert Alphabet(4, 3).data_tokens.tolist() == [0, 1, 2]

    def test_metric_matrix(self):
        m = absolute_metric().matrix(4)
        assert m[2, 2] == 0
        assert m[0, 3] == 3

    def test_metric_rejects_zero_off_diagonal(self):
        bad = Metric(lambda x, y: 0.0)
        with pytest.raises(SizeMismatchError):
            bad.matrix(3)
