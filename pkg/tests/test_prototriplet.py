import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from icnnmetric.checks import k1_instance, loss_grad_error
from icnnmetric.prototriplet import TripletConfig, proto_triplet, proto_triplet_k, task_proto_triplet

coords = st.floats(-20, 20, allow_nan=False)


class TestSingleNegative:
    def test_margin_satisfied(self):
        protos = np.array([[0.0, 0.0], [3.0, 0.0]])
        assert proto_triplet(np.array([[0.0, 0.0]]), protos, 0, margin=1.0).item() == 0.0

    def test_hand_value(self):
        # d_pos = 1, d_neg = |(0,0)-(1,1)|^2 = 2, hinge = 1 - 2 + 2
        protos = np.array([[1.0, 0.0], [1.0, 1.0]])
        assert proto_triplet(np.array([[0.0, 0.0]]), protos, 0, margin=2.0).item() == 1.0

    def test_boundary_zero_margin(self):
        protos = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert proto_triplet(np.array([[0.0, 0.0]]), protos, 0, margin=0.0).item() == 0.0

    def test_nearest_negative_is_used(self):
        protos = np.array([[0.0, 0.0], [10.0, 0.0], [1.0, 0.0]])
        # nearest negative at distance 1 from the query at origin
        assert proto_triplet(np.array([[0.0, 0.0]]), protos, 0, margin=3.0).item() == 2.0

    def test_needs_two_prototypes(self):
        with pytest.raises(ValueError):
            proto_triplet(np.zeros((1, 2)), np.zeros((1, 2)), 0)

    def test_bad_class(self):
        with pytest.raises(ValueError):
            proto_triplet(np.zeros((1, 2)), np.zeros((3, 2)), 3)


class TestKNegatives:
    def test_k1_bit_identical(self):
        for seed in range(100):
            a, b = k1_instance(seed)
            assert a == b

    def test_all_negatives_far(self):
        protos = np.array([[0.0, 0.0], [9.0, 0.0], [0.0, 9.0], [-9.0, 0.0]])
        assert proto_triplet_k(np.array([[0.1, 0.0]]), protos, 0, margin=1.0, k=3).item() == 0.0

    def test_hand_mean_of_two(self):
        # query (0,0), positive (1,0): d_pos 1; negatives at d 2 and 4
        protos = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 2.0]])
        # hinges: 1-2+2 = 1 and 1-4+2 = -1 -> 0; mean 0.5
        assert proto_triplet_k(np.array([[0.0, 0.0]]), protos, 0, margin=2.0, k=2).item() == 0.5

    def test_k_too_large(self):
        with pytest.raises(ValueError, match="k_negatives"):
            proto_triplet_k(np.zeros((1, 2)), np.zeros((3, 2)), 0, k=3)


class TestTaskLoss:
    def test_queries_on_prototypes(self):
        protos = np.array([[0.0, 0.0], [5.0, 0.0]])
        assert task_proto_triplet(protos, protos, [0, 1], TripletConfig(margin=1.0)).item() == 0.0

    def test_single_query_equals_k_version(self):
        rng = np.random.default_rng(4)
        protos, q = rng.normal(size=(4, 3)), rng.normal(size=(1, 3))
        cfg = TripletConfig(margin=1.5, k_negatives=2)
        assert task_proto_triplet(q, protos, [2], cfg).item() == proto_triplet_k(q, protos, 2, 1.5, 2).item()

    def test_mean_over_queries(self):
        protos = np.array([[1.0, 0.0], [1.0, 1.0]])
        queries = np.array([[0.0, 0.0], [1.0, -3.0]])  # hinges 1 and max(0, 9 - 16 + 2)
        assert task_proto_triplet(queries, protos, [0, 0], TripletConfig(margin=2.0)).item() == 0.5

    def test_no_queries(self):
        with pytest.raises(ValueError):
            task_proto_triplet(np.zeros((0, 2)), np.zeros((2, 2)), [])

    @given(arrays(np.float64, (3, 2), elements=coords), arrays(np.float64, (4, 2), elements=coords),
           st.floats(0, 5), st.integers(1, 3))
    def test_non_negative(self, queries, protos, margin, k):
        cfg = TripletConfig(margin=margin, k_negatives=k)
        assert task_proto_triplet(queries, protos, [0, 1, 3], cfg).item() >= 0.0

    @given(arrays(np.float64, (2, 2), elements=coords), st.floats(0, 5), st.floats(0, 5))
    def test_monotone_in_margin(self, queries, m1, m2):
        protos = np.array([[0.0, 0.0], [1.0, 2.0], [-3.0, 1.0]])
        lo, hi = sorted((m1, m2))
        a = task_proto_triplet(queries, protos, [0, 2], TripletConfig(margin=lo, k_negatives=2)).item()
        b = task_proto_triplet(queries, protos, [0, 2], TripletConfig(margin=hi, k_negatives=2)).item()
        assert a <= b

    @pytest.mark.parametrize("case", ["proto_triplet", "proto_triplet_k"])
    def test_gradients(self, case):
        assert max(loss_grad_error(case, s) for s in range(10)) <= 1e-5


class TestConfig:
    def test_negative_margin(self):
        with pytest.raises(ValueError):
            TripletConfig(margin=-0.1)

    def test_zero_k(self):
        with pytest.raises(ValueError):
            TripletConfig(k_negatives=0)
