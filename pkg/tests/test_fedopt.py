import itertools

import numpy as np
import pytest

from fedforge.fedopt import (
    AggregationError,
    AggregatorState,
    ClientUpdate,
    SamplerState,
    ServerOptState,
    client_weight,
    sample_clients,
    server_step,
)
from fedforge.params import ParamError, ParamVector, l2_norm


def make_update(cid, rnd, n_k, delta):
    return ClientUpdate(cid, rnd, n_k, np.asarray(delta, dtype=np.float64))


class TestClientWeight:
    def test_eight_equal_clients(self):
        weights = [client_weight(1000, 8000) for _ in range(8)]
        assert all(w == 0.125 for w in weights)
        assert abs(sum(weights) - 1.0) <= 1e-12

    def test_direct_evaluation(self):
        assert client_weight(1, 4) == 0.25
        assert client_weight(3, 4) == 0.75

    def test_single_client(self):
        assert client_weight(17, 17) == 1.0

    def test_zero_total_rejected(self):
        with pytest.raises(ParamError):
            client_weight(1, 0)

    def test_nk_bounds(self):
        with pytest.raises(ParamError):
            client_weight(0, 5)
        with pytest.raises(ParamError):
            client_weight(6, 5)


class TestAggregator:
    def test_first_contribution(self):
        agg = AggregatorState(1, 2)
        agg.accumulate(make_update(0, 1, 2, [1.0, 0.0]))
        assert agg.weighted_sum.tolist() == [2.0, 0.0]
        assert agg.total_weight == 2
        assert agg.contributors == {0}

    def test_duplicate_contributor_rejected(self):
        agg = AggregatorState(1, 1)
        agg.accumulate(make_update(3, 1, 1, [1.0]))
        with pytest.raises(AggregationError, match="duplicate"):
            agg.accumulate(make_update(3, 1, 1, [2.0]))

    def test_round_mismatch_rejected(self):
        agg = AggregatorState(1, 1)
        with pytest.raises(AggregationError, match="round"):
            agg.accumulate(make_update(0, 2, 1, [1.0]))

    def test_length_mismatch_rejected(self):
        agg = AggregatorState(1, 2)
        with pytest.raises(ParamError):
            agg.accumulate(make_update(0, 1, 1, [1.0]))

    def test_finalize_empty_rejected(self):
        with pytest.raises(AggregationError):
            AggregatorState(0, 1).finalize()

    def test_single_client_identity(self, rng):
        delta = rng.normal(size=13)
        agg = AggregatorState(2, 13)
        agg.accumulate(make_update(5, 2, 937, delta))
        assert np.array_equal(agg.finalize(), delta)

    def test_equal_weight_mean(self):
        agg = AggregatorState(0, 2)
        agg.accumulate(make_update(0, 0, 3, [1.0, 2.0]))
        agg.accumulate(make_update(1, 0, 3, [3.0, 4.0]))
        assert agg.finalize().tolist() == [2.0, 3.0]

    def test_weighted_mean(self):
        agg = AggregatorState(0, 1)
        agg.accumulate(make_update(0, 0, 1, [4.0]))
        agg.accumulate(make_update(1, 0, 3, [0.0]))
        assert agg.finalize().tolist() == [1.0]

    def test_all_arrival_orders_of_three_agree(self, rng):
        # brute force over all 6 permutations against the fixed-order mean
        updates = [make_update(i, 1, int(n), rng.normal(size=5)) for i, n in
                   enumerate(rng.integers(1, 50, size=3))]
        reference = sum(u.n_k * u.delta for u in updates) / sum(u.n_k for u in updates)
        for perm in itertools.permutations(updates):
            agg = AggregatorState(1, 5)
            for u in perm:
                agg.accumulate(u)
            got = agg.finalize()
            assert np.allclose(got, reference, rtol=1e-6)

    def test_deterministic_mode_bit_identical_across_orders(self, rng):
        updates = [make_update(i, 1, int(n), rng.normal(size=7)) for i, n in
                   enumerate(rng.integers(1, 100, size=8))]
        results = []
        for perm_seed in range(10):
            order = np.random.default_rng(perm_seed).permutation(8)
            agg = AggregatorState(1, 7, deterministic=True)
            for i in order:
                agg.accumulate(updates[i])
            results.append(agg.finalize())
        first = results[0]
        for r in results[1:]:
            assert np.array_equal(r.view(np.uint64), first.view(np.uint64))

    def test_merge_associative_over_all_two_block_partitions(self, rng):
        updates = [make_update(i, 3, int(n), rng.normal(size=4)) for i, n in
                   enumerate(rng.integers(1, 20, size=8))]
        whole = AggregatorState(3, 4)
        for u in updates:
            whole.accumulate(u)
        reference = whole.finalize()
        for mask in range(1, 2**8 - 1):
            left = AggregatorState(3, 4)
            right = AggregatorState(3, 4)
            for i, u in enumerate(updates):
                (left if mask & (1 << i) else right).accumulate(u)
            merged = left.merge(right)
            assert merged.total_weight == whole.total_weight
            assert merged.contributors == set(range(8))
            assert np.allclose(merged.finalize(), reference, rtol=1e-6)

    def test_merge_rejects_overlap(self):
        a = AggregatorState(0, 1)
        a.accumulate(make_update(0, 0, 1, [1.0]))
        b = AggregatorState(0, 1)
        b.accumulate(make_update(0, 0, 1, [1.0]))
        with pytest.raises(AggregationError, match="overlap"):
            a.merge(b)

    def test_weights_sum_to_one(self, rng):
        agg = AggregatorState(0, 2)
        for i, n in enumerate([5, 17, 3]):
            agg.accumulate(make_update(i, 0, n, rng.normal(size=2)))
        assert sum(agg.weights().values()) == pytest.approx(1.0, abs=1e-12)


def scalar_server_step_oracle(eta, mu, nesterov, w, m, deltas):
    """Independent per-element recurrence mirroring the materialization
    contract: float64 math, momentum and weights rounded to float32 each
    round."""
    w = [np.float32(x) for x in w]
    m = [np.float32(x) for x in m]
    for delta in deltas:
        m_new, w_new = [], []
        for j in range(len(w)):
            mj = mu * float(m[j]) + float(delta[j])
            mj32 = np.float32(mj)
            if nesterov:
                upd = eta * (mu * float(mj32) + float(delta[j]))
            else:
                upd = eta * float(mj32)
            m_new.append(mj32)
            w_new.append(np.float32(float(w[j]) - upd))
        m, w = m_new, w_new
    return np.array(w, dtype=np.float32), np.array(m, dtype=np.float32)


class TestServerStep:
    def test_fedavg_reduction(self):
        opt = ServerOptState.fresh(2, eta=1.0, mu=0.0)
        w, _ = server_step(opt, ParamVector(np.array([1.0, 1.0], dtype=np.float32)),
                           np.array([1.0, 1.0]))
        assert w.data.tolist() == [0.0, 0.0]

    def test_hand_scalar_recurrence(self):
        # mu=0.9, eta=0.1, m=0, w=1, delta=0.5:
        # m' = 0.5; w' = 1 - 0.1*(0.9*0.5 + 0.5) = 0.905
        opt = ServerOptState.fresh(1, eta=0.1, mu=0.9)
        w, opt2 = server_step(opt, ParamVector(np.array([1.0], dtype=np.float32)),
                              np.array([0.5]))
        assert opt2.momentum.data[0] == pytest.approx(0.5)
        assert float(w.data[0]) == pytest.approx(0.905, rel=1e-6)

    def test_momentum_decays_geometrically_with_zero_delta(self):
        opt = ServerOptState(ParamVector(np.array([2.0], dtype=np.float32)),
                             eta=0.1, mu=0.5, nesterov=True)
        w = ParamVector(np.array([1.0], dtype=np.float32))
        zero = np.zeros(1)
        norms = []
        for t in range(5):
            w, opt = server_step(opt, w, zero)
            norms.append(l2_norm(opt.momentum))
        for t, n in enumerate(norms):
            assert n == pytest.approx(2.0 * 0.5 ** (t + 1), rel=1e-6)

    @pytest.mark.parametrize("eta,mu", [(0.1, 0.9), (0.1, 0.9), (0.1, 0.9), (0.7, 0.9)])
    @pytest.mark.parametrize("nesterov", [True, False])
    def test_matches_scalar_oracle_over_rounds(self, rng, eta, mu, nesterov):
        w0 = rng.normal(size=3)
        deltas = [rng.normal(size=3) * 0.1 for _ in range(6)]
        expect_w, expect_m = scalar_server_step_oracle(eta, mu, nesterov, w0, [0.0] * 3, deltas)
        w = ParamVector(np.asarray(w0, dtype=np.float32))
        opt = ServerOptState.fresh(3, eta=eta, mu=mu, nesterov=nesterov)
        for d in deltas:
            w, opt = server_step(opt, w, d)
        np.testing.assert_allclose(w.data, expect_w, rtol=1e-12, atol=0)
        np.testing.assert_allclose(opt.momentum.data, expect_m, rtol=1e-12, atol=0)

    def test_invalid_hyperparameters(self):
        with pytest.raises(ParamError):
            ServerOptState.fresh(1, eta=0.0, mu=0.5)
        with pytest.raises(ParamError):
            ServerOptState.fresh(1, eta=0.1, mu=1.0)

    def test_nonfinite_result_names_round(self):
        opt = ServerOptState.fresh(1, eta=1.0, mu=0.0)
        big = ParamVector(np.array([3.0e38], dtype=np.float32))
        with pytest.raises(ParamError, match="round 9"):
            server_step(opt, big, np.array([-3.0e38]), round_num=9)


class TestFedAvgEquivalence:
    def test_new_global_is_weighted_client_mean(self, rng):
        # eta=1, mu=0: w' = w - sum(p_k (w - w_k)) = sum(p_k w_k)
        n = 50
        w_prev = ParamVector(rng.normal(size=n).astype(np.float32))
        client_models = [rng.normal(size=n).astype(np.float32) for _ in range(4)]
        counts = [1, 2, 3, 4]
        agg = AggregatorState(0, n)
        for i, (cm, n_k) in enumerate(zip(client_models, counts)):
            agg.accumulate(make_update(i, 0, n_k, w_prev.as_f64() - cm.astype(np.float64)))
        opt = ServerOptState.fresh(n, eta=1.0, mu=0.0)
        w_new, _ = server_step(opt, w_prev, agg.finalize())
        expect = sum(
            (n_k / 10) * cm.astype(np.float64) for cm, n_k in zip(client_models, counts)
        )
        np.testing.assert_allclose(w_new.data, expect, rtol=1e-6)


class TestSampler:
    def test_full_participation_returns_whole_pool_ordered(self):
        s = SamplerState(seed=1, round=3, fraction=1.0)
        assert sample_clients(s, [5, 2, 7, 0, 1, 3, 6, 4]) == list(range(8))

    def test_half_fraction_deterministic(self):
        s = SamplerState(seed=42, round=2, fraction=0.5)
        pool = list(range(8))
        first = sample_clients(s, pool)
        assert len(first) == 4
        assert sample_clients(s, pool) == first

    def test_round_changes_selection(self):
        pool = list(range(100))
        a = sample_clients(SamplerState(seed=42, round=1, fraction=0.5), pool)
        b = sample_clients(SamplerState(seed=42, round=2, fraction=0.5), pool)
        assert a != b

    def test_pool_of_one(self):
        s = SamplerState(seed=9, round=0, fraction=0.3)
        assert sample_clients(s, [11]) == [11]

    def test_fraction_bounds(self):
        with pytest.raises(ParamError):
            SamplerState(seed=1, round=0, fraction=0.0)
        with pytest.raises(ParamError):
            SamplerState(seed=1, round=0, fraction=1.5)

    def test_empty_pool(self):
        with pytest.raises(ParamError):
            sample_clients(SamplerState(seed=1), [])
