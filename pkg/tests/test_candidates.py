import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slatelab.candidates import (BudgetSchedule, CandidateSet, category_counts, generate_candidates,
                                 word_budget)
from slatelab.world import WorldConfig, make_world


@pytest.fixture(scope="module")
def vocab():
    return make_world(WorldConfig(), seed=3).vocab


class TestWordBudget:
    def test_endpoints(self):
        s = BudgetSchedule(10, 62, 5)
        assert word_budget(s, 0) == 10
        assert word_budget(s, 5) == 62

    def test_interior(self):
        assert word_budget(BudgetSchedule(10, 62, 5), 3) == 41

    def test_monotone(self):
        s = BudgetSchedule(3, 17, 6)
        vals = [word_budget(s, t) for t in range(7)]
        assert vals == sorted(vals)

    def test_recurrence_clamped(self):
        s = BudgetSchedule(10, 62, 5, mode="recurrence")
        vals = [word_budget(s, t) for t in range(6)]
        # the unclamped first iterate would be 10 * 52 / 5 = 104
        assert vals[1] == 62
        assert all(10 <= v <= 62 for v in vals)

    def test_turn_out_of_range(self):
        with pytest.raises(ValueError):
            word_budget(BudgetSchedule(2, 5, 3), 4)
        with pytest.raises(ValueError):
            word_budget(BudgetSchedule(2, 5, 3), -1)

    @pytest.mark.parametrize("bad", [(0, 5, 3), (6, 5, 3), (2, 5, 0)])
    def test_schedule_validation(self, bad):
        with pytest.raises(ValueError):
            BudgetSchedule(*bad)


class TestGenerateCandidates:
    def test_five_per_category(self, vocab):
        cs = generate_candidates((vocab.base_words[0],), vocab, 6, 25, np.random.default_rng(0), 5)
        assert len(cs) == 25
        assert [len(cs.members(c)) for c in range(5)] == [5] * 5

    def test_remainder_spread(self):
        assert category_counts(27, 5) == [6, 6, 5, 5, 5]
        assert sum(category_counts(27, 5)) == 27

    def test_prefix_and_pools(self, vocab):
        cur = (vocab.base_words[1], vocab.base_words[2])
        cs = generate_candidates(cur, vocab, 7, 25, np.random.default_rng(1), 5)
        for p, c in zip(cs.prompts, cs.categories):
            assert p[:2] == cur
            assert 1 <= len(p) - 2 <= 5
            assert set(p[2:]) <= set(vocab.category_pools[c])

    def test_no_duplicates(self, vocab):
        cs = generate_candidates((vocab.base_words[0],), vocab, 4, 25, np.random.default_rng(2), 5)
        assert len(set(cs.prompts)) == 25

    def test_saturated(self, vocab):
        cur = tuple(vocab.base_words[:3])
        cs = generate_candidates(cur, vocab, 3, 10, np.random.default_rng(0), 5)
        assert cs.saturated and all(p == cur for p in cs.prompts) and len(cs) == 10

    def test_too_few_candidates(self, vocab):
        with pytest.raises(ValueError):
            generate_candidates((vocab.base_words[0],), vocab, 5, 3, np.random.default_rng(0), 5)

    def test_record_roundtrip(self, vocab):
        cur = (vocab.base_words[0],)
        cs = generate_candidates(cur, vocab, 5, 10, np.random.default_rng(4), 5)
        assert CandidateSet.from_record(cur, cs.to_record()) == cs

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 8), st.integers(5, 30))
    def test_budget_respected_reproducible_and_partitioned(self, vocab, seed, budget, n):
        cur = (vocab.base_words[seed % len(vocab.base_words)],)
        a = generate_candidates(cur, vocab, budget, n, np.random.default_rng(seed), 5)
        b = generate_candidates(cur, vocab, budget, n, np.random.default_rng(seed), 5)
        assert a == b
        assert all(len(p) <= budget for p in a.prompts)
        assert sorted(i for c in range(5) for i in a.members(c)) == list(range(n))
