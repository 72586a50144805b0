from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from slatelab.candidates import CandidateSet
from slatelab.datasets import PairGroup, PairwiseRecord, RankedList, synth_sequential
from slatelab.env import EpisodeState, History, RandomPolicy, TurnRecord
from slatelab.evalharness import (PolicyEvalReport, evaluate_policy, format_report_table, label_rewards,
                                  pickapic_accuracy, rank_correlation_eval, spearman, split_group,
                                  summarize_returns)
from slatelab.numcore import log_softmax
from slatelab.usermodel import UserModel, UserModelConfig
from slatelab.world import WorldConfig, make_world, true_scores


@pytest.fixture(scope="module")
def world():
    return make_world(WorldConfig(), seed=7)


class FirstCoordinate(UserModel):
    """Every type scores an item by ``transform(item[0])``."""

    def __init__(self, world, n_types=1, transform=None):
        cfg = UserModelConfig(n_types=n_types, text_dim=world.vocab.embed_dim + 1, item_dim=world.config.item_dim)
        base = UserModel.initialize(cfg, np.random.default_rng(0))
        super().__init__(cfg, base.params, np.full(n_types, 1.0 / n_types))
        self.transform = transform or (lambda x: x)

    def score_forward(self, params, texts, items, text_index):
        s = self.transform(items[:, 0])
        return np.repeat(s[:, None], self.n_types, axis=1), None


def item(x, dim=8):
    v = np.zeros(dim)
    v[0] = x
    return v


def group(world, values, labels, prompt=None):
    prompt = prompt or (world.vocab.base_words[0],)
    return PairGroup(prompt, [PairwiseRecord(prompt, item(a), item(b), lab, 0)
                              for (a, b), lab in zip(values, labels)])


class TestPickapic:
    def test_perfect_scores(self, world):
        rng = np.random.default_rng(0)
        groups = []
        for _ in range(5):
            vals = rng.random((6, 2))
            groups.append(group(world, vals, ["a" if a > b else "b" for a, b in vals]))
        assert pickapic_accuracy(FirstCoordinate(world), world.vocab, groups) == 1.0

    def test_constant_scores_all_ties(self, world):
        g = group(world, [(0.3, 0.3)] * 4, ["tie"] * 4)
        assert pickapic_accuracy(FirstCoordinate(world), world.vocab, [g]) == 1.0

    def test_tie_threshold(self, world):
        g = group(world, [(0.5, 0.5), (0.5, 0.5), (0.55, 0.5), (0.65, 0.5)], ["tie"] * 4)
        assert pickapic_accuracy(FirstCoordinate(world), world.vocab, [g]) == 0.5
        assert pickapic_accuracy(FirstCoordinate(world), world.vocab, [g], tie_threshold=0.2) == 1.0

    def test_reversed_scores(self, world):
        g = group(world, [(0.9, 0.1)] * 4, ["b"] * 4)
        assert pickapic_accuracy(FirstCoordinate(world), world.vocab, [g]) == 0.0

    def test_halves(self, world):
        g = group(world, [(0.1, 0.2)] * 5, ["a"] * 5)
        post, ev = split_group(g)
        assert len(post) == 3 and len(ev) == 2
        with pytest.raises(ValueError):
            pickapic_accuracy(FirstCoordinate(world), world.vocab, [group(world, [(0.1, 0.2)], ["a"])])

    def test_posterior_weighting(self, world):
        class TwoTypes(FirstCoordinate):
            def score_forward(self, params, texts, items, text_index):
                s = items[:, 0]
                return np.stack([s, 1.0 - s], axis=1), None

        m = TwoTypes(world, n_types=2)
        # posterior half only type 0 explains; eval half then scored mostly by type 0
        g = group(world, [(0.9, 0.1)] * 6, ["a"] * 6)
        acc = pickapic_accuracy(m, world.vocab, [g])
        gap = 0.8
        ll = 3 * np.array([-np.logaddexp(0, -gap), -np.logaddexp(0, gap)])
        gamma = np.exp(ll - np.logaddexp(*ll))
        assert acc == pytest.approx(gamma[0], rel=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_transform_invariance(self, world, seed):
        rng = np.random.default_rng(seed)
        vals = rng.random((8, 2))
        g = group(world, vals, ["a" if rng.random() < 0.5 else "b" for _ in vals])
        base = pickapic_accuracy(FirstCoordinate(world), world.vocab, [g])
        cubed = pickapic_accuracy(FirstCoordinate(world, transform=lambda x: x ** 3), world.vocab, [g])
        assert base == cubed


class TestSpearman:
    def test_examples(self):
        assert spearman([1, 2, 3, 4], [1, 2, 3, 4]) == 1.0
        assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
        assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_closed_form_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 12))
        a, b = rng.permutation(n) + 1, rng.permutation(n) + 1
        d2 = sum((int(x) - int(y)) ** 2 for x, y in zip(a, b))
        assert spearman(a, b) == pytest.approx(1 - 6 * d2 / (n * (n * n - 1)), abs=1e-12)

    def test_ties_match_reference(self):
        a, b = [1, 2, 2, 3, 5], [2, 1, 3, 3, 4]
        assert spearman(a, b) == pytest.approx(spearmanr(a, b).statistic, abs=1e-12)

    @given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=2, max_size=12),
           st.randoms(use_true_random=False))
    def test_symmetric_and_relabeling_invariant(self, pairs, rnd):
        a, b = np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])
        assert spearman(a, b) == spearman(b, a)
        perm = list(range(len(a)))
        rnd.shuffle(perm)
        assert spearman(a[perm], b[perm]) == pytest.approx(spearman(a, b), abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            spearman([1, 2, 3], [1, 2])
        with pytest.raises(ValueError):
            spearman([1], [1])


def ranked_list(world, values):
    return RankedList((world.vocab.base_words[0],), np.stack([item(v) for v in values]))


class TestRankCorrelation:
    def test_monotone_scores(self, world):
        lists = [ranked_list(world, np.sort(np.random.default_rng(i).random(9))[::-1]) for i in range(5)]
        assert rank_correlation_eval(FirstCoordinate(world), world.vocab, lists) == pytest.approx(1.0)

    def test_single_type_is_plain_spearman(self, world):
        rng = np.random.default_rng(3)
        lists = [ranked_list(world, rng.random(8)) for _ in range(6)]
        res = rank_correlation_eval(FirstCoordinate(world), world.vocab, lists, seed=2, return_details=True)
        from slatelab.datasets import stream_rng
        from slatelab.evalharness import STREAM_RANK_EVAL
        for j, lst in enumerate(lists):
            probe = np.sort(stream_rng(2, STREAM_RANK_EVAL, j).choice(8, size=3, replace=False))
            rest = np.setdiff1d(np.arange(8), probe)
            assert res.per_sample[j] == pytest.approx(spearman(rest, -lst.items[rest, 0]), abs=1e-12)

    def test_short_lists_skipped(self, world):
        lists = [ranked_list(world, [0.9, 0.5, 0.1]), ranked_list(world, np.linspace(1, 0, 7))]
        res = rank_correlation_eval(FirstCoordinate(world), world.vocab, lists, return_details=True)
        assert res.skipped == 1 and len(res.per_sample) == 1
        with pytest.raises(ValueError):
            rank_correlation_eval(FirstCoordinate(world), world.vocab, lists[:1])


class TruthModel(UserModel):
    """Choice likelihoods and utilities of the ground-truth users."""

    def __init__(self, world, prior=None):
        k = world.n_types
        cfg = UserModelConfig(n_types=k, text_dim=world.vocab.embed_dim + 1, item_dim=world.config.item_dim)
        base = UserModel.initialize(cfg, np.random.default_rng(0))
        super().__init__(cfg, base.params, np.full(k, 1.0 / k) if prior is None else np.asarray(prior, float))
        self.world = world

    def utilities(self, text, items, agg=None, rng=None):
        agg = np.max if self.world.config.utility_agg == "max" else np.mean
        return np.stack([agg(true_scores(u, text, items), axis=-1) for u in self.world.users])

    def choice_loglik(self, text, slate_items, choice):
        r = self.utilities(text, slate_items)
        temps = np.array([[u.choice_temperature] for u in self.world.users])
        return log_softmax(r / temps, axis=-1)[:, choice]


class TestLabelRewards:
    def test_single_type(self, world):
        cfg = UserModelConfig(n_types=1, text_dim=world.vocab.embed_dim + 1, item_dim=world.config.item_dim)
        m = UserModel.initialize(cfg, np.random.default_rng(1))
        sessions, _ = synth_sequential(world, 3, seed=2)
        for out, s in zip(label_rewards(m, world.vocab, sessions), sessions):
            text = world.embed(s.p0)
            expect = [m.utilities(text, t.items)[0, t.choice] for t in s.turns]
            np.testing.assert_array_equal(out.rewards, expect)
            assert out.map_type == 0

    def test_one_hot_prior(self, world):
        m = TruthModel(world, prior=[0, 0, 1, 0])
        sessions, _ = synth_sequential(world, 3, seed=3)
        for out, s in zip(label_rewards(m, world.vocab, sessions), sessions):
            assert out.map_type == 2
            expect = [world.column_utilities(2, s.p0, t.items)[t.choice] for t in s.turns]
            np.testing.assert_allclose(out.rewards, expect, rtol=1e-12)

    def test_planted_recovery(self, world):
        sessions, hidden = synth_sequential(world, 200, seed=4)
        out = label_rewards(TruthModel(world), world.vocab, sessions)
        hits = np.mean([o.map_type == k for o, k in zip(out, hidden)])
        assert hits >= 0.9


# -- policy evaluation on a stub environment ------------------------------

@dataclass(frozen=True)
class StubConfig:
    horizon: int = 2
    slate_size: int = 2


class StubEnv:
    def __init__(self, reward=None):
        self.config = StubConfig()
        self.reward = reward

    def reset(self, rng):
        return EpisodeState(History(("w",)), 0)

    def candidates(self, state, rng):
        base = state.chosen_prompt
        return CandidateSet((base + ("x",), base + ("y",)), (0, 1), base)

    def step(self, state, slate, rng, mode):
        h = state.history.extend(TurnRecord(tuple(slate), np.zeros((2, 1, 1)), 0))
        r = self.reward if self.reward is not None else float(rng.random())
        return EpisodeState(h, 0, h.t >= 2), 0, r


class TestEvaluatePolicy:
    def test_constant_reward(self):
        rep = evaluate_policy(RandomPolicy(), StubEnv(0.25), 50, "dense", seed=0, name="random")
        assert rep.mean_return == 0.5 and rep.std_error == 0.0 and rep.n_episodes == 50
        assert rep.ci95 == (0.5, 0.5)

    def test_reproducible_and_thread_independent(self):
        a = evaluate_policy(RandomPolicy(), StubEnv(), 40, "dense", seed=3)
        b = evaluate_policy(RandomPolicy(), StubEnv(), 40, "dense", seed=3, n_jobs=4)
        assert a == b

    def test_stderr_scaling(self):
        small = evaluate_policy(RandomPolicy(), StubEnv(), 100, "dense", seed=1).std_error
        large = evaluate_policy(RandomPolicy(), StubEnv(), 400, "dense", seed=1).std_error
        assert small / large == pytest.approx(2.0, rel=0.2)
        # iid uniform per turn, two turns: sd = sqrt(2/12)
        assert large == pytest.approx(np.sqrt(2 / 12) / 20, rel=0.15)

    def test_summaries(self):
        rep = summarize_returns([1.0, 2.0, 3.0], "sparse", 4, "trained")
        assert rep.mean_return == 2.0 and rep.std_error == pytest.approx(1 / np.sqrt(3))
        d = rep.to_json()
        assert d["policy"] == "trained" and len(d["ci95"]) == 2
        with pytest.raises(ValueError):
            summarize_returns([], "sparse", 0)
        with pytest.raises(ValueError):
            evaluate_policy(RandomPolicy(), StubEnv(), 0, "dense", 0)

    def test_table(self):
        reps = [PolicyEvalReport(1.0, 0.1, 10, "sparse", 0, "random"),
                PolicyEvalReport(1.5, 0.1, 10, "sparse", 0, "trained")]
        table = format_report_table(reps).splitlines()
        assert len(table) == 3 and table[1].startswith("random") and table[2].startswith("trained")
