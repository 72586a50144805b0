import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from slatelab.world import (GroundTruthUser, InitialDistribution, ItemGenerator, WorldConfig,
                            category_item_directions, embed_prompt, generate_items, make_world,
                            sample_initial, spread_categories, true_score, true_scores,
                            two_type_world_config)


@pytest.fixture(scope="module")
def world():
    return make_world(WorldConfig(), seed=7)


class TestEmbedPrompt:
    def test_single_word(self, world):
        v = world.vocab
        w = v.words[5]
        e = embed_prompt(v, (w,))
        np.testing.assert_array_equal(e[:-1], v.word_embeddings[5])
        assert e[-1] == pytest.approx(1 / v.max_words)

    def test_permutation_invariant(self, world):
        p = tuple(world.vocab.words[:4])
        np.testing.assert_allclose(embed_prompt(world.vocab, p), embed_prompt(world.vocab, p[::-1]), atol=1e-15)

    def test_two_word_mean(self, world):
        v = world.vocab
        a, b = v.words[1], v.words[30]
        e = embed_prompt(v, (a, b))
        hand = [(x + y) / 2 for x, y in zip(v.word_embeddings[1], v.word_embeddings[30])]
        np.testing.assert_allclose(e[:-1], hand, rtol=1e-14)
        assert e[-1] == pytest.approx(2 / v.max_words)

    def test_unknown_token(self, world):
        with pytest.raises(ValueError, match="unknown token"):
            embed_prompt(world.vocab, ("nope",))

    def test_empty_prompt(self, world):
        with pytest.raises(ValueError):
            embed_prompt(world.vocab, ())


class TestGenerateItems:
    def test_zero_noise(self, world):
        gen = ItemGenerator(world.generator.weight, world.generator.bias, 0.0)
        p = (world.vocab.words[0],)
        items = generate_items(gen, world.vocab, p, 6, np.random.default_rng(0))
        expect = np.tanh(embed_prompt(world.vocab, p) @ gen.weight + gen.bias)
        for row in items:
            np.testing.assert_array_equal(row, expect)

    def test_seeded(self, world):
        p = (world.vocab.words[2], world.vocab.words[40])
        a = world.items(p, 4, np.random.default_rng(11))
        b = world.items(p, 4, np.random.default_rng(11))
        np.testing.assert_array_equal(a, b)

    def test_clt_bound(self, world):
        p = (world.vocab.words[3],)
        items = world.items(p, 10_000, np.random.default_rng(1))
        mean = world.generator.mean_item(world.embed(p))
        sigma = world.generator.noise_sigma
        assert np.all(np.abs(items.mean(axis=0) - mean) <= 4 * sigma / 100)

    def test_m_positive(self, world):
        with pytest.raises(ValueError):
            world.items((world.vocab.words[0],), 0, np.random.default_rng(0))


class TestTrueScore:
    def test_zero_taste(self, world):
        dim = world.users[0].taste_vector.shape[0]
        u = GroundTruthUser(0, np.zeros(dim), 0.05)
        item = np.ones(world.config.item_dim)
        assert true_score(world.vocab, u, (world.vocab.words[0],), item) == 0.5

    def test_saturation(self, world):
        u = world.users[1]
        p = (world.vocab.words[0],)
        item = world.items(p, 1, np.random.default_rng(0))[0]
        z = float(u.taste_vector @ np.concatenate([world.embed(p), item]))
        big = GroundTruthUser(1, u.taste_vector * 1e4, 0.05)
        assert true_score(world.vocab, big, p, item) == pytest.approx(1.0 if z > 0 else 0.0, abs=1e-12)

    def test_hand_dot_product(self, world):
        u = world.users[2]
        p = (world.vocab.words[4], world.vocab.words[50])
        item = world.items(p, 1, np.random.default_rng(3))[0]
        feats = list(world.embed(p)) + list(item)
        dot = sum(a * b for a, b in zip(u.taste_vector, feats))
        assert true_score(world.vocab, u, p, item) == pytest.approx(1 / (1 + math.exp(-dot)), rel=1e-12)

    def test_vectorized_matches_scalar(self, world):
        p = (world.vocab.words[6],)
        items = world.items(p, 5, np.random.default_rng(2))
        vec = true_scores(world.users[0], world.embed(p), items)
        for i in range(5):
            assert vec[i] == pytest.approx(true_score(world.vocab, world.users[0], p, items[i]), rel=1e-13)

    def test_dimension_mismatch(self, world):
        with pytest.raises(ValueError):
            true_score(world.vocab, world.users[0], (world.vocab.words[0],), np.ones(3))


class TestSampleInitial:
    def test_one_hot_prior(self, world):
        init = InitialDistribution(np.array([0, 0, 0, 1.0]), world.initial.base_words, 3)
        rng = np.random.default_rng(0)
        assert {sample_initial(init, rng)[0] for _ in range(200)} == {3}

    def test_type_frequencies(self, world):
        prior = np.array([0.1, 0.2, 0.3, 0.4])
        init = InitialDistribution(prior, world.initial.base_words, 3)
        rng = np.random.default_rng(5)
        ks = np.array([sample_initial(init, rng)[0] for _ in range(10_000)])
        freq = np.bincount(ks, minlength=4) / len(ks)
        assert np.all(np.abs(freq - prior) <= 0.02)

    def test_type_and_prompt_independent(self, world):
        init = world.initial
        rng = np.random.default_rng(9)
        base = {w: i for i, w in enumerate(init.base_words)}
        table = np.zeros((world.n_types, len(base)))
        for _ in range(10_000):
            k, p = sample_initial(init, rng)
            table[k, base[p[0]]] += 1
        _, pvalue, _, _ = chi2_contingency(table)
        assert pvalue > 0.01

    def test_prompt_length_bound(self, world):
        rng = np.random.default_rng(0)
        for _ in range(500):
            _, p = sample_initial(world.initial, rng)
            assert 1 <= len(p) <= world.config.max_init_words
            assert len(set(p)) == len(p)

    def test_prior_validated(self, world):
        with pytest.raises(ValueError, match="simplex"):
            InitialDistribution(np.array([0.5, 0.6]), world.initial.base_words, 3)


class TestWorldConstruction:
    def test_pure_function_of_config_and_seed(self):
        a, b = make_world(WorldConfig(), 3), make_world(WorldConfig(), 3)
        np.testing.assert_array_equal(a.vocab.word_embeddings, b.vocab.word_embeddings)
        np.testing.assert_array_equal(a.generator.weight, b.generator.weight)
        for u, v in zip(a.users, b.users):
            np.testing.assert_array_equal(u.taste_vector, v.taste_vector)
        c = make_world(WorldConfig(), 4)
        assert not np.array_equal(a.generator.weight, c.generator.weight)

    @pytest.mark.parametrize("seed", [0, 1, 7])
    def test_type_separation_bound(self, seed):
        w = make_world(WorldConfig(), seed)
        t = np.stack([u.taste_vector for u in w.users])
        d = w.config.prompt_dim + 1
        for v in (t, t[:, d:]):
            v = v / np.linalg.norm(v, axis=1, keepdims=True)
            cos = v @ v.T
            np.fill_diagonal(cos, -1.0)
            assert cos.max() < w.config.type_separation

    def test_taste_norm(self, world):
        for u in world.users:
            assert np.linalg.norm(u.taste_vector) == pytest.approx(world.config.taste_scale)

    def test_centering_removes_common_item_preference(self, world):
        d = world.config.prompt_dim + 1
        items = np.stack([u.taste_vector[d:] / np.linalg.norm(u.taste_vector) for u in world.users])
        uncentered = make_world(replace(world.config, taste_centering=0.0), 7)
        raw = np.stack([u.taste_vector[d:] / np.linalg.norm(u.taste_vector) for u in uncentered.users])
        assert np.linalg.norm(items.mean(axis=0)) < np.linalg.norm(raw.mean(axis=0))

    def test_pools_disjoint(self, world):
        pools = [set(p) for p in world.vocab.category_pools]
        assert sum(len(p) for p in pools) == len(set().union(*pools))
        assert not set(world.vocab.base_words) & set().union(*pools)

    def test_config_roundtrip(self):
        cfg = WorldConfig(type_prior=(0.25, 0.25, 0.25, 0.25))
        assert WorldConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("bad", [dict(taste_centering=1.5), dict(category_affinity=-0.1),
                                     dict(n_types=6, category_affinity=0.5), dict(utility_agg="median"),
                                     dict(max_init_words=0)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            WorldConfig(**bad)


class TestPlantedCategories:
    def test_two_type_world_ties_types_to_categories(self):
        w = make_world(two_type_world_config(), 7)
        assert w.type_categories is not None and len(set(w.type_categories)) == 2
        cats, dirs = category_item_directions(w.vocab, w.generator, 2)
        d = w.config.prompt_dim + 1
        for k, u in enumerate(w.users):
            part = u.taste_vector[d:]
            assert part @ dirs[k] / np.linalg.norm(part) == pytest.approx(1.0)
            # the tied category's mean item scores higher than the other type's
            c_own, c_other = cats[k], cats[1 - k]
            own = w.generator.mean_item(w.embed(tuple(w.vocab.category_pools[c_own])))
            other = w.generator.mean_item(w.embed(tuple(w.vocab.category_pools[c_other])))
            assert part @ own > part @ other

    def test_random_worlds_have_no_planted_categories(self, world):
        assert world.type_categories is None

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 10_000))
    def test_spread_categories_distinct_and_farthest_pair_first(self, k, seed):
        pts = np.random.default_rng(seed).normal(size=(6, 3))
        chosen = spread_categories(pts, k)
        assert len(set(chosen)) == k
        dist = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        assert dist[chosen[0], chosen[1]] == pytest.approx(dist.max())
