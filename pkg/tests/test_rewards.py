import numpy as np
import pytest

from pathrec.decoding import COMPLETE, PathStep, ReasoningPath, RetrievalIndex
from pathrec.numerics import named_stream
from pathrec.rewards import (
    FutureWindow,
    RewardConfig,
    RewardTarget,
    category_hit,
    decayed_mean,
    global_path,
    step_consistency,
    step_hit,
    total_reward,
    windowed_category_hit,
    windowed_path_hit,
    windowed_step_hit,
)
from pathrec.tokenizer import TokenSet


def make_path(pairs, confs=None, cates=None):
    steps = []
    for i, (r, c) in enumerate(pairs):
        conf = 1.0 if confs is None else confs[i]
        cate = None if cates is None else np.asarray(cates[i], dtype=np.float64)
        steps.append(PathStep(r, c, conf, cate))
    return ReasoningPath(tuple(steps), frozenset(), COMPLETE)


def uniform(n, k):
    d = np.zeros(n)
    d[k] = 1.0
    return d


class TestStepHit:
    def test_full_match(self):
        target = TokenSet([(1, 2), (2, 3), (3, 1)])
        path = make_path([(2, 3), (1, 2), (3, 1)])
        assert step_hit(path, target) == 1.0

    def test_three_of_four(self):
        target = TokenSet([(1, 1), (2, 2), (3, 3), (4, 4)])
        path = make_path([(1, 1), (2, 2), (3, 3), (4, 9)])
        assert step_hit(path, target) == 0.75

    def test_order_invariant(self):
        target = TokenSet([(1, 5), (2, 6), (3, 7)])
        a = make_path([(1, 5), (2, 6), (3, 9)])
        b = make_path([(3, 9), (2, 6), (1, 5)])
        assert step_hit(a, target) == step_hit(b, target)

    def test_incomplete_rejected(self):
        path = ReasoningPath((PathStep(1, 1, 0.9),), frozenset({2}))
        with pytest.raises(ValueError, match="incomplete-path"):
            step_hit(path, TokenSet([(1, 1), (2, 1)]))

    def test_matches_counting_oracle(self):
        rng = named_stream(0, "step-oracle")
        for _ in range(1000):
            m = int(rng.integers(1, 6))
            d = int(rng.integers(2, 8))
            target = TokenSet([(r, int(rng.integers(1, d + 1))) for r in range(1, m + 1)])
            perm = rng.permutation(m) + 1
            path = make_path([(int(r), int(rng.integers(1, d + 1))) for r in perm])
            expected = sum(1 for s in path.steps
                           if dict(target.tokens)[s.codebook] == s.token) / m
            assert step_hit(path, target) == expected


class TestCategoryHit:
    def test_all_hit(self):
        cates = [uniform(3, 1)] * 3
        path = make_path([(1, 1), (2, 1), (3, 1)], cates=cates)
        assert category_hit(path, 1) == 1.0

    def test_half(self):
        cates = [uniform(3, 1), uniform(3, 2)]
        path = make_path([(1, 1), (2, 1)], cates=cates)
        assert category_hit(path, 1) == 0.5

    def test_hand_traced_four_steps(self):
        cates = [uniform(4, 0), uniform(4, 2), uniform(4, 2), uniform(4, 3)]
        path = make_path([(1, 1), (2, 1), (3, 1), (4, 1)], cates=cates)
        assert category_hit(path, 2) == 0.5

    def test_missing_category(self):
        path = make_path([(1, 1), (2, 1)])
        with pytest.raises(ValueError, match="no-category"):
            category_hit(path, 0)

    def test_matches_counting_oracle(self):
        rng = named_stream(1, "cate-oracle")
        for _ in range(1000):
            m = int(rng.integers(1, 6))
            n_cat = int(rng.integers(2, 6))
            cates = [rng.dirichlet(np.ones(n_cat)) for _ in range(m)]
            path = make_path([(r, 1) for r in range(1, m + 1)], cates=cates)
            target = int(rng.integers(n_cat))
            expected = sum(1 for c in cates if int(np.argmax(c)) == target) / m
            assert category_hit(path, target) == expected


class TestStepConsistency:
    def test_shared_distribution_scores_one(self):
        d = np.array([0.3, 0.7])
        path = make_path([(1, 1), (2, 1), (3, 1)], cates=[d, d, d])
        assert step_consistency(path) == 1.0

    def test_disjoint_masses_score_zero(self):
        path = make_path([(1, 1), (2, 1)],
                         cates=[np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        assert np.isclose(step_consistency(path), 0.0)
        # raw mode keeps the unnormalized mean: 1 - ln 2
        assert np.isclose(step_consistency(path, normalize=False), 1.0 - np.log(2.0))

    def test_adjacency_sensitivity(self):
        a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        near = make_path([(1, 1), (2, 1), (3, 1)], cates=[a, a, b])
        swapped = make_path([(1, 1), (2, 1), (3, 1)], cates=[a, b, a])
        assert step_consistency(near) != step_consistency(swapped)

    def test_relabeling_invariance(self):
        rng = named_stream(2, "js-relabel")
        cates = [rng.dirichlet(np.ones(4)) for _ in range(3)]
        perm = rng.permutation(4)
        relabeled = [c[perm] for c in cates]
        p1 = make_path([(1, 1), (2, 1), (3, 1)], cates=cates)
        p2 = make_path([(1, 1), (2, 1), (3, 1)], cates=relabeled)
        assert np.isclose(step_consistency(p1), step_consistency(p2), atol=1e-12)

    def test_requires_two_steps(self):
        path = make_path([(1, 1)], cates=[uniform(2, 0)])
        with pytest.raises(ValueError):
            step_consistency(path)


def build_index(seed=0, n_items=20, m=3, d=4, latent=6):
    rng = named_stream(seed, "reward-index")
    codebooks = [rng.normal(size=(d, latent)) for _ in range(m)]
    token_map = {}
    for i in range(n_items):
        ts = TokenSet([(r, int(rng.integers(1, d + 1))) for r in range(1, m + 1)])
        token_map[f"it-{i:03d}"] = (ts, np.full(m, 1.0 / m))
    index = RetrievalIndex.from_token_map(codebooks, token_map)
    return codebooks, token_map, index


class TestGlobalPath:
    def test_exact_match_top1(self):
        _, token_map, index = build_index()
        iid = "it-003"
        target = RewardTarget(iid, token_map[iid][0], 0)
        path = make_path(list(token_map[iid][0].tokens))
        assert global_path(path, target, index, top_n=1, drop=0) == 1.0

    def test_absent_target_zero(self):
        _, token_map, index = build_index()
        target = RewardTarget("missing", token_map["it-000"][0], 0)
        path = make_path(list(token_map["it-000"][0].tokens))
        assert global_path(path, target, index, top_n=20, drop=0) == 0.0

    def test_corrupted_token_matches_brute_force(self):
        rng = named_stream(3, "gp-oracle")
        codebooks, token_map, index = build_index(seed=3)
        for trial in range(50):
            iid = f"it-{int(rng.integers(20)):03d}"
            ts = token_map[iid][0]
            pairs = list(ts.tokens)
            k = int(rng.integers(len(pairs)))
            r, c = pairs[k]
            pairs[k] = (r, (c % 4) + 1)  # corrupt one token
            confs = list(rng.random(3) * 0.9 + 0.05)
            path = make_path(pairs, confs=confs)
            got = global_path(path, RewardTarget(iid, ts, 0), index, top_n=5, drop=1)

            # oracle: drop the mismatched step, rank by exhaustive distances
            kept = [s for s in path.steps if dict(ts.tokens)[s.codebook] == s.token]
            z = np.mean([codebooks[s.codebook - 1][s.token - 1] for s in kept], axis=0)
            dists = sorted(((float(((v - z) ** 2).sum()), i)
                            for i, v in zip(index.item_ids, index.matrix)))
            expected = 1.0 if iid in [i for _, i in dists[:5]] else 0.0
            assert got == expected, f"trial {trial}"

    def test_drop_bounds(self):
        _, token_map, index = build_index()
        path = make_path(list(token_map["it-000"][0].tokens))
        with pytest.raises(ValueError):
            global_path(path, RewardTarget("x", token_map["it-000"][0], 0),
                        index, top_n=1, drop=3)


def const_path(m=2, hit_tokens=None, cate=0, n_cat=3):
    pairs = hit_tokens or [(r, 1) for r in range(1, m + 1)]
    cates = [uniform(n_cat, cate)] * len(pairs)
    return make_path(pairs, cates=cates)


class TestWindowedRewards:
    def test_horizon_one_equals_single_step_bitwise(self):
        _, token_map, index = build_index()
        iid = "it-001"
        ts = token_map[iid][0]
        path = make_path(list(ts.tokens), cates=[uniform(3, 0)] * 3)
        target = RewardTarget(iid, ts, 0)
        window = FutureWindow((target,), decay=0.8)
        assert windowed_step_hit(path, window) == step_hit(path, ts)
        assert windowed_category_hit(path, window) == category_hit(path, 0)
        assert windowed_path_hit(path, window, index, 5, 1) == \
            global_path(path, target, index, 5, 1)

    def test_decayed_mean_hand_values(self):
        # (1, 0, 1) with w = 0.8 -> (1 + 0 + 0.64) / 2.44
        assert np.isclose(decayed_mean([1.0, 0.0, 1.0], 0.8), 1.64 / 2.44)
        assert f"{decayed_mean([1.0, 0.0, 1.0], 0.8):.4f}" == "0.6721"
        # (0.5, 1.0) with w = 0.8 -> 1.3 / 1.8
        assert np.isclose(decayed_mean([0.5, 1.0], 0.8), 1.3 / 1.8)
        # (1, 1, 0) with w = 0.8 -> 1.8 / 2.44
        assert np.isclose(decayed_mean([1.0, 1.0, 0.0], 0.8), 1.8 / 2.44)

    def test_unit_decay_is_plain_mean(self):
        vals = [0.25, 0.5, 1.0]
        assert np.isclose(decayed_mean(vals, 1.0), np.mean(vals))

    def test_windowed_step_hand_value(self):
        m = 2
        t_hit = TokenSet([(1, 1), (2, 1)])
        t_miss = TokenSet([(1, 9), (2, 9)])
        path = const_path(m)
        window = FutureWindow((RewardTarget("a", t_hit, 0),
                               RewardTarget("b", t_miss, 0),
                               RewardTarget("c", t_hit, 0)), decay=0.8)
        assert np.isclose(windowed_step_hit(path, window), 1.64 / 2.44)

    def test_scaling_property(self):
        rng = named_stream(4, "scale")
        vals = rng.random(5)
        assert np.isclose(decayed_mean(list(vals * 3.0), 0.7),
                          3.0 * decayed_mean(list(vals), 0.7))

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError, match="empty-window"):
            FutureWindow((), decay=0.8)

    def test_decay_range(self):
        t = RewardTarget("a", TokenSet([(1, 1)]), 0)
        with pytest.raises(ValueError):
            FutureWindow((t,), decay=0.0)
        with pytest.raises(ValueError):
            FutureWindow((t,), decay=1.2)


class TestTotalReward:
    def setup_method(self):
        self.codebooks, self.token_map, self.index = build_index()
        self.iid = "it-002"
        self.ts = self.token_map[self.iid][0]
        self.target = RewardTarget(self.iid, self.ts, 1)
        self.perfect = make_path(list(self.ts.tokens), cates=[uniform(3, 1)] * 3)

    def test_all_components_one_totals_four(self):
        window = FutureWindow((self.target,), decay=0.8)
        br = total_reward(self.perfect, self.target, window, self.index,
                          RewardConfig(top_n=1, drop_budget=0))
        assert br.total == 4.0
        assert (br.step_hit, br.category_hit, br.consistency, br.path_hit) == \
            (1.0, 1.0, 1.0, 1.0)

    def test_only_consistency_enabled(self):
        cfg = RewardConfig(enable_step=False, enable_category=False,
                           enable_path=False, multi_step=False)
        br = total_reward(self.perfect, self.target, None, self.index, cfg)
        assert br.total == br.consistency

    def test_defaults_accepted(self):
        cfg = RewardConfig()
        assert (cfg.horizon, cfg.decay) == (3, 0.8)
        window = FutureWindow((self.target,) * 3, decay=cfg.decay)
        br = total_reward(self.perfect, self.target, window, self.index, cfg)
        assert 0.0 <= br.total <= 4.0
        assert br.windowed_step_hit is not None

    def test_components_bounded(self):
        rng = named_stream(5, "bounds")
        for _ in range(50):
            pairs = [(r, int(rng.integers(1, 5))) for r in range(1, 4)]
            cates = [rng.dirichlet(np.ones(3)) for _ in range(3)]
            path = make_path(pairs, confs=list(rng.random(3) * 0.9 + 0.05), cates=cates)
            window = FutureWindow(tuple(
                RewardTarget(f"it-{int(rng.integers(20)):03d}",
                             TokenSet([(r, int(rng.integers(1, 5))) for r in range(1, 4)]),
                             int(rng.integers(3))) for _ in range(3)), decay=0.8)
            br = total_reward(path, window.items[0], window, self.index, RewardConfig())
            for v in (br.step_hit, br.category_hit, br.consistency, br.path_hit,
                      br.windowed_step_hit, br.windowed_category_hit, br.windowed_path_hit):
                assert 0.0 <= v <= 1.0
            assert 0.0 <= br.total <= 4.0
