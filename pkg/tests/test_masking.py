import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnmask.errors import ConfigError
from attnmask.masking import BetaSchedule, MaskPlan, beta_at, patch_scores, plan_mask


def brute_force_block_means(grid, patch_rows, patch_cols):
    h, w = grid.shape
    ph = math.ceil(h / patch_rows)
    pw = math.ceil(w / patch_cols)
    scores = []
    for pr in range(patch_rows):
        for pc in range(patch_cols):
            total = 0.0
            for dy in range(ph):
                for dx in range(pw):
                    y, x = pr * ph + dy, pc * pw + dx
                    if y < h and x < w:
                        total += grid[y, x]
            scores.append(total / (ph * pw))
    return np.array(scores)


class TestBetaSchedule:
    def test_endpoints_and_midpoint(self):
        sched = BetaSchedule(beta_max=0.8, total_epochs=100)
        assert beta_at(sched, 0) == 0.0
        assert beta_at(sched, 100) == pytest.approx(0.8)
        assert beta_at(sched, 50) == pytest.approx(0.4)

    def test_fractional_epoch(self):
        sched = BetaSchedule(beta_max=0.8, total_epochs=10)
        assert beta_at(sched, 2.5) == pytest.approx(0.2)

    def test_out_of_range_rejected(self):
        sched = BetaSchedule(beta_max=0.8, total_epochs=10)
        with pytest.raises(ValueError):
            beta_at(sched, -1)
        with pytest.raises(ValueError):
            beta_at(sched, 11)

    def test_invalid_schedule(self):
        with pytest.raises(ConfigError):
            BetaSchedule(beta_max=1.5, total_epochs=10)
        with pytest.raises(ConfigError):
            BetaSchedule(beta_max=0.8, total_epochs=0)


class TestPatchScores:
    def test_constant_map_uniform_scores(self):
        scores = patch_scores(np.full((8, 8), 0.37), 4, 4)
        assert np.allclose(scores, 0.37)

    def test_indicator_patch(self):
        m = np.zeros((4, 4))
        m[0:2, 2:4] = 1.0  # exactly patch (0, 1) of a 2x2 grid
        scores = patch_scores(m, 2, 2)
        assert np.allclose(scores, [0.0, 1.0, 0.0, 0.0])

    def test_hand_values_match_brute_force(self):
        rng = np.random.default_rng(0)
        m = rng.random((4, 4))
        assert np.allclose(patch_scores(m, 2, 2), brute_force_block_means(m, 2, 2))

    def test_padding_matches_brute_force(self):
        rng = np.random.default_rng(1)
        m = rng.random((5, 7))
        assert np.allclose(patch_scores(m, 2, 3), brute_force_block_means(m, 2, 3))

    def test_multi_map_fusion_elementwise_max(self):
        a = np.zeros((4, 4))
        b = np.zeros((4, 4))
        a[0, 0] = 1.0
        b[3, 3] = 0.8
        fused = patch_scores([a, b], 2, 2)
        assert np.allclose(fused, brute_force_block_means(np.maximum(a, b), 2, 2))


class TestPlanMask:
    def test_beta_zero_pure_random(self):
        scores = np.random.default_rng(2).random(64)
        plan = plan_mask(scores, beta=0.0, seed=5)
        assert plan.attn_indices == ()
        assert len(plan.random_indices) == plan.masked_total

    def test_vit_scale_counts(self):
        # P=196, ratio 0.75 -> 147 masked; beta 0.8 -> 117 ranked + 30 random
        scores = np.random.default_rng(3).random(196)
        plan = plan_mask(scores, beta=0.8, seed=0)
        assert plan.masked_total == 147
        assert len(plan.attn_indices) == 117
        assert len(plan.random_indices) == 30

    def test_beta_one_matches_full_sort(self):
        rng = np.random.default_rng(4)
        scores = rng.permutation(196).astype(float)  # all distinct
        plan = plan_mask(scores, beta=1.0, seed=0)
        want = set(np.argsort(-scores)[:147].tolist())
        assert set(plan.attn_indices) == want
        assert plan.random_indices == ()

    def test_tie_break_lowest_index(self):
        scores = np.array([0.5, 0.9, 0.5, 0.5, 0.1, 0.5])
        plan = plan_mask(scores, beta=1.0, seed=0, ratio=0.5)
        # masked_total = 3: top score index 1, then tied 0.5s -> lowest indices 0, 2
        assert plan.attn_indices == (0, 1, 2)

    def test_degenerate_ratio_rejected(self):
        scores = np.ones(4)
        with pytest.raises(ConfigError):
            plan_mask(scores, beta=0.5, seed=0, ratio=0.05)  # rounds to 0
        with pytest.raises(ConfigError):
            plan_mask(scores, beta=0.5, seed=0, ratio=0.95)  # rounds to P

    def test_deterministic_given_seed(self):
        scores = np.random.default_rng(5).random(100)
        a = plan_mask(scores, beta=0.4, seed=77)
        b = plan_mask(scores, beta=0.4, seed=77)
        assert a == b

    def test_attn_branch_ignores_seed(self):
        scores = np.random.default_rng(6).random(100)
        a = plan_mask(scores, beta=0.6, seed=1)
        b = plan_mask(scores, beta=0.6, seed=2)
        assert a.attn_indices == b.attn_indices

    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_partition_invariants(self, seed, beta):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(8, 120))
        scores = rng.random(p)
        plan = plan_mask(scores, beta=beta, seed=seed)
        attn, rand = set(plan.attn_indices), set(plan.random_indices)
        assert attn.isdisjoint(rand)
        assert len(attn) + len(rand) == plan.masked_total == int(math.floor(0.75 * p + 0.5))
        assert len(attn) == int(math.floor(beta * plan.masked_total))
        assert all(0 <= i < p for i in attn | rand)

    @given(st.floats(0.01, 100.0), st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_scale_invariance_of_ranked_set(self, lam, seed):
        scores = np.random.default_rng(seed).random(50)
        a = plan_mask(scores, beta=0.7, seed=3)
        b = plan_mask(scores * lam, beta=0.7, seed=3)
        assert a.attn_indices == b.attn_indices

    def test_ranked_count_monotone_over_epochs(self):
        sched = BetaSchedule(beta_max=0.8, total_epochs=20)
        scores = np.random.default_rng(7).random(196)
        counts = [
            len(plan_mask(scores, beta=beta_at(sched, e), seed=0).attn_indices)
            for e in range(21)
        ]
        assert counts == sorted(counts)
        # overall masked total never moves
        totals = {
            plan_mask(scores, beta=beta_at(sched, e), seed=0).masked_total for e in range(21)
        }
        assert totals == {147}

    def test_beta_one_no_score_inversions(self):
        scores = np.random.default_rng(8).random(60)
        plan = plan_mask(scores, beta=1.0, seed=0)
        masked_min = min(scores[i] for i in plan.attn_indices)
        unmasked = [scores[i] for i in range(60) if i not in set(plan.attn_indices)]
        assert all(masked_min >= u for u in unmasked)


class TestMaskPlanJson:
    def test_roundtrip(self):
        scores = np.random.default_rng(9).random(32)
        plan = plan_mask(scores, beta=0.5, seed=4)
        again = MaskPlan.from_json(plan.to_json())
        assert again == plan

    def test_schema_keys(self):
        plan = plan_mask(np.random.default_rng(10).random(16), beta=0.5, seed=4)
        data = json.loads(plan.to_json())
        assert set(data) == {"P", "ratio", "beta", "attn_indices", "random_indices", "seed"}
