import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from attnmask.contrastive import (
    AugConfig,
    EncoderPair,
    MemoryBank,
    attentive_pool,
    batch_instance_loss,
    cosine_sim,
    ema_update,
    image_level_nce,
    instance_nce_loss,
    make_view_pair,
)
from attnmask.errors import DegenerateMaskError, EmptyBatchError, ShapeError


def t64(arr):
    return torch.as_tensor(np.asarray(arr), dtype=torch.float64)


class TestAttentivePool:
    def test_uniform_mask_is_unweighted_mean(self):
        z = t64(np.random.default_rng(0).normal(size=(4, 5, 3)))
        a = torch.full((4, 5), 0.7, dtype=torch.float64)
        got = attentive_pool(z, a)
        want = z.mean(dim=(0, 1))
        assert torch.allclose(got, want, atol=1e-12)

    def test_one_hot_mask_selects_cell(self):
        z = t64(np.random.default_rng(1).normal(size=(3, 3, 4)))
        a = torch.zeros((3, 3), dtype=torch.float64)
        a[1, 2] = 1.0
        assert torch.equal(attentive_pool(z, a), z[1, 2])

    def test_hand_weighted_mean(self):
        z = t64([[[1.0], [2.0]], [[3.0], [4.0]]])
        a = t64([[1.0, 0.0], [0.0, 3.0]])
        assert float(attentive_pool(z, a)) == pytest.approx(3.25, abs=1e-12)

    def test_zero_mask_rejected(self):
        z = t64(np.ones((2, 2, 3)))
        with pytest.raises(DegenerateMaskError):
            attentive_pool(z, torch.zeros(2, 2, dtype=torch.float64))

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            h, w, c = rng.integers(1, 6, size=3)
            z = rng.normal(size=(h, w, c))
            a = rng.random((h, w)) + 1e-3
            got = attentive_pool(t64(z), t64(a)).numpy()
            want = np.zeros(c)
            for i in range(h):
                for j in range(w):
                    want += a[i, j] * z[i, j]
            want /= a.sum()
            assert np.allclose(got, want, atol=1e-9)

    @given(st.floats(1e-3, 1e3), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_mask_scale_invariance(self, lam, seed):
        rng = np.random.default_rng(seed)
        z = t64(rng.normal(size=(3, 4, 2)))
        a = t64(rng.random((3, 4)) + 0.01)
        assert torch.allclose(attentive_pool(z, a), attentive_pool(z, lam * a), atol=1e-9)


class TestCosineSim:
    def test_self_similarity(self):
        v = t64([1.0, 2.0, 3.0])
        assert cosine_sim(v, v) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_sim(t64([1.0, 0.0]), t64([0.0, 2.0])) == pytest.approx(0.0)

    def test_antiparallel(self):
        v = t64([0.5, -1.0])
        assert cosine_sim(v, -v) == pytest.approx(-1.0)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            cosine_sim(t64([0.0, 0.0]), t64([1.0, 0.0]))


class TestInstanceNceLoss:
    def test_no_negatives_exact_zero(self):
        assert instance_nce_loss(0.37, []) == 0.0

    def test_one_negative_softplus(self):
        got = instance_nce_loss(1.0, [0.0], temperature=1.0)
        assert got == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-9)
        got = instance_nce_loss(0.2, [0.9], temperature=0.5)
        assert got == pytest.approx(math.log(1 + math.exp((0.9 - 0.2) / 0.5)), abs=1e-9)

    def test_k_equal_sims_log_k_plus_one(self):
        for k in (1, 3, 10):
            got = instance_nce_loss(0.4, [0.4] * k, temperature=1.0)
            assert got == pytest.approx(math.log(k + 1), abs=1e-9)

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            instance_nce_loss(0.5, [0.1], temperature=0.0)

    def test_out_of_range_similarity(self):
        with pytest.raises(ValueError):
            instance_nce_loss(1.5, [0.0])

    @given(st.floats(-0.5, 0.5), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_shift_invariance(self, shift, seed):
        rng = np.random.default_rng(seed)
        pos = float(rng.uniform(-0.5, 0.5))
        negs = [float(v) for v in rng.uniform(-0.5, 0.5, size=4)]
        base = instance_nce_loss(pos, negs, temperature=0.7)
        moved = instance_nce_loss(pos + shift, [n + shift for n in negs], temperature=0.7)
        assert moved == pytest.approx(base, abs=1e-9)

    def test_strictly_monotone(self):
        negs = [0.1, -0.2, 0.3]
        assert instance_nce_loss(0.6, negs) < instance_nce_loss(0.5, negs)
        assert instance_nce_loss(0.5, [0.2, 0.3]) > instance_nce_loss(0.5, [0.1, 0.3])


class TestBatchInstanceLoss:
    def test_single_instance_no_bank_is_zero(self):
        f = t64([[0.3, 0.4]])
        assert float(batch_instance_loss(f, f)) == 0.0

    def test_two_orthogonal_same_view_closed_form(self):
        eye = torch.eye(2, dtype=torch.float64)
        got = float(batch_instance_loss(eye, eye, temperature=1.0, negatives="same_view"))
        assert got == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-9)

    def test_two_orthogonal_union_closed_form(self):
        eye = torch.eye(2, dtype=torch.float64)
        got = float(batch_instance_loss(eye, eye, temperature=1.0, negatives="union"))
        # each anchor: pos sim 1, two negatives at 0
        assert got == pytest.approx(math.log(math.e + 2.0) - 1.0, abs=1e-9)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        fa, fb = t64(rng.normal(size=(5, 4))), t64(rng.normal(size=(5, 4)))
        base = float(batch_instance_loss(fa, fb, temperature=0.4))
        perm = torch.tensor([3, 0, 4, 1, 2])
        shuffled = float(batch_instance_loss(fa[perm], fb[perm], temperature=0.4))
        assert shuffled == pytest.approx(base, abs=1e-9)

    def test_empty_batch_rejected(self):
        empty = torch.zeros((0, 4), dtype=torch.float64)
        with pytest.raises(EmptyBatchError):
            batch_instance_loss(empty, empty)

    def test_matches_scalar_nce_composition(self):
        # build explicit similarities and compare against the scalar op
        rng = np.random.default_rng(4)
        fa = t64(rng.normal(size=(3, 6)))
        fb = t64(rng.normal(size=(3, 6)))
        tau = 0.8
        total = []
        for anchors, others in ((fa, fb), (fb, fa)):
            for m in range(3):
                pos = cosine_sim(anchors[m], others[m])
                negs = [cosine_sim(anchors[m], anchors[n]) for n in range(3) if n != m]
                negs += [cosine_sim(anchors[m], others[n]) for n in range(3) if n != m]
                total.append(instance_nce_loss(pos, negs, temperature=tau))
        want = float(np.mean(total))
        got = float(batch_instance_loss(fa, fb, temperature=tau, negatives="union"))
        assert got == pytest.approx(want, abs=1e-9)

    def test_bank_adds_negatives(self):
        rng = np.random.default_rng(5)
        fa, fb = t64(rng.normal(size=(2, 4))), t64(rng.normal(size=(2, 4)))
        bank = MemoryBank(capacity=8, dim=4, dtype=torch.float64)
        rows = t64(rng.normal(size=(4, 4)))
        rows = rows / torch.linalg.vector_norm(rows, dim=1, keepdim=True)
        bank.push(rows)
        with_bank = float(batch_instance_loss(fa, fb, temperature=0.5, bank=bank))
        without = float(batch_instance_loss(fa, fb, temperature=0.5))
        assert with_bank > without

    def test_single_instance_uniform_mask_equals_image_level(self):
        # one instance per image + uniform masks: pooled features are plain
        # means and the instance loss must collapse to standard NT-Xent
        rng = np.random.default_rng(6)
        grids_a = [t64(rng.normal(size=(3, 3, 5))) for _ in range(4)]
        grids_b = [t64(rng.normal(size=(3, 3, 5))) for _ in range(4)]
        uniform = torch.ones(3, 3, dtype=torch.float64)
        fa = torch.stack([attentive_pool(g, uniform) for g in grids_a])
        fb = torch.stack([attentive_pool(g, uniform) for g in grids_b])
        inst = float(batch_instance_loss(fa, fb, temperature=0.3, negatives="union"))
        img = float(image_level_nce(fa, fb, temperature=0.3))
        assert inst == pytest.approx(img, abs=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            m = int(rng.integers(2, 7))
            c = int(rng.integers(2, 9))
            fa = torch.tensor(rng.normal(size=(m, c)), dtype=torch.float64, requires_grad=True)
            fb = torch.tensor(rng.normal(size=(m, c)), dtype=torch.float64, requires_grad=True)
            tau = float(rng.uniform(0.2, 1.5))
            loss = batch_instance_loss(fa, fb, temperature=tau)
            loss.backward()
            for tensor, grad in ((fa, fa.grad), (fb, fb.grad)):
                i = int(rng.integers(0, m))
                j = int(rng.integers(0, c))
                eps = 1e-4
                with torch.no_grad():
                    up = tensor.clone()
                    up[i, j] += eps
                    down = tensor.clone()
                    down[i, j] -= eps
                    if tensor is fa:
                        num = (
                            batch_instance_loss(up, fb, temperature=tau)
                            - batch_instance_loss(down, fb, temperature=tau)
                        ) / (2 * eps)
                    else:
                        num = (
                            batch_instance_loss(fa, up, temperature=tau)
                            - batch_instance_loss(fa, down, temperature=tau)
                        ) / (2 * eps)
                denom = max(abs(float(num)), 1e-8)
                assert abs(float(grad[i, j]) - float(num)) / denom < 1e-3


class TestMemoryBank:
    def unit_rows(self, n, dim=4, seed=0):
        rng = np.random.default_rng(seed)
        rows = t64(rng.normal(size=(n, dim)))
        return rows / torch.linalg.vector_norm(rows, dim=1, keepdim=True)

    def test_under_capacity_preserves_order(self):
        bank = MemoryBank(capacity=8, dim=4, dtype=torch.float64)
        rows = self.unit_rows(5)
        bank.push(rows, tags=list(range(5)))
        assert len(bank) == 5
        assert bank.tags == (0, 1, 2, 3, 4)
        assert torch.allclose(bank.tensor(), rows)

    def test_fifo_eviction(self):
        bank = MemoryBank(capacity=3, dim=4, dtype=torch.float64)
        rows = self.unit_rows(4)
        bank.push(rows, tags=[10, 11, 12, 13])
        assert bank.tags == (11, 12, 13)
        assert torch.allclose(bank.tensor(), rows[1:])

    def test_two_batches_match_reference_queue(self):
        bank = MemoryBank(capacity=6, dim=4, dtype=torch.float64)
        first, second = self.unit_rows(4, seed=1), self.unit_rows(2, seed=2)
        reference = []  # plain list-based FIFO
        for chunk in (first, second):
            for row in chunk:
                reference.append(row)
                if len(reference) > 6:
                    reference.pop(0)
        bank.push(first)
        bank.push(second)
        assert torch.allclose(bank.tensor(), torch.stack(reference))

    def test_non_unit_rows_rejected(self):
        bank = MemoryBank(capacity=3, dim=4)
        with pytest.raises(ValueError):
            bank.push(torch.full((1, 4), 0.9))


class TestEmaUpdate:
    def pair(self, momentum):
        q = torch.nn.Linear(3, 2, bias=False)
        k = torch.nn.Linear(3, 2, bias=False)
        with torch.no_grad():
            q.weight.fill_(4.0)
            k.weight.fill_(2.0)
        return EncoderPair(query=q, key=k, momentum=momentum)

    def test_momentum_one_freezes_key(self):
        pair = self.pair(1.0)
        ema_update(pair)
        assert torch.all(pair.key.weight == 2.0)

    def test_momentum_zero_copies_query(self):
        pair = self.pair(0.0)
        ema_update(pair)
        assert torch.all(pair.key.weight == 4.0)

    def test_midpoint(self):
        pair = self.pair(0.5)
        ema_update(pair)
        assert torch.allclose(pair.key.weight, torch.full((2, 3), 3.0))

    def test_shape_mismatch_rejected(self):
        pair = EncoderPair(query=torch.nn.Linear(3, 2), key=torch.nn.Linear(2, 2), momentum=0.5)
        with pytest.raises(ShapeError):
            ema_update(pair)


class TestMakeViewPair:
    def scene(self):
        image = np.zeros((32, 32, 3), dtype=np.uint8)
        masks = {}
        image[4:12, 4:12] = (200, 60, 60)
        m0 = np.zeros((32, 32))
        m0[4:12, 4:12] = 1.0
        masks[0] = m0
        image[20:28, 20:28] = (60, 60, 200)
        m1 = np.zeros((32, 32))
        m1[20:28, 20:28] = 1.0
        masks[1] = m1
        return image, masks

    def test_full_frame_views_share_everything(self):
        image, masks = self.scene()
        aug = AugConfig(crop_scale=(1.0, 1.0), hflip_prob=0.0, jitter=0.0, out_h=32, out_w=32)
        pair = make_view_pair(image, masks, aug, seed=0)
        assert pair.shared_instances == (0, 1)
        assert np.allclose(pair.view_a.image, image.astype(np.float64) / 255.0, atol=1e-9)
        assert np.allclose(pair.view_a.masks[0], masks[0])

    def test_crop_isolating_one_instance(self):
        image, masks = self.scene()
        from attnmask.contrastive import ViewData, ViewPair  # noqa: F401
        from attnmask.geometry import ViewTransform, mask_present, transform_mask

        t = ViewTransform(0, 0, 16, 16, hflip=False, out_h=16, out_w=16)
        cropped = {iid: transform_mask(m, t) for iid, m in masks.items()}
        present = {iid for iid, m in cropped.items() if mask_present(m)}
        assert present == {0}

    def test_same_seed_identical(self):
        image, masks = self.scene()
        aug = AugConfig(out_h=24, out_w=24)
        a = make_view_pair(image, masks, aug, seed=42)
        b = make_view_pair(image, masks, aug, seed=42)
        assert np.array_equal(a.view_a.image, b.view_a.image)
        assert a.view_a.transform == b.view_a.transform
        assert a.shared_instances == b.shared_instances

    def test_masks_track_geometry_exactly(self):
        image, masks = self.scene()
        aug = AugConfig(crop_scale=(0.5, 0.9), hflip_prob=1.0, jitter=0.0, out_h=24, out_w=24)
        pair = make_view_pair(image, masks, aug, seed=7)
        from attnmask.geometry import transform_mask

        for iid, mask in masks.items():
            assert np.allclose(pair.view_a.masks[iid], transform_mask(mask, pair.view_a.transform))

    def test_all_absent_raises_after_resampling(self):
        image = np.zeros((32, 32, 3), dtype=np.uint8)
        masks = {0: np.zeros((32, 32))}
        aug = AugConfig(out_h=16, out_w=16)
        with pytest.raises(DegenerateMaskError):
            make_view_pair(image, masks, aug, seed=0)
