"""CCA against a brute-force BFS oracle, IoU matching, Dice, dilation."""

from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionuq.errors import InputError
from lesionuq.lesions import (
    ComponentLabeling,
    Lesion,
    adjusted_iou,
    connected_components_26,
    dice,
    dilate_26,
    label_tp_fp,
    lesions_from_labeling,
)
from lesionuq.volume import Dims, LabelVolume, to_linear

OFFSETS26 = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]


def bfs_partition(mask3d):
    """Independent flood-fill oracle: set of frozensets of (z,y,x)."""
    nz, ny, nx = mask3d.shape
    seen = np.zeros_like(mask3d, dtype=bool)
    parts = []
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not mask3d[z, y, x] or seen[z, y, x]:
                    continue
                comp = []
                queue = deque([(z, y, x)])
                seen[z, y, x] = True
                while queue:
                    cz, cy, cx = queue.popleft()
                    comp.append((cz, cy, cx))
                    for dx, dy, dz in OFFSETS26:
                        wz, wy, wx = cz + dz, cy + dy, cx + dx
                        if 0 <= wz < nz and 0 <= wy < ny and 0 <= wx < nx:
                            if mask3d[wz, wy, wx] and not seen[wz, wy, wx]:
                                seen[wz, wy, wx] = True
                                queue.append((wz, wy, wx))
                parts.append(frozenset(comp))
    return set(parts)


def labeling_partition(labeling):
    arr = labeling.labels.as_3d()
    return {
        frozenset(map(tuple, np.argwhere(arr == k))) for k in range(1, labeling.count + 1)
    }


class TestCCA:
    def test_corner_adjacency_is_one_component(self):
        m = np.zeros((3, 3, 3), dtype=np.int32)
        m[0, 0, 0] = 1
        m[1, 1, 1] = 1
        assert connected_components_26(LabelVolume.from_array(m)).count == 1

    def test_gap_of_two_is_two_components(self):
        m = np.zeros((3, 3, 3), dtype=np.int32)
        m[0, 0, 0] = 1
        m[2, 0, 0] = 1  # (x,y,z) = (0,0,0) and (0,0,2)
        assert connected_components_26(LabelVolume.from_array(m)).count == 2

    def test_rejects_non_binary(self):
        m = np.zeros((2, 2, 2), dtype=np.int32)
        m[0, 0, 0] = 1
        m[0, 0, 1] = 2
        with pytest.raises(InputError):
            connected_components_26(LabelVolume.from_array(m))

    def test_matches_bfs_oracle_on_random_masks(self):
        rng = np.random.default_rng(12345)
        for trial in range(50):
            density = rng.uniform(0.05, 0.6)
            m = (rng.random((16, 16, 16)) < density).astype(np.int32)
            labeling = connected_components_26(LabelVolume.from_array(m))
            assert labeling_partition(labeling) == bfs_partition(m), f"trial {trial}"

    def test_labels_dense_and_ordered_by_first_voxel(self):
        rng = np.random.default_rng(7)
        m = (rng.random((12, 12, 12)) < 0.2).astype(np.int32)
        labeling = connected_components_26(LabelVolume.from_array(m))
        flat = labeling.labels.data
        ids = np.unique(flat[flat > 0])
        assert ids.tolist() == list(range(1, labeling.count + 1))
        firsts = [int(np.nonzero(flat == k)[0][0]) for k in ids]
        assert firsts == sorted(firsts)


class TestAdjustedIoU:
    def make_labeling(self, arr):
        return ComponentLabeling(LabelVolume.from_array(arr), int(arr.max()))

    def setup_method(self):
        self.dims = (4, 4, 4)

    def test_equals_plain_iou_without_siblings(self):
        pred = np.zeros(self.dims, dtype=np.int32)
        gt = np.zeros(self.dims, dtype=np.int32)
        pred[0, 0:2, :] = 1
        pred[0, 2, 0:2] = 1  # one 10-voxel component
        gt[0, 1:3, :] = 1
        gt[0, 3, 0:2] = 1  # one 10-voxel blob
        pred_cl, gt_cl = self.make_labeling(pred), self.make_labeling(gt)
        lesion = lesions_from_labeling(pred_cl)[0]
        inter = int(np.count_nonzero((pred > 0) & (gt > 0)))
        union = int(np.count_nonzero((pred > 0) | (gt > 0)))
        assert adjusted_iou(lesion, pred_cl, gt_cl) == pytest.approx(inter / union)

    def test_spec_fraction_with_sibling(self):
        # k covers 5 of a 10-voxel GT blob; a sibling covers the other 5.
        pred = np.zeros((1, 2, 10), dtype=np.int32)
        gt = np.zeros((1, 2, 10), dtype=np.int32)
        gt[0, 0, :10] = 1
        pred[0, 0, :5] = 1  # k: 5 GT voxels
        pred[0, 0, 5:10] = 0
        pred[0, 1, :5] = 1  # k extends outside GT: total size 10
        sibling = np.zeros_like(pred)
        pred_cl = self.make_labeling(pred)
        k = lesions_from_labeling(pred_cl)[0]
        gt_cl = self.make_labeling(gt)
        # without sibling: inter 5, union = 10 + 5 = 15
        assert adjusted_iou(k, pred_cl, gt_cl) == pytest.approx(5 / 15)
        # with a sibling claiming the remaining 5 GT voxels: union shrinks to 10
        pred2 = pred.copy()
        pred2[0, 0, 5:10] = 2
        pred2_cl = ComponentLabeling(LabelVolume.from_array(pred2), 2)
        assert adjusted_iou(k, pred2_cl, gt_cl) == pytest.approx(5 / 10)

    def test_disjoint_is_zero(self):
        pred = np.zeros((2, 2, 2), dtype=np.int32)
        gt = np.zeros((2, 2, 2), dtype=np.int32)
        pred[0, 0, 0] = 1
        gt[1, 1, 1] = 1
        pred_cl, gt_cl = self.make_labeling(pred), self.make_labeling(gt)
        assert adjusted_iou(lesions_from_labeling(pred_cl)[0], pred_cl, gt_cl) == 0.0

    def test_adjusted_never_below_plain_iou(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            pred = (rng.random((8, 8, 8)) < 0.25).astype(np.int32)
            gt = (rng.random((8, 8, 8)) < 0.25).astype(np.int32)
            pred_cl = connected_components_26(LabelVolume.from_array(pred))
            gt_cl = connected_components_26(LabelVolume.from_array(gt))
            gt_any = gt_cl.labels.data > 0
            for lesion in lesions_from_labeling(pred_cl):
                k_mask = pred_cl.labels.data == lesion.id
                touched = np.unique(gt_cl.labels.data[k_mask])
                touched = touched[touched > 0]
                g_mask = np.isin(gt_cl.labels.data, touched)
                inter = np.count_nonzero(k_mask & g_mask)
                union = np.count_nonzero(k_mask | g_mask)
                plain = inter / union if union else 0.0
                adj = adjusted_iou(lesion, pred_cl, gt_cl)
                assert adj >= plain - 1e-15
                assert 0.0 <= adj <= 1.0


class TestLabelTpFp:
    def lesion(self, iou):
        return Lesion(id=1, voxels=np.array([[0, 0, 0]], dtype=np.int32), size=1, iou_adj=iou)

    def test_below_epsilon_is_fp(self):
        assert label_tp_fp([self.lesion(0.05)], 0.1)[0].tp is False

    def test_boundary_inclusive(self):
        assert label_tp_fp([self.lesion(0.10)], 0.1)[0].tp is True

    def test_high_iou_is_tp(self):
        assert label_tp_fp([self.lesion(0.9)], 0.1)[0].tp is True

    def test_epsilon_range(self):
        with pytest.raises(InputError):
            label_tp_fp([self.lesion(0.5)], 1.0)


class TestDice:
    def vol(self, arr):
        return LabelVolume.from_array(np.asarray(arr, dtype=np.int32))

    def test_identical(self):
        m = np.zeros((2, 2, 2), dtype=np.int32)
        m[0, 0, 0] = 1
        assert dice(self.vol(m), self.vol(m)) == 1.0

    def test_disjoint(self):
        a = np.zeros((2, 2, 2), dtype=np.int32)
        b = np.zeros((2, 2, 2), dtype=np.int32)
        a[0, 0, 0] = 1
        b[1, 1, 1] = 1
        assert dice(self.vol(a), self.vol(b)) == 0.0

    def test_half_overlap(self):
        a = np.zeros((1, 1, 4), dtype=np.int32)
        b = np.zeros((1, 1, 4), dtype=np.int32)
        a[0, 0, 0:2] = 1
        b[0, 0, 1:3] = 1
        assert dice(self.vol(a), self.vol(b)) == 0.5

    def test_both_empty(self):
        z = self.vol(np.zeros((2, 2, 2), dtype=np.int32))
        assert dice(z, z) == 1.0


class TestDilate:
    def test_interior_voxel_gives_27(self):
        out = dilate_26(np.array([[1, 1, 1]]), Dims(3, 3, 3), 1)
        assert out.shape[0] == 27

    def test_corner_voxel_clipped_to_8(self):
        out = dilate_26(np.array([[0, 0, 0]]), Dims(3, 3, 3), 1)
        assert out.shape[0] == 8

    def test_zero_iterations_identity(self):
        vox = np.array([[2, 1, 0], [0, 0, 0]])
        out = dilate_26(vox, Dims(3, 3, 3), 0)
        assert sorted(map(tuple, out)) == sorted(map(tuple, vox))

    def test_monotone(self):
        rng = np.random.default_rng(5)
        vox = np.unique(rng.integers(0, 6, size=(10, 3)), axis=0)
        dims = Dims(6, 6, 6)
        out = dilate_26(vox, dims, 1)
        assert set(map(tuple, vox)) <= set(map(tuple, out))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_composition(self, seed):
        rng = np.random.default_rng(seed)
        vox = np.unique(rng.integers(0, 8, size=(6, 3)), axis=0)
        dims = Dims(8, 8, 8)
        twice = dilate_26(dilate_26(vox, dims, 1), dims, 1)
        once2 = dilate_26(vox, dims, 2)
        assert np.array_equal(twice, once2)

    def test_sorted_by_linear_index(self):
        dims = Dims(5, 5, 5)
        out = dilate_26(np.array([[2, 2, 2]]), dims, 1)
        lin = to_linear(out[:, 0], out[:, 1], out[:, 2], dims)
        assert np.all(np.diff(lin) > 0)
