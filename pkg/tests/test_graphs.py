"""Graph construction, feature scaling, and JSONL dataset round-trips."""

from collections import deque

import numpy as np
import pytest

from lesionuq.errors import FormatError, InputError
from lesionuq.graphs import (
    LesionGraph,
    adjacency_edges,
    apply_scaler,
    build_graph,
    feature_names,
    fit_scaler,
    read_graph_dataset,
    write_graph_dataset,
)
from lesionuq.lesions import Lesion, connected_components_26, lesions_from_labeling
from lesionuq.maps import UncertaintyMaps
from lesionuq.volume import Dims, LabelVolume, Volume


def make_maps(dims, entropy=None, variance=None, pcs=None, fill=0.0):
    n = dims.n_voxels

    def vol(data):
        return Volume(dims, np.full(n, fill) if data is None else data)

    return UncertaintyMaps(
        mean_prob=vol(None), entropy=vol(entropy), variance=vol(variance), pcs_uncertainty=vol(pcs)
    )


def graph_components(g: LesionGraph) -> int:
    adj = {i: [] for i in range(g.n_nodes)}
    for i, j in g.edges:
        adj[int(i)].append(int(j))
        adj[int(j)].append(int(i))
    seen, comps = set(), 0
    for start in range(g.n_nodes):
        if start in seen:
            continue
        comps += 1
        queue = deque([start])
        seen.add(start)
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    queue.append(w)
    return comps


class TestBuildGraph:
    def test_single_voxel_dilated(self):
        dims = Dims(5, 5, 5)
        seg = np.zeros(dims.shape3d, dtype=np.int32)
        seg[2, 2, 2] = 1
        lesion = Lesion(id=1, voxels=np.array([[2, 2, 2]], dtype=np.int32), size=1)
        g = build_graph(
            lesion,
            [Volume(dims, np.zeros(dims.n_voxels))],
            LabelVolume.from_array(seg),
            make_maps(dims),
            dilation_iters=1,
        )
        assert g.n_nodes == 27
        assert g.n_features == 5
        degree = np.bincount(g.edges.reshape(-1), minlength=27)
        center = 13  # middle of the sorted 3x3x3 block
        assert degree[center] == 26
        # adjacent ordered pairs in a 3^3 block: sum over the 26 offsets of
        # (3-|dx|)(3-|dy|)(3-|dz|) = 7^3 - 27 = 316, i.e. 158 undirected
        assert g.edges.shape[0] == 158
        corner = 0
        assert degree[corner] == 7  # its 2x2x2 sub-block minus itself

    def test_no_dilation_face_pair(self):
        dims = Dims(4, 4, 4)
        seg = np.zeros(dims.shape3d, dtype=np.int32)
        seg[0, 0, 0] = 1
        seg[0, 0, 1] = 1
        lesion = Lesion(id=1, voxels=np.array([[0, 0, 0], [1, 0, 0]], dtype=np.int32), size=2)
        g = build_graph(lesion, [], LabelVolume.from_array(seg), make_maps(dims), 0)
        assert g.n_nodes == 2
        assert g.edges.tolist() == [[0, 1]]
        assert g.n_features == 4  # zero intensity channels

    def test_label_column_marks_core_only(self):
        dims = Dims(5, 5, 5)
        seg = np.zeros(dims.shape3d, dtype=np.int32)
        seg[2, 2, 2] = 1
        lesion = Lesion(id=1, voxels=np.array([[2, 2, 2]], dtype=np.int32), size=1)
        g = build_graph(lesion, [], LabelVolume.from_array(seg), make_maps(dims), 1)
        label_col = g.node_features[:, 0]
        assert label_col.sum() == 1.0
        assert label_col[13] == 1.0

    def test_sibling_component_in_ring_reads_zero(self):
        # with 2 dilation rounds the ring covers a voxel of component 2;
        # the label column must stay 0 there (it marks this lesion only)
        dims = Dims(7, 3, 3)
        mask = np.zeros(dims.shape3d, dtype=np.int32)
        mask[1, 1, 1] = 1
        mask[1, 1, 3] = 1  # gap of 1: separate 26-components
        labeling = connected_components_26(LabelVolume.from_array(mask))
        assert labeling.count == 2
        lesion = lesions_from_labeling(labeling)[0]
        g = build_graph(lesion, [], labeling.labels, make_maps(dims), 2)
        from lesionuq.lesions import dilate_26
        from lesionuq.volume import to_linear

        nodes = dilate_26(lesion.voxels, dims, 2)
        lin = to_linear(nodes[:, 0], nodes[:, 1], nodes[:, 2], dims)
        sibling_idx = np.nonzero(lin == to_linear(3, 1, 1, dims))[0]
        assert sibling_idx.size == 1
        assert g.node_features[sibling_idx[0], 0] == 0.0
        assert g.node_features[:, 0].sum() == 1.0

    def test_feature_column_order(self):
        dims = Dims(3, 3, 3)
        n = dims.n_voxels
        intensity = Volume(dims, np.full(n, 7.0))
        maps = make_maps(
            dims,
            entropy=np.full(n, 0.25),
            variance=np.full(n, 0.0625),
            pcs=np.full(n, 0.5),
        )
        seg = np.zeros(dims.shape3d, dtype=np.int32)
        seg[1, 1, 1] = 1
        lesion = Lesion(id=1, voxels=np.array([[1, 1, 1]], dtype=np.int32), size=1)
        g = build_graph(lesion, [intensity], LabelVolume.from_array(seg), maps, 0)
        assert g.node_features.tolist() == [[7.0, 1.0, 0.25, 0.0625, 0.5]]
        assert feature_names(1) == ["intensity_0", "label", "entropy", "variance", "pcs_uncertainty"]

    def test_connectivity_preserved(self):
        rng = np.random.default_rng(4)
        dims = Dims(10, 10, 10)
        mask = np.zeros(dims.shape3d, dtype=np.int32)
        mask[2:5, 2:5, 2:5] = (rng.random((3, 3, 3)) < 0.7).astype(np.int32)
        mask[3, 3, 3] = 1
        labeling = connected_components_26(LabelVolume.from_array(mask))
        for lesion in lesions_from_labeling(labeling):
            g = build_graph(lesion, [], labeling.labels, make_maps(dims), 1)
            assert graph_components(g) == 1
            assert g.n_nodes >= lesion.size
            assert np.all(np.isfinite(g.node_features))

    def test_edges_symmetric_free_of_self_loops(self):
        dims = Dims(6, 6, 6)
        vox = np.array([[1, 1, 1], [2, 1, 1], [2, 2, 1]], dtype=np.int64)
        edges = adjacency_edges(vox, dims)
        assert np.all(edges[:, 0] < edges[:, 1])
        assert len({tuple(e) for e in edges.tolist()}) == edges.shape[0]


class TestScaler:
    def g(self, feats):
        return LesionGraph(
            node_features=np.asarray(feats, dtype=float),
            edges=np.zeros((0, 2), dtype=np.int32),
            iou_adj=0.0,
            tp=False,
            lesion_id=1,
            scan_id="s",
        )

    def test_zscore_two_values(self):
        graphs = [self.g([[0.0]]), self.g([[2.0]])]
        sc = fit_scaler(graphs)
        scaled = [apply_scaler(g, sc).node_features[0, 0] for g in graphs]
        assert scaled == [-1.0, 1.0]

    def test_constant_column_unchanged(self):
        graphs = [self.g([[3.0, 1.0]]), self.g([[3.0, 2.0]])]
        sc = fit_scaler(graphs)
        out = apply_scaler(graphs[0], sc).node_features
        assert out[0, 0] == 0.0  # centered but not divided by 0
        assert sc.std[0] == 1.0

    def test_pool_statistics(self):
        rng = np.random.default_rng(0)
        graphs = [self.g(rng.normal(2.0, 3.0, size=(rng.integers(2, 9), 4))) for _ in range(10)]
        sc = fit_scaler(graphs)
        pooled = np.concatenate([apply_scaler(g, sc).node_features for g in graphs])
        assert np.all(np.abs(pooled.mean(axis=0)) < 1e-9)
        assert np.allclose(pooled.std(axis=0), 1.0)

    def test_not_idempotent(self):
        graphs = [self.g([[0.0]]), self.g([[2.0]])]
        sc = fit_scaler(graphs)
        once = apply_scaler(graphs[1], sc).node_features
        twice = apply_scaler(apply_scaler(graphs[1], sc), sc).node_features
        assert not np.array_equal(once, twice)

    def test_empty_pool_rejected(self):
        with pytest.raises(InputError):
            fit_scaler([])


class TestDatasetIO:
    def random_graph(self, rng, scan="s"):
        n = int(rng.integers(1, 9))
        feats = rng.normal(size=(n, 5))
        edges = (
            np.array([[i, i + 1] for i in range(n - 1)], dtype=np.int32)
            if n > 1
            else np.zeros((0, 2), dtype=np.int32)
        )
        return LesionGraph(
            node_features=feats,
            edges=edges,
            iou_adj=float(rng.uniform()),
            tp=bool(rng.random() < 0.5),
            lesion_id=int(rng.integers(1, 99)),
            scan_id=scan,
        )

    def test_empty_dataset(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        write_graph_dataset([], p)
        assert p.stat().st_size == 0
        assert read_graph_dataset(p) == []

    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        graphs = [self.random_graph(rng, scan=f"scan_{i % 3}") for i in range(100)]
        p = tmp_path / "d.jsonl"
        write_graph_dataset(graphs, p)
        back = read_graph_dataset(p)
        assert len(back) == 100
        for a, b in zip(graphs, back):
            assert np.array_equal(a.node_features, b.node_features)
            assert np.array_equal(a.edges, b.edges)
            assert a.iou_adj == b.iou_adj
            assert a.tp == b.tp
            assert (a.lesion_id, a.scan_id) == (b.lesion_id, b.scan_id)

    def test_header_line(self, tmp_path):
        import json

        rng = np.random.default_rng(1)
        p = tmp_path / "h.jsonl"
        write_graph_dataset([self.random_graph(rng)], p)
        header = json.loads(p.read_text().splitlines()[0])
        assert header["format_version"] == 1
        assert header["n_channels"] == 1
        assert header["feature_names"][-1] == "pcs_uncertainty"

    def test_missing_key_reports_line(self, tmp_path):
        import json

        rng = np.random.default_rng(2)
        p = tmp_path / "m.jsonl"
        write_graph_dataset([self.random_graph(rng), self.random_graph(rng)], p)
        lines = p.read_text().splitlines()
        rec = json.loads(lines[2])
        del rec["edges"]
        lines[2] = json.dumps(rec)
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(FormatError, match="line 3.*edges"):
            read_graph_dataset(p)

    def test_malformed_json_reports_line(self, tmp_path):
        rng = np.random.default_rng(3)
        p = tmp_path / "mj.jsonl"
        write_graph_dataset([self.random_graph(rng)], p)
        with open(p, "a") as f:
            f.write("{not json\n")
        with pytest.raises(FormatError, match="line 3"):
            read_graph_dataset(p)
