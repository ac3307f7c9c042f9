import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hagnn.autodiff import DimensionError
from hagnn.connectome import (BoldMatrix, ConfigError, EdgeRule, FCMatrix, LabelError, build_graph,
                              extract_roi_timeseries, parse_edge_rule, pearson_fc, read_edges_csv,
                              read_fc_csv, read_labels_csv, read_timeseries_csv, write_edges_csv,
                              write_fc_csv, write_labels_csv, write_timeseries_csv)


def brute_force_pearson(x):
    """Double-loop textbook correlation, independent of the vectorised path."""
    t, r = x.shape
    out = np.zeros((r, r))
    for i in range(r):
        for j in range(r):
            mi = sum(x[:, i]) / t
            mj = sum(x[:, j]) / t
            cov = sum((x[k, i] - mi) * (x[k, j] - mj) for k in range(t))
            vi = sum((x[k, i] - mi) ** 2 for k in range(t))
            vj = sum((x[k, j] - mj) ** 2 for k in range(t))
            out[i, j] = cov / math.sqrt(vi * vj)
    return out


def _fc(x):
    return pearson_fc(BoldMatrix(np.asarray(x, dtype=float).T))


# ---------------------------------------------------------------------------
# ROI extraction


def test_two_voxels_average_into_one_roi():
    out = extract_roi_timeseries(BoldMatrix([[1.0, 3.0], [2.0, 4.0]], "voxel"), [0, 0])
    np.testing.assert_array_equal(out.values[:, 0], [2.0, 3.0])
    assert out.channel_kind == "roi"


def test_one_voxel_per_roi_reorders_columns():
    x = np.random.default_rng(0).normal(size=(5, 3))
    out = extract_roi_timeseries(BoldMatrix(x, "voxel"), [2, 0, 1])
    np.testing.assert_array_equal(out.values, x[:, [1, 2, 0]])


def test_constant_voxels_keep_their_value():
    x = np.tile([1.5, 1.5, -2.0, -2.0], (4, 1))
    out = extract_roi_timeseries(BoldMatrix(x, "voxel"), [0, 0, 1, 1])
    np.testing.assert_array_equal(out.values, np.tile([1.5, -2.0], (4, 1)))


def test_empty_roi_is_named():
    with pytest.raises(LabelError, match="ROI 1"):
        extract_roi_timeseries(BoldMatrix(np.ones((4, 2)), "voxel"), [0, 2], n_rois=3)


def test_label_length_mismatch():
    with pytest.raises(DimensionError):
        extract_roi_timeseries(BoldMatrix(np.ones((4, 3)), "voxel"), [0, 1])


# ---------------------------------------------------------------------------
# Pearson FC


def test_self_and_anti_correlation():
    fc = _fc([[1, 2, 3], [-1, -2, -3]])
    assert fc.values[0, 0] == 1.0
    assert fc.values[0, 1] == pytest.approx(-1.0, abs=1e-15)


def test_permuted_ramp_correlation_is_half():
    fc = _fc([[1, 2, 3], [1, 3, 2]])
    assert fc.values[0, 1] == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_matches_double_loop_oracle(seed):
    x = np.random.default_rng(seed).normal(size=(10, 8))
    fc = pearson_fc(BoldMatrix(x))
    np.testing.assert_allclose(fc.values, brute_force_pearson(x), rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 30), st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_fc_invariants(t, r, seed):
    x = np.random.default_rng(seed).normal(size=(t, r))
    v = pearson_fc(BoldMatrix(x)).values
    assert np.array_equal(v, v.T)
    assert np.all(np.diag(v) == 1.0)
    assert np.all(np.abs(v) <= 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_positive_affine_rescaling_invariance(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(20, 6))
    a = rng.uniform(0.1, 10.0, size=6)
    b = rng.uniform(-50.0, 50.0, size=6)
    np.testing.assert_allclose(pearson_fc(BoldMatrix(x * a + b)).values, pearson_fc(BoldMatrix(x)).values,
                               rtol=0, atol=1e-9)


def test_flat_channel_is_flagged_and_zeroed():
    x = np.random.default_rng(1).normal(size=(12, 4))
    x[:, 2] = 3.0
    fc = pearson_fc(BoldMatrix(x))
    assert fc.degenerate_mask.tolist() == [False, False, True, False]
    assert np.all(fc.values[2] == 0.0) and np.all(fc.values[:, 2] == 0.0)
    assert fc.values[0, 0] == 1.0


def test_too_few_timepoints():
    with pytest.raises(ValueError):
        pearson_fc(BoldMatrix(np.ones((2, 3))))


def test_fc_pipeline_is_bit_deterministic():
    rng = np.random.default_rng(2)
    bold = BoldMatrix(rng.normal(size=(30, 12)), "voxel")
    labels = np.repeat(np.arange(4), 3)
    a = pearson_fc(extract_roi_timeseries(bold, labels)).values
    b = pearson_fc(extract_roi_timeseries(bold, labels)).values
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# graphs


def _three_roi():
    v = np.array([[1.0, 0.9, 0.2], [0.9, 1.0, -0.6], [0.2, -0.6, 1.0]])
    return FCMatrix(v, np.zeros(3, dtype=bool))


def test_identity_fc_has_no_edges_above_threshold():
    g = build_graph(FCMatrix(np.eye(5), np.zeros(5, dtype=bool)), EdgeRule("threshold", 0.5))
    assert len(g.edges) == 0


def test_threshold_uses_absolute_correlation():
    g = build_graph(_three_roi(), EdgeRule("threshold", 0.5))
    assert g.edges.tolist() == [[0, 1], [1, 2]]
    np.testing.assert_array_equal(g.edge_weights, [0.9, 0.6])
    np.testing.assert_array_equal(g.node_features, _three_roi().values)


def test_topk_full_is_complete_on_live_nodes():
    x = np.random.default_rng(3).normal(size=(15, 6))
    x[:, 4] = 0.0
    fc = pearson_fc(BoldMatrix(x))
    g = build_graph(fc, EdgeRule("topk", 5))
    live = [0, 1, 2, 3, 5]
    assert sorted(map(tuple, g.edges.tolist())) == list(itertools.combinations(live, 2))


def test_topk_ties_go_to_smaller_index():
    v = np.array([[1.0, 0.5, 0.5, 0.5], [0.5, 1.0, 0.1, 0.1], [0.5, 0.1, 1.0, 0.1], [0.5, 0.1, 0.1, 1.0]])
    g = build_graph(FCMatrix(v, np.zeros(4, dtype=bool)), EdgeRule("topk", 1))
    # node 0 picks 1; nodes 1..3 all pick 0
    assert g.edges.tolist() == [[0, 1], [0, 2], [0, 3]]


@pytest.mark.parametrize("rule", [EdgeRule("topk", 3), EdgeRule("threshold", 0.3)])
@pytest.mark.parametrize("seed", range(5))
def test_edge_set_is_permutation_equivariant(rule, seed):
    rng = np.random.default_rng(seed)
    fc = pearson_fc(BoldMatrix(rng.normal(size=(15, 9))))
    perm = rng.permutation(9)
    permuted = FCMatrix(fc.values[np.ix_(perm, perm)], fc.degenerate_mask[perm])
    g, gp = build_graph(fc, rule), build_graph(permuted, rule)
    relabeled = {tuple(sorted((int(perm[i]), int(perm[j])))) for i, j in gp.edges}
    assert relabeled == set(map(tuple, g.edges.tolist()))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_graph_invariants(seed, k):
    fc = pearson_fc(BoldMatrix(np.random.default_rng(seed).normal(size=(10, 7))))
    g = build_graph(fc, EdgeRule("topk", k))
    pairs = [tuple(e) for e in g.edges.tolist()]
    assert all(i < j for i, j in pairs) and len(set(pairs)) == len(pairs)
    assert np.all((g.edge_weights >= 0) & (g.edge_weights <= 1))
    # every node keeps at least its own k choices
    deg = np.bincount(g.edges.reshape(-1), minlength=7)
    assert np.all(deg >= k)


@pytest.mark.parametrize("rule", [EdgeRule("topk", 0), EdgeRule("topk", 3), EdgeRule("threshold", 1.0),
                                  EdgeRule("threshold", -0.1), EdgeRule("ring", 1)])
def test_bad_rules(rule):
    with pytest.raises(ConfigError):
        build_graph(_three_roi(), rule)


def test_parse_edge_rule():
    assert parse_edge_rule("topk:10") == EdgeRule("topk", 10)
    assert parse_edge_rule("threshold:0.25") == EdgeRule("threshold", 0.25)
    assert str(parse_edge_rule("topk:4")) == "topk:4"
    for bad in ("topk", "knn:3", "topk:x"):
        with pytest.raises(ConfigError):
            parse_edge_rule(bad)


# ---------------------------------------------------------------------------
# files


def test_csv_round_trips(tmp_path):
    rng = np.random.default_rng(5)
    bold = BoldMatrix(rng.normal(size=(6, 3)))
    write_timeseries_csv(tmp_path / "ts.csv", bold)
    assert (tmp_path / "ts.csv").read_text().splitlines()[0] == "t,ch0,ch1,ch2"
    np.testing.assert_array_equal(read_timeseries_csv(tmp_path / "ts.csv").values, bold.values)

    write_labels_csv(tmp_path / "labels.csv", [0, 1, 1])
    assert read_labels_csv(tmp_path / "labels.csv").tolist() == [0, 1, 1]

    x = rng.normal(size=(8, 4))
    x[:, 1] = 0.0
    fc = pearson_fc(BoldMatrix(x))
    write_fc_csv(tmp_path / "fc.csv", fc)
    back = read_fc_csv(tmp_path / "fc.csv")
    assert back.values.tobytes() == fc.values.tobytes()
    assert back.degenerate_mask.tolist() == fc.degenerate_mask.tolist()


def test_bad_timeseries_header(tmp_path):
    (tmp_path / "ts.csv").write_text("time,a,b\n0,1,2\n")
    with pytest.raises(ValueError, match="header"):
        read_timeseries_csv(tmp_path / "ts.csv")


@pytest.mark.parametrize("rule", ["topk:3", "threshold:0.2", "threshold:0.99"])
def test_edges_csv_round_trip(tmp_path, rule):
    fc = pearson_fc(BoldMatrix(np.random.default_rng(4).normal(size=(25, 9))))
    g = build_graph(fc, parse_edge_rule(rule))
    write_edges_csv(tmp_path / "e.csv", g)
    back = read_edges_csv(tmp_path / "e.csv", fc)
    np.testing.assert_array_equal(back.edges, g.edges)
    assert back.edge_weights.tobytes() == g.edge_weights.tobytes()
    np.testing.assert_array_equal(back.node_features, g.node_features)


def test_edges_csv_rejects_out_of_range(tmp_path):
    fc = pearson_fc(BoldMatrix(np.random.default_rng(5).normal(size=(25, 4))))
    (tmp_path / "e.csv").write_text("i,j,weight\n0,4,0.5\n")
    with pytest.raises(ValueError):
        read_edges_csv(tmp_path / "e.csv", fc)
    (tmp_path / "e.csv").write_text("i,j,weight\n2,1,0.5\n")
    with pytest.raises(ValueError):
        read_edges_csv(tmp_path / "e.csv", fc)
