import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glagcn.errors import ValidationError
from glagcn.skeleton import (PRESETS, AdjacencyStack, adjacency_for, build_skeleton, compute_partitions,
                             flip_permutation, normalize_adjacency)


def chain(n, pairs=()):
    return {"edges": [(i, i + 1) for i in range(n - 1)], "root": 0, "left_right_pairs": list(pairs),
            "reference_pose": [(float(i), 0.0) for i in range(n)]}


@st.composite
def random_trees(draw, max_joints=9):
    n = draw(st.integers(2, max_joints))
    parents = [draw(st.integers(0, i - 1)) for i in range(1, n)]
    ref = draw(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=n, max_size=n))
    return build_skeleton({"edges": [(p, i + 1) for i, p in enumerate(parents)], "root": 0,
                           "reference_pose": ref})


@pytest.mark.parametrize("name", PRESETS)
def test_presets_are_valid_trees(name):
    g = build_skeleton(name)
    assert len(g.edges) == g.joint_count - 1
    assert g.parents()[g.root] == -1
    assert sorted(g.topological_order()) == list(range(g.joint_count))
    assert g.rest_pose.shape == (g.joint_count, 3)


def test_h36m_parent_table():
    g = build_skeleton("h36m17")
    assert g.parents() == [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15]


def test_unknown_preset_rejected():
    with pytest.raises(ValidationError, match="unknown skeleton preset"):
        build_skeleton("mpii")


@pytest.mark.parametrize("patch, field", [
    ({"edges": [(0, 1), (1, 2)]}, "edges"),          # too few edges for 4 joints
    ({"edges": [(0, 1), (1, 2), (2, 9)]}, "edges"),  # out of range
    ({"edges": [(0, 1), (1, 0), (2, 3)]}, "edges"),  # disconnected / cycle
    ({"root": 7}, "root"),
    ({"left_right_pairs": [(0, 1)]}, "left_right_pairs"),
    ({"left_right_pairs": [(1, 1)]}, "left_right_pairs"),
    ({"joint_names": ["a"]}, "joint_names"),
    ({"joint_count": 4, "reference_pose": [(0.0, 0.0)]}, "reference_pose"),
    ({"reference_pose": [(0.0, 0.0), (1.0, 0.0), (2.0, np.nan), (3.0, 0.0)]}, "reference_pose"),
])
def test_invalid_definitions_name_the_field(patch, field):
    d = chain(4)
    d.update(patch)
    with pytest.raises(ValidationError, match=field):
        build_skeleton(d)


def test_to_dict_round_trip():
    g = build_skeleton("humaneva15")
    again = build_skeleton(g.to_dict())
    assert again.edges == g.edges and again.left_right_pairs == g.left_right_pairs
    np.testing.assert_array_equal(again.reference_pose, g.reference_pose)


def test_two_joint_normalization_example():
    raw = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    norm = normalize_adjacency(AdjacencyStack(raw=raw, alpha=0.001)).normalized[0]
    np.testing.assert_allclose(norm, [[0, 1 / 1.001], [1 / 1.001, 0]], rtol=1e-12)
    assert abs(norm[0, 1] - 0.999001) < 1e-6


def test_identity_normalization_example():
    norm = normalize_adjacency(AdjacencyStack(raw=np.eye(3)[None], alpha=0.001)).normalized[0]
    np.testing.assert_allclose(norm, np.eye(3) / 1.001, rtol=1e-12)


def test_empty_row_stays_finite():
    raw = np.array([[[0.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.0, 1.0, 1.0]]])
    norm = normalize_adjacency(AdjacencyStack(raw=raw, alpha=0.001)).normalized[0]
    assert np.all(np.isfinite(norm))
    assert not norm[0].any() and not norm[:, 0].any()


def test_partition_direction_on_a_chain():
    # joints on a line at x = 0..4, gravity centre at x = 2
    g = build_skeleton(chain(5))
    raw = compute_partitions(g).raw
    assert raw[1, 0, 1] == 1  # joint 1 is nearer the centre than joint 0
    assert raw[2, 1, 0] == 1
    assert raw[1, 4, 3] == 1 and raw[2, 3, 4] == 1


def test_equal_distance_neighbours_go_to_self_subset():
    g = build_skeleton({"edges": [(0, 1)], "root": 0, "reference_pose": [(-1.0, 0.0), (1.0, 0.0)]})
    raw = compute_partitions(g).raw
    assert raw[0, 0, 1] == 1 and raw[0, 1, 0] == 1
    assert not raw[1].any() and not raw[2].any()


def test_only_three_subsets_supported():
    with pytest.raises(ValidationError, match="kernel size"):
        compute_partitions(build_skeleton("h36m17"), kernel_size=2)


@settings(max_examples=60, deadline=None)
@given(random_trees())
def test_partition_invariants(g):
    stack = adjacency_for(g)
    total = stack.raw.sum(axis=0)
    assert set(np.unique(total)) <= {0.0, 1.0}
    assert np.all(np.diag(stack.raw[0]) == 1)
    # partition covers exactly the tree neighbourhood plus self-loops
    np.testing.assert_array_equal(total, g.tree_adjacency(self_loops=True))
    norm = stack.normalized
    assert np.all(norm >= 0)
    assert np.all((norm == 0) == (stack.raw == 0))
    assert np.all(np.isfinite(norm))
    # entrywise oracle: a_ij / sqrt((d_i + alpha)(d_j + alpha)) with d the row degree
    for k in range(3):
        deg = stack.raw[k].sum(axis=1) + stack.alpha
        for i in range(g.joint_count):
            for j in range(g.joint_count):
                expect = stack.raw[k, i, j] / np.sqrt(deg[i] * deg[j])
                assert abs(norm[k, i, j] - expect) <= 1e-12 * max(1.0, expect)
    # the self subset is symmetric, so its spectrum is bounded by one
    assert np.linalg.eigvalsh(norm[0]).max() < 1.0

def test_flip_permutation_example():
    d = chain(6, pairs=[(1, 4), (2, 5)])
    assert flip_permutation(build_skeleton(d)).tolist() == [0, 4, 5, 3, 1, 2]


def test_flip_without_pairs_is_identity():
    assert flip_permutation(build_skeleton(chain(4))).tolist() == [0, 1, 2, 3]


@pytest.mark.parametrize("name", PRESETS)
def test_flip_is_involution_fixing_root(name):
    g = build_skeleton(name)
    p = flip_permutation(g)
    np.testing.assert_array_equal(p[p], np.arange(g.joint_count))
    assert p[g.root] == g.root


@pytest.mark.parametrize("name", PRESETS)
def test_flip_pairs_are_mirror_images_in_rest_pose(name):
    g = build_skeleton(name)
    mirrored = g.rest_pose[flip_permutation(g)] * np.array([-1.0, 1.0, 1.0])
    np.testing.assert_allclose(mirrored, g.rest_pose)
