import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semloc import vocab_index as vi
from semloc.semantic_words import bag_of_words


@pytest.fixture(scope="module")
def blobs():
    rng = np.random.default_rng(0)
    centers = rng.standard_normal((24, 16)) * 4
    return (centers[rng.integers(24, size=1500)] + rng.standard_normal((1500, 16))).astype(np.float32)


@pytest.fixture(scope="module")
def vocab(blobs):
    tree = vi.train_vocabulary(blobs, b=4, d=2, seed=1)
    emb = vi.train_hamming(tree, blobs, n_bits=16, seed=2)
    return tree, emb


@pytest.fixture(scope="module")
def index(vocab, blobs):
    tree, emb = vocab
    return vi.build_index(tree, emb, blobs[:600])


# --------------------------------------------------------------------------- k-means and tree


def test_separated_points_are_their_own_centroids():
    pts = np.eye(5) * 10
    res = vi.kmeans(pts, 5, np.random.default_rng(0))
    assert sorted(map(tuple, res.centroids)) == sorted(map(tuple, pts))
    tree = vi.train_vocabulary(pts, b=5, d=1, seed=3)
    assert sorted(map(tuple, tree.levels[0])) == sorted(map(tuple, pts))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_lloyd_objective_non_increasing(seed, k):
    x = np.random.default_rng(seed).standard_normal((60, 3))
    obj = vi.kmeans(x, k, np.random.default_rng(seed)).objective
    assert all(b <= a + 1e-9 for a, b in zip(obj, obj[1:]))


def test_tree_objectives_monotone(vocab):
    tree, _ = vocab
    assert len(tree.objectives) == 1 + 4
    for obj in tree.objectives:
        assert all(b <= a + 1e-9 for a, b in zip(obj, obj[1:]))


def test_too_few_points_rejected():
    with pytest.raises(ValueError):
        vi.train_vocabulary(np.zeros((3, 4)), b=4, d=1)


def test_sparse_nodes_are_padded():
    x = np.arange(10, dtype=float)[:, None] * np.ones((1, 2))
    tree = vi.train_vocabulary(x, b=4, d=3, seed=0)
    assert tree.padded_nodes > 0
    assert all(np.isfinite(l).all() for l in tree.levels)
    assert tree.levels[-1].shape == (64, 2)


def test_tree_shape(vocab):
    tree, _ = vocab
    assert tree.n_leaves == 16
    assert [l.shape for l in tree.levels] == [(4, 16), (16, 16)]


def test_quantize_matches_levelwise_oracle(vocab, blobs):
    tree, _ = vocab
    leaves, path = vi.quantize(tree, blobs[:200], return_path=True)
    for n, x in enumerate(blobs[:200].astype(np.float64)):
        node = 0
        for level in range(tree.depth):
            best, best_d = None, np.inf
            for j in range(tree.branching):
                child = node * tree.branching + j
                d = float(((tree.levels[level][child] - x) ** 2).sum())
                if d < best_d:
                    best, best_d = child, d
            node = best
            assert path[level][n] == node
        assert leaves[n] == node


def test_centroid_chain_reaches_its_leaf(vocab):
    tree, _ = vocab
    for leaf in range(tree.n_leaves):
        if vi.quantize(tree, tree.levels[-1][leaf]) != leaf:
            # only possible when duplicated centroids tie; the lowest index wins
            dup = np.flatnonzero((tree.levels[-1] == tree.levels[-1][leaf]).all(1))
            assert vi.quantize(tree, tree.levels[-1][leaf]) == dup[0]


def test_greedy_descent_mostly_agrees_with_flat_search(loop_map, quick_net):
    x = bag_of_words(loop_map, quick_net, 16, 4).descriptors
    tree = vi.train_vocabulary(x, b=8, d=2, seed=0)
    agree = (vi.quantize(tree, x) == vi.flat_nearest_leaf(tree, x)).mean()
    assert agree >= 0.9


def test_training_deterministic(tmp_path, blobs):
    paths = []
    for i in range(2):
        tree = vi.train_vocabulary(blobs, b=4, d=2, seed=1)
        emb = vi.train_hamming(tree, blobs, n_bits=16, seed=2)
        idx = vi.build_index(tree, emb, blobs[:300])
        for kind, save in (("t", vi.save_tree), ("h", vi.save_embedding)):
            save(tree if kind == "t" else emb, tmp_path / f"{kind}{i}")
        vi.save_index(idx, tmp_path / f"i{i}")
        paths.append(i)
    for kind in "thi":
        assert (tmp_path / f"{kind}0").read_bytes() == (tmp_path / f"{kind}1").read_bytes()


# --------------------------------------------------------------------------- hamming embedding


def test_projection_rows_orthonormal(vocab):
    _, emb = vocab
    np.testing.assert_allclose(emb.projection @ emb.projection.T, np.eye(16), atol=1e-9)
    assert np.isfinite(emb.thresholds).all()


def test_single_member_leaf_is_all_ones():
    tree = vi.train_vocabulary(np.eye(4) * 5, b=4, d=1, seed=0)
    emb = vi.train_hamming(tree, np.eye(4) * 5, n_bits=4, seed=0)
    for row in np.eye(4) * 5:
        leaf = vi.quantize(tree, row)
        assert vi.signature(emb, leaf, row) == 0b1111


def test_two_member_leaf_signatures_are_complementary():
    x = np.array([[0.0, 0.0, 0.0], [1.0, -2.0, 0.5]])
    tree = vi.train_vocabulary(x, b=1, d=1, seed=0)
    emb = vi.train_hamming(tree, x, n_bits=3, seed=4)
    z = x @ emb.projection.T
    a, b = vi.signature(emb, 0, x[0]), vi.signature(emb, 0, x[1])
    differ = int(np.sum(z[0] != z[1]))
    assert vi.hamming(a, b) == differ


def test_stored_signatures_match_recomputation(index, blobs):
    emb = index.embedding
    for leaf in range(index.tree.n_leaves):
        ids, sigs = index.postings(leaf)
        for i, s in zip(ids, sigs):
            x = blobs[i].astype(np.float64)
            for k in range(emb.n_bits):
                z = sum(float(p) * float(v) for p, v in zip(emb.projection[k], x))
                # a leaf median can coincide with a member's own projection; skip rounding ties
                if abs(z - emb.thresholds[leaf, k]) > 1e-9:
                    assert (int(s) >> k) & 1 == int(z >= emb.thresholds[leaf, k])


def test_crossing_one_threshold_flips_one_bit(vocab, blobs):
    tree, emb = vocab
    x = blobs[0].astype(np.float64)
    leaf = vi.quantize(tree, x)
    z = emb.projection @ x
    k = 3
    # move along projection row k just past its threshold
    y = x + (emb.thresholds[leaf, k] - z[k] + np.sign(emb.thresholds[leaf, k] - z[k]) * 1e-6) * emb.projection[k]
    assert vi.hamming(vi.signature(emb, leaf, x), vi.signature(emb, leaf, y)) == 1


def test_hamming_matches_popcount_oracle():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 2**63, 200, dtype=np.uint64)
    b = rng.integers(0, 2**63, 200, dtype=np.uint64)
    want = [bin(int(x) ^ int(y)).count("1") for x, y in zip(a, b)]
    assert vi.hamming(a, b).tolist() == want


def test_hamming_is_a_metric_on_short_codes():
    codes = np.arange(2**5, dtype=np.uint64)
    for a, b, c in itertools.product(codes, repeat=3):
        assert vi.hamming(a, b) == vi.hamming(b, a)
        assert vi.hamming(a, c) <= vi.hamming(a, b) + vi.hamming(b, c)
    assert np.all(vi.hamming(codes, codes) == 0)


# --------------------------------------------------------------------------- index and query


def test_every_word_posted_once(index):
    assert len(index) == 600
    assert sorted(index.word_ids.tolist()) == list(range(600))
    assert index.offsets[-1] == 600 and np.all(np.diff(index.offsets) >= 0)


def test_posting_lists_keep_insertion_order(index):
    for leaf in range(index.tree.n_leaves):
        ids, _ = index.postings(leaf)
        assert np.all(np.diff(ids) > 0)


def test_empty_leaf_has_empty_postings():
    x = np.repeat(np.eye(2) * 5, 10, axis=0)
    tree = vi.train_vocabulary(np.vstack([x, [[50.0, 50.0]]]), b=3, d=1, seed=0)
    emb = vi.train_hamming(tree, x, n_bits=2, seed=0)
    idx = vi.build_index(tree, emb, x)
    sizes = np.diff(idx.offsets)
    assert (sizes == 0).any()
    empty = int(np.flatnonzero(sizes == 0)[0])
    assert idx.postings(empty)[0].size == 0
    refs, dists = vi.query_knn(idx, tree.levels[0][empty], K=5)
    assert refs.size == 0 and dists.size == 0


def test_self_retrieval(index, blobs):
    refs, dists = vi.query_knn_batch(index, blobs[:600], K=1)
    for i, (r, d) in enumerate(zip(refs, dists)):
        assert d[0] == 0
        # an earlier word with an identical signature may win the tie
        assert r[0] == i or vi.hamming(index.signatures[index.word_ids == r[0]][0], vi.signature(
            index.embedding, vi.quantize(index.tree, blobs[i]), blobs[i])) == 0


def test_k_larger_than_posting_list(index, blobs):
    leaf = vi.quantize(index.tree, blobs[0])
    n = index.offsets[leaf + 1] - index.offsets[leaf]
    refs, dists = vi.query_knn(index, blobs[0], K=10_000)
    assert len(refs) == n
    assert np.all(np.diff(dists) >= 0)


def test_query_ranks_by_distance_then_insertion(index, blobs):
    x = blobs[700].astype(np.float64)
    leaf = vi.quantize(index.tree, x)
    ids, sigs = index.postings(leaf)
    d = vi.hamming(vi.signature(index.embedding, leaf, x), sigs)
    want = sorted(zip(d.tolist(), range(len(ids))))[:5]
    refs, dists = vi.query_knn(index, x, K=5)
    assert dists.tolist() == [w[0] for w in want]
    assert refs.tolist() == [int(ids[w[1]]) for w in want]


def test_h_max_cutoff(index, blobs):
    refs, dists = vi.query_knn(index, blobs[700], K=50, h_max=3)
    assert np.all(dists <= 3)
    full, fd = vi.query_knn(index, blobs[700], K=50)
    assert refs.tolist() == full[fd <= 3].tolist()


def test_multi_assignment_searches_more_leaves(index, blobs):
    one = vi.query_knn_batch(index, blobs[600:700], K=1000)[0]
    two = vi.query_knn_batch(index, blobs[600:700], K=1000, m=2)[0]
    assert all(set(a) <= set(b) for a, b in zip(one, two))
    assert sum(map(len, two)) > sum(map(len, one))


def test_knn_beats_random_baseline(index, blobs):
    db = blobs[:600].astype(np.float64)
    q = blobs[600:900].astype(np.float64)
    truth = np.argsort(((q[:, None] - db[None]) ** 2).sum(-1), axis=1)[:, :5]
    refs, _ = vi.query_knn_batch(index, q, K=5)
    recall = np.mean([len(set(r) & set(t)) / 5 for r, t in zip(refs, truth)])
    assert recall >= 5 * (5 / 600)


def test_bad_k_rejected(index, blobs):
    with pytest.raises(ValueError):
        vi.query_knn(index, blobs[0], K=0)


# --------------------------------------------------------------------------- files


def test_file_round_trips(tmp_path, index):
    vi.save_tree(index.tree, tmp_path / "t")
    vi.save_embedding(index.embedding, tmp_path / "h")
    vi.save_index(index, tmp_path / "i")
    tree = vi.load_tree(tmp_path / "t")
    emb = vi.load_embedding(tmp_path / "h")
    idx = vi.load_index(tmp_path / "i", tree, emb)
    assert all(np.array_equal(a, b) for a, b in zip(tree.levels, index.tree.levels))
    assert np.array_equal(emb.projection, index.embedding.projection)
    assert np.array_equal(emb.thresholds, index.embedding.thresholds)
    assert np.array_equal(idx.signatures, index.signatures) and np.array_equal(idx.word_ids, index.word_ids)
    assert (tmp_path / "t").read_bytes()[:4] == b"SVLT"
    assert (tmp_path / "h").read_bytes()[:4] == b"SVLH"
    assert (tmp_path / "i").read_bytes()[:4] == b"SVLI"


def test_truncated_files_rejected(tmp_path, index):
    for name, save, load in (
        ("t", lambda p: vi.save_tree(index.tree, p), vi.load_tree),
        ("h", lambda p: vi.save_embedding(index.embedding, p), vi.load_embedding),
        ("i", lambda p: vi.save_index(index, p), lambda p: vi.load_index(p, index.tree, index.embedding)),
    ):
        p = tmp_path / name
        save(p)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(ValueError):
            load(p)
