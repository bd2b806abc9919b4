"""Vocabulary tree (hierarchical k-means) with Hamming embedding for word matching."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TREE_MAGIC = b"SVLT"
HAMMING_MAGIC = b"SVLH"
INDEX_MAGIC = b"SVLI"
VERSION = 1


# --------------------------------------------------------------------------- k-means


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = _sqdist(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(len(x), p=d2 / total) if total > 0 else int(rng.integers(len(x)))
        centers.append(x[i])
        d2 = np.minimum(d2, _sqdist(x, x[i][None])[:, 0])
    return np.array(centers)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective: list[float]
    reseeded: int = 0


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, max_iters: int = 50) -> KMeansResult:
    """Lloyd iterations from a k-means++ start; empty clusters jump to the worst-served point.

    ``objective[t]`` is the assignment cost after iteration t and never increases.
    """
    x = np.asarray(x, dtype=np.float64)
    c = kmeans_pp(x, k, rng)
    objective = []
    reseeded = 0
    labels = None
    for _ in range(max_iters):
        d = _sqdist(x, c)
        new = np.argmin(d, axis=1)
        cost = float(d[np.arange(len(x)), new].sum())
        objective.append(cost)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        c[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            own = ((x - c[labels]) ** 2).sum(1)
            for j in np.flatnonzero(~nonempty):
                far = int(np.argmax(own))
                c[j] = x[far]
                own[far] = 0.0
                reseeded += 1
    return KMeansResult(c, labels, objective, reseeded)


# --------------------------------------------------------------------------- tree


@dataclass
class VocabularyTree:
    branching: int
    depth: int
    levels: list[np.ndarray]  # levels[l] has shape (b**(l+1), N)
    padded_nodes: int = 0
    objectives: list[list[float]] = field(default_factory=list, repr=False)

    @property
    def n_leaves(self) -> int:
        return self.branching**self.depth

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]


def train_vocabulary(descriptors, b: int = 8, d: int = 2, seed: int = 0, max_iters: int = 50) -> VocabularyTree:
    x = np.asarray(descriptors, dtype=np.float64)
    if x.shape[0] < b:
        raise ValueError(f"need at least {b} descriptors to train the root, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    levels = [np.zeros((b ** (l + 1), x.shape[1])) for l in range(d)]
    padded = 0
    objectives = []
    # breadth-first: (level, node index, member rows, parent centroid)
    frontier = [(0, 0, np.arange(x.shape[0]), x.mean(axis=0))]
    for level in range(d):
        nxt = []
        for _, node, rows, parent in frontier:
            pts = x[rows]
            sl = slice(node * b, node * b + b)
            if len(pts) >= b:
                res = kmeans(pts, b, rng, max_iters)
                levels[level][sl] = res.centroids
                objectives.append(res.objective)
                labels = res.labels
            else:
                padded += 1
                if len(pts):
                    fill = np.concatenate([pts, np.repeat(pts[-1:], b - len(pts), axis=0)])
                    labels = np.arange(len(pts))
                else:
                    fill = np.repeat(parent[None], b, axis=0)
                    labels = np.empty(0, np.int64)
                levels[level][sl] = fill
            for j in range(b):
                nxt.append((level + 1, node * b + j, rows[labels == j], levels[level][node * b + j]))
        frontier = nxt
    return VocabularyTree(b, d, levels, padded, objectives)


def quantize(tree: VocabularyTree, descriptors, return_path: bool = False):
    """Greedy root-to-leaf descent; ties go to the lowest child index."""
    x = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    b = tree.branching
    node = np.zeros(x.shape[0], dtype=np.int64)
    path = []
    for level in range(tree.depth):
        kids = node[:, None] * b + np.arange(b)[None, :]
        cent = tree.levels[level][kids]  # (n, b, N)
        dist = ((cent - x[:, None, :]) ** 2).sum(-1)
        node = kids[np.arange(x.shape[0]), np.argmin(dist, axis=1)]
        path.append(node.copy())
    single = np.ndim(descriptors) == 1
    leaf = int(node[0]) if single else node
    if return_path:
        return leaf, path
    return leaf


def flat_nearest_leaf(tree: VocabularyTree, descriptors) -> np.ndarray:
    x = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    return np.argmin(_sqdist(x, tree.levels[-1]), axis=1)


# --------------------------------------------------------------------------- hamming embedding


@dataclass
class HammingEmbedding:
    projection: np.ndarray  # (N_B, N), orthonormal rows
    thresholds: np.ndarray  # (n_leaves, N_B)

    @property
    def n_bits(self) -> int:
        return self.projection.shape[0]


def random_orthonormal_rows(n_bits: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if n_bits > dim:
        raise ValueError(f"cannot draw {n_bits} orthonormal rows in dimension {dim}")
    q, r = np.linalg.qr(rng.standard_normal((dim, n_bits)))
    q = q * np.sign(np.diag(r))[None, :]
    return q.T.copy()


def train_hamming(tree: VocabularyTree, descriptors, n_bits: int = 32, seed: int = 0) -> HammingEmbedding:
    if n_bits > 64:
        raise ValueError("signatures are packed into 64 bits")
    x = np.asarray(descriptors, dtype=np.float64)
    rng = np.random.default_rng(seed)
    proj = random_orthonormal_rows(n_bits, x.shape[1], rng)
    z = project(proj, x)
    leaves = quantize(tree, x)
    thresholds = np.tile(np.median(z, axis=0), (tree.n_leaves, 1))
    for leaf in np.unique(leaves):
        thresholds[leaf] = np.median(z[leaves == leaf], axis=0)
    return HammingEmbedding(proj, thresholds)


def project(emb_or_proj, x: np.ndarray) -> np.ndarray:
    """Row-wise projection whose value for a descriptor does not depend on the batch it sits in."""
    proj = getattr(emb_or_proj, "projection", emb_or_proj)
    out = np.empty((x.shape[0], proj.shape[0]))
    for i in range(0, x.shape[0], 4096):
        out[i : i + 4096] = (x[i : i + 4096, None, :] * proj[None, :, :]).sum(-1)
    return out


_BIT_WEIGHTS = np.left_shift(np.uint64(1), np.arange(64, dtype=np.uint64))


def signature(emb: HammingEmbedding, leaf, descriptor) -> np.ndarray:
    """Packed N_B-bit codes; bit i is set when projection i reaches the leaf threshold."""
    x = np.atleast_2d(np.asarray(descriptor, dtype=np.float64))
    leaf = np.atleast_1d(leaf)
    bits = project(emb, x) >= emb.thresholds[leaf]
    codes = (bits.astype(np.uint64) * _BIT_WEIGHTS[: emb.n_bits]).sum(axis=1, dtype=np.uint64)
    return codes[0] if np.ndim(descriptor) == 1 else codes


def hamming(a, b) -> np.ndarray:
    return np.bitwise_count(np.bitwise_xor(np.asarray(a, np.uint64), np.asarray(b, np.uint64))).astype(np.int64)


# --------------------------------------------------------------------------- index


@dataclass
class WordIndex:
    tree: VocabularyTree
    embedding: HammingEmbedding
    offsets: np.ndarray  # (n_leaves + 1,) posting list boundaries
    word_ids: np.ndarray  # database word refs in posting order
    signatures: np.ndarray  # uint64 signatures in posting order

    def __len__(self) -> int:
        return self.word_ids.size

    def postings(self, leaf: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.offsets[leaf], self.offsets[leaf + 1]
        return self.word_ids[s:e], self.signatures[s:e]


def build_index(tree: VocabularyTree, emb: HammingEmbedding, descriptors) -> WordIndex:
    x = np.asarray(descriptors, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("cannot index an empty word set")
    leaves = quantize(tree, x)
    sigs = signature(emb, leaves, x)
    order = np.argsort(leaves, kind="stable")
    offsets = np.zeros(tree.n_leaves + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(np.bincount(leaves, minlength=tree.n_leaves))
    return WordIndex(tree, emb, offsets, order.astype(np.int64), sigs[order])


def query_knn(index: WordIndex, descriptor, K: int = 5, h_max: int | None = None, m: int = 1):
    """Top-K database words in the query's leaf by Hamming distance (ties: insertion order)."""
    refs, dists = query_knn_batch(index, np.atleast_2d(descriptor), K, h_max, m)
    return refs[0], dists[0]


def _sibling_leaves(tree: VocabularyTree, x: np.ndarray, m: int) -> np.ndarray:
    """The m leaves closest to x among the children of its greedy parent node."""
    leaf = quantize(tree, x)
    b = tree.branching
    kids = (leaf // b)[:, None] * b + np.arange(b)[None, :]
    d = ((tree.levels[-1][kids] - x[:, None, :]) ** 2).sum(-1)
    return np.take_along_axis(kids, np.argsort(d, axis=1, kind="stable")[:, : min(m, b)], axis=1)


def query_knn_batch(index: WordIndex, descriptors, K: int = 5, h_max: int | None = None, m: int = 1):
    """Per-query lists of (database word refs, Hamming distances).

    With ``m > 1`` each query also searches the nearest sibling leaves of its own leaf.
    """
    if K < 1 or m < 1:
        raise ValueError("K and m must be >= 1")
    x = np.asarray(descriptors, dtype=np.float64)
    if m > 1:
        refs_out, dist_out = [], []
        for row, leaves in zip(x, _sibling_leaves(index.tree, x, m)):
            ids, d = [], []
            for leaf in leaves:
                pid, psig = index.postings(int(leaf))
                ids.append(pid)
                d.append(hamming(signature(index.embedding, leaf, row), psig))
            ids, d = np.concatenate(ids), np.concatenate(d)
            sel = np.argsort(d, kind="stable")[:K]
            if h_max is not None:
                sel = sel[d[sel] <= h_max]
            refs_out.append(ids[sel])
            dist_out.append(d[sel])
        return refs_out, dist_out
    leaves = quantize(index.tree, x)
    sigs = signature(index.embedding, leaves, x)
    refs_out: list[np.ndarray] = [np.empty(0, np.int64)] * x.shape[0]
    dist_out: list[np.ndarray] = [np.empty(0, np.int64)] * x.shape[0]
    for leaf in np.unique(leaves):
        q = np.flatnonzero(leaves == leaf)
        ids, psig = index.postings(int(leaf))
        if ids.size == 0:
            continue
        dmat = hamming(sigs[q][:, None], psig[None, :])
        order = np.argsort(dmat, axis=1, kind="stable")[:, :K]
        for row, qi in enumerate(q):
            sel = order[row]
            d = dmat[row, sel]
            if h_max is not None:
                keep = d <= h_max
                sel, d = sel[keep], d[keep]
            refs_out[qi] = ids[sel]
            dist_out[qi] = d
    return refs_out, dist_out


# --------------------------------------------------------------------------- files


def save_tree(tree: VocabularyTree, path) -> None:
    with open(path, "wb") as f:
        f.write(TREE_MAGIC)
        f.write(struct.pack("<IIII", VERSION, tree.branching, tree.depth, tree.dim))
        for lv in tree.levels:
            f.write(np.asarray(lv, "<f8").tobytes())


def load_tree(path) -> VocabularyTree:
    data = Path(path).read_bytes()
    if data[:4] != TREE_MAGIC:
        raise ValueError("not a vocabulary tree file")
    version, b, d, dim = struct.unpack_from("<IIII", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported tree version {version}")
    off = 20
    levels = []
    for l in range(d):
        n = b ** (l + 1) * dim
        if off + 8 * n > len(data):
            raise ValueError("truncated tree file")
        levels.append(np.frombuffer(data, "<f8", n, off).reshape(-1, dim).copy())
        off += 8 * n
    return VocabularyTree(b, d, levels)


def save_embedding(emb: HammingEmbedding, path) -> None:
    nb, dim = emb.projection.shape
    with open(path, "wb") as f:
        f.write(HAMMING_MAGIC)
        f.write(struct.pack("<IIII", VERSION, nb, dim, emb.thresholds.shape[0]))
        f.write(np.asarray(emb.projection, "<f8").tobytes())
        f.write(np.asarray(emb.thresholds, "<f8").tobytes())


def load_embedding(path) -> HammingEmbedding:
    data = Path(path).read_bytes()
    if data[:4] != HAMMING_MAGIC:
        raise ValueError("not a Hamming embedding file")
    version, nb, dim, nl = struct.unpack_from("<IIII", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported embedding version {version}")
    if len(data) != 20 + 8 * (nb * dim + nl * nb):
        raise ValueError("truncated embedding file")
    proj = np.frombuffer(data, "<f8", nb * dim, 20).reshape(nb, dim).copy()
    thr = np.frombuffer(data, "<f8", nl * nb, 20 + 8 * nb * dim).reshape(nl, nb).copy()
    return HammingEmbedding(proj, thr)


def save_index(index: WordIndex, path) -> None:
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<IQQ", VERSION, index.offsets.size - 1, index.word_ids.size))
        f.write(np.asarray(index.offsets, "<u8").tobytes())
        f.write(np.asarray(index.word_ids, "<u8").tobytes())
        f.write(np.asarray(index.signatures, "<u8").tobytes())


def load_index(path, tree: VocabularyTree, emb: HammingEmbedding) -> WordIndex:
    data = Path(path).read_bytes()
    if data[:4] != INDEX_MAGIC:
        raise ValueError("not a word index file")
    version, nl, nw = struct.unpack_from("<IQQ", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported index version {version}")
    if nl != tree.n_leaves:
        raise ValueError("index does not match the vocabulary tree")
    off = 24
    if len(data) != off + 8 * (nl + 1 + 2 * nw):
        raise ValueError("truncated index file")
    offsets = np.frombuffer(data, "<u8", nl + 1, off).astype(np.int64)
    off += 8 * (nl + 1)
    ids = np.frombuffer(data, "<u8", nw, off).astype(np.int64)
    off += 8 * nw
    sigs = np.frombuffer(data, "<u8", nw, off).astype(np.uint64)
    return WordIndex(tree, emb, offsets, ids, sigs)
