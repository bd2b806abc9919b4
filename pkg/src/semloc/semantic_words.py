"""Bags of semantic words: latent descriptors of every occupied subvolume of a map."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .completion_net import CompletionNet, encode
from .voxel_map import SemanticVoxelMap, extract_subvolumes, occupied_subvolume_centers

WORDS_MAGIC = b"SVLW"
WORDS_VERSION = 1


def default_orientations(n: int = 18) -> np.ndarray:
    """``n`` uniformly spaced yaws starting at 0."""
    return np.arange(n) * (2 * np.pi / n)


@dataclass
class SemanticWord:
    descriptor: np.ndarray
    center: np.ndarray
    yaw: float
    map_id: str


@dataclass
class WordBag:
    """Struct-of-arrays bag: row i is one word."""

    descriptors: np.ndarray  # (n, N) float32
    centers: np.ndarray  # (n, 3)
    yaws: np.ndarray  # (n,)
    map_id: str = ""

    def __len__(self) -> int:
        return self.descriptors.shape[0]

    def __getitem__(self, i: int) -> SemanticWord:
        return SemanticWord(self.descriptors[i], self.centers[i], float(self.yaws[i]), self.map_id)

    @classmethod
    def empty(cls, n_dim: int, map_id: str = "") -> "WordBag":
        return cls(np.empty((0, n_dim), np.float32), np.empty((0, 3)), np.empty(0), map_id)

    @classmethod
    def concat(cls, bags: Sequence["WordBag"]) -> "WordBag":
        return cls(
            np.concatenate([b.descriptors for b in bags]),
            np.concatenate([b.centers for b in bags]),
            np.concatenate([b.yaws for b in bags]),
            bags[0].map_id if bags else "",
        )


def _bag_at(smap, net, V, centers, yaw, map_id) -> WordBag:
    if len(centers) == 0:
        return WordBag.empty(net.arch.N, map_id)
    mus = []
    # bounded memory: extract and encode in chunks
    for i in range(0, len(centers), 512):
        grids = extract_subvolumes(smap, centers[i : i + 512], yaw, V)
        mus.append(encode(net, grids).mu)
    mu = np.concatenate(mus).astype(np.float32)
    return WordBag(mu, np.asarray(centers, dtype=np.float64), np.full(len(centers), float(yaw)), map_id)


def bag_of_words(smap: SemanticVoxelMap, net: CompletionNet, V: int, stride: int, map_id: str = "") -> WordBag:
    if net.arch.V != V:
        raise ValueError(f"encoder expects V={net.arch.V}, got {V}")
    centers = occupied_subvolume_centers(smap, V, stride)
    return _bag_at(smap, net, V, centers, 0.0, map_id)


def oriented_bags(
    smap: SemanticVoxelMap, net: CompletionNet, V: int, stride: int, orientations, map_id: str = ""
) -> list[WordBag]:
    orientations = np.asarray(orientations, dtype=np.float64)
    if orientations.size == 0:
        raise ValueError("need at least one orientation")
    if net.arch.V != V:
        raise ValueError(f"encoder expects V={net.arch.V}, got {V}")
    centers = occupied_subvolume_centers(smap, V, stride)
    return [_bag_at(smap, net, V, centers, yaw, map_id) for yaw in orientations]


def save_words(bag: WordBag, path) -> None:
    n, dim = bag.descriptors.shape
    rec = np.zeros(n, dtype=[("d", "<f4", (dim,)), ("c", "<f8", (3,)), ("y", "<f8")])
    rec["d"], rec["c"], rec["y"] = bag.descriptors, bag.centers, bag.yaws
    with open(path, "wb") as f:
        f.write(WORDS_MAGIC)
        f.write(struct.pack("<IIQ", WORDS_VERSION, dim, n))
        f.write(rec.tobytes())


def load_words(path, map_id: str = "") -> WordBag:
    data = Path(path).read_bytes()
    if data[:4] != WORDS_MAGIC:
        raise ValueError("not a word file")
    version, dim, n = struct.unpack_from("<IIQ", data, 4)
    if version != WORDS_VERSION:
        raise ValueError(f"unsupported word file version {version}")
    dt = np.dtype([("d", "<f4", (dim,)), ("c", "<f8", (3,)), ("y", "<f8")])
    if len(data) != 20 + n * dt.itemsize:
        raise ValueError("truncated word file")
    rec = np.frombuffer(data, dt, n, 20)
    return WordBag(rec["d"].astype(np.float32), rec["c"].copy(), rec["y"].copy(), map_id)
