"""Finite boxes of Z^d and neighbourhood tables."""
from __future__ import annotations

import itertools

import numpy as np


def cube_offsets(r: int, d: int) -> np.ndarray:
    """Points of {-r..r}^d in lexicographic order (first coordinate slowest)."""
    if r < 0 or d < 1:
        raise ValueError(f"need r >= 0 and d >= 1, got r={r}, d={d}")
    pts = list(itertools.product(range(-r, r + 1), repeat=d))
    return np.asarray(pts, dtype=np.int64).reshape(-1, d)


class Box:
    """The box Lambda_m = {-m..m}^d with sites indexed lexicographically."""

    def __init__(self, m: int, d: int):
        if m < 0:
            raise ValueError(f"box half-width must be >= 0, got {m}")
        self.m = int(m)
        self.d = int(d)
        self.side = 2 * self.m + 1
        self.n = self.side ** self.d
        self.coords = cube_offsets(self.m, self.d)
        self._weights = self.side ** np.arange(self.d - 1, -1, -1, dtype=np.int64)
        self._nbr_cache: dict[int, np.ndarray] = {}

    def __repr__(self) -> str:
        return f"Box(m={self.m}, d={self.d})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Box) and (self.m, self.d) == (other.m, other.d)

    def __hash__(self) -> int:
        return hash((self.m, self.d))

    @property
    def origin(self) -> int:
        return (self.n - 1) // 2

    def contains(self, coord) -> bool:
        c = np.asarray(coord, dtype=np.int64).reshape(self.d)
        return bool(np.all(np.abs(c) <= self.m))

    def index(self, coord) -> int:
        c = np.asarray(coord, dtype=np.int64).reshape(self.d)
        if np.any(np.abs(c) > self.m):
            raise IndexError(f"site {tuple(c)} outside {self}")
        return int(np.dot(c + self.m, self._weights))

    def coord(self, index: int) -> tuple[int, ...]:
        return tuple(int(v) for v in self.coords[index])

    def neighbor_table(self, R: int) -> np.ndarray:
        """``nbr[i, k]`` is the box index of site i + offset_k, or -1 outside."""
        if R in self._nbr_cache:
            return self._nbr_cache[R]
        offs = cube_offsets(R, self.d)
        pts = self.coords[:, None, :] + offs[None, :, :]
        inside = np.all(np.abs(pts) <= self.m, axis=2)
        idx = ((pts + self.m) * self._weights).sum(axis=2)
        nbr = np.where(inside, idx, -1).astype(np.int64)
        nbr.setflags(write=False)
        self._nbr_cache[R] = nbr
        return nbr

    def embed_in(self, bigger: "Box") -> np.ndarray:
        """Indices in ``bigger`` of this box's sites."""
        if bigger.d != self.d or bigger.m < self.m:
            raise ValueError(f"{self} does not fit in {bigger}")
        return ((self.coords + bigger.m) * bigger._weights).sum(axis=1)

    def sup_norm(self) -> np.ndarray:
        return np.abs(self.coords).max(axis=1)
