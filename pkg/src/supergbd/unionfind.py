"""Disjoint-set forest with path compression."""

from __future__ import annotations


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        """Union by size; returns the surviving root."""
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra

    def union_into(self, child: int, parent: int) -> int:
        """Attach child's root under parent's root; parent's root survives."""
        rc, rp = self.find(child), self.find(parent)
        if rc == rp:
            return rp
        self.parent[rc] = rp
        self.size[rp] += self.size[rc]
        return rp
