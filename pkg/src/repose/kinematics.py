"""Skeleton graphs, update orderings and the two-pass update schedule."""
import json
import math
from dataclasses import dataclass
from importlib import resources
from typing import NamedTuple

FORWARD = "forward"
REVERSE = "reverse"

_DEFAULT_FILES = {14: "skeleton_lsp14.json", 16: "skeleton_mpii16.json"}


@dataclass(frozen=True)
class SkeletonGraph:
    """Keypoint names, undirected edges (index pairs with ``a < b``) and an update ordering."""

    names: tuple
    edges: frozenset
    ordering: tuple
    name: str = "custom"

    def __post_init__(self):
        K = len(self.names)
        if len(set(self.names)) != K:
            raise ValueError("keypoint names must be unique")
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"self-edge on keypoint {self.names[a]!r}")
            if not (0 <= a < K and 0 <= b < K):
                raise ValueError(f"edge ({a}, {b}) out of range for K={K}")
        if sorted(self.ordering) != list(range(K)):
            raise ValueError("ordering must be a permutation of the keypoint indices")
        adj = self._adjacency()
        lonely = [self.names[k] for k in range(K) if not adj[k]]
        if lonely:
            raise ValueError(f"keypoints without neighbors: {lonely}")
        seen, stack = {0}, [0]
        while stack:
            for u in adj[stack.pop()]:
                if u not in seen:
                    seen.add(u)
                    stack.append(u)
        if len(seen) != K:
            raise ValueError("skeleton graph is not connected")
        for k in range(K):
            name = self.names[k]
            if name.startswith(("left_", "right_")) and self.paired(k) == k:
                raise ValueError(f"{name!r} has no left/right counterpart")

    def _adjacency(self):
        adj = [[] for _ in self.names]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return [sorted(n) for n in adj]

    @property
    def K(self):
        return len(self.names)

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown keypoint {name!r}") from None

    def neighbors(self, k):
        return neighbors(self, k)

    def paired(self, k):
        """Index of the left/right counterpart (itself for centre-line keypoints)."""
        name = self.names[k]
        for a, b in (("left_", "right_"), ("right_", "left_")):
            if name.startswith(a):
                other = b + name[len(a) :]
                if other in self.names:
                    return self.names.index(other)
        return k

    def flip_permutation(self):
        return [self.paired(k) for k in range(self.K)]

    def with_ordering(self, variant):
        """``hips_out`` keeps the canonical ordering; ``head_down`` reverses it."""
        if variant == "hips_out":
            return self
        if variant == "head_down":
            return SkeletonGraph(self.names, self.edges, tuple(reversed(self.ordering)), self.name)
        raise ValueError(f"unknown ordering variant {variant!r}; expected hips_out or head_down")

    def to_dict(self):
        return {
            "name": self.name,
            "keypoints": list(self.names),
            "edges": sorted([self.names[a], self.names[b]] for a, b in self.edges),
            "ordering": [self.names[k] for k in self.ordering],
        }


def skeleton_from_dict(d):
    names = tuple(d["keypoints"])
    idx = {n: i for i, n in enumerate(names)}
    try:
        edges = frozenset(tuple(sorted((idx[a], idx[b]))) for a, b in d["edges"])
        ordering = tuple(idx[n] for n in d["ordering"])
    except KeyError as e:
        raise ValueError(f"skeleton config references unknown keypoint {e.args[0]!r}") from None
    return SkeletonGraph(names, edges, ordering, d.get("name", "custom"))


def load_skeleton(path):
    with open(path) as fh:
        return skeleton_from_dict(json.load(fh))


def save_skeleton(graph, path):
    with open(path, "w") as fh:
        json.dump(graph.to_dict(), fh, indent=2)


def default_skeleton(K):
    """The 14-keypoint (LSP-style) or 16-keypoint (MPII-style) skeleton."""
    if K not in _DEFAULT_FILES:
        raise ValueError(f"no default skeleton for K={K}; supported: 14, 16")
    text = resources.files("repose.configs").joinpath(_DEFAULT_FILES[K]).read_text()
    return skeleton_from_dict(json.loads(text))


def neighbors(graph, k):
    """Neighbors of ``k`` in ascending index order."""
    if not 0 <= k < graph.K:
        raise ValueError(f"keypoint index {k} out of range [0, {graph.K})")
    out = []
    for a, b in graph.edges:
        if a == k:
            out.append(b)
        elif b == k:
            out.append(a)
    return sorted(out)


class UpdateStep(NamedTuple):
    keypoint: int
    pass_id: str
    slot: int


@dataclass(frozen=True)
class UpdateSchedule:
    steps: tuple

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def __getitem__(self, i):
        return self.steps[i]


def build_schedule(graph):
    """Forward pass over ``graph.ordering`` then the reverse pass; one fresh slot per step."""
    order = list(graph.ordering)
    steps = [UpdateStep(k, FORWARD, i) for i, k in enumerate(order)]
    steps += [UpdateStep(k, REVERSE, len(order) + i) for i, k in enumerate(reversed(order))]
    return UpdateSchedule(tuple(steps))


def collision_probability(n, K):
    """Chance that ``K`` i.i.d. uniform keypoints on an ``n x n`` grid share a cell.

    ``1 - (n^2)! / ((n^2 - K)! n^(2K))``, accumulated in log space.
    """
    if n < 1 or K < 1:
        raise ValueError(f"need n >= 1 and K >= 1, got n={n}, K={K}")
    cells = n * n
    if K > cells:
        return 1.0
    log_distinct = sum(math.log1p(-i / cells) for i in range(K))
    return -math.expm1(log_distinct)
