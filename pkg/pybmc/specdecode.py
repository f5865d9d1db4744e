"""
Speculative decoding on top of a padded KV cache.

The zero-padded rows past valid_len hold no data but still take part in
the attention matmul. Instead of wasting them, candidate tokens from a
draft are staged there and verified in one batched attention call:

1. ``admit_candidates()`` truncates the candidate tree to the padded rows
   (it never reallocates),
2. ``place_candidates()`` writes the candidates' K/V rows in place,
3. ``tree_mask()`` lets every candidate attend the committed prefix, its
   ancestors and itself,
4. ``verify_and_commit()`` compacts the accepted path, commits it and
   zeroes the remaining staged rows.

Which candidates are accepted is decided by the caller; ``greedy_accept()``
implements the greedy-match rule used by the simulator.
"""

from dataclasses import dataclass

import numpy as np

from ._coreutils import logger, ConsistencyError, PlacementError
from .attention import MASK_VALUE


@dataclass(frozen=True, eq=False)
class SpeculationTree:
    """A tree of candidate tokens.

    * parents: per node the index of its parent, or -1 for a root. Nodes
      are listed in breadth-first order, which is also the order in which
      they are placed in the cache rows.
    * tokens: candidate token ids, shaped ``[k, B]`` (one id per batch row).

    Roots attach to the last committed token.
    """

    parents: tuple
    tokens: np.ndarray

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        tokens = np.asarray(self.tokens, np.int64)
        if tokens.ndim == 1:
            tokens = tokens[:, None]
        if tokens.ndim != 2 or tokens.shape[0] != len(parents):
            raise ValueError(
                f"Tree tokens must have shape [{len(parents)}, B], not {tokens.shape}."
            )
        depth = -1
        for i, parent in enumerate(parents):
            if not -1 <= parent < i:
                raise ValueError(f"Tree node {i} has invalid parent {parent}.")
            node_depth = 0 if parent < 0 else self._depth_of(parents, parent) + 1
            if node_depth < depth:
                raise ValueError("Tree nodes must be listed in breadth-first order.")
            depth = node_depth
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "tokens", tokens)

    @staticmethod
    def _depth_of(parents, i):
        depth = 0
        while parents[i] >= 0:
            i = parents[i]
            depth += 1
        return depth

    @classmethod
    def chain(cls, tokens):
        """Create a tree that is a single chain of the given tokens."""
        tokens = np.asarray(tokens, np.int64)
        return cls(tuple(range(-1, len(tokens) - 1)), tokens)

    @classmethod
    def empty(cls, batch=1):
        return cls((), np.zeros((0, batch), np.int64))

    def __len__(self):
        return len(self.parents)

    @property
    def size(self):
        """The number of nodes (k)."""
        return len(self.parents)

    def depth(self, i):
        """The depth of node i (roots have depth 0)."""
        return self._depth_of(self.parents, i)

    @property
    def max_depth(self):
        """The number of nodes on the longest root-to-leaf chain."""
        return max((self.depth(i) + 1 for i in range(self.size)), default=0)

    def ancestors(self, i):
        """The ancestors of node i, nearest first."""
        result = []
        while self.parents[i] >= 0:
            i = self.parents[i]
            result.append(i)
        return result

    def children(self, i):
        """The children of node i (or the roots for i = -1)."""
        return [j for j, p in enumerate(self.parents) if p == i]

    def truncate(self, n):
        """Get a tree with only the first n nodes (parents come first, so
        the result is a valid tree).
        """
        n = max(0, min(n, self.size))
        return SpeculationTree(self.parents[:n], self.tokens[:n])


@dataclass(frozen=True)
class AcceptanceResult:
    """The accepted root-to-node chain of a speculation tree."""

    accepted_path: tuple

    @property
    def m(self):
        """The number of accepted tokens."""
        return len(self.accepted_path)

    def validate(self, tree):
        """Check that the path is a parent chain in the tree."""
        path = self.accepted_path
        for j, node in enumerate(path):
            if not 0 <= node < tree.size:
                raise ConsistencyError(f"Accepted node {node} is not in the tree.")
            expected = -1 if j == 0 else path[j - 1]
            if tree.parents[node] != expected:
                raise ConsistencyError(
                    f"Accepted path {path} is not a root-to-node chain."
                )


def wasted_rows(cache):
    """Padded rows that hold neither committed nor staged data, but are
    still included in the attention matmul.
    """
    return cache.capacity - cache.valid_len - cache.staged


def admit_candidates(cache, tree):
    """Limit the tree to the padded rows of the cache. Nodes are dropped
    from the end of the placement order. Never reallocates; if there
    are no padded rows the result is empty and the caller must commit a
    token the regular way (which reallocates).
    """
    available = cache.capacity - cache.valid_len - cache.staged
    if tree.size <= available:
        return tree
    logger.debug(f"Speculation tree truncated from {tree.size} to {available} nodes")
    return tree.truncate(available)


def place_candidates(cache, tree, k_rows, v_rows, layer=None):
    """Write the K/V rows of the tree's nodes into the padded rows
    ``valid_len .. valid_len + k - 1`` (in placement order). The rows are
    staged, not committed.

    If layer is None, k_rows and v_rows hold one ``[B * H_kv, k, d]``
    array per layer. Otherwise they are the arrays of that one layer.
    """
    if tree.size == 0:
        return cache
    if cache.valid_len + tree.size > cache.capacity:
        raise PlacementError(
            f"{tree.size} candidates do not fit in {cache.padded_rows} padded rows."
        )
    if layer is None:
        layers = range(cache.dims.layers)
    else:
        layers = [layer]
        k_rows, v_rows = {layer: k_rows}, {layer: v_rows}
    for i in layers:
        if np.shape(k_rows[i])[1] != tree.size:
            raise PlacementError(f"Need K/V rows for all {tree.size} candidates.")
        cache.write_rows(i, cache.valid_len, k_rows[i], v_rows[i])
    return cache


def tree_mask(tree, valid_len, capacity, dtype=np.float32):
    """Get the ``[k, capacity]`` verification mask. Node j attends the
    committed prefix, its ancestors and itself; all other columns
    (other candidates and unused padding) get -1e9.
    """
    if valid_len + tree.size > capacity:
        raise PlacementError(
            f"{tree.size} candidates do not fit past row {valid_len} of {capacity}."
        )
    mask = np.full((tree.size, capacity), MASK_VALUE, dtype)
    mask[:, :valid_len] = 0
    for j in range(tree.size):
        mask[j, valid_len + j] = 0
        for a in tree.ancestors(j):
            mask[j, valid_len + a] = 0
    return mask


def greedy_accept(tree, predicted, first_token=None):
    """Find the longest path of candidates that match the target's greedy
    predictions, for all batch rows.

    predicted has shape ``[k, B]``: the argmax token after each node. A
    root is accepted if it equals first_token (the prediction after the
    last committed token); if first_token is None, the first root is
    accepted unconditionally.
    """
    predicted = np.asarray(predicted)
    if predicted.ndim == 1:
        predicted = predicted[:, None]
    path = []
    roots = tree.children(-1)
    if first_token is None:
        candidates = roots[:1]
    else:
        want = np.asarray(first_token).reshape(-1)
        candidates = [j for j in roots if np.array_equal(tree.tokens[j], want)][:1]
    while candidates:
        node = candidates[0]
        path.append(node)
        want = predicted[node]
        candidates = [
            j for j in tree.children(node) if np.array_equal(tree.tokens[j], want)
        ]
    return AcceptanceResult(tuple(path))


def verify_and_commit(cache, tree, result):
    """Commit the accepted path: its rows are compacted (in path order)
    to rows ``valid_len .. valid_len + m - 1``, valid_len grows by m, and
    all other staged rows are zeroed again.
    """
    result.validate(tree)
    for node in result.accepted_path:
        if node >= cache.staged:
            raise ConsistencyError(f"Accepted node {node} was not staged.")
    start = cache.valid_len
    for dst, node in enumerate(result.accepted_path):
        if node != dst:
            cache.move_row(start + node, start + dst)
    cache.commit(result.m)
    cache.discard_staged()
    return cache
