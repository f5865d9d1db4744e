"""
The KV cache and its allocation mechanics.

Per layer the cache holds a K and a V buffer of shape
``[B * H_kv, capacity, d]`` (row-major). Rows ``0 .. valid_len-1`` are
committed. Rows past ``valid_len`` are zero, except rows that are staged:
written but not yet committed (the current decode token, or speculative
candidates). Staged rows are either committed with ``commit()`` or wiped
with ``discard_staged()``.

The cache never touches the attention math. It records every element it
moves in its CostLedger, so the closed forms below can be checked exactly.
"""

import numpy as np

from ._coreutils import logger, CapacityExceededError, ConsistencyError
from ._coreutils import DimensionError, DivisibilityError, PlacementError
from ._types import ModelDims, AllocationPolicy, Iterative, Upfront, Bmc
from ._ledger import CostLedger


class KvCache:
    """Per-layer growable K/V buffers under an allocation policy.

    Use ``new_cache()`` to create one. A cache has a single writer: calls
    that mutate it must be serialized by the caller. The read-only views
    returned by ``committed()`` may be shared between mutations.
    """

    def __init__(self, dims, policy, *, dtype=np.float32, ledger=None):
        if not isinstance(dims, ModelDims):
            raise TypeError(f"KvCache needs ModelDims, not {dims!r}.")
        if not isinstance(policy, AllocationPolicy):
            raise TypeError(f"KvCache needs an AllocationPolicy, not {policy!r}.")
        policy.validate(dims.max_context)
        self._dims = dims
        self._policy = policy
        self._dtype = np.dtype(dtype)
        self._ledger = ledger if ledger is not None else CostLedger()
        shape = (dims.batch * dims.kv_heads, 0, dims.head_dim)
        self._keys = [np.zeros(shape, self._dtype) for _ in range(dims.layers)]
        self._values = [np.zeros(shape, self._dtype) for _ in range(dims.layers)]
        self._valid_len = 0
        self._staged = 0

    def __repr__(self):
        return (
            f"<KvCache {self._policy} {self._valid_len}/{self.capacity} rows "
            f"at 0x{id(self):x}>"
        )

    @property
    def dims(self):
        """The ModelDims of this cache."""
        return self._dims

    @property
    def policy(self):
        """The AllocationPolicy that drives reallocation."""
        return self._policy

    @property
    def ledger(self):
        """The CostLedger that records the work done on this cache."""
        return self._ledger

    @property
    def dtype(self):
        return self._dtype

    @property
    def element_size(self):
        """Bytes per element."""
        return self._dtype.itemsize

    @property
    def capacity(self):
        """The number of allocated rows."""
        return self._keys[0].shape[1]

    @property
    def valid_len(self):
        """The number of committed rows."""
        return self._valid_len

    @property
    def staged(self):
        """The number of rows past valid_len that hold uncommitted data."""
        return self._staged

    @property
    def padded_rows(self):
        """The number of rows past valid_len (staged or zero)."""
        return self.capacity - self._valid_len

    def keys(self, layer):
        """Read-only view of the full K buffer of a layer."""
        return _readonly(self._keys[layer])

    def values(self, layer):
        """Read-only view of the full V buffer of a layer."""
        return _readonly(self._values[layer])

    def committed(self, layer):
        """Read-only views (K, V) of the committed rows of a layer."""
        n = self._valid_len
        return _readonly(self._keys[layer][:, :n]), _readonly(self._values[layer][:, :n])

    # %% Mutations

    def _allocate(self, capacity):
        """Allocate new zeroed buffers and copy the committed rows over."""
        if self._staged:
            raise PlacementError("Cannot reallocate while rows are staged.")
        dims = self._dims
        n = self._valid_len
        shape = (dims.batch * dims.kv_heads, capacity, dims.head_dim)
        for layer in range(dims.layers):
            for buffers in (self._keys, self._values):
                new = np.zeros(shape, self._dtype)
                new[:, :n] = buffers[layer][:, :n]
                buffers[layer] = new
        row_elems = dims.batch * dims.kv_heads * dims.head_dim
        self._ledger.add(
            realloc_copy_elems=2 * dims.layers * row_elems * n,
            alloc_events=dims.layers,
            alloc_bytes=2 * dims.layers * row_elems * capacity * self.element_size,
        )
        logger.debug(f"{self._policy}: reallocated {n} rows into {capacity} rows")

    def reserve(self, n=1):
        """Make sure that n more rows fit past valid_len, reallocating
        according to the policy if needed. Returns True if a reallocation
        took place.
        """
        needed = self._valid_len + n
        if needed > self._dims.max_context:
            raise CapacityExceededError(
                f"Cannot hold {needed} rows, the max context is {self._dims.max_context}."
            )
        if needed <= self.capacity:
            return False
        capacity = self._policy.grown_capacity(
            self.capacity, needed, self._dims.max_context
        )
        self._allocate(capacity)
        return True

    def write_rows(self, layer, start, k_rows, v_rows):
        """Write K/V rows of one layer in place, starting at row start
        (which must be in the padded region). Rows are shaped
        ``[B * H_kv, n, d]``, or ``[B * H_kv, d]`` for a single row.
        The rows become staged.
        """
        k_rows = _as_rows(k_rows, self._dims, "k_rows")
        v_rows = _as_rows(v_rows, self._dims, "v_rows")
        if k_rows.shape != v_rows.shape:
            raise DimensionError(f"K/V rows differ: {k_rows.shape} vs {v_rows.shape}.")
        n = k_rows.shape[1]
        if start < self._valid_len:
            raise PlacementError(
                f"Cannot overwrite committed row {start} (valid_len={self._valid_len})."
            )
        if start + n > self.capacity:
            raise PlacementError(
                f"Rows {start}..{start + n - 1} exceed the capacity {self.capacity}."
            )
        self._keys[layer][:, start : start + n] = k_rows
        self._values[layer][:, start : start + n] = v_rows
        self._staged = max(self._staged, start + n - self._valid_len)
        self._ledger.add(append_write_elems=k_rows.size + v_rows.size)

    def move_row(self, src, dst):
        """Copy row src to row dst in all layers (both in the padded region)."""
        if min(src, dst) < self._valid_len or max(src, dst) >= self.capacity:
            raise PlacementError(f"Cannot move row {src} to {dst}.")
        for buffers in (self._keys, self._values):
            for buf in buffers:
                buf[:, dst] = buf[:, src]
        row_elems = self._dims.batch * self._dims.kv_heads * self._dims.head_dim
        self._ledger.add(append_write_elems=2 * self._dims.layers * row_elems)

    def commit(self, n=1):
        """Commit the first n staged rows."""
        if n > self._staged:
            raise ConsistencyError(f"Cannot commit {n} rows, only {self._staged} staged.")
        self._valid_len += n
        self._staged -= n

    def discard_staged(self):
        """Zero all staged rows, restoring the zero padding."""
        a, b = self._valid_len, self._valid_len + self._staged
        if b > a:
            for buffers in (self._keys, self._values):
                for buf in buffers:
                    buf[:, a:b] = 0
        self._staged = 0

    def clone(self, policy=None):
        """Get a new cache with a copy of the committed rows and a fresh
        ledger, e.g. as a scratch cache for a draft model.
        """
        policy = self._policy if policy is None else policy
        k_rows = [self.committed(layer)[0] for layer in range(self._dims.layers)]
        v_rows = [self.committed(layer)[1] for layer in range(self._dims.layers)]
        return new_cache(
            self._dims, policy, self._valid_len, k_rows, v_rows, dtype=self._dtype
        )


def _readonly(a):
    view = a.view()
    view.flags.writeable = False
    return view


def _as_rows(rows, dims, name):
    rows = np.asarray(rows)
    if rows.ndim == 2:
        rows = rows[:, None, :]
    expected = (dims.batch * dims.kv_heads, dims.head_dim)
    if rows.ndim != 3 or (rows.shape[0], rows.shape[2]) != expected:
        raise DimensionError(
            f"{name} must have shape [{expected[0]}, n, {expected[1]}], not {rows.shape}."
        )
    return rows


# %% Operations


def new_cache(
    dims, policy, prompt_len=0, prompt_k=None, prompt_v=None, *, dtype=np.float32
):
    """Create a KvCache holding prompt_len committed rows.

    The initial capacity follows the policy: exactly prompt_len for
    Iterative, N for Upfront, and the next multiple of r (at least r) for
    Bmc. One allocation covers the whole prompt. If prompt_k and
    prompt_v are given (one ``[B * H_kv, prompt_len, d]`` array per
    layer), they are written as the committed rows; otherwise zero rows
    are written. Either way the prompt rows count as append writes.
    """
    if prompt_len < 0:
        raise ValueError(f"prompt_len cannot be negative ({prompt_len}).")
    if prompt_len > dims.max_context:
        raise CapacityExceededError(
            f"A prompt of {prompt_len} rows exceeds the max context {dims.max_context}."
        )
    cache = KvCache(dims, policy, dtype=dtype)
    capacity = policy.initial_capacity(prompt_len, dims.max_context)
    if capacity > 0:
        cache._allocate(capacity)
    if (prompt_k is None) != (prompt_v is None):
        raise ValueError("new_cache() needs both prompt_k and prompt_v, or neither.")
    if prompt_k is None and prompt_len:
        zeros = np.zeros((dims.batch * dims.kv_heads, prompt_len, dims.head_dim), dtype)
        prompt_k = prompt_v = [zeros] * dims.layers
    if prompt_k is not None:
        if len(prompt_k) != dims.layers or len(prompt_v) != dims.layers:
            raise DimensionError(f"Prompt rows must be given for all {dims.layers} layers.")
        for layer in range(dims.layers):
            if np.shape(prompt_k[layer])[1] != prompt_len:
                raise DimensionError(f"Prompt rows of layer {layer} are not {prompt_len} long.")
            cache.write_rows(layer, 0, prompt_k[layer], prompt_v[layer])
        cache.commit(prompt_len)
    return cache


def append_token(cache, k_row, v_row):
    """Append one token: k_row and v_row hold one ``[B * H_kv, d]`` row
    per layer. Reallocates according to the policy. Returns the cache.
    """
    dims = cache.dims
    if len(k_row) != dims.layers or len(v_row) != dims.layers:
        raise DimensionError(f"append_token() needs rows for all {dims.layers} layers.")
    if cache.staged:
        raise PlacementError("Cannot append while speculative rows are staged.")
    cache.reserve(1)
    for layer in range(dims.layers):
        cache.write_rows(layer, cache.valid_len, k_row[layer], v_row[layer])
    cache.commit(1)
    return cache


def _check_closed_form(policy, dims, prompt_len):
    if not 0 <= prompt_len <= dims.max_context:
        raise ValueError(f"prompt_len must be in [0, {dims.max_context}].")
    if isinstance(policy, Bmc):
        policy.validate(dims.max_context)
        if dims.max_context % policy.r:
            raise DivisibilityError(
                f"The closed form needs r ({policy.r}) to divide N ({dims.max_context})."
            )
    elif not isinstance(policy, (Iterative, Upfront)):
        raise TypeError(f"Unknown allocation policy {policy!r}.")


def realloc_copy_closed_form(policy, dims, prompt_len=0):
    """The number of elements copied by reallocations while growing a
    cache from prompt_len rows to N rows.
    """
    _check_closed_form(policy, dims, prompt_len)
    e = dims.row_elems
    n, p = dims.max_context, prompt_len
    if isinstance(policy, Iterative):
        # Sum over appended rows of 2 * old_len
        return e * (n * (n - 1) - p * (p - 1))
    elif isinstance(policy, Upfront):
        return 0
    else:
        r = policy.r
        t = n // r
        a = policy.initial_capacity(p, n) // r
        # Reallocations copy j*r rows for j = a .. T-1
        return e * r * (t * (t - 1) - a * (a - 1))


def copy_total_closed_form(policy, dims, prompt_len=0):
    """The total number of elements moved (reallocation copies plus row
    writes, K and V) to build a cache of N rows, one token at a time.

    For Iterative this is B*L*N*(N+1)*D/G, for Upfront 2*B*L*N*D/G, and
    for Bmc(r) B*L*D*N*(T-1)/G + 2*B*L*N*D/G with T = N/r. A nonzero
    prompt_len counts the prompt as ingested in one allocation.
    """
    copies = realloc_copy_closed_form(policy, dims, prompt_len)
    return copies + 2 * dims.row_elems * dims.max_context
