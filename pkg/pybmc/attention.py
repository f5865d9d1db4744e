"""
Masked scaled-dot-product attention over padded KV buffers.

The attention always runs over the full capacity of the cache, padded
rows included. A bias mask (0 for committed rows, -1e9 for padding) is
added to the scores before the softmax, so after the row-max subtraction
the padded terms underflow to exactly zero.

The reductions are done in a fixed order: scores reduce over d per
(query, key) pair, the softmax normalizer and the probability-weighted
sum of V accumulate sequentially over the rows. Trailing zero-probability
rows therefore add exact zeros, and the result over a padded buffer is
bitwise equal to the result over the committed rows only. This is what
makes token sequences identical across allocation policies.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._coreutils import BoundsError, DimensionError, DivisibilityError
from ._types import Iterative, Upfront, Bmc


MASK_VALUE = -1e9


@dataclass(frozen=True, eq=False)
class BiasMask:
    """Additive pre-softmax mask over the capacity of a cache. The same
    mask is used for all layers and all batch rows and heads.
    """

    values: np.ndarray
    valid_len: int

    @property
    def capacity(self):
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class AttentionQuery:
    """Query rows ``[B * H, t, d]`` (t=1 auto-regressive, t=k when
    verifying speculative candidates) and the score scale 1/sqrt(d).
    """

    q: np.ndarray
    scale: float = None

    def __post_init__(self):
        q = np.asarray(self.q)
        if q.ndim != 3 or q.shape[1] < 1:
            raise DimensionError(f"Query must have shape [B*H, t, d], not {q.shape}.")
        object.__setattr__(self, "q", q)
        if self.scale is None:
            object.__setattr__(self, "scale", 1.0 / math.sqrt(q.shape[2]))
        elif not self.scale > 0:
            raise ValueError(f"Attention scale must be positive, not {self.scale}.")

    @property
    def t(self):
        return self.q.shape[1]


def build_bias_mask(valid_len, capacity, dtype=np.float32):
    """Get a BiasMask with 0 for the first valid_len columns and -1e9 for
    the remaining (padded) columns.
    """
    if valid_len < 0 or valid_len > capacity:
        raise BoundsError(f"valid_len {valid_len} is outside [0, {capacity}].")
    values = np.full((capacity,), MASK_VALUE, dtype)
    values[:valid_len] = 0
    values.flags.writeable = False
    return BiasMask(values, valid_len)


def sdpa(query, cache, layer, mask, extra_mask=None, ledger=None):
    """Compute softmax(q @ K.T * scale + mask + extra_mask) @ V for one
    layer, over the full capacity of the cache.

    * query: an AttentionQuery with q shaped ``[B * H, t, d]``.
    * mask: the BiasMask for the cache capacity.
    * extra_mask: optional ``[t, capacity]`` array of 0 / -1e9 values,
      e.g. a causal or tree mask.
    * ledger: the CostLedger to charge the MACs to (default: the cache's).

    Under GQA each group of H / H_kv consecutive query heads reads the
    same KV head. Returns an array of shape ``[B * H, t, d]``.
    """
    if not isinstance(query, AttentionQuery):
        query = AttentionQuery(query)
    dims = cache.dims
    q = query.q
    t, capacity = query.t, cache.capacity
    expected = (dims.batch * dims.heads, t, dims.head_dim)
    if q.shape != expected:
        raise DimensionError(f"Query shape {q.shape} does not match {expected}.")
    if mask.capacity != capacity:
        raise DimensionError(
            f"Mask covers {mask.capacity} rows, the cache holds {capacity}."
        )
    keys, values = cache.keys(layer), cache.values(layer)
    out = _masked_attention(
        q, keys, values, query.scale, mask.values, extra_mask, dims.groups, dims.batch
    )
    ledger = cache.ledger if ledger is None else ledger
    ledger.add(sdpa_macs=2 * dims.batch * dims.heads * t * capacity * dims.head_dim)
    return out


def _probs(q, keys, scale, bias, extra_mask, groups, batch):
    """Post-softmax probabilities shaped ``[B, H_kv, G, t, capacity]``."""
    _, t, d = q.shape
    hkv = keys.shape[0] // batch
    capacity = keys.shape[1]
    # [B, H_kv, G, t, 1, d] against [B, H_kv, 1, 1, cap, d]
    q6 = q.reshape(batch, hkv, groups, t, 1, d)
    k6 = keys.reshape(batch, hkv, 1, 1, capacity, d)
    scores = (q6 * k6).sum(axis=-1) * q.dtype.type(scale)
    scores = scores + bias
    if extra_mask is not None:
        extra_mask = np.asarray(extra_mask, scores.dtype)
        if extra_mask.shape != (t, capacity):
            raise DimensionError(
                f"extra_mask must have shape {(t, capacity)}, not {extra_mask.shape}."
            )
        scores = scores + extra_mask
    # Stable softmax; the normalizer accumulates sequentially over the rows
    exp = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return exp / np.cumsum(exp, axis=-1)[..., -1:]


def _masked_attention(q, keys, values, scale, bias, extra_mask, groups, batch):
    bh, t, d = q.shape
    probs = _probs(q, keys, scale, bias, extra_mask, groups, batch)
    v6 = values.reshape(batch, keys.shape[0] // batch, 1, 1, keys.shape[1], d)
    # Weighted sum of V, reduced over the (non-contiguous) row axis in order
    out = (probs[..., None] * v6).sum(axis=-2)
    return out.reshape(bh, t, d)


def attention_probs(query, cache, layer, mask, extra_mask=None):
    """The post-softmax probabilities ``[B * H, t, capacity]``, for
    inspecting how much mass the padded rows receive.
    """
    if not isinstance(query, AttentionQuery):
        query = AttentionQuery(query)
    dims = cache.dims
    probs = _probs(
        query.q,
        cache.keys(layer),
        query.scale,
        mask.values,
        extra_mask,
        dims.groups,
        dims.batch,
    )
    return probs.reshape(dims.batch * dims.heads, query.t, cache.capacity)


def sdpa_flops_closed_form(policy, dims, t=1):
    """The MACs of all SDPA calls of a full N-token decode (t query rows
    per call): L*B*N*(N+1)*D for Iterative, 2*L*B*N^2*D for Upfront and
    L*B*N*(N+r)*D for Bmc(r).
    """
    b, layers, d, n = dims.batch, dims.layers, dims.hidden, dims.max_context
    if isinstance(policy, Iterative):
        macs = layers * b * n * (n + 1) * d
    elif isinstance(policy, Upfront):
        macs = 2 * layers * b * n * n * d
    elif isinstance(policy, Bmc):
        policy.validate(n)
        if n % policy.r:
            raise DivisibilityError(
                f"The closed form needs r ({policy.r}) to divide N ({n})."
            )
        macs = layers * b * n * (n + policy.r) * d
    else:
        raise TypeError(f"Unknown allocation policy {policy!r}.")
    return macs * t
