"""
A deterministic toy transformer that drives the KV cache through real
decode loops.

The model has no tokenizer, no positional encoding and no LayerNorm: a
token embedding goes through L blocks of (attention + output projection,
residual) and (two-layer ReLU MLP, residual), and the unembedding gives
the logits. Weights are drawn from a counter-based Philox stream, so a
model is fully determined by (seed, dims, vocab).

Decoding is greedy. Each decode iteration commits the K/V rows of the
pending token and produces the next pending token. Because the attention
reduces in a fixed order (see ``pybmc.attention``), the generated tokens
are identical for every allocation policy, and speculative decoding is
lossless.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from ._coreutils import logger, CapacityExceededError, NumericError
from ._types import ModelDims, Iterative, Upfront
from ._ledger import CostLedger
from ._cache import new_cache
from .attention import AttentionQuery, MASK_VALUE, build_bias_mask, sdpa
from .specdecode import SpeculationTree, admit_candidates, greedy_accept
from .specdecode import tree_mask, place_candidates, verify_and_commit, wasted_rows


WEIGHT_RANGE = 0.1
LOGIT_CLAMP = 1e4


def exact_reference_attention(q, k, v, mask=None):
    """Attention over exactly the given rows, without any padding.

    q is ``[B * H, t, d]``, k and v are ``[B * H_kv, n, d]``. Query heads
    are mapped onto KV heads in groups, as in ``sdpa()``. mask is an
    optional additive ``[t, n]`` array (e.g. causal). Computed in float64
    with a stable softmax; the result has the dtype of q.
    """
    q = np.asarray(q)
    k = np.asarray(k, np.float64)
    v = np.asarray(v, np.float64)
    groups = q.shape[0] // k.shape[0]
    if groups > 1:
        k = np.repeat(k, groups, axis=0)
        v = np.repeat(v, groups, axis=0)
    scores = q.astype(np.float64) @ k.transpose(0, 2, 1) / np.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores + mask
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    return (probs @ v).astype(q.dtype)


class ToyModel:
    """A small deterministic transformer for exercising the KV cache."""

    def __init__(self, dims, vocab=256, seed=0, dtype=np.float32):
        if not isinstance(dims, ModelDims):
            raise TypeError(f"ToyModel needs ModelDims, not {dims!r}.")
        if vocab < 2:
            raise ValueError(f"ToyModel needs a vocab of at least 2, not {vocab}.")
        if seed < 0:
            raise ValueError(f"ToyModel seed cannot be negative ({seed}).")
        self.dims = dims
        self.vocab = vocab
        self.seed = seed
        self.dtype = np.dtype(dtype)

        d, dkv = dims.hidden, dims.kv_hidden
        self.embedding = self._weights(0, (vocab, d))
        self.unembedding = self._weights(1, (vocab, d))
        self.layers = []
        for layer in range(dims.layers):
            base = 2 + 6 * layer
            self.layers.append(
                {
                    "wq": self._weights(base + 0, (d, d)),
                    "wk": self._weights(base + 1, (d, dkv)),
                    "wv": self._weights(base + 2, (d, dkv)),
                    "wo": self._weights(base + 3, (d, d)),
                    "w1": self._weights(base + 4, (d, 4 * d)),
                    "w2": self._weights(base + 5, (4 * d, d)),
                }
            )

    def __repr__(self):
        return f"<ToyModel seed={self.seed} vocab={self.vocab} {self.dims}>"

    def _weights(self, index, shape):
        # One independent Philox stream per weight matrix
        bitgen = np.random.Philox(key=self.seed).jumped(index)
        w = np.random.Generator(bitgen).uniform(-WEIGHT_RANGE, WEIGHT_RANGE, shape)
        return w.astype(self.dtype)

    # %% Building blocks

    def embed(self, tokens):
        """Embed token ids ``[B]`` into hidden states ``[B, D]``."""
        return self.embedding[np.asarray(tokens)]

    def _qkv(self, layer, h):
        w = self.layers[layer]
        dims = self.dims
        b = h.shape[0]
        q = (h @ w["wq"]).reshape(b * dims.heads, dims.head_dim)
        k = (h @ w["wk"]).reshape(b * dims.kv_heads, dims.head_dim)
        v = (h @ w["wv"]).reshape(b * dims.kv_heads, dims.head_dim)
        return q, k, v

    def _block_out(self, layer, h, attn):
        w = self.layers[layer]
        h = h + attn @ w["wo"]
        return h + np.maximum(h @ w["w1"], 0) @ w["w2"]

    def logits(self, h):
        """Logits ``[B, vocab]`` for hidden states ``[B, D]``."""
        return np.clip(h @ self.unembedding.T, -LOGIT_CLAMP, LOGIT_CLAMP)

    # %% Passes

    def prefill(self, prompt):
        """Run the prompt ``[B, P]`` with causal attention. Returns the
        per-layer K and V rows (``[B * H_kv, P, d]``) and the logits
        after the last prompt token.
        """
        dims = self.dims
        b, p = prompt.shape
        h = self.embedding[prompt]  # [B, P, D]
        causal = np.triu(np.full((p, p), MASK_VALUE), 1)
        k_rows, v_rows = [], []
        for layer, w in enumerate(self.layers):
            q = _split_heads(h @ w["wq"], dims.heads, dims.head_dim)
            k = _split_heads(h @ w["wk"], dims.kv_heads, dims.head_dim)
            v = _split_heads(h @ w["wv"], dims.kv_heads, dims.head_dim)
            k_rows.append(k)
            v_rows.append(v)
            attn = exact_reference_attention(q, k, v, causal)
            attn = attn.reshape(b, dims.heads, p, dims.head_dim).transpose(0, 2, 1, 3)
            h = self._block_out(layer, h, attn.reshape(b, p, dims.hidden))
        return k_rows, v_rows, self.logits(h[:, -1])

    def decode_step(self, cache, tokens, ledger=None, layers=None):
        """Commit the K/V rows of tokens ``[B]`` and return the logits of
        the next token, plus whether the cache reallocated.
        """
        dims = self.dims
        realloc = cache.reserve(1)
        row = cache.valid_len
        mask = build_bias_mask(row + 1, cache.capacity)
        h = self.embed(tokens)
        for layer in range(dims.layers) if layers is None else layers:
            q, k, v = self._qkv(layer, h)
            cache.write_rows(layer, row, k, v)
            attn = sdpa(AttentionQuery(q[:, None, :]), cache, layer, mask, ledger=ledger)
            h = self._block_out(layer, h, attn.reshape(h.shape[0], dims.hidden))
        cache.commit(1)
        return self.logits(h), realloc

    def verify(self, cache, tree, ledger=None):
        """Stage the tree's nodes in the padded rows and compute the
        logits after each node in one batched pass: ``[k, B, vocab]``.
        """
        dims = self.dims
        start, capacity = cache.valid_len, cache.capacity
        mask = build_bias_mask(start + tree.size, capacity)
        extra = tree_mask(tree, start, capacity)
        hs = [self.embed(tree.tokens[j]) for j in range(tree.size)]
        for layer in range(dims.layers):
            qkv = [self._qkv(layer, h) for h in hs]
            k_rows = np.stack([x[1] for x in qkv], axis=1)
            v_rows = np.stack([x[2] for x in qkv], axis=1)
            place_candidates(cache, tree, k_rows, v_rows, layer=layer)
            q = np.stack([x[0] for x in qkv], axis=1)
            out = sdpa(AttentionQuery(q), cache, layer, mask, extra, ledger=ledger)
            hs = [
                self._block_out(layer, h, out[:, j].reshape(h.shape[0], dims.hidden))
                for j, h in enumerate(hs)
            ]
        return np.stack([self.logits(h) for h in hs])


def _split_heads(x, heads, head_dim):
    b, p, _ = x.shape
    return x.reshape(b, p, heads, head_dim).transpose(0, 2, 1, 3).reshape(
        b * heads, p, head_dim
    )


# %% Proposers


class SelfProposer:
    """Propose the model's own greedy continuation as a chain of depth
    candidates, drafted on a scratch copy of the cache. Optionally the
    last skip_layers layers are skipped while drafting, which makes the
    draft cheaper and its acceptance partial.
    """

    def __init__(self, depth, skip_layers=0):
        if depth < 0 or skip_layers < 0:
            raise ValueError("SelfProposer needs depth >= 0 and skip_layers >= 0.")
        self.depth = depth
        self.skip_layers = skip_layers

    def __repr__(self):
        return f"<SelfProposer depth={self.depth} skip_layers={self.skip_layers}>"

    def draft(self, model, cache, pending, n, skip_layers=0):
        """Greedily draft n tokens after the pending tokens."""
        scratch = cache.clone(Upfront())
        layers = range(model.dims.layers - skip_layers)
        tokens = [np.asarray(pending)]
        for _ in range(n):
            logits, _ = model.decode_step(scratch, tokens[-1], CostLedger(), layers)
            tokens.append(np.argmax(logits, axis=-1))
        return tokens[1:]

    def propose(self, model, cache, pending, max_nodes):
        n = max(0, min(self.depth, max_nodes - 1))
        skip = min(self.skip_layers, model.dims.layers - 1)
        drafted = self.draft(model, cache, pending, n, skip)
        return SpeculationTree.chain(np.stack([np.asarray(pending)] + drafted))


class ScriptedProposer(SelfProposer):
    """Propose chains whose acceptance length follows a script: in
    iteration i, the first lengths[i % len(lengths)] - 1 candidates are
    the exact greedy continuation and the next one is wrong. Useful to
    inject exact acceptance sequences.
    """

    def __init__(self, lengths, depth=None):
        lengths = [int(m) for m in np.atleast_1d(lengths)]
        if not lengths or min(lengths) < 1:
            raise ValueError("ScriptedProposer needs acceptance lengths >= 1.")
        super().__init__(max(lengths) if depth is None else depth)
        self.lengths = lengths
        self._count = 0

    def __repr__(self):
        return f"<ScriptedProposer lengths={self.lengths} depth={self.depth}>"

    def propose(self, model, cache, pending, max_nodes):
        m = self.lengths[self._count % len(self.lengths)]
        self._count += 1
        n = max(0, min(self.depth, max_nodes - 1))
        exact = min(m, n)
        drafted = self.draft(model, cache, pending, exact)
        if exact == m:
            # The m-th candidate is made wrong, so exactly m tokens are accepted
            drafted[-1] = (drafted[-1] + 1) % model.vocab
        while len(drafted) < n:
            drafted.append(drafted[-1])
        return SpeculationTree.chain(np.stack([np.asarray(pending)] + drafted))


def proposer_from_name(name):
    """Get a proposer from a string: "script:<m>[,<m>...]" or
    "self:<depth>[:<skip_layers>]". Returns None for "off".
    """
    kind, _, arg = name.partition(":")
    try:
        if kind == "off" and not arg:
            return None
        elif kind == "script":
            return ScriptedProposer([int(x) for x in arg.split(",")])
        elif kind == "self":
            depth, _, skip = arg.partition(":")
            return SelfProposer(int(depth), int(skip or 0))
    except ValueError:
        pass
    raise ValueError(f"Invalid speculation config {name!r}.")


# %% Reports


@dataclass
class IterationRecord:
    """What happened in one decode iteration."""

    index: int
    wall_s: float
    realloc: bool
    accepted: int = 1
    staged: int = 0
    wasted: int = 0

    def to_dict(self, include_timing=True):
        d = dict(self.__dict__)
        if not include_timing:
            d.pop("wall_s")
        return d


@dataclass
class DecodeReport:
    """The result of a decode run."""

    policy: str
    dims: ModelDims
    seed: int
    prompt_len: int
    tokens: list
    next_token: list
    per_iteration: list = field(default_factory=list)
    ledgers: dict = field(default_factory=dict)

    @property
    def ledger(self):
        """All module ledgers merged."""
        total = CostLedger()
        for ledger in self.ledgers.values():
            total = total + ledger
        return total

    @property
    def wall_s(self):
        return sum(rec.wall_s for rec in self.per_iteration)

    @property
    def iterations(self):
        return len(self.per_iteration)

    def to_dict(self, include_timing=True):
        return {
            "policy": self.policy,
            "dims": dict(self.dims.__dict__),
            "seed": self.seed,
            "prompt_len": self.prompt_len,
            "tokens": self.tokens,
            "next_token": self.next_token,
            "per_iteration": [r.to_dict(include_timing) for r in self.per_iteration],
            "ledger": self.ledger.to_dict(),
            "ledgers": {k: v.to_dict() for k, v in self.ledgers.items()},
        }


# %% Decode loops


def _prepare(model, policy, prompt, steps):
    prompt = np.asarray(prompt, np.int64)
    if prompt.ndim == 1:
        prompt = np.broadcast_to(prompt, (model.dims.batch, prompt.shape[0]))
    if prompt.ndim != 2 or prompt.shape[0] != model.dims.batch:
        raise ValueError(f"Prompt must have shape [{model.dims.batch}, P].")
    if prompt.shape[1] < 1:
        raise ValueError("The prompt must hold at least one token.")
    if steps < 0:
        raise ValueError(f"steps cannot be negative ({steps}).")
    if prompt.shape[1] + steps > model.dims.max_context:
        raise CapacityExceededError(
            f"A prompt of {prompt.shape[1]} plus {steps} steps exceeds the "
            f"max context {model.dims.max_context}."
        )
    k_rows, v_rows, logits = model.prefill(np.ascontiguousarray(prompt))
    _check_finite(logits, -1)
    cache = new_cache(model.dims, policy, prompt.shape[1], k_rows, v_rows, dtype=model.dtype)
    return cache, np.argmax(logits, axis=-1)


def _check_finite(logits, iteration):
    if np.isnan(logits).any():
        raise NumericError(f"NaN logits in iteration {iteration}.", iteration)


def _report(model, policy, prompt_len, seed, tokens, pending, records, cache, attn):
    return DecodeReport(
        policy=str(policy),
        dims=model.dims,
        seed=seed,
        prompt_len=prompt_len,
        tokens=np.stack(tokens, axis=1).tolist() if tokens else [[] for _ in pending],
        next_token=np.asarray(pending).tolist(),
        per_iteration=records,
        ledgers={"cache": cache.ledger, "attention": attn},
    )


def generate(model, policy, prompt, steps, seed=0):
    """Greedily decode steps tokens after the prompt, one token per
    iteration, with the KV cache under the given policy. The seed is
    only recorded in the report; the model and the prompt carry all
    randomness.
    """
    cache, pending = _prepare(model, policy, prompt, steps)
    attn = CostLedger()
    tokens, records = [], []
    for i in range(steps):
        t0 = time.perf_counter()
        logits, realloc = model.decode_step(cache, pending, attn)
        _check_finite(logits, i)
        tokens.append(pending)
        pending = np.argmax(logits, axis=-1)
        records.append(IterationRecord(i, time.perf_counter() - t0, realloc))
    prompt_len = np.shape(prompt)[-1]
    return _report(model, policy, prompt_len, seed, tokens, pending, records, cache, attn)


def generate_speculative(model, policy, prompt, steps, proposer, seed=0):
    """Decode steps tokens with speculative decoding: per iteration the
    proposer's candidate tree is staged in the padded rows, verified in
    one batched pass, and the longest greedy-matching path is committed.
    Produces the same tokens as ``generate()``. As there, the seed is
    only recorded in the report.
    """
    if isinstance(policy, Iterative):
        raise ValueError("Speculative decoding needs a policy with padded rows.")
    cache, pending = _prepare(model, policy, prompt, steps)
    n_max = model.dims.max_context
    attn = CostLedger()
    tokens, records = [], []
    i = 0
    while len(tokens) < steps:
        t0 = time.perf_counter()
        max_nodes = min(steps - len(tokens), n_max - cache.valid_len)
        tree = admit_candidates(cache, proposer.propose(model, cache, pending, max_nodes))
        if tree.size == 0:
            # No padded rows left, commit the pending token the regular way
            logits, realloc = model.decode_step(cache, pending, attn)
            _check_finite(logits, i)
            tokens.append(pending)
            pending = np.argmax(logits, axis=-1)
            records.append(IterationRecord(i, time.perf_counter() - t0, realloc))
        else:
            allocs = cache.ledger.alloc_events
            logits = model.verify(cache, tree, attn)
            _check_finite(logits, i)
            predicted = np.argmax(logits, axis=-1)
            result = greedy_accept(tree, predicted)
            wasted = wasted_rows(cache)
            verify_and_commit(cache, tree, result)
            assert cache.ledger.alloc_events == allocs
            tokens.extend(tree.tokens[j] for j in result.accepted_path)
            pending = predicted[result.accepted_path[-1]]
            records.append(
                IterationRecord(
                    i, time.perf_counter() - t0, False, result.m, tree.size, wasted
                )
            )
        logger.debug(f"Speculative iteration {i}: accepted {records[-1].accepted}")
        i += 1
    prompt_len = np.shape(prompt)[-1]
    return _report(model, policy, prompt_len, seed, tokens, pending, records, cache, attn)
