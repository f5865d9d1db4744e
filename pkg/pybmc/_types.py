"""
Value types shared by all modules: the model dimensions and the
allocation policies.

An allocation policy decides how many rows the K/V buffers hold. There
are three of them:

* Iterative: the buffers always hold exactly the committed rows, so every
  appended token reallocates and copies the whole cache.
* Upfront: the buffers are allocated once for the maximum context N and
  padded with zeros.
* Bmc(r): the buffers grow in chunks of r rows. A reallocation happens
  once every r tokens, the rows in between are written in place.

Policies have a textual form ("iterative", "upfront", "bmc(16)") that is
used on the command line and in reports; ``policy_from_name()`` parses it
back.
"""

import math
import dataclasses
from dataclasses import dataclass

from ._coreutils import DimensionError


@dataclass(frozen=True)
class ModelDims:
    """Dimensions of the transformer whose KV cache is managed.

    * batch (B), layers (L), heads (H), head_dim (d) and max_context (N).
    * groups (G): number of query heads sharing one KV head. G=1 is MHA.

    The hidden size D = H * d is derived, as is the number of KV heads
    H / G.
    """

    batch: int = 1
    layers: int = 1
    heads: int = 1
    head_dim: int = 1
    max_context: int = 1
    groups: int = 1

    def __post_init__(self):
        for name in ("batch", "layers", "heads", "head_dim", "max_context", "groups"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise TypeError(f"ModelDims.{name} must be an int, not {value!r}.")
            if value < 1:
                raise DimensionError(f"ModelDims.{name} must be positive, not {value}.")
        if self.groups > self.heads or self.heads % self.groups:
            raise DimensionError(
                f"ModelDims.groups ({self.groups}) must divide heads ({self.heads})."
            )

    @property
    def hidden(self):
        """The hidden size D = H * d."""
        return self.heads * self.head_dim

    @property
    def kv_heads(self):
        """The number of key/value heads H / G."""
        return self.heads // self.groups

    @property
    def kv_hidden(self):
        """Width of one K (or V) row over all KV heads: D / G."""
        return self.kv_heads * self.head_dim

    @property
    def row_elems(self):
        """Elements of one token row in one tensor, over batch and layers."""
        return self.batch * self.layers * self.kv_hidden

    def replace(self, **kwargs):
        """Get a copy with some fields replaced."""
        return dataclasses.replace(self, **kwargs)


# %% Policies


class AllocationPolicy:
    """Base class for the allocation policies. Don't instantiate directly."""

    name = ""

    def chunk(self, max_context):
        """The number of rows added per reallocation (r)."""
        raise NotImplementedError()

    def allocations(self, max_context):
        """The number of allocations T over a full decode of N tokens."""
        return math.ceil(max_context / self.chunk(max_context))

    def initial_capacity(self, prompt_len, max_context):
        """The capacity of a fresh cache that holds prompt_len rows."""
        raise NotImplementedError()

    def grown_capacity(self, capacity, needed, max_context):
        """The capacity after growing a cache so it can hold needed rows."""
        raise NotImplementedError()

    def validate(self, max_context):
        """Check that this policy can be used with the given N."""
        pass

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Iterative(AllocationPolicy):
    """Reallocate and copy the KV cache for every appended token."""

    name = "iterative"

    def chunk(self, max_context):
        return 1

    def initial_capacity(self, prompt_len, max_context):
        return prompt_len

    def grown_capacity(self, capacity, needed, max_context):
        return needed


@dataclass(frozen=True)
class Upfront(AllocationPolicy):
    """Allocate the maximum context once, pad with zeros."""

    name = "upfront"

    def chunk(self, max_context):
        return max_context

    def initial_capacity(self, prompt_len, max_context):
        return max_context

    def grown_capacity(self, capacity, needed, max_context):
        return max_context


@dataclass(frozen=True)
class Bmc(AllocationPolicy):
    """Grow the KV cache in chunks of r zero-padded rows."""

    r: int = 1
    name = "bmc"

    def __post_init__(self):
        if not isinstance(self.r, int) or isinstance(self.r, bool):
            raise TypeError(f"Bmc chunk must be an int, not {self.r!r}.")
        if self.r < 1:
            raise DimensionError(f"Bmc chunk must be positive, not {self.r}.")

    @classmethod
    def from_allocs(cls, allocs, max_context):
        """Create the policy that allocates T times for a context of N rows."""
        if not 1 <= allocs <= max_context:
            raise DimensionError(
                f"Number of allocations must be in [1, {max_context}], not {allocs}."
            )
        return cls(math.ceil(max_context / allocs))

    def chunk(self, max_context):
        return self.r

    def initial_capacity(self, prompt_len, max_context):
        # At least one chunk, the last chunk may be ragged
        return min(self.r * math.ceil(max(prompt_len, 1) / self.r), max_context)

    def grown_capacity(self, capacity, needed, max_context):
        extra = self.r * math.ceil((needed - capacity) / self.r)
        return min(capacity + extra, max_context)

    def validate(self, max_context):
        if self.r > max_context:
            raise DimensionError(
                f"Bmc chunk ({self.r}) cannot exceed the max context ({max_context})."
            )

    def __str__(self):
        return f"bmc({self.r})"


def policy_from_name(name):
    """Get an AllocationPolicy from its name: "iterative", "upfront",
    "bmc(16)". The forms "bmc:16" and "bmc16" are accepted too.
    """
    if isinstance(name, AllocationPolicy):
        return name
    if not isinstance(name, str):
        raise TypeError(f"policy_from_name() expects a str, not {name!r}.")
    original_name = name
    name = name.replace(" ", "").lower()
    if name == "iterative":
        return Iterative()
    elif name == "upfront":
        return Upfront()
    elif name.startswith("bmc"):
        inner = name[3:]
        if inner.startswith("(") and inner.endswith(")"):
            inner = inner[1:-1]
        elif inner.startswith(":"):
            inner = inner[1:]
        if not inner.isdigit():
            raise ValueError(f"Invalid policy string '{original_name}': need a chunk.")
        return Bmc(int(inner))
    else:
        raise ValueError(f"Invalid policy string '{original_name}'.")
