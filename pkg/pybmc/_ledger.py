from dataclasses import dataclass, fields


@dataclass
class CostLedger:
    """Exact counters of the work done on a KV cache.

    * realloc_copy_elems: elements copied from old into new buffers.
    * append_write_elems: elements written for new (or staged) rows.
    * sdpa_macs: multiply-accumulates of the two attention matmuls.
    * alloc_events: buffer allocations, counted per layer (K/V pair).
    * alloc_bytes: bytes allocated for K and V buffers.

    Counters only ever grow. Ledgers of independent caches can be merged
    with ``+``; merging is associative and commutative.
    """

    realloc_copy_elems: int = 0
    append_write_elems: int = 0
    sdpa_macs: int = 0
    alloc_events: int = 0
    alloc_bytes: int = 0

    def add(self, **increments):
        """Increment one or more counters."""
        for name, value in increments.items():
            if name not in self.__dataclass_fields__:
                raise AttributeError(f"CostLedger has no counter {name!r}.")
            if value < 0:
                raise ValueError(f"Ledger counters cannot decrease ({name}={value}).")
            setattr(self, name, getattr(self, name) + int(value))

    def merge(self, other):
        """Get a new ledger holding the pairwise sum of both ledgers."""
        if not isinstance(other, CostLedger):
            raise TypeError(f"Can only merge CostLedger objects, not {other!r}.")
        return CostLedger(
            **{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)}
        )

    __add__ = merge

    def copy(self):
        return CostLedger(**self.to_dict())

    @property
    def moved_elems(self):
        """Copies plus writes: all elements moved into the buffers."""
        return self.realloc_copy_elems + self.append_write_elems

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}
