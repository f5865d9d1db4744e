"""
The analytical time model of the attention block, and solvers for the
number of allocations T that minimizes it.

Per chunk i (rows i*r .. (i+1)*r - 1) the model charges one copy of
(i+1)*r rows, one allocation constant C0, and r SDPA calls over (i+1)*r
rows. Summed over the T = N/r chunks this gives the closed form::

    2*C1*N*T/a + 2*C1*N/a + T*C0 + C1*N^2/b + C1*N^2/(b*T)

with C1 = B*L*D, ``a`` the copy bandwidth normalized to elements
(``CostParams.alpha_bw_norm``) and ``b`` the compute rate. Ignoring C0,
the optimum is T = sqrt(N * a / (2 * b)) = sqrt(C' * N).

Note that the copy term charges (i+1)*r rows per chunk, while a real
cache copies only the i*r rows that hold data (see the ledger). The two
are kept as distinct quantities.

All functions are pure and accept numpy arrays for T, so a full sweep
over T = 1..N is a single vectorized evaluation.
"""

import math
import dataclasses
from dataclasses import dataclass

import numpy as np

from ._coreutils import CalibrationError, DivisibilityError


@dataclass(frozen=True)
class CostParams:
    """Constants of the analytical model.

    * c1: element scale B*L*D.
    * alpha_bw: effective copy bandwidth (bytes/s).
    * beta_c: effective compute rate (MAC/s).
    * c0: constant time per allocation (s).
    * elem_bytes: bytes per element (2 for fp16).
    * n: max context N.
    * k: speculated candidates per iteration.
    * m: mean accepted tokens per iteration.
    * beta_prime_c: compute rate of the batched verification (MAC/s),
      defaults to beta_c.
    * groups: GQA group size G.
    * quant: quantization factor Q of the KV storage.
    """

    c1: float = 1.0
    alpha_bw: float = 1.0
    beta_c: float = 1.0
    c0: float = 0.0
    elem_bytes: int = 2
    n: int = 1
    k: int = 1
    m: float = 1.0
    beta_prime_c: float = None
    groups: int = 1
    quant: float = 1.0

    def __post_init__(self):
        if self.beta_prime_c is None:
            object.__setattr__(self, "beta_prime_c", self.beta_c)
        for name in ("c1", "alpha_bw", "beta_c", "beta_prime_c", "elem_bytes"):
            if not getattr(self, name) > 0:
                raise ValueError(f"CostParams.{name} must be positive.")
        if self.c0 < 0:
            raise ValueError("CostParams.c0 cannot be negative.")
        if self.n < 1:
            raise ValueError("CostParams.n must be at least 1.")
        if self.m < 1 or self.k < self.m:
            raise ValueError(f"CostParams needs 1 <= m <= k, got m={self.m}, k={self.k}.")
        if self.groups < 1 or self.quant < 1:
            raise ValueError("CostParams.groups and CostParams.quant must be >= 1.")

    @classmethod
    def from_dims(cls, dims, **kwargs):
        """Create params for the given ModelDims (sets c1, n and groups)."""
        kwargs.setdefault("c1", dims.batch * dims.layers * dims.hidden)
        kwargs.setdefault("n", dims.max_context)
        kwargs.setdefault("groups", dims.groups)
        return cls(**kwargs)

    @classmethod
    def from_cprime(cls, n, cprime, **kwargs):
        """Create unit-rate params (beta_c = 1) that realize the given C'."""
        if not cprime > 0:
            raise ValueError(f"C' must be positive, not {cprime}.")
        elem_bytes = kwargs.pop("elem_bytes", 2)
        groups = kwargs.pop("groups", 1)
        quant = kwargs.pop("quant", 1.0)
        # alpha_bw_norm = 2 * cprime * beta_c
        alpha_bw = cprime * elem_bytes / (groups * quant)
        return cls(
            n=n,
            alpha_bw=alpha_bw,
            beta_c=1.0,
            elem_bytes=elem_bytes,
            groups=groups,
            quant=quant,
            **kwargs,
        )

    def replace(self, **kwargs):
        return dataclasses.replace(self, **kwargs)

    @property
    def alpha_bw_norm(self):
        """The copy rate in the units of the closed form: the whole-cache
        copy term is 2*C1*N*(T+1) / alpha_bw_norm. Equal to alpha_bw for
        fp16 (elem_bytes=2) without GQA or quantization.
        """
        return 2 * self.alpha_bw * self.groups * self.quant / self.elem_bytes

    @property
    def c_prime(self):
        """The platform constant C' = alpha_bw_norm / (2 * beta_c)."""
        return self.alpha_bw_norm / (2 * self.beta_c)

    @property
    def c_prime_sd(self):
        """The constant for speculative decoding: k * a / (2 * m * beta')."""
        return self.k * self.alpha_bw_norm / (2 * self.m * self.beta_prime_c)


@dataclass(frozen=True)
class OptimalT:
    """An optimal number of allocations: the continuous solution and the
    power of two that is used in practice.
    """

    continuous: float
    rounded: int

    def chunk(self, n):
        """The chunk size r = N / T for the rounded T."""
        return math.ceil(n / self.rounded)


# %% Per-chunk terms


def chunk_copy_time(i, r, p):
    """Time to copy the cache when chunk i (of size r) is allocated."""
    if i < 0 or r < 1:
        raise ValueError(f"chunk_copy_time() needs i >= 0 and r >= 1, got {i}, {r}.")
    return (2 * p.elem_bytes) * p.c1 * ((i + 1) * r) / (p.alpha_bw * p.groups * p.quant)


def sdpa_time(i, r, p):
    """Time of one SDPA call over the (i+1)*r rows of chunk i."""
    if i < 0 or r < 1:
        raise ValueError(f"sdpa_time() needs i >= 0 and r >= 1, got {i}, {r}.")
    return 2 * p.c1 * ((i + 1) * r) / p.beta_c


def chunk_time(i, r, p):
    """Time for the r iterations of chunk i: copy, allocation and SDPA."""
    return chunk_copy_time(i, r, p) + p.c0 + r * sdpa_time(i, r, p)


def total_time_chunked(T, p):
    """The explicit sum of chunk_time() over all T chunks. T must divide N."""
    if not 1 <= T <= p.n:
        raise ValueError(f"T must be in [1, {p.n}], not {T}.")
    if p.n % T:
        raise DivisibilityError(f"T ({T}) does not divide N ({p.n}).")
    r = p.n // T
    return math.fsum(chunk_time(i, r, p) for i in range(T))


# %% Closed forms


def total_time(T, p):
    """The closed-form time of a full N-token decode with T allocations.
    T may be a number or a numpy array.
    """
    a, n = p.alpha_bw_norm, p.n
    T = _check_T(T, n)
    return (
        2 * p.c1 * n * T / a
        + 2 * p.c1 * n / a
        + T * p.c0
        + p.c1 * n**2 / p.beta_c
        + p.c1 * n**2 / (p.beta_c * T)
    )


def total_time_sd(T, p):
    """The closed-form time of a full N-token decode with speculative
    decoding: k candidates verified per iteration, m accepted on average.
    """
    a, n = p.alpha_bw_norm, p.n
    T = _check_T(T, n)
    return (
        2 * p.c1 * n * (T + 1) / a
        + T * p.c0
        + p.c1 * p.k * (n**2 / p.m) * (1 + 1 / T) / p.beta_prime_c
    )


def iterative_time(p):
    """Time of the iterative scheme, which allocates for every token (T = N)."""
    return total_time(p.n, p)


def bmc_sqrt_time(p):
    """Time with T = sqrt(N) allocations (not rounded)."""
    return total_time(math.sqrt(p.n), p)


def padding_overhead_ratio(n):
    """The factor by which T = sqrt(N) increases the SDPA work over the
    iterative scheme: (1 + 1/sqrt(N)) / (1 + 1/N).
    """
    return (1 + 1 / math.sqrt(n)) / (1 + 1 / n)


def _check_T(T, n):
    T_arr = np.asarray(T)
    if np.any(T_arr < 1) or np.any(T_arr > n):
        raise ValueError(f"T must be in [1, {n}].")
    return T_arr.astype(float) if T_arr.ndim else float(T)


# %% Solvers


def round_pow2(x, n):
    """Round x to the nearest power of two in log-space (ties round up),
    clamped to [1, largest power of two <= n].
    """
    if x <= 1:
        return 1
    rounded = 2 ** math.floor(math.log2(x) + 0.5)
    return min(rounded, 2 ** math.floor(math.log2(n)))


def integer_argmin_T(p, sd=False):
    """Exhaustively find the integer T in [1, N] that minimizes the
    (speculative) total time.
    """
    Ts = np.arange(1, p.n + 1)
    times = total_time_sd(Ts, p) if sd else total_time(Ts, p)
    return int(Ts[int(np.argmin(times))])


def _pow2_argmin(p, sd):
    candidates = [2**e for e in range(int(math.log2(p.n)) + 1)]
    func = total_time_sd if sd else total_time
    return min(candidates, key=lambda T: (func(T, p), T))


def optimal_T(p):
    """The T that minimizes total_time(): the continuous solution
    sqrt(N * alpha_bw_norm / (2 * beta_c)), and that value rounded to a
    power of two. With a nonzero C0 the continuous value includes C0 and
    the power of two is found by exhaustive evaluation.
    """
    if p.c0 == 0:
        continuous = math.sqrt(p.n * p.c_prime)
        return OptimalT(continuous, round_pow2(continuous, p.n))
    copy_slope = 2 * p.c1 * p.n / p.alpha_bw_norm + p.c0
    continuous = math.sqrt(p.c1 * p.n**2 / (p.beta_c * copy_slope))
    return OptimalT(continuous, _pow2_argmin(p, sd=False))


def optimal_T_sd(p):
    """The T that minimizes total_time_sd(): sqrt(N * k * a / (2 * m * b'))
    and its power-of-two rounding. T scales with sqrt(N / m).
    """
    if p.c0 == 0:
        continuous = math.sqrt(p.n * p.c_prime_sd)
        return OptimalT(continuous, round_pow2(continuous, p.n))
    copy_slope = 2 * p.c1 * p.n / p.alpha_bw_norm + p.c0
    continuous = math.sqrt(p.c1 * p.k * p.n**2 / (p.m * p.beta_prime_c * copy_slope))
    return OptimalT(continuous, _pow2_argmin(p, sd=True))


def calibrate(measured_copy_bw, measured_mac_rate, params=None):
    """Get CostParams with the measured copy bandwidth (bytes/s) and
    compute rate (MAC/s). The derived constant is available as
    ``params.c_prime``.
    """
    if not measured_copy_bw > 0 or not measured_mac_rate > 0:
        raise CalibrationError(
            f"Measurements must be positive, got copy={measured_copy_bw}, "
            f"mac={measured_mac_rate}."
        )
    params = CostParams() if params is None else params
    ratio = params.beta_prime_c / params.beta_c
    return params.replace(
        alpha_bw=float(measured_copy_bw),
        beta_c=float(measured_mac_rate),
        beta_prime_c=float(measured_mac_rate) * ratio,
    )
