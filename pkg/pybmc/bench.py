"""
Microbenchmarks for calibrating the cost model, and the policy/T sweep.

The sweep runs the decode simulator for every (policy, T) point and
records the ledger, the median wall time over the repetitions and the
analytical ``total_time(T)`` for overlay. Ledgers are hardware
independent; wall times are informational.
"""

import sys
import math
import time
import statistics
from dataclasses import dataclass

import numpy as np

from ._coreutils import logger, CalibrationError, ConsistencyError, DimensionError
from ._types import ModelDims, Iterative, Upfront, Bmc
from .costmodel import CostParams, calibrate, total_time, optimal_T, optimal_T_sd
from .sim import ToyModel, generate, generate_speculative, proposer_from_name
from .report import SweepPoint, SweepReport, FORMATS, write_report, dumps


POLICY_NAMES = ("iterative", "upfront", "bmc")

# A measurement must span this many ticks of the timer
MIN_TIMER_TICKS = 100


# %% Microbenchmarks


def _best_time(func, duration, min_repeats=3):
    """Run func repeatedly for about duration seconds, return the best time."""
    times = []
    t_end = time.perf_counter() + duration
    while len(times) < min_repeats or time.perf_counter() < t_end:
        t0 = time.perf_counter()
        func()
        times.append(time.perf_counter() - t0)
    best = min(times)
    resolution = time.get_clock_info("perf_counter").resolution
    if best < MIN_TIMER_TICKS * resolution:
        raise CalibrationError(
            f"Measured {best:.3g} s, below {MIN_TIMER_TICKS}x the timer "
            f"resolution ({resolution:.3g} s)."
        )
    return best


def measure_copy_bandwidth(nbytes=1 << 25, duration=0.5):
    """Measure the large-buffer copy bandwidth in bytes/s."""
    n = max(1, nbytes // 4)
    src = np.ones(n, np.float32)
    dst = np.empty_like(src)
    best = _best_time(lambda: np.copyto(dst, src), duration)
    return src.nbytes / best


def measure_mac_rate(size=128, batch=16, duration=0.5):
    """Measure the batched-matmul rate in MAC/s."""
    rng = np.random.default_rng(0)
    a = rng.standard_normal((batch, size, size), np.float32)
    b = rng.standard_normal((batch, size, size), np.float32)
    out = np.empty_like(a)
    best = _best_time(lambda: np.matmul(a, b, out=out), duration)
    return batch * size**3 / best


def calibrate_platform(params=None, duration=1.0):
    """Measure this machine and get CostParams with its rates."""
    copy_bw = measure_copy_bandwidth(duration=duration / 2)
    mac_rate = measure_mac_rate(duration=duration / 2)
    logger.info(f"Measured copy {copy_bw:.4g} B/s, compute {mac_rate:.4g} MAC/s")
    return calibrate(copy_bw, mac_rate, params)


# %% Sweeps


@dataclass(frozen=True)
class SweepSpec:
    """What to sweep.

    * policies: names from ``POLICY_NAMES``.
    * allocs: the T values for bmc, or None for all powers of two that
      divide N. Mutually exclusive with chunk.
    * chunk: a single chunk size r for bmc.
    * steps: decode steps per run, default N - prompt_len.
    * spec: speculation config, "off", "script:<m>" or "self:<depth>".
    """

    dims: ModelDims
    policies: tuple = POLICY_NAMES
    allocs: tuple = None
    chunk: int = None
    prompt_len: int = 1
    steps: int = None
    spec: str = "off"
    reps: int = 1
    seed: int = 0
    vocab: int = 256
    cprime: float = None
    fmt: str = "json"
    out: str = None

    def __post_init__(self):
        policies = tuple(self.policies)
        for name in policies:
            if name not in POLICY_NAMES:
                raise ValueError(f"Unknown policy {name!r}, use one of {POLICY_NAMES}.")
        object.__setattr__(self, "policies", policies)
        if self.allocs is not None:
            object.__setattr__(self, "allocs", tuple(int(T) for T in self.allocs))
            if self.chunk is not None:
                raise ValueError("SweepSpec takes allocs or chunk, not both.")
        if self.reps < 1:
            raise ValueError(f"SweepSpec.reps must be at least 1, not {self.reps}.")
        if self.fmt not in FORMATS:
            raise ValueError(f"Unknown format {self.fmt!r}, use one of {FORMATS}.")
        if not 1 <= self.prompt_len <= self.dims.max_context:
            raise ValueError(f"prompt_len must be in [1, {self.dims.max_context}].")
        if self.n_steps < 0 or self.prompt_len + self.n_steps > self.dims.max_context:
            raise ValueError(
                f"prompt_len + steps must fit in the max context {self.dims.max_context}."
            )
        proposer_from_name(self.spec)  # validate

    @property
    def n_steps(self):
        if self.steps is None:
            return self.dims.max_context - self.prompt_len
        return self.steps

    def to_config(self):
        """The sweep settings as a plain dict, for the report."""
        return {
            "dims": dict(self.dims.__dict__),
            "policies": list(self.policies),
            "allocs": None if self.allocs is None else list(self.allocs),
            "chunk": self.chunk,
            "prompt_len": self.prompt_len,
            "steps": self.n_steps,
            "spec": self.spec,
            "reps": self.reps,
            "seed": self.seed,
            "vocab": self.vocab,
            "cprime": self.cprime,
        }


def auto_allocs(n):
    """All powers of two in [1, N] that divide N."""
    return [2**e for e in range(int(math.log2(n)) + 1) if n % 2**e == 0]


def sweep_policies(spec):
    """Yield (T, policy) per sweep point. An invalid T raises a
    DimensionError when it is reached, naming the point.
    """
    n = spec.dims.max_context
    for name in spec.policies:
        if name == "iterative":
            yield n, Iterative()
        elif name == "upfront":
            yield 1, Upfront()
        elif spec.chunk is not None:
            if not 1 <= spec.chunk <= n or n % spec.chunk:
                raise DimensionError(f"Invalid sweep point bmc r={spec.chunk} for N={n}.")
            yield n // spec.chunk, Bmc(spec.chunk)
        else:
            for T in auto_allocs(n) if spec.allocs is None else spec.allocs:
                if not 1 <= T <= n or n % T:
                    raise DimensionError(
                        f"Invalid sweep point bmc T={T}: T must divide N={n}."
                    )
                yield T, Bmc.from_allocs(T, n)


def sweep_params(spec, duration=0.5):
    """The CostParams for the model column: from the C' of the sweep, or
    calibrated on this machine.
    """
    dims = spec.dims
    if spec.cprime is not None:
        c1 = dims.batch * dims.layers * dims.hidden
        return CostParams.from_cprime(
            dims.max_context, spec.cprime, c1=c1, elem_bytes=4, groups=dims.groups
        )
    return calibrate_platform(CostParams.from_dims(dims, elem_bytes=4), duration)


def run_point(spec, model, T, policy, params):
    """Run one sweep point: reps decodes, one SweepPoint."""
    prompt = np.random.default_rng(spec.seed).integers(
        0, spec.vocab, (spec.dims.batch, spec.prompt_len)
    )
    reports = []
    for _ in range(spec.reps):
        proposer = proposer_from_name(spec.spec)
        if proposer is None or isinstance(policy, Iterative):
            report = generate(model, policy, prompt, spec.n_steps, spec.seed)
        else:
            report = generate_speculative(
                model, policy, prompt, spec.n_steps, proposer, spec.seed
            )
        reports.append(report)
    ledger = reports[0].ledger
    if any(r.ledger != ledger for r in reports[1:]):
        raise ConsistencyError(f"Ledgers of {policy} differ between repetitions.")
    wall_s = statistics.median(r.wall_s for r in reports)
    tokens = spec.dims.batch * spec.n_steps
    return SweepPoint(
        policy=str(policy),
        T=T,
        r=policy.chunk(spec.dims.max_context),
        wall_s=wall_s,
        copy_elems=ledger.realloc_copy_elems,
        append_elems=ledger.append_write_elems,
        sdpa_macs=ledger.sdpa_macs,
        alloc_events=ledger.alloc_events,
        tokens_per_s=tokens / wall_s if wall_s > 0 else 0.0,
        model_time_s=float(total_time(T, params)),
    )


def iter_sweep(spec, params=None):
    """Yield the SweepPoints of a sweep, one by one."""
    params = sweep_params(spec) if params is None else params
    model = ToyModel(spec.dims, spec.vocab, spec.seed)
    for T, policy in sweep_policies(spec):
        point = run_point(spec, model, T, policy, params)
        logger.info(f"Sweep point {point.policy} T={T}: {point.wall_s:.4g} s")
        yield point


def run_sweep(spec, params=None):
    """Run a full sweep and get its SweepReport."""
    return SweepReport(spec.to_config(), list(iter_sweep(spec, params)))


# %% Commands


def cmd_calibrate(duration=1.0, file=None):
    """Measure the copy bandwidth and the compute rate, print them with
    the derived C', and return the CostParams.
    """
    file = file or sys.stdout
    params = calibrate_platform(duration=duration)
    print(f"alpha_bw = {params.alpha_bw:.6g} B/s", file=file)
    print(f"beta_c = {params.beta_c:.6g} MAC/s", file=file)
    print(f"C' = {params.c_prime:.6g}", file=file)
    return params


def cmd_sweep(spec, params=None, file=None):
    """Run a sweep and write its report to spec.out (or print it).
    If a point fails, the points done so far are still written before
    the error propagates.
    """
    report = SweepReport(spec.to_config())
    try:
        for point in iter_sweep(spec, params):
            report.points.append(point)
    finally:
        if spec.out:
            write_report(report, spec.out, spec.fmt)
        else:
            print(dumps(report, spec.fmt), end="", file=file or sys.stdout)
    return report


def cmd_advise(n, params, sd=False, file=None):
    """Print the optimal number of allocations for a context of N rows.
    With sd, the speculative variant is printed as well.
    """
    file = file or sys.stdout
    params = params.replace(n=n)
    result = optimal_T(params)
    print(f"T* = {result.continuous:.4g}", file=file)
    print(f"T={result.rounded}, r={result.chunk(n)}", file=file)
    if sd:
        result_sd = optimal_T_sd(params)
        print(f"speculative T* = {result_sd.continuous:.4g}", file=file)
        print(f"speculative T={result_sd.rounded}, r={result_sd.chunk(n)}", file=file)
        return result, result_sd
    return result
