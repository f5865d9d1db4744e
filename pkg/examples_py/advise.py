"""
Find the number of allocations that minimizes the modeled decode time,
and show how it grows with the context length.
"""

from pybmc import CostParams, optimal_T, total_time


def main():
    results = {}
    for n in (512, 2048, 8192):
        params = CostParams.from_cprime(n, 0.1)
        opt = optimal_T(params)
        speedup = total_time(n, params) / total_time(opt.rounded, params)
        results[n] = opt
        print(
            f"N={n:>5}: T*={opt.continuous:6.2f}  T={opt.rounded:>3}, "
            f"r={opt.chunk(n):>4}  modeled speedup over iterative {speedup:.1f}x"
        )
    return results


if __name__ == "__main__":
    main()
