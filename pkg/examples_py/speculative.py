"""
Speculative decoding in the padded rows of a Bmc cache. A draft that
skips the last layer proposes chains of candidates, the full model
verifies them in one batched pass. The result equals plain decoding.
"""

import pybmc


def main():
    dims = pybmc.ModelDims(batch=2, layers=2, heads=4, head_dim=16, max_context=64)
    model = pybmc.ToyModel(dims, vocab=64, seed=3)
    prompt = [[1, 2, 3, 4], [9, 8, 7, 6]]
    steps = 40

    plain = pybmc.generate(model, pybmc.Bmc(16), prompt, steps)
    proposer = pybmc.SelfProposer(depth=4, skip_layers=1)
    spec = pybmc.generate_speculative(model, pybmc.Bmc(16), prompt, steps, proposer)

    assert spec.tokens == plain.tokens
    accepted = [rec.accepted for rec in spec.per_iteration]
    print(f"plain: {plain.iterations} iterations, speculative: {spec.iterations}")
    print(f"accepted per iteration: {accepted}")
    return spec


if __name__ == "__main__":
    main()
