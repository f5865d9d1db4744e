import numpy as np

import pybmc
from pybmc import ModelDims, Iterative, Upfront, Bmc, ToyModel
from pybmc import generate, generate_speculative, SelfProposer, ScriptedProposer
from pybmc import SpeculationTree, exact_reference_attention, new_cache
from pybmc import copy_total_closed_form, realloc_copy_closed_form
from pybmc.sim import proposer_from_name, IterationRecord

from pytest import raises, mark
from testutils import max_abs_diff, can_run_slow, run_tests


DIMS = ModelDims(batch=2, layers=2, heads=4, head_dim=16, max_context=128)


def prompt_for(seed, dims=DIMS, length=4, vocab=256):
    return np.random.default_rng(seed).integers(0, vocab, (dims.batch, length))


def test_exact_reference_attention():
    # A single row gets all the weight
    q = np.ones((1, 1, 4), np.float32)
    k = np.ones((1, 1, 4), np.float32)
    v = np.array([[[1, 2, 3, 4]]], np.float32)
    assert exact_reference_attention(q, k, v).tolist() == [[[1, 2, 3, 4]]]

    # Equal scores give the mean
    q = np.zeros((1, 1, 2), np.float32)
    k = np.ones((1, 3, 2), np.float32)
    v = np.array([[[0, 3], [3, 6], [6, 0]]], np.float32)
    out = exact_reference_attention(q, k, v)
    assert out.dtype == np.float32
    assert max_abs_diff(out, [[[3, 3]]]) < 1e-6

    # A mask removes rows
    mask = np.array([[0, -1e9, -1e9]])
    assert max_abs_diff(exact_reference_attention(q, k, v, mask), [[[0, 3]]]) < 1e-6


def test_toy_model():
    dims = DIMS.replace(max_context=8)
    m1 = ToyModel(dims, vocab=32, seed=3)
    m2 = ToyModel(dims, vocab=32, seed=3)
    m3 = ToyModel(dims, vocab=32, seed=4)
    assert np.array_equal(m1.embedding, m2.embedding)
    assert np.array_equal(m1.layers[1]["w2"], m2.layers[1]["w2"])
    assert not np.array_equal(m1.embedding, m3.embedding)
    assert m1.embedding.dtype == np.float32
    assert np.abs(m1.embedding).max() <= 0.1
    assert m1.layers[0]["wk"].shape == (64, 64)
    assert "seed=3" in repr(m1)

    gqa = ToyModel(dims.replace(groups=2), vocab=32)
    assert gqa.layers[0]["wk"].shape == (64, 32)

    with raises(TypeError):
        ToyModel("dims")
    with raises(ValueError):
        ToyModel(dims, vocab=1)
    with raises(ValueError):
        ToyModel(dims, seed=-1)


def test_verify_matches_decode_steps():
    dims = DIMS.replace(max_context=16)
    model = ToyModel(dims, vocab=64, seed=1)
    prompt = prompt_for(1, dims, vocab=64)
    k_rows, v_rows, logits = model.prefill(prompt)

    # Decode a few tokens one by one
    cache = new_cache(dims, Bmc(8), 4, k_rows, v_rows)
    tokens = [np.argmax(logits, axis=-1)]
    step_logits = []
    for _ in range(3):
        out, _ = model.decode_step(cache, tokens[-1])
        step_logits.append(out)
        tokens.append(np.argmax(out, axis=-1))

    # And verify the same tokens as a chain in one pass
    cache = new_cache(dims, Bmc(8), 4, k_rows, v_rows)
    tree = SpeculationTree.chain(np.stack(tokens[:3]))
    tree_logits = model.verify(cache, tree)
    assert tree_logits.shape == (3, dims.batch, 64)
    assert cache.staged == 3
    for j in range(3):
        assert max_abs_diff(tree_logits[j], step_logits[j]) < 1e-4


def test_generate_zero_steps():
    model = ToyModel(DIMS, seed=0)
    report = generate(model, Bmc(16), prompt_for(0), 0)
    assert report.tokens == [[], []]
    assert len(report.next_token) == 2
    assert report.iterations == 0 and report.wall_s == 0
    assert report.ledger.sdpa_macs == 0
    assert report.ledger.realloc_copy_elems == 0
    assert report.ledger.alloc_events == DIMS.layers


def test_generate_report():
    model = ToyModel(DIMS, seed=0)
    report = generate(model, Bmc(16), prompt_for(0), 10, seed=0)
    assert report.policy == "bmc(16)"
    assert report.prompt_len == 4
    assert len(report.tokens) == 2 and all(len(t) == 10 for t in report.tokens)
    assert report.iterations == 10
    assert all(isinstance(r, IterationRecord) for r in report.per_iteration)
    assert set(report.ledgers) == {"cache", "attention"}

    d = report.to_dict()
    assert d["dims"]["max_context"] == 128
    assert d["ledger"] == report.ledger.to_dict()
    assert "wall_s" in d["per_iteration"][0]
    d = report.to_dict(include_timing=False)
    assert "wall_s" not in d["per_iteration"][0]


def test_generate_is_deterministic():
    model = ToyModel(DIMS, seed=5)
    a = generate(model, Bmc(8), prompt_for(5), 40).to_dict(include_timing=False)
    b = generate(model, Bmc(8), prompt_for(5), 40).to_dict(include_timing=False)
    assert a == b
    c = generate(ToyModel(DIMS, seed=5), Bmc(8), prompt_for(5), 40)
    assert c.to_dict(include_timing=False) == a

    # The seed is recorded only
    d = generate(model, Bmc(8), prompt_for(5), 40, seed=9)
    assert d.seed == 9 and d.tokens == c.tokens

    # A 1D prompt is used for all batch rows
    report = generate(model, Upfront(), [1, 2, 3], 5)
    assert report.tokens[0] == report.tokens[1]


@mark.parametrize("seed", list(range(20)))
def test_policies_give_equal_tokens(seed):
    model = ToyModel(DIMS, vocab=256, seed=seed)
    prompt = prompt_for(seed)
    steps = 96

    expected = generate(model, Iterative(), prompt, steps, seed)
    runs = [
        generate(model, Upfront(), prompt, steps, seed),
        generate(model, Bmc(8), prompt, steps, seed),
        generate(model, Bmc(16), prompt, steps, seed),
        generate(model, Bmc(32), prompt, steps, seed),
        generate_speculative(model, Bmc(16), prompt, steps, SelfProposer(4), seed),
        generate_speculative(
            model, Bmc(8), prompt, steps, ScriptedProposer([1, 3, 2]), seed
        ),
        generate_speculative(
            model, Upfront(), prompt, steps, SelfProposer(3, skip_layers=1), seed
        ),
    ]
    for report in runs:
        assert report.tokens == expected.tokens, report.policy
        assert report.next_token == expected.next_token, report.policy


@mark.parametrize("policy", [Iterative(), Upfront(), Bmc(8), Bmc(16), Bmc(32)])
def test_ledger_matches_closed_form(policy):
    dims = DIMS.replace(batch=1)
    model = ToyModel(dims, seed=2)
    report = generate(model, policy, prompt_for(2, dims, length=32), 96)
    cache_ledger = report.ledgers["cache"]
    assert cache_ledger.realloc_copy_elems == realloc_copy_closed_form(policy, dims, 32)
    assert cache_ledger.moved_elems == copy_total_closed_form(policy, dims, 32)
    assert cache_ledger.sdpa_macs == 0


def test_ledger_conservation():
    model = ToyModel(DIMS, seed=0)
    report = generate(model, Upfront(), prompt_for(0), 20)
    cache_ledger, attn = report.ledgers["cache"], report.ledgers["attention"]
    assert report.ledger == cache_ledger + attn
    assert attn.moved_elems == 0 and attn.alloc_events == 0
    # Every step attends the full capacity in every layer
    assert attn.sdpa_macs == 20 * DIMS.layers * 2 * DIMS.batch * DIMS.hidden * 128


def test_realloc_flags():
    model = ToyModel(DIMS, seed=0)
    for prompt_len in (1, 4, 32):
        prompt = prompt_for(0, length=prompt_len)
        steps = 128 - prompt_len
        for r in (8, 16, 32):
            report = generate(model, Bmc(r), prompt, steps)
            flags = [rec.realloc for rec in report.per_iteration]
            assert flags == [(prompt_len + i) % r == 0 for i in range(steps)]
        report = generate(model, Upfront(), prompt, steps)
        assert not any(rec.realloc for rec in report.per_iteration)
        report = generate(model, Iterative(), prompt, steps)
        assert all(rec.realloc for rec in report.per_iteration)


def test_scripted_single_acceptance_is_plain_decoding():
    model = ToyModel(DIMS, seed=1)
    prompt = prompt_for(1)
    plain = generate(model, Bmc(16), prompt, 40)
    spec = generate_speculative(model, Bmc(16), prompt, 40, ScriptedProposer([1]))
    assert spec.tokens == plain.tokens
    assert spec.iterations == plain.iterations == 40
    assert all(rec.accepted == 1 for rec in spec.per_iteration)


def test_scripted_acceptance_lengths():
    model = ToyModel(DIMS, seed=1)
    spec = generate_speculative(
        model, Upfront(), prompt_for(1), 30, ScriptedProposer([3, 1, 2])
    )
    accepted = [rec.accepted for rec in spec.per_iteration]
    assert sum(accepted) == 30
    assert accepted[:6] == [3, 1, 2, 3, 1, 2]
    assert all(rec.staged == 4 for rec in spec.per_iteration[:3])


def test_self_speculation_saves_iterations():
    model = ToyModel(DIMS, seed=3)
    prompt = prompt_for(3)
    plain = generate(model, Bmc(16), prompt, 64)
    spec = generate_speculative(model, Bmc(16), prompt, 64, SelfProposer(4))
    assert spec.tokens == plain.tokens
    assert spec.iterations < plain.iterations
    assert sum(rec.accepted for rec in spec.per_iteration) == 64
    assert max(rec.accepted for rec in spec.per_iteration) > 1


def test_speculation_never_reallocates():
    model = ToyModel(DIMS, seed=4)
    prompt = prompt_for(4)
    plain = generate(model, Bmc(8), prompt, 100)
    spec = generate_speculative(model, Bmc(8), prompt, 100, SelfProposer(6))
    for rec in spec.per_iteration:
        if rec.staged:
            assert not rec.realloc
            assert rec.wasted >= 0
    # Once the padded rows are used up, the regular path reallocates
    assert any(rec.realloc for rec in spec.per_iteration)
    a, b = spec.ledgers["cache"], plain.ledgers["cache"]
    assert a.alloc_events == b.alloc_events
    assert a.realloc_copy_elems == b.realloc_copy_elems


def test_generate_fails():
    model = ToyModel(DIMS, seed=0)
    with raises(ValueError):
        generate_speculative(model, Iterative(), prompt_for(0), 4, SelfProposer(2))
    with raises(pybmc.CapacityExceededError):
        generate(model, Bmc(8), prompt_for(0), 125)
    with raises(ValueError):
        generate(model, Bmc(8), np.zeros((2, 0), np.int64), 4)
    with raises(ValueError):
        generate(model, Bmc(8), np.zeros((3, 2), np.int64), 4)
    with raises(ValueError):
        generate(model, Bmc(8), prompt_for(0), -1)


def test_generate_numeric_error():
    model = ToyModel(DIMS.replace(batch=1), seed=0)
    prompt = [1, 2, 3]
    first = generate(model, Upfront(), prompt, 1).tokens[0][0]

    model.embedding[first] = np.nan
    with raises(pybmc.NumericError) as err:
        generate(model, Upfront(), prompt, 4)
    assert err.value.iteration == (-1 if first in prompt else 0)

    model.embedding[:] = np.nan
    with raises(pybmc.NumericError) as err:
        generate(model, Upfront(), prompt, 4)
    assert err.value.iteration == -1


def test_proposer_from_name():
    assert proposer_from_name("off") is None
    p = proposer_from_name("script:2,3")
    assert isinstance(p, ScriptedProposer) and p.lengths == [2, 3] and p.depth == 3
    p = proposer_from_name("self:4")
    assert type(p) is SelfProposer and p.depth == 4 and p.skip_layers == 0
    assert proposer_from_name("self:4:1").skip_layers == 1
    for name in ["", "on", "off:1", "script:", "script:0", "self:x", "self:-1"]:
        with raises(ValueError):
            proposer_from_name(name)


@mark.slow
@mark.skipif(not can_run_slow, reason="wall-clock test")
def test_bmc_is_faster_than_iterative():
    from pybmc.bench import calibrate_platform

    dims = ModelDims(batch=8, layers=2, heads=4, head_dim=64, max_context=2048)
    params = calibrate_platform(pybmc.CostParams.from_dims(dims, elem_bytes=4))
    T = pybmc.optimal_T(params).rounded
    model = ToyModel(dims, seed=0)
    prompt = prompt_for(0, dims, length=1)
    steps = dims.max_context - 1

    bmc = generate(model, Bmc.from_allocs(T, dims.max_context), prompt, steps)
    iterative = generate(model, Iterative(), prompt, steps)
    assert bmc.tokens == iterative.tokens
    assert bmc.wall_s < iterative.wall_s
    assert bmc.ledger.realloc_copy_elems < iterative.ledger.realloc_copy_elems


if __name__ == "__main__":
    run_tests(globals())
