import pybmc

from pytest import raises


def test_api():
    assert isinstance(pybmc.__version__, str)
    assert pybmc.version_info[0] == 0
    assert issubclass(pybmc.KvCache, object)

    for name in "new_cache append_token sdpa build_bias_mask generate".split():
        assert callable(getattr(pybmc, name))
    for name in "optimal_T optimal_T_sd total_time total_time_sd calibrate".split():
        assert callable(getattr(pybmc, name))
    for name in "admit_candidates place_candidates tree_mask verify_and_commit".split():
        assert callable(getattr(pybmc, name))


def test_errors():
    for name in [
        "CapacityExceededError",
        "DivisibilityError",
        "BoundsError",
        "DimensionError",
        "PlacementError",
        "ConsistencyError",
        "CalibrationError",
        "NumericError",
    ]:
        cls = getattr(pybmc, name)
        assert issubclass(cls, pybmc.BmcError)

    # Some errors are also builtin errors
    assert issubclass(pybmc.DivisibilityError, ValueError)
    assert issubclass(pybmc.DimensionError, ValueError)
    assert issubclass(pybmc.BoundsError, IndexError)

    err = pybmc.NumericError("nan", iteration=7)
    assert err.iteration == 7
    assert "nan" in str(err)


def test_ledger():
    a = pybmc.CostLedger(realloc_copy_elems=1, sdpa_macs=2)
    b = pybmc.CostLedger(append_write_elems=3, alloc_events=4)
    c = pybmc.CostLedger(alloc_bytes=5, sdpa_macs=6)

    # Merging is associative and commutative
    assert (a + b) + c == a + (b + c)
    assert a + b == b + a
    assert (a + b + c).to_dict() == {
        "realloc_copy_elems": 1,
        "append_write_elems": 3,
        "sdpa_macs": 8,
        "alloc_events": 4,
        "alloc_bytes": 5,
    }
    assert (a + b).moved_elems == 4

    # Merging does not touch the operands
    assert a.sdpa_macs == 2

    d = a.copy()
    d.add(sdpa_macs=10)
    assert d.sdpa_macs == 12 and a.sdpa_macs == 2


def test_ledger_fails():
    ledger = pybmc.CostLedger()
    with raises(ValueError):
        ledger.add(sdpa_macs=-1)
    with raises(AttributeError):
        ledger.add(foo=1)
    with raises(TypeError):
        ledger + 3


if __name__ == "__main__":
    from testutils import run_tests

    run_tests(globals())
