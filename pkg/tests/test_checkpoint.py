import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from nfprecond import checkpoint as ck
from nfprecond.errors import FormatError


def sample(rng=None):
    rng = rng or np.random.default_rng(0)
    return ck.Checkpoint("abc", 12, 3, rng.standard_normal(7),
                         {"m": rng.standard_normal(7), "left.0": rng.standard_normal((2, 2))},
                         {"t": 12, "n_samples": 2}, {"note": "x"})


def same(a, b):
    assert (a.digest, a.iteration, a.epoch, a.scalars, a.extra) == (b.digest, b.iteration, b.epoch, b.scalars, b.extra)
    assert a.params.tobytes() == b.params.tobytes()
    assert sorted(a.arrays) == sorted(b.arrays)
    for k in a.arrays:
        assert a.arrays[k].shape == b.arrays[k].shape
        assert a.arrays[k].tobytes() == b.arrays[k].tobytes()


def test_round_trip_is_bit_exact(tmp_path):
    c = sample()
    path = tmp_path / "c.nfpc"
    ck.save(path, c)
    same(ck.load(path, expect_digest="abc"), c)
    assert not (tmp_path / "c.nfpc.tmp").exists()


@settings(max_examples=30, deadline=None)
@given(arr=hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                      elements=st.floats(allow_nan=True, allow_infinity=True, width=64)))
def test_arbitrary_float_arrays_survive(arr):
    c = ck.Checkpoint("d", 0, 0, np.zeros(1), {"a": arr})
    back = ck.from_bytes(ck.to_bytes(c))
    assert back.arrays["a"].shape == arr.shape
    assert back.arrays["a"].tobytes() == np.ascontiguousarray(arr).tobytes()


def test_digest_mismatch():
    with pytest.raises(FormatError, match="different network"):
        ck.from_bytes(ck.to_bytes(sample()), expect_digest="xyz")


def test_corruption_is_detected(tmp_path):
    data = ck.to_bytes(sample())
    for bad in (b"XXXX" + data[4:], data[:-3], data + b"\0" * 8, data[:7]):
        with pytest.raises(FormatError):
            ck.from_bytes(bad)
    with pytest.raises(FormatError):
        ck.load(tmp_path / "none.nfpc")


def test_encoding_is_deterministic():
    assert ck.to_bytes(sample()) == ck.to_bytes(sample())
